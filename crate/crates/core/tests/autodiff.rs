use orojar_core::tensor::{gradient_check, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[path = "common/op_cases.rs"]
mod op_cases;
use op_cases::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Direct summation of the transposed-convolution definition.
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((bi * ci + c) * h + iy) * wd + ix];
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((c * co + o) * k + ky) * k + kx];
                                out[((bi * co + o) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out).unwrap()
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    assert_eq!(tape.shape(c), &[2, 1]);
}

#[test]
fn leaky_relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn conv_transpose_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 1, 2, 2], -1.0, 1.0);
    let w = random(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv2d_transpose(xv, wv, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    let want = conv_transpose_oracle(&x, &w, 2, 1);
    assert!(tape.value(y).max_abs_diff(&want) < 1e-14);

    // multi-channel, batched
    let x = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv2d_transpose(xv, wv, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 8, 8]);
    assert!(tape.value(y).max_abs_diff(&conv_transpose_oracle(&x, &w, 2, 1)) < 1e-12);
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 4, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    assert!(tape.value(y).max_abs_diff(&conv_oracle(&x, &w, 2, 1)) < 1e-12);
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::zeros(&[3]));
    let err = tape.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    let img = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 1, 4, 4]));
    let err = tape.conv2d_transpose(img, w, 2, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d_transpose"), "{err}");
}

#[test]
fn backward_examples() {
    // root = sum(W·z), W = [[1,2],[3,4]], z = [1,1] -> dz = [4, 6]
    let mut tape = Tape::new();
    let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let z = tape.leaf(t(&[2, 1], &[1.0, 1.0]), true);
    let wz = tape.matmul(w, z).unwrap();
    let root = tape.sum(wz);
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[4.0, 6.0]);

    // constant root -> zero gradients
    let mut tape = Tape::new();
    let z = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let c = tape.constant(Tensor::scalar(5.0));
    let g = tape.backward(c).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[0.0, 0.0]);

    // sum(tanh(z)) at 0 -> 1
    let mut tape = Tape::new();
    let z = tape.leaf(t(&[2], &[0.0, 0.0]), true);
    let y = tape.tanh(z);
    let root = tape.sum(y);
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut tape = Tape::new();
    let z = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = tape.tanh(z);
    assert!(tape.backward(y).is_err());
}

#[test]
fn gradient_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[8], -1.0, 1.0);
    let err = gradient_check(
        |tp, v| {
            let s = tp.square(v);
            Ok(tp.sum(s))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let err = gradient_check(|tp, v| Ok(tp.sum(v)), &x, 1e-4).unwrap();
    assert!(err < 1e-10, "{err}");

    // keep every coordinate at least one step away from the kink
    let x = Tensor::from_fn(&[8], |i| if i % 2 == 0 { 0.5 + i as f64 * 0.1 } else { -0.3 - i as f64 * 0.1 });
    let err = gradient_check(
        |tp, v| {
            let y = tp.leaky_relu(v, 0.2);
            Ok(tp.sum(y))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Every op kind agrees with central differences at 100 random points
/// (64-bit, 1e-4 relative tolerance).
#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in op_cases() {
        let worst = worst_error(&case, &mut rng, 100);
        assert!(worst < 1e-4, "{}: max relative error {worst:e}", case.name);
    }
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 3], -1.0, 1.0);
    let f1 = |tp: &mut Tape<f64>, v: Var| -> Var {
        let y = tp.tanh(v);
        tp.sum(y)
    };
    let f2 = |tp: &mut Tape<f64>, v: Var| -> Var {
        let y = tp.square(v);
        let y = tp.sin(y);
        tp.sum(y)
    };
    let grad = |f: &dyn Fn(&mut Tape<f64>, Var) -> Var| {
        let mut tp = Tape::new();
        let v = tp.leaf(x.clone(), true);
        let r = f(&mut tp, v);
        tp.backward(r).unwrap().get(v).unwrap().clone()
    };
    let g1 = grad(&f1);
    let g2 = grad(&f2);
    let both = grad(&|tp, v| {
        let a = f1(tp, v);
        let b = f2(tp, v);
        tp.add(a, b).unwrap()
    });
    for i in 0..x.len() {
        assert!((both.data()[i] - (g1.data()[i] + g2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let w = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let mut tp = Tape::<f32>::new();
        let xv = tp.leaf(x.cast(), true);
        let wv = tp.leaf(w.cast(), true);
        let y = tp.conv2d_transpose(xv, wv, 2, 1).unwrap();
        let y = tp.tanh(y);
        let r = tp.sum(y);
        let g = tp.backward(r).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.data().iter().zip(a2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn rows_are_independent_of_batch_companions() {
    // The same row yields identical bits whether computed alone or in a larger batch.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[3, 2, 4, 4], -1.0, 1.0).cast::<f32>();
    let w = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0).cast::<f32>();
    let mut tp = Tape::<f32>::new();
    let wv = tp.constant(w);
    let all = tp.constant(x.clone());
    let first = tp.slice_rows(all, 0, 1).unwrap();
    let ya = tp.conv2d_transpose(all, wv, 2, 1).unwrap();
    let y1 = tp.conv2d_transpose(first, wv, 2, 1).unwrap();
    let n = tp.value(y1).len();
    assert_eq!(&tp.value(ya).data()[..n], tp.value(y1).data());
}
