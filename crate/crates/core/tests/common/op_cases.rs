use orojar_core::tensor::{gradient_check, Tape, Tensor, Var};
use orojar_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random linear functional of `y`, so no coordinate has a structurally zero gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

pub type Builder = Box<dyn Fn(&mut Tape<f64>, Var, &[Tensor<f64>]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    pub aux_shapes: Vec<Vec<usize>>,
    pub build: Builder,
    /// Keep inputs this far away from zero (kinks of piecewise-linear ops).
    pub kink_margin: f64,
}

pub fn op_cases() -> Vec<OpCase> {
    let unary = |name: &'static str, f: fn(&mut Tape<f64>, Var) -> Var| OpCase {
        name,
        input_shape: vec![2, 3],
        aux_shapes: vec![],
        build: Box::new(move |tp, x, _| Ok(f(tp, x))),
        kink_margin: 0.0,
    };
    vec![
        OpCase {
            name: "matmul(lhs)",
            input_shape: vec![3, 4],
            aux_shapes: vec![vec![4, 2]],
            build: Box::new(|tp, x, aux| {
                let b = tp.constant(aux[0].clone());
                tp.matmul(x, b)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "matmul(rhs)",
            input_shape: vec![4, 2],
            aux_shapes: vec![vec![3, 4]],
            build: Box::new(|tp, x, aux| {
                let a = tp.constant(aux[0].clone());
                tp.matmul(a, x)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "add",
            input_shape: vec![2, 3],
            aux_shapes: vec![vec![2, 3]],
            build: Box::new(|tp, x, aux| {
                let b = tp.constant(aux[0].clone());
                let y = tp.add(x, b)?;
                tp.mul(y, y)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "sub/mul",
            input_shape: vec![2, 3],
            aux_shapes: vec![vec![2, 3]],
            build: Box::new(|tp, x, aux| {
                let b = tp.constant(aux[0].clone());
                let d = tp.sub(b, x)?;
                tp.mul(d, x)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "add_row",
            input_shape: vec![3],
            aux_shapes: vec![vec![4, 3]],
            build: Box::new(|tp, x, aux| {
                let a = tp.constant(aux[0].clone());
                let y = tp.add_row(a, x)?;
                Ok(tp.square(y))
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "add_channel/mul_channel",
            input_shape: vec![3],
            aux_shapes: vec![vec![2, 3, 2, 2]],
            build: Box::new(|tp, x, aux| {
                let a = tp.constant(aux[0].clone());
                let y = tp.mul_channel(a, x)?;
                let y = tp.add_channel(y, x)?;
                Ok(tp.square(y))
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "conv2d(input)",
            input_shape: vec![2, 2, 6, 6],
            aux_shapes: vec![vec![3, 2, 4, 4]],
            build: Box::new(|tp, x, aux| {
                let w = tp.constant(aux[0].clone());
                tp.conv2d(x, w, 2, 1)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "conv2d(weight)",
            input_shape: vec![3, 2, 4, 4],
            aux_shapes: vec![vec![2, 2, 6, 6]],
            build: Box::new(|tp, w, aux| {
                let x = tp.constant(aux[0].clone());
                tp.conv2d(x, w, 2, 1)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "conv2d_transpose(input)",
            input_shape: vec![2, 3, 3, 3],
            aux_shapes: vec![vec![3, 2, 4, 4]],
            build: Box::new(|tp, x, aux| {
                let w = tp.constant(aux[0].clone());
                tp.conv2d_transpose(x, w, 2, 1)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "conv2d_transpose(weight)",
            input_shape: vec![3, 2, 4, 4],
            aux_shapes: vec![vec![2, 3, 3, 3]],
            build: Box::new(|tp, w, aux| {
                let x = tp.constant(aux[0].clone());
                tp.conv2d_transpose(x, w, 2, 1)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "leaky_relu",
            input_shape: vec![2, 3],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| Ok(tp.leaky_relu(x, 0.2))),
            kink_margin: 1e-3,
        },
        unary("tanh", |tp, x| tp.tanh(x)),
        unary("sigmoid", |tp, x| tp.sigmoid(x)),
        unary("softplus", |tp, x| tp.softplus(x)),
        unary("sin", |tp, x| tp.sin(x)),
        unary("square", |tp, x| tp.square(x)),
        OpCase {
            name: "batchnorm(input, shared stats)",
            input_shape: vec![5, 2, 2, 2],
            aux_shapes: vec![vec![2], vec![2]],
            build: Box::new(|tp, x, aux| {
                let g = tp.constant(aux[0].clone());
                let b = tp.constant(aux[1].clone());
                tp.batchnorm(x, g, b, 3)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "batchnorm(gamma)",
            input_shape: vec![3],
            aux_shapes: vec![vec![4, 3]],
            build: Box::new(|tp, g, aux| {
                let x = tp.constant(aux[0].clone());
                let b = tp.constant(Tensor::zeros(&[3]));
                tp.batchnorm(x, g, b, 4)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "batchnorm_eval",
            input_shape: vec![3, 2, 2],
            aux_shapes: vec![vec![2], vec![2]],
            build: Box::new(|tp, x, aux| {
                let g = tp.constant(aux[0].clone());
                let b = tp.constant(aux[1].clone());
                tp.batchnorm_eval(x, g, b, &[0.1, -0.2], &[0.5, 1.5])
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "reshape/transpose",
            input_shape: vec![2, 3],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| {
                let y = tp.transpose(x)?;
                let y = tp.reshape(y, &[6])?;
                Ok(tp.square(y))
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "slice",
            input_shape: vec![3, 4, 2],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| {
                let y = tp.slice(x, 1, 1, 2)?;
                Ok(tp.square(y))
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "concat_rows",
            input_shape: vec![2, 3],
            aux_shapes: vec![vec![1, 3]],
            build: Box::new(|tp, x, aux| {
                let c = tp.constant(aux[0].clone());
                let s = tp.square(x);
                tp.concat_rows(&[c, x, s])
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "sum_rows/mean",
            input_shape: vec![3, 4],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| {
                let s = tp.square(x);
                let r = tp.sum_rows(s);
                let m = tp.mean(s);
                let m = tp.reshape(m, &[1])?;
                let r2 = tp.square(r);
                let rm = tp.slice(r2, 0, 0, 1)?;
                tp.add(rm, m)
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "max_rows",
            input_shape: vec![3, 5],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| {
                let s = tp.tanh(x);
                Ok(tp.max_rows(s))
            }),
            kink_margin: 0.0,
        },
        OpCase {
            name: "softmax_cross_entropy",
            input_shape: vec![4, 3],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| tp.softmax_cross_entropy(x, &[0, 2, 1, 2])),
            kink_margin: 0.0,
        },
        OpCase {
            name: "gram_schmidt",
            input_shape: vec![4, 3],
            aux_shapes: vec![],
            build: Box::new(|tp, x, _| tp.gram_schmidt(x)),
            kink_margin: 0.0,
        },
    ]
}

/// Largest relative error of `case` against central differences over
/// `trials` random points.
pub fn worst_error(case: &OpCase, rng: &mut ChaCha8Rng, trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let aux: Vec<Tensor<f64>> = case.aux_shapes.iter().map(|s| random(rng, s, -1.0, 1.0)).collect();
        let mut x = random(rng, &case.input_shape, -1.0, 1.0);
        if case.kink_margin > 0.0 {
            x = x.map(|v| if v.abs() < case.kink_margin * 10.0 { v.signum() * 0.5 } else { v });
        }
        let seed = 1000 + trial;
        let build = &case.build;
        let err = gradient_check(
            |tp, v| {
                let y = build(tp, v, &aux)?;
                project(tp, y, seed)
            },
            &x,
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}
