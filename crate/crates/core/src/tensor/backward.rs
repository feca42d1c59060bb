//! Vector–Jacobian products for every recorded op.

use super::kernels::{self, ConvGeometry};
use super::ops::{sigmoid, transpose_geometry};
use super::tape::{Node, Op, Tape, Var};
use super::{Real, Tensor};

type Grads<T> = [Option<Vec<T>>];

pub(crate) fn propagate<T: Real>(tape: &Tape<T>, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut Grads<T>) {
    let nodes = &tape.nodes;
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    let acc = |grads: &mut Grads<T>, v: Var, d: &[T]| Tape::accumulate(grads, nodes, v, d);
    let elementwise = |grads: &mut Grads<T>, v: Var, f: &dyn Fn(T, T, T) -> T| {
        if needs(v) {
            let x = val(v);
            let d: Vec<T> = g
                .iter()
                .zip(x)
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect();
            acc(grads, v, &d);
        }
    };

    match op {
        Op::Add(a, b) => {
            acc(grads, *a, g);
            acc(grads, *b, g);
        }
        Op::Sub(a, b) => {
            acc(grads, *a, g);
            if needs(*b) {
                let d: Vec<T> = g.iter().map(|&x| -x).collect();
                acc(grads, *b, &d);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let d: Vec<T> = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                acc(grads, *a, &d);
            }
            if needs(*b) {
                let d: Vec<T> = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                acc(grads, *b, &d);
            }
        }
        Op::AddRow(a, row) => {
            acc(grads, *a, g);
            if needs(*row) {
                let n = val(*row).len();
                let mut d = vec![T::zero(); n];
                for chunk in g.chunks(n) {
                    d.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
                }
                acc(grads, *row, &d);
            }
        }
        Op::AddChannel(a, bias) => {
            acc(grads, *a, g);
            if needs(*bias) {
                let c = val(*bias).len();
                let spatial = out.row_len() / c;
                let mut d = vec![T::zero(); c];
                for (i, chunk) in g.chunks(spatial).enumerate() {
                    d[i % c] += chunk.iter().copied().sum::<T>();
                }
                acc(grads, *bias, &d);
            }
        }
        Op::MulChannel(a, factor) => {
            let f = val(*factor);
            let c = f.len();
            let spatial = out.row_len() / c;
            if needs(*a) {
                let mut d = g.to_vec();
                for (i, chunk) in d.chunks_mut(spatial).enumerate() {
                    let fv = f[i % c];
                    chunk.iter_mut().for_each(|x| *x *= fv);
                }
                acc(grads, *a, &d);
            }
            if needs(*factor) {
                let x = val(*a);
                let mut d = vec![T::zero(); c];
                for (i, (gc, xc)) in g.chunks(spatial).zip(x.chunks(spatial)).enumerate() {
                    d[i % c] += kernels::dot(gc, xc);
                }
                acc(grads, *factor, &d);
            }
        }
        Op::Scale(a, c) => {
            let d: Vec<T> = g.iter().map(|&x| x * *c).collect();
            acc(grads, *a, &d);
        }
        Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, g),
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if needs(*a) {
                let mut d = vec![T::zero(); m * k];
                kernels::matmul_nt_acc(g, val(*b), &mut d, m, n, k);
                acc(grads, *a, &d);
            }
            if needs(*b) {
                let mut d = vec![T::zero(); k * n];
                kernels::matmul_tn(val(*a), g, &mut d, m, k, n);
                acc(grads, *b, &d);
            }
        }
        Op::Transpose(a) => {
            let s = out.shape();
            let (r, c) = (s[0], s[1]);
            let d: Vec<T> = (0..r * c).map(|i| g[(i % r) * c + i / r]).collect();
            acc(grads, *a, &d);
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            padding,
        } => conv2d_backward(nodes, grads, *input, *weight, *stride, *padding, out, g),
        Op::ConvTranspose2d {
            input,
            weight,
            stride,
            padding,
        } => conv_transpose_backward(nodes, grads, *input, *weight, *stride, *padding, g),
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            elementwise(grads, *a, &|gi, xi, _| if xi > T::zero() { gi } else { gi * s });
        }
        Op::Tanh(a) => elementwise(grads, *a, &|gi, _, yi| gi * (T::one() - yi * yi)),
        Op::Sigmoid(a) => elementwise(grads, *a, &|gi, _, yi| gi * yi * (T::one() - yi)),
        Op::Softplus(a) => elementwise(grads, *a, &|gi, xi, _| gi * sigmoid(xi)),
        Op::Sin(a) => elementwise(grads, *a, &|gi, xi, _| gi * xi.cos()),
        Op::Square(a) => elementwise(grads, *a, &|gi, xi, _| gi * (xi + xi)),
        Op::BatchNorm {
            input,
            gamma,
            beta,
            stat_rows,
            inv_std,
            stats,
        } => {
            let shape = nodes[input.0].value.shape();
            let c = shape[1];
            let spatial: usize = shape[2..].iter().product();
            let x = val(*input);
            let gam = val(*gamma);
            let mean = &stats.mean;
            let n_stat = T::lit(stats.count as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            // Σ ĝ and Σ ĝ·(x − μ) over all rows, with ĝ = g·γ
            let mut sum_gh = vec![T::zero(); c];
            let mut sum_ghx = vec![T::zero(); c];
            for (i, (gc, xc)) in g.chunks(spatial).zip(x.chunks(spatial)).enumerate() {
                let ch = i % c;
                let (mu, inv) = (mean[ch], inv_std[ch]);
                for (&gi, &xi) in gc.iter().zip(xc) {
                    let centered = xi - mu;
                    dbeta[ch] += gi;
                    dgamma[ch] += gi * centered * inv;
                    sum_gh[ch] += gi;
                    sum_ghx[ch] += gi * centered;
                }
            }
            if needs(*input) {
                let mut d = vec![T::zero(); x.len()];
                let half = T::lit(0.5);
                let two = T::lit(2.0);
                for (i, ((dc, gc), xc)) in d
                    .chunks_mut(spatial)
                    .zip(g.chunks(spatial))
                    .zip(x.chunks(spatial))
                    .enumerate()
                {
                    let ch = i % c;
                    let row = i / c;
                    let (mu, inv, gm) = (mean[ch], inv_std[ch], gam[ch]);
                    let dmean = -inv * gm * sum_gh[ch];
                    let dvar = -half * inv * inv * inv * gm * sum_ghx[ch];
                    for ((di, &gi), &xi) in dc.iter_mut().zip(gc).zip(xc) {
                        *di = gi * gm * inv;
                        if row < *stat_rows {
                            *di += dmean / n_stat + dvar * two * (xi - mu) / n_stat;
                        }
                    }
                }
                acc(grads, *input, &d);
            }
            acc(grads, *gamma, &dgamma);
            acc(grads, *beta, &dbeta);
        }
        Op::Slice { input, axis, start } => {
            if needs(*input) {
                let s = nodes[input.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); nodes[input.0].value.len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(grads, *input, &d);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p.0].value.len();
                acc(grads, p, &g[off..off + n]);
                off += n;
            }
        }
        Op::Sum(a) => {
            let d = vec![g[0]; nodes[a.0].value.len()];
            acc(grads, *a, &d);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len();
            let d = vec![g[0] / T::lit(n as f64); n];
            acc(grads, *a, &d);
        }
        Op::SumRows(a) => {
            let t = &nodes[a.0].value;
            let n = t.row_len();
            let d: Vec<T> = (0..t.len()).map(|i| g[i / n]).collect();
            acc(grads, *a, &d);
        }
        Op::MaxRows(a, arg) => {
            let t = &nodes[a.0].value;
            let n = t.row_len();
            let mut d = vec![T::zero(); t.len()];
            for (r, &j) in arg.iter().enumerate() {
                d[r * n + j] = g[r];
            }
            acc(grads, *a, &d);
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let c = probs.len() / labels.len();
            let scale = g[0] / T::lit(labels.len() as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * c + l] -= scale;
            }
            acc(grads, *logits, &d);
        }
        Op::GramSchmidt { input, r } => {
            let s = out.shape();
            let d = gram_schmidt_backward(out.data(), r, g, s[0], s[1]);
            acc(grads, *input, &d);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut Grads<T>,
    input: Var,
    weight: Var,
    stride: usize,
    padding: usize,
    out: &Tensor<T>,
    g: &[T],
) {
    let si = nodes[input.0].value.shape();
    let sw = nodes[weight.0].value.shape();
    let (b, co) = (si[0], sw[0]);
    let geo = ConvGeometry {
        channels: si[1],
        height: si[2],
        width: si[3],
        kernel: sw[2],
        stride,
        padding,
    };
    let ohw = out.shape()[2] * out.shape()[3];
    let w = nodes[weight.0].value.data();
    let rows = geo.col_rows();
    let gr = kernels::batch_to_rows(g, b, co, ohw);
    if nodes[weight.0].requires_grad {
        let cols = kernels::im2col_batch(nodes[input.0].value.data(), b, geo);
        let mut dw = vec![T::zero(); w.len()];
        kernels::matmul_nt_acc(&gr, &cols, &mut dw, co, b * ohw, rows);
        Tape::accumulate(grads, nodes, weight, &dw);
    }
    if nodes[input.0].requires_grad {
        let mut dcols = vec![T::zero(); rows * b * ohw];
        kernels::matmul_tn(w, &gr, &mut dcols, co, rows, b * ohw);
        let dx = kernels::col2im_batch(&dcols, b, geo);
        Tape::accumulate(grads, nodes, input, &dx);
    }
}

fn conv_transpose_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut Grads<T>,
    input: Var,
    weight: Var,
    stride: usize,
    padding: usize,
    g: &[T],
) {
    let si = nodes[input.0].value.shape();
    let sw = nodes[weight.0].value.shape();
    let geo = transpose_geometry(si, sw, stride, padding).expect("validated in forward");
    let (b, ci) = (si[0], si[1]);
    let hw = si[2] * si[3];
    let rows = geo.col_rows();
    let w = nodes[weight.0].value.data();
    let dcols = kernels::im2col_batch(g, b, geo);
    if nodes[weight.0].requires_grad {
        let x = kernels::batch_to_rows(nodes[input.0].value.data(), b, ci, hw);
        let mut dw = vec![T::zero(); w.len()];
        kernels::matmul_nt_acc(&x, &dcols, &mut dw, ci, b * hw, rows);
        Tape::accumulate(grads, nodes, weight, &dw);
    }
    if nodes[input.0].requires_grad {
        let mut dx = vec![T::zero(); ci * b * hw];
        kernels::matmul_nn(w, &dcols, &mut dx, ci, rows, b * hw);
        Tape::accumulate(grads, nodes, input, &kernels::rows_to_batch(&dx, b, ci, hw));
    }
}

/// Reverse-mode rule for the thin QR factor `Q` of `A = QR`:
/// `Ā = (Q̄ + Q·copyltu(−Q̄ᵀQ))·R⁻ᵀ`.
fn gram_schmidt_backward<T: Real>(q: &[T], r: &[T], gq: &[T], m: usize, n: usize) -> Vec<T> {
    // M = −Q̄ᵀQ  [n, n]
    let mut mm = vec![T::zero(); n * n];
    kernels::matmul_tn(gq, q, &mut mm, m, n, n);
    mm.iter_mut().for_each(|x| *x = -*x);
    let sym: Vec<T> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if i >= j {
                mm[i * n + j]
            } else {
                mm[j * n + i]
            }
        })
        .collect();
    let mut bmat = vec![T::zero(); m * n];
    kernels::matmul_nn(q, &sym, &mut bmat, m, n, n);
    bmat.iter_mut().zip(gq).for_each(|(b, &g)| *b += g);
    // Solve X·Rᵀ = B row by row (R upper triangular).
    for row in bmat.chunks_mut(n) {
        for i in (0..n).rev() {
            let mut v = row[i];
            for j in i + 1..n {
                v -= row[j] * r[i * n + j];
            }
            row[i] = v / r[i * n + i];
        }
    }
    bmat
}
