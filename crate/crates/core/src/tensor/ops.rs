//! Forward definitions. Each op validates shapes, computes its value and
//! records itself when any input requires a gradient.

use super::kernels::{self, ConvGeometry};
use super::tape::{BatchNormStats, Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

fn same_shape<T: Real>(t: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", t.shape(a), t.shape(b)),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcasts `row` (shape `[F]` or `[1, F]`) over the leading axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(row).len();
        let x = self.value(a);
        if x.row_len() != n {
            return Err(Error::shape(
                "add_row",
                format!("rows of {:?} vs bias {:?}", x.shape(), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o += b);
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Adds a per-channel bias `[C]` to `a` of shape `[B, C, ...]`.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let c = self.value(bias).len();
        if x.shape().len() < 2 || x.shape()[1] != c {
            return Err(Error::shape(
                "add_channel",
                format!("input {:?} vs bias {:?}", x.shape(), self.shape(bias)),
            ));
        }
        let spatial = x.row_len() / c;
        let b = self.value(bias).data();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
        Ok(self.push(out, Op::AddChannel(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `[M, K] × [K, N] → [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("rank-2 input expected, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let data = (0..r * c).map(|i| x[(i % r) * c + i / r]).collect();
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Cross-correlation of `input [B, Ci, H, W]` with `weight [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?} vs weight {sw:?} (expected [B,Ci,H,W] and [Co,Ci,k,k])"),
            ));
        }
        let (b, co) = (si[0], sw[0]);
        let g = ConvGeometry {
            channels: si[1],
            height: si[2],
            width: si[3],
            kernel: sw[2],
            stride,
            padding,
        };
        let (oh, ow) = g
            .out_size()
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} does not fit {si:?}", sw[2])))?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let cols = kernels::im2col_batch(x, b, g);
        let mut y = vec![T::zero(); co * b * oh * ow];
        kernels::matmul_nn(w, &cols, &mut y, co, g.col_rows(), b * oh * ow);
        let out = kernels::rows_to_batch(&y, b, co, oh * ow);
        let out = Tensor::new(vec![b, co, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            &[input, weight],
        ))
    }

    /// Transposed convolution of `input [B, Ci, H, W]` with `weight [Ci, Co, k, k]`;
    /// output spatial size is `(H − 1)·stride − 2·padding + k`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || sw[0] != si[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input {si:?} vs weight {sw:?} (expected [B,Ci,H,W] and [Ci,Co,k,k])"),
            ));
        }
        let g = transpose_geometry(&si, &sw, stride, padding)
            .ok_or_else(|| Error::shape("conv2d_transpose", format!("padding {padding} too large for {si:?}")))?;
        let (b, ci) = (si[0], si[1]);
        let hw = si[2] * si[3];
        let x = kernels::batch_to_rows(self.value(input).data(), b, ci, hw);
        let w = self.value(weight).data();
        let mut cols = vec![T::zero(); g.col_rows() * b * hw];
        kernels::matmul_tn(w, &x, &mut cols, ci, g.col_rows(), b * hw);
        let out = kernels::col2im_batch(&cols, b, g);
        let out = Tensor::new(vec![b, g.channels, g.height, g.width], out)?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                stride,
                padding,
            },
            &[input, weight],
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Training-mode batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// Statistics come from the first `stat_rows` rows only and are applied to
    /// every row, so perturbed copies appended after a base batch are
    /// normalized exactly like the base batch.
    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, stat_rows: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batchnorm", format!("input {s:?} has no channel axis")));
        }
        let (b, c) = (s[0], s[1]);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{c} channels vs gamma {:?} / beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        if stat_rows == 0 || stat_rows > b {
            return Err(Error::shape("batchnorm", format!("stat_rows {stat_rows} for batch {b}")));
        }
        let spatial = s[2..].iter().product::<usize>();
        let x = self.value(input).data();
        let count = stat_rows * spatial;
        let n = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for r in 0..stat_rows {
                let off = (r * c + ch) * spatial;
                acc += x[off..off + spatial].iter().copied().sum::<T>();
            }
            let mu = acc / n;
            let mut sq = T::zero();
            for r in 0..stat_rows {
                let off = (r * c + ch) * spatial;
                sq += x[off..off + spatial].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = sq / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(BN_EPS)).sqrt().recip()).collect();
        let out = normalize(x, &s, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let stats = BatchNormStats { mean, var, count };
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stat_rows,
                inv_std,
                stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// Evaluation-mode batch normalization with fixed statistics: the
    /// per-channel affine map `x·γ/σ + (β − μ·γ/σ)`.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let c = running_mean.len();
        let s = self.shape(input);
        if s.len() < 2 || s[1] != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", format!("input {s:?} vs {c} running channels")));
        }
        let inv: Vec<T> = running_var.iter().map(|&v| (v + T::lit(BN_EPS)).sqrt().recip()).collect();
        let inv = self.constant(Tensor::new(vec![c], inv)?);
        let neg_mean = self.constant(Tensor::new(vec![c], running_mean.iter().map(|&m| -m).collect())?);
        let gamma = self.reshape(gamma, &[c])?;
        let beta = self.reshape(beta, &[c])?;
        let scale = self.mul(gamma, inv)?;
        let offset = self.mul(neg_mean, scale)?;
        let shift = self.add(beta, offset)?;
        let scaled = self.mul_channel(input, scale)?;
        self.add_channel(scaled, shift)
    }

    /// Multiplies `a [B, C, ...]` by a per-channel factor `[C]`.
    pub fn mul_channel(&mut self, a: Var, factor: Var) -> Result<Var> {
        let x = self.value(a);
        let c = self.value(factor).len();
        if x.shape().len() < 2 || x.shape()[1] != c {
            return Err(Error::shape(
                "mul_channel",
                format!("input {:?} vs factor {:?}", x.shape(), self.shape(factor)),
            ));
        }
        let spatial = x.row_len() / c;
        let f = self.value(factor).data();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let fv = f[i % c];
            chunk.iter_mut().for_each(|o| *o *= fv);
        }
        Ok(self.push(out, Op::MulChannel(a, factor), &[a, factor]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(a, 0, start, len)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.shape(first), t.shape()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(out, Op::Mean(a), &[a])
    }

    /// Sums every row of `[B, ...]` to `[B]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.row_len();
        let data: Vec<T> = t.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(vec![t.rows()], data).expect("rows");
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Maximum of every row of `[B, ...]`, giving `[B]`; the gradient flows to
    /// the first maximal entry.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.row_len();
        let mut arg = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.rows());
        for r in t.data().chunks(n) {
            let (mut bi, mut bv) = (0, r[0]);
            for (i, &v) in r.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            arg.push(bi);
            data.push(bv);
        }
        let out = Tensor::new(vec![t.rows()], data).expect("rows");
        self.push(out, Op::MaxRows(a, arg), &[a])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits [B, C])`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let c = s[1];
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (i, (row, p)) in x.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - mx).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / z);
            loss += z.ln() + mx - row[labels[i]];
        }
        let out = Tensor::scalar(loss / T::lit(s[0] as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Classical Gram–Schmidt on the columns of `a [m, n]` (`n ≤ m`), i.e. the
    /// `Q` factor of the thin QR decomposition with positive `diag(R)`.
    pub fn gram_schmidt(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] > s[0] {
            return Err(Error::shape("gram_schmidt", format!("need [m, n] with n ≤ m, got {s:?}")));
        }
        let (q, r) = crate::linalg::gram_schmidt(self.value(a).data(), s[0], s[1])?;
        let out = Tensor::new(s, q)?;
        Ok(self.push(out, Op::GramSchmidt { input: a, r }, &[a]))
    }
}

pub(crate) fn transpose_geometry(
    input_shape: &[usize],
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Option<ConvGeometry> {
    let k = weight_shape[2];
    let oh = ((input_shape[2] - 1) * stride + k).checked_sub(2 * padding)?;
    let ow = ((input_shape[3] - 1) * stride + k).checked_sub(2 * padding)?;
    let g = ConvGeometry {
        channels: weight_shape[1],
        height: oh,
        width: ow,
        kernel: k,
        stride,
        padding,
    };
    (g.out_size()? == (input_shape[2], input_shape[3])).then_some(g)
}

fn normalize<T: Real>(x: &[T], shape: &[usize], mean: &[T], inv: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = shape[1];
    let spatial = shape[2..].iter().product::<usize>();
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_mut(spatial).enumerate() {
        let ch = i % c;
        let (m, s, g, b) = (mean[ch], inv[ch], gamma[ch], beta[ch]);
        chunk.iter_mut().for_each(|v| *v = g * (*v - m) * s + b);
    }
    Tensor::new(shape.to_vec(), out).expect("shape")
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
