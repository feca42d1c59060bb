//! Orthogonal Jacobian penalty (exact and stochastic), the Hessian penalty
//! baseline and a mixed second-derivative probe.
//!
//! Every penalty is built from finite differences of layer outputs. The
//! perturbed latents are stacked under the base batch and run through one
//! forward pass, so training-mode normalization treats all copies alike.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Forward, Norm, TapNetwork};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    /// Finite-difference step.
    pub epsilon: f64,
    /// Rademacher draws per step.
    pub k_samples: usize,
    /// One-based tap indices to regularize.
    pub layers: Vec<usize>,
    pub lambda: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            k_samples: 2,
            layers: vec![1, 2, 3, 4],
            lambda: 10.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self, tap_count: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("penalty.epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.k_samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "penalty.k_samples must be ≥ 2, got {}",
                self.k_samples
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("penalty.lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("penalty.layers is empty".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l == 0 || l > tap_count) {
            return Err(Error::InvalidArgument(format!("penalty.layers entry {l} outside 1..={tap_count}")));
        }
        Ok(())
    }
}

/// Which variance the stochastic estimators report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceKind {
    /// Unbiased, `k − 1` denominator.
    Sample,
    /// `k` denominator; with all sign vectors enumerated this is the exact
    /// variance over the Rademacher distribution.
    Population,
}

/// A penalty on the tape.
#[derive(Clone, Debug)]
pub struct Penalty {
    /// Scalar sum over layers.
    pub total: Var,
    /// Scalar contribution of every configured layer, in config order.
    pub per_layer: Vec<Var>,
    /// The forward pass over the stacked batch; its first `base_rows` rows
    /// are the unperturbed latents.
    pub forward: Forward,
    pub base_rows: usize,
}

impl Penalty {
    pub fn total_value<T: Real>(&self, tape: &Tape<T>) -> f64 {
        tape.value(self.total).item().as_f64()
    }

    pub fn layer_values<T: Real>(&self, tape: &Tape<T>) -> Vec<f64> {
        self.per_layer.iter().map(|&v| tape.value(v).item().as_f64()).collect()
    }

    /// Output rows of the unperturbed latents.
    pub fn base_output<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.slice_rows(self.forward.output, 0, self.base_rows)
    }
}

/// Where finite differences are taken: the latent rows `base [B, m]` are
/// moved by `basis [P, m]` applied to a perturbation vector in `R^P`, or by
/// the perturbation vector itself when there is no basis (`P = m`).
#[derive(Clone, Copy, Debug)]
pub struct Site {
    pub base: Var,
    pub basis: Option<Var>,
}

impl Site {
    pub fn latent(base: Var) -> Self {
        Self { base, basis: None }
    }

    fn dims<T: Real>(&self, tape: &Tape<T>) -> Result<(usize, usize, usize)> {
        let s = tape.shape(self.base);
        if s.len() != 2 {
            return Err(Error::shape("penalty", format!("latent batch {s:?} is not [B, m]")));
        }
        let (b, m) = (s[0], s[1]);
        let p = match self.basis {
            None => m,
            Some(a) => {
                let bs = tape.shape(a);
                if bs.len() != 2 || bs[1] != m {
                    return Err(Error::shape("penalty", format!("basis {bs:?} vs latent width {m}")));
                }
                bs[0]
            }
        };
        Ok((b, m, p))
    }

    /// Latent offset `scale · probes · basis` for probe rows `[B, P]`.
    fn offset<T: Real>(&self, tape: &mut Tape<T>, probes: &Tensor<T>, scale: f64) -> Result<Var> {
        let v = tape.constant(probes.clone());
        let d = match self.basis {
            None => v,
            Some(a) => tape.matmul(v, a)?,
        };
        Ok(tape.scale(d, T::lit(scale)))
    }
}

/// Runs the base rows and every offset copy in one pass and returns, for each
/// requested layer, the flattened `[B, F]` blocks in stacking order.
fn stacked_taps<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    offsets: &[Var],
    layers: &[usize],
    norm: Norm,
) -> Result<(Vec<Vec<Var>>, Forward, usize)> {
    let b = tape.shape(site.base)[0];
    let mut parts = vec![site.base];
    for &o in offsets {
        parts.push(tape.add(site.base, o)?);
    }
    let z = if parts.len() == 1 { site.base } else { tape.concat_rows(&parts)? };
    let norm = match norm {
        Norm::Batch { .. } => Norm::Batch { stat_rows: b },
        Norm::Running => Norm::Running,
    };
    let fwd = net.forward(tape, z, norm)?;
    let mut blocks = Vec::with_capacity(layers.len());
    for &l in layers {
        if l == 0 || l > fwd.taps.len() {
            return Err(Error::InvalidArgument(format!("layer {l} outside 1..={}", fwd.taps.len())));
        }
        let tap = fwd.taps[l - 1];
        let rows = tape.shape(tap)[0];
        let flat = tape.value(tap).row_len();
        let tap = tape.reshape(tap, &[rows, flat])?;
        let mut per = Vec::with_capacity(parts.len());
        for j in 0..parts.len() {
            per.push(tape.slice_rows(tap, j * b, b)?);
        }
        blocks.push(per);
    }
    Ok((blocks, fwd, b))
}

fn sum_vars<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Variance across draws of same-shaped nodes.
fn variance<T: Real>(tape: &mut Tape<T>, draws: &[Var], kind: VarianceKind) -> Result<Var> {
    let k = draws.len();
    let total = sum_vars(tape, draws)?;
    let mean = tape.scale(total, T::lit(1.0 / k as f64));
    let mut sq = Vec::with_capacity(k);
    for &d in draws {
        let c = tape.sub(d, mean)?;
        sq.push(tape.square(c));
    }
    let s = sum_vars(tape, &sq)?;
    let denom = match kind {
        VarianceKind::Sample => (k - 1) as f64,
        VarianceKind::Population => k as f64,
    };
    Ok(tape.scale(s, T::lit(1.0 / denom)))
}

fn zero_penalty<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    layers: &[usize],
    norm: Norm,
) -> Result<Penalty> {
    let (_, fwd, b) = stacked_taps(tape, net, site, &[], layers, norm)?;
    let per_layer: Vec<Var> = layers.iter().map(|_| tape.constant(Tensor::scalar(T::zero()))).collect();
    let total = sum_vars(tape, &per_layer)?;
    Ok(Penalty {
        total,
        per_layer,
        forward: fwd,
        base_rows: b,
    })
}

/// `±1` entries, each with probability one half.
pub fn rademacher<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |_| if rng.random::<bool>() { T::one() } else { -T::one() })
}

/// All `2^p` sign vectors of length `p`.
pub fn sign_vectors(p: usize) -> Vec<Vec<f64>> {
    (0..1usize << p)
        .map(|bits| (0..p).map(|i| if bits >> i & 1 == 1 { -1.0 } else { 1.0 }).collect())
        .collect()
}

/// Repeats one perturbation vector over `rows` rows.
pub fn broadcast_rows<T: Real>(v: &[f64], rows: usize) -> Tensor<T> {
    let p = v.len();
    Tensor::from_fn(&[rows, p], |i| T::lit(v[i % p]))
}

/// Finite-difference Jacobian-vector product `(G_d(z + εv) − G_d(z)) / ε`
/// for every row of `z [B, m]` and `v [B, m]`, in evaluation mode.
pub fn jacobian_column<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    z: &Tensor<T>,
    v: &Tensor<T>,
    layer: usize,
    epsilon: f64,
) -> Result<Tensor<T>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if z.shape() != v.shape() {
        return Err(Error::shape("jacobian_column", format!("z {:?} vs v {:?}", z.shape(), v.shape())));
    }
    let mut tape = Tape::new();
    let base = tape.constant(z.clone());
    let site = Site::latent(base);
    let off = site.offset(&mut tape, v, epsilon)?;
    let (blocks, _, _) = stacked_taps(&mut tape, net, site, &[off], &[layer], Norm::Running)?;
    let d = tape.sub(blocks[0][1], blocks[0][0])?;
    let d = tape.scale(d, T::lit(1.0 / epsilon));
    Ok(tape.value(d).clone())
}

/// Exact penalty `Σ_d Σ_{i≠j} (j_{d,i}ᵀ j_{d,j})²` with finite-difference
/// columns along every perturbation coordinate, averaged over the batch.
pub fn orojar_exact_on<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    epsilon: f64,
    layers: &[usize],
    norm: Norm,
) -> Result<Penalty> {
    let (b, _, p) = site.dims(tape)?;
    if p < 2 {
        return zero_penalty(tape, net, site, layers, norm);
    }
    let mut offsets = Vec::with_capacity(p);
    for i in 0..p {
        let e = Tensor::from_fn(&[b, p], |k| if k % p == i { T::one() } else { T::zero() });
        offsets.push(site.offset(tape, &e, epsilon)?);
    }
    let (blocks, fwd, _) = stacked_taps(tape, net, site, &offsets, layers, norm)?;
    let inv = T::lit(1.0 / epsilon);
    let mut per_layer = Vec::with_capacity(layers.len());
    for blk in blocks {
        let mut cols = Vec::with_capacity(p);
        for &pert in &blk[1..] {
            let d = tape.sub(pert, blk[0])?;
            cols.push(tape.scale(d, inv));
        }
        let mut terms = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                let prod = tape.mul(cols[i], cols[j])?;
                let dotp = tape.sum_rows(prod);
                terms.push(tape.square(dotp));
            }
        }
        let s = sum_vars(tape, &terms)?;
        let s = tape.scale(s, T::lit(2.0));
        per_layer.push(tape.mean(s));
    }
    let total = sum_vars(tape, &per_layer)?;
    Ok(Penalty {
        total,
        per_layer,
        forward: fwd,
        base_rows: b,
    })
}

/// Evaluation-mode exact penalty of a latent batch `z [B, m]`.
pub fn orojar_exact<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    z: &Tensor<T>,
    epsilon: f64,
    layers: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let base = tape.constant(z.clone());
    let p = orojar_exact_on(&mut tape, net, Site::latent(base), epsilon, layers, Norm::Running)?;
    Ok(p.total_value(&tape))
}

/// Variance of `‖u_v‖²` over the given probe draws (each `[B, P]`), where
/// `u_v` is the finite-difference Jacobian-vector product, averaged over the
/// batch and summed over layers.
pub fn orojar_with_probes<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    probes: &[Tensor<T>],
    epsilon: f64,
    layers: &[usize],
    kind: VarianceKind,
    norm: Norm,
) -> Result<Penalty> {
    let (b, _, p) = site.dims(tape)?;
    if p < 2 {
        return zero_penalty(tape, net, site, layers, norm);
    }
    if probes.len() < 2 {
        return Err(Error::InvalidArgument(format!("{} probe draws, need ≥ 2", probes.len())));
    }
    let mut offsets = Vec::with_capacity(probes.len());
    for v in probes {
        if v.shape() != [b, p] {
            return Err(Error::shape("orojar", format!("probe {:?} vs [{b}, {p}]", v.shape())));
        }
        offsets.push(site.offset(tape, v, epsilon)?);
    }
    let (blocks, fwd, _) = stacked_taps(tape, net, site, &offsets, layers, norm)?;
    let inv = T::lit(1.0 / epsilon);
    let mut per_layer = Vec::with_capacity(layers.len());
    for blk in blocks {
        let mut norms = Vec::with_capacity(probes.len());
        for &pert in &blk[1..] {
            let d = tape.sub(pert, blk[0])?;
            let u = tape.scale(d, inv);
            let sq = tape.square(u);
            norms.push(tape.sum_rows(sq));
        }
        let var = variance(tape, &norms, kind)?;
        per_layer.push(tape.mean(var));
    }
    let total = sum_vars(tape, &per_layer)?;
    Ok(Penalty {
        total,
        per_layer,
        forward: fwd,
        base_rows: b,
    })
}

/// Stochastic penalty with `k_samples` independent Rademacher draws per row
/// and the unbiased variance, graph-connected to every parameter on the tape.
pub fn orojar_stochastic<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    config: &PenaltyConfig,
    rng: &mut impl Rng,
    norm: Norm,
) -> Result<Penalty> {
    let (b, _, p) = site.dims(tape)?;
    let probes: Vec<Tensor<T>> = (0..config.k_samples).map(|_| rademacher(rng, b, p)).collect();
    orojar_with_probes(tape, net, site, &probes, config.epsilon, &config.layers, VarianceKind::Sample, norm)
}

/// Exact Rademacher variance of the estimator: all `2^P` sign vectors,
/// population variance. Equals twice the exact penalty when the finite
/// differences are exact.
pub fn orojar_enumerated<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    z: &Tensor<T>,
    epsilon: f64,
    layers: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let base = tape.constant(z.clone());
    let b = z.rows();
    let probes: Vec<Tensor<T>> = sign_vectors(z.row_len()).iter().map(|v| broadcast_rows(v, b)).collect();
    let pen = orojar_with_probes(
        &mut tape,
        net,
        Site::latent(base),
        &probes,
        epsilon,
        layers,
        VarianceKind::Population,
        Norm::Running,
    )?;
    Ok(pen.total_value(&tape))
}

/// Hessian penalty: elementwise variance over draws of the second directional
/// difference `(G(z+εv) − 2G(z) + G(z−εv)) / ε²`, max over output entries,
/// averaged over the batch and summed over layers.
pub fn hessian_with_probes<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    probes: &[Tensor<T>],
    epsilon: f64,
    layers: &[usize],
    kind: VarianceKind,
    norm: Norm,
) -> Result<Penalty> {
    let (b, _, p) = site.dims(tape)?;
    if probes.len() < 2 {
        return Err(Error::InvalidArgument(format!("{} probe draws, need ≥ 2", probes.len())));
    }
    let k = probes.len();
    let mut offsets = Vec::with_capacity(2 * k);
    for sign in [1.0, -1.0] {
        for v in probes {
            if v.shape() != [b, p] {
                return Err(Error::shape("hessian_penalty", format!("probe {:?} vs [{b}, {p}]", v.shape())));
            }
            offsets.push(site.offset(tape, v, sign * epsilon)?);
        }
    }
    let (blocks, fwd, _) = stacked_taps(tape, net, site, &offsets, layers, norm)?;
    let inv = T::lit(1.0 / (epsilon * epsilon));
    let mut per_layer = Vec::with_capacity(layers.len());
    for blk in blocks {
        let twice = tape.scale(blk[0], T::lit(2.0));
        let mut second = Vec::with_capacity(k);
        for j in 0..k {
            let s = tape.add(blk[1 + j], blk[1 + k + j])?;
            let s = tape.sub(s, twice)?;
            second.push(tape.scale(s, inv));
        }
        let var = variance(tape, &second, kind)?;
        let mx = tape.max_rows(var);
        per_layer.push(tape.mean(mx));
    }
    let total = sum_vars(tape, &per_layer)?;
    Ok(Penalty {
        total,
        per_layer,
        forward: fwd,
        base_rows: b,
    })
}

pub fn hessian_penalty_stochastic<T: Real, N: TapNetwork<T> + ?Sized>(
    tape: &mut Tape<T>,
    net: &N,
    site: Site,
    config: &PenaltyConfig,
    rng: &mut impl Rng,
    norm: Norm,
) -> Result<Penalty> {
    let (b, _, p) = site.dims(tape)?;
    let probes: Vec<Tensor<T>> = (0..config.k_samples).map(|_| rademacher(rng, b, p)).collect();
    hessian_with_probes(tape, net, site, &probes, config.epsilon, &config.layers, VarianceKind::Sample, norm)
}

/// Squared norm of the mixed derivative `∂²G/∂z_i∂z_j` of the network output
/// at one latent row, by the four-point cross stencil.
pub fn hessian_offdiag_probe<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    z: &[T],
    i: usize,
    j: usize,
    delta: f64,
) -> Result<f64> {
    let m = z.len();
    if i == j || i >= m || j >= m {
        return Err(Error::InvalidArgument(format!("probe indices ({i}, {j}) for width {m}")));
    }
    if delta <= 0.0 {
        return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    let d = T::lit(delta);
    let mut rows = vec![z.to_vec(); 4];
    rows[0][i] += d;
    rows[0][j] += d;
    rows[1][i] += d;
    rows[2][j] += d;
    let mut tape = Tape::new();
    let zs = tape.constant(Tensor::from_rows(&rows)?);
    let out = net.forward(&mut tape, zs, Norm::Running)?.output;
    let y = tape.value(out);
    let n = y.row_len();
    let mut s = 0.0;
    for k in 0..n {
        let v = (y.row(0)[k].as_f64() - y.row(1)[k].as_f64() - y.row(2)[k].as_f64() + y.row(3)[k].as_f64())
            / (delta * delta);
        s += v * v;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_vectors_enumerate_all() {
        let v = sign_vectors(3);
        assert_eq!(v.len(), 8);
        let mut seen: Vec<_> = v.iter().map(|x| format!("{x:?}")).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn config_validation() {
        let mut c = PenaltyConfig::default();
        assert!(c.validate(4).is_ok());
        c.k_samples = 1;
        assert!(c.validate(4).is_err());
        c = PenaltyConfig::default();
        c.layers = vec![5];
        assert!(c.validate(4).unwrap_err().to_string().contains("5"));
        c = PenaltyConfig::default();
        c.epsilon = 0.0;
        assert!(c.validate(4).is_err());
    }
}
