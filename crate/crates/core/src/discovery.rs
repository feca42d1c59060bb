//! Learning an orthonormal direction matrix `A` on a frozen generator by
//! minimizing the orthogonal-Jacobian penalty of `ω ↦ G(z + η·A·ω)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gram_schmidt;
use crate::models::{Norm, TapNetwork};
use crate::optim::{Adam, AdamConfig};
use crate::regularizers::{orojar_stochastic, PenaltyConfig, Site};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tape, Tensor};

/// `m × N` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionMatrix<T> {
    pub a: Tensor<T>,
}

impl<T: Real> DirectionMatrix<T> {
    pub fn latent_dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn directions(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn column(&self, i: usize) -> Vec<T> {
        let n = self.directions();
        (0..self.latent_dim()).map(|r| self.a.data()[r * n + i]).collect()
    }

    /// `max |AᵀA − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let (m, n) = (self.latent_dim(), self.directions());
        let a = self.a.data();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let g: f64 = (0..m).map(|r| a[r * n + i].as_f64() * a[r * n + j].as_f64()).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }
}

/// Classical Gram–Schmidt with renormalization of the columns of `A_raw [m, N]`.
pub fn orthonormalize<T: Real>(a_raw: &Tensor<T>) -> Result<DirectionMatrix<T>> {
    let s = a_raw.shape();
    if s.len() != 2 || s[1] > s[0] {
        return Err(Error::shape("orthonormalize", format!("need [m, N] with N ≤ m, got {s:?}")));
    }
    let (q, _) = gram_schmidt(a_raw.data(), s[0], s[1])?;
    Ok(DirectionMatrix {
        a: Tensor::new(s.to_vec(), q)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    /// Number of directions `N`; 0 means the latent width.
    pub directions: usize,
    pub eta: f64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            directions: 0,
            eta: 1.0,
            iters: 5000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Per-iteration penalty and post-step orthogonality error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscoveryLog {
    pub penalty: Vec<f64>,
    pub orthogonality_error: Vec<f64>,
}

fn random_orthonormal<T: Real>(rng: &mut impl Rng, m: usize, n: usize) -> Result<DirectionMatrix<T>> {
    loop {
        let raw = Tensor::from_fn(&[m, n], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        match orthonormalize(&raw) {
            Ok(d) => return Ok(d),
            Err(Error::DegenerateDirection { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Optimizes `A` against the frozen `net`, starting from a random
/// orthonormal matrix. The network is only evaluated (evaluation-mode
/// normalization, parameters bound as constants).
pub fn discover<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    penalty: &PenaltyConfig,
    config: &DiscoveryConfig,
) -> Result<(DirectionMatrix<T>, DiscoveryLog)> {
    let m = net.latent_dim();
    let n = if config.directions == 0 { m } else { config.directions };
    if n == 0 || n > m {
        return Err(Error::InvalidArgument(format!("{n} directions for latent width {m}")));
    }
    if config.batch == 0 {
        return Err(Error::InvalidArgument("discovery batch must be positive".into()));
    }
    penalty.validate(net.tap_count())?;
    let init = random_orthonormal(&mut stream_rng(config.seed, u64::MAX, Stream::Discover), m, n)?;
    discover_from(net, init, penalty, config)
}

/// Like [`discover`], from a given starting matrix.
pub fn discover_from<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    init: DirectionMatrix<T>,
    penalty: &PenaltyConfig,
    config: &DiscoveryConfig,
) -> Result<(DirectionMatrix<T>, DiscoveryLog)> {
    let (m, n) = (init.latent_dim(), init.directions());
    if m != net.latent_dim() {
        return Err(Error::shape("discover", format!("A is {m}×{n}, latent width {}", net.latent_dim())));
    }
    let b = config.batch;
    let mut a_raw = init.a;
    let mut adam = Adam::new(AdamConfig::new(config.lr, 0.9, 0.999), &[&a_raw]);
    let mut log = DiscoveryLog::default();
    let eta = T::lit(config.eta);
    for step in 0..config.iters as u64 {
        let mut rng = stream_rng(config.seed, step, Stream::Discover);
        let z = Tensor::from_fn(&[b, m], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let pick: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let onehot = Tensor::from_fn(&[b, n], |k| if pick[k / n] == k % n { T::one() } else { T::zero() });

        let mut tape = Tape::new();
        let av = tape.leaf(a_raw.clone(), true);
        let q = tape.gram_schmidt(av)?;
        let qt = tape.transpose(q)?;
        let basis = tape.scale(qt, eta);
        let zv = tape.constant(z);
        let w = tape.constant(onehot);
        let shift = tape.matmul(w, basis)?;
        let base = tape.add(zv, shift)?;
        let site = Site {
            base,
            basis: Some(basis),
        };
        let pen = orojar_stochastic(&mut tape, net, site, penalty, &mut rng, Norm::Running)?;
        let value = pen.total_value(&tape);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("discovery penalty at step {step}"),
            });
        }
        let grads = tape.backward(pen.total)?;
        let g = grads.get(av).cloned().unwrap_or_else(|| Tensor::zeros(a_raw.shape()));
        adam.update(&mut [&mut a_raw], &[g])?;
        a_raw = orthonormalize(&a_raw)?.a;
        log.penalty.push(value);
        log.orthogonality_error.push(DirectionMatrix { a: a_raw.clone() }.orthogonality_error());
    }
    Ok((DirectionMatrix { a: a_raw }, log))
}

/// `G(z + η·A[:, i])` for one latent row, in evaluation mode.
pub fn edit<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    z: &[T],
    a: &DirectionMatrix<T>,
    i: usize,
    eta: f64,
) -> Result<Tensor<T>> {
    if i >= a.directions() {
        return Err(Error::InvalidArgument(format!(
            "direction index {i} out of range for {} directions",
            a.directions()
        )));
    }
    if z.len() != a.latent_dim() {
        return Err(Error::shape("edit", format!("z of length {} vs A {:?}", z.len(), a.a.shape())));
    }
    let col = a.column(i);
    let e = T::lit(eta);
    let row: Vec<T> = z.iter().zip(&col).map(|(&zi, &c)| zi + e * c).collect();
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::from_rows(&[row])?);
    let out = net.forward(&mut tape, zv, Norm::Running)?.output;
    let y = tape.value(out);
    Tensor::new(y.shape()[1..].to_vec(), y.data().to_vec())
}

/// Greedy matching of the columns of `a [m, N]` to the columns of
/// `target [m, N]` by absolute cosine; returns the matched `|cos|` per
/// target column.
pub fn matched_cosines(a: &Tensor<f64>, target: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let col = |t: &Tensor<f64>, j: usize| -> Vec<f64> { (0..m).map(|r| t.data()[r * n + j]).collect() };
    let unit = |v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let ac: Vec<Vec<f64>> = (0..n).map(|j| unit(col(a, j))).collect();
    let tc: Vec<Vec<f64>> = (0..n).map(|j| unit(col(target, j))).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, x) in ac.iter().enumerate() {
        for (j, y) in tc.iter().enumerate() {
            let c: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            pairs.push((c.abs(), i, j));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0));
    let mut used_a = vec![false; n];
    let mut out = vec![0.0; n];
    let mut done = vec![false; n];
    for (c, i, j) in pairs {
        if !used_a[i] && !done[j] {
            used_a[i] = true;
            done[j] = true;
            out[j] = c;
        }
    }
    out
}
