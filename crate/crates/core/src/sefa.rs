//! Closed-form latent directions from the SVD of the first-layer weight.

use crate::error::{Error, Result};
use crate::linalg::svd_jacobi;
use crate::models::{Generator, Norm, TapNetwork};
use crate::tensor::{Real, Tape, Tensor};

/// Singular values below this are reported as degenerate.
pub const DEGENERATE_SINGULAR: f64 = 1e-8;

/// `W = U·diag(Λ)·Vᵀ`; the columns of `V` are the latent directions.
#[derive(Clone, Debug)]
pub struct SvdFactorization {
    /// `[hidden, m]`
    pub u: Tensor<f64>,
    /// Non-increasing.
    pub singular_values: Vec<f64>,
    /// `[m, m]`
    pub v: Tensor<f64>,
    /// Indices of singular values below [`DEGENERATE_SINGULAR`].
    pub degenerate: Vec<usize>,
}

impl SvdFactorization {
    pub fn latent_dim(&self) -> usize {
        self.singular_values.len()
    }

    /// Direction `i` (column `i` of `V`).
    pub fn direction(&self, i: usize) -> Vec<f64> {
        let m = self.latent_dim();
        (0..m).map(|r| self.v.data()[r * m + i]).collect()
    }

    /// `‖U·diag(Λ)·Vᵀ − W‖_F / ‖W‖_F` (absolute error when `W = 0`).
    pub fn reconstruction_error(&self, w: &Tensor<f64>) -> f64 {
        let (n, m) = (w.shape()[0], w.shape()[1]);
        let (u, v, s) = (self.u.data(), self.v.data(), &self.singular_values);
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..n {
            for j in 0..m {
                let r: f64 = (0..m).map(|k| u[i * m + k] * s[k] * v[j * m + k]).sum();
                let x = w.data()[i * m + j];
                err += (r - x) * (r - x);
                norm += x * x;
            }
        }
        if norm > 0.0 {
            (err / norm).sqrt()
        } else {
            err.sqrt()
        }
    }
}

/// Factorizes a bare linear weight `W [hidden, m]` (`hidden ≥ m`). Each `V`
/// column is flipped so its largest-magnitude entry is positive.
pub fn sefa_factorize(w: &Tensor<f64>) -> Result<SvdFactorization> {
    let s = w.shape();
    if s.len() != 2 {
        return Err(Error::shape("sefa", format!("weight {s:?} is not [hidden, m]")));
    }
    let (n, m) = (s[0], s[1]);
    let mut svd = svd_jacobi(w.data(), n, m)?;
    for j in 0..m {
        let (mut best, mut sign) = (0.0f64, 1.0);
        for i in 0..m {
            let x = svd.v[i * m + j];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                svd.v[i * m + j] = -svd.v[i * m + j];
            }
            for i in 0..n {
                svd.u[i * m + j] = -svd.u[i * m + j];
            }
        }
    }
    let degenerate = svd
        .s
        .iter()
        .enumerate()
        .filter(|(_, &x)| x < DEGENERATE_SINGULAR)
        .map(|(i, _)| i)
        .collect();
    Ok(SvdFactorization {
        u: Tensor::new(vec![n, m], svd.u)?,
        singular_values: svd.s,
        v: Tensor::new(vec![m, m], svd.v)?,
        degenerate,
    })
}

/// Directions of a generator's first fully-connected layer (bias ignored).
pub fn sefa_directions<T: Real>(g: &Generator<T>) -> Result<SvdFactorization> {
    sefa_factorize(&g.first_layer_weight().cast())
}

/// Numerical check of the reparameterization `z' = Vᵀz`, `W' = U·Λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropositionReport {
    /// `max |W·z − W'·z'|` over the batch.
    pub equivalence_error: f64,
    /// Largest off-diagonal magnitude of `W'ᵀW'`.
    pub max_offdiag: f64,
    /// `max_offdiag / Λ²_max` (0 when `W = 0`).
    pub max_offdiag_relative: f64,
}

/// Checks that `W·z = (UΛ)·(Vᵀz)` for every row of `z [B, m]` and that the
/// reparameterized Jacobian `W'` has orthogonal columns.
pub fn verify_proposition(w: &Tensor<f64>, f: &SvdFactorization, z: &Tensor<f64>) -> Result<PropositionReport> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    if z.shape().len() != 2 || z.shape()[1] != m || f.latent_dim() != m {
        return Err(Error::shape("verify_proposition", format!("z {:?} vs W {:?}", z.shape(), w.shape())));
    }
    let (u, v, s) = (f.u.data(), f.v.data(), &f.singular_values);
    let wp: Vec<f64> = (0..n * m).map(|k| u[k] * s[k % m]).collect();
    let mut equivalence_error = 0.0f64;
    for row in z.data().chunks(m) {
        let zp: Vec<f64> = (0..m).map(|k| (0..m).map(|i| v[i * m + k] * row[i]).sum()).collect();
        for i in 0..n {
            let a: f64 = (0..m).map(|j| w.data()[i * m + j] * row[j]).sum();
            let b: f64 = (0..m).map(|k| wp[i * m + k] * zp[k]).sum();
            equivalence_error = equivalence_error.max((a - b).abs());
        }
    }
    let mut max_offdiag = 0.0f64;
    for a in 0..m {
        for b in 0..m {
            if a != b {
                let g: f64 = (0..n).map(|i| wp[i * m + a] * wp[i * m + b]).sum();
                max_offdiag = max_offdiag.max(g.abs());
            }
        }
    }
    let top = s.first().map_or(0.0, |x| x * x);
    Ok(PropositionReport {
        equivalence_error,
        max_offdiag,
        max_offdiag_relative: if top > 0.0 { max_offdiag / top } else { 0.0 },
    })
}

/// `steps` evaluation-mode outputs `G(z + t·direction)`, `t` evenly spaced
/// over `[lo, hi]`.
pub fn traverse_direction<T: Real, N: TapNetwork<T> + ?Sized>(
    net: &N,
    z: &[T],
    direction: &[f64],
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<Tensor<T>>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("traversal needs ≥ 2 steps, got {steps}")));
    }
    let m = z.len();
    if direction.len() != m || net.latent_dim() != m {
        return Err(Error::shape("traverse", format!("direction of length {} for width {m}", direction.len())));
    }
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("traversal direction is zero".into()));
    }
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("traversal direction has norm {norm}, expected 1")));
    }
    let rows: Vec<Vec<T>> = (0..steps)
        .map(|s| {
            let t = lo + (hi - lo) * s as f64 / (steps - 1) as f64;
            z.iter().zip(direction).map(|(&zi, &d)| zi + T::lit(t * d)).collect()
        })
        .collect();
    let mut tape = Tape::new();
    let zs = tape.constant(Tensor::from_rows(&rows)?);
    let out = net.forward(&mut tape, zs, Norm::Running)?.output;
    let y = tape.value(out);
    let frame_shape = y.shape()[1..].to_vec();
    (0..steps)
        .map(|s| Tensor::new(frame_shape.clone(), y.row(s).to_vec()))
        .collect()
}
