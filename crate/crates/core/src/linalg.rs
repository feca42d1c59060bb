//! Small dense linear algebra: Gram–Schmidt and one-sided Jacobi SVD.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Column-norm threshold below which a direction counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-10;

/// Classical Gram–Schmidt with normalization on the columns of row-major
/// `a [m, n]`. Returns `(Q [m, n], R [n, n])` with `A = QR`, `diag(R) > 0`.
pub fn gram_schmidt<T: Real>(a: &[T], m: usize, n: usize) -> Result<(Vec<T>, Vec<T>)> {
    if n > m {
        return Err(Error::InvalidArgument(format!("{n} columns exceed dimension {m}")));
    }
    let col = |data: &[T], j: usize| -> Vec<T> { (0..m).map(|i| data[i * n + j]).collect() };
    let mut q = vec![T::zero(); m * n];
    let mut r = vec![T::zero(); n * n];
    for j in 0..n {
        let aj = col(a, j);
        let mut v = aj.clone();
        // classical: project the original column on every earlier q
        for i in 0..j {
            let qi = col(&q, i);
            let rij: T = qi.iter().zip(&aj).map(|(&x, &y)| x * y).sum();
            r[i * n + j] = rij;
            v.iter_mut().zip(&qi).for_each(|(vk, &qk)| *vk -= rij * qk);
        }
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm.as_f64() >= DEGENERATE_NORM) {
            return Err(Error::DegenerateDirection {
                column: j,
                norm: norm.as_f64(),
            });
        }
        r[j * n + j] = norm;
        for (i, vk) in v.into_iter().enumerate() {
            q[i * n + j] = vk / norm;
        }
    }
    Ok((q, r))
}

/// Thin SVD `W = U·diag(s)·Vᵀ` of row-major `w [rows, cols]` with `rows ≥ cols`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `[rows, cols]`, orthonormal columns (zero columns for zero singular values).
    pub u: Vec<f64>,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `[cols, cols]`, orthonormal.
    pub v: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// One-sided Jacobi SVD: rotates column pairs of `W·V` until all columns are
/// mutually orthogonal, then reads singular values off the column norms.
pub fn svd_jacobi(w: &[f64], rows: usize, cols: usize) -> Result<Svd> {
    if rows < cols {
        return Err(Error::InvalidArgument(format!(
            "one-sided Jacobi needs rows ≥ cols, got {rows}×{cols}"
        )));
    }
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| w[i * cols + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (mat, len) in [(&mut a, rows), (&mut v, cols)] {
                    for k in 0..len {
                        let (xp, xq) = (mat[p][k], mat[q][k]);
                        mat[p][k] = c * xp - s * xq;
                        mat[q][k] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut u = vec![0.0; rows * cols];
    let mut vv = vec![0.0; cols * cols];
    let mut s = Vec::with_capacity(cols);
    for (new_j, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..rows {
            u[i * cols + new_j] = if sigma > 0.0 { a[j][i] / sigma } else { 0.0 };
        }
        for i in 0..cols {
            vv[i * cols + new_j] = v[j][i];
        }
    }
    Ok(Svd {
        u,
        s,
        v: vv,
        rows,
        cols,
    })
}
