//! Dense compute kernels shared by the forward and backward passes.
//!
//! All matrices are row-major slices. Output rows are computed independently
//! and each dot product accumulates in a fixed order, which keeps results
//! independent of thread scheduling and of the batch a row belongs to.

use super::Real;
use crate::par;

/// Dot product accumulated in eight lanes, element `i` always going to lane
/// `i mod 8`. Appending zero terms never changes the result.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut s = [T::zero(); 8];
    let (ac, bc) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (at, bt) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            s[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in at.iter().zip(bt).enumerate() {
        s[l] += x * y;
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]))
}

const MR: usize = 4;
const NR: usize = 16;

/// `out[MR', n] = A[rows r0.., k] · b[k, n]` for one block of at most `MR`
/// output rows, where `A[r, p] = a[r·rs + p·ps]`. Each output element is the
/// left-to-right sum over `p`, so the result matches a naive triple loop bit
/// for bit.
#[inline]
fn gemm_rows<T: Real>(a: &[T], rs: usize, ps: usize, r0: usize, b: &[T], out: &mut [T], k: usize, n: usize) {
    let rows = out.len() / n;
    let mut j = 0;
    if rows == MR {
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let bv = &b[p * n + j..p * n + j + NR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(r0 + r) * rs + p * ps];
                    for c in 0..NR {
                        accr[c] += av * bv[c];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                out[r * n + j..r * n + j + NR].copy_from_slice(accr);
            }
            j += NR;
        }
    }
    for r in 0..rows {
        let row = &mut out[r * n + j..(r + 1) * n];
        row.iter_mut().for_each(|x| *x = T::zero());
        for p in 0..k {
            let av = a[(r0 + r) * rs + p * ps];
            for (o, &bv) in row.iter_mut().zip(&b[p * n + j..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_chunk(out, MR * n, |blk, rows| gemm_rows(a, k, 1, blk * MR, b, rows, k, n));
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    par::for_each_chunk(out, MR * n, |blk, rows| gemm_rows(a, 1, k, blk * MR, b, rows, m, n));
}

/// Rearranges `src [B, R, n]` into `[R, B·n]`.
pub fn batch_to_rows<T: Real>(src: &[T], b: usize, r: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    par::for_each_chunk(&mut out, b * n, |ri, row| {
        for bi in 0..b {
            let s = &src[(bi * r + ri) * n..(bi * r + ri + 1) * n];
            row[bi * n..(bi + 1) * n].copy_from_slice(s);
        }
    });
    out
}

/// Inverse of [`batch_to_rows`]: `src [R, B·n]` into `[B, R, n]`.
pub fn rows_to_batch<T: Real>(src: &[T], b: usize, r: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    par::for_each_chunk(&mut out, r * n, |bi, block| {
        for ri in 0..r {
            let s = &src[ri * b * n + bi * n..ri * b * n + (bi + 1) * n];
            block[ri * n..(ri + 1) * n].copy_from_slice(s);
        }
    });
    out
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    par::for_each_chunk(out, k, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            *o += dot(arow, &b[j * n..(j + 1) * n]);
        }
    });
}

/// Sliding-window geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output size of the convolution over this image, if the window fits.
    pub fn out_size(&self) -> Option<(usize, usize)> {
        let h = self.height + 2 * self.padding;
        let w = self.width + 2 * self.padding;
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − padding` lies inside the image.
fn valid_cols(g: ConvGeometry, kx: usize, ow: usize) -> (usize, usize) {
    let lo = if g.padding > kx { (g.padding - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.width + g.padding > kx {
        ((g.width + g.padding - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `image[c,h,w]` into `cols[c·k·k, oh·ow]`.
pub fn im2col<T: Real>(image: &[T], g: ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = g.out_size().expect("valid geometry");
    let k = g.kernel;
    let ncols = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(g, kx, ow);
                let r = (c * k + ky) * k + kx;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.iter_mut().for_each(|x| *x = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    drow[..lo].iter_mut().for_each(|x| *x = T::zero());
                    drow[hi..].iter_mut().for_each(|x| *x = T::zero());
                    let base = lo * g.stride + kx - g.padding;
                    for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                        *d = src[base + i * g.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `image` (accumulating).
pub fn col2im<T: Real>(cols: &[T], g: ConvGeometry, image: &mut [T]) {
    let (oh, ow) = g.out_size().expect("valid geometry");
    let k = g.kernel;
    let ncols = oh * ow;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(g, kx, ow);
                let r = (c * k + ky) * k + kx;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let base = lo * g.stride + kx - g.padding;
                    for (i, &v) in src[oy * ow + lo..oy * ow + hi].iter().enumerate() {
                        drow[base + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Unfolds every image of `images [B, c, h, w]` and lays the results side by
/// side as `[c·k·k, B·oh·ow]`.
pub fn im2col_batch<T: Real>(images: &[T], b: usize, g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.out_size().expect("valid geometry");
    let (in_len, block) = (g.channels * g.height * g.width, g.col_rows() * oh * ow);
    let mut cols = vec![T::zero(); b * block];
    par::for_each_chunk(&mut cols, block, |bi, dst| im2col(&images[bi * in_len..(bi + 1) * in_len], g, dst));
    batch_to_rows(&cols, b, g.col_rows(), oh * ow)
}

/// Adjoint of [`im2col_batch`]: folds `cols [c·k·k, B·oh·ow]` into fresh images `[B, c, h, w]`.
pub fn col2im_batch<T: Real>(cols: &[T], b: usize, g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.out_size().expect("valid geometry");
    let (in_len, block) = (g.channels * g.height * g.width, g.col_rows() * oh * ow);
    let per_sample = rows_to_batch(cols, b, g.col_rows(), oh * ow);
    let mut out = vec![T::zero(); b * in_len];
    par::for_each_chunk(&mut out, in_len, |bi, dst| col2im(&per_sample[bi * block..(bi + 1) * block], g, dst));
    out
}
