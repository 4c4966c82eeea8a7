//! im2col convolution kernels backed by GEMM.

use crate::real::Real;

/// Unfolds a `[cin, h, w]` buffer into a `[cin*k*k, h*w]` patch matrix with
/// zero padding `k/2`.
pub(crate) fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let n = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![T::zero(); cin * k * k * n];
    for ci in 0..cin {
        let plane = &x[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let n = h * w;
    let pad = (k / 2) as isize;
    let mut x = vec![T::zero(); cin * n];
    for ci in 0..cin {
        let plane = &mut x[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, s) in dst[sx0..sx0 + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
    x
}

/// `out[cout, n] = w[cout, kk] * col[kk, n] + b[cout]`.
pub(crate) fn conv_forward<T: Real>(col: &[T], w: &[T], b: &[T], cout: usize, kk: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * n];
    for (co, bias) in b.iter().enumerate() {
        out[co * n..(co + 1) * n].fill(*bias);
    }
    T::gemm(cout, kk, n, T::one(), w, kk as isize, 1, col, n as isize, 1, T::one(), &mut out, n as isize, 1);
    out
}

/// Returns `(dW, db)` for upstream gradient `g[cout, n]`.
pub(crate) fn conv_backward_weights<T: Real>(
    col: &[T],
    g: &[T],
    cout: usize,
    kk: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); cout * kk];
    T::gemm(cout, n, kk, T::one(), g, n as isize, 1, col, 1, n as isize, T::zero(), &mut dw, kk as isize, 1);
    let db = (0..cout).map(|co| g[co * n..(co + 1) * n].iter().copied().sum()).collect();
    (dw, db)
}

/// `dcol[kk, n] = wᵀ[kk, cout] * g[cout, n]`.
pub(crate) fn conv_backward_col<T: Real>(w: &[T], g: &[T], cout: usize, kk: usize, n: usize) -> Vec<T> {
    let mut dcol = vec![T::zero(); kk * n];
    T::gemm(kk, cout, n, T::one(), w, 1, kk as isize, g, n as isize, 1, T::zero(), &mut dcol, n as isize, 1);
    dcol
}
