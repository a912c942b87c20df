//! Linear least squares for the weight-reconstruction step.
//!
//! The primary path is a Householder QR of the design matrix in f64. When the
//! triangular factor is (numerically) rank deficient, or the system is
//! under-determined, the solver switches to ridge-regularised normal
//! equations with `λ = RIDGE_EPS · trace(aᵀa) / k`, factored by Cholesky.

use super::Tensor;
use crate::error::{Error, Result};

/// Relative ridge strength for the fallback path.
pub const RIDGE_EPS: f64 = 1e-8;

/// `min |R_jj| / max |R_jj|` below this ratio counts as rank deficient.
const RANK_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LeastSquares {
    /// `[k × n]` minimiser of `‖a·W − b‖_F`.
    pub solution: Tensor,
    pub ridge_used: bool,
    /// Ridge strength actually applied (0 on the QR path).
    pub lambda: f64,
}

/// Solves `min_W ‖a·W − b‖²_F` for `a: [m×k]`, `b: [m×n]`.
pub fn least_squares_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    least_squares_solve_detailed(a, b).map(|ls| ls.solution)
}

pub fn least_squares_solve_detailed(a: &Tensor, b: &Tensor) -> Result<LeastSquares> {
    let (m, k) = a.dims2()?;
    let (mb, n) = b.dims2()?;
    if m != mb {
        return Err(Error::Dimension(format!(
            "least squares: design {:?} and targets {:?} have different row counts",
            a.shape(),
            b.shape()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numeric("least squares: non-finite input".into()));
    }

    let mut acol = to_col_major(a.data(), m, k);
    let mut bcol = to_col_major(b.data(), m, n);

    if m >= k {
        if let Some(w) = qr_solve(&mut acol, &mut bcol, m, k, n) {
            return finish(w, k, n, false, 0.0);
        }
    }
    let (w, lambda) = ridge_solve(a.data(), b.data(), m, k, n)?;
    finish(w, k, n, true, lambda)
}

fn finish(w_col: Vec<f64>, k: usize, n: usize, ridge_used: bool, lambda: f64) -> Result<LeastSquares> {
    // column-major [k×n] -> row-major
    let mut data = vec![0.0f32; k * n];
    for j in 0..n {
        for i in 0..k {
            data[i * n + j] = w_col[j * k + i] as f32;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("least squares: solution is not finite".into()));
    }
    Ok(LeastSquares {
        solution: Tensor::new(vec![k, n], data)?,
        ridge_used,
        lambda,
    })
}

fn to_col_major(src: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j] as f64;
        }
    }
    out
}

#[inline]
fn dot64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// In-place Householder QR on column-major `a` (m×k), applying the same
/// reflections to `b` (m×n). Returns `None` when R is rank deficient.
fn qr_solve(a: &mut [f64], b: &mut [f64], m: usize, k: usize, n: usize) -> Option<Vec<f64>> {
    let mut diag = vec![0.0f64; k];
    let mut v = vec![0.0f64; m];
    for j in 0..k {
        let col = &a[j * m + j..(j + 1) * m];
        let norm = dot64(col, col).sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if col[0] > 0.0 { -norm } else { norm };
        // the largest pivot only grows, so a failing ratio now fails at the end too
        let seen = diag[..j].iter().fold(norm, |mx, d| mx.max(d.abs()));
        if norm / seen < RANK_TOL {
            return None;
        }
        let len = m - j;
        v[..len].copy_from_slice(col);
        v[0] -= alpha;
        let vnorm2 = dot64(&v[..len], &v[..len]);
        diag[j] = alpha;
        if vnorm2 > 0.0 {
            let tau = 2.0 / vnorm2;
            for c in j + 1..k {
                let target = &mut a[c * m + j..(c + 1) * m];
                let s = dot64(&v[..len], target) * tau;
                target.iter_mut().zip(&v[..len]).for_each(|(t, vi)| *t -= s * vi);
            }
            for c in 0..n {
                let target = &mut b[c * m + j..(c + 1) * m];
                let s = dot64(&v[..len], target) * tau;
                target.iter_mut().zip(&v[..len]).for_each(|(t, vi)| *t -= s * vi);
            }
        }
        a[j * m + j] = alpha;
    }

    let max = diag.iter().map(|d| d.abs()).fold(0.0, f64::max);
    let min = diag.iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min / max < RANK_TOL {
        return None;
    }

    // back substitution R·w = (Qᵀb)[..k]
    let mut w = vec![0.0f64; k * n];
    for c in 0..n {
        for i in (0..k).rev() {
            let mut s = b[c * m + i];
            for t in i + 1..k {
                s -= a[t * m + i] * w[c * k + t];
            }
            w[c * k + i] = s / diag[i];
        }
    }
    Some(w)
}

/// Solves `(aᵀa + λI) w = aᵀb` by Cholesky. Returns column-major `[k×n]`.
fn ridge_solve(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Result<(Vec<f64>, f64)> {
    let acol = to_col_major(a, m, k);
    let bcol = to_col_major(b, m, n);
    let mut gram = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..=i {
            let v = dot64(&acol[i * m..(i + 1) * m], &acol[j * m..(j + 1) * m]);
            gram[i * k + j] = v;
            gram[j * k + i] = v;
        }
    }
    let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
    let lambda = if trace > 0.0 {
        RIDGE_EPS * trace / k as f64
    } else {
        RIDGE_EPS
    };
    for i in 0..k {
        gram[i * k + i] += lambda;
    }
    // lower-triangular Cholesky factor in place
    for j in 0..k {
        let mut d = gram[j * k + j];
        for t in 0..j {
            d -= gram[j * k + t] * gram[j * k + t];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric(
                "least squares: regularised normal matrix is not positive definite".into(),
            ));
        }
        let d = d.sqrt();
        gram[j * k + j] = d;
        for i in j + 1..k {
            let mut s = gram[i * k + j];
            for t in 0..j {
                s -= gram[i * k + t] * gram[j * k + t];
            }
            gram[i * k + j] = s / d;
        }
    }
    let mut w = vec![0.0f64; k * n];
    for c in 0..n {
        let rhs: Vec<f64> = (0..k)
            .map(|i| dot64(&acol[i * m..(i + 1) * m], &bcol[c * m..(c + 1) * m]))
            .collect();
        // L y = rhs
        let mut y = vec![0.0f64; k];
        for i in 0..k {
            let mut s = rhs[i];
            for t in 0..i {
                s -= gram[i * k + t] * y[t];
            }
            y[i] = s / gram[i * k + i];
        }
        // Lᵀ w = y
        for i in (0..k).rev() {
            let mut s = y[i];
            for t in i + 1..k {
                s -= gram[t * k + i] * w[c * k + t];
            }
            w[c * k + i] = s / gram[i * k + i];
        }
    }
    Ok((w, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn residual(a: &Tensor, w: &Tensor, b: &Tensor) -> f64 {
        let pred = matmul(a, w).unwrap();
        pred.data()
            .iter()
            .zip(b.data())
            .map(|(p, t)| (*p as f64 - *t as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn identity_design_returns_targets() {
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let w = least_squares_solve(&Tensor::identity(3), &b).unwrap();
        assert_eq!(w, b);
    }

    #[test]
    fn consistent_single_column() {
        let a = Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[2.0], &[4.0]]).unwrap();
        let w = least_squares_solve(&a, &b).unwrap();
        assert!((w.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn duplicate_columns_use_ridge() {
        let a = Tensor::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[&[2.0], &[4.0], &[6.0]]).unwrap();
        let ls = least_squares_solve_detailed(&a, &b).unwrap();
        assert!(ls.ridge_used);
        // minimum-norm-like split between the two identical columns
        assert!((ls.solution.data()[0] - 1.0).abs() < 1e-3);
        assert!((ls.solution.data()[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn underdetermined_uses_ridge() {
        let a = Tensor::from_rows(&[&[1.0, 0.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0]]).unwrap();
        let ls = least_squares_solve_detailed(&a, &b).unwrap();
        assert!(ls.ridge_used);
        assert!(residual(&a, &ls.solution, &b) < 1e-3);
    }

    #[test]
    fn errors() {
        let a = Tensor::from_rows(&[&[f32::NAN], &[1.0]]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        assert!(matches!(least_squares_solve(&a, &b), Err(Error::Numeric(_))));
        let c = Tensor::zeros(&[3, 1]);
        assert!(matches!(least_squares_solve(&Tensor::zeros(&[2, 1]), &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn local_optimality_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Tensor::from_fn(&[60, 6], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[60, 3], |_| rng.random_range(-1.0..1.0));
        let w = least_squares_solve(&a, &b).unwrap();
        let base = residual(&a, &w, &b);
        for _ in 0..100 {
            let perturbed = w.map(|v| v + rng.random_range(-1e-2..1e-2));
            assert!(residual(&a, &perturbed, &b) >= base - 1e-9);
        }
    }
}
