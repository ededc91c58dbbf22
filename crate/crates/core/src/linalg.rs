//! Small numerical helpers shared by the filter, smoother and oracle.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest probability admitted before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Relative jitter added once when a symmetric positive definite solve fails.
pub const JITTER_SCALE: f64 = 1e-10;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic(x))` without cancellation for large |x|.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

#[inline]
pub fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factor of a symmetric positive definite matrix. On failure a
/// jitter of `1e-10 * trace / dim` is added to the diagonal once.
pub fn spd_factor(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let dim = m.nrows().max(1) as f64;
    let jitter = JITTER_SCALE * m.trace() / dim;
    if !(jitter > 0.0) || !jitter.is_finite() {
        return None;
    }
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += jitter;
    }
    Cholesky::new(jittered)
}

/// Log density of `N(0, cov)` at `x` given a Cholesky factor of `cov`.
pub fn gaussian_log_density(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let k = x.len() as f64;
    let l = chol.l_dirty();
    let log_det: f64 = (0..x.len()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let solved = chol.solve(x);
    let quad = x.dot(&solved);
    -0.5 * (k * LN_2PI + log_det + quad)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// PSD check with tolerance relative to the spectrum:
/// `min eig >= -tol * (1 + max eig)`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigenvalues();
    eig.min() >= -tol * (1.0 + eig.max().max(0.0))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Symmetric square root `A` with `A A^T = m` for a PSD matrix, falling back to
/// an eigen decomposition when `m` is singular.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.l();
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}
