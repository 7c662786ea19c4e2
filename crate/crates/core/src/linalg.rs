//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PfaError, Result};

/// Condition number above which a perturbation matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws from `N(P⁻¹ b, P⁻¹)` given the precision `P` and `b = P·mean`.
///
/// Returns `None` when `P` is not positive definite.
pub fn sample_gaussian_canonical<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    precision_times_mean: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let chol = precision.cholesky()?;
    Some(sample_with_cholesky(&chol, precision_times_mean, rng))
}

/// Same as [`sample_gaussian_canonical`] with a precomputed factorization `P = LLᵀ`.
pub fn sample_with_cholesky<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    precision_times_mean: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mut mean = chol.solve(precision_times_mean);
    let z = standard_normal_vector(mean.len(), rng);
    let noise = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("cholesky factor has a nonzero diagonal");
    mean += noise;
    mean
}

pub fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse via LU with a 1-norm condition check. `unit` names the matrix in errors.
pub fn checked_inverse(m: &DMatrix<f64>, unit: impl FnOnce() -> String) -> Result<DMatrix<f64>> {
    let inv = m.clone().lu().try_inverse();
    let condition = match &inv {
        Some(inv) => norm_one(m) * norm_one(inv),
        None => f64::INFINITY,
    };
    match inv {
        Some(inv) if condition.is_finite() && condition <= SINGULAR_CONDITION => Ok(inv),
        _ => Err(PfaError::Singular {
            unit: unit(),
            condition,
        }),
    }
}

pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    u.diagonal().iter().map(|d| d.abs().ln()).sum()
}

/// `L⁻¹` for the factor `P = LLᵀ`, so that many right-hand sides can be
/// handled by matrix products instead of repeated triangular solves.
pub fn cholesky_lower_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let n = chol.l_dirty().nrows();
    chol.l_dirty()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has a nonzero diagonal")
        .lower_triangle()
}

/// `log det` from a Cholesky factor.
pub fn cholesky_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Dense Gaussian log-density `log N(x; 0, cov)`.
pub fn gaussian_log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let chol = cov.clone().cholesky()?;
    let p = x.len() as f64;
    let solved = chol.l_dirty().solve_lower_triangular(x)?;
    Some(
        -0.5 * (p * (2.0 * std::f64::consts::PI).ln()
            + cholesky_log_det(&chol)
            + solved.norm_squared()),
    )
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
