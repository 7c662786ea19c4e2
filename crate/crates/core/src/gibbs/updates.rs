use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::SamplerData;
use crate::error::{PfaError, Result};
use crate::linalg::{cholesky_lower_inverse, sample_gaussian_canonical, standard_normal_vector};
use crate::model::{Hyperparameters, ModelState};
use crate::priors::{draw_gamma, draw_inverse_gamma};

/// Draws every factor score from `N(A⁻¹ΛᵀΣ⁻¹ z_i, A⁻¹)` with `A = ΛᵀΣ⁻¹Λ + E⁻¹`.
pub fn update_factors<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &SamplerData,
    rng: &mut R,
) -> Result<()> {
    let k = state.k();
    let n = data.n();
    let sigma_inv = state.sigma.map(|s| 1.0 / s);
    let lt_sinv = {
        let mut m = state.lambda.transpose();
        for (l, mut col) in m.column_iter_mut().enumerate() {
            col *= sigma_inv[l];
        }
        m
    };
    let mut a = &lt_sinv * &state.lambda;
    for h in 0..k {
        a[(h, h)] += 1.0 / state.e[h];
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| PfaError::NotPositiveDefinite("factor-score precision".into()))?;
    // η = L⁻ᵀ(L⁻¹ΛᵀΣ⁻¹Z + N) with A = LLᵀ and N standard normal.
    let linv = cholesky_lower_inverse(&chol);
    let mut white = (&linv * &lt_sinv) * data.z();
    for j in 0..n {
        for h in 0..k {
            white[(h, j)] += rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let mean = linv.transpose() * white;
    state.eta = mean.transpose();
    Ok(())
}

/// Conditional covariance `A⁻¹` of every factor score and the matrix of
/// conditional means (`n × k`).
pub fn factor_conditional(
    state: &ModelState,
    data: &SamplerData,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sigma_inv = DMatrix::from_diagonal(&state.sigma.map(|s| 1.0 / s));
    let lt_sinv = state.lambda.transpose() * sigma_inv;
    let a = &lt_sinv * &state.lambda + DMatrix::from_diagonal(&state.e.map(|v| 1.0 / v));
    let cov = a
        .try_inverse()
        .ok_or_else(|| PfaError::NotPositiveDefinite("factor-score precision".into()))?;
    let means = (&cov * lt_sinv * data.z()).transpose();
    Ok((cov, means))
}

/// Conditional mean and covariance of row `l` of Λ.
pub fn loading_conditional(
    state: &ModelState,
    data: &SamplerData,
    l: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = state.k();
    let s = state.sigma[l];
    let mut c = state.eta.transpose() * &state.eta / s;
    for h in 0..k {
        c[(h, h)] += state.phi[(l, h)] * state.tau[h];
    }
    let b = (data.z().row(l) * &state.eta).transpose() / s;
    let cov = c.try_inverse().ok_or_else(|| {
        PfaError::NotPositiveDefinite(format!("loadings precision for variable {}", l + 1))
    })?;
    Ok((&cov * b, cov))
}

/// Draws each row of Λ from its Gaussian conditional given η, Σ, φ, τ.
pub fn update_loadings<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &SamplerData,
    rng: &mut R,
) -> Result<()> {
    let (p, k) = state.lambda.shape();
    let gram = state.eta.transpose() * &state.eta;
    let cross = data.z() * &state.eta;
    for l in 0..p {
        let s = state.sigma[l];
        let mut c = &gram / s;
        for h in 0..k {
            c[(h, h)] += state.phi[(l, h)] * state.tau[h];
        }
        let b = DVector::from_iterator(k, cross.row(l).iter().map(|v| v / s));
        let row = sample_gaussian_canonical(c, &b, rng).ok_or_else(|| {
            PfaError::NotPositiveDefinite(format!("loadings precision for variable {}", l + 1))
        })?;
        state.lambda.set_row(l, &row.transpose());
    }
    Ok(())
}

/// `φ_lh ~ Gamma(ν₁ + ½, ν₁ + τ_h λ_lh² / 2)`.
pub fn update_local_shrinkage<R: Rng + ?Sized>(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut R,
) {
    let (p, k) = state.lambda.shape();
    for h in 0..k {
        for l in 0..p {
            let lam = state.lambda[(l, h)];
            let rate = hyper.nu1 + 0.5 * state.tau[h] * lam * lam;
            state.phi[(l, h)] = draw_gamma(hyper.nu1 + 0.5, rate, rng);
        }
    }
}

/// Sequential update of `δ₁..δ_k`, recomputing `τ` after each draw.
pub fn update_column_shrinkage<R: Rng + ?Sized>(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut R,
) {
    let (p, k) = state.lambda.shape();
    let weighted: Vec<f64> = (0..k)
        .map(|h| {
            (0..p)
                .map(|l| state.phi[(l, h)] * state.lambda[(l, h)].powi(2))
                .sum()
        })
        .collect();
    for m in 0..k {
        let dm = state.delta[m];
        let tail: f64 = (m..k).map(|h| state.tau[h] / dm * weighted[h]).sum();
        let prior_shape = if m == 0 { hyper.kappa1 } else { hyper.kappa2 };
        let shape = prior_shape + 0.5 * (p * (k - m)) as f64;
        state.delta[m] = draw_gamma(shape, 1.0 + 0.5 * tail, rng);
        state.recompute_tau();
    }
}

/// `σ_l ~ IG(a_σ + n/2, b_σ + ½ Σ_i (z_il − λ_l·η_i)²)`.
pub fn update_residual_variance<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &SamplerData,
    hyper: &Hyperparameters,
    rng: &mut R,
) {
    let n = data.n() as f64;
    let resid = data.z() - &state.lambda * state.eta.transpose();
    for (l, row) in resid.row_iter().enumerate() {
        state.sigma[l] = draw_inverse_gamma(
            hyper.a_sigma + 0.5 * n,
            hyper.b_sigma + 0.5 * row.norm_squared(),
            rng,
        );
    }
}

/// `e_h ~ IG(u + n/2, b_e + ½ Σ_i η_ih²)`; a no-op when `E` is held fixed.
pub fn update_factor_variance<R: Rng + ?Sized>(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    rng: &mut R,
) {
    if hyper.fix_factor_variance {
        return;
    }
    let n = state.eta.nrows() as f64;
    for h in 0..state.k() {
        let ss = state.eta.column(h).norm_squared();
        state.e[h] = draw_inverse_gamma(hyper.u + 0.5 * n, hyper.b_e + 0.5 * ss, rng);
    }
}

pub(super) fn draw_factor_column<R: Rng + ?Sized>(
    n: usize,
    variance: f64,
    rng: &mut R,
) -> DVector<f64> {
    standard_normal_vector(n, rng) * variance.sqrt()
}
