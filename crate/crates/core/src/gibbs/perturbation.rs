use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::SamplerData;
use crate::error::{PfaError, Result};
use crate::linalg::sample_gaussian_canonical;
use crate::model::{AlphaMode, ModelState, PerturbationMode};
use crate::priors::draw_inverse_gamma;

/// `Λ η_iᵀ` for every member of `unit`, as a `p × n_u` matrix.
fn unit_signal(state: &ModelState, data: &SamplerData, unit: usize) -> DMatrix<f64> {
    let eta = state.eta.select_rows(data.unit_members(unit));
    &state.lambda * eta.transpose()
}

fn check_unit(data: &SamplerData, unit: usize) -> Result<()> {
    if data.mode() == PerturbationMode::None || unit >= data.n_units() {
        return Err(PfaError::Dimension(format!(
            "no perturbation unit {} in mode {:?}",
            unit + 1,
            data.mode()
        )));
    }
    if data.mode() == PerturbationMode::Group && unit == 0 {
        return Err(PfaError::Config(
            "the reference group's perturbation is fixed at the identity".into(),
        ));
    }
    Ok(())
}

/// One sweep over the columns of `Q_unit`, each drawn from its
/// independent-row Gaussian conditional. No matrix inversion is needed.
pub fn update_perturbation_columns<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &mut SamplerData,
    unit: usize,
    rng: &mut R,
) -> Result<()> {
    check_unit(data, unit)?;
    let p = state.p();
    let alpha = state.alpha;
    let y = data.unit_y(unit).clone();
    let sq = data.unit_sq[unit].clone();
    let q = &mut state.q[unit];
    let mut resid = &*q * &y - unit_signal_from(&state.lambda, &state.eta, data.unit_members(unit));
    for l in 0..p {
        let y_l = y.row(l);
        let ry = &resid * y_l.transpose();
        let s_l = sq[l];
        let mut change = DVector::zeros(p);
        for a in 0..p {
            let precision = s_l / state.sigma[a] + 1.0 / alpha;
            let prior = if a == l { 1.0 / alpha } else { 0.0 };
            let linear = (q[(a, l)] * s_l - ry[a]) / state.sigma[a] + prior;
            let z: f64 = rng.sample(StandardNormal);
            let new = linear / precision + z / precision.sqrt();
            change[a] = new - q[(a, l)];
            q[(a, l)] = new;
        }
        resid += &change * y_l;
    }
    let q = state.q[unit].clone();
    data.refresh_unit(unit, &q);
    Ok(())
}

/// Independent-row Gaussian conditional of column `l` of `Q_unit` given the
/// other columns: per-row means and variances.
pub fn perturbation_column_conditional(
    state: &ModelState,
    data: &SamplerData,
    unit: usize,
    l: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_unit(data, unit)?;
    let p = state.p();
    let y = data.unit_y(unit);
    let q = &state.q[unit];
    let resid = q * y - unit_signal(state, data, unit);
    let ry = &resid * y.row(l).transpose();
    let s_l = data.unit_sq[unit][l];
    let mut mean = DVector::zeros(p);
    let mut var = DVector::zeros(p);
    for a in 0..p {
        let precision = s_l / state.sigma[a] + 1.0 / state.alpha;
        let prior = if a == l { 1.0 / state.alpha } else { 0.0 };
        mean[a] = ((q[(a, l)] * s_l - ry[a]) / state.sigma[a] + prior) / precision;
        var[a] = 1.0 / precision;
    }
    Ok((mean, var))
}

fn unit_signal_from(lambda: &DMatrix<f64>, eta: &DMatrix<f64>, members: &[usize]) -> DMatrix<f64> {
    lambda * eta.select_rows(members).transpose()
}

/// Precision and precision-times-mean of `vec(Q_unit)` (column-major) given
/// everything else: `I/α + S ⊗ Σ⁻¹` and `vec(I)/α + vec(Σ⁻¹ T Yᵀ)`, where
/// `S = Y Yᵀ` and `T = Λ η` over the unit's observations.
pub fn perturbation_joint_conditional(
    state: &ModelState,
    data: &SamplerData,
    unit: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_unit(data, unit)?;
    let p = state.p();
    let y = data.unit_y(unit);
    let t = unit_signal(state, data, unit);
    let s = y * y.transpose();
    let sigma_inv = DMatrix::from_diagonal(&state.sigma.map(|v| 1.0 / v));
    let mut precision = s.kronecker(&sigma_inv);
    let mut linear_m = &sigma_inv * t * y.transpose();
    for i in 0..p * p {
        precision[(i, i)] += 1.0 / state.alpha;
    }
    for a in 0..p {
        linear_m[(a, a)] += 1.0 / state.alpha;
    }
    Ok((precision, DVector::from_column_slice(linear_m.as_slice())))
}

/// Draws `Q_unit` jointly from its `p²`-dimensional Gaussian conditional.
/// Cost is `O(p⁶)`; intended as a reference for the column sweep.
pub fn update_perturbation_joint<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &mut SamplerData,
    unit: usize,
    rng: &mut R,
) -> Result<()> {
    let p = state.p();
    let (precision, linear) = perturbation_joint_conditional(state, data, unit)?;
    let v = sample_gaussian_canonical(precision, &linear, rng).ok_or_else(|| {
        PfaError::NotPositiveDefinite(format!(
            "joint perturbation precision for {}",
            state.mode.unit_label(unit)
        ))
    })?;
    state.q[unit] = DMatrix::from_column_slice(p, p, v.as_slice());
    let q = state.q[unit].clone();
    data.refresh_unit(unit, &q);
    Ok(())
}

/// Observation-mode update of `Q_i` through the column sweep.
pub fn update_perturbation_observation<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &mut SamplerData,
    obs: usize,
    rng: &mut R,
) -> Result<()> {
    if data.mode() != PerturbationMode::Observation {
        return Err(PfaError::Config(
            "observation update outside observation mode".into(),
        ));
    }
    update_perturbation_columns(state, data, obs, rng)
}

/// Sweeps every free perturbation once.
pub fn update_perturbations<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &mut SamplerData,
    rng: &mut R,
) -> Result<()> {
    for u in data.free_units() {
        update_perturbation_columns(state, data, u, rng)?;
    }
    Ok(())
}

/// `α ~ IG(a + m p²/2, b + ½ Σ ‖Q − I‖²_F)` over the `m` free perturbations.
/// A no-op unless α is learned.
pub fn update_alpha<R: Rng + ?Sized>(
    state: &mut ModelState,
    mode: &AlphaMode,
    data: &SamplerData,
    rng: &mut R,
) {
    let AlphaMode::Learned { a_alpha, b_alpha } = *mode else {
        return;
    };
    let p = state.p();
    let units = data.free_units();
    let count = (units.len() * p * p) as f64;
    let identity = DMatrix::<f64>::identity(p, p);
    let ss: f64 = units
        .map(|u| (&state.q[u] - &identity).norm_squared())
        .sum();
    state.alpha = draw_inverse_gamma(a_alpha + 0.5 * count, b_alpha + 0.5 * ss, rng);
}
