use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::updates::draw_factor_column;
use crate::model::{Hyperparameters, ModelState};
use crate::priors::draw_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankChange {
    Unchanged,
    Deleted(usize),
    Added,
}

/// `exp(c0 + c1 t)`, capped at 1.
pub fn adaptation_probability(hyper: &Hyperparameters, iteration: usize) -> f64 {
    (hyper.adapt_c0 + hyper.adapt_c1 * iteration as f64)
        .exp()
        .min(1.0)
}

/// Adaptive truncation of the factor dimension.
///
/// With probability [`adaptation_probability`] (or always when `force` is
/// set), columns whose loadings all lie within `±ζ` are removed. When none
/// qualifies and `k` is below the rank cap, a column drawn from the prior is appended. Nothing
/// happens after burn-in.
pub fn adapt_rank<R: Rng + ?Sized>(
    state: &mut ModelState,
    hyper: &Hyperparameters,
    iteration: usize,
    force: bool,
    rng: &mut R,
) -> RankChange {
    if iteration > hyper.burn_in {
        return RankChange::Unchanged;
    }
    let u: f64 = rng.random();
    if !force && u >= adaptation_probability(hyper, iteration) {
        return RankChange::Unchanged;
    }
    let (p, k) = state.lambda.shape();
    let mut inactive: Vec<usize> = (0..k)
        .filter(|&h| state.lambda.column(h).iter().all(|v| v.abs() <= hyper.zeta))
        .collect();
    if inactive.len() == k {
        inactive.remove(0);
    }
    if !inactive.is_empty() {
        let keep: Vec<usize> = (0..k).filter(|h| !inactive.contains(h)).collect();
        state.lambda = state.lambda.select_columns(&keep);
        state.phi = state.phi.select_columns(&keep);
        state.eta = state.eta.select_columns(&keep);
        state.e = state.e.select_rows(&keep);
        state.delta = state.delta.select_rows(&keep);
        state.recompute_tau();
        return RankChange::Deleted(inactive.len());
    }
    if k >= hyper.max_rank(p) {
        return RankChange::Unchanged;
    }
    let n = state.eta.nrows();
    let new_delta = draw_gamma(hyper.kappa2, 1.0, rng);
    let phi_col = DVector::from_fn(p, |_, _| draw_gamma(hyper.nu1, hyper.nu1, rng));
    let tau_new = state.tau.get(k.wrapping_sub(1)).copied().unwrap_or(1.0) * new_delta;
    let lam_col = DVector::from_fn(p, |l, _| {
        let z: f64 = rng.sample(StandardNormal);
        z / (phi_col[l] * tau_new).sqrt()
    });
    let e_new = if hyper.fix_factor_variance {
        1.0
    } else {
        median(state.e.as_slice())
    };
    let eta_col = draw_factor_column(n, e_new, rng);

    state.lambda = append_column(&state.lambda, &lam_col);
    state.phi = append_column(&state.phi, &phi_col);
    state.eta = append_column(&state.eta, &eta_col);
    state.e = state.e.push(e_new);
    state.delta = state.delta.push(new_delta);
    state.recompute_tau();
    RankChange::Added
}

fn append_column(m: &DMatrix<f64>, col: &DVector<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let mut out = m.clone().insert_column(k, 0.0);
    out.set_column(k, col);
    out
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 1.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
