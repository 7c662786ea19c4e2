use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PfaError, Result};
use crate::linalg::{checked_inverse, cholesky_log_det};
use crate::model::{Dataset, ModelState, PerturbationMode, PosteriorChain};
use crate::serde_mat;

/// Pairwise group divergences `d_jl` with network edge weights `60/d_jl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMatrix {
    #[serde(with = "serde_mat::matrix")]
    pub d: DMatrix<f64>,
    /// Zero on the diagonal; infinite where `d_jl = 0`.
    #[serde(skip)]
    pub edge_weights: DMatrix<f64>,
    /// Mean over draws of the per-draw statistic, when available.
    #[serde(skip)]
    pub per_draw_mean: Option<DMatrix<f64>>,
}

/// `d_jl = sqrt(|s_j − s_l| / p²)` from squared norms `s_j = ‖Q_j⁻¹‖²_F`.
pub fn divergence_from_norms(norms_sq: &[f64], p: usize) -> DMatrix<f64> {
    let j = norms_sq.len();
    let p2 = (p * p) as f64;
    DMatrix::from_fn(j, j, |a, b| {
        if a == b {
            0.0
        } else {
            ((norms_sq[a] - norms_sq[b]).abs() / p2).sqrt()
        }
    })
}

pub fn edge_weights(d: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(d.nrows(), d.ncols(), |a, b| {
        if a == b {
            0.0
        } else if d[(a, b)] == 0.0 {
            f64::INFINITY
        } else {
            60.0 / d[(a, b)]
        }
    })
}

/// Divergences from explicit perturbation matrices (for example posterior means).
pub fn divergence_from_perturbations(q: &[DMatrix<f64>]) -> Result<DivergenceMatrix> {
    let p = q.first().map_or(0, |m| m.nrows());
    let norms = q
        .iter()
        .enumerate()
        .map(|(j, m)| {
            checked_inverse(m, || format!("group {}", j + 1)).map(|inv| inv.norm_squared())
        })
        .collect::<Result<Vec<f64>>>()?;
    let d = divergence_from_norms(&norms, p);
    Ok(DivergenceMatrix {
        edge_weights: edge_weights(&d),
        d,
        per_draw_mean: None,
    })
}

/// Divergences at the posterior-mean perturbations `Q̂_j`, plus the mean of
/// the per-draw statistic.
pub fn divergence_matrix(chain: &PosteriorChain) -> Result<DivergenceMatrix> {
    if chain.meta.mode != PerturbationMode::Group {
        return Err(PfaError::Config(
            "divergences need a group-mode chain".into(),
        ));
    }
    let mut out = divergence_from_perturbations(&chain.summaries.q_mean)?;
    let per_draw = &chain.summaries.q_inv_norm_sq;
    if !per_draw.is_empty() {
        let p = chain.final_state.p();
        let j = chain.summaries.q_mean.len();
        let mut acc = DMatrix::zeros(j, j);
        for norms in per_draw {
            acc += divergence_from_norms(norms, p);
        }
        out.per_draw_mean = Some(acc / per_draw.len() as f64);
    }
    Ok(out)
}

/// `KL(N(0, C_j) ‖ N(0, C_l))` between two groups' marginal covariances.
pub fn kl_group_marginals(state: &ModelState, j: usize, l: usize) -> Result<f64> {
    let cj = state.group_marginal_covariance(j)?;
    let cl = state.group_marginal_covariance(l)?;
    gaussian_kl(&cj, &cl)
}

/// `KL(N(0, a) ‖ N(0, b))`.
pub fn gaussian_kl(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let p = a.nrows() as f64;
    let ca = a
        .clone()
        .cholesky()
        .ok_or_else(|| PfaError::NotPositiveDefinite("first KL covariance".into()))?;
    let cb = b
        .clone()
        .cholesky()
        .ok_or_else(|| PfaError::NotPositiveDefinite("second KL covariance".into()))?;
    let trace = cb.solve(a).trace();
    Ok((0.5 * (trace - p + cholesky_log_det(&cb) - cholesky_log_det(&ca))).max(0.0))
}

/// Mean squared entrywise difference.
pub fn covariance_mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(PfaError::Dimension(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    Ok((estimate - truth).norm_squared() / estimate.len() as f64)
}

fn group_moments(data: &Dataset, j: usize) -> (usize, DVector<f64>, DMatrix<f64>) {
    let cols = data.group_columns(j);
    let n = cols.ncols();
    let mean = cols.column_mean();
    let mut scatter = DMatrix::zeros(cols.nrows(), cols.nrows());
    for c in cols.column_iter() {
        let d = c - &mean;
        scatter += &d * d.transpose();
    }
    (n, mean, scatter)
}

/// Two-sample Hotelling `T²` with pooled covariance.
pub fn hotelling_t2(data: &Dataset, j: usize, l: usize) -> Result<f64> {
    let p = data.p();
    for g in [j, l] {
        if g >= data.n_groups() {
            return Err(PfaError::UnknownGroup(format!("{}", g + 1)));
        }
    }
    let (nj, mj, sj) = group_moments(data, j);
    let (nl, ml, sl) = group_moments(data, l);
    if nj + nl <= p + 1 {
        return Err(PfaError::Data(format!(
            "Hotelling T² needs n_j + n_l > p + 1 (got {} and p = {p})",
            nj + nl
        )));
    }
    let pooled = (sj + sl) / (nj + nl - 2) as f64;
    let chol = pooled
        .cholesky()
        .ok_or_else(|| PfaError::NotPositiveDefinite("pooled covariance".into()))?;
    let diff = mj - ml;
    let scale = (nj * nl) as f64 / (nj + nl) as f64;
    Ok(scale * diff.dot(&chol.solve(&diff)))
}
