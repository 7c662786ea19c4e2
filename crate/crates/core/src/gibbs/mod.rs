//! Gibbs sampler for the perturbed factor model.
//!
//! Every conditional is available as a standalone update so it can be tested
//! in isolation; [`run_chain`] composes them in a fixed scan order.

mod adapt;
mod chain;
mod perturbation;
mod updates;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PfaError, Result};
use crate::model::{Dataset, Hyperparameters, ModelState, PerturbationMode};

pub use adapt::{adapt_rank, adaptation_probability, RankChange};
pub use chain::{initial_state, run_chain, run_chain_with_holdout};
pub use perturbation::{
    perturbation_column_conditional, perturbation_joint_conditional, update_alpha,
    update_perturbation_columns, update_perturbation_joint, update_perturbation_observation,
    update_perturbations,
};
pub use updates::{
    factor_conditional, loading_conditional, update_column_shrinkage, update_factor_variance,
    update_factors, update_loadings, update_local_shrinkage, update_residual_variance,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub hyper: Hyperparameters,
    pub mode: PerturbationMode,
    /// Keep every post-burn-in perturbation matrix (needed for chain-level prediction).
    pub store_q: bool,
    pub store_eta: bool,
}

impl SamplerConfig {
    pub fn new(hyper: Hyperparameters, mode: PerturbationMode) -> Self {
        Self {
            hyper,
            mode,
            store_q: false,
            store_eta: false,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        self.hyper.validate(p)
    }
}

/// Observations laid out for the sampler: one column per observation, split
/// by perturbation unit, plus the current perturbed data `z = Q y`.
#[derive(Debug, Clone)]
pub struct SamplerData {
    mode: PerturbationMode,
    y: DMatrix<f64>,
    z: DMatrix<f64>,
    units: Vec<Vec<usize>>,
    unit_y: Vec<DMatrix<f64>>,
    /// Per unit, `Σ_k Y_lk²` for each variable `l`.
    unit_sq: Vec<DVector<f64>>,
}

impl SamplerData {
    pub fn new(data: &Dataset, mode: PerturbationMode) -> Self {
        let y = data.values().transpose();
        let units: Vec<Vec<usize>> = match mode {
            PerturbationMode::None => vec![(0..data.n()).collect()],
            PerturbationMode::Group => data.groups(),
            PerturbationMode::Observation => (0..data.n()).map(|i| vec![i]).collect(),
        };
        let unit_y: Vec<DMatrix<f64>> = units.iter().map(|obs| y.select_columns(obs)).collect();
        let unit_sq = unit_y
            .iter()
            .map(|m| DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.norm_squared())))
            .collect();
        Self {
            mode,
            z: y.clone(),
            y,
            units,
            unit_y,
            unit_sq,
        }
    }

    pub fn mode(&self) -> PerturbationMode {
        self.mode
    }

    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    /// Raw observations, `p × n`.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Perturbed observations `Q_u y_i`, `p × n`.
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_members(&self, unit: usize) -> &[usize] {
        &self.units[unit]
    }

    pub fn unit_y(&self, unit: usize) -> &DMatrix<f64> {
        &self.unit_y[unit]
    }

    /// Recomputes `z` for every unit from the state's perturbations.
    pub fn sync(&mut self, state: &ModelState) {
        if self.mode == PerturbationMode::None {
            self.z.copy_from(&self.y);
            return;
        }
        for u in 0..self.units.len() {
            self.refresh_unit(u, &state.q[u]);
        }
    }

    fn refresh_unit(&mut self, unit: usize, q: &DMatrix<f64>) {
        let zu = q * &self.unit_y[unit];
        for (c, &i) in self.units[unit].iter().enumerate() {
            self.z.set_column(i, &zu.column(c));
        }
    }

    /// Number of perturbation matrices the state must carry.
    pub fn n_perturbations(&self) -> usize {
        match self.mode {
            PerturbationMode::None => 0,
            _ => self.units.len(),
        }
    }

    /// Units whose perturbation is sampled (group mode skips the reference group).
    pub fn free_units(&self) -> std::ops::Range<usize> {
        match self.mode {
            PerturbationMode::None => 0..0,
            PerturbationMode::Group => 1..self.units.len(),
            PerturbationMode::Observation => 0..self.units.len(),
        }
    }
}

fn check_finite(ok: bool, iteration: usize, block: &'static str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PfaError::NonFiniteState { iteration, block })
    }
}

fn all_finite<'a>(xs: impl IntoIterator<Item = &'a f64>) -> bool {
    xs.into_iter().all(|x| x.is_finite())
}
