use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use pfa_core::io::{read_json, IngestOptions};
use pfa_core::{AlphaMode, Hyperparameters, PerturbationMode, PfaError, Result};
use serde::{Deserialize, Serialize};

/// Settings a run can take from a JSON file; command-line flags win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub group_column: Option<String>,
    pub reference_group: Option<String>,
    pub log_transform: bool,
    pub mode: Option<PerturbationMode>,
    pub hyperparameters: Hyperparameters,
    pub alpha_grid: Vec<f64>,
    pub n_splits: usize,
    pub tie_se: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            group_column: None,
            reference_group: None,
            log_transform: false,
            mode: None,
            hyperparameters: Hyperparameters::default(),
            alpha_grid: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            n_splits: 10,
            tie_se: 2.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => read_json(p).map_err(|e| match e {
                PfaError::Json(j) => PfaError::Config(format!("{}: {j}", p.display())),
                other => other,
            }),
        }
    }

    /// Group mode when a group column is given, otherwise no perturbation.
    pub fn resolved_mode(&self) -> PerturbationMode {
        self.mode.unwrap_or(if self.group_column.is_some() {
            PerturbationMode::Group
        } else {
            PerturbationMode::None
        })
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            group_column: self.group_column.clone(),
            log_transform: self.log_transform,
            reference_group: self.reference_group.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    None,
    Group,
    Observation,
}

impl From<ModeArg> for PerturbationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => PerturbationMode::None,
            ModeArg::Group => PerturbationMode::Group,
            ModeArg::Observation => PerturbationMode::Observation,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Headered CSV with one row per observation
    #[arg(long)]
    pub input: PathBuf,
    /// Column holding group labels
    #[arg(long = "group-col")]
    pub group_col: Option<String>,
    /// Group anchored at the identity perturbation (default: first label seen)
    #[arg(long = "reference-group")]
    pub reference_group: Option<String>,
    /// Take natural logarithms of every value
    #[arg(long = "log-transform")]
    pub log_transform: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// JSON run configuration; flags given here override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Perturbation mode (default: group with --group-col, else none)
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Fixed perturbation variance
    #[arg(long, conflicts_with = "fb")]
    pub alpha: Option<f64>,
    /// Learn the perturbation variance under an inverse-gamma prior
    #[arg(long)]
    pub fb: bool,
    /// Total Gibbs iterations, burn-in included
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long = "k-init")]
    pub k_init: Option<usize>,
    #[arg(long = "k-max")]
    pub k_max: Option<usize>,
    /// Loading magnitude below which a column counts as inactive
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Shape of the factor-variance prior
    #[arg(long)]
    pub u: Option<f64>,
    /// Fix the factor variances at one
    #[arg(long = "fix-e")]
    pub fix_e: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ModelArgs {
    pub fn resolve(&self, data: Option<&DataArgs>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(d) = data {
            if d.group_col.is_some() {
                cfg.group_column = d.group_col.clone();
            }
            if d.reference_group.is_some() {
                cfg.reference_group = d.reference_group.clone();
            }
            cfg.log_transform |= d.log_transform;
        }
        if let Some(m) = self.mode {
            cfg.mode = Some(m.into());
        }
        let h = &mut cfg.hyperparameters;
        if let Some(a) = self.alpha {
            h.alpha = AlphaMode::Fixed { alpha: a };
        }
        if self.fb && !h.alpha.is_learned() {
            h.alpha = AlphaMode::learned();
        }
        if let Some(v) = self.iters {
            h.n_iter = v;
        }
        if let Some(v) = self.burnin {
            h.burn_in = v;
        }
        if self.k_init.is_some() {
            h.k_init = self.k_init;
        }
        if self.k_max.is_some() {
            h.k_max = self.k_max;
        }
        if let Some(v) = self.zeta {
            h.zeta = v;
        }
        if let Some(v) = self.u {
            h.u = v;
        }
        h.fix_factor_variance |= self.fix_e;
        if let Some(v) = self.seed {
            h.seed = v;
        }
        if let AlphaMode::Fixed { alpha } = h.alpha {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(PfaError::Config(format!(
                    "alpha must be a positive real, got {alpha}"
                )));
            }
        }
        Ok(cfg)
    }
}
