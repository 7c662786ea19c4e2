//! Domain types: datasets, hyperparameters, Gibbs states and stored chains,
//! together with the deterministic covariance quantities of the model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PfaError, Result};
use crate::linalg::checked_inverse;

/// How the data are perturbed before entering the shared factor model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationMode {
    /// `Q ≡ I`: a heteroscedastic single-group factor model.
    None,
    /// One perturbation per group, with the first group anchored at the identity.
    Group,
    /// One perturbation per observation (multiplicative measurement error).
    Observation,
}

impl PerturbationMode {
    pub fn unit_label(self, unit: usize) -> String {
        match self {
            PerturbationMode::Observation => format!("observation {}", unit + 1),
            _ => format!("group {}", unit + 1),
        }
    }
}

/// Whether the perturbation variance `alpha` is fixed or sampled under an
/// inverse-gamma prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AlphaMode {
    Fixed { alpha: f64 },
    Learned { a_alpha: f64, b_alpha: f64 },
}

impl AlphaMode {
    pub fn learned() -> Self {
        AlphaMode::Learned {
            a_alpha: 0.1,
            b_alpha: 0.1,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, AlphaMode::Learned { .. })
    }
}

/// Prior and tuning constants for one chain.
///
/// Gamma distributions are parameterized by shape and rate. `alpha` is the
/// per-entry prior variance of a perturbation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Shape and rate of the local shrinkage prior `φ ~ Gamma(ν₁, ν₁)`.
    pub nu1: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    /// Shape of the factor-variance prior `e ~ IG(u, b_e)`.
    pub u: f64,
    pub b_e: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub alpha: AlphaMode,
    /// Loadings within `±zeta` of zero count as deleted.
    pub zeta: f64,
    /// Initial number of factors; `None` means `min(10, p)`.
    pub k_init: Option<usize>,
    /// Largest number of factors adaptation may reach; `None` means `p`.
    pub k_max: Option<usize>,
    pub adapt_c0: f64,
    pub adapt_c1: f64,
    pub burn_in: usize,
    pub n_iter: usize,
    pub seed: u64,
    /// Hold `E = I` fixed instead of sampling it.
    pub fix_factor_variance: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            nu1: 1.5,
            kappa1: 2.1,
            kappa2: 3.1,
            u: 10.0,
            b_e: 0.1,
            a_sigma: 0.1,
            b_sigma: 0.1,
            alpha: AlphaMode::Fixed { alpha: 1e-2 },
            zeta: 1e-3,
            k_init: None,
            k_max: None,
            adapt_c0: -1.0,
            adapt_c1: -5e-4,
            burn_in: 2000,
            n_iter: 7000,
            seed: 0,
            fix_factor_variance: false,
        }
    }
}

impl Hyperparameters {
    pub fn initial_rank(&self, p: usize) -> usize {
        self.k_init.unwrap_or_else(|| p.min(10))
    }

    pub fn max_rank(&self, p: usize) -> usize {
        self.k_max.unwrap_or(p).min(p)
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let positive = [
            ("nu1", self.nu1),
            ("kappa1", self.kappa1),
            ("u", self.u),
            ("b_e", self.b_e),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("zeta", self.zeta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PfaError::Config(format!(
                    "{name} must be a positive real, got {v}"
                )));
            }
        }
        if !(self.kappa2.is_finite() && self.kappa2 > 1.0) {
            return Err(PfaError::Config(format!(
                "kappa2 must exceed 1, got {}",
                self.kappa2
            )));
        }
        match self.alpha {
            AlphaMode::Fixed { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                return Err(PfaError::Config(format!(
                    "alpha must be positive, got {alpha}"
                )));
            }
            AlphaMode::Learned { a_alpha, b_alpha }
                if !(a_alpha > 0.0
                    && b_alpha > 0.0
                    && a_alpha.is_finite()
                    && b_alpha.is_finite()) =>
            {
                return Err(PfaError::Config(
                    "alpha prior parameters must be positive".into(),
                ));
            }
            _ => {}
        }
        let k = self.initial_rank(p);
        if k == 0 || k > p {
            return Err(PfaError::Config(format!(
                "k_init must lie in 1..={p}, got {k}"
            )));
        }
        if let Some(m) = self.k_max {
            if m < k || m > p {
                return Err(PfaError::Config(format!(
                    "k_max must lie in {k}..={p}, got {m}"
                )));
            }
        }
        if self.n_iter <= self.burn_in {
            return Err(PfaError::Config(format!(
                "n_iter ({}) must exceed burn_in ({})",
                self.n_iter, self.burn_in
            )));
        }
        if !(self.adapt_c0.is_finite() && self.adapt_c1.is_finite()) {
            return Err(PfaError::Config(
                "adaptation constants must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// An `n × p` data matrix with group labels.
///
/// Group indices are zero-based internally; group 0 is the identifiability
/// anchor whose perturbation is fixed at the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    group_of: Vec<usize>,
    group_names: Vec<String>,
    variable_names: Vec<String>,
    centered: bool,
    center_vector: DVector<f64>,
}

impl Dataset {
    pub fn new(
        values: DMatrix<f64>,
        group_of: Vec<usize>,
        group_names: Vec<String>,
        variable_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = values.shape();
        if group_of.len() != n {
            return Err(PfaError::Dimension(format!(
                "{} group labels for {n} observations",
                group_of.len()
            )));
        }
        if variable_names.len() != p {
            return Err(PfaError::Dimension(format!(
                "{} variable names for {p} variables",
                variable_names.len()
            )));
        }
        if p == 0 {
            return Err(PfaError::Data("dataset has no variables".into()));
        }
        for i in 0..n {
            for l in 0..p {
                if !values[(i, l)].is_finite() {
                    return Err(PfaError::NonFiniteInput {
                        row: i + 1,
                        variable: variable_names[l].clone(),
                    });
                }
            }
        }
        let j_count = group_names.len();
        let mut sizes = vec![0usize; j_count];
        for &g in &group_of {
            if g >= j_count {
                return Err(PfaError::Data(format!(
                    "group label {} out of range for {j_count} groups",
                    g + 1
                )));
            }
            sizes[g] += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(PfaError::Data(format!(
                "group {:?} is empty",
                group_names[j]
            )));
        }
        if sizes.first().copied().unwrap_or(0) < 2 {
            return Err(PfaError::Data(
                "the reference group needs at least two observations".into(),
            ));
        }
        Ok(Self {
            values,
            group_of,
            group_names,
            variable_names,
            centered: false,
            center_vector: DVector::zeros(p),
        })
    }

    /// A one-group dataset with generated names `x1..xp`.
    pub fn single_group(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        let p = values.ncols();
        Self::new(
            values,
            vec![0; n],
            vec!["1".into()],
            default_variable_names(p),
        )
    }

    /// Subtracts the global column means. Columns whose mean is already zero
    /// to rounding accuracy are left untouched, so centering is idempotent.
    pub fn centered(mut self) -> Self {
        let n = self.values.nrows() as f64;
        for (l, mut col) in self.values.column_iter_mut().enumerate() {
            let mean = col.sum() / n;
            let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if mean.abs() > 1e-12 * (1.0 + scale) {
                col.add_scalar_mut(-mean);
                self.center_vector[l] += mean;
            }
        }
        self.centered = true;
        self
    }

    /// Subtracts a fixed shift (for example a training-set center) without
    /// re-centering; the shift is added to `center_vector`.
    pub fn shifted(&self, shift: &DVector<f64>) -> Result<Self> {
        if shift.len() != self.p() {
            return Err(PfaError::Dimension("shift length differs from p".into()));
        }
        let mut out = self.clone();
        for (l, mut col) in out.values.column_iter_mut().enumerate() {
            col.add_scalar_mut(-shift[l]);
        }
        out.center_vector += shift;
        out.centered = false;
        Ok(out)
    }

    /// Restricts to the given rows, keeping every group (each must stay nonempty).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let values = self.values.select_rows(rows);
        let group_of = rows.iter().map(|&i| self.group_of[i]).collect();
        let mut out = Self::new(
            values,
            group_of,
            self.group_names.clone(),
            self.variable_names.clone(),
        )?;
        out.center_vector = self.center_vector.clone();
        Ok(out)
    }

    /// Moves the named group to index 0.
    pub fn with_reference_group(self, name: &str) -> Result<Self> {
        let j = self
            .group_index(name)
            .ok_or_else(|| PfaError::UnknownGroup(name.to_string()))?;
        if j == 0 {
            return Ok(self);
        }
        let mut order: Vec<usize> = (0..self.n_groups()).collect();
        order.remove(j);
        order.insert(0, j);
        let mut new_index = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let names = order.iter().map(|&g| self.group_names[g].clone()).collect();
        let labels = self.group_of.iter().map(|&g| new_index[g]).collect();
        let mut out = Self::new(self.values, labels, names, self.variable_names)?;
        out.centered = self.centered;
        out.center_vector = self.center_vector;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn center_vector(&self) -> &DVector<f64> {
        &self.center_vector
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.group_names.iter().position(|g| g == name)
    }

    /// Row indices of each group, in row order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups()];
        for (i, &g) in self.group_of.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups().iter().map(Vec::len).collect()
    }

    /// Rows of group `j` as a `p × n_j` matrix (one column per observation).
    pub fn group_columns(&self, j: usize) -> DMatrix<f64> {
        let rows: Vec<usize> = self.groups().swap_remove(j);
        self.values.select_rows(&rows).transpose()
    }
}

pub fn default_variable_names(p: usize) -> Vec<String> {
    (1..=p).map(|l| format!("x{l}")).collect()
}

/// Builds a centered dataset from a raw matrix and zero-based group labels.
pub fn center_dataset(raw: &DMatrix<f64>, labels: &[usize]) -> Result<Dataset> {
    if raw.nrows() < 2 {
        return Err(PfaError::Data(
            "at least two observations are required".into(),
        ));
    }
    let j_count = labels.iter().copied().max().map_or(0, |m| m + 1);
    let group_names = (1..=j_count).map(|j| j.to_string()).collect();
    Dataset::new(
        raw.clone(),
        labels.to_vec(),
        group_names,
        default_variable_names(raw.ncols()),
    )
    .map(Dataset::centered)
}

/// One Gibbs state. `phi` is `p × k`; `tau` is the running product of `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub lambda: DMatrix<f64>,
    pub e: DVector<f64>,
    /// Residual variances (diagonal of Σ).
    pub sigma: DVector<f64>,
    /// Perturbations indexed by group (group mode) or observation; empty in mode `None`.
    pub q: Vec<DMatrix<f64>>,
    /// Factor scores, `n × k`.
    pub eta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub tau: DVector<f64>,
    pub alpha: f64,
    pub mode: PerturbationMode,
}

pub fn cumulative_products(delta: &DVector<f64>) -> DVector<f64> {
    let mut acc = 1.0;
    DVector::from_iterator(
        delta.len(),
        delta.iter().map(|d| {
            acc *= d;
            acc
        }),
    )
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn recompute_tau(&mut self) {
        self.tau = cumulative_products(&self.delta);
    }

    /// Checks dimensional consistency and positivity.
    pub fn validate(&self) -> Result<()> {
        let (p, k) = self.lambda.shape();
        if self.e.len() != k
            || self.delta.len() != k
            || self.tau.len() != k
            || self.phi.shape() != (p, k)
            || self.sigma.len() != p
            || self.eta.ncols() != k
        {
            return Err(PfaError::Dimension("inconsistent state dimensions".into()));
        }
        if self.e.iter().chain(self.sigma.iter()).any(|v| !(*v > 0.0)) {
            return Err(PfaError::Data("E and Σ entries must be positive".into()));
        }
        if self.q.iter().any(|q| q.shape() != (p, p)) {
            return Err(PfaError::Dimension("perturbations must be p × p".into()));
        }
        Ok(())
    }

    /// `H = Λ E Λᵀ + Σ`.
    pub fn shared_covariance(&self) -> DMatrix<f64> {
        let scaled = &self.lambda * DMatrix::from_diagonal(&self.e);
        let mut h = scaled * self.lambda.transpose();
        for l in 0..self.p() {
            h[(l, l)] += self.sigma[l];
        }
        crate::linalg::symmetrize(&mut h);
        h
    }

    /// The perturbation for `unit`, or `None` in mode `None`.
    pub fn perturbation(&self, unit: usize) -> Result<Option<&DMatrix<f64>>> {
        if self.mode == PerturbationMode::None {
            return Ok(None);
        }
        self.q.get(unit).map(Some).ok_or_else(|| {
            PfaError::Dimension(format!(
                "{} does not exist ({} perturbations)",
                self.mode.unit_label(unit),
                self.q.len()
            ))
        })
    }

    pub fn perturbation_inverse(&self, unit: usize) -> Result<DMatrix<f64>> {
        match self.perturbation(unit)? {
            None => Ok(DMatrix::identity(self.p(), self.p())),
            Some(q) => checked_inverse(q, || self.mode.unit_label(unit)),
        }
    }

    /// Marginal covariance `Q⁻¹ H Q⁻ᵀ` of an observation in `unit`.
    pub fn group_marginal_covariance(&self, unit: usize) -> Result<DMatrix<f64>> {
        let inv = self.perturbation_inverse(unit)?;
        let mut out = &inv * self.shared_covariance() * inv.transpose();
        crate::linalg::symmetrize(&mut out);
        Ok(out)
    }

    /// `‖Q⁻¹ − I‖_F`.
    pub fn perturbation_magnitude(&self, unit: usize) -> Result<f64> {
        let inv = self.perturbation_inverse(unit)?;
        let p = self.p();
        Ok((inv - DMatrix::<f64>::identity(p, p)).norm())
    }
}

/// One stored post-burn-in draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub lambda: DMatrix<f64>,
    pub e: DVector<f64>,
    pub sigma: DVector<f64>,
    pub q: Option<Vec<DMatrix<f64>>>,
    pub eta: Option<DMatrix<f64>>,
    pub alpha: f64,
    pub k: usize,
}

/// What the per-iteration log-likelihood trace was evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSource {
    Holdout,
    Training,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainMeta {
    pub hyper: Hyperparameters,
    pub mode: PerturbationMode,
    pub seed: u64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub n_obs: usize,
    pub group_names: Vec<String>,
    pub variable_names: Vec<String>,
    /// Log-likelihood of the trace source at every iteration (including burn-in).
    pub loglik_trace: Vec<f64>,
    pub trace_source: TraceSource,
    /// Number of factors after every iteration.
    pub rank_trace: Vec<usize>,
}

/// Running posterior means accumulated over every post-burn-in iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummaries {
    pub covariance_mean: DMatrix<f64>,
    pub sigma_mean: DVector<f64>,
    pub alpha_mean: f64,
    pub q_mean: Vec<DMatrix<f64>>,
    /// Mean of `Q⁻¹` over draws (group mode only).
    pub q_inv_mean: Vec<DMatrix<f64>>,
    /// Per draw, `‖Q_j⁻¹‖²_F` for every group (group mode only).
    pub q_inv_norm_sq: Vec<Vec<f64>>,
}

/// Held-out log predictive density of the posterior mixture, per test point.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutScore {
    pub log_predictive: Vec<f64>,
    pub n_draws: usize,
}

impl HoldoutScore {
    pub fn total(&self) -> f64 {
        self.log_predictive.iter().sum()
    }

    pub fn mean_per_point(&self) -> f64 {
        self.total() / self.log_predictive.len() as f64
    }
}

/// Convention used for every reported predictive log-likelihood.
pub const PREDICTIVE_CONVENTION: &str =
    "per test point: log of the density averaged over posterior draws; summed over test points";

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub draws: Vec<Draw>,
    pub meta: ChainMeta,
    pub summaries: ChainSummaries,
    pub holdout: Option<HoldoutScore>,
    pub final_state: ModelState,
}

impl PosteriorChain {
    pub fn ranks(&self) -> Vec<usize> {
        self.draws.iter().map(|d| d.k).collect()
    }
}
