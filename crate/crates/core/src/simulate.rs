//! Seeded data generators for the simulation designs.
//!
//! Every generator draws, in order, the factor scores, the residual noise and
//! then any group- or observation-level matrices, so that designs sharing a
//! seed share their unperturbed data. Returned datasets are centered.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{PfaError, Result};
use crate::linalg::checked_inverse;
use crate::model::{default_variable_names, Dataset, ModelState, PerturbationMode};
use crate::priors::draw_perturbation;

/// Block-sparse ground-truth loadings with five columns. Column `h` equals 1
/// on rows `blocks[h].0..=blocks[h].1` and 0 elsewhere; consecutive blocks
/// share one row.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingFixture {
    pub which: u8,
    pub matrix: DMatrix<f64>,
    pub blocks: Vec<(usize, usize)>,
}

const FIXTURE_1_BLOCKS: [(usize, usize); 5] = [(0, 6), (6, 11), (11, 15), (15, 18), (18, 20)];
const FIXTURE_2_BLOCKS: [(usize, usize); 5] = [(0, 39), (39, 70), (70, 95), (95, 114), (114, 127)];

pub fn make_loading_fixture(which: u8) -> Result<LoadingFixture> {
    let (p, blocks) = match which {
        1 => (21, FIXTURE_1_BLOCKS),
        2 => (128, FIXTURE_2_BLOCKS),
        _ => {
            return Err(PfaError::Config(format!(
                "loading fixture must be 1 or 2, got {which}"
            )))
        }
    };
    let matrix = DMatrix::from_fn(p, 5, |l, h| {
        let (a, b) = blocks[h];
        if (a..=b).contains(&l) {
            1.0
        } else {
            0.0
        }
    });
    Ok(LoadingFixture {
        which,
        matrix,
        blocks: blocks.to_vec(),
    })
}

/// A simulated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    /// True perturbations per group (group designs) or per observation.
    pub q_true: Vec<DMatrix<f64>>,
    /// Population covariance of the observed data in each group.
    pub group_covariances: Vec<DMatrix<f64>>,
    /// Covariance of the unperturbed data, `Λ₀Λ₀ᵀ + σ²I`.
    pub shared_covariance: DMatrix<f64>,
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Filled row by row so the draw order follows observations.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

fn group_names(j: usize) -> Vec<String> {
    (1..=j).map(|g| g.to_string()).collect()
}

fn finish(values: DMatrix<f64>, labels: Vec<usize>, n_groups: usize) -> Result<Dataset> {
    let p = values.ncols();
    Ok(Dataset::new(
        values,
        labels,
        group_names(n_groups),
        default_variable_names(p),
    )?
    .centered())
}

fn low_rank_covariance(lambda: &DMatrix<f64>, noise_var: f64) -> DMatrix<f64> {
    let p = lambda.nrows();
    lambda * lambda.transpose() + DMatrix::identity(p, p) * noise_var
}

fn transform_covariance(q: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = checked_inverse(q, || "simulated perturbation".into())?;
    Ok(&inv * cov * inv.transpose())
}

/// `Y = Λ₀η + ε` with `η ~ N(0, I₅)` and `ε ~ N(0, σ²I)`.
pub fn gen_single_group(
    fixture: &LoadingFixture,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = &fixture.matrix;
    let eta = normal_matrix(n, lambda.ncols(), &mut rng);
    let eps = normal_matrix(n, lambda.nrows(), &mut rng) * sigma;
    let y = eta * lambda.transpose() + eps;
    finish(y, vec![0; n], 1)
}

/// Layout and perturbation settings of a multi-group design.
#[derive(Debug, Clone, PartialEq)]
pub struct MultigroupDesign {
    pub n_groups: usize,
    pub group_size: usize,
    pub alpha0: f64,
    pub sigma: f64,
    /// Multiplier on `Q_j − I` per group; empty means 1 for every group.
    pub deviation_scale: Vec<f64>,
    /// Groups (zero-based) whose shared signal uses only the first `rank` columns.
    pub reduced_rank: Vec<(usize, usize)>,
}

impl MultigroupDesign {
    /// Ten groups of fifty, unit residual standard deviation.
    pub fn standard(alpha0: f64) -> Self {
        Self {
            n_groups: 10,
            group_size: 50,
            alpha0,
            sigma: 1.0,
            deviation_scale: Vec::new(),
            reduced_rank: Vec::new(),
        }
    }

    fn scale(&self, j: usize) -> f64 {
        self.deviation_scale.get(j).copied().unwrap_or(1.0)
    }

    fn rank(&self, j: usize, full: usize) -> usize {
        self.reduced_rank
            .iter()
            .find(|(g, _)| *g == j)
            .map_or(full, |(_, r)| *r)
    }
}

/// Multi-group data `Y = Q_j⁻¹(Λ₀η + ε)` with `Q_1 = I` and
/// `Q_j = I + s_j (Q̃_j − I)`, `Q̃_j ~ MN(I, α₀I, α₀I)`.
pub fn gen_multigroup(
    fixture: &LoadingFixture,
    design: &MultigroupDesign,
    seed: u64,
) -> Result<Simulated> {
    if design.n_groups == 0 || design.group_size < 2 {
        return Err(PfaError::Config(
            "need at least one group of two observations".into(),
        ));
    }
    if !(design.alpha0 > 0.0) {
        return Err(PfaError::Config("alpha0 must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = &fixture.matrix;
    let (p, k) = lambda.shape();
    let j_count = design.n_groups;
    let n = j_count * design.group_size;
    let eta = normal_matrix(n, k, &mut rng);
    let eps = normal_matrix(n, p, &mut rng) * design.sigma;
    let identity = DMatrix::<f64>::identity(p, p);
    let mut q_true = vec![identity.clone()];
    for j in 1..j_count {
        let raw = draw_perturbation(design.alpha0, p, &mut rng);
        q_true.push(&identity + (raw - &identity) * design.scale(j));
    }
    let noise_var = design.sigma * design.sigma;
    let shared_covariance = low_rank_covariance(lambda, noise_var);
    let mut y = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    let mut group_covariances = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let rank = design.rank(j, k);
        let lam = lambda.columns(0, rank);
        let inv = checked_inverse(&q_true[j], || format!("simulated group {}", j + 1))?;
        let rows = j * design.group_size..(j + 1) * design.group_size;
        let w = eta.view((rows.start, 0), (design.group_size, rank)) * lam.transpose()
            + eps.rows(rows.start, design.group_size);
        y.rows_mut(rows.start, design.group_size)
            .copy_from(&(w * inv.transpose()));
        labels.extend(std::iter::repeat_n(j, design.group_size));
        group_covariances.push(transform_covariance(
            &q_true[j],
            &low_rank_covariance(&lam.into_owned(), noise_var),
        )?);
    }
    Ok(Simulated {
        data: finish(y, labels, j_count)?,
        q_true,
        group_covariances,
        shared_covariance,
    })
}

/// Ten groups of fifty perturbed by `Q_j0 ~ MN(I, α₀I, α₀I)`.
pub fn gen_multigroup_perturbed(
    fixture: &LoadingFixture,
    alpha0: f64,
    seed: u64,
) -> Result<Simulated> {
    gen_multigroup(fixture, &MultigroupDesign::standard(alpha0), seed)
}

/// As [`gen_multigroup_perturbed`], but groups 9 and 10 share only the first
/// three loading columns.
pub fn gen_partially_shared(fixture: &LoadingFixture, alpha0: f64, seed: u64) -> Result<Simulated> {
    let mut design = MultigroupDesign::standard(alpha0);
    design.reduced_rank = vec![(8, 3), (9, 3)];
    gen_multigroup(fixture, &design, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdditiveVariant {
    /// `Y = Λη₁ + Ψ_j η₂ + ε` with separate group-specific factors.
    SeparateFactors,
    /// `Y = (Λ + Ψ_j) η + ε`.
    AdditiveLoadings,
}

/// Additive group effects in the layout of the multi-group design. `Ψ_j`
/// has the shape of `Λ₀` with entries `N(psi_mean, psi_sd²)`.
pub fn gen_additive(
    fixture: &LoadingFixture,
    psi_mean: f64,
    psi_sd: f64,
    variant: AdditiveVariant,
    seed: u64,
) -> Result<Simulated> {
    let design = MultigroupDesign::standard(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = &fixture.matrix;
    let (p, k) = lambda.shape();
    let j_count = design.n_groups;
    let m = design.group_size;
    let n = j_count * m;
    let eta = normal_matrix(n, k, &mut rng);
    let eps = normal_matrix(n, p, &mut rng);
    let eta2 = match variant {
        AdditiveVariant::SeparateFactors => Some(normal_matrix(n, k, &mut rng)),
        AdditiveVariant::AdditiveLoadings => None,
    };
    let psi: Vec<DMatrix<f64>> = (0..j_count)
        .map(|_| normal_matrix(p, k, &mut rng) * psi_sd + DMatrix::from_element(p, k, psi_mean))
        .collect();
    let mut y = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    let mut group_covariances = Vec::with_capacity(j_count);
    let identity = DMatrix::<f64>::identity(p, p);
    for j in 0..j_count {
        let start = j * m;
        let eta_j = eta.rows(start, m);
        let block = match &eta2 {
            Some(e2) => {
                group_covariances
                    .push(lambda * lambda.transpose() + &psi[j] * psi[j].transpose() + &identity);
                eta_j * lambda.transpose() + e2.rows(start, m) * psi[j].transpose()
            }
            None => {
                let l = lambda + &psi[j];
                group_covariances.push(&l * l.transpose() + &identity);
                eta_j * l.transpose()
            }
        } + eps.rows(start, m);
        y.rows_mut(start, m).copy_from(&block);
        labels.extend(std::iter::repeat_n(j, m));
    }
    Ok(Simulated {
        data: finish(y, labels, j_count)?,
        q_true: Vec::new(),
        group_covariances,
        shared_covariance: low_rank_covariance(lambda, 1.0),
    })
}

/// Single-group data with one perturbation per observation:
/// `Y_i = Q_i⁻¹(Λ₀η_i + ε_i)`, `Q_i ~ MN(I, α₀I, α₀I)`.
pub fn gen_observation_perturbed(
    fixture: &LoadingFixture,
    alpha0: f64,
    n: usize,
    seed: u64,
) -> Result<Simulated> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = &fixture.matrix;
    let (p, k) = lambda.shape();
    let eta = normal_matrix(n, k, &mut rng);
    let eps = normal_matrix(n, p, &mut rng);
    let w = eta * lambda.transpose() + eps;
    let mut y = DMatrix::zeros(n, p);
    let mut q_true = Vec::with_capacity(n);
    for i in 0..n {
        let q = draw_perturbation(alpha0, p, &mut rng);
        let inv = checked_inverse(&q, || format!("simulated observation {}", i + 1))?;
        let wi = w.row(i).transpose();
        y.set_row(i, &(inv * wi).transpose());
        q_true.push(q);
    }
    let shared = low_rank_covariance(lambda, 1.0);
    let approx = &shared + DMatrix::identity(p, p) * (alpha0 * shared.trace());
    Ok(Simulated {
        data: finish(y, vec![0; n], 1)?,
        q_true,
        group_covariances: vec![approx],
        shared_covariance: shared,
    })
}

/// Draws data from the model defined by any state: `η ~ N(0, E)`,
/// `ε ~ N(0, Σ)`, `Y = Q_j⁻¹(Λη + ε)`. In observation mode fresh
/// perturbations are drawn from the prior with the state's α.
pub fn gen_from_model(state: &ModelState, counts: &[usize], seed: u64) -> Result<Simulated> {
    state.validate()?;
    let (p, k) = state.lambda.shape();
    if counts.is_empty() || counts[0] < 2 {
        return Err(PfaError::Config(
            "the first group needs at least two observations".into(),
        ));
    }
    if state.mode == PerturbationMode::Group && state.q.len() < counts.len() {
        return Err(PfaError::Dimension(format!(
            "{} group counts but {} perturbations",
            counts.len(),
            state.q.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = counts.iter().sum();
    let e_sd = state.e.map(f64::sqrt);
    let s_sd = state.sigma.map(f64::sqrt);
    let mut eta = normal_matrix(n, k, &mut rng);
    for (h, mut c) in eta.column_iter_mut().enumerate() {
        c *= e_sd[h];
    }
    let mut eps = normal_matrix(n, p, &mut rng);
    for (l, mut c) in eps.column_iter_mut().enumerate() {
        c *= s_sd[l];
    }
    let w = eta * state.lambda.transpose() + eps;
    let shared = state.shared_covariance();
    let identity = DMatrix::<f64>::identity(p, p);
    let mut labels = Vec::with_capacity(n);
    let mut y = DMatrix::zeros(n, p);
    let mut q_true = Vec::new();
    let mut group_covariances = Vec::new();
    let mut start = 0;
    for (j, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(j, c));
        match state.mode {
            PerturbationMode::Group => {
                let q = &state.q[j];
                let inv = checked_inverse(q, || format!("group {}", j + 1))?;
                y.rows_mut(start, c)
                    .copy_from(&(w.rows(start, c) * inv.transpose()));
                group_covariances.push(&inv * &shared * inv.transpose());
                q_true.push(q.clone());
            }
            PerturbationMode::None => {
                y.rows_mut(start, c).copy_from(&w.rows(start, c));
                group_covariances.push(shared.clone());
            }
            PerturbationMode::Observation => {
                for i in start..start + c {
                    let q = draw_perturbation(state.alpha, p, &mut rng);
                    let inv = checked_inverse(&q, || format!("observation {}", i + 1))?;
                    let wi: DVector<f64> = w.row(i).transpose();
                    y.set_row(i, &(inv * wi).transpose());
                    q_true.push(q);
                }
                group_covariances.push(&shared + &identity * (state.alpha * shared.trace()));
            }
        }
        start += c;
    }
    Ok(Simulated {
        data: finish(y, labels, counts.len())?,
        q_true,
        group_covariances,
        shared_covariance: shared,
    })
}
