use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{PfaError, Result};
use crate::linalg::{cholesky_log_det, cholesky_lower_inverse, log_abs_det, log_sum_exp};
use crate::model::{Dataset, Draw, HoldoutScore, ModelState, PerturbationMode, PosteriorChain};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

enum Covariance {
    /// `H = ΛEΛᵀ + Σ` in factored form; densities via the Woodbury identity.
    Factored {
        sigma_inv: DVector<f64>,
        /// `L⁻¹ΛᵀΣ⁻¹` with `ΛᵀΣ⁻¹Λ + E⁻¹ = LLᵀ`.
        whitened: DMatrix<f64>,
        log_det: f64,
    },
    Dense {
        chol: Cholesky<f64, Dyn>,
        log_det: f64,
    },
}

/// Zero-mean Gaussian density used for prediction under one posterior draw.
///
/// In modes `None` and `Group` the covariance is `H`; in observation mode it
/// is `α·tr(H)·I + H`, the marginal of `Y = Q⁻¹W` to first order in `Q − I`.
pub struct PredictiveKernel {
    p: usize,
    cov: Covariance,
}

impl PredictiveKernel {
    pub fn new(
        lambda: &DMatrix<f64>,
        e: &DVector<f64>,
        sigma: &DVector<f64>,
        alpha: f64,
        mode: PerturbationMode,
    ) -> Result<Self> {
        let p = lambda.nrows();
        if mode == PerturbationMode::Observation {
            let mut h = lambda * DMatrix::from_diagonal(e) * lambda.transpose();
            let mut trace = 0.0;
            for l in 0..p {
                h[(l, l)] += sigma[l];
                trace += h[(l, l)];
            }
            for l in 0..p {
                h[(l, l)] += alpha * trace;
            }
            crate::linalg::symmetrize(&mut h);
            let chol = h.cholesky().ok_or_else(|| {
                PfaError::NotPositiveDefinite("observation-mode predictive covariance".into())
            })?;
            let log_det = cholesky_log_det(&chol);
            return Ok(Self {
                p,
                cov: Covariance::Dense { chol, log_det },
            });
        }
        let k = lambda.ncols();
        let sigma_inv = sigma.map(|s| 1.0 / s);
        let mut lt_sinv = lambda.transpose();
        for (l, mut col) in lt_sinv.column_iter_mut().enumerate() {
            col *= sigma_inv[l];
        }
        let mut a = &lt_sinv * lambda;
        for h in 0..k {
            a[(h, h)] += 1.0 / e[h];
        }
        let chol_a = a
            .cholesky()
            .ok_or_else(|| PfaError::NotPositiveDefinite("predictive capacitance matrix".into()))?;
        let log_det = sigma.iter().map(|s| s.ln()).sum::<f64>()
            + e.iter().map(|v| v.ln()).sum::<f64>()
            + cholesky_log_det(&chol_a);
        Ok(Self {
            p,
            cov: Covariance::Factored {
                sigma_inv,
                whitened: cholesky_lower_inverse(&chol_a) * lt_sinv,
                log_det,
            },
        })
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        Self::new(
            &state.lambda,
            &state.e,
            &state.sigma,
            state.alpha,
            state.mode,
        )
    }

    /// Log-density of each column of `x` (`p × m`).
    pub fn log_density_columns(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let c = -0.5 * self.p as f64 * LN_2PI;
        match &self.cov {
            Covariance::Factored {
                sigma_inv,
                whitened,
                log_det,
            } => {
                let v = whitened * x;
                (0..x.ncols())
                    .map(|i| {
                        let xi = x.column(i);
                        let direct: f64 = xi
                            .iter()
                            .zip(sigma_inv.iter())
                            .map(|(a, s)| a * a * s)
                            .sum();
                        let quad = direct - v.column(i).norm_squared();
                        c - 0.5 * (log_det + quad)
                    })
                    .collect()
            }
            Covariance::Dense { chol, log_det } => {
                let v = chol
                    .l_dirty()
                    .solve_lower_triangular(x)
                    .expect("cholesky factor has a nonzero diagonal");
                (0..x.ncols())
                    .map(|i| c - 0.5 * (log_det + v.column(i).norm_squared()))
                    .collect()
            }
        }
    }
}

struct TestBlock {
    unit: Option<usize>,
    rows: Vec<usize>,
    y: DMatrix<f64>,
}

/// Test observations grouped by the perturbation that applies to them.
pub struct TestPoints {
    n: usize,
    blocks: Vec<TestBlock>,
}

impl TestPoints {
    /// In group mode, test groups are matched to training groups by name.
    pub fn new(test: &Dataset, train_groups: &[String], mode: PerturbationMode) -> Result<Self> {
        let y = test.values().transpose();
        let blocks = match mode {
            PerturbationMode::Group => {
                let mut blocks = Vec::new();
                for (j, rows) in test.groups().into_iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let name = &test.group_names()[j];
                    let unit = train_groups
                        .iter()
                        .position(|g| g == name)
                        .ok_or_else(|| PfaError::UnknownGroup(name.clone()))?;
                    blocks.push(TestBlock {
                        unit: Some(unit),
                        y: y.select_columns(&rows),
                        rows,
                    });
                }
                blocks
            }
            _ => vec![TestBlock {
                unit: None,
                rows: (0..test.n()).collect(),
                y,
            }],
        };
        Ok(Self {
            n: test.n(),
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Per-point log-densities under one draw; group-mode points are mapped
    /// through their group's perturbation and include `log|det Q_j|`.
    pub fn log_densities(&self, kernel: &PredictiveKernel, q: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n];
        for block in &self.blocks {
            let (dens, jac) = match block.unit {
                Some(u) if u > 0 => {
                    let qu = q.get(u).ok_or_else(|| {
                        PfaError::Dimension(format!("no perturbation for group {}", u + 1))
                    })?;
                    (
                        kernel.log_density_columns(&(qu * &block.y)),
                        log_abs_det(qu),
                    )
                }
                _ => (kernel.log_density_columns(&block.y), 0.0),
            };
            for (&i, d) in block.rows.iter().zip(dens) {
                out[i] = d + jac;
            }
        }
        Ok(out)
    }
}

/// Running `log Σ_draws p(y_i | draw)` per test point.
pub struct HoldoutAccumulator {
    lse: Vec<f64>,
    count: usize,
}

impl HoldoutAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            lse: vec![f64::NEG_INFINITY; n],
            count: 0,
        }
    }

    pub fn add(&mut self, log_densities: &[f64]) {
        for (acc, d) in self.lse.iter_mut().zip(log_densities) {
            *acc = log_sum_exp(*acc, *d);
        }
        self.count += 1;
    }

    pub fn finish(self) -> HoldoutScore {
        let ln_n = (self.count.max(1) as f64).ln();
        HoldoutScore {
            log_predictive: self.lse.into_iter().map(|v| v - ln_n).collect(),
            n_draws: self.count,
        }
    }
}

/// Total log predictive density of `test` under a single state.
pub fn predictive_loglik(
    state: &ModelState,
    test: &Dataset,
    train_groups: &[String],
) -> Result<f64> {
    let points = TestPoints::new(test, train_groups, state.mode)?;
    let kernel = PredictiveKernel::from_state(state)?;
    Ok(points.log_densities(&kernel, &state.q)?.iter().sum())
}

/// Log predictive density of the posterior mixture at each test point.
/// Group-mode chains must have been run with stored perturbations.
pub fn chain_predictive_loglik(chain: &PosteriorChain, test: &Dataset) -> Result<HoldoutScore> {
    draws_predictive_loglik(&chain.draws, chain.meta.mode, &chain.meta.group_names, test)
}

pub fn draws_predictive_loglik(
    draws: &[Draw],
    mode: PerturbationMode,
    train_groups: &[String],
    test: &Dataset,
) -> Result<HoldoutScore> {
    let points = TestPoints::new(test, train_groups, mode)?;
    let mut acc = HoldoutAccumulator::new(points.len());
    let empty = Vec::new();
    for draw in draws {
        let q = match (mode, &draw.q) {
            (PerturbationMode::Group, None) => {
                return Err(PfaError::Config(
                    "group-mode prediction needs draws with stored perturbations".into(),
                ))
            }
            (_, Some(q)) => q,
            (_, None) => &empty,
        };
        let kernel = PredictiveKernel::new(&draw.lambda, &draw.e, &draw.sigma, draw.alpha, mode)?;
        acc.add(&points.log_densities(&kernel, q)?);
    }
    Ok(acc.finish())
}
