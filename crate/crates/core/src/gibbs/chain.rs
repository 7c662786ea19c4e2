use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    adapt_rank, all_finite, check_finite, update_alpha, update_column_shrinkage,
    update_factor_variance, update_factors, update_loadings, update_local_shrinkage,
    update_perturbations, update_residual_variance, SamplerConfig, SamplerData,
};
use crate::error::{PfaError, Result};
use crate::evaluate::{HoldoutAccumulator, PredictiveKernel, TestPoints};
use crate::linalg::{checked_inverse, log_abs_det};
use crate::model::{
    AlphaMode, ChainMeta, ChainSummaries, Dataset, Draw, ModelState, PerturbationMode,
    PosteriorChain, TraceSource,
};
use crate::priors::{draw_gamma, MgpColumnWeights};

/// Starting state: zero loadings and scores, unit factor variances, residual
/// variances at the sample variances, prior draws for the shrinkage terms and
/// identity perturbations.
pub fn initial_state<R: Rng + ?Sized>(
    data: &Dataset,
    config: &SamplerConfig,
    rng: &mut R,
) -> ModelState {
    let hyper = &config.hyper;
    let (n, p) = (data.n(), data.p());
    let k = hyper.initial_rank(p);
    let weights = MgpColumnWeights::draw(hyper, k, rng);
    let phi = DMatrix::from_fn(p, k, |_, _| draw_gamma(hyper.nu1, hyper.nu1, rng));
    let sigma = DVector::from_iterator(
        p,
        data.values().column_iter().map(|c| {
            let m = c.mean();
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            if v > 1e-8 {
                v
            } else {
                1.0
            }
        }),
    );
    let n_q = match config.mode {
        PerturbationMode::None => 0,
        PerturbationMode::Group => data.n_groups(),
        PerturbationMode::Observation => n,
    };
    let alpha = match hyper.alpha {
        AlphaMode::Fixed { alpha } => alpha,
        AlphaMode::Learned { .. } => 1e-2,
    };
    ModelState {
        lambda: DMatrix::zeros(p, k),
        e: DVector::from_element(k, 1.0),
        sigma,
        q: vec![DMatrix::identity(p, p); n_q],
        eta: DMatrix::zeros(n, k),
        phi,
        delta: weights.delta,
        tau: weights.tau,
        alpha,
        mode: config.mode,
    }
}

pub fn run_chain(data: &Dataset, config: &SamplerConfig) -> Result<PosteriorChain> {
    run_chain_with_holdout(data, config, None)
}

struct SummaryAccumulator {
    count: usize,
    covariance: DMatrix<f64>,
    sigma: DVector<f64>,
    alpha: f64,
    q: Vec<DMatrix<f64>>,
    q_inv: Vec<DMatrix<f64>>,
    q_inv_norm_sq: Vec<Vec<f64>>,
}

impl SummaryAccumulator {
    fn new(p: usize, n_groups: usize) -> Self {
        Self {
            count: 0,
            covariance: DMatrix::zeros(p, p),
            sigma: DVector::zeros(p),
            alpha: 0.0,
            q: vec![DMatrix::zeros(p, p); n_groups],
            q_inv: vec![DMatrix::zeros(p, p); n_groups],
            q_inv_norm_sq: Vec::new(),
        }
    }

    fn add(&mut self, state: &ModelState) -> Result<()> {
        self.count += 1;
        self.covariance += state.shared_covariance();
        self.sigma += &state.sigma;
        self.alpha += state.alpha;
        if state.mode == PerturbationMode::Group {
            let mut norms = Vec::with_capacity(state.q.len());
            for (j, q) in state.q.iter().enumerate() {
                let inv = checked_inverse(q, || state.mode.unit_label(j))?;
                norms.push(inv.norm_squared());
                self.q[j] += q;
                self.q_inv[j] += inv;
            }
            self.q_inv_norm_sq.push(norms);
        }
        Ok(())
    }

    fn finish(self) -> ChainSummaries {
        let c = self.count.max(1) as f64;
        ChainSummaries {
            covariance_mean: self.covariance / c,
            sigma_mean: self.sigma / c,
            alpha_mean: self.alpha / c,
            q_mean: self.q.into_iter().map(|m| m / c).collect(),
            q_inv_mean: self.q_inv.into_iter().map(|m| m / c).collect(),
            q_inv_norm_sq: self.q_inv_norm_sq,
        }
    }
}

fn training_loglik(state: &ModelState, data: &SamplerData) -> Result<f64> {
    let kernel = PredictiveKernel::from_state(state)?;
    match state.mode {
        PerturbationMode::Observation => Ok(kernel.log_density_columns(data.y()).iter().sum()),
        PerturbationMode::None => Ok(kernel.log_density_columns(data.z()).iter().sum()),
        PerturbationMode::Group => {
            let base: f64 = kernel.log_density_columns(data.z()).iter().sum();
            let jac: f64 = (1..data.n_units())
                .map(|u| data.unit_members(u).len() as f64 * log_abs_det(&state.q[u]))
                .sum();
            Ok(base + jac)
        }
    }
}

/// Runs the sampler; when `holdout` is given, the log predictive density of
/// every held-out point is accumulated over post-burn-in draws and the trace
/// records the held-out log-likelihood instead of the training one.
pub fn run_chain_with_holdout(
    data: &Dataset,
    config: &SamplerConfig,
    holdout: Option<&Dataset>,
) -> Result<PosteriorChain> {
    let p = data.p();
    config.validate(p)?;
    if !data.is_centered() {
        return Err(PfaError::Data(
            "the sampler expects a centered dataset".into(),
        ));
    }
    let hyper = &config.hyper;
    let mode = config.mode;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut sd = SamplerData::new(data, mode);
    let mut state = initial_state(data, config, &mut rng);
    sd.sync(&state);

    let test = holdout
        .map(|t| TestPoints::new(t, data.group_names(), mode))
        .transpose()?;
    let mut acc = test.as_ref().map(|t| HoldoutAccumulator::new(t.len()));
    let n_groups = if mode == PerturbationMode::Group {
        data.n_groups()
    } else {
        0
    };
    let mut summaries = SummaryAccumulator::new(p, n_groups);
    let kept = hyper.n_iter - hyper.burn_in;
    let mut draws = Vec::with_capacity(kept);
    let mut loglik_trace = Vec::with_capacity(hyper.n_iter);
    let mut rank_trace = Vec::with_capacity(hyper.n_iter);

    for t in 1..=hyper.n_iter {
        update_factors(&mut state, &sd, &mut rng)?;
        check_finite(all_finite(state.eta.iter()), t, "factors")?;
        update_loadings(&mut state, &sd, &mut rng)?;
        check_finite(all_finite(state.lambda.iter()), t, "loadings")?;
        update_local_shrinkage(&mut state, hyper, &mut rng);
        check_finite(all_finite(state.phi.iter()), t, "local shrinkage")?;
        update_column_shrinkage(&mut state, hyper, &mut rng);
        check_finite(
            all_finite(state.delta.iter().chain(state.tau.iter())),
            t,
            "column shrinkage",
        )?;
        update_residual_variance(&mut state, &sd, hyper, &mut rng);
        check_finite(
            state.sigma.iter().all(|s| s.is_finite() && *s > 0.0),
            t,
            "residual variance",
        )?;
        update_factor_variance(&mut state, hyper, &mut rng);
        check_finite(
            state.e.iter().all(|s| s.is_finite() && *s > 0.0),
            t,
            "factor variance",
        )?;
        if mode != PerturbationMode::None {
            update_perturbations(&mut state, &mut sd, &mut rng)?;
            check_finite(
                state.q.iter().all(|q| all_finite(q.iter())),
                t,
                "perturbations",
            )?;
            update_alpha(&mut state, &hyper.alpha, &sd, &mut rng);
            check_finite(state.alpha.is_finite() && state.alpha > 0.0, t, "alpha")?;
        }
        adapt_rank(&mut state, hyper, t, false, &mut rng);
        rank_trace.push(state.k());

        let post = t > hyper.burn_in;
        let ll = match (&test, &mut acc) {
            (Some(points), Some(acc)) => {
                let kernel = PredictiveKernel::from_state(&state)?;
                let dens = points.log_densities(&kernel, &state.q)?;
                let total = dens.iter().sum();
                if post {
                    acc.add(&dens);
                }
                total
            }
            _ => training_loglik(&state, &sd)?,
        };
        check_finite(ll.is_finite(), t, "log-likelihood")?;
        loglik_trace.push(ll);

        if post {
            summaries.add(&state)?;
            draws.push(Draw {
                lambda: state.lambda.clone(),
                e: state.e.clone(),
                sigma: state.sigma.clone(),
                q: config.store_q.then(|| state.q.clone()),
                eta: config.store_eta.then(|| state.eta.clone()),
                alpha: state.alpha,
                k: state.k(),
            });
        }
    }

    let meta = ChainMeta {
        hyper: hyper.clone(),
        mode,
        seed: hyper.seed,
        n_iter: hyper.n_iter,
        burn_in: hyper.burn_in,
        n_obs: data.n(),
        group_names: data.group_names().to_vec(),
        variable_names: data.variable_names().to_vec(),
        loglik_trace,
        trace_source: if test.is_some() {
            TraceSource::Holdout
        } else {
            TraceSource::Training
        },
        rank_trace,
    };
    Ok(PosteriorChain {
        draws,
        meta,
        summaries: summaries.finish(),
        holdout: acc.map(HoldoutAccumulator::finish),
        final_state: state,
    })
}
