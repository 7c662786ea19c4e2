use nalgebra::{DMatrix, DVector};
use pfa_core::evaluate::{
    cv_alpha as run_cv, divergence_from_norms, divergence_from_perturbations, divergence_matrix,
    draws_predictive_loglik, hotelling_t2, CvAlphaSummary, CvConfig, DivergenceMatrix,
};
use pfa_core::gibbs::{run_chain, SamplerConfig};
use pfa_core::io::{ingest_csv, read_json, IngestOptions, StoredChain};
use pfa_core::linalg::checked_inverse;
use pfa_core::postprocess::{align_modal_rank, effective_rank, point_estimate};
use pfa_core::simulate::{
    gen_additive, gen_multigroup_perturbed, gen_observation_perturbed, gen_partially_shared,
    gen_single_group, make_loading_fixture, AdditiveVariant, Simulated,
};
use pfa_core::{
    Dataset, PerturbationMode, PfaError, PosteriorChain, Result, TraceSource, PREDICTIVE_CONVENTION,
};
use serde::Serialize;

use crate::config::{DataArgs, RunConfig};
use crate::heatmap::render_png;
use crate::output::OutputDir;
use crate::{Case, CvArgs, DivergeArgs, FitArgs, PredictArgs, SimulateArgs, Variant};

#[derive(Serialize)]
struct Manifest<C: Serialize> {
    command: &'static str,
    args: Vec<String>,
    version: &'static str,
    seed: u64,
    config: C,
    predictive_convention: &'static str,
    outputs: Vec<String>,
}

fn commit<C: Serialize>(out: OutputDir, command: &'static str, seed: u64, config: C) -> Result<()> {
    let mut outputs = out.outputs().to_vec();
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command,
        args: std::env::args().skip(1).collect(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        predictive_convention: PREDICTIVE_CONVENTION,
        outputs,
    };
    out.commit(&manifest)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn sample(data: &Dataset, cfg: &RunConfig, store_q: bool) -> Result<PosteriorChain> {
    let mode = cfg.resolved_mode();
    if mode == PerturbationMode::Group && data.n_groups() < 2 {
        return Err(PfaError::Config(
            "group mode needs a group column with at least two groups".into(),
        ));
    }
    let mut sampler = SamplerConfig::new(cfg.hyperparameters.clone(), mode);
    sampler.store_q = store_q;
    run_chain(data, &sampler)
}

fn write_divergence(
    out: &mut OutputDir,
    groups: &[String],
    div: &DivergenceMatrix,
    heatmaps: bool,
) -> Result<()> {
    out.matrix("divergence.csv", "group", groups, groups, &div.d)?;
    out.matrix(
        "edge_weights.csv",
        "group",
        groups,
        groups,
        &div.edge_weights,
    )?;
    if let Some(per_draw) = &div.per_draw_mean {
        out.matrix("divergence_per_draw.csv", "group", groups, groups, per_draw)?;
    }
    if heatmaps {
        out.bytes("divergence.png", &render_png(&div.d)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Named {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct FitSummary {
    n_obs: usize,
    n_variables: usize,
    groups: Vec<String>,
    mode: PerturbationMode,
    retained_draws: usize,
    modal_rank_draws: usize,
    effective_rank: usize,
    effective_rank_floored: bool,
    final_rank: usize,
    factor_variance_mean: Vec<f64>,
    residual_variance_mean: Vec<Named>,
    alpha_mean: f64,
    /// `‖E[Q_j⁻¹] − I‖_F` per group.
    perturbation_magnitude: Vec<Named>,
    loglik_trace_source: TraceSource,
    final_loglik: Option<f64>,
}

pub fn fit(args: FitArgs) -> Result<()> {
    let cfg = args.model.resolve(Some(&args.data))?;
    let data = ingest_csv(&args.data.input, &cfg.ingest_options())?;
    let mode = cfg.resolved_mode();
    let mut out = OutputDir::create(&args.out)?;
    let chain = sample(
        &data,
        &cfg,
        args.emit_chain && mode == PerturbationMode::Group,
    )?;
    let aligned = align_modal_rank(&chain)?;
    let est = point_estimate(&aligned, Some(&chain.summaries))?;
    let rank = effective_rank(&chain.draws, cfg.hyperparameters.zeta)?;
    let variables = data.variable_names().to_vec();
    let groups = data.group_names().to_vec();

    out.matrix(
        "loadings.csv",
        "variable",
        &variables,
        &labels("factor", est.loadings.ncols()),
        &est.loadings,
    )?;
    let p = data.p();
    let magnitude = est
        .q_inv_mean
        .iter()
        .zip(&groups)
        .map(|(q, g)| Named {
            name: g.clone(),
            value: (q - DMatrix::<f64>::identity(p, p)).norm(),
        })
        .collect();
    let summary = FitSummary {
        n_obs: data.n(),
        n_variables: p,
        groups: groups.clone(),
        mode,
        retained_draws: chain.draws.len(),
        modal_rank_draws: aligned.draws.len(),
        effective_rank: rank.estimate,
        effective_rank_floored: rank.floored,
        final_rank: chain.final_state.k(),
        factor_variance_mean: est.e_mean.iter().copied().collect(),
        residual_variance_mean: variables
            .iter()
            .zip(est.sigma_mean.iter())
            .map(|(v, s)| Named {
                name: v.clone(),
                value: *s,
            })
            .collect(),
        alpha_mean: est.alpha_mean,
        perturbation_magnitude: magnitude,
        loglik_trace_source: chain.meta.trace_source,
        final_loglik: chain.meta.loglik_trace.last().copied(),
    };
    out.json("summary.json", &summary)?;
    if args.heatmaps {
        out.bytes("loadings.png", &render_png(&est.loadings)?)?;
    }
    if mode == PerturbationMode::Group {
        write_divergence(
            &mut out,
            &groups,
            &divergence_matrix(&chain)?,
            args.heatmaps,
        )?;
    }
    if args.emit_chain {
        out.json(
            "chain.json",
            &StoredChain::from_chain(&chain, data.center_vector()),
        )?;
    }
    let seed = cfg.hyperparameters.seed;
    commit(out, "fit", seed, cfg)
}

#[derive(Serialize)]
struct CvSummary<'a> {
    chosen_alpha: f64,
    n_splits: usize,
    tie_se: f64,
    alphas: &'a [CvAlphaSummary],
}

pub fn cv_alpha(args: CvArgs) -> Result<()> {
    let mut cfg = args.model.resolve(Some(&args.data))?;
    if let Some(grid) = args.alpha_grid {
        cfg.alpha_grid = grid;
    }
    if let Some(n) = args.splits {
        cfg.n_splits = n;
    }
    if let Some(t) = args.tie_se {
        cfg.tie_se = t;
    }
    if cfg.alpha_grid.is_empty() || cfg.alpha_grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(PfaError::Config(
            "the alpha grid needs positive finite values".into(),
        ));
    }
    if cfg.n_splits == 0 {
        return Err(PfaError::Config("at least one split is needed".into()));
    }
    let data = ingest_csv(&args.data.input, &cfg.ingest_options())?;
    let mode = cfg.resolved_mode();
    let mut out = OutputDir::create(&args.out)?;
    let cv = CvConfig {
        n_splits: cfg.n_splits,
        tie_se: cfg.tie_se,
        seed: cfg.hyperparameters.seed,
    };
    let sampler = SamplerConfig::new(cfg.hyperparameters.clone(), mode);
    let result = run_cv(&data, &cfg.alpha_grid, &cv, &sampler)?;

    let mut table = String::from("alpha,split,score,n_test\n");
    for r in &result.table {
        table.push_str(&format!(
            "{},{},{},{}\n",
            r.alpha, r.split, r.score, r.n_test
        ));
    }
    out.bytes("cv_scores.csv", table.as_bytes())?;
    out.json(
        "cv_summary.json",
        &CvSummary {
            chosen_alpha: result.chosen_alpha,
            n_splits: cfg.n_splits,
            tie_se: cfg.tie_se,
            alphas: &result.summary,
        },
    )?;
    let seed = cfg.hyperparameters.seed;
    commit(out, "cv-alpha", seed, cfg)
}

#[derive(Serialize)]
struct SimulateConfig {
    case: String,
    fixture: u8,
    alpha0: f64,
    n: usize,
    sigma: f64,
    psi_mean: f64,
    psi_sd: f64,
    variant: String,
}

#[derive(Serialize)]
struct Truth {
    groups: Vec<String>,
    shared_covariance: Vec<Vec<f64>>,
    /// Per group; omitted for the per-observation case.
    perturbations: Option<Vec<Vec<Vec<f64>>>>,
    group_covariances: Option<Vec<Vec<Vec<f64>>>>,
}

fn raw(data: &Dataset) -> Result<Dataset> {
    data.shifted(&-data.center_vector())
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let fx = make_loading_fixture(args.fixture)?;
    let variant = match args.variant {
        Variant::Separate => AdditiveVariant::SeparateFactors,
        Variant::Loadings => AdditiveVariant::AdditiveLoadings,
    };
    let sim: Option<Simulated> = match args.case {
        Case::Single => None,
        Case::Multigroup => Some(gen_multigroup_perturbed(&fx, args.alpha0, args.seed)?),
        Case::Partial => Some(gen_partially_shared(&fx, args.alpha0, args.seed)?),
        Case::Additive => Some(gen_additive(
            &fx,
            args.psi_mean,
            args.psi_sd,
            variant,
            args.seed,
        )?),
        Case::Observation => Some(gen_observation_perturbed(
            &fx,
            args.alpha0,
            args.n,
            args.seed,
        )?),
    };
    let data = match &sim {
        Some(s) => s.data.clone(),
        None => gen_single_group(&fx, args.n, args.sigma, args.seed)?,
    };
    let mut out = OutputDir::create(&args.out)?;
    let grouped = data.n_groups() > 1;
    out.dataset("data.csv", &raw(&data)?, grouped.then_some("group"))?;
    out.matrix(
        "truth_loadings.csv",
        "variable",
        data.variable_names(),
        &labels("factor", fx.matrix.ncols()),
        &fx.matrix,
    )?;
    let truth = match &sim {
        Some(s) => Truth {
            groups: data.group_names().to_vec(),
            shared_covariance: rows(&s.shared_covariance),
            perturbations: (args.case != Case::Observation)
                .then(|| s.q_true.iter().map(rows).collect()),
            group_covariances: Some(s.group_covariances.iter().map(rows).collect()),
        },
        None => {
            let p = fx.matrix.nrows();
            let shared =
                &fx.matrix * fx.matrix.transpose() + DMatrix::identity(p, p) * args.sigma.powi(2);
            Truth {
                groups: data.group_names().to_vec(),
                shared_covariance: rows(&shared),
                perturbations: None,
                group_covariances: None,
            }
        }
    };
    out.json("truth.json", &truth)?;
    let config = SimulateConfig {
        case: format!("{:?}", args.case).to_lowercase(),
        fixture: args.fixture,
        alpha0: args.alpha0,
        n: args.n,
        sigma: args.sigma,
        psi_mean: args.psi_mean,
        psi_sd: args.psi_sd,
        variant: format!("{:?}", args.variant).to_lowercase(),
    };
    commit(out, "simulate", args.seed, config)
}

/// Divergences at the mean of the stored perturbations, plus the per-draw mean.
fn divergence_from_stored(chain: &StoredChain) -> Result<DivergenceMatrix> {
    if chain.mode != PerturbationMode::Group {
        return Err(PfaError::Config(
            "divergences need a group-mode chain".into(),
        ));
    }
    let first = chain
        .draws
        .first()
        .filter(|d| !d.q.is_empty())
        .ok_or_else(|| PfaError::Data("the chain holds no stored perturbations".into()))?;
    let (p, j) = (first.q[0].nrows(), first.q.len());
    let mut mean = vec![DMatrix::<f64>::zeros(p, p); j];
    let mut per_draw = DMatrix::zeros(j, j);
    for d in &chain.draws {
        if d.q.len() != j {
            return Err(PfaError::Data(
                "every draw must store one perturbation per group".into(),
            ));
        }
        let mut norms = Vec::with_capacity(j);
        for (g, q) in d.q.iter().enumerate() {
            mean[g] += q;
            norms.push(checked_inverse(q, || chain.group_names[g].clone())?.norm_squared());
        }
        per_draw += divergence_from_norms(&norms, p);
    }
    let n = chain.draws.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut out = divergence_from_perturbations(&mean)?;
    out.per_draw_mean = Some(per_draw / n);
    Ok(out)
}

pub fn diverge(args: DivergeArgs) -> Result<()> {
    if let Some(path) = &args.chain {
        let chain: StoredChain = read_json(path)?;
        let div = divergence_from_stored(&chain)?;
        let mut out = OutputDir::create(&args.out)?;
        write_divergence(&mut out, &chain.group_names, &div, args.heatmaps)?;
        return commit(out, "diverge", 0, serde_json::json!({ "chain": path }));
    }
    let input = args
        .input
        .clone()
        .ok_or_else(|| PfaError::Config("diverge needs --chain or --input".into()))?;
    let data_args = DataArgs {
        input,
        group_col: args.group_col.clone(),
        reference_group: args.reference_group.clone(),
        log_transform: args.log_transform,
    };
    let mut cfg = args.model.resolve(Some(&data_args))?;
    cfg.mode = Some(PerturbationMode::Group);
    let data = ingest_csv(&data_args.input, &cfg.ingest_options())?;
    let mut out = OutputDir::create(&args.out)?;
    let chain = sample(&data, &cfg, false)?;
    let groups = data.group_names().to_vec();
    write_divergence(
        &mut out,
        &groups,
        &divergence_matrix(&chain)?,
        args.heatmaps,
    )?;
    if args.hotelling {
        let j = data.n_groups();
        let mut t2 = DMatrix::zeros(j, j);
        for a in 0..j {
            for b in a + 1..j {
                let v = hotelling_t2(&data, a, b)?;
                t2[(a, b)] = v;
                t2[(b, a)] = v;
            }
        }
        out.matrix("hotelling.csv", "group", &groups, &groups, &t2)?;
    }
    let seed = cfg.hyperparameters.seed;
    commit(out, "diverge", seed, cfg)
}

#[derive(Serialize)]
struct PredictSummary {
    total_log_predictive: f64,
    mean_log_predictive: f64,
    n_points: usize,
    n_draws: usize,
    mode: PerturbationMode,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let chain: StoredChain = read_json(&args.chain)?;
    let options = IngestOptions {
        group_column: args.group_col.clone(),
        log_transform: args.log_transform,
        reference_group: None,
    };
    let test = ingest_csv(&args.input, &options)?;
    if test.variable_names() != chain.variable_names.as_slice() {
        return Err(PfaError::Data(format!(
            "test variables {:?} differ from the training variables {:?}",
            test.variable_names(),
            chain.variable_names
        )));
    }
    let shift: DVector<f64> = &chain.center - test.center_vector();
    let test = test.shifted(&shift)?;
    let score = draws_predictive_loglik(&chain.to_draws(), chain.mode, &chain.group_names, &test)?;
    let mut out = OutputDir::create(&args.out)?;

    let mut table = String::from("row,group,log_predictive\n");
    for (i, v) in score.log_predictive.iter().enumerate() {
        let g = &test.group_names()[test.group_of()[i]];
        table.push_str(&format!("{},{},{}\n", i + 2, g, v));
    }
    out.bytes("predictions.csv", table.as_bytes())?;
    out.json(
        "predict_summary.json",
        &PredictSummary {
            total_log_predictive: score.total(),
            mean_log_predictive: score.mean_per_point(),
            n_points: score.log_predictive.len(),
            n_draws: score.n_draws,
            mode: chain.mode,
        },
    )?;
    let config = serde_json::json!({
        "chain": args.chain,
        "input": args.input,
        "group_column": args.group_col,
        "log_transform": args.log_transform,
    });
    commit(out, "predict", 0, config)
}
