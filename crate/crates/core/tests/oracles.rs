mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pfa_core::evaluate::{gaussian_kl, hotelling_t2};
use pfa_core::gibbs::*;
use pfa_core::{center_dataset, AlphaMode, Dataset, Hyperparameters, PerturbationMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Gamma, InverseGamma};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Numerical CDF of an unnormalised log density, integrated on a log-spaced grid.
struct GridCdf {
    xs: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
}

impl GridCdf {
    fn new(log_density: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> Self {
        let step = (hi / lo).ln() / (points - 1) as f64;
        let xs: Vec<f64> = (0..points).map(|i| lo * (step * i as f64).exp()).collect();
        // Density with respect to log x.
        let logs: Vec<f64> = xs.iter().map(|&x| log_density(x) + x.ln()).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let mut cdf = vec![0.0; points];
        let mut first = 0.0;
        for i in 1..points {
            cdf[i] = cdf[i - 1] + 0.5 * (w[i] + w[i - 1]) * step;
            first += 0.5 * (w[i] * xs[i] + w[i - 1] * xs[i - 1]) * step;
        }
        let total = cdf[points - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self {
            xs,
            cdf,
            mean: first / total,
        }
    }

    fn at(&self, x: f64) -> f64 {
        match self.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => self.cdf[i],
            Err(0) => 0.0,
            Err(i) if i == self.xs.len() => 1.0,
            Err(i) => {
                let t = (x.ln() - self.xs[i - 1].ln()) / (self.xs[i].ln() - self.xs[i - 1].ln());
                self.cdf[i - 1] + t * (self.cdf[i] - self.cdf[i - 1])
            }
        }
    }
}

/// Standard error of a correlated sequence's mean from 50 batch means.
fn batch_std_error(xs: &[f64]) -> f64 {
    let batches = 50;
    let size = xs.len() / batches;
    let means: Vec<f64> = xs.chunks_exact(size).map(mean).collect();
    std_error(&means)
}

fn gamma_cdf(shape: f64, rate: f64) -> impl Fn(f64) -> f64 {
    let d = Gamma::new(shape, rate).unwrap();
    move |x| d.cdf(x)
}

fn inverse_gamma_cdf(shape: f64, rate: f64) -> impl Fn(f64) -> f64 {
    let d = InverseGamma::new(shape, rate).unwrap();
    move |x| d.cdf(x)
}

#[test]
fn local_shrinkage_matches_gamma_law() {
    let hyper = Hyperparameters {
        nu1: 1.5,
        ..Hyperparameters::default()
    };
    let mut state = StateBuilder::new(1, 1, 1)
        .lambda(DMatrix::from_element(1, 1, 1.0))
        .delta(&[2.0])
        .build();
    let mut r = rng(1);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_local_shrinkage(&mut state, &hyper, &mut r);
            state.phi[(0, 0)]
        })
        .collect();
    let ks = ks_distance(&xs, gamma_cdf(2.0, 2.5));
    assert!(ks < 0.02, "KS {ks}");
    assert_mean_close(&xs, 0.8, 3.0, "phi mean");

    state.lambda[(0, 0)] = 0.0;
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_local_shrinkage(&mut state, &hyper, &mut r);
            state.phi[(0, 0)]
        })
        .collect();
    assert!(ks_distance(&xs, gamma_cdf(2.0, 1.5)) < 0.02);
}

#[test]
fn column_shrinkage_with_zero_loadings() {
    let hyper = Hyperparameters::default();
    let mut state = StateBuilder::new(3, 2, 1).delta(&[1.0, 1.0]).build();
    let mut r = rng(2);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for _ in 0..30_000 {
        update_column_shrinkage(&mut state, &hyper, &mut r);
        first.push(state.delta[0]);
        second.push(state.delta[1]);
        assert_eq!(state.tau[1], state.delta[0] * state.delta[1]);
    }
    assert!(ks_distance(&first, gamma_cdf(hyper.kappa1 + 3.0, 1.0)) < 0.02);
    assert!(ks_distance(&second, gamma_cdf(hyper.kappa2 + 1.5, 1.0)) < 0.02);
}

#[test]
fn single_column_shrinkage_matches_grid_posterior() {
    let hyper = Hyperparameters::default();
    let lam = [0.8, -0.5];
    let phi = [1.2, 0.7];
    let mut state = StateBuilder::new(2, 1, 1)
        .lambda(DMatrix::from_column_slice(2, 1, &lam))
        .phi(DMatrix::from_column_slice(2, 1, &phi))
        .build();
    // Prior Gamma(κ₁, 1) times N(λ_l | 0, 1/(φ_l δ)) over both rows.
    let log_post = |d: f64| {
        let mut lp = (hyper.kappa1 - 1.0) * d.ln() - d;
        for l in 0..2 {
            let var = 1.0 / (phi[l] * d);
            lp += -0.5 * var.ln() - 0.5 * lam[l] * lam[l] / var;
        }
        lp
    };
    let grid = GridCdf::new(log_post, 1e-4, 60.0, 20_001);
    let mut r = rng(3);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_column_shrinkage(&mut state, &hyper, &mut r);
            state.delta[0]
        })
        .collect();
    let ks = ks_distance(&xs, |x| grid.at(x));
    assert!(ks < 0.02, "KS {ks}");
    assert_mean_close(&xs, grid.mean, 3.0, "delta mean");
}

#[test]
fn residual_variance_matches_inverse_gamma() {
    let hyper = Hyperparameters::default();
    let data = dataset(&[&[1.0], &[-1.0]], &[0, 0]);
    let sd = SamplerData::new(&data, PerturbationMode::None);
    let mut state = StateBuilder::new(1, 1, 2).build();
    let mut r = rng(4);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_residual_variance(&mut state, &sd, &hyper, &mut r);
            state.sigma[0]
        })
        .collect();
    let ks = ks_distance(&xs, inverse_gamma_cdf(1.1, 1.1));
    assert!(ks < 0.02, "KS {ks}");

    // Zero residuals: the fitted signal reproduces the data.
    let mut state = StateBuilder::new(1, 1, 2)
        .lambda(DMatrix::from_element(1, 1, 1.0))
        .eta(DMatrix::from_column_slice(2, 1, &[1.0, -1.0]))
        .build();
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_residual_variance(&mut state, &sd, &hyper, &mut r);
            state.sigma[0]
        })
        .collect();
    assert!(ks_distance(&xs, inverse_gamma_cdf(1.1, 0.1)) < 0.02);
}

#[test]
fn residual_variance_matches_grid_posterior() {
    let hyper = Hyperparameters::default();
    let rows: [&[f64]; 4] = [&[1.3], &[-0.4], &[0.2], &[-1.1]];
    let data = dataset(&rows, &[0; 4]);
    let sd = SamplerData::new(&data, PerturbationMode::None);
    let ss: f64 = data.values().iter().map(|v| v * v).sum();
    let log_post =
        |s: f64| -(hyper.a_sigma + 1.0) * s.ln() - hyper.b_sigma / s - 2.0 * s.ln() - 0.5 * ss / s;
    let grid = GridCdf::new(log_post, 1e-3, 1e4, 40_001);
    let mut state = StateBuilder::new(1, 1, 4).build();
    let mut r = rng(5);
    let xs: Vec<f64> = (0..50_000)
        .map(|_| {
            update_residual_variance(&mut state, &sd, &hyper, &mut r);
            state.sigma[0]
        })
        .collect();
    let ks = ks_distance(&xs, |x| grid.at(x));
    assert!(ks < 0.02, "KS {ks}");
}

#[test]
fn factor_variance_matches_inverse_gamma() {
    let hyper = Hyperparameters {
        u: 10.0,
        ..Hyperparameters::default()
    };
    let mut state = StateBuilder::new(1, 1, 2)
        .eta(DMatrix::from_column_slice(2, 1, &[1.0, 1.0]))
        .build();
    let mut r = rng(6);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_factor_variance(&mut state, &hyper, &mut r);
            state.e[0]
        })
        .collect();
    let ks = ks_distance(&xs, inverse_gamma_cdf(11.0, 1.1));
    assert!(ks < 0.02, "KS {ks}");
    assert_mean_close(&xs, 1.1 / 10.0, 3.0, "e mean");

    state.eta.fill(0.0);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_factor_variance(&mut state, &hyper, &mut r);
            state.e[0]
        })
        .collect();
    assert!(ks_distance(&xs, inverse_gamma_cdf(11.0, 0.1)) < 0.02);
}

fn two_group_alpha_setup(offset: f64) -> (pfa_core::ModelState, SamplerData) {
    let data = dataset(&[&[0.0, 0.0], &[1.0, 0.0], &[0.5, 0.5]], &[0, 0, 1]);
    let sd = SamplerData::new(&data, PerturbationMode::Group);
    let mut state = StateBuilder::new(2, 1, 3)
        .perturbed(PerturbationMode::Group, 2)
        .build();
    state.q[1][(0, 0)] += offset;
    (state, sd)
}

#[test]
fn alpha_matches_inverse_gamma_and_grid() {
    let mode = AlphaMode::learned();
    let mut r = rng(7);
    let (mut state, sd) = two_group_alpha_setup(2.0);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_alpha(&mut state, &mode, &sd, &mut r);
            state.alpha
        })
        .collect();
    let ks = ks_distance(&xs, inverse_gamma_cdf(2.1, 2.1));
    assert!(ks < 0.02, "KS {ks}");

    // IG(0.1, 0.1) prior times four independent N(Q_ab | I_ab, α) entries.
    let log_post = |a: f64| -1.1 * a.ln() - 0.1 / a - 2.0 * a.ln() - 4.0 / (2.0 * a);
    let grid = GridCdf::new(log_post, 1e-3, 1e6, 60_001);
    assert!(ks_distance(&xs, |x| grid.at(x)) < 0.02);

    let (mut state, sd) = two_group_alpha_setup(0.0);
    let xs: Vec<f64> = (0..30_000)
        .map(|_| {
            update_alpha(&mut state, &mode, &sd, &mut r);
            state.alpha
        })
        .collect();
    assert!(ks_distance(&xs, inverse_gamma_cdf(2.1, 0.1)) < 0.02);
}

#[test]
fn tiny_instance_moments_for_every_block() {
    // p = 2, k = 1, n = 3; each block is sampled repeatedly with the rest held fixed.
    let data = dataset(&[&[0.9, 0.4], &[-1.2, -0.3], &[0.5, 0.8]], &[0, 0, 0]);
    let sd = SamplerData::new(&data, PerturbationMode::None);
    let hyper = Hyperparameters::default();
    let base = StateBuilder::new(2, 1, 3)
        .lambda(DMatrix::from_column_slice(2, 1, &[0.7, 0.3]))
        .eta(DMatrix::from_column_slice(3, 1, &[0.6, -0.9, 0.4]))
        .sigma(&[0.8, 1.4])
        .e(&[1.3])
        .phi(DMatrix::from_column_slice(2, 1, &[1.1, 0.6]))
        .delta(&[1.7])
        .build();
    let draws = 50_000;
    let mut r = rng(8);

    let (cov, means) = factor_conditional(&base, &sd).unwrap();
    let mut s = base.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            update_factors(&mut s, &sd, &mut r).unwrap();
            s.eta[(1, 0)]
        })
        .collect();
    assert_mean_close(&xs, means[(1, 0)], 3.0, "eta mean");
    assert_variance_close(&xs, cov[(0, 0)], 3.0, "eta variance");

    let (mean, cov) = loading_conditional(&base, &sd, 1).unwrap();
    let mut s = base.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            update_loadings(&mut s, &sd, &mut r).unwrap();
            s.lambda[(1, 0)]
        })
        .collect();
    assert_mean_close(&xs, mean[0], 3.0, "lambda mean");
    assert_variance_close(&xs, cov[(0, 0)], 3.0, "lambda variance");

    let moments = |log_post: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
        let g1 = GridCdf::new(log_post, lo, hi, 40_001);
        let g2 = GridCdf::new(|x| log_post(x) + x.ln(), lo, hi, 40_001);
        (g1.mean, g2.mean * g1.mean)
    };
    let check = |xs: &[f64], (m1, m2): (f64, f64), what: &str| {
        assert_mean_close(xs, m1, 3.0, what);
        assert_variance_close(xs, m2 - m1 * m1, 3.0, what);
    };

    let (lam, t) = (base.lambda[(0, 0)], base.tau[0]);
    let nu = hyper.nu1;
    let phi_post = |x: f64| (nu - 1.0) * x.ln() - nu * x + 0.5 * x.ln() - 0.5 * x * t * lam * lam;
    let mut s = base.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            update_local_shrinkage(&mut s, &hyper, &mut r);
            s.phi[(0, 0)]
        })
        .collect();
    check(&xs, moments(&phi_post, 1e-6, 100.0), "phi");

    let w: f64 = (0..2)
        .map(|l| base.phi[(l, 0)] * base.lambda[(l, 0)].powi(2))
        .sum();
    let k1 = hyper.kappa1;
    let delta_post = |x: f64| (k1 - 1.0) * x.ln() - x + x.ln() - 0.5 * x * w;
    let mut s = base.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            update_column_shrinkage(&mut s, &hyper, &mut r);
            s.delta[0]
        })
        .collect();
    check(&xs, moments(&delta_post, 1e-6, 100.0), "delta");

    let resid: f64 = (0..3)
        .map(|i| (data.values()[(i, 0)] - base.lambda[(0, 0)] * base.eta[(i, 0)]).powi(2))
        .sum();
    let (a, b) = (hyper.a_sigma, hyper.b_sigma);
    let sigma_post = |x: f64| -(a + 1.0) * x.ln() - b / x - 1.5 * x.ln() - 0.5 * resid / x;
    let mut s = base.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            update_residual_variance(&mut s, &sd, &hyper, &mut r);
            s.sigma[0]
        })
        .collect();
    // Shape a_σ + 3/2 leaves Var(σ) infinite, so the precision 1/σ is checked.
    let recip = |log_post: &dyn Fn(f64) -> f64| {
        let g1 = GridCdf::new(|x| log_post(x) - x.ln(), 1e-3, 1e5, 40_001);
        let g2 = GridCdf::new(|x| log_post(x) - 2.0 * x.ln(), 1e-3, 1e5, 40_001);
        let m1 = 1.0 / g1.mean;
        (m1, m1 / g2.mean)
    };
    let precisions: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
    check(&precisions, recip(&sigma_post), "sigma precision");
    let grid = GridCdf::new(sigma_post, 1e-3, 1e5, 40_001);
    assert!(ks_distance(&xs, |x| grid.at(x)) < 0.02);

    let ss = base.eta.column(0).norm_squared();
    let (u, be) = (hyper.u, hyper.b_e);
    let e_post = |x: f64| -(u + 1.0) * x.ln() - be / x - 1.5 * x.ln() - 0.5 * ss / x;
    let mut s = base.clone();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            update_factor_variance(&mut s, &hyper, &mut r);
            s.e[0]
        })
        .collect();
    check(&xs, moments(&e_post, 1e-4, 1e3), "e");
}

#[test]
fn group_perturbation_sweep_moments_match_joint() {
    let mut r = rng(9);
    let y = random_matrix(4, 3, &mut r) * 0.8;
    let rows: Vec<Vec<f64>> = y
        .row_iter()
        .map(|row| row.iter().copied().collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
    let data = dataset(&refs, &[0, 0, 1, 1]);
    let mut sd = SamplerData::new(&data, PerturbationMode::Group);
    let mut state = StateBuilder::new(3, 1, 4)
        .lambda(DMatrix::from_column_slice(3, 1, &[0.9, -0.4, 0.6]))
        .eta(DMatrix::from_column_slice(4, 1, &[0.3, -0.7, 1.1, 0.5]))
        .sigma(&[0.5, 0.9, 0.7])
        .alpha(0.3)
        .perturbed(PerturbationMode::Group, 2)
        .build();
    sd.sync(&state);
    compare_sweep_with_joint(&mut state, &mut sd, 1, &mut r);
}

#[test]
fn observation_perturbation_sweep_moments_match_joint() {
    let mut r = rng(10);
    let data = dataset(&[&[0.8, -0.5, 1.2], &[-0.3, 0.6, 0.1]], &[0, 0]);
    let mut sd = SamplerData::new(&data, PerturbationMode::Observation);
    let mut state = StateBuilder::new(3, 1, 2)
        .lambda(DMatrix::from_column_slice(3, 1, &[0.5, 0.2, -0.8]))
        .eta(DMatrix::from_column_slice(2, 1, &[0.9, -0.4]))
        .sigma(&[0.6, 1.1, 0.4])
        .alpha(0.5)
        .perturbed(PerturbationMode::Observation, 2)
        .build();
    sd.sync(&state);
    compare_sweep_with_joint(&mut state, &mut sd, 0, &mut r);
}

fn compare_sweep_with_joint(
    state: &mut pfa_core::ModelState,
    sd: &mut SamplerData,
    unit: usize,
    r: &mut ChaCha8Rng,
) {
    let p = state.p();
    let (precision, linear) = perturbation_joint_conditional(state, sd, unit).unwrap();
    let cov = precision.try_inverse().unwrap();
    let mu = &cov * linear;
    let sweeps = 50_000;
    let mut draws = vec![Vec::with_capacity(sweeps); p * p];
    for _ in 0..sweeps {
        if sd.mode() == PerturbationMode::Observation {
            update_perturbation_observation(state, sd, unit, r).unwrap();
        } else {
            update_perturbation_columns(state, sd, unit, r).unwrap();
        }
        for (i, v) in state.q[unit].iter().enumerate() {
            draws[i].push(*v);
        }
    }
    for i in 0..p * p {
        let m = mean(&draws[i]);
        let se = batch_std_error(&draws[i]);
        assert!(
            (m - mu[i]).abs() <= 3.0 * se,
            "entry {i}: mean {m} vs {} (se {se})",
            mu[i]
        );
        let centered: Vec<f64> = draws[i].iter().map(|x| (x - mu[i]).powi(2)).collect();
        let v = mean(&centered);
        let se = batch_std_error(&centered);
        assert!(
            (v - cov[(i, i)]).abs() <= 3.0 * se,
            "entry {i}: var {v} vs {} (se {se})",
            cov[(i, i)]
        );
    }
    // Cross-column covariances within one row are where a wrong sweep would show.
    for (a, b) in [(0, p), (1, 2 * p + 1), (p + 2, 2)] {
        let prod: Vec<f64> = draws[a]
            .iter()
            .zip(&draws[b])
            .map(|(x, y)| (x - mu[a]) * (y - mu[b]))
            .collect();
        let c = mean(&prod);
        let se = batch_std_error(&prod);
        assert!(
            (c - cov[(a, b)]).abs() <= 3.0 * se,
            "cov {a},{b}: {c} vs {} (se {se})",
            cov[(a, b)]
        );
    }
}

#[test]
fn residual_variance_in_a_full_chain_matches_grid_posterior() {
    // k = 1, p = 2, E fixed at 1, no perturbations. Factors are integrated out
    // analytically and the MGP weights numerically, leaving a 4-D grid over
    // (λ₁, λ₂, σ₁, σ₂).
    let mut r = rng(11);
    let n = 40;
    let truth = [1.0, 0.8];
    let noise = [0.5f64, 0.7];
    let raw = DMatrix::from_fn(n, 2, |_, _| 0.0);
    let raw = {
        let mut m = raw;
        for i in 0..n {
            let f: f64 = StandardNormal.sample(&mut r);
            for l in 0..2 {
                let e: f64 = StandardNormal.sample(&mut r);
                m[(i, l)] = truth[l] * f + noise[l].sqrt() * e;
            }
        }
        m
    };
    let data = center_dataset(&raw, &vec![0; n]).unwrap();
    let s = data.values().transpose() * data.values();

    let hyper = Hyperparameters {
        k_init: Some(1),
        k_max: Some(1),
        fix_factor_variance: true,
        n_iter: 120_000,
        burn_in: 2_000,
        seed: 3,
        ..Hyperparameters::default()
    };
    let chain = run_chain(
        &data,
        &SamplerConfig::new(hyper.clone(), PerturbationMode::None),
    )
    .unwrap();
    let draws: Vec<f64> = chain.draws.iter().map(|d| d.sigma[0]).collect();
    let chain_mean = mean(&draws);

    let oracle = grid_sigma_mean(&hyper, &s, n);
    let rel = (chain_mean - oracle).abs() / oracle;
    assert!(
        rel < 0.02,
        "chain {chain_mean} vs grid {oracle} (relative {rel})"
    );
}

/// Posterior mean of σ₁ under the k = 1, p = 2 model with E = 1.
fn grid_sigma_mean(hyper: &Hyperparameters, s: &DMatrix<f64>, n: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let nu = hyper.nu1;
    // λ | δ is a product of scaled Student-t densities once φ is integrated out.
    let t_log = |x: f64, d: f64| {
        let dof = 2.0 * nu;
        let scale2 = 1.0 / d;
        ln_gamma((dof + 1.0) / 2.0)
            - ln_gamma(dof / 2.0)
            - 0.5 * (dof * std::f64::consts::PI * scale2).ln()
            - (dof + 1.0) / 2.0 * (1.0 + x * x / (dof * scale2)).ln()
    };
    let deltas: Vec<(f64, f64)> = {
        let m = 400;
        let (lo, hi) = (1e-3f64, 40.0f64);
        let step = (hi / lo).ln() / m as f64;
        (0..=m)
            .map(|i| {
                let d = lo * (step * i as f64).exp();
                let w =
                    (hyper.kappa1 - 1.0) * d.ln() - d - ln_gamma(hyper.kappa1) + d.ln() + step.ln();
                (d, w)
            })
            .collect()
    };
    let lam_prior = |a: f64, b: f64| {
        let logs: Vec<f64> = deltas
            .iter()
            .map(|(d, w)| w + t_log(a, *d) + t_log(b, *d))
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
    };
    let ig = |x: f64| -(hyper.a_sigma + 1.0) * x.ln() - hyper.b_sigma / x;

    let g = 100;
    let lam_axis: Vec<f64> = (0..g)
        .map(|i| -2.5 + 5.0 * (i as f64 + 0.5) / g as f64)
        .collect();
    let sig_axis: Vec<f64> = (0..g)
        .map(|i| (0.005f64.ln() + (3.0f64 / 0.005).ln() * (i as f64 + 0.5) / g as f64).exp())
        .collect();
    // Log-spaced σ grid: the cell width is proportional to σ.
    let sig_log: Vec<f64> = sig_axis.iter().map(|x| ig(*x) + x.ln()).collect();

    let (s11, s12, s22) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
    let nf = n as f64;
    let (mut top, mut num, mut den) = (f64::NEG_INFINITY, 0.0, 0.0);
    for &a in &lam_axis {
        for &b in &lam_axis {
            let prior = lam_prior(a, b);
            for (i1, &x1) in sig_axis.iter().enumerate() {
                for (i2, &x2) in sig_axis.iter().enumerate() {
                    let h11 = a * a + x1;
                    let h22 = b * b + x2;
                    let h12 = a * b;
                    let det = h11 * h22 - h12 * h12;
                    let quad = (h22 * s11 - 2.0 * h12 * s12 + h11 * s22) / det;
                    let ll = -0.5 * nf * det.ln() - 0.5 * quad;
                    let l = prior + sig_log[i1] + sig_log[i2] + ll;
                    if l > top {
                        let scale = (top - l).exp();
                        num *= scale;
                        den *= scale;
                        top = l;
                    }
                    let w = (l - top).exp();
                    num += w * x1;
                    den += w;
                }
            }
        }
    }
    num / den
}

#[test]
fn kl_matches_monte_carlo_integral() {
    let mut r = rng(12);
    let a = {
        let m = random_matrix(4, 4, &mut r);
        &m * m.transpose() + DMatrix::identity(4, 4) * 0.5
    };
    let b = {
        let m = random_matrix(4, 4, &mut r);
        &m * m.transpose() + DMatrix::identity(4, 4) * 0.8
    };
    let exact = gaussian_kl(&a, &b).unwrap();
    let ca = a.clone().cholesky().unwrap();
    let (ia, ib) = (
        a.clone().try_inverse().unwrap(),
        b.clone().try_inverse().unwrap(),
    );
    let (lda, ldb) = (a.determinant().ln(), b.determinant().ln());
    let n = 400_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut r));
        let x = ca.l() * z;
        let la = -0.5 * lda - 0.5 * (x.transpose() * &ia * &x)[(0, 0)];
        let lb = -0.5 * ldb - 0.5 * (x.transpose() * &ib * &x)[(0, 0)];
        total += la - lb;
    }
    let mc = total / n as f64;
    assert!(
        (mc - exact).abs() / exact < 0.01,
        "Monte Carlo {mc} vs closed form {exact}"
    );
}

#[test]
fn hotelling_matches_two_step_oracle() {
    let mut r = rng(13);
    let (nj, nl, p) = (7, 9, 3);
    let raw = random_matrix(nj + nl, p, &mut r);
    let labels: Vec<usize> = (0..nj + nl).map(|i| usize::from(i >= nj)).collect();
    let data = Dataset::new(
        raw.clone(),
        labels,
        vec!["a".into(), "b".into()],
        (1..=p).map(|l| format!("x{l}")).collect(),
    )
    .unwrap();
    let t2 = hotelling_t2(&data, 0, 1).unwrap();

    let xj = raw.rows(0, nj).into_owned();
    let xl = raw.rows(nj, nl).into_owned();
    let mj = xj.row_mean().transpose();
    let ml = xl.row_mean().transpose();
    let scatter = |x: &DMatrix<f64>, m: &DVector<f64>| {
        let mut c = DMatrix::zeros(p, p);
        for row in x.row_iter() {
            let d = row.transpose() - m;
            c += &d * d.transpose();
        }
        c
    };
    let pooled = (scatter(&xj, &mj) + scatter(&xl, &ml)) / (nj + nl - 2) as f64;
    let diff = &mj - &ml;
    let solved = pooled.lu().solve(&diff).unwrap();
    let oracle = (nj * nl) as f64 / (nj + nl) as f64 * diff.dot(&solved);
    assert!((t2 - oracle).abs() < 1e-9, "{t2} vs {oracle}");
}

#[test]
fn random_matrix_centering() {
    let mut r = rng(14);
    let raw = random_matrix(50, 8, &mut r) * 3.0 + DMatrix::from_element(50, 8, 5.0);
    let d = center_dataset(&raw, &[0; 50]).unwrap();
    for col in d.values().column_iter() {
        assert!(col.mean().abs() < 1e-12);
    }
}

#[test]
fn shared_covariance_matches_naive_loops() {
    let mut r = rng(15);
    let (p, k) = (8, 3);
    let lambda = random_matrix(p, k, &mut r);
    let state = StateBuilder::new(p, k, 1)
        .lambda(lambda.clone())
        .e(&[0.4, 1.7, 2.2])
        .sigma(&[0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7])
        .build();
    let h = state.shared_covariance();
    for a in 0..p {
        for b in 0..p {
            let mut v = 0.0;
            for c in 0..k {
                v += lambda[(a, c)] * state.e[c] * lambda[(b, c)];
            }
            if a == b {
                v += state.sigma[a];
            }
            assert!((h[(a, b)] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbation_magnitude_matches_explicit_inverse() {
    let mut r = rng(16);
    let p = 6;
    let mut state = StateBuilder::new(p, 1, 1)
        .perturbed(PerturbationMode::Group, 2)
        .build();
    state.q[1] = DMatrix::identity(p, p) + random_matrix(p, p, &mut r) * 0.2;
    let inv = state.q[1].clone().try_inverse().unwrap();
    let mut total = 0.0;
    for a in 0..p {
        for b in 0..p {
            let id = if a == b { 1.0 } else { 0.0 };
            total += (inv[(a, b)] - id).powi(2);
        }
    }
    assert!((state.perturbation_magnitude(1).unwrap() - total.sqrt()).abs() < 1e-10);
}

#[test]
fn group_marginal_covariance_monte_carlo() {
    let mut r = rng(17);
    let p = 5;
    let mut state = StateBuilder::new(p, 2, 1)
        .lambda(random_matrix(p, 2, &mut r))
        .e(&[1.5, 0.6])
        .sigma(&[0.5, 0.8, 1.0, 0.7, 0.9])
        .perturbed(PerturbationMode::Group, 2)
        .build();
    state.q[1] = DMatrix::identity(p, p) + random_matrix(p, p, &mut r) * 0.15;
    let target = state.group_marginal_covariance(1).unwrap();
    let chol = state.shared_covariance().cholesky().unwrap();
    let qinv = state.q[1].clone().try_inverse().unwrap();
    let n = 200_000;
    let mut acc = DMatrix::zeros(p, p);
    for _ in 0..n {
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut r));
        let y = &qinv * (chol.l() * z);
        acc += &y * y.transpose();
    }
    acc /= n as f64;
    let rel = (&acc - &target).norm() / target.norm();
    assert!(rel < 0.05, "relative Frobenius error {rel}");
}
