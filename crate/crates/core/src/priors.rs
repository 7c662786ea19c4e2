//! Prior draws and log-densities: the multiplicative gamma process on the
//! loadings, inverse-gamma variances, and the isotropic matrix-normal prior on
//! perturbations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::model::{cumulative_products, Hyperparameters};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gamma draw with shape-rate parameterization.
pub fn draw_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive and finite")
        .sample(rng)
}

/// Inverse-gamma draw; density ∝ x^(−shape−1) e^(−rate/x).
pub fn draw_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    1.0 / draw_gamma(shape, rate, rng)
}

pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn inverse_gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

pub fn normal_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln() + d * d / variance)
}

/// Column weights of the multiplicative gamma process.
#[derive(Debug, Clone, PartialEq)]
pub struct MgpColumnWeights {
    pub delta: DVector<f64>,
    pub tau: DVector<f64>,
}

impl MgpColumnWeights {
    pub fn from_delta(delta: DVector<f64>) -> Self {
        let tau = cumulative_products(&delta);
        Self { delta, tau }
    }

    /// `δ₁ ~ Gamma(κ₁, 1)`, `δ_i ~ Gamma(κ₂, 1)` for `i ≥ 2`.
    pub fn draw<R: Rng + ?Sized>(hyper: &Hyperparameters, k: usize, rng: &mut R) -> Self {
        let delta = DVector::from_fn(k, |i, _| {
            let shape = if i == 0 { hyper.kappa1 } else { hyper.kappa2 };
            draw_gamma(shape, 1.0, rng)
        });
        Self::from_delta(delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgpDraw {
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub weights: MgpColumnWeights,
}

/// Draws loadings and their shrinkage parameters from the prior.
pub fn draw_mgp_loadings<R: Rng + ?Sized>(
    hyper: &Hyperparameters,
    p: usize,
    k: usize,
    rng: &mut R,
) -> MgpDraw {
    let weights = MgpColumnWeights::draw(hyper, k, rng);
    let phi = DMatrix::from_fn(p, k, |_, _| draw_gamma(hyper.nu1, hyper.nu1, rng));
    let lambda = DMatrix::from_fn(p, k, |l, h| {
        let z: f64 = rng.sample(StandardNormal);
        z / (phi[(l, h)] * weights.tau[h]).sqrt()
    });
    MgpDraw {
        lambda,
        phi,
        weights,
    }
}

/// Joint log prior density of `(Λ, φ, δ)` under the multiplicative gamma process.
pub fn mgp_log_density(
    lambda: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    delta: &DVector<f64>,
    hyper: &Hyperparameters,
) -> f64 {
    let tau = cumulative_products(delta);
    let mut lp = 0.0;
    for (h, d) in delta.iter().enumerate() {
        let shape = if h == 0 { hyper.kappa1 } else { hyper.kappa2 };
        lp += gamma_log_density(*d, shape, 1.0);
    }
    for h in 0..lambda.ncols() {
        for l in 0..lambda.nrows() {
            let f = phi[(l, h)];
            lp += gamma_log_density(f, hyper.nu1, hyper.nu1);
            lp += normal_log_density(lambda[(l, h)], 0.0, 1.0 / (f * tau[h]));
        }
    }
    lp
}

/// `Q ~ MN(I, αI, αI)`: entries independent `N(I_ab, α)`.
pub fn draw_perturbation<R: Rng + ?Sized>(alpha: f64, p: usize, rng: &mut R) -> DMatrix<f64> {
    let sd = alpha.sqrt();
    DMatrix::from_fn(p, p, |a, b| {
        let z: f64 = rng.sample(StandardNormal);
        let mean = if a == b { 1.0 } else { 0.0 };
        mean + sd * z
    })
}

pub fn perturbation_log_density(q: &DMatrix<f64>, alpha: f64) -> f64 {
    let p = q.nrows();
    let dev = q - DMatrix::<f64>::identity(p, p);
    let m = (p * p) as f64;
    -0.5 * (m * (LN_2PI + alpha.ln()) + dev.norm_squared() / alpha)
}
