#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pfa_core::{cumulative_products, Dataset, ModelState, PerturbationMode};

/// Dataset from row vectors and zero-based group labels.
pub fn dataset(rows: &[&[f64]], groups: &[usize]) -> Dataset {
    let n = rows.len();
    let p = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let j = groups.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        DMatrix::from_row_slice(n, p, &flat),
        groups.to_vec(),
        (1..=j).map(|g| g.to_string()).collect(),
        (1..=p).map(|l| format!("x{l}")).collect(),
    )
    .unwrap()
}

pub struct StateBuilder {
    pub state: ModelState,
}

impl StateBuilder {
    pub fn new(p: usize, k: usize, n: usize) -> Self {
        Self {
            state: ModelState {
                lambda: DMatrix::zeros(p, k),
                e: DVector::from_element(k, 1.0),
                sigma: DVector::from_element(p, 1.0),
                q: Vec::new(),
                eta: DMatrix::zeros(n, k),
                phi: DMatrix::from_element(p, k, 1.0),
                delta: DVector::from_element(k, 1.0),
                tau: DVector::from_element(k, 1.0),
                alpha: 1e-2,
                mode: PerturbationMode::None,
            },
        }
    }

    pub fn lambda(mut self, m: DMatrix<f64>) -> Self {
        self.state.lambda = m;
        self
    }

    pub fn eta(mut self, m: DMatrix<f64>) -> Self {
        self.state.eta = m;
        self
    }

    pub fn sigma(mut self, v: &[f64]) -> Self {
        self.state.sigma = DVector::from_column_slice(v);
        self
    }

    pub fn e(mut self, v: &[f64]) -> Self {
        self.state.e = DVector::from_column_slice(v);
        self
    }

    pub fn phi(mut self, m: DMatrix<f64>) -> Self {
        self.state.phi = m;
        self
    }

    pub fn delta(mut self, v: &[f64]) -> Self {
        self.state.delta = DVector::from_column_slice(v);
        self.state.tau = cumulative_products(&self.state.delta);
        self
    }

    pub fn alpha(mut self, a: f64) -> Self {
        self.state.alpha = a;
        self
    }

    pub fn perturbed(mut self, mode: PerturbationMode, units: usize) -> Self {
        let p = self.state.p();
        self.state.mode = mode;
        self.state.q = vec![DMatrix::identity(p, p); units];
        self
    }

    pub fn build(self) -> ModelState {
        self.state
    }
}

/// Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance, from the fourth central moment.
pub fn variance_std_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    let v = variance(xs);
    ((m4 - v * v) / n).sqrt()
}

/// Asserts that a Monte Carlo mean lies within `z` standard errors of `target`.
pub fn assert_mean_close(xs: &[f64], target: f64, z: f64, what: &str) {
    let m = mean(xs);
    let se = std_error(xs);
    assert!(
        (m - target).abs() <= z * se,
        "{what}: sample mean {m} vs {target} (se {se})"
    );
}

pub fn assert_variance_close(xs: &[f64], target: f64, z: f64, what: &str) {
    let v = variance(xs);
    let se = variance_std_error(xs);
    assert!(
        (v - target).abs() <= z * se,
        "{what}: sample variance {v} vs {target} (se {se})"
    );
}

pub fn assert_matrix_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let diff = (a - b).abs().max();
    assert!(
        diff <= tol,
        "{what}: max difference {diff} exceeds {tol}\n{a}\n{b}"
    );
}

pub fn assert_vector_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    let diff = (a - b).abs().max();
    assert!(
        diff <= tol,
        "{what}: max difference {diff} exceeds {tol}\n{a}\n{b}"
    );
}
