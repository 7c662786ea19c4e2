//! Predictive scoring, cross-validation of α, and group-level diagnostics.

mod cv;
mod diagnostics;
mod predictive;

pub use cv::{
    cv_alpha, select_alpha, split_datasets, split_halves, CvAlphaSummary, CvConfig, CvResult, CvRow,
};
pub use diagnostics::{
    covariance_mse, divergence_from_norms, divergence_from_perturbations, divergence_matrix,
    edge_weights, gaussian_kl, hotelling_t2, kl_group_marginals, DivergenceMatrix,
};
pub use predictive::{
    chain_predictive_loglik, draws_predictive_loglik, predictive_loglik, HoldoutAccumulator,
    PredictiveKernel, TestPoints,
};
