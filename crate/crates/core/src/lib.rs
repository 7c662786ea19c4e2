//! Perturbed factor analysis: Bayesian factor models shared across groups,
//! where each group (or each observation) sees the data through its own
//! multiplicative perturbation `Q`.

pub mod error;
pub mod evaluate;
pub mod gibbs;
pub mod io;
pub mod linalg;
pub mod model;
pub mod postprocess;
pub mod priors;
pub mod serde_mat;
pub mod simulate;

pub use error::{ErrorClass, PfaError, Result};
pub use model::*;

/// Derives an independent stream seed from a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
