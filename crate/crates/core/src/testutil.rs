//! Shared fixtures for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::estimator::RidgeSquaredLoss;
use crate::model::ModelParams;

/// The default simulation setting: d = 2, eps = 0.02, gamma = 2, sigma_y2 = 0.2.
pub fn default_params() -> ModelParams {
    ModelParams::new(
        DVector::from_vec(vec![1.0, 1.0]),
        DVector::from_vec(vec![0.02, 0.0]),
        DVector::from_vec(vec![1.0, 0.0]),
        DMatrix::identity(2, 2),
        0.2,
        2.0,
        20.0,
        -0.2,
    )
    .unwrap()
}

pub fn default_loss() -> RidgeSquaredLoss {
    RidgeSquaredLoss::new(2.0)
}

pub fn default_theta0() -> DVector<f64> {
    DVector::from_vec(vec![0.4, 0.25])
}

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Noise-free annotation `alpha'x + mu'theta + annot_bias`.
pub fn annotate_exact(params: &ModelParams, theta: &DVector<f64>, x: &DVector<f64>) -> f64 {
    params.alpha().dot(x) + params.mu().dot(theta) + params.annot_bias()
}
