//! Experiment configuration, loadable from JSON.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use performative_core::estimator::LambdaPolicy;
use performative_core::inference::GradGMode;
use performative_core::model::ModelParams;

use crate::{Error, Result};

/// Settings for the score-matching side of variance estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSettings {
    /// Policy perturbation size.
    pub eta: f64,
    /// Samples per perturbed policy; `null` means "same as n".
    #[serde(default)]
    pub k: Option<usize>,
    pub lr: f64,
    pub iters: usize,
    pub mode: GradGMode,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            eta: 0.1,
            k: None,
            lr: 0.1,
            iters: 500,
            mode: GradGMode::Fitted,
        }
    }
}

/// Full description of an experiment run; serialized field names follow the
/// JSON schema (`T`, `N` uppercase).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub theta0: Vec<f64>,
    #[serde(rename = "T")]
    pub t_steps: usize,
    pub n_grid: Vec<usize>,
    #[serde(rename = "N")]
    pub n_unlabeled: usize,
    pub delta: f64,
    pub trials: usize,
    pub lambda_policies: Vec<LambdaPolicy>,
    #[serde(default)]
    pub score: ScoreSettings,
    pub seed: u64,
    pub theta_bound: f64,
}

impl Default for ExperimentConfig {
    /// The simulation setting: d = 2, eps = 0.02, gamma = 2, sigma_y2 = 0.2,
    /// N = 2000, with the remaining free fields fixed to the shipped
    /// defaults.
    fn default() -> Self {
        let model = ModelParams::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![0.02, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(2, 2),
            0.2,
            2.0,
            20.0,
            -0.2,
        )
        .expect("default model parameters are valid");
        ExperimentConfig {
            model,
            theta0: vec![0.4, 0.25],
            t_steps: 4,
            n_grid: vec![100, 250, 500, 1000, 2000],
            n_unlabeled: 2000,
            delta: 0.1,
            trials: 1000,
            lambda_policies: vec![
                LambdaPolicy::Zero,
                LambdaPolicy::Fixed(1.0),
                LambdaPolicy::Greedy,
            ],
            score: ScoreSettings::default(),
            seed: 7_240_901,
            theta_bound: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn theta0_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.theta0.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model.dim();
        let config = |msg: String| Error::Core(performative_core::Error::Config(msg));
        if self.theta0.len() != d {
            return Err(config(format!("theta0 must have dimension {d}")));
        }
        if self.t_steps < 1 {
            return Err(config("T must be at least 1".into()));
        }
        if self.trials < 1 {
            return Err(config("trials must be at least 1".into()));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(config("delta must lie in (0, 1)".into()));
        }
        if self.n_grid.is_empty() {
            return Err(config("n_grid must be nonempty".into()));
        }
        if self.n_grid.iter().any(|&n| n < d + 1) {
            return Err(config(format!(
                "every n in n_grid must be >= d + 1 = {}",
                d + 1
            )));
        }
        if self.n_unlabeled < 1 {
            return Err(config("N must be at least 1".into()));
        }
        if self.lambda_policies.is_empty() {
            return Err(config("need at least one lambda policy".into()));
        }
        if self.score.eta <= 0.0 {
            return Err(config("score.eta must be positive".into()));
        }
        if self.score.lr <= 0.0 {
            return Err(config("score.lr must be positive".into()));
        }
        // Contractivity of the update map is what every convergence claim
        // rests on; reject configurations that break it.
        self.model
            .contraction_rate(self.theta_bound)
            .map_err(Error::Core)?;
        Ok(())
    }
}
