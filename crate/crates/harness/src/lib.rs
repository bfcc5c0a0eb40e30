//! Monte Carlo experiment runner reproducing the coverage/width curves, the
//! CLT Q-Q diagnostic, the score-matching quality table and the convergence
//! table as data files, plus the CLI the `perfinf` binary wraps.

pub mod config;
pub mod output;
pub mod runner;

use thiserror::Error as ThisError;

pub use config::{ExperimentConfig, ScoreSettings};
pub use runner::{
    run_convergence, run_coverage, run_qq, run_score_eval, ConvergenceRow, CoverageCell, QqPoint,
    ScoreEvalRow, TrialSummary,
};

#[derive(Debug, ThisError)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] performative_core::Error),

    #[error("trial {trial} (derived seed {seed}) failed: {source}")]
    Trial {
        trial: usize,
        seed: u64,
        source: performative_core::Error,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure is a bad configuration rather than a numerical
    /// problem encountered mid-run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Core(e) => e.is_config(),
            Error::Json(_) => true,
            Error::Trial { .. } | Error::Io(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
