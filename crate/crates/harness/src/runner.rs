//! The experiment runners. Every runner is deterministic given the config:
//! trial `i` of a cell owns the stream `seed ^ i` on a cell-specific ChaCha
//! stream id, trials run in a rayon pool, and aggregation reduces in trial
//! order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use performative_core::estimator::{
    ppi_trajectory, rrm_trajectory, LambdaPolicy, RidgeSquaredLoss, Trajectory,
};
use performative_core::frobenius;
use performative_core::inference::{
    bias_radius, ci_coordinates, estimate_variance, estimate_variance_ppi, grad_cov_hat,
    hessian_hat, ps_region, sandwich, vt_prefixes, GradGMode, ScoreConfig,
};

use crate::config::ExperimentConfig;
use crate::{Error, Result};

const QQ_STREAM: u64 = 1 << 40;
const SCORE_STREAM: u64 = 2 << 40;
const POPULATION_STREAM: u64 = 3 << 40;
const SIMULATE_STREAM: u64 = 4 << 40;

/// Samples used for the cached population covariance blocks.
const POPULATION_MC_SAMPLES: usize = 1_000_000;

/// One (policy, n, t) cell of the coverage study.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageCell {
    pub policy: String,
    pub n: usize,
    pub t: usize,
    /// Fraction of trials where the true iterate lay inside all d coordinate
    /// intervals simultaneously.
    pub coverage_t: f64,
    /// Fraction of trials where the stable point lay inside the inflated
    /// region.
    pub coverage_ps: f64,
    /// Binomial standard error of `coverage_t`.
    pub se: f64,
    /// Interval width averaged over coordinates, then over trials.
    pub mean_width: f64,
    pub mean_lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mahalanobis: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub cells: Vec<CoverageCell>,
}

struct TrialRow {
    covered_t: Vec<bool>,
    covered_ps: Vec<bool>,
    width: Vec<f64>,
    lambda: Vec<f64>,
}

fn score_config<'a>(config: &'a ExperimentConfig, n: usize, mode: GradGMode) -> ScoreConfig<'a> {
    ScoreConfig {
        model: &config.model,
        mode,
        eta: config.score.eta,
        k: config.score.k.unwrap_or(n),
        lr: config.score.lr,
        iters: config.score.iters,
    }
}

fn trial_rng(seed: u64, trial: usize, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ trial as u64);
    rng.set_stream(stream);
    rng
}

/// Trajectory plus the variance-recursion prefixes, for either policy kind.
fn run_trajectory_with_variance(
    config: &ExperimentConfig,
    policy: LambdaPolicy,
    n: usize,
    loss: &RidgeSquaredLoss,
    rng: &mut ChaCha12Rng,
) -> performative_core::Result<(Trajectory, Vec<DMatrix<f64>>)> {
    let theta0 = config.theta0_vector();
    let cfg = score_config(config, n, config.score.mode);
    if matches!(policy, LambdaPolicy::Zero) {
        let traj = rrm_trajectory(&config.model, loss, &theta0, config.t_steps, n, rng)?;
        let var = estimate_variance(&traj, loss, &cfg, rng)?;
        Ok((traj, var.v_prefix))
    } else {
        let traj = ppi_trajectory(
            &config.model,
            loss,
            &theta0,
            config.t_steps,
            n,
            config.n_unlabeled,
            policy,
            rng,
        )?;
        let r = n as f64 / config.n_unlabeled as f64;
        let var = estimate_variance_ppi(&traj, loss, &cfg, r, rng)?;
        Ok((traj, var.v_prefix))
    }
}

/// Coverage and width of the confidence regions for the iterate and (after
/// bias-aware widening) the stable point, per (policy, n, t) cell.
pub fn run_coverage(config: &ExperimentConfig) -> Result<TrialSummary> {
    config.validate()?;
    let model = &config.model;
    let loss = RidgeSquaredLoss::new(model.gamma());
    let theta0 = config.theta0_vector();
    let truth = model.underlying_trajectory(&theta0, config.t_steps);
    let theta_ps = model.performative_stable()?;
    let eps = model.sensitivity_epsilon();
    let beta = model.smoothness_beta(config.theta_bound);
    let b = (&theta0 - &theta_ps).norm();

    let mut cells = Vec::new();
    for (pi, policy) in config.lambda_policies.iter().enumerate() {
        for (ni, &n) in config.n_grid.iter().enumerate() {
            let stream = ((pi as u64) << 20) | ni as u64;
            let outcomes: Vec<crate::Result<TrialRow>> = (0..config.trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = trial_rng(config.seed, trial, stream);
                    coverage_trial(
                        config, *policy, n, &loss, &truth, &theta_ps, eps, beta, b, &mut rng,
                    )
                    .map_err(|source| Error::Trial {
                        trial,
                        seed: config.seed ^ trial as u64,
                        source,
                    })
                })
                .collect();
            let mut rows = Vec::with_capacity(config.trials);
            for outcome in outcomes {
                rows.push(outcome?);
            }
            for t in 1..=config.t_steps {
                let idx = t - 1;
                let trials = rows.len() as f64;
                let coverage_t = rows.iter().filter(|r| r.covered_t[idx]).count() as f64 / trials;
                let coverage_ps = rows.iter().filter(|r| r.covered_ps[idx]).count() as f64 / trials;
                let mean_width = rows.iter().map(|r| r.width[idx]).sum::<f64>() / trials;
                let mean_lambda = rows.iter().map(|r| r.lambda[idx]).sum::<f64>() / trials;
                cells.push(CoverageCell {
                    policy: policy.label(),
                    n,
                    t,
                    coverage_t,
                    coverage_ps,
                    se: (coverage_t * (1.0 - coverage_t) / trials).sqrt(),
                    mean_width,
                    mean_lambda,
                    mahalanobis: None,
                });
            }
        }
    }
    Ok(TrialSummary {
        trials: config.trials,
        cells,
    })
}

#[allow(clippy::too_many_arguments)]
fn coverage_trial(
    config: &ExperimentConfig,
    policy: LambdaPolicy,
    n: usize,
    loss: &RidgeSquaredLoss,
    truth: &[DVector<f64>],
    theta_ps: &DVector<f64>,
    eps: f64,
    beta: f64,
    b: f64,
    rng: &mut ChaCha12Rng,
) -> performative_core::Result<TrialRow> {
    let (traj, v_prefix) = run_trajectory_with_variance(config, policy, n, loss, rng)?;
    let gamma = config.model.gamma();
    let mut row = TrialRow {
        covered_t: Vec::with_capacity(config.t_steps),
        covered_ps: Vec::with_capacity(config.t_steps),
        width: Vec::with_capacity(config.t_steps),
        lambda: Vec::with_capacity(config.t_steps),
    };
    for t in 1..=config.t_steps {
        let region = ci_coordinates(traj.theta_at(t), &v_prefix[t - 1], n, config.delta)?;
        let radius = bias_radius(b, eps, beta, gamma, t);
        let inflated = ps_region(&region, radius)?;
        row.covered_t.push(region.contains(&truth[t]));
        row.covered_ps.push(inflated.contains(theta_ps));
        row.width.push(region.mean_width());
        row.lambda.push(traj.steps[t - 1].lambda.unwrap_or(0.0));
    }
    Ok(row)
}

/// One point of the Mahalanobis Q-Q diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct QqPoint {
    pub rank: usize,
    pub observed_m2: f64,
    pub chi2_quantile: f64,
}

/// Squared Mahalanobis distances `n (theta_hat_T - theta_T)' V_T^{-1}
/// (theta_hat_T - theta_T)` of the classical trajectory at the largest grid
/// size, sorted and paired with chi-squared quantiles at `(i - 1/2)/trials`.
pub fn run_qq(config: &ExperimentConfig) -> Result<Vec<QqPoint>> {
    config.validate()?;
    if config.trials < 100 {
        return Err(Error::Core(performative_core::Error::Config(
            "the Q-Q diagnostic needs at least 100 trials".into(),
        )));
    }
    let n = *config.n_grid.last().expect("validated nonempty");
    let loss = RidgeSquaredLoss::new(config.model.gamma());
    let theta0 = config.theta0_vector();
    let truth = config.model.underlying_trajectory(&theta0, config.t_steps);
    let outcomes: Vec<crate::Result<f64>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.seed, trial, QQ_STREAM);
            mahalanobis_trial(config, n, &loss, &truth, &mut rng).map_err(|source| Error::Trial {
                trial,
                seed: config.seed ^ trial as u64,
                source,
            })
        })
        .collect();
    let mut m2 = Vec::with_capacity(config.trials);
    for outcome in outcomes {
        m2.push(outcome?);
    }
    m2.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(pair_with_chi2(&m2, config.model.dim()))
}

fn mahalanobis_trial(
    config: &ExperimentConfig,
    n: usize,
    loss: &RidgeSquaredLoss,
    truth: &[DVector<f64>],
    rng: &mut ChaCha12Rng,
) -> performative_core::Result<f64> {
    let (traj, v_prefix) = run_trajectory_with_variance(config, LambdaPolicy::Zero, n, loss, rng)?;
    let t = config.t_steps;
    mahalanobis_sq(traj.theta_at(t), &truth[t], &v_prefix[t - 1], n)
}

/// `n (theta_hat - theta)' V^{-1} (theta_hat - theta)`.
pub fn mahalanobis_sq(
    theta_hat: &DVector<f64>,
    theta: &DVector<f64>,
    v: &DMatrix<f64>,
    n: usize,
) -> performative_core::Result<f64> {
    let chol = nalgebra::Cholesky::new(v.clone()).ok_or_else(|| {
        performative_core::Error::Singular("estimated covariance is singular".into())
    })?;
    let diff = theta_hat - theta;
    Ok(n as f64 * diff.dot(&chol.solve(&diff)))
}

/// Pair sorted squared distances with theoretical chi-squared quantiles.
pub fn pair_with_chi2(sorted_m2: &[f64], dim: usize) -> Vec<QqPoint> {
    let chi2 = ChiSquared::new(dim as f64).expect("positive dof");
    let trials = sorted_m2.len() as f64;
    sorted_m2
        .iter()
        .enumerate()
        .map(|(i, &observed_m2)| QqPoint {
            rank: i + 1,
            observed_m2,
            chi2_quantile: chi2.inverse_cdf((i as f64 + 0.5) / trials),
        })
        .collect()
}

/// Kolmogorov-Smirnov distance between a sorted sample and the chi-squared
/// distribution with `dim` degrees of freedom.
pub fn ks_distance_chi2(sorted_m2: &[f64], dim: usize) -> f64 {
    let chi2 = ChiSquared::new(dim as f64).expect("positive dof");
    let n = sorted_m2.len() as f64;
    sorted_m2
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = chi2.cdf(x);
            let hi = ((i as f64 + 1.0) / n - f).abs();
            let lo = (i as f64 / n - f).abs();
            hi.max(lo)
        })
        .fold(0.0, f64::max)
}

/// Per-trial score-evaluation outcome: Frobenius errors per step and the
/// reported fit quality per step.
type ScoreTrialOutcome = (Vec<f64>, Vec<Option<f64>>);

/// One row of the score-matching quality table.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreEvalRow {
    pub n: usize,
    pub t: usize,
    /// Mean reported training-quality metric over the fits feeding `V_t`
    /// (absent at t = 1, which needs no Jacobian).
    pub j_psi: Option<f64>,
    /// Median Frobenius error against the cached population recursion.
    pub var_err: f64,
}

/// Fitted-mode variance error against the analytic recursion (oracle
/// Jacobian, population blocks from a large cached Monte Carlo draw), plus
/// the reported score-fit quality, per (n, t).
pub fn run_score_eval(config: &ExperimentConfig) -> Result<Vec<ScoreEvalRow>> {
    config.validate()?;
    if config.score.mode != GradGMode::Fitted {
        return Err(Error::Core(performative_core::Error::Config(
            "score evaluation needs score.mode = \"fitted\"".into(),
        )));
    }
    let loss = RidgeSquaredLoss::new(config.model.gamma());
    let v_population = population_v_prefixes(config, &loss)?;
    let mut rows = Vec::new();
    for (ni, &n) in config.n_grid.iter().enumerate() {
        let stream = SCORE_STREAM | ni as u64;
        let outcomes: Vec<crate::Result<ScoreTrialOutcome>> = (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(config.seed, trial, stream);
                score_eval_trial(config, n, &loss, &v_population, &mut rng).map_err(|source| {
                    Error::Trial {
                        trial,
                        seed: config.seed ^ trial as u64,
                        source,
                    }
                })
            })
            .collect();
        let mut per_trial = Vec::with_capacity(config.trials);
        for outcome in outcomes {
            per_trial.push(outcome?);
        }
        for t in 1..=config.t_steps {
            let mut errs: Vec<f64> = per_trial.iter().map(|(e, _)| e[t - 1]).collect();
            errs.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
            let var_err = errs[errs.len() / 2];
            let j_psi = if t >= 2 {
                let mut acc = 0.0;
                let mut count = 0usize;
                for (_, qualities) in &per_trial {
                    for q in qualities.iter().take(t - 1).flatten() {
                        acc += q;
                        count += 1;
                    }
                }
                (count > 0).then(|| acc / count as f64)
            } else {
                None
            };
            rows.push(ScoreEvalRow {
                n,
                t,
                j_psi,
                var_err,
            });
        }
    }
    Ok(rows)
}

fn score_eval_trial(
    config: &ExperimentConfig,
    n: usize,
    loss: &RidgeSquaredLoss,
    v_population: &[DMatrix<f64>],
    rng: &mut ChaCha12Rng,
) -> performative_core::Result<ScoreTrialOutcome> {
    let theta0 = config.theta0_vector();
    let traj = rrm_trajectory(&config.model, loss, &theta0, config.t_steps, n, rng)?;
    let cfg = score_config(config, n, GradGMode::Fitted);
    let var = estimate_variance(&traj, loss, &cfg, rng)?;
    let errs = var
        .v_prefix
        .iter()
        .zip(v_population.iter())
        .map(|(v_hat, v_pop)| frobenius(&(v_hat - v_pop)))
        .collect();
    let qualities = var.per_step.iter().map(|s| s.score_quality).collect();
    Ok((errs, qualities))
}

/// Population variance prefixes: analytic Jacobian and per-step sandwich
/// blocks from one large Monte Carlo draw along the underlying trajectory.
fn population_v_prefixes(
    config: &ExperimentConfig,
    loss: &RidgeSquaredLoss,
) -> Result<Vec<DMatrix<f64>>> {
    let model = &config.model;
    let theta0 = config.theta0_vector();
    let truth = model.underlying_trajectory(&theta0, config.t_steps);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(POPULATION_STREAM);
    let mut sigmas = Vec::with_capacity(config.t_steps);
    for s in 1..=config.t_steps {
        let data = model.sample_labeled(&truth[s - 1], POPULATION_MC_SAMPLES, &mut rng)?;
        let h = hessian_hat(loss, &data, &truth[s]);
        let v = grad_cov_hat(loss, &data, &truth[s])?;
        sigmas.push(sandwich(&h, &v)?);
    }
    let grads = vec![model.grad_g_analytic(); config.t_steps - 1];
    Ok(vt_prefixes(&sigmas, &grads)?)
}

/// One row of the convergence table for the underlying trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub t: usize,
    pub dist_to_ps: f64,
    pub bound: f64,
}

/// Distance of the underlying iterates to the stable point against the
/// geometric bound `(eps beta / gamma)^t |theta_0 - theta_PS|`.
pub fn run_convergence(config: &ExperimentConfig) -> Result<Vec<ConvergenceRow>> {
    config.validate()?;
    let model = &config.model;
    let theta0 = config.theta0_vector();
    let rate = model.contraction_rate(config.theta_bound)?;
    let theta_ps = model.performative_stable()?;
    let truth = model.underlying_trajectory(&theta0, config.t_steps);
    let b0 = (&theta0 - &theta_ps).norm();
    Ok(truth
        .iter()
        .enumerate()
        .map(|(t, theta)| ConvergenceRow {
            t,
            dist_to_ps: (theta - &theta_ps).norm(),
            bound: rate.powi(t as i32) * b0,
        })
        .collect())
}

/// Serializable view of a single simulated trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct SimulateRecord {
    pub seed: u64,
    pub policy: String,
    pub n: usize,
    #[serde(rename = "N")]
    pub n_unlabeled: usize,
    pub theta0: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub lambdas: Vec<Option<f64>>,
    /// Full per-step record including datasets; elided by default for size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Trajectory>,
}

/// Run one trajectory under `policy` at the largest grid size and package it
/// for serialization.
pub fn run_simulate(
    config: &ExperimentConfig,
    policy: LambdaPolicy,
    include_datasets: bool,
) -> Result<SimulateRecord> {
    config.validate()?;
    let n = *config.n_grid.last().expect("validated nonempty");
    let loss = RidgeSquaredLoss::new(config.model.gamma());
    let theta0 = config.theta0_vector();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(SIMULATE_STREAM);
    let traj = if matches!(policy, LambdaPolicy::Zero) {
        rrm_trajectory(&config.model, &loss, &theta0, config.t_steps, n, &mut rng)?
    } else {
        ppi_trajectory(
            &config.model,
            &loss,
            &theta0,
            config.t_steps,
            n,
            config.n_unlabeled,
            policy,
            &mut rng,
        )?
    };
    Ok(SimulateRecord {
        seed: config.seed,
        policy: policy.label(),
        n,
        n_unlabeled: config.n_unlabeled,
        theta0: config.theta0.clone(),
        thetas: traj
            .steps
            .iter()
            .map(|s| s.theta_hat.iter().copied().collect())
            .collect(),
        lambdas: traj.steps.iter().map(|s| s.lambda).collect(),
        steps: include_datasets.then_some(traj),
    })
}
