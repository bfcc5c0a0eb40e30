//! Sandwich covariance blocks, the variance recursion behind the iterates'
//! CLT, confidence regions (including the bias-aware region for the stable
//! point), and data-driven selection of the prediction-powered weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::{LossModel, Trajectory};
use crate::mat;
use crate::model::{mat_serde, opt_mat_serde, vec_serde, Dataset, ModelParams};
use crate::score::{self, PerturbationBundle};

/// Selected lambdas are clipped to `[0, LAMBDA_MAX]`; far outside this range
/// the blended empirical Hessian can lose positive definiteness.
pub const LAMBDA_MAX: f64 = 2.0;

/// Eigenvalues in `(PSD_REPAIR_FLOOR, 0)` are treated as floating-point dust
/// and clipped to zero; anything lower is an error.
pub const PSD_REPAIR_FLOOR: f64 = -1e-8;

/// Empirical Hessian `mean_z grad^2 loss(z; theta)`, symmetrized.
pub fn hessian_hat<L: LossModel + ?Sized>(
    loss: &L,
    data: &Dataset,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let d = data.dim();
    let mut acc = DMatrix::zeros(d, d);
    for z in data.iter() {
        acc += loss.hessian(z, theta);
    }
    mat::symmetrize(&(acc / data.len() as f64))
}

/// Empirical covariance (divisor `n - 1`) of the per-sample loss gradients
/// at `theta`.
pub fn grad_cov_hat<L: LossModel + ?Sized>(
    loss: &L,
    data: &Dataset,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Config(
            "gradient covariance needs at least two samples".into(),
        ));
    }
    let d = data.dim();
    let mut sum = DVector::zeros(d);
    let mut outer = DMatrix::zeros(d, d);
    for z in data.iter() {
        let g = loss.grad(z, theta);
        outer.ger(1.0, &g, &g, 1.0);
        sum += g;
    }
    let nf = n as f64;
    outer.ger(-1.0 / nf, &sum, &sum, 1.0);
    Ok(mat::symmetrize(&(outer / (nf - 1.0))))
}

/// Sandwich covariance `H^{-1} V H^{-1}` for positive-definite `H`.
pub fn sandwich(h: &DMatrix<f64>, vg: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = mat::cholesky(h, "sandwich Hessian")?;
    Ok(mat::sandwich_with(&chol, vg))
}

/// Variance recursion: `V_1 = sigmas[0]`,
/// `V_j = gradGs[j-1] V_{j-1} gradGs[j-1]' + sigmas[j]`; returns `V_t`.
pub fn vt_recursion(sigmas: &[DMatrix<f64>], grad_gs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    Ok(vt_prefixes(sigmas, grad_gs)?.pop().expect("nonempty"))
}

/// All prefixes `V_1 .. V_t` of the variance recursion.
pub fn vt_prefixes(sigmas: &[DMatrix<f64>], grad_gs: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    if sigmas.is_empty() {
        return Err(Error::Dimension(
            "need at least one covariance block".into(),
        ));
    }
    if grad_gs.len() + 1 != sigmas.len() {
        return Err(Error::Dimension(format!(
            "need len(gradGs) = t - 1, got {} blocks and {} Jacobians",
            sigmas.len(),
            grad_gs.len()
        )));
    }
    let d = sigmas[0].nrows();
    if sigmas
        .iter()
        .chain(grad_gs.iter())
        .any(|m| m.nrows() != d || m.ncols() != d)
    {
        return Err(Error::Dimension("all blocks must be d x d".into()));
    }
    let mut out = Vec::with_capacity(sigmas.len());
    let mut v = sigmas[0].clone();
    out.push(v.clone());
    for (j, sigma) in sigmas.iter().enumerate().skip(1) {
        let g = &grad_gs[j - 1];
        v = g * &v * g.transpose() + sigma;
        out.push(v.clone());
    }
    Ok(out)
}

/// Coordinatewise confidence intervals, possibly widened by a deterministic
/// inflation radius (zero for regions targeting the running iterate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    #[serde(with = "vec_serde")]
    pub lower: DVector<f64>,
    #[serde(with = "vec_serde")]
    pub upper: DVector<f64>,
    pub delta: f64,
    pub inflation_radius: f64,
}

impl ConfidenceRegion {
    /// Simultaneous membership: the point lies inside every coordinate
    /// interval.
    pub fn contains(&self, point: &DVector<f64>) -> bool {
        point
            .iter()
            .enumerate()
            .all(|(j, &v)| self.lower[j] <= v && v <= self.upper[j])
    }

    /// Interval width averaged over the coordinates.
    pub fn mean_width(&self) -> f64 {
        (&self.upper - &self.lower).sum() / self.lower.len() as f64
    }
}

/// Two-sided normal intervals per coordinate with the Bonferroni-corrected
/// quantile `z_{1 - delta/(2d)}`: interval `j` is
/// `theta_hat_j +- z sqrt(V_jj / n)`.
pub fn ci_coordinates(
    theta_hat: &DVector<f64>,
    v_hat: &DMatrix<f64>,
    n: usize,
    delta: f64,
) -> Result<ConfidenceRegion> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::Config("delta must lie in (0, 1)".into()));
    }
    let d = theta_hat.len();
    let z = Normal::standard().inverse_cdf(1.0 - delta / (2.0 * d as f64));
    let mut lower = theta_hat.clone();
    let mut upper = theta_hat.clone();
    for j in 0..d {
        let vjj = v_hat[(j, j)];
        if vjj < -1e-8 {
            return Err(Error::Singular(format!(
                "negative variance {vjj:e} on coordinate {j}"
            )));
        }
        let hw = z * (vjj.max(0.0) / n as f64).sqrt();
        lower[j] -= hw;
        upper[j] += hw;
    }
    Ok(ConfidenceRegion {
        lower,
        upper,
        delta,
        inflation_radius: 0.0,
    })
}

/// Deterministic bias bound `2 B (eps beta / gamma)^t` used to widen the
/// iterate's region into one covering the stable point.
pub fn bias_radius(b: f64, eps: f64, beta: f64, gamma: f64, t: usize) -> f64 {
    assert!(b >= 0.0, "bias bound must be nonnegative");
    assert!(gamma > 0.0, "gamma must be positive");
    2.0 * b * (eps * beta / gamma).powi(t as i32)
}

/// Widen every interval of `region` by `radius` on both ends.
pub fn ps_region(region: &ConfidenceRegion, radius: f64) -> Result<ConfidenceRegion> {
    if radius < 0.0 {
        return Err(Error::Config("inflation radius must be nonnegative".into()));
    }
    Ok(ConfidenceRegion {
        lower: region.lower.map(|v| v - radius),
        upper: region.upper.map(|v| v + radius),
        delta: region.delta,
        inflation_radius: region.inflation_radius + radius,
    })
}

/// Feasible norm bound for the stable point from strong convexity:
/// `|theta_PS| <= grad_sup / gamma + |theta_0|` where `grad_sup` bounds
/// `sup_z |grad loss(z; theta_0)|`.
pub fn b_bound_feasible(grad_sup: f64, gamma: f64, theta0_norm: f64) -> f64 {
    assert!(grad_sup >= 0.0 && gamma > 0.0 && theta0_norm >= 0.0);
    grad_sup / gamma + theta0_norm
}

/// Scalarizations of a covariance matrix that are additive across blocks,
/// so greedy per-step minimization of the recursion only needs the current
/// step's block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scalarization {
    /// Sum of coordinate variances.
    Trace,
    /// Variance of the coordinate sum, `1' V 1`.
    SumAll,
}

impl Scalarization {
    pub fn apply(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            Scalarization::Trace => m.trace(),
            Scalarization::SumAll => m.sum(),
        }
    }
}

/// Per-step covariance of the prediction-powered estimator:
/// `Sigma = H^{-1} (r V^f + V_lambda) H^{-1}` with
/// `V^f = lambda^2 Cu_ff` and
/// `V_lambda = C_gg - lambda (C_gf + C_gf') + lambda^2 C_ff`.
pub fn ppi_sigma(
    h: &DMatrix<f64>,
    c_gg: &DMatrix<f64>,
    c_ff: &DMatrix<f64>,
    c_gf: &DMatrix<f64>,
    cu_ff: &DMatrix<f64>,
    lambda: f64,
    r: f64,
) -> Result<DMatrix<f64>> {
    let chol = mat::cholesky(h, "PPI sandwich Hessian")?;
    let v_f = cu_ff * (lambda * lambda);
    let v_lambda = c_gg - (c_gf + c_gf.transpose()) * lambda + c_ff * (lambda * lambda);
    Ok(mat::sandwich_with(&chol, &(v_f * r + v_lambda)))
}

/// Closed-form minimizer of `F(Sigma_lambda)` over lambda, clipped to
/// `[0, LAMBDA_MAX]`. The scalarized block is an exact quadratic in lambda,
/// so the argmin is the ratio of its linear and quadratic coefficients; a
/// degenerate quadratic term returns 0.
pub fn select_lambda(
    h: &DMatrix<f64>,
    c_gg: &DMatrix<f64>,
    c_ff: &DMatrix<f64>,
    c_gf: &DMatrix<f64>,
    cu_ff: &DMatrix<f64>,
    r: f64,
    f: Scalarization,
) -> Result<f64> {
    let _ = c_gg;
    let chol = mat::cholesky(h, "PPI sandwich Hessian")?;
    let cross = c_gf + c_gf.transpose();
    let numerator = f.apply(&mat::sandwich_with(&chol, &cross));
    let denominator = 2.0 * f.apply(&mat::sandwich_with(&chol, &(cu_ff * r + c_ff)));
    if denominator <= 1e-12 {
        return Ok(0.0);
    }
    Ok((numerator / denominator).clamp(0.0, LAMBDA_MAX))
}

/// Empirical covariance blocks of the labeled and pseudo-labeled gradient
/// pools at a common evaluation point.
#[derive(Debug, Clone)]
pub struct GradBlocks {
    pub h_hat: DMatrix<f64>,
    pub c_gg: DMatrix<f64>,
    pub c_ff: DMatrix<f64>,
    pub c_gf: DMatrix<f64>,
    pub cu_ff: DMatrix<f64>,
}

/// Assemble the covariance blocks behind `ppi_sigma` / `select_lambda`.
/// Absent pseudo pools contribute zero blocks (exact at `lambda = 0`).
pub fn ppi_blocks<L: LossModel + ?Sized>(
    loss: &L,
    labeled: &Dataset,
    pseudo_labeled: Option<&Dataset>,
    pseudo_unlabeled: Option<&Dataset>,
    theta: &DVector<f64>,
) -> Result<GradBlocks> {
    let d = labeled.dim();
    let h_hat = hessian_hat(loss, labeled, theta);
    let c_gg = grad_cov_hat(loss, labeled, theta)?;
    let (c_ff, c_gf) = match pseudo_labeled {
        Some(pseudo) => {
            if pseudo.len() != labeled.len() {
                return Err(Error::Config(
                    "pseudo-labeled pool must pair the labeled samples".into(),
                ));
            }
            let n = labeled.len() as f64;
            let mut sum_g = DVector::zeros(d);
            let mut sum_f = DVector::zeros(d);
            let mut outer_ff = DMatrix::zeros(d, d);
            let mut outer_gf = DMatrix::zeros(d, d);
            for (zg, zf) in labeled.iter().zip(pseudo.iter()) {
                let g = loss.grad(zg, theta);
                let f = loss.grad(zf, theta);
                outer_ff.ger(1.0, &f, &f, 1.0);
                outer_gf.ger(1.0, &g, &f, 1.0);
                sum_g += g;
                sum_f += f;
            }
            outer_ff.ger(-1.0 / n, &sum_f, &sum_f, 1.0);
            outer_gf.ger(-1.0 / n, &sum_g, &sum_f, 1.0);
            (
                mat::symmetrize(&(&outer_ff / (n - 1.0))),
                outer_gf / (n - 1.0),
            )
        }
        None => (DMatrix::zeros(d, d), DMatrix::zeros(d, d)),
    };
    let cu_ff = match pseudo_unlabeled {
        Some(pool) => grad_cov_hat(loss, pool, theta)?,
        None => DMatrix::zeros(d, d),
    };
    Ok(GradBlocks {
        h_hat,
        c_gg,
        c_ff,
        c_gf,
        cu_ff,
    })
}

/// Whether the Jacobian factors of the recursion come from the analytic
/// model (tests, fast experiments) or from the fitted score model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradGMode {
    Oracle,
    Fitted,
}

/// Settings for the data-driven Jacobian estimate inside the variance
/// estimators.
#[derive(Debug, Clone)]
pub struct ScoreConfig<'a> {
    pub model: &'a ModelParams,
    pub mode: GradGMode,
    /// Policy perturbation size.
    pub eta: f64,
    /// Samples per perturbed policy.
    pub k: usize,
    pub lr: f64,
    pub iters: usize,
}

impl<'a> ScoreConfig<'a> {
    pub fn oracle(model: &'a ModelParams) -> Self {
        ScoreConfig {
            model,
            mode: GradGMode::Oracle,
            eta: 0.1,
            k: 1,
            lr: 0.1,
            iters: 0,
        }
    }

    pub fn fitted(model: &'a ModelParams, eta: f64, k: usize, lr: f64, iters: usize) -> Self {
        ScoreConfig {
            model,
            mode: GradGMode::Fitted,
            eta,
            k,
            lr,
            iters,
        }
    }
}

/// Per-step ingredients of the classical variance estimate. Matrices
/// serialize as row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepBlocks {
    #[serde(with = "mat_serde")]
    pub h_hat: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub vgrad_hat: DMatrix<f64>,
    /// `H^{-1} Vgrad H^{-1}`, the step's CLT block.
    #[serde(with = "mat_serde")]
    pub sigma_hat: DMatrix<f64>,
    /// Estimated Jacobian of the update map at this step's iterate; absent
    /// on the final step, where the recursion does not need it.
    #[serde(with = "opt_mat_serde")]
    pub grad_g_hat: Option<DMatrix<f64>>,
    /// Training-quality metric of the score fit behind `grad_g_hat`, when
    /// the fitted mode ran one.
    pub score_quality: Option<f64>,
}

/// Accumulated covariance of `sqrt(n) (theta_hat_t - theta_t)` for every
/// prefix of the trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub per_step: Vec<StepBlocks>,
    /// `V_1 .. V_t`.
    #[serde(with = "mat_vec_serde")]
    pub v_prefix: Vec<DMatrix<f64>>,
    pub t: usize,
    pub n: usize,
}

/// Row-major serialization for a list of matrices.
mod mat_vec_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::mat_serde;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        ms.iter()
            .map(mat_serde::to_rows)
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .into_iter()
            .map(mat_serde::from_rows)
            .collect()
    }
}

impl VarianceEstimate {
    pub fn v_t(&self) -> &DMatrix<f64> {
        self.v_prefix.last().expect("at least one step")
    }
}

/// As [`VarianceEstimate`], for the prediction-powered trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpiVarianceEstimate {
    pub per_step: Vec<PpiStepBlocks>,
    #[serde(with = "mat_vec_serde")]
    pub v_prefix: Vec<DMatrix<f64>>,
    pub t: usize,
    pub n: usize,
    pub r: f64,
}

/// Per-step ingredients of the PPI variance estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpiStepBlocks {
    #[serde(with = "mat_serde")]
    pub h_hat: DMatrix<f64>,
    /// `lambda^2 Cov(grad loss on the unlabeled pseudo pool)`.
    #[serde(with = "mat_serde")]
    pub vf_hat: DMatrix<f64>,
    /// `Cov(grad_g - lambda grad_f)` over the paired labeled pools.
    #[serde(with = "mat_serde")]
    pub vlam_hat: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub sigma_hat: DMatrix<f64>,
    #[serde(with = "opt_mat_serde")]
    pub grad_g_hat: Option<DMatrix<f64>>,
    pub score_quality: Option<f64>,
    pub lambda: f64,
    pub r: f64,
}

impl PpiVarianceEstimate {
    pub fn v_t(&self) -> &DMatrix<f64> {
        self.v_prefix.last().expect("at least one step")
    }
}

/// Estimated Jacobians for steps 1..t-1 plus fit diagnostics, aligned so
/// entry `j` is the Jacobian at the iterate of (1-based) step `j + 1`.
struct GradGEstimates {
    grads: Vec<DMatrix<f64>>,
    qualities: Vec<Option<f64>>,
}

fn estimate_grad_gs<L: LossModel + ?Sized, R: Rng + ?Sized>(
    trajectory: &Trajectory,
    loss: &L,
    cfg: &ScoreConfig<'_>,
    rng: &mut R,
) -> Result<GradGEstimates> {
    let t = trajectory.len();
    let mut grads = Vec::with_capacity(t.saturating_sub(1));
    let mut qualities = Vec::with_capacity(t.saturating_sub(1));
    match cfg.mode {
        GradGMode::Oracle => {
            let g = cfg.model.grad_g_analytic();
            for _ in 1..t {
                grads.push(g.clone());
                qualities.push(None);
            }
        }
        GradGMode::Fitted => {
            for j in 1..t {
                let step = &trajectory.steps[j];
                let bundle = PerturbationBundle::with_base(
                    step.dataset.clone(),
                    cfg.model,
                    cfg.eta,
                    cfg.k,
                    rng,
                )?;
                let init = score::default_init(&bundle);
                let psi = score::fit_score_model(&bundle, &init, cfg.lr, cfg.iters)?;
                let quality = score::quality_metric(&psi, &bundle, cfg.model)?;
                grads.push(score::grad_g_estimate(
                    loss,
                    &step.dataset,
                    &step.theta_hat,
                    &psi,
                )?);
                qualities.push(Some(quality));
            }
        }
    }
    Ok(GradGEstimates { grads, qualities })
}

/// Estimate the CLT covariance of the classical trajectory: per-step
/// sandwich blocks, Jacobian factors (analytic or fitted), and the variance
/// recursion over every prefix.
pub fn estimate_variance<L: LossModel + ?Sized, R: Rng + ?Sized>(
    trajectory: &Trajectory,
    loss: &L,
    cfg: &ScoreConfig<'_>,
    rng: &mut R,
) -> Result<VarianceEstimate> {
    let t = trajectory.len();
    if t == 0 {
        return Err(Error::Config("trajectory has no steps".into()));
    }
    let mut sigmas = Vec::with_capacity(t);
    let mut per_step = Vec::with_capacity(t);
    for step in &trajectory.steps {
        let h_hat = hessian_hat(loss, &step.dataset, &step.theta_hat);
        let vgrad_hat = grad_cov_hat(loss, &step.dataset, &step.theta_hat)?;
        let sigma_hat = sandwich(&h_hat, &vgrad_hat)?;
        sigmas.push(sigma_hat.clone());
        per_step.push(StepBlocks {
            h_hat,
            vgrad_hat,
            sigma_hat,
            grad_g_hat: None,
            score_quality: None,
        });
    }
    let GradGEstimates { grads, qualities } = estimate_grad_gs(trajectory, loss, cfg, rng)?;
    for (j, (g, q)) in grads.iter().zip(qualities.iter()).enumerate() {
        per_step[j].grad_g_hat = Some(g.clone());
        per_step[j].score_quality = *q;
    }
    let v_prefix = vt_prefixes(&sigmas, &grads)?
        .into_iter()
        .map(|v| mat::clip_psd(&v, PSD_REPAIR_FLOOR, "V_t"))
        .collect::<Result<Vec<_>>>()?;
    Ok(VarianceEstimate {
        per_step,
        v_prefix,
        t,
        n: trajectory.steps[0].dataset.len(),
    })
}

/// Estimate the CLT covariance of a prediction-powered trajectory with the
/// recorded per-step weights. `r` is the labeled-to-unlabeled size ratio
/// `n / N` the asymptotics are taken under.
pub fn estimate_variance_ppi<L: LossModel + ?Sized, R: Rng + ?Sized>(
    trajectory: &Trajectory,
    loss: &L,
    cfg: &ScoreConfig<'_>,
    r: f64,
    rng: &mut R,
) -> Result<PpiVarianceEstimate> {
    let t = trajectory.len();
    if t == 0 {
        return Err(Error::Config("trajectory has no steps".into()));
    }
    let mut sigmas = Vec::with_capacity(t);
    let mut per_step = Vec::with_capacity(t);
    for step in &trajectory.steps {
        let lambda = step.lambda.ok_or_else(|| {
            Error::Config("PPI variance needs per-step lambdas; run ppi_trajectory".into())
        })?;
        let blocks = ppi_blocks(
            loss,
            &step.dataset,
            step.pseudo_labeled.as_ref(),
            step.pseudo_unlabeled.as_ref(),
            &step.theta_hat,
        )?;
        let vf_hat = &blocks.cu_ff * (lambda * lambda);
        let vlam_hat = &blocks.c_gg - (&blocks.c_gf + blocks.c_gf.transpose()) * lambda
            + &blocks.c_ff * (lambda * lambda);
        let sigma_hat = ppi_sigma(
            &blocks.h_hat,
            &blocks.c_gg,
            &blocks.c_ff,
            &blocks.c_gf,
            &blocks.cu_ff,
            lambda,
            r,
        )?;
        sigmas.push(sigma_hat.clone());
        per_step.push(PpiStepBlocks {
            h_hat: blocks.h_hat,
            vf_hat,
            vlam_hat,
            sigma_hat,
            grad_g_hat: None,
            score_quality: None,
            lambda,
            r,
        });
    }
    let GradGEstimates { grads, qualities } = estimate_grad_gs(trajectory, loss, cfg, rng)?;
    for (j, (g, q)) in grads.iter().zip(qualities.iter()).enumerate() {
        per_step[j].grad_g_hat = Some(g.clone());
        per_step[j].score_quality = *q;
    }
    let v_prefix = vt_prefixes(&sigmas, &grads)?
        .into_iter()
        .map(|v| mat::clip_psd(&v, PSD_REPAIR_FLOOR, "V_t^PPI"))
        .collect::<Result<Vec<_>>>()?;
    Ok(PpiVarianceEstimate {
        per_step,
        v_prefix,
        t,
        n: trajectory.steps[0].dataset.len(),
        r,
    })
}
