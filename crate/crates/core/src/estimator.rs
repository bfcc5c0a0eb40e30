//! Empirical risk minimization (classical and prediction-powered) and the
//! trajectory runners that realize the iterate sequence in practice.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, Scalarization};
use crate::mat;
use crate::model::{vec_serde, Dataset, LabeledSample, ModelParams};

/// Default gradient-norm tolerance for the solvers.
pub const DEFAULT_TOL: f64 = 1e-9;

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_NEWTON_ITERS: usize = 200;
const MIN_HESSIAN_EIG: f64 = 1e-8;

/// Per-sample loss with gradient and Hessian in `theta`.
pub trait LossModel {
    fn value(&self, z: &LabeledSample, theta: &DVector<f64>) -> f64;
    fn grad(&self, z: &LabeledSample, theta: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, z: &LabeledSample, theta: &DVector<f64>) -> DMatrix<f64>;

    /// Closed-form empirical minimizer, when the loss admits one.
    fn closed_form_erm(&self, _data: &Dataset) -> Option<DVector<f64>> {
        None
    }

    /// Closed-form minimizer of the lambda-weighted PPI objective, when the
    /// loss admits one.
    fn closed_form_ppi(
        &self,
        _labeled: &Dataset,
        _labeled_pseudo: &Dataset,
        _unlabeled_pseudo: &Dataset,
        _lambda: f64,
    ) -> Option<Result<DVector<f64>>> {
        None
    }
}

/// Ridge squared loss `1/2 (y - theta'x)^2 + gamma/2 |theta|^2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RidgeSquaredLoss {
    pub gamma: f64,
}

impl RidgeSquaredLoss {
    pub fn new(gamma: f64) -> Self {
        assert!(gamma > 0.0, "ridge strength must be positive");
        RidgeSquaredLoss { gamma }
    }

    /// Sample moments `mean(x x')` and `mean(x y)`.
    fn moments(&self, data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
        let d = data.dim();
        let mut xx = DMatrix::zeros(d, d);
        let mut xy = DVector::zeros(d);
        for z in data.iter() {
            xx.ger(1.0, &z.x, &z.x, 1.0);
            xy.axpy(z.y, &z.x, 1.0);
        }
        let n = data.len() as f64;
        xx /= n;
        xy /= n;
        (mat::symmetrize(&xx), xy)
    }
}

impl LossModel for RidgeSquaredLoss {
    fn value(&self, z: &LabeledSample, theta: &DVector<f64>) -> f64 {
        let r = z.y - theta.dot(&z.x);
        0.5 * r * r + 0.5 * self.gamma * theta.norm_squared()
    }

    fn grad(&self, z: &LabeledSample, theta: &DVector<f64>) -> DVector<f64> {
        &z.x * (theta.dot(&z.x) - z.y) + theta * self.gamma
    }

    fn hessian(&self, z: &LabeledSample, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = theta.len();
        &z.x * z.x.transpose() + DMatrix::identity(d, d) * self.gamma
    }

    fn closed_form_erm(&self, data: &Dataset) -> Option<DVector<f64>> {
        let (xx, xy) = self.moments(data);
        let d = data.dim();
        let sys = xx + DMatrix::identity(d, d) * self.gamma;
        nalgebra::Cholesky::new(sys).map(|chol| chol.solve(&xy))
    }

    fn closed_form_ppi(
        &self,
        labeled: &Dataset,
        labeled_pseudo: &Dataset,
        unlabeled_pseudo: &Dataset,
        lambda: f64,
    ) -> Option<Result<DVector<f64>>> {
        let d = labeled.dim();
        let (xx_l, xy) = self.moments(labeled);
        let (_, xf) = self.moments(labeled_pseudo);
        let (xx_u, xf_u) = self.moments(unlabeled_pseudo);
        let blended =
            &xx_u * lambda + &xx_l * (1.0 - lambda) + DMatrix::identity(d, d) * self.gamma;
        if mat::min_eigenvalue(&blended) < MIN_HESSIAN_EIG {
            return Some(Err(Error::InvalidLambda(lambda)));
        }
        let rhs = xy + (xf_u - xf) * lambda;
        Some(
            nalgebra::Cholesky::new(blended)
                .map(|chol| chol.solve(&rhs))
                .ok_or(Error::InvalidLambda(lambda)),
        )
    }
}

/// Weighted combination of empirical means of a per-sample loss over several
/// datasets; the objective the damped Newton solver works on.
pub(crate) struct WeightedEmpirical<'a, L: LossModel + ?Sized> {
    pub loss: &'a L,
    pub parts: Vec<(f64, &'a Dataset)>,
}

impl<L: LossModel + ?Sized> WeightedEmpirical<'_, L> {
    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        self.parts
            .iter()
            .map(|(w, data)| {
                let mean: f64 =
                    data.iter().map(|z| self.loss.value(z, theta)).sum::<f64>() / data.len() as f64;
                w * mean
            })
            .sum()
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        let d = theta.len();
        let mut acc = DVector::zeros(d);
        for (w, data) in &self.parts {
            let mut part = DVector::zeros(d);
            for z in data.iter() {
                part += self.loss.grad(z, theta);
            }
            acc += part * (*w / data.len() as f64);
        }
        acc
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = theta.len();
        let mut acc = DMatrix::zeros(d, d);
        for (w, data) in &self.parts {
            let mut part = DMatrix::zeros(d, d);
            for z in data.iter() {
                part += self.loss.hessian(z, theta);
            }
            acc += part * (*w / data.len() as f64);
        }
        mat::symmetrize(&acc)
    }
}

/// Damped Newton with Armijo backtracking until the gradient norm drops
/// below `tol`.
pub(crate) fn newton_minimize<L: LossModel + ?Sized>(
    obj: &WeightedEmpirical<'_, L>,
    init: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut theta = init.clone();
    let mut grad = obj.grad(&theta);
    for _ in 0..MAX_NEWTON_ITERS {
        if grad.norm() <= tol {
            return Ok(theta);
        }
        let hess = obj.hessian(&theta);
        let min_eig = mat::min_eigenvalue(&hess);
        if min_eig < MIN_HESSIAN_EIG {
            return Err(Error::HessianNotSpd(format!(
                "min eigenvalue {min_eig:e} in Newton step"
            )));
        }
        let chol = nalgebra::Cholesky::new(hess)
            .ok_or_else(|| Error::HessianNotSpd("factorization failed in Newton step".into()))?;
        let direction = -chol.solve(&grad);
        let slope = grad.dot(&direction);
        let value = obj.value(&theta);
        let mut step = 1.0;
        let mut candidate = &theta + &direction;
        while obj.value(&candidate) > value + ARMIJO_C * step * slope && step >= 1e-14 {
            step *= BACKTRACK;
            candidate = &theta + &direction * step;
        }
        theta = candidate;
        grad = obj.grad(&theta);
    }
    if grad.norm() <= tol {
        Ok(theta)
    } else {
        Err(Error::NoConvergence {
            iters: MAX_NEWTON_ITERS,
            tol,
            grad_norm: grad.norm(),
        })
    }
}

/// Empirical risk minimizer over one dataset. Uses the loss's closed form
/// when it has one, falling back to damped Newton; the returned point always
/// satisfies the mean-gradient tolerance.
pub fn erm_solve<L: LossModel + ?Sized>(
    loss: &L,
    data: &Dataset,
    init: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    assert!(tol > 0.0, "tolerance must be positive");
    let obj = WeightedEmpirical {
        loss,
        parts: vec![(1.0, data)],
    };
    if let Some(theta) = loss.closed_form_erm(data) {
        if obj.grad(&theta).norm() <= tol {
            return Ok(theta);
        }
        return newton_minimize(&obj, &theta, tol);
    }
    newton_minimize(&obj, init, tol)
}

/// Minimizer of the lambda-weighted prediction-powered objective
/// `lambda mean_u l(x^u, f(x^u); theta) + mean_l [l(x, y; theta) - lambda l(x, f(x); theta)]`.
///
/// `labeled_pseudo` must reuse the labeled x's in the same order.
pub fn ppi_solve<L: LossModel + ?Sized>(
    loss: &L,
    labeled: &Dataset,
    labeled_pseudo: &Dataset,
    unlabeled_pseudo: &Dataset,
    lambda: f64,
    init: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    assert!(tol > 0.0, "tolerance must be positive");
    if labeled.len() != labeled_pseudo.len()
        || labeled
            .iter()
            .zip(labeled_pseudo.iter())
            .any(|(a, b)| a.x != b.x)
    {
        return Err(Error::Config(
            "labeled_pseudo must pair the labeled features in order".into(),
        ));
    }
    let remap = |e: Error| match e {
        Error::HessianNotSpd(_) => Error::InvalidLambda(lambda),
        other => other,
    };
    let obj = WeightedEmpirical {
        loss,
        parts: vec![
            (lambda, unlabeled_pseudo),
            (1.0, labeled),
            (-lambda, labeled_pseudo),
        ],
    };
    if let Some(solved) = loss.closed_form_ppi(labeled, labeled_pseudo, unlabeled_pseudo, lambda) {
        let theta = solved?;
        if obj.grad(&theta).norm() <= tol {
            return Ok(theta);
        }
        return newton_minimize(&obj, &theta, tol).map_err(remap);
    }
    newton_minimize(&obj, init, tol).map_err(remap)
}

/// How the PPI weight is chosen at each step of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaPolicy {
    /// No pseudo data: degenerates to classical repeated minimization.
    Zero,
    Fixed(f64),
    /// Greedy per-step selection via the two-pass surrogate procedure,
    /// minimizing the trace of the current step's covariance block.
    Greedy,
}

impl LambdaPolicy {
    pub fn label(&self) -> String {
        match self {
            LambdaPolicy::Zero => "zero".to_string(),
            LambdaPolicy::Fixed(v) => format!("fixed({v})"),
            LambdaPolicy::Greedy => "greedy".to_string(),
        }
    }
}

/// One realized step: the iterate, the data it was fit on, and (for
/// prediction-powered steps) the pseudo-labeled pools and the weight used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    #[serde(with = "vec_serde")]
    pub theta_hat: DVector<f64>,
    pub dataset: Dataset,
    pub pseudo_labeled: Option<Dataset>,
    pub pseudo_unlabeled: Option<Dataset>,
    pub lambda: Option<f64>,
}

/// The realized iterate sequence together with everything needed to
/// estimate its asymptotic covariance afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(with = "vec_serde")]
    pub theta0: DVector<f64>,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Iterate at 1-based step `t` (step 0 is `theta0`).
    pub fn theta_at(&self, t: usize) -> &DVector<f64> {
        if t == 0 {
            &self.theta0
        } else {
            &self.steps[t - 1].theta_hat
        }
    }

    /// Every step's data must have been drawn under the previous iterate.
    pub fn validate_chaining(&self) -> Result<()> {
        let mut prev = &self.theta0;
        for (i, step) in self.steps.iter().enumerate() {
            if step.dataset.theta_source() != prev {
                return Err(Error::Config(format!(
                    "step {} dataset was not drawn under the previous iterate",
                    i + 1
                )));
            }
            prev = &step.theta_hat;
        }
        Ok(())
    }
}

/// Classical repeated empirical risk minimization: at each step draw `n`
/// samples under the previous iterate and minimize.
pub fn rrm_trajectory<L: LossModel + ?Sized, R: Rng + ?Sized>(
    params: &ModelParams,
    loss: &L,
    theta0: &DVector<f64>,
    t_steps: usize,
    n: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    assert!(t_steps >= 1, "need at least one step");
    assert!(n > params.dim(), "need n >= d + 1 samples per step");
    let mut steps = Vec::with_capacity(t_steps);
    let mut prev = theta0.clone();
    for _ in 0..t_steps {
        let dataset = params.sample_labeled(&prev, n, rng)?;
        let theta_hat = erm_solve(loss, &dataset, &prev, DEFAULT_TOL)?;
        prev = theta_hat.clone();
        steps.push(TrajectoryStep {
            theta_hat,
            dataset,
            pseudo_labeled: None,
            pseudo_unlabeled: None,
            lambda: None,
        });
    }
    Ok(Trajectory {
        theta0: theta0.clone(),
        steps,
    })
}

/// Prediction-powered repeated minimization. At each step: draw `n` labeled
/// samples and `n_unlabeled` features under the previous iterate, annotate
/// both pools, pick the weight per `policy`, and minimize the blended
/// objective.
///
/// With [`LambdaPolicy::Zero`] no pseudo data is drawn at all, so the run is
/// stream-for-stream identical to [`rrm_trajectory`] under the same seed.
#[allow(clippy::too_many_arguments)]
pub fn ppi_trajectory<L: LossModel + ?Sized, R: Rng + ?Sized>(
    params: &ModelParams,
    loss: &L,
    theta0: &DVector<f64>,
    t_steps: usize,
    n: usize,
    n_unlabeled: usize,
    policy: LambdaPolicy,
    rng: &mut R,
) -> Result<Trajectory> {
    assert!(t_steps >= 1, "need at least one step");
    assert!(n > params.dim(), "need n >= d + 1 samples per step");
    assert!(n_unlabeled >= 1, "need at least one unlabeled sample");
    let mut steps = Vec::with_capacity(t_steps);
    let mut prev = theta0.clone();
    for _ in 0..t_steps {
        let labeled = params.sample_labeled(&prev, n, rng)?;
        if matches!(policy, LambdaPolicy::Zero) {
            let theta_hat = erm_solve(loss, &labeled, &prev, DEFAULT_TOL)?;
            prev = theta_hat.clone();
            steps.push(TrajectoryStep {
                theta_hat,
                dataset: labeled,
                pseudo_labeled: None,
                pseudo_unlabeled: None,
                lambda: Some(0.0),
            });
            continue;
        }

        let xs_u = params.sample_unlabeled(&prev, n_unlabeled, rng)?;
        let pseudo_labeled = Dataset::new(
            labeled
                .iter()
                .map(|z| LabeledSample {
                    x: z.x.clone(),
                    y: params.annotate(&prev, &z.x, rng),
                })
                .collect(),
            prev.clone(),
        )?;
        let pseudo_unlabeled = Dataset::new(
            xs_u.into_iter()
                .map(|x| {
                    let y = params.annotate(&prev, &x, rng);
                    LabeledSample { x, y }
                })
                .collect(),
            prev.clone(),
        )?;

        let lambda = match policy {
            LambdaPolicy::Zero => unreachable!(),
            LambdaPolicy::Fixed(v) => v,
            LambdaPolicy::Greedy => {
                // Surrogate pass at lambda = 0 gives a consistent temporary
                // estimate; the covariance blocks are evaluated there.
                let surrogate = ppi_solve(
                    loss,
                    &labeled,
                    &pseudo_labeled,
                    &pseudo_unlabeled,
                    0.0,
                    &prev,
                    DEFAULT_TOL,
                )?;
                let blocks = inference::ppi_blocks(
                    loss,
                    &labeled,
                    Some(&pseudo_labeled),
                    Some(&pseudo_unlabeled),
                    &surrogate,
                )?;
                let r = n as f64 / n_unlabeled as f64;
                inference::select_lambda(
                    &blocks.h_hat,
                    &blocks.c_gg,
                    &blocks.c_ff,
                    &blocks.c_gf,
                    &blocks.cu_ff,
                    r,
                    Scalarization::Trace,
                )?
            }
        };
        let theta_hat = ppi_solve(
            loss,
            &labeled,
            &pseudo_labeled,
            &pseudo_unlabeled,
            lambda,
            &prev,
            DEFAULT_TOL,
        )?;
        prev = theta_hat.clone();
        steps.push(TrajectoryStep {
            theta_hat,
            dataset: labeled,
            pseudo_labeled: Some(pseudo_labeled),
            pseudo_unlabeled: Some(pseudo_unlabeled),
            lambda: Some(lambda),
        });
    }
    Ok(Trajectory {
        theta0: theta0.clone(),
        steps,
    })
}
