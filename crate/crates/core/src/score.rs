//! Gradient-free score matching with policy perturbation.
//!
//! The joint density `p(z, theta)` is approximated by the linear-Gaussian
//! family `log M(z, theta; psi) = const - (y - a'x - c'theta)^2 / (2 s2)`
//! with `psi = (a, c, s2)`, whose policy score is
//! `s(z, theta; psi) = c (y - a'x - c'theta) / s2`. The family contains the
//! true score of the linear model (`a = alpha, c = mu, s2 = sigma_y2`).
//!
//! The matching objective cannot differentiate the data distribution in
//! `theta` directly, so the derivative term is replaced by a difference
//! quotient across policies perturbed one coordinate at a time; fitting then
//! needs nothing beyond sample means over the base and perturbed pools.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::LossModel;
use crate::inference;
use crate::mat;
use crate::model::{vec_serde, Dataset, LabeledSample, ModelParams};

/// Variance floor for the fitted score family.
pub const S2_MIN: f64 = 1e-6;

/// Parameters of the linear-Gaussian score family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelParams {
    #[serde(with = "vec_serde")]
    pub a: DVector<f64>,
    #[serde(with = "vec_serde")]
    pub c: DVector<f64>,
    pub s2: f64,
}

impl ScoreModelParams {
    pub fn new(a: DVector<f64>, c: DVector<f64>, s2: f64) -> Self {
        assert_eq!(a.len(), c.len(), "a and c must share dimension");
        ScoreModelParams {
            a,
            c,
            s2: s2.max(S2_MIN),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    fn residual(&self, z: &LabeledSample, theta: &DVector<f64>) -> f64 {
        z.y - self.a.dot(&z.x) - self.c.dot(theta)
    }
}

/// Policy score of the model family: `c (y - a'x - c'theta) / s2`.
pub fn score_eval(psi: &ScoreModelParams, z: &LabeledSample, theta: &DVector<f64>) -> DVector<f64> {
    &psi.c * (psi.residual(z, theta) / psi.s2)
}

/// Second partial `d^2 log M / d theta_i^2 = -c_i^2 / s2`, constant in `z`
/// and `theta` for this family.
pub fn score_partial2(psi: &ScoreModelParams, i: usize) -> f64 {
    -psi.c[i] * psi.c[i] / psi.s2
}

/// Base data at `theta` plus one dataset per coordinate-perturbed policy
/// `theta + eta e_i`.
#[derive(Debug, Clone)]
pub struct PerturbationBundle {
    base: Dataset,
    perturbed: Vec<Dataset>,
    eta: f64,
    theta: DVector<f64>,
}

impl PerturbationBundle {
    pub fn new(
        base: Dataset,
        perturbed: Vec<Dataset>,
        eta: f64,
        theta: DVector<f64>,
    ) -> Result<Self> {
        if eta <= 0.0 {
            return Err(Error::Config(
                "perturbation size eta must be positive".into(),
            ));
        }
        let d = theta.len();
        if perturbed.len() != d {
            return Err(Error::Dimension(format!(
                "need exactly d = {d} perturbed datasets, got {}",
                perturbed.len()
            )));
        }
        for (i, dataset) in perturbed.iter().enumerate() {
            let mut expected = theta.clone();
            expected[i] += eta;
            if (dataset.theta_source() - &expected).norm() > 1e-9 {
                return Err(Error::Config(format!(
                    "perturbed dataset {i} was not drawn at theta + eta e_{i}"
                )));
            }
        }
        Ok(PerturbationBundle {
            base,
            perturbed,
            eta,
            theta,
        })
    }

    /// Draw a fresh bundle: `n` base samples at `theta` and `k` samples at
    /// each perturbed policy.
    pub fn collect_perturbed<R: Rng + ?Sized>(
        params: &ModelParams,
        theta: &DVector<f64>,
        eta: f64,
        n: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if eta <= 0.0 {
            return Err(Error::Config(
                "perturbation size eta must be positive".into(),
            ));
        }
        if k < 1 {
            return Err(Error::Config("need k >= 1 perturbed samples".into()));
        }
        let base = params.sample_labeled(theta, n, rng)?;
        Self::with_base(base, params, eta, k, rng)
    }

    /// Reuse an existing dataset (drawn at its `theta_source`) as the base
    /// and draw only the perturbed pools.
    pub fn with_base<R: Rng + ?Sized>(
        base: Dataset,
        params: &ModelParams,
        eta: f64,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if eta <= 0.0 {
            return Err(Error::Config(
                "perturbation size eta must be positive".into(),
            ));
        }
        if k < 1 {
            return Err(Error::Config("need k >= 1 perturbed samples".into()));
        }
        let theta = base.theta_source().clone();
        let d = theta.len();
        let mut perturbed = Vec::with_capacity(d);
        for i in 0..d {
            let mut shifted = theta.clone();
            shifted[i] += eta;
            perturbed.push(params.sample_labeled(&shifted, k, rng)?);
        }
        Self::new(base, perturbed, eta, theta)
    }

    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn perturbed(&self) -> &[Dataset] {
        &self.perturbed
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Sample means cached once per bundle; everything the objective needs.
struct BundleMoments {
    x_base: DVector<f64>,
    y_base: f64,
    x_pert: Vec<DVector<f64>>,
    y_pert: Vec<f64>,
    theta_pert: Vec<DVector<f64>>,
}

impl BundleMoments {
    fn build(bundle: &PerturbationBundle) -> Self {
        let d = bundle.dim();
        let x_base = mat::mean_vector(bundle.base.iter(), d, |z| z.x.clone());
        let y_base = bundle.base.iter().map(|z| z.y).sum::<f64>() / bundle.base.len() as f64;
        let mut x_pert = Vec::with_capacity(d);
        let mut y_pert = Vec::with_capacity(d);
        let mut theta_pert = Vec::with_capacity(d);
        for (i, data) in bundle.perturbed.iter().enumerate() {
            x_pert.push(mat::mean_vector(data.iter(), d, |z| z.x.clone()));
            y_pert.push(data.iter().map(|z| z.y).sum::<f64>() / data.len() as f64);
            let mut shifted = bundle.theta.clone();
            shifted[i] += bundle.eta;
            theta_pert.push(shifted);
        }
        BundleMoments {
            x_base,
            y_base,
            x_pert,
            y_pert,
            theta_pert,
        }
    }

    /// Difference quotients `D_i = (mean_pert_i s_i-residual - mean_base
    /// s_i-residual) / eta`, without the common `c_i / s2` factor.
    fn quotients(&self, psi: &ScoreModelParams, theta: &DVector<f64>, eta: f64) -> DVector<f64> {
        let d = theta.len();
        let r_base = self.y_base - psi.a.dot(&self.x_base) - psi.c.dot(theta);
        DVector::from_fn(d, |i, _| {
            let r_i = self.y_pert[i] - psi.a.dot(&self.x_pert[i]) - psi.c.dot(&self.theta_pert[i]);
            (r_i - r_base) / eta
        })
    }

    fn r_base(&self, psi: &ScoreModelParams, theta: &DVector<f64>) -> f64 {
        self.y_base - psi.a.dot(&self.x_base) - psi.c.dot(theta)
    }
}

fn j_hat_cached(
    psi: &ScoreModelParams,
    bundle: &PerturbationBundle,
    moments: &BundleMoments,
) -> f64 {
    let theta = &bundle.theta;
    let s2 = psi.s2;
    let cc = psi.c.norm_squared();
    let q0 = bundle
        .base
        .iter()
        .map(|z| {
            let r = psi.residual(z, theta);
            r * r
        })
        .sum::<f64>()
        / bundle.base.len() as f64;
    let quot = moments.quotients(psi, theta, bundle.eta);
    cc / (s2 * s2) * q0 - 2.0 * cc / s2 - 2.0 / s2 * psi.c.dot(&quot)
}

/// Empirical score-matching objective, up to the psi-free term
/// `E |grad log p|^2` (a constant dropped from training):
///
/// `mean_base |s|^2 + 2 sum_i mean_base d s_i / d theta_i
///  - 2 sum_i (1/eta) (mean_pert_i s_i(theta + eta e_i) - mean_base s_i(theta))`.
pub fn j_hat(psi: &ScoreModelParams, bundle: &PerturbationBundle) -> f64 {
    let moments = BundleMoments::build(bundle);
    j_hat_cached(psi, bundle, &moments)
}

/// Training-quality metric: [`j_hat`] plus the sample mean of
/// `|grad log p|^2` from the analytic score, available in simulation. At the
/// population optimum this tends to zero.
pub fn quality_metric(
    psi: &ScoreModelParams,
    bundle: &PerturbationBundle,
    model: &ModelParams,
) -> Result<f64> {
    let theta = &bundle.theta;
    let mut acc = 0.0;
    for z in bundle.base.iter() {
        acc += model.log_score_analytic(z, theta)?.norm_squared();
    }
    Ok(j_hat(psi, bundle) + acc / bundle.base.len() as f64)
}

/// Default fit initialization: `a` from an intercepted least-squares fit of
/// `y` on `x` over the base data, `c = 0`, `s2` the residual variance.
pub fn default_init(bundle: &PerturbationBundle) -> ScoreModelParams {
    let d = bundle.dim();
    let n = bundle.base.len() as f64;
    let mut xtx = DMatrix::zeros(d + 1, d + 1);
    let mut xty = DVector::zeros(d + 1);
    let mut ext = DVector::zeros(d + 1);
    for z in bundle.base.iter() {
        for i in 0..d {
            ext[i] = z.x[i];
        }
        ext[d] = 1.0;
        xtx.ger(1.0, &ext, &ext, 1.0);
        xty.axpy(z.y, &ext, 1.0);
    }
    let (a, s2) = match nalgebra::Cholesky::new(mat::symmetrize(&xtx)) {
        Some(chol) => {
            let coef = chol.solve(&xty);
            let a = DVector::from_fn(d, |i, _| coef[i]);
            let s2 = bundle
                .base
                .iter()
                .map(|z| {
                    let r = z.y - a.dot(&z.x) - coef[d];
                    r * r
                })
                .sum::<f64>()
                / n;
            (a, s2)
        }
        None => {
            let y_mean = bundle.base.iter().map(|z| z.y).sum::<f64>() / n;
            let var = bundle
                .base
                .iter()
                .map(|z| (z.y - y_mean).powi(2))
                .sum::<f64>()
                / n;
            (DVector::zeros(d), var)
        }
    };
    ScoreModelParams::new(a, DVector::zeros(d), s2.max(S2_MIN))
}

/// Full-batch gradient descent on [`j_hat`] in `(a, c, log s2)` with analytic
/// gradients. Returns the best iterate encountered, so the objective at the
/// result never exceeds the objective at `init`; `s2` stays floored at
/// [`S2_MIN`].
pub fn fit_score_model(
    bundle: &PerturbationBundle,
    init: &ScoreModelParams,
    lr: f64,
    iters: usize,
) -> Result<ScoreModelParams> {
    assert!(lr > 0.0, "learning rate must be positive");
    let d = bundle.dim();
    let theta = &bundle.theta;
    let eta = bundle.eta;
    let n = bundle.base.len() as f64;
    let moments = BundleMoments::build(bundle);

    let mut a = init.a.clone();
    let mut c = init.c.clone();
    let mut u = init.s2.max(S2_MIN).ln();

    let mut best = ScoreModelParams::new(a.clone(), c.clone(), u.exp());
    let mut best_val = j_hat_cached(&best, bundle, &moments);
    if !best_val.is_finite() {
        return Err(Error::NonFinite("score objective at init".into()));
    }

    for _ in 0..iters {
        let s2 = u.exp();
        let psi = ScoreModelParams {
            a: a.clone(),
            c: c.clone(),
            s2,
        };
        // Base-pool means of the squared residual and residual * x.
        let mut q0 = 0.0;
        let mut m_rx = DVector::zeros(d);
        for z in bundle.base.iter() {
            let r = psi.residual(z, theta);
            q0 += r * r;
            m_rx.axpy(r, &z.x, 1.0);
        }
        q0 /= n;
        m_rx /= n;
        let r0 = moments.r_base(&psi, theta);
        let quot = moments.quotients(&psi, theta, eta);
        let cc = c.norm_squared();

        let mut grad_a = &m_rx * (-2.0 * cc / (s2 * s2));
        for i in 0..d {
            grad_a += (&moments.x_pert[i] - &moments.x_base) * (2.0 * c[i] / (eta * s2));
        }
        let grad_c = DVector::from_fn(d, |j, _| {
            2.0 * c[j] / (s2 * s2) * q0
                - 2.0 * cc * theta[j] / (s2 * s2) * r0
                - 2.0 * c[j] / s2
                - 2.0 / s2 * quot[j]
        });
        let grad_u = -2.0 * cc / (s2 * s2) * q0 + 2.0 * cc / s2 + 2.0 / s2 * c.dot(&quot);

        a -= grad_a * lr;
        c -= grad_c * lr;
        u -= grad_u * lr;
        u = u.max(S2_MIN.ln());

        let candidate = ScoreModelParams {
            a: a.clone(),
            c: c.clone(),
            s2: u.exp(),
        };
        let val = j_hat_cached(&candidate, bundle, &moments);
        if !val.is_finite() {
            return Err(Error::NonFinite(
                "score objective diverged (eta too small relative to k?)".into(),
            ));
        }
        if val < best_val {
            best_val = val;
            best = candidate;
        }
    }
    Ok(best)
}

/// Data-driven estimate of the Jacobian of the underlying update map at
/// `theta_k = data_k.theta_source()`:
///
/// `g_hat = -H^{-1} mean_j grad_loss(z_j; theta_next) s(z_j, theta_k; psi)'`
///
/// with `H` the empirical Hessian of `loss` over `data_k` at `theta_next`.
pub fn grad_g_estimate<L: LossModel + ?Sized>(
    loss: &L,
    data_k: &Dataset,
    theta_next: &DVector<f64>,
    psi_hat: &ScoreModelParams,
) -> Result<DMatrix<f64>> {
    let d = data_k.dim();
    let h = inference::hessian_hat(loss, data_k, theta_next);
    let chol = mat::cholesky(&h, "empirical Hessian in grad_g_estimate")?;
    let theta_k = data_k.theta_source();
    // For this score family s(z) = c * resid(z) / s2, so the mean of
    // grad_loss * s' is rank one: (mean resid-weighted gradient) c'.
    let mut weighted = DVector::zeros(d);
    for z in data_k.iter() {
        let w = psi_hat.residual(z, theta_k) / psi_hat.s2;
        weighted.axpy(w, &loss.grad(z, theta_next), 1.0);
    }
    weighted /= data_k.len() as f64;
    let mean = weighted * psi_hat.c.transpose();
    Ok(-chol.solve(&mean))
}
