//! The performative linear-regression distribution map.
//!
//! Data are generated as `y = alpha'x + mu'theta + nu` with
//! `x ~ N(mu_x, sigma_x)` rejection-truncated to `|x|^2 <= trunc_r2` and
//! `nu ~ N(0, sigma_y2)`. Deploying a parameter `theta` therefore shifts the
//! label distribution through `mu'theta`, and the map is eps-sensitive with
//! `eps = |mu|`. Everything the rest of the crate treats as ground truth
//! (the underlying update, its fixed point, the analytic dG, the smoothness
//! constant) lives here in closed form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat;

/// Give up on rejection sampling after this many consecutive misses.
const MAX_CONSECUTIVE_REJECTIONS: u64 = 1_000_000;

/// Full analytic description of the distribution map `D(theta)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRaw", into = "ModelParamsRaw")]
pub struct ModelParams {
    alpha: DVector<f64>,
    mu: DVector<f64>,
    mu_x: DVector<f64>,
    sigma_x: DMatrix<f64>,
    sigma_y2: f64,
    gamma: f64,
    trunc_r2: f64,
    annot_bias: f64,
    /// Lower Cholesky factor of `sigma_x`, cached for sampling.
    chol_x: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelParamsRaw {
    alpha: Vec<f64>,
    mu: Vec<f64>,
    mu_x: Vec<f64>,
    sigma_x: Vec<Vec<f64>>,
    sigma_y2: f64,
    gamma: f64,
    #[serde(default = "default_trunc_r2")]
    trunc_r2: f64,
    #[serde(default = "default_annot_bias")]
    annot_bias: f64,
}

fn default_trunc_r2() -> f64 {
    20.0
}

fn default_annot_bias() -> f64 {
    -0.2
}

impl TryFrom<ModelParamsRaw> for ModelParams {
    type Error = Error;

    fn try_from(raw: ModelParamsRaw) -> Result<Self> {
        let d = raw.alpha.len();
        if raw.sigma_x.len() != d || raw.sigma_x.iter().any(|row| row.len() != d) {
            return Err(Error::Dimension(format!(
                "sigma_x must be {d}x{d} to match alpha"
            )));
        }
        let flat: Vec<f64> = raw.sigma_x.iter().flatten().copied().collect();
        ModelParams::new(
            DVector::from_vec(raw.alpha),
            DVector::from_vec(raw.mu),
            DVector::from_vec(raw.mu_x),
            DMatrix::from_row_slice(d, d, &flat),
            raw.sigma_y2,
            raw.gamma,
            raw.trunc_r2,
            raw.annot_bias,
        )
    }
}

impl From<ModelParams> for ModelParamsRaw {
    fn from(p: ModelParams) -> Self {
        let d = p.dim();
        ModelParamsRaw {
            alpha: p.alpha.iter().copied().collect(),
            mu: p.mu.iter().copied().collect(),
            mu_x: p.mu_x.iter().copied().collect(),
            sigma_x: (0..d)
                .map(|i| p.sigma_x.row(i).iter().copied().collect())
                .collect(),
            sigma_y2: p.sigma_y2,
            gamma: p.gamma,
            trunc_r2: p.trunc_r2,
            annot_bias: p.annot_bias,
        }
    }
}

impl ModelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha: DVector<f64>,
        mu: DVector<f64>,
        mu_x: DVector<f64>,
        sigma_x: DMatrix<f64>,
        sigma_y2: f64,
        gamma: f64,
        trunc_r2: f64,
        annot_bias: f64,
    ) -> Result<Self> {
        let d = alpha.len();
        if mu.len() != d || mu_x.len() != d || sigma_x.nrows() != d || sigma_x.ncols() != d {
            return Err(Error::Dimension(
                "alpha, mu, mu_x and sigma_x must share dimension d".into(),
            ));
        }
        let asym = (&sigma_x - sigma_x.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::Config(format!(
                "sigma_x must be symmetric (max asymmetry {asym:e})"
            )));
        }
        if mat::min_eigenvalue(&sigma_x) <= 0.0 {
            return Err(Error::Config("sigma_x must be positive definite".into()));
        }
        if sigma_y2 < 0.0 {
            return Err(Error::Config("sigma_y2 must be nonnegative".into()));
        }
        if gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if trunc_r2 <= 0.0 {
            return Err(Error::Config("trunc_r2 must be positive".into()));
        }
        let chol_x = nalgebra::Cholesky::new(sigma_x.clone())
            .ok_or_else(|| Error::Config("sigma_x Cholesky factorization failed".into()))?
            .l();
        Ok(ModelParams {
            alpha,
            mu,
            mu_x,
            sigma_x,
            sigma_y2,
            gamma,
            trunc_r2,
            annot_bias,
            chol_x,
        })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn mu_x(&self) -> &DVector<f64> {
        &self.mu_x
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    pub fn sigma_y2(&self) -> f64 {
        self.sigma_y2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn trunc_r2(&self) -> f64 {
        self.trunc_r2
    }

    pub fn annot_bias(&self) -> f64 {
        self.annot_bias
    }

    /// Sensitivity of the distribution map: `eps = |mu|_2`.
    pub fn sensitivity_epsilon(&self) -> f64 {
        self.mu.norm()
    }

    /// Joint-smoothness constant of the ridge loss over the truncated sample
    /// space and a parameter ball of radius `theta_bound`.
    ///
    /// The label range used for the second term is `|y| <= max|x|*|alpha| +
    /// eps*theta_bound + 6*sigma_y`; both inner expressions are monotone in
    /// the radii, so they are evaluated at the extreme points.
    pub fn smoothness_beta(&self, theta_bound: f64) -> f64 {
        assert!(theta_bound >= 0.0, "theta_bound must be nonnegative");
        let xn = self.trunc_r2.sqrt();
        let y_max = xn * self.alpha.norm()
            + self.sensitivity_epsilon() * theta_bound
            + 6.0 * self.sigma_y2.sqrt();
        let first = self.trunc_r2 + self.gamma;
        let second = ((2.0 * xn * theta_bound + y_max).powi(2) + self.trunc_r2).sqrt();
        first.max(second)
    }

    /// Contraction factor `eps * beta / gamma` of the underlying update map.
    /// Experiments that rely on convergence to the stable point require this
    /// to be below one; violating it is a configuration error.
    pub fn contraction_rate(&self, theta_bound: f64) -> Result<f64> {
        let rate = self.sensitivity_epsilon() * self.smoothness_beta(theta_bound) / self.gamma;
        if rate >= 1.0 {
            return Err(Error::Config(format!(
                "eps*beta/gamma = {rate} >= 1: repeated minimization is not contractive for this model"
            )));
        }
        Ok(rate)
    }

    fn draw_x<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let d = self.dim();
        let mut rejections = 0u64;
        loop {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &self.mu_x + &self.chol_x * z;
            if x.norm_squared() <= self.trunc_r2 {
                return Ok(x);
            }
            rejections += 1;
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::RejectionFailure(rejections));
            }
        }
    }

    /// Draw `n` labeled samples from `D(theta)`.
    pub fn sample_labeled<R: Rng + ?Sized>(
        &self,
        theta: &DVector<f64>,
        n: usize,
        rng: &mut R,
    ) -> Result<Dataset> {
        assert!(n >= 1, "need at least one sample");
        assert_eq!(theta.len(), self.dim(), "theta dimension mismatch");
        let shift = self.mu.dot(theta);
        let sd = self.sigma_y2.sqrt();
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.draw_x(rng)?;
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
            let y = self.alpha.dot(&x) + shift + noise;
            samples.push(LabeledSample { x, y });
        }
        Dataset::new(samples, theta.clone())
    }

    /// Draw `n` feature vectors from the marginal of `D(theta)`. The marginal
    /// does not depend on `theta` in this model; the argument exists so that
    /// callers can keep provenance.
    pub fn sample_unlabeled<R: Rng + ?Sized>(
        &self,
        _theta: &DVector<f64>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        assert!(n >= 1, "need at least one sample");
        (0..n).map(|_| self.draw_x(rng)).collect()
    }

    /// Machine annotation of a feature vector under policy `theta`:
    /// `alpha'x + mu'theta + nu` with `nu ~ N(annot_bias, sigma_y2)`.
    pub fn annotate<R: Rng + ?Sized>(
        &self,
        theta: &DVector<f64>,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> f64 {
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * self.sigma_y2.sqrt();
        self.alpha.dot(x) + self.mu.dot(theta) + self.annot_bias + noise
    }

    /// One step of the underlying trajectory:
    /// `G(theta) = (sigma_x + mu_x mu_x' + gamma I)^{-1} (mu_x mu' theta + (sigma_x + mu_x mu_x') alpha)`.
    pub fn underlying_step(&self, theta: &DVector<f64>) -> DVector<f64> {
        let m = &self.sigma_x + &self.mu_x * self.mu_x.transpose();
        let a = &m + DMatrix::identity(self.dim(), self.dim()) * self.gamma;
        let rhs = &self.mu_x * self.mu.dot(theta) + &m * &self.alpha;
        nalgebra::Cholesky::new(a)
            .expect("sigma_x + mu_x mu_x' + gamma I is positive definite")
            .solve(&rhs)
    }

    /// The underlying trajectory `theta_0, theta_1, ..., theta_t`.
    pub fn underlying_trajectory(&self, theta0: &DVector<f64>, t: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(t + 1);
        out.push(theta0.clone());
        for _ in 0..t {
            let next = self.underlying_step(out.last().unwrap());
            out.push(next);
        }
        out
    }

    /// The unique fixed point of [`Self::underlying_step`].
    pub fn performative_stable(&self) -> Result<DVector<f64>> {
        let d = self.dim();
        let m = &self.sigma_x + &self.mu_x * self.mu_x.transpose();
        let sys = &m - &self.mu_x * self.mu.transpose() + DMatrix::identity(d, d) * self.gamma;
        let rhs = &m * &self.alpha;
        let theta = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("stable-point system is singular".into()))?;
        let resid = (self.underlying_step(&theta) - &theta).norm();
        if resid > 1e-10 {
            return Err(Error::Singular(format!(
                "stable-point fixed-point residual {resid:e} exceeds 1e-10"
            )));
        }
        Ok(theta)
    }

    /// Analytic Jacobian of the underlying update map, constant in `theta`
    /// for this model: `(sigma_x + mu_x mu_x' + gamma I)^{-1} mu_x mu'`.
    pub fn grad_g_analytic(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = &self.sigma_x + &self.mu_x * self.mu_x.transpose();
        let a = &m + DMatrix::identity(d, d) * self.gamma;
        let chol = nalgebra::Cholesky::new(a).expect("system matrix is positive definite");
        chol.solve(&(&self.mu_x * self.mu.transpose()))
    }

    /// Closed-form score of the joint density in `theta`:
    /// `mu (y - alpha'x - mu'theta) / sigma_y2`.
    pub fn log_score_analytic(
        &self,
        z: &LabeledSample,
        theta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if self.sigma_y2 == 0.0 {
            return Err(Error::Degenerate(
                "score undefined: sigma_y2 = 0 collapses the label density".into(),
            ));
        }
        let resid = z.y - self.alpha.dot(&z.x) - self.mu.dot(theta);
        Ok(&self.mu * (resid / self.sigma_y2))
    }
}

/// A single observation `z = (x, y)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSample {
    #[serde(with = "vec_serde")]
    pub x: DVector<f64>,
    pub y: f64,
}

/// An ordered sample together with the parameter the data was drawn under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    #[serde(with = "vec_serde")]
    theta_source: DVector<f64>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, theta_source: DVector<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("dataset must be nonempty".into()));
        }
        let d = theta_source.len();
        if samples.iter().any(|s| s.x.len() != d) {
            return Err(Error::Dimension(
                "all samples must share the parameter dimension".into(),
            ));
        }
        Ok(Dataset {
            samples,
            theta_source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.theta_source.len()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn theta_source(&self) -> &DVector<f64> {
        &self.theta_source
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSample> {
        self.samples.iter()
    }
}

/// Serialize nalgebra vectors as plain JSON arrays.
pub(crate) mod vec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serialize nalgebra matrices as row-major nested JSON arrays.
pub(crate) mod mat_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    pub fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, E> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(E::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?)
    }
}

/// Row-major serialization for optional matrices.
pub(crate) mod opt_mat_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(super::mat_serde::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(super::mat_serde::from_rows)
            .transpose()
    }
}
