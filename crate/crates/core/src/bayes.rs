//! Gaussian posterior over the synthetic control weights.
//!
//! With prior `β ~ N(0, α⁻¹I)` and plug-in noise variance `σ̂²`:
//!
//! ```text
//! Σ_D = ((1/σ̂²) M̂⁻(M̂⁻)ᵀ + αI)⁻¹
//! β_D = (1/σ̂²) Σ_D M̂⁻ y₁⁻
//! σ²_D(t) = σ̂² + M̂_{·t}ᵀ Σ_D M̂_{·t}
//! ```
//!
//! The posterior is Gaussian, so its mode (the MAP estimate) equals `β_D`
//! and coincides with ridge regression at `η = ασ̂²`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::learners::{MethodKind, Weights};
use crate::linalg;
use crate::{Error, Result};

/// Floor applied to a zero noise-variance estimate.
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// Prior precision substituted when a cross-validated penalty is zero.
pub const ALPHA_FLOOR: f64 = 1e-8;
const EIGEN_FLOOR: f64 = 1e-12;

/// Zero-mean isotropic prior with precision `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianPrior {
    alpha: f64,
}

impl GaussianPrior {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "prior precision must be positive, got {alpha}"
            )));
        }
        Ok(GaussianPrior { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct Posterior {
    /// `β_D`.
    pub mean: DVector<f64>,
    /// `Σ_D`.
    pub cov: DMatrix<f64>,
    /// Noise variance actually used (after flooring).
    pub sigma2_hat: f64,
    /// Set when `σ̂²` was floored.
    pub sigma2_floored: bool,
    /// Set when `Σ_D` came from the eigenvalue-floored fallback.
    pub used_eigen_fallback: bool,
}

/// Predictive mean and variance at one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Predictive {
    pub mean: f64,
    pub variance: f64,
}

impl Predictive {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn floor_sigma2(sigma2_hat: f64) -> Result<(f64, bool)> {
    if !sigma2_hat.is_finite() || sigma2_hat < 0.0 {
        return Err(Error::NonFinite(format!("noise variance {sigma2_hat}")));
    }
    Ok(if sigma2_hat < SIGMA2_FLOOR {
        (SIGMA2_FLOOR, true)
    } else {
        (sigma2_hat, false)
    })
}

fn check_inputs(m_hat_pre: &DMatrix<f64>, y1_pre: &DVector<f64>) -> Result<()> {
    if m_hat_pre.ncols() != y1_pre.len() {
        return Err(Error::shape(
            format!("{} pre-intervention columns", y1_pre.len()),
            format!("{}x{}", m_hat_pre.nrows(), m_hat_pre.ncols()),
        ));
    }
    if m_hat_pre
        .iter()
        .chain(y1_pre.iter())
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("posterior inputs".into()));
    }
    Ok(())
}

pub fn fit_posterior(
    m_hat_pre: &DMatrix<f64>,
    y1_pre: &DVector<f64>,
    prior: &GaussianPrior,
    sigma2_hat: f64,
) -> Result<Posterior> {
    check_inputs(m_hat_pre, y1_pre)?;
    let (sigma2, floored) = floor_sigma2(sigma2_hat)?;
    let n = m_hat_pre.nrows();
    let precision =
        (m_hat_pre * m_hat_pre.transpose()) / sigma2 + DMatrix::identity(n, n) * prior.alpha;
    let (cov, fallback) = linalg::spd_inverse(&precision, EIGEN_FLOOR);
    let mean = &cov * (m_hat_pre * y1_pre) / sigma2;
    Ok(Posterior {
        mean,
        cov,
        sigma2_hat: sigma2,
        sigma2_floored: floored,
        used_eigen_fallback: fallback,
    })
}

/// Posterior mode, read off the Gaussian posterior.
pub fn map_estimate(
    m_hat_pre: &DMatrix<f64>,
    y1_pre: &DVector<f64>,
    prior: &GaussianPrior,
    sigma2_hat: f64,
) -> Result<Weights> {
    let post = fit_posterior(m_hat_pre, y1_pre, prior, sigma2_hat)?;
    Ok(Weights {
        eta: prior.alpha * post.sigma2_hat,
        beta: post.mean,
        method: MethodKind::Ridge,
        converged: true,
        iterations: 0,
    })
}

pub fn predictive(m_hat_col: &DVector<f64>, post: &Posterior) -> Result<Predictive> {
    if m_hat_col.len() != post.mean.len() {
        return Err(Error::shape(
            format!("column of length {}", post.mean.len()),
            m_hat_col.len().to_string(),
        ));
    }
    let excess = m_hat_col.dot(&(&post.cov * m_hat_col)).max(0.0);
    Ok(Predictive {
        mean: m_hat_col.dot(&post.mean),
        variance: post.sigma2_hat + excess,
    })
}

/// `α = η / σ̂²`. The boolean reports a substituted floor.
pub fn choose_alpha_from_cv(eta_cv: f64, sigma2_hat: f64) -> Result<(GaussianPrior, bool)> {
    if !(eta_cv.is_finite() && eta_cv >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "penalty must be nonnegative, got {eta_cv}"
        )));
    }
    let (sigma2, _) = floor_sigma2(sigma2_hat)?;
    let alpha = eta_cv / sigma2;
    if alpha > 0.0 && alpha.is_finite() {
        Ok((GaussianPrior::new(alpha)?, false))
    } else {
        Ok((GaussianPrior::new(ALPHA_FLOOR)?, true))
    }
}
