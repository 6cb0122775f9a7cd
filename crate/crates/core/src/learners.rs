//! Learning the synthetic control weights from the de-noised pre-period.
//!
//! All learners minimize `‖y₁⁻ − (M̂⁻)ᵀ v‖² + η · penalty(v)` with no
//! intercept. The LASSO objective is the unscaled `‖·‖² + η‖v‖₁`; the
//! common `½‖·‖² + λ‖v‖₁` form corresponds to `λ = η / 2`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{DonorSvd, ThresholdRule};
use crate::linalg::{self, pinv_solve};
use crate::panel::PanelMatrix;
use crate::{Error, Result};

/// Relative singular value cutoff for the OLS pseudoinverse.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;
pub const DEFAULT_MIN_TRAIN: usize = 5;
const SPD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    Ols,
    Ridge { eta: f64 },
    Lasso { eta: f64 },
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Ols => MethodKind::Ols,
            Method::Ridge { .. } => MethodKind::Ridge,
            Method::Lasso { .. } => MethodKind::Lasso,
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            Method::Ols => 0.0,
            Method::Ridge { eta } | Method::Lasso { eta } => *eta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Ols,
    Ridge,
    Lasso,
}

impl MethodKind {
    pub fn with_eta(self, eta: f64) -> Method {
        match self {
            MethodKind::Ols => Method::Ols,
            MethodKind::Ridge => Method::Ridge { eta },
            MethodKind::Lasso => Method::Lasso { eta },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_iters: usize,
    /// Convergence when the largest coordinate change in a sweep is below this.
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_iters: 100_000,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub method: Method,
    pub pinv_tolerance: f64,
    pub lasso: LassoOptions,
}

impl RegressionConfig {
    pub fn new(method: Method) -> Self {
        RegressionConfig {
            method,
            pinv_tolerance: DEFAULT_PINV_TOL,
            lasso: LassoOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Ridge { eta } if !(eta.is_finite() && eta >= 0.0) => {
                return Err(Error::InvalidParameter(format!(
                    "ridge penalty must be >= 0, got {eta}"
                )))
            }
            Method::Lasso { eta } if !(eta.is_finite() && eta > 0.0) => {
                return Err(Error::InvalidParameter(format!(
                    "lasso penalty must be > 0, got {eta}"
                )))
            }
            _ => {}
        }
        if !(self.pinv_tolerance > 0.0) || !(self.lasso.tol > 0.0) || self.lasso.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self::new(Method::Ols)
    }
}

/// Synthetic control weights over the donor pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub beta: DVector<f64>,
    pub method: MethodKind,
    pub eta: f64,
    /// Always `true` except for a LASSO fit that hit its iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

impl Weights {
    fn closed_form(beta: DVector<f64>, method: MethodKind, eta: f64) -> Self {
        Weights {
            beta,
            method,
            eta,
            converged: true,
            iterations: 0,
        }
    }
}

fn check_shapes(m_hat_pre: &DMatrix<f64>, y1_pre: &DVector<f64>) -> Result<()> {
    if m_hat_pre.ncols() != y1_pre.len() {
        return Err(Error::shape(
            format!("{} pre-intervention columns", y1_pre.len()),
            format!("{}x{}", m_hat_pre.nrows(), m_hat_pre.ncols()),
        ));
    }
    if y1_pre
        .iter()
        .chain(m_hat_pre.iter())
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite("regression inputs".into()));
    }
    Ok(())
}

/// Minimum-norm least squares `β = ((M̂⁻)ᵀ)† y₁⁻`.
pub fn fit_ols(
    m_hat_pre: &DMatrix<f64>,
    y1_pre: &DVector<f64>,
    pinv_tolerance: f64,
) -> Result<Weights> {
    check_shapes(m_hat_pre, y1_pre)?;
    let beta = pinv_solve(&m_hat_pre.transpose(), y1_pre, pinv_tolerance);
    Ok(Weights::closed_form(beta, MethodKind::Ols, 0.0))
}

/// `β(η) = (M̂⁻(M̂⁻)ᵀ + ηI)⁻¹ M̂⁻ y₁⁻`. At `η = 0` this is [`fit_ols`].
pub fn fit_ridge(m_hat_pre: &DMatrix<f64>, y1_pre: &DVector<f64>, eta: f64) -> Result<Weights> {
    check_shapes(m_hat_pre, y1_pre)?;
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ridge penalty must be >= 0, got {eta}"
        )));
    }
    if eta == 0.0 {
        let mut w = fit_ols(m_hat_pre, y1_pre, DEFAULT_PINV_TOL)?;
        w.method = MethodKind::Ridge;
        return Ok(w);
    }
    let n = m_hat_pre.nrows();
    let gram = m_hat_pre * m_hat_pre.transpose() + DMatrix::identity(n, n) * eta;
    let rhs = m_hat_pre * y1_pre;
    let beta = linalg::spd_solve(&gram, &rhs, SPD_FLOOR);
    Ok(Weights::closed_form(beta, MethodKind::Ridge, eta))
}

/// Cyclic coordinate descent on `‖y₁⁻ − (M̂⁻)ᵀv‖² + η‖v‖₁`.
pub fn fit_lasso(
    m_hat_pre: &DMatrix<f64>,
    y1_pre: &DVector<f64>,
    eta: f64,
    opts: &LassoOptions,
) -> Result<Weights> {
    fit_lasso_from(m_hat_pre, y1_pre, eta, opts, None)
}

/// [`fit_lasso`] with an optional warm start.
pub fn fit_lasso_from(
    m_hat_pre: &DMatrix<f64>,
    y1_pre: &DVector<f64>,
    eta: f64,
    opts: &LassoOptions,
    init: Option<&DVector<f64>>,
) -> Result<Weights> {
    check_shapes(m_hat_pre, y1_pre)?;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lasso penalty must be > 0, got {eta}"
        )));
    }
    let n = m_hat_pre.nrows();
    let mut beta = match init {
        Some(b) if b.len() == n => b.clone(),
        _ => DVector::zeros(n),
    };
    let col_sq: Vec<f64> = m_hat_pre.row_iter().map(|r| r.norm_squared()).collect();
    let mut resid = y1_pre - m_hat_pre.transpose() * &beta;
    let half = 0.5 * eta;

    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..n {
            if col_sq[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let row = m_hat_pre.row(j);
            let old = beta[j];
            let rho = row.dot(&resid.transpose()) + col_sq[j] * old;
            let new = soft_threshold(rho, half) / col_sq[j];
            let delta = new - old;
            if delta != 0.0 {
                resid.axpy(-delta, &row.transpose(), 1.0);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(Weights {
        beta,
        method: MethodKind::Lasso,
        eta,
        converged,
        iterations,
    })
}

/// `sign(x) · max(|x| − t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Fits weights with the configured method.
pub fn fit(
    m_hat_pre: &DMatrix<f64>,
    y1_pre: &DVector<f64>,
    cfg: &RegressionConfig,
) -> Result<Weights> {
    cfg.validate()?;
    match cfg.method {
        Method::Ols => fit_ols(m_hat_pre, y1_pre, cfg.pinv_tolerance),
        Method::Ridge { eta: 0.0 } => {
            let mut w = fit_ols(m_hat_pre, y1_pre, cfg.pinv_tolerance)?;
            w.method = MethodKind::Ridge;
            Ok(w)
        }
        Method::Ridge { eta } => fit_ridge(m_hat_pre, y1_pre, eta),
        Method::Lasso { eta } => fit_lasso(m_hat_pre, y1_pre, eta, &cfg.lasso),
    }
}

/// One row of the forward-chaining validation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvRecord {
    pub rule: ThresholdRule,
    pub mu: f64,
    pub rank: usize,
    pub eta: f64,
    pub mean_squared_error: f64,
}

/// Outcome of forward-chaining hyperparameter selection.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Winning threshold candidate, as given.
    pub rule: ThresholdRule,
    /// Its resolved threshold.
    pub mu_used: f64,
    pub config: RegressionConfig,
    pub table: Vec<CvRecord>,
}

/// Forward-chaining selection of `(μ, η)`.
///
/// The donor matrix is de-noised once per threshold candidate and its
/// pre-intervention columns are kept fixed; only the regression is refit.
/// For each validation period `t = min_train + 1, …, T₀` the learner is fit
/// on treated periods `1..t−1` and scored on `Y₁ₜ`. The pair with the least
/// mean squared error wins; near-ties (relative `1e−9`) go to the smaller
/// `η`, then the larger `μ`.
///
/// The panel is used as given; callers apply the bounds transform first.
pub fn forward_chain_select(
    panel: &PanelMatrix,
    mu_candidates: &[ThresholdRule],
    eta_candidates: &[f64],
    method: MethodKind,
    min_train: usize,
) -> Result<Selection> {
    let dsvd = DonorSvd::new(panel);
    let base =
        RegressionConfig::new(method.with_eta(eta_candidates.first().copied().unwrap_or(0.0)));
    forward_chain_select_with(
        panel,
        &dsvd,
        mu_candidates,
        eta_candidates,
        &base,
        min_train,
    )
}

pub(crate) fn forward_chain_select_with(
    panel: &PanelMatrix,
    dsvd: &DonorSvd,
    mu_candidates: &[ThresholdRule],
    eta_candidates: &[f64],
    base: &RegressionConfig,
    min_train: usize,
) -> Result<Selection> {
    if mu_candidates.is_empty() || eta_candidates.is_empty() {
        return Err(Error::InvalidParameter(
            "candidate lists must be nonempty".into(),
        ));
    }
    let t0 = panel.t0();
    if min_train < 2 || t0 <= min_train {
        return Err(Error::InvalidParameter(format!(
            "forward chaining needs 2 <= min_train < T0, got min_train={min_train}, T0={t0}"
        )));
    }
    let kind = base.method.kind();
    let etas: Vec<f64> = match kind {
        MethodKind::Ols => vec![0.0],
        _ => eta_candidates.to_vec(),
    };
    for &eta in &etas {
        let cfg = RegressionConfig {
            method: kind.with_eta(eta),
            ..*base
        };
        cfg.validate()?;
    }
    let mus = mu_candidates
        .iter()
        .map(|r| dsvd.resolve_mu(r))
        .collect::<Result<Vec<f64>>>()?;

    let y = panel.treated_pre();
    let pairs: Vec<(usize, f64)> = (0..mus.len())
        .flat_map(|i| etas.iter().map(move |&e| (i, e)))
        .collect();
    let table: Vec<CvRecord> = pairs
        .par_iter()
        .map(|&(i, eta)| {
            let denoised = dsvd.threshold(mus[i]);
            let mse = match kind {
                MethodKind::Lasso => {
                    lasso_chain_error(&denoised.pre(t0), &y, eta, &base.lasso, min_train)
                }
                _ => {
                    let z = denoised.time_coordinates().rows(0, t0).into_owned();
                    reduced_chain_error(&z, &y, eta, base.pinv_tolerance, min_train)
                }
            };
            CvRecord {
                rule: mu_candidates[i].clone(),
                mu: mus[i],
                rank: denoised.rank(),
                eta,
                mean_squared_error: mse,
            }
        })
        .collect();

    let best = table
        .iter()
        .map(|r| r.mean_squared_error)
        .fold(f64::INFINITY, f64::min);
    let tie_bound = best + 1e-9 * best.abs() + 1e-24;
    let winner = table
        .iter()
        .enumerate()
        .filter(|(_, r)| r.mean_squared_error <= tie_bound)
        .min_by(|(ia, a), (ib, b)| {
            a.eta
                .total_cmp(&b.eta)
                .then(b.mu.total_cmp(&a.mu))
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::NonFinite("validation errors".into()))?;

    let chosen = &table[winner];
    Ok(Selection {
        rule: chosen.rule.clone(),
        mu_used: chosen.mu,
        config: RegressionConfig {
            method: kind.with_eta(chosen.eta),
            ..*base
        },
        table,
    })
}

/// Forward-chaining error for OLS/ridge on the reduced `T₀ × |S|` design.
fn reduced_chain_error(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
    tol: f64,
    min_train: usize,
) -> f64 {
    let (t0, k) = z.shape();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for t in 0..min_train {
        let zt = z.row(t).transpose();
        gram.ger(1.0, &zt, &zt, 1.0);
        rhs.axpy(y[t], &zt, 1.0);
    }
    let mut total = 0.0;
    for v in min_train..t0 {
        let pred = if k == 0 {
            0.0
        } else if eta > 0.0 {
            let a = &gram + DMatrix::identity(k, k) * eta;
            let gamma = linalg::spd_solve(&a, &rhs, SPD_FLOOR);
            z.row(v).dot(&gamma.transpose())
        } else {
            let zt = z.rows(0, v).into_owned();
            let yt = y.rows(0, v).into_owned();
            let gamma = pinv_solve(&zt, &yt, tol);
            z.row(v).dot(&gamma.transpose())
        };
        total += (y[v] - pred).powi(2);
        let zv = z.row(v).transpose();
        gram.ger(1.0, &zv, &zv, 1.0);
        rhs.axpy(y[v], &zv, 1.0);
    }
    total / (t0 - min_train) as f64
}

fn lasso_chain_error(
    m_pre: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
    opts: &LassoOptions,
    min_train: usize,
) -> f64 {
    let t0 = y.len();
    let mut warm: Option<DVector<f64>> = None;
    let mut total = 0.0;
    for v in min_train..t0 {
        let m = m_pre.columns(0, v).into_owned();
        let yt = y.rows(0, v).into_owned();
        let beta = fit_lasso_from(&m, &yt, eta, opts, warm.as_ref())
            .map(|w| w.beta)
            .unwrap_or_else(|_| DVector::zeros(m_pre.nrows()));
        let pred = m_pre.column(v).dot(&beta);
        total += (y[v] - pred).powi(2);
        warm = Some(beta);
    }
    total / (t0 - min_train) as f64
}
