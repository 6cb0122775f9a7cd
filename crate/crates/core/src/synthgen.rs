//! Synthetic latent-variable panels and the noise-sweep benchmark.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::ThresholdRule;
use crate::learners::{Method, RegressionConfig};
use crate::panel::PanelMatrix;
use crate::pipeline::{estimate_counterfactual, EstimateConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LatentModel {
    /// `θᵢ ~ U[0, 1]`, `ρₜ = t`, periodic mean function [`latent_mean`].
    Periodic,
    /// Rank-`k` model: `U(−1, 1)` loadings on `k` phase-shifted cosines.
    /// Loadings and phases come from `coef_seed`.
    LowRank { k: usize, coef_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentModelSpec {
    pub n_units: usize,
    pub t_len: usize,
    /// Number of pre-intervention periods.
    pub t0: usize,
    pub noise_sigma: f64,
    pub p_observe: f64,
    pub seed: u64,
    pub model: LatentModel,
}

impl LatentModelSpec {
    pub fn periodic(n_units: usize, t_len: usize, t0: usize) -> Self {
        LatentModelSpec {
            n_units,
            t_len,
            t0,
            noise_sigma: 0.0,
            p_observe: 1.0,
            seed: 0,
            model: LatentModel::Periodic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 || self.t_len < 2 {
            return Err(Error::InvalidParameter(
                "need at least 2 units and 2 periods".into(),
            ));
        }
        if self.t0 == 0 || self.t0 >= self.t_len {
            return Err(Error::InvalidParameter(format!(
                "t0 must lie in 1..t_len, got t0={} t_len={}",
                self.t0, self.t_len
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.p_observe > 0.0 && self.p_observe <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p_observe must lie in (0, 1], got {}",
                self.p_observe
            )));
        }
        if let LatentModel::LowRank { k: 0, .. } = self.model {
            return Err(Error::InvalidParameter("rank must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of unit `theta` at time `rho` for a horizon of `t_len` periods.
pub fn latent_mean(theta: f64, rho: f64, t_len: usize) -> f64 {
    let r = rho / t_len as f64;
    let f1 = rho.rem_euclid(360.0);
    let f2 = rho.rem_euclid(180.0);
    let f3 = (2.0 * rho).rem_euclid(360.0);
    let f4 = (2.0 * rho).rem_euclid(180.0);
    let deg = PI / 180.0;
    theta
        + 0.3 * theta * r * r.exp()
        + (f1 * deg).cos()
        + 0.5 * (f2 * deg).sin()
        + 1.5 * (f3 * deg).cos()
        - 0.5 * (f4 * deg).sin()
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub panel: PanelMatrix,
    /// `N × T` mean matrix; row 0 is the treated unit.
    pub truth: DMatrix<f64>,
}

fn normalize(m: &mut DMatrix<f64>) {
    let lo = m.min();
    let hi = m.max();
    let half = (hi - lo) / 2.0;
    let center = (hi + lo) / 2.0;
    if half > 0.0 {
        m.apply(|x| *x = (*x - center) / half);
    } else {
        m.fill(0.0);
    }
}

fn mean_matrix(spec: &LatentModelSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, t_len) = (spec.n_units, spec.t_len);
    match spec.model {
        LatentModel::Periodic => {
            let theta: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            DMatrix::from_fn(n, t_len, |i, t| {
                latent_mean(theta[i], (t + 1) as f64, t_len)
            })
        }
        LatentModel::LowRank { k, coef_seed } => {
            let mut coef = ChaCha8Rng::seed_from_u64(coef_seed);
            let loadings = DMatrix::from_fn(n, k, |_, _| coef.random_range(-1.0..1.0));
            let phases: Vec<f64> = (0..k).map(|_| coef.random_range(0.0..2.0 * PI)).collect();
            let factors = DMatrix::from_fn(k, t_len, |j, t| {
                (2.0 * PI * (j + 1) as f64 * t as f64 / 100.0 + phases[j]).cos()
            });
            loadings * factors
        }
    }
}

/// Draws a panel: means normalized to `[−1, 1]`, then Gaussian noise, then a
/// Bernoulli mask on the donor rows. Row 0 is the fully observed treated unit.
pub fn generate_panel(spec: &LatentModelSpec) -> Result<SyntheticPanel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut truth = mean_matrix(spec, &mut rng);
    normalize(&mut truth);

    let (n, t_len) = (spec.n_units, spec.t_len);
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let observed = DMatrix::from_fn(n, t_len, |i, t| truth[(i, t)] + noise.sample(&mut rng));
    let mask = DMatrix::from_fn(n - 1, t_len, |_, _| {
        spec.p_observe >= 1.0 || rng.random::<f64>() < spec.p_observe
    });

    let donors = observed.rows(1, n - 1).into_owned();
    let treated = observed.row(0).transpose();
    let units = std::iter::once("treated".to_string())
        .chain((1..n).map(|i| format!("unit_{i}")))
        .collect();
    let times = (1..=t_len).map(|t| t.to_string()).collect();
    let panel = PanelMatrix::new(
        donors,
        mask,
        treated,
        vec![true; t_len],
        spec.t0,
        units,
        times,
    )?;
    Ok(SyntheticPanel { panel, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub noise: f64,
    pub pre_mse: f64,
    pub post_mse: f64,
}

/// Estimator used by the benchmark: the generator's true rank and OLS.
pub fn benchmark_config() -> EstimateConfig {
    EstimateConfig::new(
        ThresholdRule::FixedRank(2),
        RegressionConfig::new(Method::Ols),
    )
}

/// Pre- and post-period squared error of the treated counterfactual
/// against the true treated means.
pub fn treated_errors(synth: &SyntheticPanel, cfg: &EstimateConfig) -> Result<(f64, f64)> {
    let res = estimate_counterfactual(&synth.panel, cfg)?;
    let t0 = synth.panel.t0();
    let truth: DVector<f64> = synth.truth.row(0).transpose();
    let err = &res.m1_hat - truth;
    let pre = err.rows(0, t0).norm_squared() / t0 as f64;
    let post_len = err.len() - t0;
    let post = err.rows(t0, post_len).norm_squared() / post_len as f64;
    Ok((pre, post))
}

/// Seed-averaged treated-unit errors at each noise level.
///
/// Seeds are `template.seed, template.seed + 1, …`. Without de-noising the
/// threshold is forced to 0, so `M̂ = Y / p̂`.
pub fn run_benchmark(
    grid: &[f64],
    template: &LatentModelSpec,
    with_denoising: bool,
    n_seeds: usize,
    cfg: &EstimateConfig,
) -> Result<Vec<BenchmarkRow>> {
    if n_seeds == 0 {
        return Err(Error::InvalidParameter("need at least one seed".into()));
    }
    let mut cfg = cfg.clone();
    if !with_denoising {
        cfg.rule = ThresholdRule::FixedValue(0.0);
        cfg.eta_grid = None;
    }
    grid.iter()
        .map(|&noise| {
            let errors = (0..n_seeds as u64)
                .into_par_iter()
                .map(|s| {
                    let spec = LatentModelSpec {
                        noise_sigma: noise,
                        seed: template.seed.wrapping_add(s),
                        ..template.clone()
                    };
                    treated_errors(&generate_panel(&spec)?, &cfg)
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let k = errors.len() as f64;
            Ok(BenchmarkRow {
                noise,
                pre_mse: errors.iter().map(|e| e.0).sum::<f64>() / k,
                post_mse: errors.iter().map(|e| e.1).sum::<f64>() / k,
            })
        })
        .collect()
}
