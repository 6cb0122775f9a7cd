//! Block-averaging of pre-intervention columns.
//!
//! The `T₀` pre-intervention columns are split into `Δ = ⌈T₀^(1/2+γ)⌉`
//! blocks of width `τ = ⌊T₀/Δ⌋` and each block is replaced by its average.
//! Averaging divides the noise variance by `τ`, which is what makes the
//! pre-period estimate consistent as `T₀` grows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::denoise::{estimate_p_hat, estimate_sigma2_hat, universal_threshold};
use crate::learners::{self, RegressionConfig, Weights};
use crate::linalg::Svd;
use crate::panel::{apply_bounds, fit_bounds, BoundsTransform, Direction, PanelMatrix};
use crate::pipeline::project_post;
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PSource {
    /// Oracle observation probability.
    Known(f64),
    /// Use `p̂` from the panel.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub gamma: f64,
    /// Fold the `T₀ − Δτ` leftover columns into the last block.
    pub include_partial_last_block: bool,
    pub p_source: PSource,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            gamma: DEFAULT_GAMMA,
            include_partial_last_block: true,
            p_source: PSource::Estimated,
        }
    }
}

impl AggregationConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        let cfg = AggregationConfig {
            gamma,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 0.5), got {}",
                self.gamma
            )));
        }
        if let PSource::Known(p) = self.p_source {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "observation probability must lie in (0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    /// `Δ = ⌈T₀^(1/2+γ)⌉`.
    pub fn block_count(&self, t0: usize) -> usize {
        ((t0 as f64).powf(0.5 + self.gamma).ceil() as usize).max(1)
    }
}

/// Block-averaged pre-intervention panel.
#[derive(Debug, Clone)]
pub struct AggregatedPanel {
    /// `(N−1) × Δ` block means of the zero-filled donors.
    pub donors: DMatrix<f64>,
    /// Length-`Δ` treated block means scaled by `p`.
    pub treated: DVector<f64>,
    pub delta: usize,
    pub tau: usize,
    /// `(start, width)` of each block in pre-intervention column indices.
    pub blocks: Vec<(usize, usize)>,
    pub p_used: f64,
    /// `(donor, block)` pairs with no observed entry; their value is 0.
    pub empty_blocks: Vec<(usize, usize)>,
    /// Set when the last block's width differs from `τ`.
    pub partial_last_block: bool,
}

/// Averages the pre-intervention columns of `panel` into `delta` blocks.
///
/// Donor entries are `(1/w_j) Σ_{t∈B_j} X_{it} D_{it}` and treated entries
/// `(p/w_j) Σ_{t∈B_j} X_{1t}` where `w_j` is the block width.
pub fn aggregate_blocks(
    panel: &PanelMatrix,
    delta: usize,
    p: f64,
    include_partial_last_block: bool,
) -> Result<AggregatedPanel> {
    let t0 = panel.t0();
    if delta == 0 || delta > t0 {
        return Err(Error::InvalidParameter(format!(
            "block count must lie in 1..=T0, got {delta} with T0={t0}"
        )));
    }
    let tau = t0 / delta;
    let blocks: Vec<(usize, usize)> = (0..delta)
        .map(|j| {
            let start = j * tau;
            let width = if j + 1 == delta && include_partial_last_block {
                t0 - start
            } else {
                tau
            };
            (start, width)
        })
        .collect();
    let partial_last_block = blocks.last().is_some_and(|&(_, w)| w != tau);

    let n = panel.n_donors();
    let mut donors = DMatrix::zeros(n, delta);
    let mut empty_blocks = Vec::new();
    for (j, &(start, width)) in blocks.iter().enumerate() {
        for i in 0..n {
            let observed = (start..start + width).any(|t| panel.mask()[(i, t)]);
            if !observed {
                empty_blocks.push((i, j));
            }
            let sum: f64 = (start..start + width).map(|t| panel.donors()[(i, t)]).sum();
            donors[(i, j)] = sum / width as f64;
        }
    }
    let treated = DVector::from_fn(delta, |j, _| {
        let (start, width) = blocks[j];
        p * panel.treated().rows(start, width).sum() / width as f64
    });
    Ok(AggregatedPanel {
        donors,
        treated,
        delta,
        tau,
        blocks,
        p_used: p,
        empty_blocks,
        partial_last_block,
    })
}

pub fn aggregate_columns(panel: &PanelMatrix, cfg: &AggregationConfig) -> Result<AggregatedPanel> {
    cfg.validate()?;
    let p = match cfg.p_source {
        PSource::Known(p) => p,
        PSource::Estimated => estimate_p_hat(panel),
    };
    aggregate_blocks(
        panel,
        cfg.block_count(panel.t0()),
        p,
        cfg.include_partial_last_block,
    )
}

/// Result of the aggregated (consistent) estimator.
#[derive(Debug, Clone)]
pub struct ConsistentFit {
    pub weights: Weights,
    pub transform: BoundsTransform,
    /// Aggregated panel in transformed units.
    pub aggregated: AggregatedPanel,
    /// De-noised aggregated donors `M̄̂⁻`, transformed units.
    pub m_bar_hat: DMatrix<f64>,
    /// `(M̄̂⁻)ᵀ β̂`, transformed units.
    pub fitted_pre: DVector<f64>,
    pub mu_used: f64,
    pub rank: usize,
    pub p_hat: f64,
    pub sigma2_hat: f64,
    /// `Σᵢ β̂ᵢ Yᵢₜ / p̂` for `t ≤ T₀`, original units.
    pub pre_raw: DVector<f64>,
    /// `Σᵢ β̂ᵢ Yᵢₜ / p̂` for `t > T₀`, original units.
    pub post_raw: DVector<f64>,
    /// `Σᵢ β̂ᵢ M̂ᵢₜ` with `M̂⁺` from thresholding the post block, original units.
    pub post_denoised: DVector<f64>,
}

impl ConsistentFit {
    /// Mean squared difference between the fitted and given aggregated
    /// treated means, both in transformed units.
    pub fn aggregated_mse(&self, target: &DVector<f64>) -> Result<f64> {
        if target.len() != self.fitted_pre.len() {
            return Err(Error::shape(
                format!("{} blocks", self.fitted_pre.len()),
                target.len().to_string(),
            ));
        }
        Ok((&self.fitted_pre - target).norm_squared() / target.len() as f64)
    }
}

/// Aggregated estimator with threshold
/// `μ = (2 + ω) · sqrt(T₀^{2γ} (σ̂²p̂ + p̂(1 − p̂)))`.
///
/// The panel is mapped to `[-1, 1]` first; `σ̂²` and `p̂` come from the
/// transformed, unaggregated panel.
pub fn consistent_estimate(
    panel: &PanelMatrix,
    cfg: &AggregationConfig,
    reg: &RegressionConfig,
    omega: f64,
) -> Result<ConsistentFit> {
    cfg.validate()?;
    reg.validate()?;
    if !(omega > 0.1 && omega < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "omega must lie in (0.1, 1), got {omega}"
        )));
    }
    let transform = fit_bounds(panel)?;
    let tp = apply_bounds(panel, &transform, Direction::Forward);
    let t0 = tp.t0();
    let p_hat = estimate_p_hat(&tp);
    let sigma2_hat = estimate_sigma2_hat(&tp)?;
    let aggregated = aggregate_columns(&tp, cfg)?;

    let t0_pow = (t0 as f64).powf(2.0 * cfg.gamma);
    let mu = (2.0 + omega) * (t0_pow * (sigma2_hat * p_hat + p_hat * (1.0 - p_hat))).sqrt();
    // Block means are fully observed, so no 1/p̂ rescaling here.
    let svd = Svd::new(&aggregated.donors);
    let rank = svd.s.iter().take_while(|&&s| s >= mu).count();
    let m_bar_hat = svd.reconstruct(rank);

    let weights = learners::fit(&m_bar_hat, &aggregated.treated, reg)?;
    let fitted_pre = m_bar_hat.transpose() * &weights.beta;

    let t_len = tp.n_periods();
    let post_cols = tp.donors().columns(t0, t_len - t0).into_owned();
    let post_obs = post_cols.clone() / p_hat;
    let post_observed = tp
        .mask()
        .columns(t0, t_len - t0)
        .iter()
        .filter(|&&m| m)
        .count();
    let p_post = (post_observed as f64 / post_cols.len() as f64).max(1.0 / post_cols.len() as f64);
    let mu_post = universal_threshold(sigma2_hat, p_post, t_len - t0, omega)?;
    let post_svd = Svd::new(&post_cols);
    let k_post = post_svd.s.iter().take_while(|&&s| s >= mu_post).count();
    let m_hat_post = post_svd.reconstruct(k_post) / p_post;

    let inverse = |v: DVector<f64>| v.map(|x| transform.inverse(x));
    let pre_raw = inverse(tp.donors().columns(0, t0).tr_mul(&weights.beta) / p_hat);
    let post_raw = inverse(project_post(&weights, &post_obs, false, &m_hat_post)?);
    let post_denoised = inverse(project_post(&weights, &post_obs, true, &m_hat_post)?);

    Ok(ConsistentFit {
        weights,
        transform,
        aggregated,
        m_bar_hat,
        fitted_pre,
        mu_used: mu,
        rank,
        p_hat,
        sigma2_hat,
        pre_raw,
        post_raw,
        post_denoised,
    })
}
