//! End-to-end estimation: transform, de-noise, learn, project.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, GaussianPrior, Posterior};
use crate::denoise::{DonorSvd, ThresholdRule};
use crate::learners::{self, CvRecord, RegressionConfig, Weights, DEFAULT_MIN_TRAIN};
use crate::panel::{apply_bounds, fit_bounds, BoundsTransform, Direction, PanelMatrix};
use crate::{Error, Result};

/// Source of the post-intervention donor values used for projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// `M̂ᵀβ̂` over all periods.
    #[default]
    Denoised,
    /// `Σᵢ β̂ᵢ Yᵢₜ / p̂` after `T₀`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorChoice {
    Alpha(f64),
    /// `α = η / σ̂²` with `η` from the regression config (or its CV winner).
    FromCv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub rule: ThresholdRule,
    pub regression: RegressionConfig,
    /// Penalty candidates for forward chaining. Ignored for OLS.
    pub eta_grid: Option<Vec<f64>>,
    pub min_train: usize,
    pub bayes: Option<PriorChoice>,
    pub projection: Projection,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            rule: ThresholdRule::Universal(0.5),
            regression: RegressionConfig::default(),
            eta_grid: None,
            min_train: DEFAULT_MIN_TRAIN,
            bayes: None,
            projection: Projection::Denoised,
        }
    }
}

impl EstimateConfig {
    pub fn new(rule: ThresholdRule, regression: RegressionConfig) -> Self {
        EstimateConfig {
            rule,
            regression,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        self.regression.validate()?;
        if let Some(grid) = &self.eta_grid {
            if grid.is_empty() || grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                return Err(Error::InvalidParameter(
                    "penalty grid must be a nonempty list of nonnegative numbers".into(),
                ));
            }
        }
        if let Some(PriorChoice::Alpha(alpha)) = self.bayes {
            GaussianPrior::new(alpha)?;
        }
        Ok(())
    }

    fn needs_selection(&self) -> bool {
        matches!(self.rule, ThresholdRule::ForwardChainCv(_))
            || (self.eta_grid.is_some()
                && self.regression.method.kind() != learners::MethodKind::Ols)
    }
}

/// What the de-noising step kept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseSummary {
    pub rule: ThresholdRule,
    pub mu_used: f64,
    pub rank: usize,
    pub kept_singular_values: Vec<f64>,
    pub p_hat: f64,
    /// In transformed units.
    pub sigma2_hat: Option<f64>,
}

/// Predictive band in original units.
#[derive(Debug, Clone)]
pub struct BayesBand {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub alpha: f64,
    pub alpha_floored: bool,
    /// `σ̂²` in original units; a lower bound for every predictive variance.
    pub sigma2_hat: f64,
    /// Posterior over the weights, transformed units.
    pub posterior: Posterior,
}

impl BayesBand {
    pub fn variance(&self) -> DVector<f64> {
        self.std.map(|s| s * s)
    }
}

#[derive(Debug, Clone)]
pub struct CounterfactualResult {
    /// Estimated treated means over all `T` periods, original units.
    pub m1_hat: DVector<f64>,
    /// `Y₁ₜ − M̂₁ₜ` where the treated value is observed.
    pub gaps: Vec<Option<f64>>,
    pub pre_mse: f64,
    pub weights: Weights,
    pub regression: RegressionConfig,
    pub denoise: DenoiseSummary,
    pub transform: BoundsTransform,
    pub t0: usize,
    /// Forward-chaining table when selection ran.
    pub selection: Option<Vec<CvRecord>>,
    pub bayes_band: Option<BayesBand>,
}

impl CounterfactualResult {
    pub fn pre_rmse(&self) -> f64 {
        self.pre_mse.sqrt()
    }

    /// Mean absolute gap over observed post-intervention periods.
    pub fn mean_abs_post_gap(&self) -> Option<f64> {
        let post: Vec<f64> = self.gaps[self.t0..]
            .iter()
            .flatten()
            .map(|g| g.abs())
            .collect();
        (!post.is_empty()).then(|| post.iter().sum::<f64>() / post.len() as f64)
    }
}

/// `Σᵢ β̂ᵢ Sᵢₜ` with `S` the raw or de-noised post-period donor matrix.
pub fn project_post(
    weights: &Weights,
    donors_post: &DMatrix<f64>,
    use_denoised: bool,
    m_hat_post: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if donors_post.shape() != m_hat_post.shape() {
        return Err(Error::shape(
            format!("{}x{}", donors_post.nrows(), donors_post.ncols()),
            format!("{}x{}", m_hat_post.nrows(), m_hat_post.ncols()),
        ));
    }
    if donors_post.nrows() != weights.beta.len() {
        return Err(Error::shape(
            format!("{} donor rows", weights.beta.len()),
            donors_post.nrows().to_string(),
        ));
    }
    let source = if use_denoised {
        m_hat_post
    } else {
        donors_post
    };
    Ok(source.tr_mul(&weights.beta))
}

/// `(t, Y₁ₜ − M̂₁ₜ)` at observed treated periods.
pub fn gap_series(result: &CounterfactualResult, panel: &PanelMatrix) -> Vec<(usize, f64)> {
    panel
        .treated()
        .iter()
        .zip(panel.treated_mask())
        .zip(result.m1_hat.iter())
        .enumerate()
        .filter(|(_, ((_, &observed), _))| observed)
        .map(|(t, ((y, _), m))| (t, y - m))
        .collect()
}

pub fn estimate_counterfactual(
    panel: &PanelMatrix,
    cfg: &EstimateConfig,
) -> Result<CounterfactualResult> {
    cfg.validate()?;
    let transform = fit_bounds(panel)?;
    let tp = apply_bounds(panel, &transform, Direction::Forward);
    let t0 = tp.t0();
    let t_len = tp.n_periods();
    let dsvd = DonorSvd::new(&tp);

    let (mu, regression, selection) = if cfg.needs_selection() {
        let candidates = match &cfg.rule {
            ThresholdRule::ForwardChainCv(ranks) => {
                ranks.iter().map(|&k| ThresholdRule::FixedRank(k)).collect()
            }
            rule => vec![rule.clone()],
        };
        let etas = cfg
            .eta_grid
            .clone()
            .unwrap_or_else(|| vec![cfg.regression.method.eta()]);
        let sel = learners::forward_chain_select_with(
            &tp,
            &dsvd,
            &candidates,
            &etas,
            &cfg.regression,
            cfg.min_train,
        )?;
        (sel.mu_used, sel.config, Some(sel.table))
    } else {
        (dsvd.resolve_mu(&cfg.rule)?, cfg.regression, None)
    };

    let denoised = dsvd.threshold(mu);
    let m_pre = denoised.pre(t0);
    let y_pre = tp.treated_pre();
    let weights = learners::fit(&m_pre, &y_pre, &regression)?;

    let fitted_pre = m_pre.tr_mul(&weights.beta);
    let post_raw = tp.donors().columns(t0, t_len - t0) / denoised.p_hat;
    let post_hat = denoised.m_hat.columns(t0, t_len - t0).into_owned();
    let fitted_post = project_post(
        &weights,
        &post_raw,
        cfg.projection == Projection::Denoised,
        &post_hat,
    )?;
    let m1_hat = DVector::from_iterator(
        t_len,
        fitted_pre
            .iter()
            .chain(fitted_post.iter())
            .map(|&x| transform.inverse(x)),
    );
    if m1_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("counterfactual".into()));
    }

    let gaps: Vec<Option<f64>> = (0..t_len)
        .map(|t| panel.value(0, t).map(|y| y - m1_hat[t]))
        .collect();
    let pre_gaps: Vec<f64> = gaps[..t0].iter().flatten().copied().collect();
    let pre_mse = pre_gaps.iter().map(|g| g * g).sum::<f64>() / pre_gaps.len() as f64;

    let bayes_band = match cfg.bayes {
        None => None,
        Some(choice) => {
            let sigma2 = denoised.sigma2_hat.ok_or_else(|| {
                Error::InvalidParameter(
                    "the posterior band needs at least 2 pre-intervention periods".into(),
                )
            })?;
            let (prior, alpha_floored) = match choice {
                PriorChoice::Alpha(a) => (GaussianPrior::new(a)?, false),
                PriorChoice::FromCv => {
                    bayes::choose_alpha_from_cv(regression.method.eta(), sigma2)?
                }
            };
            let posterior = bayes::fit_posterior(&m_pre, &y_pre, &prior, sigma2)?;
            let h = transform.half_range();
            let mut mean = DVector::zeros(t_len);
            let mut std = DVector::zeros(t_len);
            for t in 0..t_len {
                let col = denoised.m_hat.column(t).into_owned();
                let pred = bayes::predictive(&col, &posterior)?;
                mean[t] = transform.inverse(pred.mean);
                std[t] = pred.std() * h;
            }
            Some(BayesBand {
                mean,
                std,
                alpha: prior.alpha(),
                alpha_floored,
                sigma2_hat: posterior.sigma2_hat * h * h,
                posterior,
            })
        }
    };

    Ok(CounterfactualResult {
        m1_hat,
        gaps,
        pre_mse,
        weights,
        regression,
        denoise: DenoiseSummary {
            rule: cfg.rule.clone(),
            mu_used: denoised.mu_used,
            rank: denoised.rank(),
            kept_singular_values: denoised.kept.clone(),
            p_hat: denoised.p_hat,
            sigma2_hat: denoised.sigma2_hat,
        },
        transform,
        t0,
        selection,
        bayes_band,
    })
}

/// One placebo run: `unit` treated, the rest as donors.
#[derive(Debug, Clone)]
pub struct PlaceboRun {
    pub gaps: Vec<Option<f64>>,
    pub pre_rmse: f64,
    pub mean_abs_post_gap: f64,
    /// `mean |post gap| / pre-RMSE`.
    pub statistic: f64,
}

#[derive(Debug, Clone)]
pub struct PlaceboEntry {
    pub unit: usize,
    pub label: String,
    pub outcome: std::result::Result<PlaceboRun, String>,
    /// 1 is the most extreme; `None` for failed runs.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PlaceboReport {
    /// One entry per unit in panel order; entry 0 is the treated unit.
    pub entries: Vec<PlaceboEntry>,
    pub treated_rank: Option<usize>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn placebo_run(panel: &PanelMatrix, cfg: &EstimateConfig) -> Result<PlaceboRun> {
    let result = estimate_counterfactual(panel, cfg)?;
    let pre_rmse = result.pre_rmse();
    let mean_abs_post_gap = result
        .mean_abs_post_gap()
        .ok_or_else(|| Error::InvalidPanel("no observed post-intervention periods".into()))?;
    Ok(PlaceboRun {
        statistic: ratio(mean_abs_post_gap, pre_rmse),
        gaps: result.gaps,
        pre_rmse,
        mean_abs_post_gap,
    })
}

/// Re-estimates with every unit treated in turn.
///
/// When `include_treated_in_donors` is false the original treated unit is
/// left out of every placebo donor pool. Failed runs are recorded and left
/// unranked.
pub fn placebo_study(
    panel: &PanelMatrix,
    cfg: &EstimateConfig,
    include_treated_in_donors: bool,
) -> Result<PlaceboReport> {
    cfg.validate()?;
    let n_units = panel.n_units();
    let min_units = if include_treated_in_donors { 3 } else { 4 };
    if n_units < min_units {
        return Err(Error::InvalidPanel(format!(
            "placebo study needs at least {min_units} units, got {n_units}"
        )));
    }
    let outcomes: Vec<std::result::Result<PlaceboRun, String>> = (0..n_units)
        .into_par_iter()
        .map(|u| {
            let run = if u == 0 {
                placebo_run(panel, cfg)
            } else {
                panel
                    .with_treated(u, !include_treated_in_donors)
                    .and_then(|p| placebo_run(&p, cfg))
            };
            run.map_err(|e| e.to_string())
        })
        .collect();

    let mut order: Vec<usize> = (0..n_units).filter(|&u| outcomes[u].is_ok()).collect();
    let stat = |u: usize| {
        outcomes[u]
            .as_ref()
            .map(|r| r.statistic)
            .unwrap_or(f64::NAN)
    };
    order.sort_by(|&a, &b| stat(b).total_cmp(&stat(a)).then(a.cmp(&b)));
    let mut ranks = vec![None; n_units];
    for (i, &u) in order.iter().enumerate() {
        ranks[u] = Some(i + 1);
    }

    let entries: Vec<PlaceboEntry> = outcomes
        .into_iter()
        .enumerate()
        .map(|(u, outcome)| PlaceboEntry {
            unit: u,
            label: panel.unit_labels()[u].clone(),
            outcome,
            rank: ranks[u],
        })
        .collect();
    Ok(PlaceboReport {
        treated_rank: ranks[0],
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{Method, MethodKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn weights(beta: Vec<f64>) -> Weights {
        Weights {
            beta: DVector::from_vec(beta),
            method: MethodKind::Ols,
            eta: 0.0,
            converged: true,
            iterations: 0,
        }
    }

    #[test]
    fn project_unit_vector_and_zero() {
        let post = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = project_post(&weights(vec![0.0, 1.0, 0.0]), &post, false, &post).unwrap();
        assert_eq!(out.as_slice(), [3.0, 4.0]);
        let zero = project_post(&weights(vec![0.0; 3]), &post, true, &post).unwrap();
        assert_eq!(zero.as_slice(), [0.0, 0.0]);
        assert!(project_post(&weights(vec![1.0; 2]), &post, false, &post).is_err());
        assert!(project_post(&weights(vec![1.0; 3]), &post, false, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn project_flag_irrelevant_for_equal_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = DMatrix::from_fn(4, 6, |_, _| rng.random::<f64>());
        let w = weights((0..4).map(|_| rng.random::<f64>() - 0.5).collect());
        let a = project_post(&w, &post, true, &post).unwrap();
        let b = project_post(&w, &post, false, &post).unwrap();
        assert_eq!(a, b);
    }

    fn rank_one_panel() -> (PanelMatrix, DVector<f64>) {
        let t_len = 30;
        let base: Vec<f64> = (0..t_len).map(|t| 1.0 + (t as f64 * 0.3).sin()).collect();
        let donors = DMatrix::from_fn(4, t_len, |i, t| (i as f64 + 1.0) * 0.5 * base[t]);
        let treated = donors.row(0).transpose() * 2.0;
        let panel = PanelMatrix::from_dense(donors, treated.clone(), 20).unwrap();
        (panel, treated)
    }

    #[test]
    fn noiseless_rank_one_is_reproduced() {
        let (panel, treated) = rank_one_panel();
        // The affine bounds map adds one direction, so keep rank 2.
        let cfg = EstimateConfig::new(
            ThresholdRule::FixedRank(2),
            RegressionConfig::new(Method::Ols),
        );
        let res = estimate_counterfactual(&panel, &cfg).unwrap();
        assert!((&res.m1_hat - &treated).amax() < 1e-8);
        assert!(res.pre_mse < 1e-16);
        let raw = EstimateConfig {
            projection: Projection::Raw,
            ..cfg
        };
        let res = estimate_counterfactual(&panel, &raw).unwrap();
        assert!((&res.m1_hat - &treated).amax() < 1e-8);
    }

    #[test]
    fn pre_mse_matches_gap_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let donors = DMatrix::from_fn(6, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
        let treated = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
        let panel = PanelMatrix::from_dense(donors, treated, 30).unwrap();
        let cfg = EstimateConfig::new(
            ThresholdRule::FixedRank(3),
            RegressionConfig::new(Method::Ridge { eta: 0.5 }),
        );
        let res = estimate_counterfactual(&panel, &cfg).unwrap();
        let series = gap_series(&res, &panel);
        assert_eq!(series.len(), 40);
        let pre: Vec<f64> = series
            .iter()
            .filter(|(t, _)| *t < 30)
            .map(|(_, g)| g * g)
            .collect();
        let mse = pre.iter().sum::<f64>() / pre.len() as f64;
        assert!((mse - res.pre_mse).abs() < 1e-12);
        assert_eq!(res.m1_hat.len(), 40);
    }

    #[test]
    fn gaps_follow_offsets() {
        let (panel, treated) = rank_one_panel();
        let cfg = EstimateConfig::new(
            ThresholdRule::FixedRank(2),
            RegressionConfig::new(Method::Ols),
        );
        let mut res = estimate_counterfactual(&panel, &cfg).unwrap();
        res.m1_hat = treated.clone();
        assert!(gap_series(&res, &panel).iter().all(|(_, g)| *g == 0.0));
        res.m1_hat = treated.map(|x| x - 1.5);
        assert!(gap_series(&res, &panel)
            .iter()
            .all(|(_, g)| (g - 1.5).abs() < 1e-12));
    }

    #[test]
    fn missing_post_treated_values_have_no_gap() {
        let csv = "unit,1,2,3,4,5,6\nA,1,2,3,4,,6\nB,1,2,3,4,5,6\nC,2,1,2,1,2,1\n";
        let panel = crate::panel::read_csv(csv.as_bytes(), "A", "4").unwrap();
        let cfg = EstimateConfig::new(ThresholdRule::FixedRank(2), RegressionConfig::default());
        let res = estimate_counterfactual(&panel, &cfg).unwrap();
        assert!(res.gaps[4].is_none());
        assert!(res.gaps[5].is_some());
        assert_eq!(gap_series(&res, &panel).len(), 5);
    }

    #[test]
    fn cv_selection_records_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let donors = DMatrix::from_fn(5, 50, |_, _| rng.random::<f64>());
        let treated = DVector::from_fn(50, |_, _| rng.random::<f64>());
        let panel = PanelMatrix::from_dense(donors, treated, 40).unwrap();
        let cfg = EstimateConfig {
            eta_grid: Some(vec![0.01, 0.1, 1.0]),
            ..EstimateConfig::new(
                ThresholdRule::ForwardChainCv(vec![1, 2, 3]),
                RegressionConfig::new(Method::Ridge { eta: 1.0 }),
            )
        };
        let res = estimate_counterfactual(&panel, &cfg).unwrap();
        assert_eq!(res.selection.as_ref().unwrap().len(), 9);
        assert!([0.01, 0.1, 1.0].contains(&res.regression.method.eta()));
    }

    #[test]
    fn bayes_band_is_above_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let donors = DMatrix::from_fn(5, 30, |_, _| rng.random::<f64>());
        let treated = DVector::from_fn(30, |_, _| rng.random::<f64>());
        let panel = PanelMatrix::from_dense(donors, treated, 20).unwrap();
        let cfg = EstimateConfig {
            bayes: Some(PriorChoice::Alpha(1.0)),
            ..EstimateConfig::new(ThresholdRule::FixedRank(3), RegressionConfig::default())
        };
        let band = estimate_counterfactual(&panel, &cfg)
            .unwrap()
            .bayes_band
            .unwrap();
        assert!(band
            .variance()
            .iter()
            .all(|&v| v >= band.sigma2_hat * (1.0 - 1e-12)));
    }

    #[test]
    fn placebo_ranks_injected_effect_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t_len = 40;
        let t0 = 30;
        let common: Vec<f64> = (0..t_len).map(|t| (t as f64 * 0.4).sin()).collect();
        let mut noise = || 0.05 * rng.sample::<f64, _>(StandardNormal);
        let donors = DMatrix::from_fn(7, t_len, |_, t| common[t] + noise());
        let treated = DVector::from_fn(t_len, |t, _| {
            common[t] + noise() + if t >= t0 { 1.0 } else { 0.0 }
        });
        let panel = PanelMatrix::from_dense(donors, treated, t0).unwrap();
        let cfg = EstimateConfig::new(ThresholdRule::FixedRank(2), RegressionConfig::default());
        let report = placebo_study(&panel, &cfg, false).unwrap();
        assert_eq!(report.entries.len(), 8);
        assert_eq!(report.treated_rank, Some(1));
        let mut ranks: Vec<usize> = report.entries.iter().filter_map(|e| e.rank).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn placebo_needs_enough_units() {
        let panel = PanelMatrix::from_dense(DMatrix::zeros(2, 10), DVector::zeros(10), 8).unwrap();
        assert!(placebo_study(&panel, &EstimateConfig::default(), false).is_err());
        assert!(placebo_study(&panel, &EstimateConfig::default(), true).is_ok());
    }
}
