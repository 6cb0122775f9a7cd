//! Singular value thresholding of the zero-filled donor matrix.
//!
//! Given `Y = Σ sᵢ uᵢ vᵢᵀ`, the estimator keeps `S = {i : sᵢ ≥ μ}` and
//! rescales by the observed fraction: `M̂ = (1/p̂) Σ_{i∈S} sᵢ uᵢ vᵢᵀ`.
//! Entries of `M̂` are not clamped.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::learners::{self, Method, RegressionConfig};
use crate::linalg::Svd;
use crate::panel::PanelMatrix;
use crate::{Error, Result};

/// How the singular value threshold `μ` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Keep the top `k` singular values (all nonzero ones if fewer).
    FixedRank(usize),
    /// Keep singular values `≥ μ`.
    FixedValue(f64),
    /// The data-driven universal threshold with parameter `ω ∈ (0.1, 1)`.
    Universal(f64),
    /// Choose among candidate ranks by forward-chaining validation of an
    /// OLS synthetic control.
    ForwardChainCv(Vec<usize>),
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThresholdRule::FixedRank(0) => Err(Error::InvalidParameter(
                "rank threshold must be positive".into(),
            )),
            ThresholdRule::FixedValue(mu) if !(mu.is_finite() && *mu >= 0.0) => {
                Err(Error::InvalidParameter(format!(
                    "threshold must be a nonnegative number, got {mu}"
                )))
            }
            ThresholdRule::Universal(omega) if !(*omega > 0.1 && *omega < 1.0) => Err(
                Error::InvalidParameter(format!("omega must lie in (0.1, 1), got {omega}")),
            ),
            ThresholdRule::ForwardChainCv(ranks) if ranks.is_empty() || ranks.contains(&0) => {
                Err(Error::InvalidParameter(
                    "rank candidates must be a nonempty list of positive ranks".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdRule::FixedRank(k) => write!(f, "rank:{k}"),
            ThresholdRule::FixedValue(mu) => write!(f, "value:{mu}"),
            ThresholdRule::Universal(omega) => write!(f, "universal:{omega}"),
            ThresholdRule::ForwardChainCv(ranks) => {
                let list: Vec<String> = ranks.iter().map(usize::to_string).collect();
                write!(f, "cv:{}", list.join(","))
            }
        }
    }
}

/// The de-noised donor matrix and the quantities used to build it.
#[derive(Debug, Clone)]
pub struct DenoisedMatrix {
    /// `(N−1) × T` estimate of the donor means.
    pub m_hat: DMatrix<f64>,
    /// Kept singular values, descending.
    pub kept: Vec<f64>,
    /// Left singular vectors of the kept components, `(N−1) × |S|`.
    pub left: DMatrix<f64>,
    /// Right singular vectors of the kept components, `T × |S|`.
    pub right: DMatrix<f64>,
    pub p_hat: f64,
    /// Pre-intervention treated-row sample variance; `None` when `T₀ < 2`.
    pub sigma2_hat: Option<f64>,
    pub mu_used: f64,
}

impl DenoisedMatrix {
    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    /// `M̂⁻`, the pre-intervention columns.
    pub fn pre(&self, t0: usize) -> DMatrix<f64> {
        self.m_hat.columns(0, t0).into_owned()
    }

    /// `(M̂)ᵀ U_S`: the time-by-component coordinates of `M̂` in the basis
    /// of its kept left singular vectors, i.e. `V_S diag(s_S) / p̂`.
    ///
    /// Regressions whose penalty is rotation invariant (OLS, ridge) give
    /// identical fitted values on this `T × |S|` design as on `(M̂)ᵀ`.
    pub fn time_coordinates(&self) -> DMatrix<f64> {
        let mut z = self.right.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col *= self.kept[j] / self.p_hat;
        }
        z
    }
}

/// `max(#observed / ((N−1)·T), 1 / ((N−1)·T))`.
pub fn estimate_p_hat(panel: &PanelMatrix) -> f64 {
    let cells = (panel.n_donors() * panel.n_periods()) as f64;
    (panel.observed_donor_cells() as f64 / cells).max(1.0 / cells)
}

/// Bias-corrected sample variance of the treated row over `t ≤ T₀`.
pub fn estimate_sigma2_hat(panel: &PanelMatrix) -> Result<f64> {
    let t0 = panel.t0();
    if t0 < 2 {
        return Err(Error::InvalidParameter(format!(
            "noise variance estimate needs at least 2 pre-intervention periods, got {t0}"
        )));
    }
    let pre = panel.treated().rows(0, t0);
    let mean = pre.mean();
    Ok(pre.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (t0 - 1) as f64)
}

/// `μ = (2 + ω) · sqrt(T · (σ̂² p̂ + p̂ (1 − p̂)))`.
pub fn universal_threshold(sigma2_hat: f64, p_hat: f64, t_len: usize, omega: f64) -> Result<f64> {
    if !(omega > 0.1 && omega < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "omega must lie in (0.1, 1), got {omega}"
        )));
    }
    if !(p_hat > 0.0 && p_hat <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "observation fraction must lie in (0, 1], got {p_hat}"
        )));
    }
    if !(sigma2_hat >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be nonnegative, got {sigma2_hat}"
        )));
    }
    let t = t_len as f64;
    Ok((2.0 + omega) * (t * (sigma2_hat * p_hat + p_hat * (1.0 - p_hat))).sqrt())
}

/// Mean squared entrywise difference.
pub fn matrix_mse(m_hat: &DMatrix<f64>, m_true: &DMatrix<f64>) -> Result<f64> {
    if m_hat.shape() != m_true.shape() || m_hat.is_empty() {
        return Err(Error::shape(
            format!("{:?}", m_true.shape()),
            format!("{:?}", m_hat.shape()),
        ));
    }
    Ok((m_hat - m_true).norm_squared() / m_hat.len() as f64)
}

/// SVD of the zero-filled donor matrix, computed once and thresholded on
/// demand.
#[derive(Debug, Clone)]
pub struct DonorSvd {
    svd: Svd,
    y: DMatrix<f64>,
    p_hat: f64,
    sigma2_hat: Option<f64>,
    t_len: usize,
}

impl DonorSvd {
    pub fn new(panel: &PanelMatrix) -> Self {
        DonorSvd {
            svd: Svd::new(panel.donors()),
            y: panel.donors().clone(),
            p_hat: estimate_p_hat(panel),
            sigma2_hat: estimate_sigma2_hat(panel).ok(),
            t_len: panel.n_periods(),
        }
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.svd.s
    }

    pub fn p_hat(&self) -> f64 {
        self.p_hat
    }

    pub fn sigma2_hat(&self) -> Option<f64> {
        self.sigma2_hat
    }

    /// Resolves a non-CV rule to its threshold `μ`.
    pub fn resolve_mu(&self, rule: &ThresholdRule) -> Result<f64> {
        rule.validate()?;
        match rule {
            ThresholdRule::FixedValue(mu) => Ok(*mu),
            ThresholdRule::FixedRank(k) => {
                let nonzero = self.svd.numerical_rank();
                let keep = (*k).min(nonzero);
                Ok(if keep == 0 {
                    // Nothing to keep: any positive threshold above the zero spectrum.
                    f64::MIN_POSITIVE
                } else {
                    self.svd.s[keep - 1]
                })
            }
            ThresholdRule::Universal(omega) => {
                let sigma2 = self.sigma2_hat.ok_or_else(|| {
                    Error::InvalidParameter(
                        "universal threshold needs at least 2 pre-intervention periods".into(),
                    )
                })?;
                universal_threshold(sigma2, self.p_hat, self.t_len, *omega)
            }
            ThresholdRule::ForwardChainCv(_) => Err(Error::InvalidParameter(
                "cross-validated rules are resolved by forward chaining".into(),
            )),
        }
    }

    /// Number of singular values `≥ mu`.
    pub fn kept_count(&self, mu: f64) -> usize {
        self.svd.s.iter().take_while(|&&s| s >= mu).count()
    }

    /// Builds `M̂` for threshold `mu`. At `mu = 0` this is exactly `Y / p̂`.
    pub fn threshold(&self, mu: f64) -> DenoisedMatrix {
        let k = self.kept_count(mu);
        let m_hat = if mu == 0.0 {
            &self.y / self.p_hat
        } else {
            self.svd.reconstruct(k) / self.p_hat
        };
        DenoisedMatrix {
            m_hat,
            kept: self.svd.s[..k].to_vec(),
            left: self.svd.u.columns(0, k).into_owned(),
            right: self.svd.v.columns(0, k).into_owned(),
            p_hat: self.p_hat,
            sigma2_hat: self.sigma2_hat,
            mu_used: mu,
        }
    }
}

/// De-noises the donor block of `panel` under `rule`.
///
/// A threshold above `s₁` is not an error: the result is the zero matrix
/// with an empty kept set.
pub fn svt_denoise(panel: &PanelMatrix, rule: &ThresholdRule) -> Result<DenoisedMatrix> {
    rule.validate()?;
    let dsvd = DonorSvd::new(panel);
    let mu = match rule {
        ThresholdRule::ForwardChainCv(ranks) => {
            if panel.t0() < 3 {
                return Err(Error::InvalidParameter(
                    "forward-chaining rank selection needs T0 >= 3".into(),
                ));
            }
            let candidates: Vec<ThresholdRule> =
                ranks.iter().map(|&k| ThresholdRule::FixedRank(k)).collect();
            let min_train = learners::DEFAULT_MIN_TRAIN.min(panel.t0() - 1).max(2);
            let selection = learners::forward_chain_select_with(
                panel,
                &dsvd,
                &candidates,
                &[0.0],
                &RegressionConfig::new(Method::Ols),
                min_train,
            )?;
            selection.mu_used
        }
        _ => dsvd.resolve_mu(rule)?,
    };
    Ok(dsvd.threshold(mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DVector, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel_from(donors: DMatrix<f64>, t0: usize) -> PanelMatrix {
        let t = donors.ncols();
        let treated = DVector::from_fn(t, |i, _| (i as f64).sin());
        PanelMatrix::from_dense(donors, treated, t0).unwrap()
    }

    fn masked_panel(n: usize, t: usize, observed: usize) -> PanelMatrix {
        let donors = DMatrix::from_element(n, t, 1.0);
        let mask = DMatrix::from_fn(n, t, |i, j| i * t + j < observed);
        let units = std::iter::once("T".to_string())
            .chain((0..n).map(|i| format!("d{i}")))
            .collect();
        let times = (0..t).map(|j| j.to_string()).collect();
        PanelMatrix::new(
            donors,
            mask,
            DVector::from_element(t, 1.0),
            vec![true; t],
            2,
            units,
            times,
        )
        .unwrap()
    }

    #[test]
    fn p_hat_examples() {
        assert!((estimate_p_hat(&masked_panel(10, 10, 60)) - 0.6).abs() < 1e-15);
        assert!((estimate_p_hat(&masked_panel(10, 10, 0)) - 0.01).abs() < 1e-15);
        assert_eq!(estimate_p_hat(&masked_panel(10, 10, 100)), 1.0);
    }

    fn treated_panel(pre: &[f64]) -> PanelMatrix {
        let t = pre.len() + 1;
        let mut treated = pre.to_vec();
        treated.push(0.0);
        PanelMatrix::from_dense(
            DMatrix::from_element(1, t, 1.0),
            DVector::from_vec(treated),
            pre.len(),
        )
        .unwrap()
    }

    #[test]
    fn sigma2_examples() {
        assert_eq!(
            estimate_sigma2_hat(&treated_panel(&[3.0, 3.0, 3.0])).unwrap(),
            0.0
        );
        assert!((estimate_sigma2_hat(&treated_panel(&[0.0, 2.0])).unwrap() - 2.0).abs() < 1e-15);
        let s2 = estimate_sigma2_hat(&treated_panel(&[1.0, -1.0, 1.0, -1.0])).unwrap();
        assert!((s2 - 4.0 / 3.0).abs() < 1e-15);
        assert!(estimate_sigma2_hat(&treated_panel(&[1.0])).is_err());
    }

    #[test]
    fn universal_threshold_examples() {
        assert_eq!(universal_threshold(0.0, 1.0, 100, 0.5).unwrap(), 0.0);
        assert_eq!(universal_threshold(0.0, 1.0, 7, 0.9).unwrap(), 0.0);
        assert!((universal_threshold(1.0, 1.0, 100, 0.5).unwrap() - 25.0).abs() < 1e-12);
        assert!((universal_threshold(0.0, 0.5, 100, 0.5).unwrap() - 12.5).abs() < 1e-12);
        assert!(universal_threshold(1.0, 1.0, 100, 0.1).is_err());
        assert!(universal_threshold(1.0, 1.0, 100, 1.0).is_err());
    }

    #[test]
    fn diag_threshold_drops_small_value() {
        let p = panel_from(DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 1.0]), 1);
        let d = svt_denoise(&p, &ThresholdRule::FixedValue(2.0)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 0.0]);
        assert!((d.m_hat - expected).norm() < 1e-12);
        assert_eq!(d.kept.len(), 1);
    }

    #[test]
    fn zero_matrix_keeps_nothing() {
        let p = panel_from(DMatrix::zeros(3, 4), 2);
        for rule in [ThresholdRule::FixedValue(0.5), ThresholdRule::FixedRank(2)] {
            let d = svt_denoise(&p, &rule).unwrap();
            assert_eq!(d.rank(), 0);
            assert_eq!(d.m_hat, DMatrix::zeros(3, 4));
        }
    }

    #[test]
    fn threshold_above_top_singular_value_is_empty() {
        let p = panel_from(DMatrix::from_element(2, 3, 1.0), 2);
        let d = svt_denoise(&p, &ThresholdRule::FixedValue(1e6)).unwrap();
        assert!(d.kept.is_empty());
        assert_eq!(d.m_hat.norm(), 0.0);
    }

    #[test]
    fn tie_at_threshold_is_kept() {
        let p = panel_from(DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]), 1);
        let d = svt_denoise(&p, &ThresholdRule::FixedValue(1.0)).unwrap();
        assert_eq!(d.rank(), 2);
    }

    #[test]
    fn fixed_rank_larger_than_rank_keeps_nonzero_only() {
        let p = panel_from(
            DMatrix::from_fn(4, 6, |i, j| (i + 1) as f64 * (j + 1) as f64),
            3,
        );
        let d = svt_denoise(&p, &ThresholdRule::FixedRank(10)).unwrap();
        assert_eq!(d.rank(), 1);
        assert!((d.m_hat - p.donors()).norm() < 1e-10);
    }

    #[test]
    fn zero_threshold_is_rescaled_observations() {
        let csv = "unit,1,2,3\nA,1,2,3\nB,5,,7\nC,1,2,1\n";
        let p = crate::panel::read_csv(csv.as_bytes(), "A", "2").unwrap();
        let d = svt_denoise(&p, &ThresholdRule::FixedValue(0.0)).unwrap();
        assert_eq!(d.m_hat, p.donors() / (5.0 / 6.0));
    }

    #[test]
    fn rule_validation() {
        assert!(ThresholdRule::FixedRank(0).validate().is_err());
        assert!(ThresholdRule::FixedValue(-1.0).validate().is_err());
        assert!(ThresholdRule::Universal(0.05).validate().is_err());
        assert!(ThresholdRule::ForwardChainCv(vec![]).validate().is_err());
        assert!(ThresholdRule::Universal(0.5).validate().is_ok());
    }

    #[test]
    fn mse_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matrix_mse(&a, &a).unwrap(), 0.0);
        let x = DMatrix::from_element(1, 1, 3.0);
        let y = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(matrix_mse(&x, &y).unwrap(), 4.0);
        let shifted = a.add_scalar(0.5);
        assert!((matrix_mse(&shifted, &a).unwrap() - 0.25).abs() < 1e-15);
        assert!(matrix_mse(&a, &DMatrix::zeros(1, 2)).is_err());
    }

    /// Reconstruction from the eigendecomposition of `YᵀY`, independent of
    /// the SVD routine.
    fn eig_threshold(y: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(y.transpose() * y);
        let mut out = DMatrix::zeros(y.nrows(), y.ncols());
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            if s >= mu && s > 0.0 {
                let v = eig.eigenvectors.column(i);
                let u = y * v / s;
                out += s * u * v.transpose();
            }
        }
        out
    }

    #[test]
    fn matches_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=8 {
            for t in 2..=8 {
                let y = DMatrix::from_fn(n, t, |_, _| rng.random_range(-1.0..1.0));
                let p = panel_from(y.clone(), 1);
                let s = Svd::new(&y).s;
                // Threshold halfway between two singular values, away from ties.
                let k = rng.random_range(0..s.len());
                let mu = if k + 1 < s.len() {
                    0.5 * (s[k] + s[k + 1])
                } else {
                    0.5 * s[k]
                };
                let d = svt_denoise(&p, &ThresholdRule::FixedValue(mu)).unwrap();
                let oracle = eig_threshold(&y, mu);
                assert!((d.m_hat - oracle).norm() < 1e-8, "n={n} t={t}");
            }
        }
    }

    #[test]
    fn kept_count_monotone_in_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DMatrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0));
        let dsvd = DonorSvd::new(&panel_from(y, 4));
        let mut prev = usize::MAX;
        for i in 0..50 {
            let k = dsvd.kept_count(i as f64 * 0.1);
            assert!(k <= prev);
            prev = k;
        }
    }
}
