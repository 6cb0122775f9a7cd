//! JSON shapes written by the subcommands. Field order is the output order.

use rsc_core::learners::CvRecord;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct ConfigEcho {
    pub command: &'static str,
    pub input: String,
    pub treated: String,
    pub t0: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_grid: Option<Vec<f64>>,
    pub mu: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub project: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_treated: Option<bool>,
}

#[derive(Debug, Serialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Serialize)]
pub struct Aggregation {
    pub gamma: f64,
    pub blocks: usize,
    pub block_width: usize,
}

#[derive(Debug, Serialize)]
pub struct DenoiseEcho {
    pub mu_used: f64,
    pub rank: usize,
    pub kept_singular_values: Vec<f64>,
    pub p_hat: f64,
    pub sigma2_hat: Option<f64>,
    pub eta_used: f64,
    pub bounds: Bounds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Serialize)]
pub struct SeriesPoint {
    pub t_label: String,
    pub observed: Option<f64>,
    pub counterfactual: f64,
    pub gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub config_echo: ConfigEcho,
    pub weights: Vec<f64>,
    pub donor_labels: Vec<String>,
    pub denoise: DenoiseEcho,
    pub series: Vec<SeriesPoint>,
    pub pre_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placebo_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<CvRecord>>,
}

#[derive(Debug, Serialize)]
pub struct GapPoint {
    pub t_label: String,
    pub gap: f64,
}

#[derive(Debug, Serialize)]
pub struct PlaceboUnit {
    pub unit: String,
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_post_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub gaps: Vec<GapPoint>,
}

#[derive(Debug, Serialize)]
pub struct PlaceboReportJson {
    pub config_echo: ConfigEcho,
    pub treated: String,
    pub placebo_rank: Option<usize>,
    pub units: Vec<PlaceboUnit>,
}

#[derive(Debug, Serialize)]
pub struct BandPoint {
    pub t: String,
    pub observed: Option<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Serialize)]
pub struct BayesReport {
    pub config_echo: ConfigEcho,
    pub alpha: f64,
    pub alpha_floored: bool,
    /// Original units.
    pub sigma2_hat: f64,
    pub donor_labels: Vec<String>,
    pub posterior_mean: Vec<f64>,
    pub posterior_cov: Vec<Vec<f64>>,
    pub series: Vec<BandPoint>,
}

#[derive(Debug, Serialize)]
pub struct DenoiseSidecar {
    pub treated: String,
    pub t0: String,
    pub mu: String,
    pub p_hat: f64,
    pub sigma2_hat: Option<f64>,
    pub mu_used: f64,
    pub rank: usize,
    pub kept_singular_values: Vec<f64>,
    pub bounds: Bounds,
}
