use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rsc_core::denoise::ThresholdRule;
use rsc_core::learners::{Method, MethodKind, RegressionConfig, DEFAULT_MIN_TRAIN};
use rsc_core::pipeline::{EstimateConfig, PriorChoice, Projection};
use serde_json::Value;

use crate::Failure;

#[derive(Parser, Debug)]
#[command(name = "rsc", version, about = "Robust synthetic control estimation")]
pub struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// JSON file whose keys (flag names) override command-line flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base random seed for `simulate` and `bench`.
    #[arg(long, global = true, env = "RSC_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Threshold the donor matrix and write the de-noised estimate.
    Denoise(DenoiseArgs),
    /// Estimate the treated unit's counterfactual trajectory.
    Estimate(EstimateArgs),
    /// Re-estimate with every unit treated in turn.
    Placebo(PlaceboArgs),
    /// Bayesian weights and predictive band.
    Bayes(BayesArgs),
    /// Generate a synthetic panel and its true means.
    Simulate(SimulateArgs),
    /// Noise sweep on synthetic panels, with and without de-noising.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct PanelArgs {
    /// Panel CSV: one row per unit, one column per period.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Label of the treated unit.
    #[arg(long, value_name = "LABEL")]
    pub treated: String,
    /// Label of the last pre-intervention period.
    #[arg(long, value_name = "LABEL")]
    pub t0: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodName {
    Ols,
    Ridge,
    Lasso,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProjectName {
    Denoised,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub enum EtaArg {
    Value(f64),
    Grid(Vec<f64>),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Regression used for the weights.
    #[arg(long, value_enum, default_value = "ols")]
    pub method: MethodName,
    /// Penalty `v`, or `cv:v1,v2,...` to select by forward chaining.
    #[arg(long, value_parser = parse_eta, value_name = "ETA")]
    pub eta: Option<EtaArg>,
    /// Threshold rule: `rank:k`, `value:mu`, `universal:w` or `cv:k1,k2,...`.
    #[arg(long, value_parser = parse_rule, default_value = "universal:0.5", value_name = "RULE")]
    pub mu: ThresholdRule,
    /// First forward-chaining validation period.
    #[arg(long, default_value_t = DEFAULT_MIN_TRAIN)]
    pub min_train: usize,
    /// Post-period donor values used for projection.
    #[arg(long, value_enum, default_value = "denoised")]
    pub project: ProjectName,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    /// Panel CSV: one row per unit, one column per period.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Treated unit label (default: first row).
    #[arg(long, value_name = "LABEL")]
    pub treated: Option<String>,
    /// Last pre-intervention period (default: second-to-last column).
    #[arg(long, value_name = "LABEL")]
    pub t0: Option<String>,
    /// Threshold rule: `rank:k`, `value:mu`, `universal:w` or `cv:k1,k2,...`.
    #[arg(long, value_parser = parse_rule, default_value = "universal:0.5", value_name = "RULE")]
    pub mu: ThresholdRule,
    /// CSV for the de-noised donors; a `.json` summary is written beside it.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Use the block-averaged estimator with `gamma:g`.
    #[arg(long, value_parser = parse_gamma, value_name = "gamma:G")]
    pub aggregate: Option<f64>,
    /// Add a posterior predictive band: `alpha:v` or `from-cv`.
    #[arg(long, value_parser = parse_prior, value_name = "PRIOR")]
    pub bayes: Option<PriorChoice>,
    /// Also run a placebo study and report the treated unit's rank.
    #[arg(long)]
    pub placebo: bool,
    /// JSON report path (default: stdout).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlaceboArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Keep the treated unit in every placebo donor pool.
    #[arg(long)]
    pub include_treated: bool,
    /// JSON report path (default: stdout).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BayesArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Prior precision: `alpha:v` or `from-cv`.
    #[arg(long, value_parser = parse_prior, default_value = "alpha:1", value_name = "PRIOR")]
    pub prior: PriorChoice,
    /// JSON report path (default: stdout).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON model spec.
    #[arg(long, value_name = "PATH")]
    pub spec: PathBuf,
    /// `panel.csv,truth.csv`.
    #[arg(long, value_parser = parse_output_pair, value_name = "PANEL,TRUTH")]
    pub output: (PathBuf, PathBuf),
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Noise standard deviations.
    #[arg(long, value_parser = parse_grid, default_value = "0.1,0.4,0.7,1.3,1.9,2.5,3.1")]
    pub grid: Grid,
    /// Seeds averaged per noise level.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Units per panel, treated included.
    #[arg(long, default_value_t = 50)]
    pub n_units: usize,
    /// Periods per panel.
    #[arg(long, default_value_t = 500)]
    pub t_len: usize,
    /// Pre-intervention periods.
    #[arg(long, default_value_t = 400)]
    pub t0: usize,
    /// Observation probability of donor entries.
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    /// Threshold rule, as for `estimate`.
    #[arg(long, value_parser = parse_rule, default_value = "rank:2", value_name = "RULE")]
    pub mu: ThresholdRule,
    /// Regression used for the weights.
    #[arg(long, value_enum, default_value = "ols")]
    pub method: MethodName,
    /// Penalty for ridge or LASSO.
    #[arg(long, value_parser = parse_eta, value_name = "ETA")]
    pub eta: Option<EtaArg>,
    /// CSV report path (default: stdout).
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

fn parse_number(s: &str) -> Result<f64, String> {
    let x: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    let values = s
        .split(',')
        .map(parse_number)
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err("empty list".into());
    }
    Ok(values)
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let grid = parse_f64_list(s)?;
    if grid.iter().any(|x| *x < 0.0) {
        return Err("noise levels must be nonnegative".into());
    }
    Ok(Grid(grid))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|k| {
            k.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{k}` is not a rank"))
        })
        .collect()
}

pub fn parse_rule(s: &str) -> Result<ThresholdRule, String> {
    let (kind, arg) = s
        .split_once(':')
        .ok_or_else(|| format!("expected rank:k, value:mu, universal:w or cv:k1,k2; got `{s}`"))?;
    let rule = match kind {
        "rank" => ThresholdRule::FixedRank(
            arg.trim()
                .parse()
                .map_err(|_| format!("`{arg}` is not a rank"))?,
        ),
        "value" => ThresholdRule::FixedValue(parse_number(arg)?),
        "universal" => ThresholdRule::Universal(parse_number(arg)?),
        "cv" => ThresholdRule::ForwardChainCv(parse_usize_list(arg)?),
        other => return Err(format!("unknown threshold rule `{other}`")),
    };
    rule.validate().map_err(|e| e.to_string())?;
    Ok(rule)
}

pub fn parse_eta(s: &str) -> Result<EtaArg, String> {
    let arg = match s.strip_prefix("cv:") {
        Some(list) => EtaArg::Grid(parse_f64_list(list)?),
        None => EtaArg::Value(parse_number(s)?),
    };
    let ok = match &arg {
        EtaArg::Value(v) => *v >= 0.0,
        EtaArg::Grid(g) => g.iter().all(|v| *v >= 0.0),
    };
    if ok {
        Ok(arg)
    } else {
        Err("penalties must be nonnegative".into())
    }
}

pub fn parse_prior(s: &str) -> Result<PriorChoice, String> {
    if s == "from-cv" {
        return Ok(PriorChoice::FromCv);
    }
    let v = s
        .strip_prefix("alpha:")
        .ok_or_else(|| format!("expected alpha:v or from-cv, got `{s}`"))?;
    let alpha = parse_number(v)?;
    if alpha > 0.0 {
        Ok(PriorChoice::Alpha(alpha))
    } else {
        Err("alpha must be positive".into())
    }
}

pub fn parse_gamma(s: &str) -> Result<f64, String> {
    let v = s
        .strip_prefix("gamma:")
        .ok_or_else(|| format!("expected gamma:g, got `{s}`"))?;
    let gamma = parse_number(v)?;
    if gamma > 0.0 && gamma < 0.5 {
        Ok(gamma)
    } else {
        Err("gamma must lie in (0, 0.5)".into())
    }
}

fn parse_output_pair(s: &str) -> Result<(PathBuf, PathBuf), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err("expected two comma-separated paths".into()),
    }
}

pub fn method_name(kind: MethodKind) -> &'static str {
    match kind {
        MethodKind::Ols => "ols",
        MethodKind::Ridge => "ridge",
        MethodKind::Lasso => "lasso",
    }
}

/// Builds the regression method, penalty grid and selection rule from flags.
pub fn regression_from(
    method: MethodName,
    eta: Option<&EtaArg>,
) -> Result<(RegressionConfig, Option<Vec<f64>>), Failure> {
    let method = match (method, eta) {
        (MethodName::Ols, None) => Method::Ols,
        (MethodName::Ols, Some(_)) => {
            return Err(Failure::validation("--eta applies to ridge and lasso only"))
        }
        (_, None) => {
            return Err(Failure::validation("ridge and lasso need --eta"));
        }
        (MethodName::Ridge, Some(EtaArg::Value(v))) => Method::Ridge { eta: *v },
        (MethodName::Lasso, Some(EtaArg::Value(v))) => Method::Lasso { eta: *v },
        (MethodName::Ridge, Some(EtaArg::Grid(g))) => Method::Ridge { eta: g[0] },
        (MethodName::Lasso, Some(EtaArg::Grid(g))) => Method::Lasso { eta: g[0] },
    };
    let grid = match eta {
        Some(EtaArg::Grid(g)) => Some(g.clone()),
        _ => None,
    };
    let reg = RegressionConfig::new(method);
    reg.validate().map_err(Failure::from)?;
    Ok((reg, grid))
}

impl ModelArgs {
    pub fn estimate_config(&self, bayes: Option<PriorChoice>) -> Result<EstimateConfig, Failure> {
        let (regression, eta_grid) = regression_from(self.method, self.eta.as_ref())?;
        let cfg = EstimateConfig {
            rule: self.mu.clone(),
            regression,
            eta_grid,
            min_train: self.min_train,
            bayes,
            projection: match self.project {
                ProjectName::Denoised => Projection::Denoised,
                ProjectName::Raw => Projection::Raw,
            },
        };
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

/// Value of `--config` in raw arguments, if any.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let arg = arg.to_string_lossy();
        if arg == "--" {
            break;
        }
        if arg == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Turns config-file entries into trailing flags; later flags win.
fn config_tokens(argv: &[OsString], path: &PathBuf) -> Result<Vec<OsString>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
    let json: Value = serde_json::from_str(&text).map_err(|e| {
        Failure::validation(format!("config {} is not valid JSON: {e}", path.display()))
    })?;
    let Value::Object(map) = json else {
        return Err(Failure::validation("config file must hold a JSON object"));
    };

    let root = Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a.to_string_lossy().as_ref()))
        .ok_or_else(|| Failure::validation("a subcommand is required"))?;
    let args: Vec<&clap::Arg> = root.get_arguments().chain(sub.get_arguments()).collect();

    let mut tokens = Vec::new();
    for (key, value) in map {
        let arg = args
            .iter()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Failure::validation(format!("unknown config key `{key}`")))?;
        let flag = format!("--{key}");
        let takes_value = arg.get_action().takes_values();
        match (&value, takes_value) {
            (Value::Bool(true), false) => tokens.push(flag.into()),
            (Value::Bool(false), false) => {}
            (_, false) => {
                return Err(Failure::validation(format!(
                    "config key `{key}` must be true or false"
                )))
            }
            (v, true) => {
                tokens.push(flag.into());
                tokens.push(scalar_text(key.as_str(), v)?.into());
            }
        }
    }
    Ok(tokens)
}

fn scalar_text(key: &str, v: &Value) -> Result<String, Failure> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|x| match x {
                Value::Array(_) | Value::Object(_) | Value::Null => Err(Failure::validation(
                    format!("config key `{key}` has a nested value"),
                )),
                other => scalar_text(key, other),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|parts| parts.join(",")),
        _ => Err(Failure::validation(format!(
            "config key `{key}` has an unsupported value"
        ))),
    }
}

fn overriding(cmd: clap::Command) -> clap::Command {
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    let mut cmd = cmd.args_override_self(true);
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

/// Parses arguments, merging a `--config` file over the flags.
pub fn parse(mut argv: Vec<OsString>) -> Result<Cli, Failure> {
    if let Some(path) = config_path(&argv) {
        let extra = config_tokens(&argv, &path)?;
        argv.extend(extra);
    }
    let matches = overriding(Cli::command())
        .try_get_matches_from(argv)
        .map_err(Failure::Usage)?;
    Cli::from_arg_matches(&matches).map_err(Failure::Usage)
}
