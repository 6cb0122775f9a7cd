use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rsc_core::aggregate::{consistent_estimate, AggregationConfig};
use rsc_core::denoise::{svt_denoise, ThresholdRule};
use rsc_core::panel::{
    apply_bounds, fit_bounds, load_csv, write_csv, BoundsTransform, Direction, PanelMatrix,
};
use rsc_core::pipeline::{
    estimate_counterfactual, placebo_study, CounterfactualResult, EstimateConfig, PriorChoice,
    Projection,
};
use rsc_core::synthgen::{generate_panel, run_benchmark, LatentModelSpec};
use rsc_core::DMatrix;
use serde::Serialize;

use crate::cli::{
    method_name, regression_from, BayesArgs, BenchArgs, Cli, Command, DenoiseArgs, EstimateArgs,
    EtaArg, MethodName, ModelArgs, PanelArgs, PlaceboArgs, ProjectName, SimulateArgs,
};
use crate::report::*;
use crate::Failure;

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Denoise(args) => denoise(&args),
        Command::Estimate(args) => estimate(&args),
        Command::Placebo(args) => placebo(&args),
        Command::Bayes(args) => bayes(&args),
        Command::Simulate(args) => simulate(&args, cli.seed),
        Command::Bench(args) => bench(&args, cli.seed.unwrap_or(0)),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| Failure::runtime(anyhow::anyhow!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(Failure::runtime)
        }
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::runtime)?;
    text.push('\n');
    write_text(path, &text)
}

fn load_panel(args: &PanelArgs) -> Result<PanelMatrix, Failure> {
    if !args.input.exists() {
        return Err(Failure::validation(format!(
            "input {} does not exist",
            args.input.display()
        )));
    }
    Ok(load_csv(&args.input, &args.treated, &args.t0)?)
}

fn bounds(t: &BoundsTransform) -> Bounds {
    Bounds {
        lower: t.lower(),
        upper: t.upper(),
    }
}

fn echo(command: &'static str, panel: &PanelArgs, model: &ModelArgs) -> ConfigEcho {
    let (eta, eta_grid) = match &model.eta {
        Some(EtaArg::Value(v)) => (Some(*v), None),
        Some(EtaArg::Grid(g)) => (None, Some(g.clone())),
        None => (None, None),
    };
    ConfigEcho {
        command,
        input: panel.input.display().to_string(),
        treated: panel.treated.clone(),
        t0: panel.t0.clone(),
        method: Some(match model.method {
            MethodName::Ols => "ols",
            MethodName::Ridge => "ridge",
            MethodName::Lasso => "lasso",
        }),
        eta,
        eta_grid,
        mu: model.mu.to_string(),
        min_train: Some(model.min_train),
        project: Some(match model.project {
            ProjectName::Denoised => "denoised",
            ProjectName::Raw => "raw",
        }),
        bayes: None,
        aggregate_gamma: None,
        include_treated: None,
    }
}

fn prior_text(p: PriorChoice) -> String {
    match p {
        PriorChoice::Alpha(a) => format!("alpha:{a}"),
        PriorChoice::FromCv => "from-cv".into(),
    }
}

fn series(panel: &PanelMatrix, m1: &[f64], std: Option<&[f64]>) -> Vec<SeriesPoint> {
    panel
        .time_labels()
        .iter()
        .enumerate()
        .map(|(t, label)| {
            let observed = panel.value(0, t);
            SeriesPoint {
                t_label: label.clone(),
                observed,
                counterfactual: m1[t],
                gap: observed.map(|y| y - m1[t]),
                std: std.map(|s| s[t]),
            }
        })
        .collect()
}

fn denoise(args: &DenoiseArgs) -> Result<(), Failure> {
    if args.output.extension().is_some_and(|e| e == "json") {
        return Err(Failure::validation(
            "--output names the CSV; the JSON summary is written beside it",
        ));
    }
    let (treated, t0) = default_labels(&args.input, args.treated.as_deref(), args.t0.as_deref())?;
    let panel = load_csv(&args.input, &treated, &t0)?;
    let transform = fit_bounds(&panel)?;
    let tp = apply_bounds(&panel, &transform, Direction::Forward);
    let d = svt_denoise(&tp, &args.mu)?;
    let m_hat = d.m_hat.map(|x| transform.inverse(x));

    write_matrix_csv(
        &args.output,
        panel.donor_labels(),
        panel.time_labels(),
        &m_hat,
    )?;

    let sidecar = DenoiseSidecar {
        treated,
        t0,
        mu: args.mu.to_string(),
        p_hat: d.p_hat,
        sigma2_hat: d.sigma2_hat,
        mu_used: d.mu_used,
        rank: d.rank(),
        kept_singular_values: d.kept.clone(),
        bounds: bounds(&transform),
    };
    write_json(Some(&args.output.with_extension("json")), &sidecar)
}

/// First data row and second-to-last period when labels are not given.
fn default_labels(
    path: &PathBuf,
    treated: Option<&str>,
    t0: Option<&str>,
) -> Result<(String, String), Failure> {
    if !path.exists() {
        return Err(Failure::validation(format!(
            "input {} does not exist",
            path.display()
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::validation(e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Failure::validation(e.to_string()))?
        .clone();
    let t0 = match t0 {
        Some(t) => t.to_string(),
        None => {
            let n = header.len();
            if n < 3 {
                return Err(Failure::validation("panel needs at least 2 periods"));
            }
            header[n - 2].to_string()
        }
    };
    let treated = match treated {
        Some(t) => t.to_string(),
        None => rdr
            .records()
            .next()
            .transpose()
            .map_err(|e| Failure::validation(e.to_string()))?
            .and_then(|r| r.get(0).map(str::to_string))
            .ok_or_else(|| Failure::validation("panel has no rows"))?,
    };
    Ok((treated, t0))
}

fn denoise_echo(res: &CounterfactualResult) -> DenoiseEcho {
    DenoiseEcho {
        mu_used: res.denoise.mu_used,
        rank: res.denoise.rank,
        kept_singular_values: res.denoise.kept_singular_values.clone(),
        p_hat: res.denoise.p_hat,
        sigma2_hat: res.denoise.sigma2_hat,
        eta_used: res.regression.method.eta(),
        bounds: bounds(&res.transform),
        aggregation: None,
    }
}

fn placebo_rank(panel: &PanelMatrix, cfg: &EstimateConfig) -> Result<Option<usize>, Failure> {
    let cfg = EstimateConfig {
        bayes: None,
        ..cfg.clone()
    };
    Ok(placebo_study(panel, &cfg, false)?.treated_rank)
}

fn estimate(args: &EstimateArgs) -> Result<(), Failure> {
    let panel = load_panel(&args.panel)?;
    let cfg = args.model.estimate_config(args.bayes)?;
    let mut config_echo = echo("estimate", &args.panel, &args.model);
    config_echo.bayes = args.bayes.map(prior_text);
    config_echo.aggregate_gamma = args.aggregate;

    let report = match args.aggregate {
        None => {
            let res = estimate_counterfactual(&panel, &cfg)?;
            let std = res.bayes_band.as_ref().map(|b| b.std.as_slice().to_vec());
            EstimateReport {
                config_echo,
                weights: res.weights.beta.as_slice().to_vec(),
                donor_labels: panel.donor_labels().to_vec(),
                denoise: denoise_echo(&res),
                series: series(&panel, res.m1_hat.as_slice(), std.as_deref()),
                pre_mse: res.pre_mse,
                placebo_rank: None,
                selection: res.selection.clone(),
            }
        }
        Some(gamma) => {
            if args.bayes.is_some() || cfg.eta_grid.is_some() {
                return Err(Failure::validation(
                    "--aggregate does not combine with --bayes or a cross-validated --eta",
                ));
            }
            let omega = match cfg.rule {
                ThresholdRule::Universal(w) => w,
                _ => {
                    return Err(Failure::validation(
                        "--aggregate uses the universal threshold; pass --mu universal:w",
                    ))
                }
            };
            let agg = AggregationConfig::new(gamma)?;
            let fit = consistent_estimate(&panel, &agg, &cfg.regression, omega)?;
            let post = match cfg.projection {
                Projection::Denoised => &fit.post_denoised,
                Projection::Raw => &fit.post_raw,
            };
            let m1: Vec<f64> = fit.pre_raw.iter().chain(post.iter()).copied().collect();
            let points = series(&panel, &m1, None);
            let pre: Vec<f64> = points[..panel.t0()].iter().filter_map(|p| p.gap).collect();
            let pre_mse = pre.iter().map(|g| g * g).sum::<f64>() / pre.len() as f64;
            EstimateReport {
                config_echo,
                weights: fit.weights.beta.as_slice().to_vec(),
                donor_labels: panel.donor_labels().to_vec(),
                denoise: DenoiseEcho {
                    mu_used: fit.mu_used,
                    rank: fit.rank,
                    kept_singular_values: Vec::new(),
                    p_hat: fit.p_hat,
                    sigma2_hat: Some(fit.sigma2_hat),
                    eta_used: fit.weights.eta,
                    bounds: bounds(&fit.transform),
                    aggregation: Some(Aggregation {
                        gamma,
                        blocks: fit.aggregated.delta,
                        block_width: fit.aggregated.tau,
                    }),
                },
                series: points,
                pre_mse,
                placebo_rank: None,
                selection: None,
            }
        }
    };
    let report = EstimateReport {
        placebo_rank: if args.placebo {
            placebo_rank(&panel, &cfg)?
        } else {
            None
        },
        ..report
    };
    write_json(args.output.as_deref(), &report)
}

fn placebo(args: &PlaceboArgs) -> Result<(), Failure> {
    let panel = load_panel(&args.panel)?;
    let cfg = args.model.estimate_config(None)?;
    let report = placebo_study(&panel, &cfg, args.include_treated)?;
    let mut config_echo = echo("placebo", &args.panel, &args.model);
    config_echo.include_treated = Some(args.include_treated);
    let labels = panel.time_labels();
    let units = report
        .entries
        .iter()
        .map(|e| match &e.outcome {
            Ok(run) => PlaceboUnit {
                unit: e.label.clone(),
                rank: e.rank,
                statistic: Some(run.statistic),
                pre_rmse: Some(run.pre_rmse),
                mean_abs_post_gap: Some(run.mean_abs_post_gap),
                error: None,
                gaps: run
                    .gaps
                    .iter()
                    .enumerate()
                    .filter_map(|(t, g)| {
                        g.map(|gap| GapPoint {
                            t_label: labels[t].clone(),
                            gap,
                        })
                    })
                    .collect(),
            },
            Err(msg) => PlaceboUnit {
                unit: e.label.clone(),
                rank: None,
                statistic: None,
                pre_rmse: None,
                mean_abs_post_gap: None,
                error: Some(msg.clone()),
                gaps: Vec::new(),
            },
        })
        .collect();
    write_json(
        args.output.as_deref(),
        &PlaceboReportJson {
            config_echo,
            treated: panel.treated_label().to_string(),
            placebo_rank: report.treated_rank,
            units,
        },
    )
}

fn bayes(args: &BayesArgs) -> Result<(), Failure> {
    let panel = load_panel(&args.panel)?;
    let cfg = args.model.estimate_config(Some(args.prior))?;
    let res = estimate_counterfactual(&panel, &cfg)?;
    let band = res
        .bayes_band
        .as_ref()
        .ok_or_else(|| Failure::runtime(anyhow::anyhow!("posterior band missing")))?;
    let mut config_echo = echo("bayes", &args.panel, &args.model);
    config_echo.bayes = Some(prior_text(args.prior));
    let cov = &band.posterior.cov;
    let series = panel
        .time_labels()
        .iter()
        .enumerate()
        .map(|(t, label)| BandPoint {
            t: label.clone(),
            observed: panel.value(0, t),
            mean: band.mean[t],
            std: band.std[t],
        })
        .collect();
    write_json(
        args.output.as_deref(),
        &BayesReport {
            config_echo,
            alpha: band.alpha,
            alpha_floored: band.alpha_floored,
            sigma2_hat: band.sigma2_hat,
            donor_labels: panel.donor_labels().to_vec(),
            posterior_mean: band.posterior.mean.as_slice().to_vec(),
            posterior_cov: (0..cov.nrows())
                .map(|i| cov.row(i).iter().copied().collect())
                .collect(),
            series,
        },
    )
}

fn simulate(args: &SimulateArgs, seed: Option<u64>) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.spec).map_err(|e| {
        Failure::validation(format!("cannot read spec {}: {e}", args.spec.display()))
    })?;
    let mut spec: LatentModelSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::validation(format!("invalid spec: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let synth = generate_panel(&spec)?;
    let (panel_path, truth_path) = &args.output;
    write_csv(&synth.panel, panel_path)?;
    write_matrix_csv(
        truth_path,
        synth.panel.unit_labels(),
        synth.panel.time_labels(),
        &synth.truth,
    )
}

fn write_matrix_csv(
    path: &Path,
    rows: &[String],
    cols: &[String],
    m: &DMatrix<f64>,
) -> Result<(), Failure> {
    let mut wtr = csv::Writer::from_path(path).map_err(Failure::runtime)?;
    let header = std::iter::once("unit".to_string()).chain(cols.iter().cloned());
    wtr.write_record(header).map_err(Failure::runtime)?;
    for (i, label) in rows.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(m.row(i).iter().map(|x| x.to_string()));
        wtr.write_record(&row).map_err(Failure::runtime)?;
    }
    wtr.flush().map_err(Failure::runtime)
}

#[derive(Serialize)]
struct BenchLine {
    noise: f64,
    pre_mse: f64,
    post_mse: f64,
    no_denoise_pre_mse: f64,
    no_denoise_post_mse: f64,
}

fn bench(args: &BenchArgs, seed: u64) -> Result<(), Failure> {
    let (regression, eta_grid) = regression_from(args.method, args.eta.as_ref())?;
    let cfg = EstimateConfig {
        eta_grid,
        ..EstimateConfig::new(args.mu.clone(), regression)
    };
    cfg.validate()?;
    let template = LatentModelSpec {
        p_observe: args.p,
        seed,
        ..LatentModelSpec::periodic(args.n_units, args.t_len, args.t0)
    };
    template.validate()?;
    let grid = &args.grid.0;
    let with = run_benchmark(grid, &template, true, args.seeds, &cfg)?;
    let without = run_benchmark(grid, &template, false, args.seeds, &cfg)?;
    eprintln!(
        "bench: {} noise levels x {} seeds, method {}, threshold {}",
        grid.len(),
        args.seeds,
        method_name(cfg.regression.method.kind()),
        cfg.rule
    );

    let mut wtr = csv::Writer::from_writer(Vec::new());
    for (a, b) in with.iter().zip(&without) {
        wtr.serialize(BenchLine {
            noise: a.noise,
            pre_mse: a.pre_mse,
            post_mse: a.post_mse,
            no_denoise_pre_mse: b.pre_mse,
            no_denoise_post_mse: b.post_mse,
        })
        .map_err(Failure::runtime)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Failure::runtime(anyhow::anyhow!("{e}")))?;
    write_text(args.output.as_deref(), &String::from_utf8_lossy(&bytes))
}
