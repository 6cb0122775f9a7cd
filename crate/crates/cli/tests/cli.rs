use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn rsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsc"))
        .args(args)
        .env_remove("RSC_SEED")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = rsc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

fn linear() -> String {
    fixture("linear.csv").display().to_string()
}

fn basque() -> String {
    fixture("basque_style.csv").display().to_string()
}

#[test]
fn estimate_on_noiseless_fixture_is_exact() {
    let input = linear();
    let args = [
        "estimate",
        "--input",
        &input,
        "--treated",
        "target",
        "--t0",
        "20",
        "--mu",
        "value:1e-9",
    ];
    let v = ok_json(&args);
    assert!(v["pre_mse"].as_f64().unwrap() < 1e-16);
    let text = String::from_utf8(rsc(&args).stdout).unwrap();
    let pos: Vec<usize> = [
        "\"config_echo\"",
        "\"weights\"",
        "\"series\"",
        "\"pre_mse\"",
    ]
    .iter()
    .map(|k| text.find(k).unwrap())
    .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    let series = v["series"].as_array().unwrap();
    assert_eq!(series.len(), 30);
    for p in series {
        assert!(p["gap"].as_f64().unwrap().abs() < 1e-9);
    }
}

#[test]
fn missing_treated_is_a_usage_error() {
    let out = rsc(&["estimate", "--input", &linear(), "--t0", "20"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_values_exit_one() {
    let input = linear();
    for extra in [
        vec!["--mu", "universal:2"],
        vec!["--method", "ridge"],
        vec!["--method", "ols", "--eta", "0.5"],
        vec!["--aggregate", "gamma:0.7"],
    ] {
        let mut args = vec![
            "estimate",
            "--input",
            &input,
            "--treated",
            "target",
            "--t0",
            "20",
        ];
        args.extend(extra.iter().copied());
        assert_eq!(rsc(&args).status.code(), Some(1), "{extra:?}");
    }
    let out = rsc(&[
        "estimate",
        "--input",
        &input,
        "--treated",
        "nobody",
        "--t0",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nobody"));
}

#[test]
fn unwritable_output_exits_two() {
    let out = rsc(&[
        "estimate",
        "--input",
        &linear(),
        "--treated",
        "target",
        "--t0",
        "20",
        "--output",
        "/nonexistent-dir/result.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_and_version_exit_zero() {
    assert!(rsc(&["--help"]).status.success());
    let out = rsc(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("rsc"));
    assert_eq!(rsc(&[]).status.code(), Some(1));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"mu": "rank:1", "method": "ridge", "eta": 0.25}"#).unwrap();
    let input = basque();
    let v = ok_json(&[
        "estimate",
        "--input",
        &input,
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
        "--mu",
        "rank:3",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(v["config_echo"]["mu"], "rank:1");
    assert_eq!(v["config_echo"]["method"], "ridge");
    assert_eq!(v["denoise"]["rank"], 1);
    assert_eq!(v["denoise"]["eta_used"], 0.25);

    std::fs::write(
        &cfg,
        r#"{"treated": "Basque Country", "t0": "1970", "bogus": 1}"#,
    )
    .unwrap();
    let out = rsc(&[
        "estimate",
        "--input",
        &input,
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    // Required flags may come from the config file alone.
    std::fs::write(&cfg, r#"{"treated": "Basque Country", "t0": "1970"}"#).unwrap();
    ok_json(&[
        "estimate",
        "--input",
        &input,
        "--config",
        cfg.to_str().unwrap(),
    ]);
}

#[test]
fn basque_style_gap_is_negative_and_extreme() {
    let input = basque();
    let v = ok_json(&[
        "estimate",
        "--input",
        &input,
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
        "--placebo",
    ]);
    let post: Vec<f64> = v["series"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["t_label"].as_str().unwrap().parse::<i32>().unwrap() > 1975)
        .map(|p| p["gap"].as_f64().unwrap())
        .collect();
    assert!(post.iter().sum::<f64>() / (post.len() as f64) < 0.0);
    assert_eq!(v["placebo_rank"], 1);
}

#[test]
fn placebo_report_covers_every_unit() {
    let input = basque();
    let v = ok_json(&[
        "placebo",
        "--input",
        &input,
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
        "--mu",
        "rank:3",
    ]);
    let units = v["units"].as_array().unwrap();
    assert_eq!(units.len(), 17);
    assert_eq!(units[0]["unit"], "Basque Country");
    assert_eq!(v["placebo_rank"], 1);
    let mut ranks: Vec<u64> = units.iter().map(|u| u["rank"].as_u64().unwrap()).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, (1..=17).collect::<Vec<u64>>());
}

#[test]
fn bayes_band_respects_noise_floor() {
    let input = basque();
    let v = ok_json(&[
        "bayes",
        "--input",
        &input,
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
        "--mu",
        "rank:3",
        "--prior",
        "alpha:2",
    ]);
    let floor = v["sigma2_hat"].as_f64().unwrap().sqrt();
    let series = v["series"].as_array().unwrap();
    assert_eq!(series.len(), 43);
    assert!(series
        .iter()
        .all(|p| p["std"].as_f64().unwrap() >= floor * (1.0 - 1e-12)));
    assert_eq!(v["posterior_cov"].as_array().unwrap().len(), 16);

    let v = ok_json(&[
        "estimate",
        "--input",
        &input,
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
        "--method",
        "ridge",
        "--eta",
        "cv:0.01,0.1,1",
        "--bayes",
        "from-cv",
    ]);
    assert!(v["series"][0]["std"].as_f64().unwrap() > 0.0);
    assert_eq!(v["selection"].as_array().unwrap().len(), 3);
}

#[test]
fn aggregated_and_raw_projection_paths() {
    let input = basque();
    for extra in [["--aggregate", "gamma:0.25"], ["--project", "raw"]] {
        let mut args = vec![
            "estimate",
            "--input",
            &input,
            "--treated",
            "Basque Country",
            "--t0",
            "1970",
        ];
        args.extend(extra);
        let v = ok_json(&args);
        assert!(v["pre_mse"].as_f64().unwrap().is_finite());
    }
    let v = ok_json(&[
        "estimate",
        "--input",
        &input,
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
        "--aggregate",
        "gamma:0.25",
    ]);
    assert_eq!(v["denoise"]["aggregation"]["blocks"], 8);
    assert_eq!(v["denoise"]["aggregation"]["block_width"], 2);
}

#[test]
fn denoise_writes_matrix_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m_hat.csv");
    let status = rsc(&[
        "denoise",
        "--input",
        &linear(),
        "--mu",
        "rank:3",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("unit,1,2"));
    assert!(lines[1].starts_with("donor_1,"));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m_hat.json")).unwrap())
            .unwrap();
    assert_eq!(summary["treated"], "target");
    assert_eq!(summary["t0"], "29");
    assert_eq!(summary["rank"], 3);
    assert_eq!(summary["kept_singular_values"].as_array().unwrap().len(), 3);
    // Rank 3 reproduces the exactly rank-3 donors.
    let first: Vec<f64> = lines[1]
        .split(',')
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    let input = std::fs::read_to_string(fixture("linear.csv")).unwrap();
    let orig: Vec<f64> = input
        .lines()
        .nth(2)
        .unwrap()
        .split(',')
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    for (a, b) in first.iter().zip(&orig) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn simulate_to(dir: &Path, seed_flag: Option<&str>, env_seed: Option<&str>) -> (String, String) {
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        r#"{"n_units": 6, "t_len": 20, "t0": 15, "noise_sigma": 0.2, "p_observe": 0.8, "seed": 1,
            "model": {"kind": "periodic"}}"#,
    )
    .unwrap();
    let panel = dir.join("panel.csv");
    let truth = dir.join("truth.csv");
    let outputs = format!("{},{}", panel.display(), truth.display());
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rsc"));
    cmd.env_remove("RSC_SEED");
    cmd.args([
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
        "--output",
        &outputs,
    ]);
    if let Some(s) = seed_flag {
        cmd.args(["--seed", s]);
    }
    if let Some(s) = env_seed {
        cmd.env("RSC_SEED", s);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (
        std::fs::read_to_string(panel).unwrap(),
        std::fs::read_to_string(truth).unwrap(),
    )
}

#[test]
fn simulate_writes_panel_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, truth) = simulate_to(dir.path(), None, None);
    assert_eq!(panel.lines().count(), 7);
    assert_eq!(truth.lines().count(), 7);
    assert!(panel.lines().next().unwrap().starts_with("unit,1,2,3"));
    // Masked donor cells are blank.
    assert!(panel.contains(",,") || panel.lines().any(|l| l.ends_with(',')));

    let (flag, _) = simulate_to(dir.path(), Some("9"), None);
    let (env, _) = simulate_to(dir.path(), None, Some("9"));
    assert_eq!(flag, env);
    assert_ne!(flag, panel);
}

#[test]
fn simulate_rejects_unknown_spec_fields() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"n_units": 6, "t_len": 20, "t0": 15, "noise_sigma": 0.2, "p_observe": 0.8,
        "seed": 1, "model": {"kind": "periodic"}, "extra": true}"#,
    )
    .unwrap();
    let out = rsc(&[
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
        "--output",
        "a.csv,b.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_smoke_grid_is_fast() {
    let start = Instant::now();
    let out = rsc(&[
        "bench",
        "--grid",
        "0.7",
        "--seeds",
        "2",
        "--n-units",
        "30",
        "--t-len",
        "200",
        "--t0",
        "160",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(start.elapsed() < Duration::from_secs(30));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("noise,pre_mse,post_mse,no_denoise_pre_mse,no_denoise_post_mse")
    );
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(row[0], 0.7);
    assert!(row[1..].iter().all(|x| x.is_finite() && *x > 0.0));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_job_counts() {
    let input = basque();
    let base = [
        "placebo",
        "--input",
        input.as_str(),
        "--treated",
        "Basque Country",
        "--t0",
        "1970",
    ];
    let a = rsc(&base).stdout;
    let mut with_jobs = base.to_vec();
    with_jobs.extend(["--jobs", "1"]);
    let b = rsc(&with_jobs).stdout;
    assert!(!a.is_empty());
    assert_eq!(a, b);

    let bench = [
        "bench",
        "--grid",
        "0.4,1.0",
        "--seeds",
        "3",
        "--n-units",
        "20",
        "--t-len",
        "120",
        "--t0",
        "100",
        "--seed",
        "5",
    ];
    let c = rsc(&bench).stdout;
    let mut bench_jobs = bench.to_vec();
    bench_jobs.extend(["--jobs", "3"]);
    assert_eq!(c, rsc(&bench_jobs).stdout);
}
