//! End-to-end tests of the staclab binary: exit codes, artifacts, config
//! round-trip determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn staclab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_staclab"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("staclab_test_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    staclab().args(args).output().expect("spawn staclab")
}

fn smoke_train_args<'a>(out: &'a Path, seeds: &'a str) -> Vec<String> {
    [
        "train",
        "--set",
        "env.kind=grid",
        "--set",
        "env.grid.width=3",
        "--set",
        "env.grid.height=3",
        "--set",
        "env.grid.episode_cap=30",
        "--set",
        "agent.hidden=8",
        "--set",
        "agent.head_hidden=8",
        "--set",
        "agent.lr_start=0.001",
        "--set",
        "agent.lr_end=0.001",
        "--set",
        "harness.batch_size=4",
        "--set",
        "harness.traj_len=5",
        "--set",
        "harness.env_slots=4",
        "--set",
        "run.total_env_steps=2000",
        "--set",
        "run.log_period=2",
    ]
    .into_iter()
    .map(String::from)
    .chain([
        "--set".to_string(),
        format!("run.seeds={seeds}"),
        "--out".to_string(),
        out.display().to_string(),
    ])
    .collect()
}

#[test]
fn train_smoke_emits_metrics_and_checkpoints() {
    let dir = tmp_dir("train");
    let args = smoke_train_args(&dir, "1,2");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&args);
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    for seed in [1, 2] {
        let metrics = dir.join(format!("metrics_seed{seed}.csv"));
        let text = std::fs::read_to_string(&metrics).unwrap();
        let rows = text.lines().count();
        assert!(rows >= 10, "expected >= 10 rows in {}, got {rows}", metrics.display());
        assert!(text.lines().next().unwrap().contains("h0_gamma"));
        assert!(dir.join(format!("checkpoint_seed{seed}.bin")).exists());
    }
    assert!(dir.join("config.txt").exists());
    assert!(dir.join("summary.txt").exists());
}

#[test]
fn config_round_trip_reproduces_metrics() {
    let dir1 = tmp_dir("round1");
    let args = smoke_train_args(&dir1, "5");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(run(&args).status.success());

    // Re-run purely from the emitted canonical config.
    let dir2 = tmp_dir("round2");
    let config_path = dir1.join("config.txt");
    let out = run(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        dir2.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let m1 = std::fs::read_to_string(dir1.join("metrics_seed5.csv")).unwrap();
    let m2 = std::fs::read_to_string(dir2.join("metrics_seed5.csv")).unwrap();
    // Strip the wall-clock column (10th) before comparing.
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| *i != 9)
                    .map(|(_, f)| f)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    };
    assert_eq!(strip(&m1), strip(&m2), "deterministic re-run must match");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let out = run(&["train", "--set", "agent.bogus=1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown config key"), "stderr: {err}");
}

#[test]
fn invalid_mode_is_a_usage_error() {
    let out = run(&["train", "--mode", "dqn"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_tabular_suite_passes_and_writes_report() {
    let dir = tmp_dir("verify");
    let out = run(&[
        "verify",
        "--suite",
        "tabular",
        "--instances",
        "10",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = std::fs::read_to_string(dir.join("verify_report.txt")).unwrap();
    // Header plus one row per instance.
    assert_eq!(report.lines().count(), 11);
    assert!(report.lines().next().unwrap().starts_with("id|states|actions"));
}

#[test]
fn verify_rejects_transposed_leak_coefficients() {
    let dir = tmp_dir("verify_bad");
    let out = run(&[
        "verify",
        "--suite",
        "tabular",
        "--instances",
        "2",
        "--alpha-rho",
        "0.2",
        "--alpha-c",
        "0.8",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha_rho"), "stderr: {err}");
}

#[test]
fn verify_metagrad_suite_passes() {
    let dir = tmp_dir("verify_meta");
    let out = run(&[
        "verify",
        "--suite",
        "metagrad",
        "--batches",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn analyze_aggregates_and_plots() {
    let dir = tmp_dir("analyze_train");
    let args = smoke_train_args(&dir, "1,2,3");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(run(&args).status.success());

    let out_dir = tmp_dir("analyze_out");
    let m: Vec<String> = (1..=3)
        .map(|s| dir.join(format!("metrics_seed{s}.csv")).display().to_string())
        .collect();
    let out = run(&[
        "analyze",
        &m[0],
        &m[1],
        &m[2],
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let agg = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(agg.lines().next().unwrap().contains("h0_gamma_mean"));
    assert!(agg.lines().count() > 5);
    assert!(out_dir.join("returns.svg").exists());
    assert!(out_dir.join("meta_head0.svg").exists());

    // Hand-check one aggregate value: mean of the env_steps column at the
    // first row across the three seeds.
    let first_vals: Vec<f64> = (0..3)
        .map(|i| {
            let text = std::fs::read_to_string(&m[i]).unwrap();
            let row = text.lines().nth(1).unwrap();
            row.split(',').nth(1).unwrap().parse::<f64>().unwrap()
        })
        .collect();
    let expect = first_vals.iter().sum::<f64>() / 3.0;
    let header: Vec<&str> = agg.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|c| *c == "env_steps_mean").unwrap();
    let got: f64 = agg
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(col)
        .unwrap()
        .parse()
        .unwrap();
    assert!((got - expect).abs() < 1e-9);
}

#[test]
fn analyze_single_seed_equals_input() {
    let dir = tmp_dir("analyze_single");
    let args = smoke_train_args(&dir, "9");
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(run(&args).status.success());
    let metrics = dir.join("metrics_seed9.csv");
    let out_dir = tmp_dir("analyze_single_out");
    let out = run(&[
        "analyze",
        metrics.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let src = std::fs::read_to_string(&metrics).unwrap();
    let agg = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    // With one seed, every mean equals the input column and every std is 0.
    let src_row: Vec<&str> = src.lines().nth(1).unwrap().split(',').collect();
    let agg_row: Vec<&str> = agg.lines().nth(1).unwrap().split(',').collect();
    let src_header: Vec<&str> = src.lines().next().unwrap().split(',').collect();
    let agg_header: Vec<&str> = agg.lines().next().unwrap().split(',').collect();
    let gamma_src = src_header.iter().position(|c| *c == "h0_gamma").unwrap();
    let gamma_mean = agg_header.iter().position(|c| *c == "h0_gamma_mean").unwrap();
    let gamma_std = agg_header.iter().position(|c| *c == "h0_gamma_std").unwrap();
    let a: f64 = src_row[gamma_src].parse().unwrap();
    let b: f64 = agg_row[gamma_mean].parse().unwrap();
    let s: f64 = agg_row[gamma_std].parse().unwrap();
    assert!((a - b).abs() < 1e-9);
    assert_eq!(s, 0.0);
}

#[test]
fn analyze_missing_file_names_the_path() {
    let out = run(&["analyze", "/nonexistent/metrics.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/metrics.csv"), "stderr: {err}");
}

#[test]
fn chain_smoke_emits_metrics_rows() {
    let dir = tmp_dir("chain");
    let out = run(&[
        "train",
        "--set",
        "env.kind=chain",
        "--set",
        "env.chain.length=6",
        "--set",
        "agent.hidden=8",
        "--set",
        "agent.head_hidden=8",
        "--set",
        "harness.batch_size=4",
        "--set",
        "harness.traj_len=5",
        "--set",
        "harness.env_slots=4",
        "--set",
        "run.total_env_steps=20000",
        "--set",
        "run.log_period=10",
        "--set",
        "run.seeds=1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.join("metrics_seed1.csv")).unwrap();
    assert!(text.lines().count() >= 11, "expected >= 10 metric rows");
}

#[test]
fn meta_mask_pins_unselected_metaparameters() {
    let dir = tmp_dir("mask");
    let mut args = smoke_train_args(&dir, "6");
    args.push("--meta-mask".into());
    args.push("gamma".into());
    // A large meta learning rate makes any leak through the mask obvious.
    args.push("--set".into());
    args.push("agent.meta_lr=0.05".into());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(run(&args).status.success());
    let text = std::fs::read_to_string(dir.join("metrics_seed6.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|c| *c == name).unwrap();
    let column = |name: &str| -> Vec<String> {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(col(name)).unwrap().to_string())
            .collect()
    };
    // Raw values of masked-out coordinates never receive gradient, so their
    // reported transforms are constant; the self-tuned discount moves.
    for frozen in ["h0_lambda", "h0_alpha_rho", "h0_g_v", "h0_g_p", "h0_g_e"] {
        let vals = column(frozen);
        assert!(
            vals.windows(2).all(|w| w[0] == w[1]),
            "{frozen} should stay frozen under the mask"
        );
    }
    let gammas = column("h0_gamma");
    assert!(
        gammas.iter().any(|g| g != &gammas[0]),
        "self-tuned gamma should move"
    );
}

#[test]
fn impala_mode_runs_and_reports_constant_metaparams() {
    let dir = tmp_dir("impala");
    let mut args = smoke_train_args(&dir, "4");
    args.push("--mode".into());
    args.push("impala".into());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(run(&args).status.success());
    let text = std::fs::read_to_string(dir.join("metrics_seed4.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|c| *c == "h0_gamma").unwrap();
    let values: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[0] == w[1]), "meta frozen in impala mode");
}
