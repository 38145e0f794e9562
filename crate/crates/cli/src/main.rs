//! Experiment runner and verification entrypoint.
//!
//! Subcommands: `train` runs the actor-learner pipeline per seed and writes
//! metrics/checkpoints; `verify` runs the operator and metagradient check
//! suites and emits a per-instance report; `analyze` aggregates metrics
//! files into mean/std series with SVG plots.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric failure,
//! 3 verification failure.

mod config;
mod metrics;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use staclab_core::agent::{config_hash, Agent};
use staclab_core::error::{AgentError, HarnessError};
use staclab_core::harness::run_training;
use staclab_core::tabular::{random_instance, verify_instance, InstanceReport, OperatorConfig};

use config::{resolve, Config};
use metrics::{MetricsTable, MetricsWriter};
use plot::{write_line_plot, Series};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Verification(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Verification(m) => write!(f, "verification failure: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "staclab", about = "Self-tuning actor-critic laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per configured seed and write metrics and checkpoints.
    Train(TrainArgs),
    /// Run the operator / metagradient verification suites.
    Verify(VerifyArgs),
    /// Aggregate metrics files into mean/std series and plots.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct CommonConfigArgs {
    /// Flat key=value config file with dotted namespaces.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set agent.meta_lr=0.005
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run a single seed instead of run.seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (also settable via STACLAB_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Agent preset: impala, stac or stacx.
    #[arg(long)]
    mode: Option<String>,
    /// Subset of self-tuned metaparameters, e.g. gamma,lambda.
    #[arg(long = "meta-mask")]
    meta_mask: Option<String>,
    /// Force deterministic single-thread mode.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonConfigArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which suite to run.
    #[arg(long, default_value = "all", value_parser = ["tabular", "metagrad", "all"])]
    suite: String,
    /// Number of random tabular instances.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Batches for the metagradient finite-difference check.
    #[arg(long, default_value_t = 5)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pin the policy-weight leak coefficient instead of drawing it.
    #[arg(long)]
    alpha_rho: Option<f64>,
    /// Pin the trace leak coefficient instead of drawing it.
    #[arg(long)]
    alpha_c: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Metrics CSV files produced by train (one per seed).
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("staclab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn output_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("STACLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_config(common: &CommonConfigArgs) -> Result<Config, CliError> {
    let mut config = Config::defaults();
    if let Some(path) = &common.config {
        config.load_file(path)?;
    }
    config.apply_set_flags(&common.sets)?;
    if let Some(mode) = &common.mode {
        config.set("mode", mode)?;
    }
    if let Some(mask) = &common.meta_mask {
        config.set("agent.meta_mask", mask)?;
    }
    if let Some(seed) = common.seed {
        config.set("run.seeds", &seed.to_string())?;
    }
    if common.deterministic {
        config.set("run.deterministic", "true")?;
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct SeedResult {
    seed: u64,
    final_return: Option<f64>,
    episodes: usize,
    meta_steps: u64,
    env_steps: u64,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = build_config(&args.common)?;
    let experiment = resolve(&config)?;
    let out_dir = output_dir(&args.common.out);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;

    let canonical = config.canonical_text();
    std::fs::write(out_dir.join("config.txt"), &canonical)
        .map_err(|e| CliError::Config(format!("cannot write config.txt: {e}")))?;
    let hash = config_hash(&canonical);

    println!(
        "training mode={} env={} seeds={:?} budget={} env steps -> {}",
        experiment.mode,
        config.get("env.kind"),
        experiment.seeds,
        experiment.harness_template.total_env_steps,
        out_dir.display()
    );

    // Seeds run in parallel threads with disjoint output files.
    let mut handles = Vec::new();
    for &seed in &experiment.seeds {
        let config = config.clone();
        let out_dir = out_dir.clone();
        handles.push(std::thread::spawn(move || -> Result<SeedResult, CliError> {
            run_one_seed(&config, seed, &out_dir, &hash)
        }));
    }
    let mut results = Vec::new();
    for h in handles {
        results.push(h.join().map_err(|_| {
            CliError::Numeric("training thread panicked; see stderr".into())
        })??);
    }

    // Aggregate over seeds.
    let finals: Vec<f64> = results.iter().filter_map(|r| r.final_return).collect();
    let mut summary = String::new();
    summary.push_str("seed,final_return,episodes,meta_steps,env_steps\n");
    for r in &results {
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            r.seed,
            r.final_return.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.episodes,
            r.meta_steps,
            r.env_steps
        ));
    }
    if !finals.is_empty() {
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finals.len() as f64;
        summary.push_str(&format!(
            "# final return over {} seeds: mean {:.6} std {:.6}\n",
            finals.len(),
            mean,
            var.sqrt()
        ));
        println!(
            "final return over {} seeds: mean {mean:.4} std {:.4}",
            finals.len(),
            var.sqrt()
        );
    }
    std::fs::write(out_dir.join("summary.txt"), summary)
        .map_err(|e| CliError::Config(format!("cannot write summary.txt: {e}")))?;
    Ok(())
}

fn run_one_seed(
    config: &Config,
    seed: u64,
    out_dir: &Path,
    hash: &[u8; 32],
) -> Result<SeedResult, CliError> {
    let experiment = resolve(config)?;
    let mut agent_config = experiment.agent_template.clone();
    agent_config.seed = seed;
    let mut harness = experiment.harness_template.clone();
    harness.seed = seed;
    let mut agent = Agent::new(agent_config);

    let metrics_path = out_dir.join(format!("metrics_seed{seed}.csv"));
    let mut writer = MetricsWriter::create(
        &metrics_path,
        agent.net.arch.heads,
        agent.config.single_alpha,
    )?;
    let log_period = experiment.log_period;
    let mut last_return = None;
    let mut write_error: Option<std::io::Error> = None;
    let outcome = run_training(&mut agent, &experiment.env, &harness, &mut |ev| {
        if let Some(r) = ev.recent_return {
            last_return = Some(r);
        }
        if ev.meta_steps % log_period == 0 {
            if let Err(e) = writer.write_row(&ev) {
                write_error = Some(e);
            }
        }
    });
    if let Some(e) = write_error {
        return Err(CliError::Config(format!(
            "metrics write failed for {}: {e}",
            metrics_path.display()
        )));
    }

    let checkpoint_path = out_dir.join(format!("checkpoint_seed{seed}.bin"));
    match outcome {
        Ok(summary) => {
            if experiment.checkpoint {
                std::fs::write(&checkpoint_path, agent.save_checkpoint(hash)).map_err(|e| {
                    CliError::Config(format!("cannot write {}: {e}", checkpoint_path.display()))
                })?;
            }
            println!(
                "seed {seed}: {} meta steps, {} episodes, final return {}",
                summary.meta_steps,
                summary.episode_returns.len(),
                last_return
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(SeedResult {
                seed,
                final_return: last_return,
                episodes: summary.episode_returns.len(),
                meta_steps: summary.meta_steps,
                env_steps: summary.env_steps,
            })
        }
        Err(HarnessError::Agent(err @ (AgentError::Diff(_) | AgentError::HeadNumeric { .. }))) => {
            // Numeric failure: keep a checkpoint of the failed state and a
            // diagnostic note, then report exit code 2.
            let _ = std::fs::write(&checkpoint_path, agent.save_checkpoint(hash));
            let _ = std::fs::write(
                out_dir.join(format!("failure_seed{seed}.txt")),
                format!("seed {seed} aborted: {err}\n"),
            );
            Err(CliError::Numeric(format!("seed {seed}: {err}")))
        }
        Err(e) => Err(CliError::Numeric(format!("seed {seed}: {e}"))),
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let out_dir = output_dir(&args.out);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;

    if let (Some(ar), Some(ac)) = (args.alpha_rho, args.alpha_c) {
        // Validate pinned leak coefficients up front: the certificate
        // refuses alpha_rho < alpha_c.
        OperatorConfig::new(ar, ac).map_err(|e| CliError::Config(e.to_string()))?;
    }

    let mut failures = 0usize;
    if args.suite == "tabular" || args.suite == "all" {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut lines = vec![InstanceReport::HEADER.to_string()];
        for id in 0..args.instances {
            let gamma = if id % 2 == 0 { 0.9 } else { 0.99 };
            let mut inst = random_instance(&mut rng, gamma);
            if let (Some(ar), Some(ac)) = (args.alpha_rho, args.alpha_c) {
                inst.cfg = OperatorConfig::new(ar, ac)
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            let report = verify_instance(id, &inst, 200, 100, &mut rng)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            if !(report.modulus_ok && report.residual_ok) {
                failures += 1;
            }
            lines.push(report.to_line());
        }
        let report_path = out_dir.join("verify_report.txt");
        std::fs::write(&report_path, lines.join("\n") + "\n")
            .map_err(|e| CliError::Config(format!("cannot write report: {e}")))?;
        println!(
            "tabular suite: {} instances, {} failures -> {}",
            args.instances,
            failures,
            report_path.display()
        );
    }

    if args.suite == "metagrad" || args.suite == "all" {
        let worst = metagrad_suite(args.seed, args.batches)?;
        println!(
            "metagrad suite: {} batches, worst relative error {worst:.2e} (tolerance 1e-4)",
            args.batches
        );
        if worst >= 1e-4 {
            failures += 1;
        }
    }

    if failures > 0 {
        return Err(CliError::Verification(format!(
            "{failures} verification check(s) failed"
        )));
    }
    println!("verification passed");
    Ok(())
}

/// Finite-difference check of the metagradient on a tiny agent; returns the
/// worst two-tolerance-guarded relative error.
fn metagrad_suite(seed: u64, batches: usize) -> Result<f64, CliError> {
    use ndarray::Array2;
    use staclab_core::agent::{ActionSpace, AgentConfig, ArchConfig};
    use staclab_core::losses::Batch;
    use staclab_core::vtrace::{ActionRecord, Trajectory};

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
    let arch = ArchConfig {
        obs_dim: 5,
        torso: vec![4],
        head_hidden: 4,
        heads: 1,
        action_space: ActionSpace::Discrete(3),
    };
    let mut agent = Agent::new(AgentConfig::new(arch, seed.wrapping_add(9)));
    let make_batch = |rng: &mut ChaCha8Rng| {
        let (m, n) = (4, 6);
        let mut trajs = Vec::new();
        for _ in 0..m {
            let obs = Array2::from_shape_fn((n + 1, 5), |_| rng.gen_range(-1.0..1.0));
            let acts: Vec<ActionRecord> = (0..n)
                .map(|_| ActionRecord::Discrete(rng.gen_range(0..3)))
                .collect();
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
            trajs.push(Trajectory::new(obs, acts, rewards, &mu, vec![false; n], 0).unwrap());
        }
        Batch::from_trajectories(&trajs).unwrap()
    };
    for _ in 0..3 {
        let b = make_batch(&mut rng);
        agent
            .agent_step(&b)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
    }
    let (rtol, atol, h) = (1e-4, 1e-8, 1e-4);
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let batch = make_batch(&mut rng);
        let ad = agent
            .metagradient(&batch)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let probe = agent
            .meta_probe(&batch)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        for k in 0..agent.meta.raw.len() {
            let mut plus = agent.meta.raw.clone();
            plus[k] += h;
            let mut minus = agent.meta.raw.clone();
            minus[k] -= h;
            let fd = (probe.objective_at(&plus).map_err(|e| CliError::Numeric(e.to_string()))?
                - probe
                    .objective_at(&minus)
                    .map_err(|e| CliError::Numeric(e.to_string()))?)
                / (2.0 * h);
            let rel = (ad[k] - fd).abs() / fd.abs().max(ad[k].abs()).max(atol / rtol);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let out_dir = output_dir(&args.out);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;

    let tables: Vec<MetricsTable> = args
        .metrics
        .iter()
        .map(|p| MetricsTable::load(p))
        .collect::<Result<_, _>>()?;
    let columns = tables[0].columns.clone();
    for (i, t) in tables.iter().enumerate() {
        if t.columns != columns {
            return Err(CliError::Config(format!(
                "{} has different columns than {}",
                args.metrics[i].display(),
                args.metrics[0].display()
            )));
        }
    }
    let rows = tables.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    if rows == 0 {
        return Err(CliError::Config("no complete metrics rows to analyze".into()));
    }

    // Mean and std across seeds for every column.
    let mut aggregate = String::new();
    aggregate.push_str(
        &columns
            .iter()
            .flat_map(|c| [format!("{c}_mean"), format!("{c}_std")])
            .collect::<Vec<_>>()
            .join(","),
    );
    aggregate.push('\n');
    let mut means = vec![vec![0.0f64; columns.len()]; rows];
    let mut stds = vec![vec![0.0f64; columns.len()]; rows];
    for r in 0..rows {
        for c in 0..columns.len() {
            let vals: Vec<f64> = tables.iter().filter_map(|t| t.rows[r][c]).collect();
            let (mean, std) = if vals.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v.sqrt())
            };
            means[r][c] = mean;
            stds[r][c] = std;
        }
        let line: Vec<String> = (0..columns.len())
            .flat_map(|c| {
                [
                    if means[r][c].is_nan() {
                        String::new()
                    } else {
                        format!("{:.9}", means[r][c])
                    },
                    if stds[r][c].is_nan() {
                        String::new()
                    } else {
                        format!("{:.9}", stds[r][c])
                    },
                ]
            })
            .collect();
        aggregate.push_str(&line.join(","));
        aggregate.push('\n');
    }
    let agg_path = out_dir.join("aggregate.csv");
    std::fs::write(&agg_path, aggregate)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", agg_path.display())))?;

    // Plots: return curve and per-head metaparameter trajectories.
    let x_index = tables[0]
        .column_index("env_steps")
        .ok_or_else(|| CliError::Config("metrics missing env_steps column".into()))?;
    let series_for = |c: usize| -> Series {
        let mut points = Vec::new();
        let mut band = Vec::new();
        for r in 0..rows {
            if means[r][c].is_nan() {
                continue;
            }
            points.push((means[r][x_index], means[r][c]));
            band.push(stds[r][c]);
        }
        Series {
            label: columns[c].clone(),
            points,
            band: Some(band),
        }
    };

    if let Some(c) = tables[0].column_index("return_recent") {
        write_line_plot(
            &out_dir.join("returns.svg"),
            "episode return (recent mean, mean +/- std over seeds)",
            "environment steps",
            "return",
            &[series_for(c)],
        )?;
    }
    let mut head = 0;
    loop {
        let cols: Vec<usize> = columns
            .iter()
            .enumerate()
            .filter(|(_, name)| name.starts_with(&format!("h{head}_")))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            break;
        }
        let series: Vec<Series> = cols.into_iter().map(series_for).collect();
        write_line_plot(
            &out_dir.join(format!("meta_head{head}.svg")),
            &format!("head {head} transformed metaparameters"),
            "environment steps",
            "value after sigmoid",
            &series,
        )?;
        head += 1;
    }

    println!(
        "analyzed {} metrics file(s), {} rows -> {}",
        tables.len(),
        rows,
        out_dir.display()
    );
    Ok(())
}
