//! Flat key=value experiment configuration with dotted namespaces.
//!
//! Values come from built-in defaults, then an optional config file, then
//! repeated `--set KEY=VALUE` flags, then the dedicated command-line flags.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use staclab_core::agent::{ActionSpace, AgentConfig, ArchConfig};
use staclab_core::diffcore::LrSchedule;
use staclab_core::harness::envs::EnvSpec;
use staclab_core::harness::{HarnessConfig, RefreshPolicy};
use staclab_core::losses::MetaMask;

use crate::CliError;

/// Key, default value, short description. The schema is the single source
/// of truth for what keys exist.
const SCHEMA: &[(&str, &str, &str)] = &[
    ("mode", "stac", "impala | stac | stacx"),
    ("agent.hidden", "256,256", "torso layer widths"),
    ("agent.head_hidden", "256", "head hidden width"),
    ("agent.gamma_outer", "0.995", "outer discount"),
    ("agent.lambda_outer", "1.0", "outer trace parameter"),
    ("agent.alpha_outer", "1.0", "outer leak coefficient"),
    ("agent.g_v_outer", "0.25", "outer value coefficient"),
    ("agent.g_p_outer", "1.0", "outer policy coefficient"),
    ("agent.g_e_outer", "0.01", "outer entropy coefficient"),
    ("agent.g_kl", "1.0", "policy-change KL coefficient"),
    ("agent.rho_bar", "1.0", "rho truncation level"),
    ("agent.c_bar", "1.0", "trace truncation level"),
    ("agent.meta_init", "4.6", "raw metaparameter init"),
    ("agent.meta_lr", "0.001", "meta optimizer learning rate"),
    ("agent.meta_b1", "0.9", "meta optimizer b1"),
    ("agent.meta_b2", "0.999", "meta optimizer b2"),
    ("agent.meta_eps", "0.0001", "meta optimizer epsilon"),
    ("agent.meta_mask", "all", "all | none | comma list of metaparameters"),
    ("agent.single_alpha", "true", "tie alpha_rho and alpha_c"),
    ("agent.grad_through_stats", "false", "differentiate through RMSProp statistics"),
    ("agent.lr_start", "0.0006", "inner learning rate at step 0"),
    ("agent.lr_end", "0.0006", "inner learning rate at the last step"),
    ("agent.rms_decay", "0.99", "RMSProp decay"),
    ("agent.rms_eps", "0.1", "RMSProp epsilon"),
    ("agent.sigma_min", "-5.0", "squashed-Gaussian log-std lower bound"),
    ("agent.sigma_max", "0.0", "squashed-Gaussian log-std upper bound"),
    ("env.kind", "grid", "grid | chain | random | pointmass"),
    ("env.chain.length", "10", "chain moves from start to goal"),
    ("env.chain.slip", "0.0", "chain action slip probability"),
    ("env.grid.width", "5", "gridworld width"),
    ("env.grid.height", "5", "gridworld height"),
    ("env.grid.step_cost", "0.05", "gridworld per-move cost"),
    ("env.grid.goal_reward", "1.0", "gridworld terminal reward"),
    ("env.grid.episode_cap", "60", "gridworld episode cap"),
    ("env.random.states", "6", "random MDP state count"),
    ("env.random.actions", "3", "random MDP action count"),
    ("env.random.seed", "0", "random MDP construction seed"),
    ("env.point.dims", "1", "point-mass dimensions"),
    ("env.point.action_bound", "1.0", "point-mass acceleration bound"),
    ("env.point.episode_cap", "100", "point-mass episode cap"),
    ("harness.batch_size", "32", "trajectories per learner batch"),
    ("harness.traj_len", "20", "steps per trajectory"),
    ("harness.env_slots", "32", "environment copies per actor"),
    ("harness.actors", "1", "actor threads"),
    ("harness.queue_batches", "4", "queue capacity in batches"),
    ("harness.refresh", "trajectory", "trajectory | step | never"),
    ("run.total_env_steps", "100000", "environment-step budget per seed"),
    ("run.log_period", "10", "meta steps between metrics rows"),
    ("run.seeds", "1,2,3", "comma-separated seeds"),
    ("run.deterministic", "true", "single-thread bit-reproducible mode"),
    ("run.checkpoint", "true", "write a final checkpoint per seed"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn defaults() -> Self {
        Config {
            values: SCHEMA
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn known(key: &str) -> bool {
        SCHEMA.iter().any(|(k, _, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !Self::known(key) {
            return Err(CliError::Config(format!("unknown config key: {key}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_set_flags(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Canonical serialization: every key in sorted order. Re-running from
    /// this text reproduces the run exactly in deterministic mode.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("schema key missing: {key}"))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, CliError> {
        self.get(key)
            .parse()
            .map_err(|e| CliError::Config(format!("{key} = {:?}: {e}", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, CliError> {
        self.get(key)
            .parse()
            .map_err(|e| CliError::Config(format!("{key} = {:?}: {e}", self.get(key))))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, CliError> {
        self.get(key)
            .parse()
            .map_err(|e| CliError::Config(format!("{key} = {:?}: {e}", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Config(format!(
                "{key} = {other:?}: expected a boolean"
            ))),
        }
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("{key} entry {s:?}: {e}")))
            })
            .collect()
    }

    pub fn get_u64_list(&self, key: &str) -> Result<Vec<u64>, CliError> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("{key} entry {s:?}: {e}")))
            })
            .collect()
    }
}

/// Everything `train` needs, resolved from a [`Config`].
pub struct Experiment {
    pub env: EnvSpec,
    pub agent_template: AgentConfig,
    pub harness_template: HarnessConfig,
    pub seeds: Vec<u64>,
    pub log_period: u64,
    pub checkpoint: bool,
    pub mode: String,
}

pub fn resolve(config: &Config) -> Result<Experiment, CliError> {
    let mode = config.get("mode").to_string();
    let heads = match mode.as_str() {
        "stacx" => 3,
        "stac" | "impala" => 1,
        other => {
            return Err(CliError::Config(format!(
                "mode must be impala, stac or stacx, got {other:?}"
            )))
        }
    };

    let env = match config.get("env.kind") {
        "chain" => EnvSpec::Chain {
            length: config.get_usize("env.chain.length")?,
            slip: config.get_f64("env.chain.slip")?,
        },
        "grid" => EnvSpec::Grid {
            width: config.get_usize("env.grid.width")?,
            height: config.get_usize("env.grid.height")?,
            step_cost: config.get_f64("env.grid.step_cost")?,
            goal_reward: config.get_f64("env.grid.goal_reward")?,
            episode_cap: config.get_usize("env.grid.episode_cap")?,
        },
        "random" => EnvSpec::Random {
            states: config.get_usize("env.random.states")?,
            actions: config.get_usize("env.random.actions")?,
            seed: config.get_u64("env.random.seed")?,
        },
        "pointmass" => EnvSpec::PointMass {
            dims: config.get_usize("env.point.dims")?,
            action_bound: config.get_f64("env.point.action_bound")?,
            episode_cap: config.get_usize("env.point.episode_cap")?,
        },
        other => {
            return Err(CliError::Config(format!(
                "env.kind must be chain, grid, random or pointmass, got {other:?}"
            )))
        }
    };
    let spaces = env.spaces();
    if matches!(spaces.action_space, ActionSpace::Continuous(_)) && mode == "impala" {
        // impala mode works for continuous control too; nothing to reject,
        // the match exists to keep the kind list exhaustive above.
    }

    let arch = ArchConfig {
        obs_dim: spaces.obs_dim,
        torso: config.get_usize_list("agent.hidden")?,
        head_hidden: config.get_usize("agent.head_hidden")?,
        heads,
        action_space: spaces.action_space,
    };

    let total_env_steps = config.get_u64("run.total_env_steps")?;
    let batch_size = config.get_usize("harness.batch_size")?;
    let traj_len = config.get_usize("harness.traj_len")?;
    if traj_len < 2 {
        return Err(CliError::Config(
            "harness.traj_len must be at least 2".into(),
        ));
    }
    let total_meta_steps = (total_env_steps / (batch_size * traj_len) as u64).max(1);

    let mut agent_template = AgentConfig::new(arch, 0);
    agent_template.hyper.gamma_outer = config.get_f64("agent.gamma_outer")?;
    agent_template.hyper.lambda_outer = config.get_f64("agent.lambda_outer")?;
    agent_template.hyper.alpha_outer = config.get_f64("agent.alpha_outer")?;
    agent_template.hyper.g_v_outer = config.get_f64("agent.g_v_outer")?;
    agent_template.hyper.g_p_outer = config.get_f64("agent.g_p_outer")?;
    agent_template.hyper.g_e_outer = config.get_f64("agent.g_e_outer")?;
    agent_template.hyper.g_kl = config.get_f64("agent.g_kl")?;
    agent_template.hyper.rho_bar = config.get_f64("agent.rho_bar")?;
    agent_template.hyper.c_bar = config.get_f64("agent.c_bar")?;
    agent_template.hyper.meta_init = config.get_f64("agent.meta_init")?;
    agent_template.hyper.meta_lr = config.get_f64("agent.meta_lr")?;
    agent_template.hyper.meta_b1 = config.get_f64("agent.meta_b1")?;
    agent_template.hyper.meta_b2 = config.get_f64("agent.meta_b2")?;
    agent_template.hyper.meta_eps = config.get_f64("agent.meta_eps")?;
    agent_template.single_alpha = config.get_bool("agent.single_alpha")?;
    agent_template.grad_through_stats = config.get_bool("agent.grad_through_stats")?;
    agent_template.rms_decay = config.get_f64("agent.rms_decay")?;
    agent_template.rms_eps = config.get_f64("agent.rms_eps")?;
    agent_template.bounds = staclab_core::losses::SigmaBounds {
        min: config.get_f64("agent.sigma_min")?,
        max: config.get_f64("agent.sigma_max")?,
    };
    let lr_start = config.get_f64("agent.lr_start")?;
    let lr_end = config.get_f64("agent.lr_end")?;
    if lr_end > lr_start {
        return Err(CliError::Config(
            "agent.lr_end must not exceed agent.lr_start".into(),
        ));
    }
    agent_template.lr = LrSchedule {
        start: lr_start,
        end: lr_end,
        total_steps: total_meta_steps,
    };
    agent_template.mask = match config.get("agent.meta_mask") {
        "all" => MetaMask::all(),
        "none" => MetaMask::none(),
        list => MetaMask::parse(list).map_err(CliError::Config)?,
    };
    if mode == "impala" {
        agent_template.hyper.meta_lr = 0.0;
        agent_template.mask = MetaMask::none();
    }

    let refresh = match config.get("harness.refresh") {
        "trajectory" => RefreshPolicy::EveryTrajectory,
        "step" => RefreshPolicy::EveryStep,
        "never" => RefreshPolicy::Never,
        other => {
            return Err(CliError::Config(format!(
                "harness.refresh must be trajectory, step or never, got {other:?}"
            )))
        }
    };
    let harness_template = HarnessConfig {
        batch_size,
        traj_len,
        env_slots: config.get_usize("harness.env_slots")?,
        actors: config.get_usize("harness.actors")?,
        queue_batches: config.get_usize("harness.queue_batches")?,
        deterministic: config.get_bool("run.deterministic")?,
        refresh,
        total_env_steps,
        seed: 0,
    };

    Ok(Experiment {
        env,
        agent_template,
        harness_template,
        seeds: config.get_u64_list("run.seeds")?,
        log_period: config.get_u64("run.log_period")?.max(1),
        checkpoint: config.get_bool("run.checkpoint")?,
        mode,
    })
}
