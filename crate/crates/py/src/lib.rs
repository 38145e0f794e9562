//! Python bindings: leaky V-trace targets, the metaparameter transform,
//! exact tabular operator analysis, and a desk-scale training entry point.

// The pyo3 macros expand to identity PyErr conversions that trip this lint.
#![allow(clippy::useless_conversion)]

use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use staclab_core::agent::{Agent, AgentConfig, ArchConfig};
use staclab_core::diffcore::LrSchedule;
use staclab_core::harness::envs::{EnvSpec, GridWorld};
use staclab_core::harness::{run_training, HarnessConfig, RefreshPolicy};
use staclab_core::losses::{self, HyperParams, MetaLayout, MetaMask};
use staclab_core::tabular;
use staclab_core::vtrace::{self, ActionRecord, Trajectory, VTraceConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Logistic sigmoid, the metaparameter squashing function.
#[pyfunction]
fn sigmoid(x: f64) -> f64 {
    staclab_core::diffcore::sigmoid(x)
}

/// Transforms one head's raw metaparameters
/// [gamma, lambda, alpha, g_v, g_p, g_e] into effective inner-loss
/// hyperparameters using the default outer coefficients.
#[pyfunction]
fn meta_transform(py: Python<'_>, raw: Vec<f64>) -> PyResult<Py<PyDict>> {
    if raw.len() != 6 {
        return Err(value_err("expected 6 raw values"));
    }
    let layout = MetaLayout {
        heads: 1,
        single_alpha: true,
    };
    let eff = losses::meta_transform(&raw, &layout, &MetaMask::all(), &HyperParams::default());
    let out = PyDict::new_bound(py);
    out.set_item("gamma", eff.gamma)?;
    out.set_item("lambda", eff.lambda)?;
    out.set_item("alpha_rho", eff.alpha_rho)?;
    out.set_item("alpha_c", eff.alpha_c)?;
    out.set_item("g_v", eff.g_v)?;
    out.set_item("g_p", eff.g_p)?;
    out.set_item("g_e", eff.g_e)?;
    Ok(out.unbind())
}

/// Leaky policy and trace weights from importance ratios.
#[pyfunction]
#[pyo3(signature = (is_ratios, gamma, lambda_, alpha_rho, alpha_c, rho_bar=1.0, c_bar=1.0))]
#[allow(clippy::too_many_arguments)]
fn leaky_weights(
    is_ratios: Vec<f64>,
    gamma: f64,
    lambda_: f64,
    alpha_rho: f64,
    alpha_c: f64,
    rho_bar: f64,
    c_bar: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cfg = VTraceConfig::with_independent_alphas(gamma, lambda_, alpha_rho, alpha_c, rho_bar, c_bar)
        .map_err(value_err)?;
    Ok(vtrace::leaky_weights(&is_ratios, &cfg))
}

/// Leaky V-trace targets for one trajectory. `values` has one more entry
/// than the steps (the bootstrap value); returns (targets, rho, td_errors).
#[pyfunction]
#[pyo3(signature = (rewards, behavior_probs, target_probs, values, gamma, lambda_=1.0,
                    alpha_rho=1.0, alpha_c=1.0, rho_bar=1.0, c_bar=1.0, dones=None))]
#[allow(clippy::too_many_arguments)]
fn vtrace_targets(
    rewards: Vec<f64>,
    behavior_probs: Vec<f64>,
    target_probs: Vec<f64>,
    values: Vec<f64>,
    gamma: f64,
    lambda_: f64,
    alpha_rho: f64,
    alpha_c: f64,
    rho_bar: f64,
    c_bar: f64,
    dones: Option<Vec<bool>>,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    let dones = dones.unwrap_or_else(|| vec![false; n]);
    let cfg = VTraceConfig::with_independent_alphas(gamma, lambda_, alpha_rho, alpha_c, rho_bar, c_bar)
        .map_err(value_err)?;
    let traj = Trajectory::new(
        Array2::zeros((n + 1, 1)),
        vec![ActionRecord::Discrete(0); n],
        rewards,
        &behavior_probs,
        dones,
        0,
    )
    .map_err(value_err)?;
    let out = vtrace::vtrace_targets(&traj, &target_probs, &values, &cfg).map_err(value_err)?;
    Ok((out.targets, out.rho, out.td_errors))
}

/// Exact tabular MDP with leaky V-trace operator analysis.
#[pyclass]
struct TabularMdp {
    inner: tabular::TabularMdp,
}

fn policy_from(rows: Vec<Vec<f64>>) -> PyResult<tabular::PolicyTable> {
    let s = rows.len();
    let a = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut probs = Array2::zeros((s, a));
    for (x, row) in rows.iter().enumerate() {
        if row.len() != a {
            return Err(value_err("ragged policy rows"));
        }
        for (b, &p) in row.iter().enumerate() {
            probs[(x, b)] = p;
        }
    }
    tabular::PolicyTable::new(probs).map_err(value_err)
}

#[pymethods]
impl TabularMdp {
    /// transitions[x][a][y] must be row-stochastic; rewards[x][a] finite.
    #[new]
    fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        let s = transitions.len();
        let a = transitions.first().map(|t| t.len()).unwrap_or(0);
        let mut tensor = Array3::zeros((s, a, s));
        let mut reward_table = Array2::zeros((s, a));
        for (x, per_action) in transitions.iter().enumerate() {
            if per_action.len() != a {
                return Err(value_err("ragged transition tensor"));
            }
            for (act, row) in per_action.iter().enumerate() {
                if row.len() != s {
                    return Err(value_err("transition row length mismatch"));
                }
                for (y, &p) in row.iter().enumerate() {
                    tensor[(x, act, y)] = p;
                }
                reward_table[(x, act)] = rewards[x][act];
            }
        }
        Ok(TabularMdp {
            inner: tabular::TabularMdp::new(tensor, reward_table, gamma).map_err(value_err)?,
        })
    }

    #[getter]
    fn states(&self) -> usize {
        self.inner.states
    }

    #[getter]
    fn actions(&self) -> usize {
        self.inner.actions
    }

    /// Exact policy evaluation via direct linear solve.
    fn exact_value(&self, policy: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let pol = policy_from(policy)?;
        Ok(tabular::exact_value(&self.inner, &pol)
            .map_err(runtime_err)?
            .to_vec())
    }

    /// One exact application of the leaky V-trace operator.
    #[pyo3(signature = (mu, pi, v, alpha_rho, alpha_c, rho_bar=1.0, c_bar=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn apply_operator(
        &self,
        mu: Vec<Vec<f64>>,
        pi: Vec<Vec<f64>>,
        v: Vec<f64>,
        alpha_rho: f64,
        alpha_c: f64,
        rho_bar: f64,
        c_bar: f64,
    ) -> PyResult<Vec<f64>> {
        let cfg = tabular::OperatorConfig {
            rho_bar,
            c_bar,
            alpha_rho,
            alpha_c,
            lambda: 1.0,
        };
        cfg.validate().map_err(value_err)?;
        let out = tabular::apply_operator(
            &self.inner,
            &policy_from(mu)?,
            &policy_from(pi)?,
            &Array1::from_vec(v),
            &cfg,
        )
        .map_err(runtime_err)?;
        Ok(out.to_vec())
    }

    /// Contraction certificate: (beta, theoretical bound, empirical modulus).
    #[pyo3(signature = (mu, pi, alpha_rho, alpha_c, pairs=100, seed=0))]
    fn contraction_certificate(
        &self,
        mu: Vec<Vec<f64>>,
        pi: Vec<Vec<f64>>,
        alpha_rho: f64,
        alpha_c: f64,
        pairs: usize,
        seed: u64,
    ) -> PyResult<(f64, f64, f64)> {
        let cfg = tabular::OperatorConfig::new(alpha_rho, alpha_c).map_err(value_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cert = tabular::contraction_certificate(
            &self.inner,
            &policy_from(mu)?,
            &policy_from(pi)?,
            &cfg,
            pairs,
            &mut rng,
        )
        .map_err(runtime_err)?;
        Ok((cert.beta, cert.bound, cert.empirical))
    }

    /// The mixture policy whose value function is the operator fixed point.
    #[pyo3(signature = (pi, mu, rho_bar=1.0, alpha_rho=1.0))]
    fn mixture_policy(
        &self,
        pi: Vec<Vec<f64>>,
        mu: Vec<Vec<f64>>,
        rho_bar: f64,
        alpha_rho: f64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let mix = tabular::mixture_policy(&policy_from(pi)?, &policy_from(mu)?, rho_bar, alpha_rho)
            .map_err(value_err)?;
        Ok(mix
            .probs
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect())
    }

    /// Iterates the operator from v0 and returns the sup-norm distances to
    /// the exact fixed point.
    #[pyo3(signature = (mu, pi, v0, iterations, alpha_rho, alpha_c))]
    fn fixed_point_distances(
        &self,
        mu: Vec<Vec<f64>>,
        pi: Vec<Vec<f64>>,
        v0: Vec<f64>,
        iterations: usize,
        alpha_rho: f64,
        alpha_c: f64,
    ) -> PyResult<Vec<f64>> {
        let cfg = tabular::OperatorConfig::new(alpha_rho, alpha_c).map_err(value_err)?;
        let trace = tabular::fixed_point_iterate(
            &self.inner,
            &policy_from(mu)?,
            &policy_from(pi)?,
            &cfg,
            Array1::from_vec(v0),
            iterations,
        )
        .map_err(runtime_err)?;
        Ok(trace.distances)
    }
}

/// Runs the verification suite on random instances; returns one dict per
/// instance with beta, bound, empirical modulus and fixed-point residual.
#[pyfunction]
#[pyo3(signature = (count=20, seed=0))]
fn verify_random_instances(py: Python<'_>, count: usize, seed: u64) -> PyResult<Vec<Py<PyDict>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        let gamma = if id % 2 == 0 { 0.9 } else { 0.99 };
        let inst = tabular::random_instance(&mut rng, gamma);
        let report = tabular::verify_instance(id, &inst, 100, 50, &mut rng).map_err(runtime_err)?;
        let d = PyDict::new_bound(py);
        d.set_item("id", report.id)?;
        d.set_item("gamma", report.gamma)?;
        d.set_item("alpha_rho", report.alpha_rho)?;
        d.set_item("beta", report.beta)?;
        d.set_item("bound", report.bound)?;
        d.set_item("empirical", report.empirical)?;
        d.set_item("fp_residual", report.fixed_point_residual)?;
        d.set_item("modulus_ok", report.modulus_ok)?;
        d.set_item("residual_ok", report.residual_ok)?;
        out.push(d.unbind());
    }
    Ok(out)
}

/// Trains a self-tuning agent on the 5x5 gridworld and returns summary
/// statistics: final recent return, the value-iteration optimal return, and
/// the largest transformed-metaparameter movement from initialization.
#[pyfunction]
#[pyo3(signature = (seed=1, total_env_steps=60_000, heads=1, meta_lr=5e-3))]
fn train_gridworld(
    py: Python<'_>,
    seed: u64,
    total_env_steps: u64,
    heads: usize,
    meta_lr: f64,
) -> PyResult<Py<PyDict>> {
    let world = GridWorld {
        width: 5,
        height: 5,
        step_cost: 0.05,
        goal_reward: 1.0,
        episode_cap: 60,
    };
    let spec = EnvSpec::Grid {
        width: 5,
        height: 5,
        step_cost: 0.05,
        goal_reward: 1.0,
        episode_cap: 60,
    };
    let spaces = spec.spaces();
    let arch = ArchConfig {
        obs_dim: spaces.obs_dim,
        torso: vec![64, 64],
        head_hidden: 64,
        heads,
        action_space: spaces.action_space,
    };
    let mut config = AgentConfig::new(arch, seed);
    config.hyper.gamma_outer = 0.99;
    config.hyper.meta_lr = meta_lr;
    config.lr = LrSchedule::constant(3e-3);
    let mut agent = Agent::new(config);
    let harness = HarnessConfig {
        batch_size: 16,
        traj_len: 10,
        env_slots: 16,
        actors: 1,
        queue_batches: 4,
        deterministic: true,
        refresh: RefreshPolicy::EveryTrajectory,
        total_env_steps,
        seed,
    };
    let init = staclab_core::diffcore::sigmoid(agent.config.hyper.meta_init);
    let mut max_move: f64 = 0.0;
    let mut last_return = None;
    let summary = run_training(&mut agent, &spec, &harness, &mut |ev| {
        if let Some(r) = ev.recent_return {
            last_return = Some(r);
        }
        for hd in &ev.diagnostics.heads {
            let tr = &hd.transformed;
            for v in [tr.gamma, tr.lambda, tr.alpha_rho, tr.g_v, tr.g_p, tr.g_e] {
                max_move = max_move.max((v - init).abs());
            }
        }
    })
    .map_err(runtime_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("final_return", last_return)?;
    d.set_item("optimal_return", world.optimal_episode_return())?;
    d.set_item("episodes", summary.episode_returns.len())?;
    d.set_item("meta_steps", summary.meta_steps)?;
    d.set_item("env_steps", summary.env_steps)?;
    d.set_item("max_metaparam_movement", max_move)?;
    Ok(d.unbind())
}

#[pymodule]
fn staclab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(meta_transform, m)?)?;
    m.add_function(wrap_pyfunction!(leaky_weights, m)?)?;
    m.add_function(wrap_pyfunction!(vtrace_targets, m)?)?;
    m.add_function(wrap_pyfunction!(verify_random_instances, m)?)?;
    m.add_function(wrap_pyfunction!(train_gridworld, m)?)?;
    m.add_class::<TabularMdp>()?;
    Ok(())
}
