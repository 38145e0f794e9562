//! Leaky V-trace targets and policy-gradient weights from trajectories.
//!
//! Importance weights mix truncated and untruncated importance sampling
//! ratios under leak coefficients:
//!
//!   IS_t  = pi(a_t|x_t) / mu(a_t|x_t)
//!   rho_t = alpha_rho * min(rho_bar, IS_t) + (1 - alpha_rho) * IS_t
//!   c_t   = lambda * (alpha_c * min(c_bar, IS_t) + (1 - alpha_c) * IS_t)
//!
//! Targets come from the backward recursion over one-step td errors:
//!
//!   delta_s = rho_s * (r_{s+1} + gamma * V(x_{s+1}) - V(x_s))
//!   e_s     = delta_s + gamma * c_s * e_{s+1},   e_{n+1} = 0
//!   v_s     = e_s + V(x_s)
//!
//! At alpha = 1 this is plain V-trace, at alpha = 0 (lambda = 1) it is
//! canonical importance sampling. Everything here is plain f64 arithmetic;
//! the loss module replays the same recursion on the differentiation tape
//! and the two paths are held to agree in tests.

use ndarray::Array2;

use crate::error::TrajectoryError;

/// Probability floor applied before any division by a probability.
pub const PROB_FLOOR: f64 = 1e-30;

/// Action taken at one step, with what the policy needs to re-score it.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionRecord {
    Discrete(usize),
    /// Bounded continuous action `tanh(pre_squash)` with the pre-squash
    /// Gaussian sample kept for exact log-density evaluation.
    Continuous {
        action: Vec<f64>,
        pre_squash: Vec<f64>,
    },
}

/// Fixed-length learning segment: n steps plus the bootstrap observation.
/// `rewards[s]` is the reward that followed `actions[s]` taken at
/// `observations[s]`; the value bootstrap reads `observations[n]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub observations: Array2<f64>,
    pub actions: Vec<ActionRecord>,
    pub rewards: Vec<f64>,
    behavior_log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    pub param_version: u64,
}

impl Trajectory {
    /// Builds a trajectory from behavior probabilities, validating that each
    /// is strictly positive and finite.
    pub fn new(
        observations: Array2<f64>,
        actions: Vec<ActionRecord>,
        rewards: Vec<f64>,
        behavior_probs: &[f64],
        dones: Vec<bool>,
        param_version: u64,
    ) -> Result<Self, TrajectoryError> {
        for (step, &p) in behavior_probs.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 {
                return Err(TrajectoryError::NonPositiveBehaviorProb { step, value: p });
            }
        }
        let log_probs = behavior_probs.iter().map(|p| p.ln()).collect();
        Self::from_log_probs(observations, actions, rewards, log_probs, dones, param_version)
    }

    /// Builds a trajectory from behavior log-probabilities directly (the
    /// form the acting path produces), avoiding an exp/ln round trip.
    pub fn from_log_probs(
        observations: Array2<f64>,
        actions: Vec<ActionRecord>,
        rewards: Vec<f64>,
        behavior_log_probs: Vec<f64>,
        dones: Vec<bool>,
        param_version: u64,
    ) -> Result<Self, TrajectoryError> {
        let n = actions.len();
        if rewards.len() != n || behavior_log_probs.len() != n || dones.len() != n {
            return Err(TrajectoryError::LengthMismatch(format!(
                "actions {n}, rewards {}, behavior {}, dones {}",
                rewards.len(),
                behavior_log_probs.len(),
                dones.len()
            )));
        }
        if observations.nrows() != n + 1 {
            return Err(TrajectoryError::LengthMismatch(format!(
                "observations rows {} but need n+1 = {}",
                observations.nrows(),
                n + 1
            )));
        }
        for (step, &lp) in behavior_log_probs.iter().enumerate() {
            if !lp.is_finite() {
                return Err(TrajectoryError::NonPositiveBehaviorProb {
                    step,
                    value: lp.exp(),
                });
            }
        }
        Ok(Trajectory {
            observations,
            actions,
            rewards,
            behavior_log_probs,
            dones,
            param_version,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn behavior_log_probs(&self) -> &[f64] {
        &self.behavior_log_probs
    }

    pub fn behavior_probs(&self) -> Vec<f64> {
        self.behavior_log_probs.iter().map(|lp| lp.exp()).collect()
    }
}

/// Leak and truncation settings for one target computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VTraceConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha_rho: f64,
    pub alpha_c: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
}

impl VTraceConfig {
    pub fn new(gamma: f64, lambda: f64, alpha: f64) -> Result<Self, TrajectoryError> {
        Self::with_independent_alphas(gamma, lambda, alpha, alpha, 1.0, 1.0)
    }

    pub fn with_independent_alphas(
        gamma: f64,
        lambda: f64,
        alpha_rho: f64,
        alpha_c: f64,
        rho_bar: f64,
        c_bar: f64,
    ) -> Result<Self, TrajectoryError> {
        let cfg = VTraceConfig {
            gamma,
            lambda,
            alpha_rho,
            alpha_c,
            rho_bar,
            c_bar,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrajectoryError::InvalidConfig(format!(
                "gamma {} outside (0,1]",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrajectoryError::InvalidConfig(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        for (name, a) in [("alpha_rho", self.alpha_rho), ("alpha_c", self.alpha_c)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(TrajectoryError::InvalidConfig(format!(
                    "{name} {a} outside [0,1]"
                )));
            }
        }
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return Err(TrajectoryError::InvalidConfig(format!(
                "need rho_bar >= c_bar > 0, got rho_bar {} c_bar {}",
                self.rho_bar, self.c_bar
            )));
        }
        Ok(())
    }
}

/// Per-step targets, policy-gradient weights and td errors.
#[derive(Debug, Clone)]
pub struct VTraceResult {
    pub targets: Vec<f64>,
    pub rho: Vec<f64>,
    pub td_errors: Vec<f64>,
}

/// Importance sampling ratios pi/mu for the taken actions, computed in log
/// space. The ratios are data, not a function of the policy parameters:
/// the caller supplies already-materialized probabilities.
pub fn importance_ratios(
    target_probs: &[f64],
    traj: &Trajectory,
) -> Result<Vec<f64>, TrajectoryError> {
    if target_probs.len() != traj.len() {
        return Err(TrajectoryError::LengthMismatch(format!(
            "target probs {} vs trajectory {}",
            target_probs.len(),
            traj.len()
        )));
    }
    Ok(target_probs
        .iter()
        .zip(traj.behavior_log_probs())
        .map(|(&p, &lmu)| (p.max(PROB_FLOOR).ln() - lmu).exp())
        .collect())
}

/// Same ratios when the target policy provides log-probabilities.
pub fn importance_ratios_from_logs(target_log_probs: &[f64], behavior_log_probs: &[f64]) -> Vec<f64> {
    target_log_probs
        .iter()
        .zip(behavior_log_probs)
        .map(|(&lp, &lmu)| (lp - lmu).exp())
        .collect()
}

/// Leaky policy weights rho_t and trace weights c_t. The lambda factor is
/// part of c_t only.
pub fn leaky_weights(is_ratios: &[f64], cfg: &VTraceConfig) -> (Vec<f64>, Vec<f64>) {
    let rho = is_ratios
        .iter()
        .map(|&is| cfg.alpha_rho * is.min(cfg.rho_bar) + (1.0 - cfg.alpha_rho) * is)
        .collect();
    let c = is_ratios
        .iter()
        .map(|&is| cfg.lambda * (cfg.alpha_c * is.min(cfg.c_bar) + (1.0 - cfg.alpha_c) * is))
        .collect();
    (rho, c)
}

/// One-step td errors `rho_s * (r_{s+1} + gamma * V(x_{s+1}) - V(x_s))`.
/// The next-state value is masked to zero across episode boundaries.
pub fn td_errors(
    rho: &[f64],
    traj: &Trajectory,
    values: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, TrajectoryError> {
    let n = traj.len();
    if rho.len() != n || values.len() != n + 1 {
        return Err(TrajectoryError::LengthMismatch(format!(
            "rho {}, values {} for trajectory of {n}",
            rho.len(),
            values.len()
        )));
    }
    Ok((0..n)
        .map(|s| {
            let mask = if traj.dones[s] { 0.0 } else { 1.0 };
            rho[s] * (traj.rewards[s] + gamma * mask * values[s + 1] - values[s])
        })
        .collect())
}

/// Backward recursion producing the targets v_s. `values` covers the n+1
/// observations; `dones` cuts the trace at episode boundaries.
pub fn backward_targets(
    delta: &[f64],
    c: &[f64],
    gamma: f64,
    values: &[f64],
    dones: &[bool],
) -> Vec<f64> {
    let n = delta.len();
    debug_assert_eq!(c.len(), n);
    debug_assert_eq!(values.len(), n + 1);
    debug_assert_eq!(dones.len(), n);
    let mut e = vec![0.0; n + 1];
    for s in (0..n).rev() {
        let mask = if dones[s] { 0.0 } else { 1.0 };
        e[s] = delta[s] + gamma * mask * c[s] * e[s + 1];
    }
    (0..n).map(|s| e[s] + values[s]).collect()
}

/// Full pipeline: ratios, leaky weights, td errors, backward recursion.
pub fn vtrace_targets(
    traj: &Trajectory,
    target_probs: &[f64],
    values: &[f64],
    cfg: &VTraceConfig,
) -> Result<VTraceResult, TrajectoryError> {
    cfg.validate()?;
    let is = importance_ratios(target_probs, traj)?;
    let (rho, c) = leaky_weights(&is, cfg);
    let delta = td_errors(&rho, traj, values, cfg.gamma)?;
    let targets = backward_targets(&delta, &c, cfg.gamma, values, &traj.dones);
    if !targets.iter().all(|v| v.is_finite()) {
        return Err(TrajectoryError::InvalidConfig(
            "non-finite v-trace target".into(),
        ));
    }
    Ok(VTraceResult {
        targets,
        rho,
        td_errors: delta,
    })
}
