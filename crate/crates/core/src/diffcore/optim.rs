//! RMSProp for the inner (agent) update and Adam for the meta update.
//!
//! The RMSProp arithmetic here is mirrored node-for-node when the update is
//! replayed on the tape for metagradients; both paths must stay bit-identical
//! so a meta-frozen run reduces exactly to the plain training loop.

use ndarray::ArrayD;

use super::params::{GradSet, ParamSet};
use crate::error::DiffError;

/// Linear learning-rate schedule from `start` to `end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            start: lr,
            end: lr,
            total_steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        debug_assert!(self.start >= self.end && self.end >= 0.0);
        if self.total_steps == 0 {
            return self.end;
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// RMSProp state: decaying average of squared gradients per parameter.
#[derive(Debug, Clone)]
pub struct RmsPropState {
    pub sq_avg: GradSet,
    pub decay: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub step: u64,
}

impl RmsPropState {
    pub fn new(params: &ParamSet, decay: f64, eps: f64, schedule: LrSchedule) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0,1)");
        assert!(eps > 0.0, "eps must be positive");
        RmsPropState {
            sq_avg: GradSet::zeros_like(params),
            decay,
            eps,
            schedule,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.at(self.step)
    }
}

/// The elementwise RMSProp update. Kept as a free function so the tape
/// replay uses the exact same arithmetic order.
#[inline]
pub(crate) fn rmsprop_formula(
    theta: f64,
    g: f64,
    sq: f64,
    decay: f64,
    eps: f64,
    lr: f64,
) -> (f64, f64) {
    let sq_new = decay * sq + (1.0 - decay) * (g * g);
    let theta_new = theta - lr * (g / (sq_new.sqrt() + eps));
    (theta_new, sq_new)
}

/// One RMSProp step: `s' = decay*s + (1-decay)*g^2`,
/// `theta' = theta - lr * g / (sqrt(s') + eps)`.
pub fn rmsprop_step(
    params: &ParamSet,
    grads: &GradSet,
    state: &RmsPropState,
) -> Result<(ParamSet, RmsPropState), DiffError> {
    grads.congruent(params)?;
    let lr = state.lr();
    let mut new_params = ParamSet::new();
    let mut new_sq = ParamSet::new();
    for ((name, theta), (_, g)) in params.iter().zip(grads.iter()) {
        let sq = state.sq_avg.get(name).expect("congruent state");
        let mut t_out = ArrayD::zeros(theta.raw_dim());
        let mut s_out = ArrayD::zeros(theta.raw_dim());
        for (((t, gv), sv), (to, so)) in theta
            .iter()
            .zip(g.iter())
            .zip(sq.iter())
            .zip(t_out.iter_mut().zip(s_out.iter_mut()))
        {
            let (tn, sn) = rmsprop_formula(*t, *gv, *sv, state.decay, state.eps, lr);
            *to = tn;
            *so = sn;
        }
        new_params.insert(name, t_out);
        new_sq.insert(name, s_out);
    }
    if !new_params.all_finite() {
        return Err(DiffError::NumericFailure { op: "rmsprop_step" });
    }
    let new_state = RmsPropState {
        sq_avg: GradSet::from_params(new_sq),
        decay: state.decay,
        eps: state.eps,
        schedule: state.schedule,
        step: state.step + 1,
    };
    Ok((new_params, new_state))
}

/// Adam state over a flat metaparameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            b1,
            b2,
            eps,
            lr,
        }
    }

    /// Defaults used by the meta optimizer: lr 1e-3, b1 0.9, b2 0.999, eps 1e-4.
    pub fn with_defaults(dim: usize) -> Self {
        Self::new(dim, 1e-3, 0.9, 0.999, 1e-4)
    }
}

/// One bias-corrected Adam step on a flat vector.
pub fn adam_step(
    eta: &[f64],
    grad: &[f64],
    state: &AdamState,
) -> Result<(Vec<f64>, AdamState), DiffError> {
    if eta.len() != grad.len() || eta.len() != state.m.len() {
        return Err(DiffError::Structural(format!(
            "adam length mismatch: eta {}, grad {}, state {}",
            eta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    let t = state.step + 1;
    let mut out = vec![0.0; eta.len()];
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let bc1 = 1.0 - state.b1.powi(t as i32);
    let bc2 = 1.0 - state.b2.powi(t as i32);
    for i in 0..eta.len() {
        m[i] = state.b1 * m[i] + (1.0 - state.b1) * grad[i];
        v[i] = state.b2 * v[i] + (1.0 - state.b2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        out[i] = eta[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if !out.iter().all(|x| x.is_finite()) {
        return Err(DiffError::NumericFailure { op: "adam_step" });
    }
    let new_state = AdamState {
        m,
        v,
        step: t,
        b1: state.b1,
        b2: state.b2,
        eps: state.eps,
        lr: state.lr,
    };
    Ok((out, new_state))
}
