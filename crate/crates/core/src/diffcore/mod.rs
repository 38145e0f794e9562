//! Parameter containers, reverse-mode differentiation, and the two
//! optimizers: RMSProp for the inner loop and Adam for the meta loop.
//!
//! The centerpiece is [`grad_through_update`]: the gradient of a scalar
//! outer objective taken through one gradient-based update of the inner
//! parameters, which is what turns loss hyperparameters into trainable
//! metaparameters. All operations are pure value-in/value-out.

mod optim;
mod params;
mod tape;

pub use optim::{adam_step, rmsprop_step, AdamState, LrSchedule, RmsPropState};
pub use params::{GradSet, ParamSet};
pub use tape::{NodeId, Tape};

use std::collections::HashMap;

use crate::error::DiffError;

/// Logistic sigmoid. Single definition shared by the tape op, the
/// metaparameter transform and any plain-array path, so transformed values
/// agree bit-for-bit everywhere.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tape leaves standing for a [`ParamSet`], addressable by name.
pub struct ParamNodes {
    ids: Vec<(String, NodeId)>,
    index: HashMap<String, usize>,
}

impl ParamNodes {
    pub fn from_pairs(pairs: Vec<(String, NodeId)>) -> Self {
        let index = pairs
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ParamNodes { ids: pairs, index }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
        .1
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.ids.iter().map(|(_, id)| *id).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Insert every array of `params` as a differentiable leaf.
pub fn param_leaves(tape: &mut Tape, params: &ParamSet) -> ParamNodes {
    let mut ids = Vec::with_capacity(params.len());
    let mut index = HashMap::new();
    for (name, value) in params.iter() {
        let id = tape.leaf(value.clone());
        index.insert(name.to_string(), ids.len());
        ids.push((name.to_string(), id));
    }
    ParamNodes { ids, index }
}

/// Insert every array of `params` as a non-differentiable constant.
pub fn param_constants(tape: &mut Tape, params: &ParamSet) -> ParamNodes {
    let mut ids = Vec::with_capacity(params.len());
    let mut index = HashMap::new();
    for (name, value) in params.iter() {
        let id = tape.constant(value.clone());
        index.insert(name.to_string(), ids.len());
        ids.push((name.to_string(), id));
    }
    ParamNodes { ids, index }
}

/// Exact reverse-mode gradient of a scalar objective built from the tape
/// primitives. Stop-gradient nodes contribute zero.
pub fn grad<F>(objective: F, params: &ParamSet) -> Result<GradSet, DiffError>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> NodeId,
{
    let mut tape = Tape::new();
    let nodes = param_leaves(&mut tape, params);
    let out = objective(&mut tape, &nodes);
    tape.check()?;
    if !tape.scalar_value(out).is_finite() {
        return Err(DiffError::NumericFailure { op: "objective" });
    }
    let wrt = nodes.ids();
    let grad_ids = tape.backward(out, &wrt)?;
    let mut values = ParamSet::new();
    for ((name, _), gid) in nodes.ids.iter().zip(grad_ids) {
        values.insert(name.clone(), tape.value(gid).clone());
    }
    Ok(GradSet::from_params(values))
}

/// Evaluate a scalar objective without differentiating it.
pub fn eval_scalar<F>(params: &ParamSet, objective: F) -> Result<f64, DiffError>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> NodeId,
{
    let mut tape = Tape::new();
    let nodes = param_constants(&mut tape, params);
    let out = objective(&mut tape, &nodes);
    tape.check()?;
    Ok(tape.scalar_value(out))
}

/// How the inner update is replayed on the tape when differentiating
/// through it.
#[derive(Debug, Clone)]
pub enum UpdateRule<'a> {
    /// Plain gradient step with a fixed step size (identity preconditioner).
    Sgd { lr: f64 },
    /// RMSProp with the state's current schedule position. When
    /// `through_stats` is false the refreshed squared-gradient statistics
    /// are held constant at their post-update values (stop-gradient), so the
    /// metagradient flows only through the update's numerator.
    RmsProp {
        state: &'a RmsPropState,
        through_stats: bool,
    },
}

/// Replay one optimizer update symbolically: returns updated parameter nodes
/// whose values equal the plain-array optimizer output bit-for-bit.
pub fn apply_update_on_tape(
    tape: &mut Tape,
    theta: &ParamNodes,
    grad_ids: &[NodeId],
    rule: &UpdateRule,
) -> ParamNodes {
    let mut ids = Vec::with_capacity(theta.ids.len());
    let mut index = HashMap::new();
    match rule {
        UpdateRule::Sgd { lr } => {
            let lr_c = tape.scalar(*lr);
            for ((name, tid), &gid) in theta.ids.iter().zip(grad_ids) {
                let step = tape.mul(gid, lr_c);
                let updated = tape.sub(*tid, step);
                index.insert(name.clone(), ids.len());
                ids.push((name.clone(), updated));
            }
        }
        UpdateRule::RmsProp {
            state,
            through_stats,
        } => {
            let lr_c = tape.scalar(state.lr());
            let decay_c = tape.scalar(state.decay);
            let one_minus_decay_c = tape.scalar(1.0 - state.decay);
            let eps_c = tape.scalar(state.eps);
            for ((name, tid), &gid) in theta.ids.iter().zip(grad_ids) {
                let sq = tape.constant(state.sq_avg.get(name).expect("congruent state").clone());
                let g_stats = if *through_stats {
                    gid
                } else {
                    tape.stop_grad(gid)
                };
                let gg = tape.mul(g_stats, g_stats);
                let term1 = tape.mul(sq, decay_c);
                let term2 = tape.mul(gg, one_minus_decay_c);
                let sq_new = tape.add(term1, term2);
                let root = tape.sqrt(sq_new);
                let den = tape.add(root, eps_c);
                let quot = tape.div(gid, den);
                let step = tape.mul(quot, lr_c);
                let updated = tape.sub(*tid, step);
                index.insert(name.clone(), ids.len());
                ids.push((name.clone(), updated));
            }
        }
    }
    ParamNodes { ids, index }
}

/// Result of [`grad_through_update`].
pub struct UpdateOutcome {
    /// d(outer)/d(eta), one entry per metaparameter coordinate.
    pub metagrad: Vec<f64>,
    /// Parameters after the inner update.
    pub updated: ParamSet,
    /// Inner-loss gradient used by the update.
    pub grads: GradSet,
    pub inner_loss: f64,
    pub outer_loss: f64,
}

/// Differentiates `outer(OPT(theta, d inner/d theta))` with respect to the
/// metaparameter vector `eta`. `theta` is a constant leaf of the meta
/// problem: no backpropagation reaches earlier meta steps.
pub fn grad_through_update<FI, FO>(
    inner: FI,
    outer: FO,
    params: &ParamSet,
    eta: &[f64],
    rule: &UpdateRule,
) -> Result<UpdateOutcome, DiffError>
where
    FI: FnOnce(&mut Tape, &ParamNodes, &[NodeId]) -> NodeId,
    FO: FnOnce(&mut Tape, &ParamNodes) -> NodeId,
{
    let mut tape = Tape::new();
    let theta = param_leaves(&mut tape, params);
    let eta_ids: Vec<NodeId> = eta.iter().map(|&v| tape.scalar_leaf(v)).collect();

    let inner_loss = inner(&mut tape, &theta, &eta_ids);
    tape.check()?;
    let theta_ids = theta.ids();
    let grad_ids = tape.backward(inner_loss, &theta_ids)?;
    let updated_nodes = apply_update_on_tape(&mut tape, &theta, &grad_ids, rule);

    let outer_loss = outer(&mut tape, &updated_nodes);
    tape.check()?;
    let meta_ids = tape.backward(outer_loss, &eta_ids)?;

    let metagrad: Vec<f64> = meta_ids.iter().map(|&id| tape.scalar_value(id)).collect();
    if !metagrad.iter().all(|x| x.is_finite()) {
        return Err(DiffError::NumericFailure {
            op: "grad_through_update",
        });
    }
    let mut updated = ParamSet::new();
    for (name, id) in updated_nodes.ids.iter() {
        updated.insert(name.clone(), tape.value(*id).clone());
    }
    let mut grads = ParamSet::new();
    for ((name, _), gid) in theta.ids.iter().zip(&grad_ids) {
        grads.insert(name.clone(), tape.value(*gid).clone());
    }
    Ok(UpdateOutcome {
        metagrad,
        updated,
        grads: GradSet::from_params(grads),
        inner_loss: tape.scalar_value(inner_loss),
        outer_loss: tape.scalar_value(outer_loss),
    })
}
