//! Inner and outer actor-critic losses on the differentiation tape.
//!
//! The inner loss is parameterized by per-head metaparameters; raw values
//! live in unconstrained space and are squashed through a sigmoid (loss
//! coefficients additionally scale by their outer-loss counterparts). The
//! target recursion is replayed on the tape so gradients flow to the
//! metaparameters through gamma, lambda and the leak coefficients, while
//! every stop-gradient placement keeps the targets constant with respect to
//! the agent parameters.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::diffcore::{sigmoid, NodeId, Tape};
use crate::error::{LossError, TrajectoryError};
use crate::vtrace::{ActionRecord, Trajectory};

/// Fixed outer-loss constants and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub gamma_outer: f64,
    pub lambda_outer: f64,
    pub alpha_outer: f64,
    pub g_v_outer: f64,
    pub g_p_outer: f64,
    pub g_e_outer: f64,
    pub g_kl: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub meta_init: f64,
    pub meta_lr: f64,
    pub meta_b1: f64,
    pub meta_b2: f64,
    pub meta_eps: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            gamma_outer: 0.995,
            lambda_outer: 1.0,
            alpha_outer: 1.0,
            g_v_outer: 0.25,
            g_p_outer: 1.0,
            g_e_outer: 0.01,
            g_kl: 1.0,
            rho_bar: 1.0,
            c_bar: 1.0,
            meta_init: 4.6,
            meta_lr: 1e-3,
            meta_b1: 0.9,
            meta_b2: 0.999,
            meta_eps: 1e-4,
        }
    }
}

/// Which metaparameters are self-tuned. A parameter left out of the mask is
/// pinned to its outer-loss value in the inner loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaMask {
    pub gamma: bool,
    pub lambda: bool,
    pub alpha: bool,
    pub g_v: bool,
    pub g_p: bool,
    pub g_e: bool,
}

impl MetaMask {
    pub fn all() -> Self {
        MetaMask {
            gamma: true,
            lambda: true,
            alpha: true,
            g_v: true,
            g_p: true,
            g_e: true,
        }
    }

    pub fn none() -> Self {
        MetaMask {
            gamma: false,
            lambda: false,
            alpha: false,
            g_v: false,
            g_p: false,
            g_e: false,
        }
    }

    /// Parses a comma-separated subset, e.g. `"gamma,lambda,g_v"`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut mask = MetaMask::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "gamma" => mask.gamma = true,
                "lambda" => mask.lambda = true,
                "alpha" => mask.alpha = true,
                "g_v" => mask.g_v = true,
                "g_p" => mask.g_p = true,
                "g_e" => mask.g_e = true,
                other => return Err(format!("unknown metaparameter {other}")),
            }
        }
        Ok(mask)
    }
}

/// Flat layout of the raw metaparameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaLayout {
    pub heads: usize,
    pub single_alpha: bool,
}

impl MetaLayout {
    pub fn coords_per_head(&self) -> usize {
        if self.single_alpha {
            6
        } else {
            7
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.coords_per_head()
    }

    /// Name of flat coordinate `k`, e.g. `head1/alpha_c`.
    pub fn coord_name(&self, k: usize) -> String {
        let per = self.coords_per_head();
        let head = k / per;
        let names_single = ["gamma", "lambda", "alpha", "g_v", "g_p", "g_e"];
        let names_split = ["gamma", "lambda", "alpha_rho", "alpha_c", "g_v", "g_p", "g_e"];
        let name = if self.single_alpha {
            names_single[k % per]
        } else {
            names_split[k % per]
        };
        format!("head{head}/{name}")
    }
}

/// Raw per-head metaparameters in unconstrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub layout: MetaLayout,
    pub raw: Vec<f64>,
}

impl MetaParams {
    pub fn init(layout: MetaLayout, value: f64) -> Self {
        MetaParams {
            layout,
            raw: vec![value; layout.dim()],
        }
    }

    pub fn head_slice(&self, head: usize) -> &[f64] {
        let per = self.layout.coords_per_head();
        &self.raw[head * per..(head + 1) * per]
    }
}

/// Transformed hyperparameters of one head, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct EffectiveHypers {
    pub gamma: NodeId,
    pub lambda: NodeId,
    pub alpha_rho: NodeId,
    pub alpha_c: NodeId,
    pub g_v: NodeId,
    pub g_p: NodeId,
    pub g_e: NodeId,
    pub rho_bar: f64,
    pub c_bar: f64,
}

/// Transformed hyperparameters of one head, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveValues {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha_rho: f64,
    pub alpha_c: f64,
    pub g_v: f64,
    pub g_p: f64,
    pub g_e: f64,
}

/// Sigmoid transform of one head's raw metaparameters: gamma, lambda and the
/// leak coefficients map through the sigmoid, loss coefficients additionally
/// scale by the outer coefficient. Masked-out entries are pinned to their
/// outer values.
pub fn meta_transform(
    head_raw: &[f64],
    layout: &MetaLayout,
    mask: &MetaMask,
    hp: &HyperParams,
) -> EffectiveValues {
    let split = !layout.single_alpha;
    let idx_gv = if split { 4 } else { 3 };
    let alpha_rho = if mask.alpha {
        sigmoid(head_raw[2])
    } else {
        hp.alpha_outer
    };
    let alpha_c = if mask.alpha {
        if split {
            sigmoid(head_raw[3])
        } else {
            alpha_rho
        }
    } else {
        hp.alpha_outer
    };
    EffectiveValues {
        gamma: if mask.gamma {
            sigmoid(head_raw[0])
        } else {
            hp.gamma_outer
        },
        lambda: if mask.lambda {
            sigmoid(head_raw[1])
        } else {
            hp.lambda_outer
        },
        alpha_rho,
        alpha_c,
        g_v: if mask.g_v {
            sigmoid(head_raw[idx_gv]) * hp.g_v_outer
        } else {
            hp.g_v_outer
        },
        g_p: if mask.g_p {
            sigmoid(head_raw[idx_gv + 1]) * hp.g_p_outer
        } else {
            hp.g_p_outer
        },
        g_e: if mask.g_e {
            sigmoid(head_raw[idx_gv + 2]) * hp.g_e_outer
        } else {
            hp.g_e_outer
        },
    }
}

/// Transformed values before outer-coefficient scaling, the form used for
/// reporting every metaparameter on a common (0,1) scale.
pub fn meta_transform_pre_scale(head_raw: &[f64], layout: &MetaLayout) -> EffectiveValues {
    let split = !layout.single_alpha;
    let idx_gv = if split { 4 } else { 3 };
    EffectiveValues {
        gamma: sigmoid(head_raw[0]),
        lambda: sigmoid(head_raw[1]),
        alpha_rho: sigmoid(head_raw[2]),
        alpha_c: if split {
            sigmoid(head_raw[3])
        } else {
            sigmoid(head_raw[2])
        },
        g_v: sigmoid(head_raw[idx_gv]),
        g_p: sigmoid(head_raw[idx_gv + 1]),
        g_e: sigmoid(head_raw[idx_gv + 2]),
    }
}

/// Tape version of [`meta_transform`]: `head_ids` are the raw leaves of one
/// head in layout order.
pub fn meta_transform_on_tape(
    tape: &mut Tape,
    head_ids: &[NodeId],
    layout: &MetaLayout,
    mask: &MetaMask,
    hp: &HyperParams,
) -> EffectiveHypers {
    let split = !layout.single_alpha;
    let idx_gv = if split { 4 } else { 3 };
    let gamma = if mask.gamma {
        tape.sigmoid(head_ids[0])
    } else {
        tape.scalar(hp.gamma_outer)
    };
    let lambda = if mask.lambda {
        tape.sigmoid(head_ids[1])
    } else {
        tape.scalar(hp.lambda_outer)
    };
    let (alpha_rho, alpha_c) = if mask.alpha {
        let ar = tape.sigmoid(head_ids[2]);
        let ac = if split {
            tape.sigmoid(head_ids[3])
        } else {
            ar
        };
        (ar, ac)
    } else {
        let a = tape.scalar(hp.alpha_outer);
        (a, a)
    };
    let coeff = |tape: &mut Tape, on: bool, id: NodeId, outer: f64| {
        if on {
            let s = tape.sigmoid(id);
            let c = tape.scalar(outer);
            tape.mul(s, c)
        } else {
            tape.scalar(outer)
        }
    };
    let g_v = coeff(tape, mask.g_v, head_ids[idx_gv], hp.g_v_outer);
    let g_p = coeff(tape, mask.g_p, head_ids[idx_gv + 1], hp.g_p_outer);
    let g_e = coeff(tape, mask.g_e, head_ids[idx_gv + 2], hp.g_e_outer);
    EffectiveHypers {
        gamma,
        lambda,
        alpha_rho,
        alpha_c,
        g_v,
        g_p,
        g_e,
        rho_bar: hp.rho_bar,
        c_bar: hp.c_bar,
    }
}

/// Outer-loss hyperparameters as constants (alpha pinned to its outer value,
/// plain V-trace targets).
pub fn outer_hypers_on_tape(tape: &mut Tape, hp: &HyperParams) -> EffectiveHypers {
    let alpha = tape.scalar(hp.alpha_outer);
    EffectiveHypers {
        gamma: tape.scalar(hp.gamma_outer),
        lambda: tape.scalar(hp.lambda_outer),
        alpha_rho: alpha,
        alpha_c: alpha,
        g_v: tape.scalar(hp.g_v_outer),
        g_p: tape.scalar(hp.g_p_outer),
        g_e: tape.scalar(hp.g_e_outer),
        rho_bar: hp.rho_bar,
        c_bar: hp.c_bar,
    }
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A learning batch of m equal-length trajectories, flattened step-major:
/// row `s*m + i` holds step s of trajectory i. Observations carry the extra
/// bootstrap row block.
#[derive(Debug, Clone)]
pub struct Batch {
    pub m: usize,
    pub n: usize,
    pub obs_dim: usize,
    pub observations: Array2<f64>,
    pub actions: Vec<ActionRecord>,
    pub rewards: Vec<f64>,
    pub behavior_log_probs: Vec<f64>,
    /// 1.0 where the episode continues past the step, 0.0 at a boundary.
    pub continue_masks: Vec<f64>,
}

impl Batch {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Batch, TrajectoryError> {
        let m = trajs.len();
        if m == 0 {
            return Err(TrajectoryError::LengthMismatch("empty batch".into()));
        }
        let n = trajs[0].len();
        let obs_dim = trajs[0].observations.ncols();
        for t in trajs {
            if t.len() != n || t.observations.ncols() != obs_dim {
                return Err(TrajectoryError::LengthMismatch(
                    "batch trajectories must share length and observation width".into(),
                ));
            }
        }
        let mut observations = Array2::zeros(((n + 1) * m, obs_dim));
        let mut actions = Vec::with_capacity(n * m);
        let mut rewards = Vec::with_capacity(n * m);
        let mut behavior_log_probs = Vec::with_capacity(n * m);
        let mut continue_masks = Vec::with_capacity(n * m);
        for s in 0..=n {
            for (i, t) in trajs.iter().enumerate() {
                observations
                    .row_mut(s * m + i)
                    .assign(&t.observations.row(s));
            }
        }
        for s in 0..n {
            for t in trajs.iter() {
                actions.push(t.actions[s].clone());
                rewards.push(t.rewards[s]);
                behavior_log_probs.push(t.behavior_log_probs()[s]);
                continue_masks.push(if t.dones[s] { 0.0 } else { 1.0 });
            }
        }
        Ok(Batch {
            m,
            n,
            obs_dim,
            observations,
            actions,
            rewards,
            behavior_log_probs,
            continue_masks,
        })
    }

    fn step_const(&self, tape: &mut Tape, data: &[f64], s: usize) -> NodeId {
        let slice = &data[s * self.m..(s + 1) * self.m];
        tape.constant(ArrayD::from_shape_vec(IxDyn(&[self.m]), slice.to_vec()).unwrap())
    }
}

// ---------------------------------------------------------------------------
// Network head outputs on the tape
// ---------------------------------------------------------------------------

/// Policy head output for all (n+1)*m rows.
#[derive(Debug, Clone, Copy)]
pub enum PolicyNodes {
    /// Row-wise log-softmax over the action set.
    Discrete { log_probs: NodeId },
    /// Per-dimension mean and the raw pre-sigma output y.
    Continuous { mean: NodeId, raw_std: NodeId },
}

/// One head's forward outputs: policy parameters and the value vector over
/// all (n+1)*m rows.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub policy: PolicyNodes,
    pub values: NodeId,
}

/// Bounds of the squashed-Gaussian log-std transform
/// `sigma(y) = exp(min + 0.5 (max - min) (tanh(y) + 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for SigmaBounds {
    fn default() -> Self {
        // Keeps sigma in [exp(-5), 1].
        SigmaBounds { min: -5.0, max: 0.0 }
    }
}

impl SigmaBounds {
    pub fn log_std(&self, y: f64) -> f64 {
        self.min + 0.5 * (self.max - self.min) * (y.tanh() + 1.0)
    }

    pub fn std(&self, y: f64) -> f64 {
        self.log_std(y).exp()
    }

    /// Tape version, returning (log_sigma, sigma).
    pub fn on_tape(&self, tape: &mut Tape, y: NodeId) -> (NodeId, NodeId) {
        let t = tape.tanh(y);
        let one = tape.scalar(1.0);
        let tp1 = tape.add(t, one);
        let half_range = tape.scalar(0.5 * (self.max - self.min));
        let scaled = tape.mul(half_range, tp1);
        let min_c = tape.scalar(self.min);
        let log_std = tape.add(min_c, scaled);
        let std = tape.exp(log_std);
        (log_std, std)
    }
}

// ---------------------------------------------------------------------------
// Individual loss terms
// ---------------------------------------------------------------------------

/// Sum of squared errors `sum((targets - predictions)^2)`, any shape.
pub fn squared_error_sum(tape: &mut Tape, predictions: NodeId, targets: NodeId) -> NodeId {
    let d = tape.sub(targets, predictions);
    let sq = tape.mul(d, d);
    tape.sum_all(sq)
}

/// Value loss `g_v * sum((v - V)^2)`. Targets must already be constants with
/// respect to the parameters being trained.
pub fn value_loss(tape: &mut Tape, predictions: NodeId, targets: NodeId, g_v: NodeId) -> NodeId {
    let s = squared_error_sum(tape, predictions, targets);
    tape.mul(g_v, s)
}

/// Policy-gradient term `-g_p * sum(rho * log pi * A)`. In outer mode the
/// whole advantage is stop-gradiented; in inner mode the caller passes an
/// advantage whose value terms already carry the prescribed stop-gradients.
pub fn policy_loss(
    tape: &mut Tape,
    log_probs_taken: NodeId,
    rho: NodeId,
    advantage: NodeId,
    g_p: NodeId,
    outer_mode: bool,
) -> NodeId {
    let adv = if outer_mode {
        tape.stop_grad(advantage)
    } else {
        advantage
    };
    let w = tape.mul(rho, log_probs_taken);
    let terms = tape.mul(w, adv);
    let total = tape.sum_all(terms);
    let scaled = tape.mul(g_p, total);
    tape.neg(scaled)
}

/// Entropy regularizer `g_e * sum(pi log pi)`: decreases as entropy rises.
pub fn entropy_loss(tape: &mut Tape, log_probs: NodeId, g_e: NodeId) -> NodeId {
    let p = tape.exp(log_probs);
    let plogp = tape.mul(p, log_probs);
    let s = tape.sum_all(plogp);
    tape.mul(g_e, s)
}

/// `g_kl * sum KL(new || old)` over rows of discrete log-prob matrices.
/// The old policy must enter as a constant.
pub fn kl_regularizer_discrete(
    tape: &mut Tape,
    log_probs_new: NodeId,
    log_probs_old: NodeId,
    g_kl: NodeId,
) -> NodeId {
    let p = tape.exp(log_probs_new);
    let d = tape.sub(log_probs_new, log_probs_old);
    let terms = tape.mul(p, d);
    let s = tape.sum_all(terms);
    tape.mul(g_kl, s)
}

/// `g_kl * sum KL(N(m1,s1) || N(m0,s0))` elementwise over diagonal Gaussians.
/// The squashing tanh is a fixed bijection, so this also equals the KL of
/// the squashed distributions.
#[allow(clippy::too_many_arguments)]
pub fn kl_regularizer_gaussian(
    tape: &mut Tape,
    mean_new: NodeId,
    log_std_new: NodeId,
    std_new: NodeId,
    mean_old: NodeId,
    log_std_old: NodeId,
    std_old: NodeId,
    g_kl: NodeId,
) -> NodeId {
    let dlog = tape.sub(log_std_old, log_std_new);
    let dm = tape.sub(mean_new, mean_old);
    let dm2 = tape.mul(dm, dm);
    let s1sq = tape.mul(std_new, std_new);
    let num = tape.add(s1sq, dm2);
    let s0sq = tape.mul(std_old, std_old);
    let two = tape.scalar(2.0);
    let den = tape.mul(two, s0sq);
    let frac = tape.div(num, den);
    let half = tape.scalar(0.5);
    let t = tape.add(dlog, frac);
    let t = tape.sub(t, half);
    let s = tape.sum_all(t);
    tape.mul(g_kl, s)
}

/// KL(N(mean, std) || N(0, 1)) summed elementwise: the entropy substitute
/// for continuous heads.
pub fn gaussian_kl_to_standard_on_tape(
    tape: &mut Tape,
    mean: NodeId,
    log_std: NodeId,
    std: NodeId,
) -> NodeId {
    let s2 = tape.mul(std, std);
    let m2 = tape.mul(mean, mean);
    let sum = tape.add(s2, m2);
    let one = tape.scalar(1.0);
    let half = tape.scalar(0.5);
    let t = tape.sub(sum, one);
    let t = tape.mul(half, t);
    let t = tape.sub(t, log_std);
    tape.sum_all(t)
}

// ---------------------------------------------------------------------------
// Squashed Gaussian, numeric side
// ---------------------------------------------------------------------------

/// Per-dimension squashed-Gaussian head outputs.
#[derive(Debug, Clone)]
pub struct SquashedGaussianParams {
    pub mean: Vec<f64>,
    pub raw_std: Vec<f64>,
    pub bounds: SigmaBounds,
}

/// `ln(1 - tanh(u)^2)` evaluated stably for any u.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    2.0 * ((2.0f64).ln() - a - (-2.0 * a).exp().ln_1p())
}

/// Log density of the bounded action `tanh(u)` given the pre-squash sample u:
/// Gaussian log density of u minus the tanh Jacobian correction, summed over
/// dimensions.
pub fn squashed_gaussian_logprob(
    params: &SquashedGaussianParams,
    pre_squash: &[f64],
) -> Result<f64, LossError> {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    assert_eq!(params.mean.len(), pre_squash.len());
    let mut total = 0.0;
    for (dim, (&u, (&m, &y))) in pre_squash
        .iter()
        .zip(params.mean.iter().zip(&params.raw_std))
        .enumerate()
    {
        if u.tanh().abs() >= 1.0 {
            return Err(LossError::Saturated { dim });
        }
        let log_std = params.bounds.log_std(y);
        let std = log_std.exp();
        let z = (u - m) / std;
        total += -0.5 * z * z - log_std - HALF_LN_2PI - log_one_minus_tanh_sq(u);
    }
    Ok(total)
}

/// Closed-form KL(N(mean, std^2) || N(0, 1)) summed over dimensions.
pub fn gaussian_kl_to_standard(params: &SquashedGaussianParams) -> f64 {
    params
        .mean
        .iter()
        .zip(&params.raw_std)
        .map(|(&m, &y)| {
            let log_std = params.bounds.log_std(y);
            let s = log_std.exp();
            0.5 * (s * s + m * m - 1.0) - log_std
        })
        .sum()
}

// ---------------------------------------------------------------------------
// The composite actor-critic loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    Inner,
    Outer,
}

/// Scalar nodes of the assembled loss and its terms.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: NodeId,
    pub value: NodeId,
    pub policy: NodeId,
    pub entropy: NodeId,
    /// Mean importance ratio over the batch (diagnostic).
    pub mean_is: f64,
}

/// Log-probabilities of the taken actions for the n action-step rows.
fn taken_log_probs(
    tape: &mut Tape,
    policy: &PolicyNodes,
    batch: &Batch,
    bounds: &SigmaBounds,
) -> NodeId {
    let rows = batch.n * batch.m;
    match policy {
        PolicyNodes::Discrete { log_probs } => {
            let block = tape.slice_rows(*log_probs, 0, rows);
            let num_actions = tape.shape(block)[1];
            let mut onehot = Array2::<f64>::zeros((rows, num_actions));
            for (r, a) in batch.actions.iter().enumerate() {
                match a {
                    ActionRecord::Discrete(idx) => onehot[(r, *idx)] = 1.0,
                    _ => panic!("discrete head with continuous action record"),
                }
            }
            let oh = tape.constant(onehot.into_dyn());
            let picked = tape.mul(block, oh);
            tape.sum_axis(picked, 1)
        }
        PolicyNodes::Continuous { mean, raw_std } => {
            const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
            let mean_b = tape.slice_rows(*mean, 0, rows);
            let raw_b = tape.slice_rows(*raw_std, 0, rows);
            let dims = tape.shape(mean_b)[1];
            let mut u = Array2::<f64>::zeros((rows, dims));
            let mut jac = Array2::<f64>::zeros((rows, dims));
            for (r, a) in batch.actions.iter().enumerate() {
                match a {
                    ActionRecord::Continuous { pre_squash, .. } => {
                        for (d, &uv) in pre_squash.iter().enumerate() {
                            u[(r, d)] = uv;
                            jac[(r, d)] = log_one_minus_tanh_sq(uv);
                        }
                    }
                    _ => panic!("continuous head with discrete action record"),
                }
            }
            let u_c = tape.constant(u.into_dyn());
            let jac_c = tape.constant(jac.into_dyn());
            let (log_std, std) = bounds.on_tape(tape, raw_b);
            let diff = tape.sub(u_c, mean_b);
            let z = tape.div(diff, std);
            let zz = tape.mul(z, z);
            let half = tape.scalar(0.5);
            let quad = tape.mul(half, zz);
            let neg_quad = tape.neg(quad);
            let t = tape.sub(neg_quad, log_std);
            let c = tape.scalar(HALF_LN_2PI);
            let t = tape.sub(t, c);
            let t = tape.sub(t, jac_c);
            tape.sum_axis(t, 1)
        }
    }
}

/// Builds the full per-head loss: leaky V-trace targets on the tape, then
/// the value, policy and entropy terms summed over steps 1..n-1 of every
/// trajectory (the final transition belongs to the next batch). In inner
/// mode the advantage keeps its dependence on the metaparameters through
/// gamma and the targets; in outer mode the advantage is entirely
/// stop-gradiented.
pub fn actor_critic_loss(
    tape: &mut Tape,
    head: &HeadNodes,
    batch: &Batch,
    eff: &EffectiveHypers,
    mode: LossMode,
    bounds: &SigmaBounds,
) -> LossParts {
    let (m, n) = (batch.m, batch.n);
    assert!(n >= 2, "need at least two steps for the loss sums");

    let logp_taken = taken_log_probs(tape, &head.policy, batch, bounds);

    // Importance ratios, constant w.r.t. the parameters.
    let logp_sg = tape.stop_grad(logp_taken);
    let logmu = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[n * m]), batch.behavior_log_probs.clone()).unwrap(),
    );
    let logratio = tape.sub(logp_sg, logmu);
    let is_all = tape.exp(logratio);
    let mean_is = tape.value(is_all).sum() / (n * m) as f64;

    let one = tape.scalar(1.0);
    let om_rho = tape.sub(one, eff.alpha_rho);
    let om_c = tape.sub(one, eff.alpha_c);
    let rho_bar_c = tape.scalar(eff.rho_bar);
    let c_bar_c = tape.scalar(eff.c_bar);

    // Per-step slices.
    let mut v = Vec::with_capacity(n + 1);
    let mut v_sg = Vec::with_capacity(n + 1);
    for s in 0..=n {
        let vs = tape.slice_rows(head.values, s * m, m);
        v.push(vs);
        v_sg.push(tape.stop_grad(vs));
    }
    let mut rho = Vec::with_capacity(n);
    let mut cw = Vec::with_capacity(n);
    let mut gmask = Vec::with_capacity(n);
    let mut logp_s = Vec::with_capacity(n);
    let mut r_c = Vec::with_capacity(n);
    for s in 0..n {
        let is_s = tape.slice_rows(is_all, s * m, m);
        let min_r = tape.minimum(is_s, rho_bar_c);
        let t1 = tape.mul(eff.alpha_rho, min_r);
        let t2 = tape.mul(om_rho, is_s);
        rho.push(tape.add(t1, t2));
        let min_c = tape.minimum(is_s, c_bar_c);
        let u1 = tape.mul(eff.alpha_c, min_c);
        let u2 = tape.mul(om_c, is_s);
        let mix = tape.add(u1, u2);
        cw.push(tape.mul(eff.lambda, mix));
        let mask = batch.step_const(tape, &batch.continue_masks, s);
        gmask.push(tape.mul(eff.gamma, mask));
        logp_s.push(tape.slice_rows(logp_taken, s * m, m));
        r_c.push(batch.step_const(tape, &batch.rewards, s));
    }

    // One-step td errors: rho_s * (r + gamma*mask*V(x_{s+1}) - V(x_s)), both
    // value terms stop-gradiented.
    let mut delta = Vec::with_capacity(n);
    for s in 0..n {
        let gv = tape.mul(gmask[s], v_sg[s + 1]);
        let t = tape.add(r_c[s], gv);
        let t = tape.sub(t, v_sg[s]);
        delta.push(tape.mul(rho[s], t));
    }

    // Backward recursion e_s = delta_s + gamma*mask*c_s*e_{s+1}; the targets
    // v_s = e_s + sg(V(x_s)) are constants w.r.t. the agent parameters but
    // carry metaparameter gradients.
    let zeros = tape.constant(ArrayD::zeros(IxDyn(&[m])));
    let mut e_next = zeros;
    let mut targets = vec![usize::MAX; n];
    for s in (0..n).rev() {
        let gc = tape.mul(gmask[s], cw[s]);
        let gce = tape.mul(gc, e_next);
        let e = tape.add(delta[s], gce);
        targets[s] = tape.add(e, v_sg[s]);
        e_next = e;
    }

    let mut value_acc = tape.scalar(0.0);
    let mut policy_acc = tape.scalar(0.0);
    for s in 0..n - 1 {
        let sq = squared_error_sum(tape, v[s], targets[s]);
        value_acc = tape.add(value_acc, sq);

        let gv = tape.mul(gmask[s], targets[s + 1]);
        let adv = tape.add(r_c[s], gv);
        let adv = tape.sub(adv, v_sg[s]);
        let adv = if mode == LossMode::Outer {
            tape.stop_grad(adv)
        } else {
            adv
        };
        let w = tape.mul(rho[s], logp_s[s]);
        let terms = tape.mul(w, adv);
        let term_sum = tape.sum_all(terms);
        policy_acc = tape.add(policy_acc, term_sum);
    }
    let value = tape.mul(eff.g_v, value_acc);
    let scaled_policy = tape.mul(eff.g_p, policy_acc);
    let policy = tape.neg(scaled_policy);

    let ent_rows = (n - 1) * m;
    let entropy = match &head.policy {
        PolicyNodes::Discrete { log_probs } => {
            let block = tape.slice_rows(*log_probs, 0, ent_rows);
            entropy_loss(tape, block, eff.g_e)
        }
        PolicyNodes::Continuous { mean, raw_std } => {
            let mean_b = tape.slice_rows(*mean, 0, ent_rows);
            let raw_b = tape.slice_rows(*raw_std, 0, ent_rows);
            let (log_std, std) = bounds.on_tape(tape, raw_b);
            let kl = gaussian_kl_to_standard_on_tape(tape, mean_b, log_std, std);
            tape.mul(eff.g_e, kl)
        }
    };

    let vp = tape.add(value, policy);
    let total = tape.add(vp, entropy);
    LossParts {
        total,
        value,
        policy,
        entropy,
        mean_is,
    }
}

/// KL between the post-update and pre-update policies over the n action-step
/// rows. The old policy's nodes are stop-gradiented here.
pub fn policy_change_kl(
    tape: &mut Tape,
    policy_new: &PolicyNodes,
    policy_old: &PolicyNodes,
    batch: &Batch,
    g_kl: NodeId,
    bounds: &SigmaBounds,
) -> NodeId {
    let rows = batch.n * batch.m;
    match (policy_new, policy_old) {
        (PolicyNodes::Discrete { log_probs: new }, PolicyNodes::Discrete { log_probs: old }) => {
            let new_b = tape.slice_rows(*new, 0, rows);
            let old_b = tape.slice_rows(*old, 0, rows);
            let old_c = tape.stop_grad(old_b);
            kl_regularizer_discrete(tape, new_b, old_c, g_kl)
        }
        (
            PolicyNodes::Continuous {
                mean: mean_new,
                raw_std: raw_new,
            },
            PolicyNodes::Continuous {
                mean: mean_old,
                raw_std: raw_old,
            },
        ) => {
            let mn = tape.slice_rows(*mean_new, 0, rows);
            let rn = tape.slice_rows(*raw_new, 0, rows);
            let (ln_new, s_new) = bounds.on_tape(tape, rn);
            let mo = tape.slice_rows(*mean_old, 0, rows);
            let ro = tape.slice_rows(*raw_old, 0, rows);
            let (ln_old, s_old) = bounds.on_tape(tape, ro);
            let mo_c = tape.stop_grad(mo);
            let ln_old_c = tape.stop_grad(ln_old);
            let s_old_c = tape.stop_grad(s_old);
            kl_regularizer_gaussian(tape, mn, ln_new, s_new, mo_c, ln_old_c, s_old_c, g_kl)
        }
        _ => panic!("policy kinds must match"),
    }
}
