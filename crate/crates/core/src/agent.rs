//! The self-tuning actor-critic agent: a shared torso with one or more
//! policy/value head pairs, per-head metaparameters, and the two-level step
//! (one RMSProp update of the network, one Adam update of the
//! metaparameters through it).
//!
//! Head 0 is the acting head; auxiliary heads only shape the shared
//! representation through their inner losses. The outer loss reads head 0
//! alone, with fixed hyperparameters and plain V-trace targets, plus a KL
//! term anchoring the post-update policy to the pre-update one.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::diffcore::{
    adam_step, apply_update_on_tape, param_leaves, rmsprop_step, AdamState,
    GradSet, LrSchedule, NodeId, ParamNodes, ParamSet, RmsPropState, Tape, UpdateRule,
};
use crate::error::{AgentError, DiffError};
use crate::losses::{
    actor_critic_loss, meta_transform_on_tape, meta_transform_pre_scale, outer_hypers_on_tape,
    policy_change_kl, Batch, EffectiveValues, HeadNodes, HyperParams, LossMode, MetaLayout,
    MetaMask, MetaParams, PolicyNodes, SigmaBounds, SquashedGaussianParams,
};
use crate::vtrace::ActionRecord;

/// What the policy heads emit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous(d) => d,
        }
    }
}

/// Network dimensions: MLP torso plus two-layer heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub obs_dim: usize,
    pub torso: Vec<usize>,
    pub head_hidden: usize,
    pub heads: usize,
    pub action_space: ActionSpace,
}

impl ArchConfig {
    /// The feature-observation default: (256, 256) torso, 256 head hiddens.
    pub fn feature_default(obs_dim: usize, action_space: ActionSpace, heads: usize) -> Self {
        ArchConfig {
            obs_dim,
            torso: vec![256, 256],
            head_hidden: 256,
            heads,
            action_space,
        }
    }
}

/// Full agent configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub arch: ArchConfig,
    pub hyper: HyperParams,
    pub mask: MetaMask,
    pub single_alpha: bool,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub lr: LrSchedule,
    /// Differentiate the meta objective through the refreshed RMSProp
    /// statistics instead of holding them constant.
    pub grad_through_stats: bool,
    pub bounds: SigmaBounds,
    pub seed: u64,
}

impl AgentConfig {
    pub fn new(arch: ArchConfig, seed: u64) -> Self {
        AgentConfig {
            arch,
            hyper: HyperParams::default(),
            mask: MetaMask::all(),
            single_alpha: true,
            rms_decay: 0.99,
            rms_eps: 0.1,
            lr: LrSchedule::constant(6e-4),
            grad_through_stats: false,
            bounds: SigmaBounds::default(),
            seed,
        }
    }

    pub fn layout(&self) -> MetaLayout {
        MetaLayout {
            heads: self.arch.heads,
            single_alpha: self.single_alpha,
        }
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Torso-plus-heads network parameters.
#[derive(Debug, Clone)]
pub struct AgentNetwork {
    pub arch: ArchConfig,
    pub params: ParamSet,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orthogonal matrix scaled by `gain`, via QR of a Gaussian draw with the
/// usual sign fix for determinism.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = nalgebra::DMatrix::from_fn(big, small, |_, _| standard_normal(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            for i in 0..big {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[(i, j)] = gain * v;
        }
    }
    out
}

fn insert_affine(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut ChaCha8Rng,
) {
    let w = if zero {
        Array2::zeros((fan_in, fan_out))
    } else {
        orthogonal(fan_in, fan_out, (2.0f64).sqrt(), rng)
    };
    params.insert(format!("{name}/w"), w.into_dyn());
    params.insert(format!("{name}/b"), Array1::<f64>::zeros(fan_out).into_dyn());
}

impl AgentNetwork {
    /// Random torso and head hidden layers (orthogonal, relu gain), zero
    /// output layers: the initial policy is uniform and all values are zero.
    pub fn init(arch: ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let mut width = arch.obs_dim;
        for (i, &h) in arch.torso.iter().enumerate() {
            insert_affine(&mut params, &format!("torso/{i}"), width, h, false, rng);
            width = h;
        }
        let act_dim = arch.action_space.dim();
        for head in 0..arch.heads {
            insert_affine(
                &mut params,
                &format!("head{head}/policy/0"),
                width,
                arch.head_hidden,
                false,
                rng,
            );
            insert_affine(
                &mut params,
                &format!("head{head}/policy/out"),
                arch.head_hidden,
                act_dim,
                true,
                rng,
            );
            if matches!(arch.action_space, ActionSpace::Continuous(_)) {
                insert_affine(
                    &mut params,
                    &format!("head{head}/policy/std"),
                    arch.head_hidden,
                    act_dim,
                    true,
                    rng,
                );
            }
            insert_affine(
                &mut params,
                &format!("head{head}/value/0"),
                width,
                arch.head_hidden,
                false,
                rng,
            );
            insert_affine(
                &mut params,
                &format!("head{head}/value/out"),
                arch.head_hidden,
                1,
                true,
                rng,
            );
        }
        AgentNetwork { arch, params }
    }

    fn affine(
        tape: &mut Tape,
        nodes: &ParamNodes,
        name: &str,
        input: NodeId,
        rows: usize,
    ) -> NodeId {
        let w = nodes.id(&format!("{name}/w"));
        let b = nodes.id(&format!("{name}/b"));
        let z = tape.matmul(input, w);
        let bb = tape.broadcast_rows(b, rows);
        tape.add(z, bb)
    }

    /// Forward pass over a row-batch of observations: every head reads the
    /// same torso output.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        obs: NodeId,
    ) -> Vec<HeadNodes> {
        let rows = tape.shape(obs)[0];
        let mut h = obs;
        for i in 0..self.arch.torso.len() {
            let z = Self::affine(tape, nodes, &format!("torso/{i}"), h, rows);
            h = tape.relu(z);
        }
        let mut heads = Vec::with_capacity(self.arch.heads);
        for head in 0..self.arch.heads {
            let ph = Self::affine(tape, nodes, &format!("head{head}/policy/0"), h, rows);
            let ph = tape.relu(ph);
            let out = Self::affine(tape, nodes, &format!("head{head}/policy/out"), ph, rows);
            let policy = match self.arch.action_space {
                ActionSpace::Discrete(_) => PolicyNodes::Discrete {
                    log_probs: tape.log_softmax(out),
                },
                ActionSpace::Continuous(_) => {
                    let mean = tape.tanh(out);
                    let raw_std =
                        Self::affine(tape, nodes, &format!("head{head}/policy/std"), ph, rows);
                    PolicyNodes::Continuous { mean, raw_std }
                }
            };
            let vh = Self::affine(tape, nodes, &format!("head{head}/value/0"), h, rows);
            let vh = tape.relu(vh);
            let v2 = Self::affine(tape, nodes, &format!("head{head}/value/out"), vh, rows);
            let values = tape.reshape(v2, &[rows]);
            heads.push(HeadNodes { policy, values });
        }
        heads
    }
}

// ---------------------------------------------------------------------------
// Acting snapshot
// ---------------------------------------------------------------------------

/// Policy head output for a single observation.
#[derive(Debug, Clone)]
pub enum PolicyOutput {
    Discrete { log_probs: Vec<f64> },
    Continuous { mean: Vec<f64>, raw_std: Vec<f64> },
}

/// Immutable copy of the acting-relevant parameters (torso plus head 0's
/// policy) tagged with the version that produced it. The forward pass is
/// written as explicit per-row loops so re-evaluating a recorded action's
/// probability reproduces the sampled-time number exactly, independent of
/// batch size.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub version: u64,
    arch: ArchConfig,
    bounds: SigmaBounds,
    params: ParamSet,
}

fn affine_row(params: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    let w = params.get(&format!("{name}/w")).expect("weight");
    let b = params.get(&format!("{name}/b")).expect("bias");
    let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let fan_out = w.ncols();
    let mut out = vec![0.0; fan_out];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = b[IxDyn(&[j])];
        for (k, &xv) in x.iter().enumerate() {
            acc += xv * w[(k, j)];
        }
        *o = acc;
    }
    out
}

fn relu_vec(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    v
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let logz = z.ln() + max;
    logits.iter().map(|&x| x - logz).collect()
}

impl PolicySnapshot {
    /// Policy outputs for one observation row.
    pub fn policy_output(&self, obs: ArrayView1<f64>) -> PolicyOutput {
        let mut h: Vec<f64> = obs.iter().copied().collect();
        for i in 0..self.arch.torso.len() {
            h = relu_vec(affine_row(&self.params, &format!("torso/{i}"), &h));
        }
        let ph = relu_vec(affine_row(&self.params, "head0/policy/0", &h));
        let out = affine_row(&self.params, "head0/policy/out", &ph);
        match self.arch.action_space {
            ActionSpace::Discrete(_) => PolicyOutput::Discrete {
                log_probs: log_softmax_row(&out),
            },
            ActionSpace::Continuous(_) => {
                let mean = out.iter().map(|&x| x.tanh()).collect();
                let raw_std = affine_row(&self.params, "head0/policy/std", &ph);
                PolicyOutput::Continuous { mean, raw_std }
            }
        }
    }

    fn score_continuous(&self, mean: &[f64], raw_std: &[f64], pre: &[f64]) -> f64 {
        let params = SquashedGaussianParams {
            mean: mean.to_vec(),
            raw_std: raw_std.to_vec(),
            bounds: self.bounds,
        };
        crate::losses::squashed_gaussian_logprob(&params, pre)
            .expect("sampled pre-squash value cannot saturate")
    }

    /// Samples one action per observation row, returning the action record
    /// and its behavior log-probability.
    pub fn act(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Vec<(ActionRecord, f64)> {
        let mut out = Vec::with_capacity(obs.nrows());
        for row in obs.rows() {
            match self.policy_output(row) {
                PolicyOutput::Discrete { log_probs } => {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut action = log_probs.len() - 1;
                    for (a, lp) in log_probs.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            action = a;
                            break;
                        }
                    }
                    out.push((ActionRecord::Discrete(action), log_probs[action]));
                }
                PolicyOutput::Continuous { mean, raw_std } => {
                    let dims = mean.len();
                    let mut pre = Vec::with_capacity(dims);
                    for d in 0..dims {
                        let sigma = self.bounds.std(raw_std[d]);
                        // Keep tanh(u) strictly inside (-1, 1): beyond ~18 the
                        // squashed action would round to exactly +/-1 and its
                        // log density would be undefined.
                        let u = (mean[d] + sigma * standard_normal(rng)).clamp(-17.0, 17.0);
                        pre.push(u);
                    }
                    let lp = self.score_continuous(&mean, &raw_std, &pre);
                    let action = pre.iter().map(|&u| u.tanh()).collect();
                    out.push((
                        ActionRecord::Continuous {
                            action,
                            pre_squash: pre,
                        },
                        lp,
                    ));
                }
            }
        }
        out
    }

    /// Log-probability this snapshot assigns to a recorded action: exactly
    /// the value `act` produced when it sampled it.
    pub fn log_prob(&self, obs: ArrayView1<f64>, action: &ActionRecord) -> f64 {
        match (self.policy_output(obs), action) {
            (PolicyOutput::Discrete { log_probs }, ActionRecord::Discrete(a)) => log_probs[*a],
            (
                PolicyOutput::Continuous { mean, raw_std },
                ActionRecord::Continuous { pre_squash, .. },
            ) => self.score_continuous(&mean, &raw_std, pre_squash),
            _ => panic!("action kind does not match the policy"),
        }
    }
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

/// Transformed per-head metaparameters and loss values from one step.
#[derive(Debug, Clone)]
pub struct HeadDiagnostics {
    /// Post-sigmoid values; loss coefficients reported before outer scaling
    /// so every metaparameter shares the (0,1) range.
    pub transformed: EffectiveValues,
    pub inner_total: f64,
    pub value: f64,
    pub policy: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub heads: Vec<HeadDiagnostics>,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub kl: f64,
    pub mean_is: f64,
    pub grad_max_abs: f64,
    pub metagrad_max_abs: f64,
    pub version: u64,
}

/// Everything the meta step needs from the inner step: the tape with the
/// parameterized update still on it, plus the realized new state.
pub struct InnerOutcome {
    tape: Tape,
    eta_ids: Vec<NodeId>,
    theta_updated: ParamNodes,
    obs_node: NodeId,
    heads_old: Vec<HeadNodes>,
    pub new_params: ParamSet,
    pub new_opt: RmsPropState,
    pub grads: GradSet,
    pub head_diags: Vec<HeadDiagnostics>,
    pub inner_loss: f64,
    pub mean_is: f64,
}

pub struct Agent {
    pub config: AgentConfig,
    pub net: AgentNetwork,
    pub meta: MetaParams,
    pub opt: RmsPropState,
    pub meta_opt: AdamState,
    pub version: u64,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: AgentConfig, rng: &mut ChaCha8Rng) -> Self {
        let net = AgentNetwork::init(config.arch.clone(), rng);
        let layout = config.layout();
        let meta = MetaParams::init(layout, config.hyper.meta_init);
        let opt = RmsPropState::new(&net.params, config.rms_decay, config.rms_eps, config.lr);
        let meta_opt = AdamState::new(
            layout.dim(),
            config.hyper.meta_lr,
            config.hyper.meta_b1,
            config.hyper.meta_b2,
            config.hyper.meta_eps,
        );
        Agent {
            config,
            net,
            meta,
            opt,
            meta_opt,
            version: 0,
        }
    }

    /// Immutable acting snapshot of the current parameters.
    pub fn snapshot(&self) -> PolicySnapshot {
        let mut params = ParamSet::new();
        for (name, value) in self.net.params.iter() {
            if name.starts_with("torso/") || name.starts_with("head0/policy/") {
                params.insert(name.to_string(), value.clone());
            }
        }
        PolicySnapshot {
            version: self.version,
            arch: self.net.arch.clone(),
            bounds: self.config.bounds,
            params,
        }
    }

    fn head_of(name: &str) -> Option<usize> {
        name.strip_prefix("head")
            .and_then(|rest| rest.split('/').next())
            .and_then(|digits| digits.parse().ok())
    }

    /// One inner update: averages the per-head inner-loss gradients over all
    /// heads, applies one RMSProp step, and keeps the parameterized update on
    /// the tape for the meta step.
    pub fn inner_update(&self, batch: &Batch) -> Result<InnerOutcome, AgentError> {
        let mut tape = Tape::new();
        let theta = param_leaves(&mut tape, &self.net.params);
        let eta_ids: Vec<NodeId> = self.meta.raw.iter().map(|&v| tape.scalar_leaf(v)).collect();
        let obs_node = tape.constant(batch.observations.clone().into_dyn());
        let heads = self.net.forward_on_tape(&mut tape, &theta, obs_node);

        let layout = self.config.layout();
        let per = layout.coords_per_head();
        let mut total = tape.scalar(0.0);
        let mut head_diags = Vec::with_capacity(heads.len());
        let mut mean_is = 0.0;
        for (h, head) in heads.iter().enumerate() {
            let eff = meta_transform_on_tape(
                &mut tape,
                &eta_ids[h * per..(h + 1) * per],
                &layout,
                &self.config.mask,
                &self.config.hyper,
            );
            let parts = actor_critic_loss(
                &mut tape,
                head,
                batch,
                &eff,
                LossMode::Inner,
                &self.config.bounds,
            );
            if !tape.scalar_value(parts.total).is_finite() {
                return Err(AgentError::HeadNumeric {
                    head: h,
                    source: DiffError::NumericFailure { op: "inner_loss" },
                });
            }
            mean_is += parts.mean_is / heads.len() as f64;
            head_diags.push(HeadDiagnostics {
                transformed: meta_transform_pre_scale(self.meta.head_slice(h), &layout),
                inner_total: tape.scalar_value(parts.total),
                value: tape.scalar_value(parts.value),
                policy: tape.scalar_value(parts.policy),
                entropy: tape.scalar_value(parts.entropy),
            });
            total = tape.add(total, parts.total);
        }
        let inv = tape.scalar(1.0 / heads.len() as f64);
        let avg = tape.mul(total, inv);
        tape.check()?;

        let theta_ids = theta.ids();
        let grad_ids = tape.backward(avg, &theta_ids)?;
        let mut grad_values = ParamSet::new();
        for ((name, _), gid) in theta.iter().zip(&grad_ids) {
            grad_values.insert(name.to_string(), tape.value(*gid).clone());
        }
        let grads = GradSet::from_params(grad_values);
        for (name, g) in grads.iter() {
            if !g.iter().all(|v| v.is_finite()) {
                let head = Self::head_of(name).unwrap_or(0);
                return Err(AgentError::HeadNumeric {
                    head,
                    source: DiffError::NumericFailure {
                        op: "inner_gradient",
                    },
                });
            }
        }

        let rule = UpdateRule::RmsProp {
            state: &self.opt,
            through_stats: self.config.grad_through_stats,
        };
        let theta_updated = apply_update_on_tape(&mut tape, &theta, &grad_ids, &rule);
        let (new_params, new_opt) = rmsprop_step(&self.net.params, &grads, &self.opt)?;
        debug_assert!(theta_updated
            .iter()
            .all(|(name, id)| tape.value(id) == new_params.get(name).unwrap()));

        let inner_loss = tape.scalar_value(avg);
        Ok(InnerOutcome {
            tape,
            eta_ids,
            theta_updated,
            obs_node,
            heads_old: heads,
            new_params,
            new_opt,
            grads,
            head_diags,
            inner_loss,
            mean_is,
        })
    }

    /// Builds the meta objective (outer loss of head 0 at the updated
    /// parameters, plus the policy-change KL) on the outcome's tape and
    /// returns its node together with the loss and KL values.
    fn build_meta_objective(&self, outcome: &mut InnerOutcome, batch: &Batch) -> (NodeId, f64, f64) {
        let tape = &mut outcome.tape;
        let heads_new = self
            .net
            .forward_on_tape(tape, &outcome.theta_updated, outcome.obs_node);
        let eff_outer = outer_hypers_on_tape(tape, &self.config.hyper);
        let parts = actor_critic_loss(
            tape,
            &heads_new[0],
            batch,
            &eff_outer,
            LossMode::Outer,
            &self.config.bounds,
        );
        let gkl = tape.scalar(self.config.hyper.g_kl);
        let kl = policy_change_kl(
            tape,
            &heads_new[0].policy,
            &outcome.heads_old[0].policy,
            batch,
            gkl,
            &self.config.bounds,
        );
        let total = tape.add(parts.total, kl);
        let outer_value = tape.scalar_value(parts.total);
        let kl_value = tape.scalar_value(kl);
        (total, outer_value, kl_value)
    }

    /// The meta step: metagradient of the outer objective through the
    /// parameterized update, then one Adam step on the raw metaparameters.
    pub fn meta_update(
        &self,
        mut outcome: InnerOutcome,
        batch: &Batch,
    ) -> Result<MetaStep, AgentError> {
        let (total, outer_loss, kl) = self.build_meta_objective(&mut outcome, batch);
        outcome.tape.check()?;
        let metagrad_ids = outcome.tape.backward(total, &outcome.eta_ids)?;
        let metagrad: Vec<f64> = metagrad_ids
            .iter()
            .map(|&id| outcome.tape.scalar_value(id))
            .collect();
        if !metagrad.iter().all(|v| v.is_finite()) {
            return Err(AgentError::Diff(DiffError::NumericFailure {
                op: "metagradient",
            }));
        }
        let (new_raw, new_adam) = adam_step(&self.meta.raw, &metagrad, &self.meta_opt)?;
        Ok(MetaStep {
            meta: MetaParams {
                layout: self.meta.layout,
                raw: new_raw,
            },
            meta_opt: new_adam,
            metagrad,
            outer_loss,
            kl,
            outcome,
        })
    }

    /// Metagradient of the meta objective at the current state; no state is
    /// changed.
    pub fn metagradient(&self, batch: &Batch) -> Result<Vec<f64>, AgentError> {
        let mut outcome = self.inner_update(batch)?;
        let (total, _, _) = self.build_meta_objective(&mut outcome, batch);
        outcome.tape.check()?;
        let ids = outcome.tape.backward(total, &outcome.eta_ids)?;
        Ok(ids
            .iter()
            .map(|&id| outcome.tape.scalar_value(id))
            .collect())
    }

    /// Builds the meta objective once and returns a probe that can
    /// re-evaluate it at perturbed raw metaparameters with every
    /// stop-gradient held at its recorded value. Finite differences of the
    /// probe are the independent check of [`Agent::metagradient`], because
    /// the probe evaluates exactly the function whose derivative the
    /// reverse sweep computes.
    pub fn meta_probe(&self, batch: &Batch) -> Result<MetaProbe, AgentError> {
        let mut outcome = self.inner_update(batch)?;
        let (total, _, _) = self.build_meta_objective(&mut outcome, batch);
        outcome.tape.check()?;
        Ok(MetaProbe {
            tape: outcome.tape,
            eta_ids: outcome.eta_ids,
            objective: total,
        })
    }

    /// One full step: inner update, meta update, state replacement.
    pub fn agent_step(&mut self, batch: &Batch) -> Result<StepDiagnostics, AgentError> {
        let outcome = self.inner_update(batch)?;
        let grad_max = outcome.grads.max_abs();
        let step = self.meta_update(outcome, batch)?;
        if !step.outcome.new_params.all_finite() {
            return Err(AgentError::Diff(DiffError::NumericFailure {
                op: "parameter_update",
            }));
        }
        let metagrad_max = step.metagrad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.net.params = step.outcome.new_params;
        self.opt = step.outcome.new_opt;
        self.meta = step.meta;
        self.meta_opt = step.meta_opt;
        self.version += 1;
        Ok(StepDiagnostics {
            heads: step.outcome.head_diags,
            inner_loss: step.outcome.inner_loss,
            outer_loss: step.outer_loss,
            kl: step.kl,
            mean_is: step.outcome.mean_is,
            grad_max_abs: grad_max,
            metagrad_max_abs: metagrad_max,
            version: self.version,
        })
    }
}

/// Result of [`Agent::meta_update`].
pub struct MetaStep {
    pub meta: MetaParams,
    pub meta_opt: AdamState,
    pub metagrad: Vec<f64>,
    pub outer_loss: f64,
    pub kl: f64,
    pub outcome: InnerOutcome,
}

/// Frozen meta objective for finite-difference checks; see
/// [`Agent::meta_probe`].
pub struct MetaProbe {
    tape: Tape,
    eta_ids: Vec<NodeId>,
    objective: NodeId,
}

impl MetaProbe {
    /// Meta objective value at the given raw metaparameter vector.
    pub fn objective_at(&self, raw: &[f64]) -> Result<f64, AgentError> {
        assert_eq!(raw.len(), self.eta_ids.len());
        let overrides: Vec<(NodeId, ArrayD<f64>)> = self
            .eta_ids
            .iter()
            .zip(raw)
            .map(|(&id, &v)| (id, ArrayD::from_elem(IxDyn(&[]), v)))
            .collect();
        Ok(self
            .tape
            .eval_with_overrides(self.objective, &overrides, true)?)
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"STLBCKP1";

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn push_param_set(buf: &mut Vec<u8>, params: &ParamSet) {
    push_u64(buf, params.len() as u64);
    for (name, value) in params.iter() {
        push_str(buf, name);
        push_u64(buf, value.ndim() as u64);
        for &d in value.shape() {
            push_u64(buf, d as u64);
        }
        for &x in value.iter() {
            push_f64(buf, x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AgentError> {
        if self.pos + n > self.buf.len() {
            return Err(AgentError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, AgentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, AgentError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, AgentError> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| AgentError::Checkpoint("bad utf8 in checkpoint".into()))
    }

    fn param_set(&mut self) -> Result<ParamSet, AgentError> {
        let count = self.u64()? as usize;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(self.f64()?);
            }
            out.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), data)
                    .map_err(|e| AgentError::Checkpoint(e.to_string()))?,
            );
        }
        Ok(out)
    }
}

/// Hash of the canonical config text, stored in checkpoints so a checkpoint
/// cannot be loaded into a different configuration.
pub fn config_hash(canonical_config: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(canonical_config.as_bytes());
    hasher.finalize().into()
}

impl Agent {
    /// Serializes every parameter set, the metaparameters and both optimizer
    /// states. Round-trips are bit-exact.
    pub fn save_checkpoint(&self, hash: &[u8; 32]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(hash);
        push_param_set(&mut buf, &self.net.params);
        push_u64(&mut buf, self.meta.layout.heads as u64);
        push_u64(&mut buf, self.meta.layout.single_alpha as u64);
        push_u64(&mut buf, self.meta.raw.len() as u64);
        for &v in &self.meta.raw {
            push_f64(&mut buf, v);
        }
        push_f64(&mut buf, self.opt.decay);
        push_f64(&mut buf, self.opt.eps);
        push_f64(&mut buf, self.opt.schedule.start);
        push_f64(&mut buf, self.opt.schedule.end);
        push_u64(&mut buf, self.opt.schedule.total_steps);
        push_u64(&mut buf, self.opt.step);
        push_param_set(&mut buf, &self.opt.sq_avg.clone().into_params());
        push_u64(&mut buf, self.meta_opt.m.len() as u64);
        for &v in &self.meta_opt.m {
            push_f64(&mut buf, v);
        }
        for &v in &self.meta_opt.v {
            push_f64(&mut buf, v);
        }
        push_u64(&mut buf, self.meta_opt.step);
        push_f64(&mut buf, self.meta_opt.b1);
        push_f64(&mut buf, self.meta_opt.b2);
        push_f64(&mut buf, self.meta_opt.eps);
        push_f64(&mut buf, self.meta_opt.lr);
        push_u64(&mut buf, self.version);
        buf
    }

    /// Restores an agent saved by [`Agent::save_checkpoint`]. The stored
    /// config hash must match.
    pub fn load_checkpoint(
        config: AgentConfig,
        hash: &[u8; 32],
        bytes: &[u8],
    ) -> Result<Agent, AgentError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(AgentError::Checkpoint("bad magic".into()));
        }
        if r.take(32)? != hash {
            return Err(AgentError::Checkpoint(
                "config hash mismatch: checkpoint belongs to a different configuration".into(),
            ));
        }
        let params = r.param_set()?;
        let heads = r.u64()? as usize;
        let single_alpha = r.u64()? != 0;
        let layout = MetaLayout {
            heads,
            single_alpha,
        };
        let raw_len = r.u64()? as usize;
        let mut raw = Vec::with_capacity(raw_len);
        for _ in 0..raw_len {
            raw.push(r.f64()?);
        }
        let decay = r.f64()?;
        let eps = r.f64()?;
        let schedule = LrSchedule {
            start: r.f64()?,
            end: r.f64()?,
            total_steps: r.u64()?,
        };
        let opt_step = r.u64()?;
        let sq_avg = r.param_set()?;
        let meta_len = r.u64()? as usize;
        let mut m = Vec::with_capacity(meta_len);
        for _ in 0..meta_len {
            m.push(r.f64()?);
        }
        let mut v = Vec::with_capacity(meta_len);
        for _ in 0..meta_len {
            v.push(r.f64()?);
        }
        let meta_step = r.u64()?;
        let (b1, b2, meps, mlr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let version = r.u64()?;

        if layout != config.layout() {
            return Err(AgentError::Checkpoint(
                "metaparameter layout mismatch".into(),
            ));
        }
        let net = AgentNetwork {
            arch: config.arch.clone(),
            params,
        };
        let opt = RmsPropState {
            sq_avg: GradSet::from_params(sq_avg),
            decay,
            eps,
            schedule,
            step: opt_step,
        };
        opt.sq_avg
            .congruent(&net.params)
            .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        Ok(Agent {
            config,
            net,
            meta: MetaParams { layout, raw },
            opt,
            meta_opt: AdamState {
                m,
                v,
                step: meta_step,
                b1,
                b2,
                eps: meps,
                lr: mlr,
            },
            version,
        })
    }
}
