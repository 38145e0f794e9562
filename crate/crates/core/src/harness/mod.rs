//! Simulated actor-learner pipeline: actor threads step batched
//! environments under possibly stale policy snapshots and push fixed-length
//! trajectories into a bounded queue; a single learner consumes batches,
//! updates the agent, and publishes fresh snapshots. Deterministic mode
//! runs one actor interleaved with the learner on one thread and is
//! bit-reproducible.

#![allow(clippy::needless_range_loop)]

pub mod envs;

use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, PolicySnapshot, StepDiagnostics};
use crate::error::HarnessError;
use crate::losses::Batch;
use crate::vtrace::{ActionRecord, Trajectory};
use envs::{BatchedEnv, EnvSpec};

// ---------------------------------------------------------------------------
// Bounded trajectory queue
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueStats {
    pub produced: u64,
    pub consumed: u64,
    pub in_queue: usize,
    /// Largest number of consumptions any item waited through between its
    /// push and its pop. Bounded FIFO order makes this at most capacity-1.
    pub max_wait_items: u64,
}

struct QueueInner {
    items: VecDeque<(Trajectory, u64)>,
    produced: u64,
    consumed: u64,
    max_wait: u64,
    closed: bool,
}

/// Bounded multi-producer single-consumer FIFO of trajectories. Producers
/// block while the queue is full; the consumer blocks while it is empty.
/// Closing wakes everyone; remaining items stay countable so no trajectory
/// is lost silently.
pub struct TrajectoryQueue {
    inner: Mutex<QueueInner>,
    not_full: Condvar,
    not_empty: Condvar,
    capacity: usize,
}

impl TrajectoryQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        TrajectoryQueue {
            inner: Mutex::new(QueueInner {
                items: VecDeque::with_capacity(capacity),
                produced: 0,
                consumed: 0,
                max_wait: 0,
                closed: false,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks while full. Fails once the queue is closed.
    pub fn push(&self, trajectory: Trajectory) -> Result<(), HarnessError> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            if inner.closed {
                return Err(HarnessError::QueueClosed);
            }
            if inner.items.len() < self.capacity {
                let stamp = inner.consumed;
                inner.items.push_back((trajectory, stamp));
                inner.produced += 1;
                self.not_empty.notify_one();
                return Ok(());
            }
            inner = self.not_full.wait(inner).unwrap();
        }
    }

    /// Blocks while empty. Fails once the queue is closed and drained.
    pub fn pop(&self) -> Result<Trajectory, HarnessError> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            if let Some((t, stamp)) = inner.items.pop_front() {
                let wait = inner.consumed - stamp;
                inner.max_wait = inner.max_wait.max(wait);
                inner.consumed += 1;
                self.not_full.notify_one();
                return Ok(t);
            }
            if inner.closed {
                return Err(HarnessError::QueueClosed);
            }
            inner = self.not_empty.wait(inner).unwrap();
        }
    }

    pub fn close(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.closed = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }

    pub fn stats(&self) -> QueueStats {
        let inner = self.inner.lock().unwrap();
        QueueStats {
            produced: inner.produced,
            consumed: inner.consumed,
            in_queue: inner.items.len(),
            max_wait_items: inner.max_wait,
        }
    }
}

// ---------------------------------------------------------------------------
// Snapshot publication
// ---------------------------------------------------------------------------

/// Single-writer multi-reader slot holding the latest policy snapshot.
pub struct SnapshotSlot {
    inner: RwLock<Arc<PolicySnapshot>>,
}

impl SnapshotSlot {
    pub fn new(snapshot: PolicySnapshot) -> Self {
        SnapshotSlot {
            inner: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn publish(&self, snapshot: PolicySnapshot) {
        let next = Arc::new(snapshot);
        let mut guard = self.inner.write().unwrap();
        debug_assert!(next.version >= guard.version, "versions must not regress");
        *guard = next;
    }

    pub fn get(&self) -> Arc<PolicySnapshot> {
        self.inner.read().unwrap().clone()
    }
}

// ---------------------------------------------------------------------------
// Actor
// ---------------------------------------------------------------------------

/// When the actor pulls a fresh snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshPolicy {
    EveryTrajectory,
    EveryStep,
    Never,
}

/// One actor unroll: a trajectory per environment slot plus the episode
/// returns that completed during it.
pub struct UnrollOutput {
    pub trajectories: Vec<Trajectory>,
    pub completed_episodes: Vec<f64>,
}

/// Steps a batched environment under the latest snapshot and cuts
/// fixed-length trajectories. Each recorded behavior probability is the
/// probability the sampling snapshot actually assigned to the action.
pub struct Actor {
    env: Box<dyn BatchedEnv>,
    rng: ChaCha8Rng,
    obs: Array2<f64>,
    traj_len: usize,
    refresh: RefreshPolicy,
    current: Option<Arc<PolicySnapshot>>,
    episode_returns: Vec<f64>,
    pub faults: u64,
    env_seed_base: u64,
    resets: u64,
}

impl Actor {
    pub fn new(
        mut env: Box<dyn BatchedEnv>,
        seed: u64,
        traj_len: usize,
        refresh: RefreshPolicy,
    ) -> Self {
        let slots = env.num_slots();
        let seeds: Vec<u64> = (0..slots as u64).map(|k| seed.wrapping_add(k)).collect();
        let obs = env.reset(&seeds);
        Actor {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            obs,
            traj_len,
            refresh,
            current: None,
            episode_returns: vec![0.0; slots],
            faults: 0,
            env_seed_base: seed,
            resets: 0,
        }
    }

    fn snapshot(&mut self, provider: &dyn Fn() -> Arc<PolicySnapshot>) -> Arc<PolicySnapshot> {
        match self.refresh {
            RefreshPolicy::EveryStep | RefreshPolicy::EveryTrajectory => {
                let snap = provider();
                self.current = Some(snap.clone());
                snap
            }
            RefreshPolicy::Never => match &self.current {
                Some(s) => s.clone(),
                None => {
                    let snap = provider();
                    self.current = Some(snap.clone());
                    snap
                }
            },
        }
    }

    /// Produces one fixed-length trajectory per slot. On an environment
    /// fault the partial unroll is discarded, the slots reset, and the
    /// fault counted.
    pub fn unroll(
        &mut self,
        provider: &dyn Fn() -> Arc<PolicySnapshot>,
    ) -> Result<UnrollOutput, HarnessError> {
        match self.try_unroll(provider) {
            Ok(out) => Ok(out),
            Err(HarnessError::EnvFault(msg)) => {
                self.faults += 1;
                self.resets += 1;
                let slots = self.env.num_slots();
                let base = self
                    .env_seed_base
                    .wrapping_add(self.resets.wrapping_mul(0x9e37_79b9));
                let seeds: Vec<u64> = (0..slots as u64).map(|k| base.wrapping_add(k)).collect();
                self.obs = self.env.reset(&seeds);
                self.episode_returns = vec![0.0; slots];
                Err(HarnessError::EnvFault(msg))
            }
            Err(e) => Err(e),
        }
    }

    fn try_unroll(
        &mut self,
        provider: &dyn Fn() -> Arc<PolicySnapshot>,
    ) -> Result<UnrollOutput, HarnessError> {
        let slots = self.env.num_slots();
        let n = self.traj_len;
        let obs_dim = self.obs.ncols();
        let mut snap = self.snapshot(provider);
        let version = snap.version;

        let mut observations: Vec<Array2<f64>> = vec![Array2::zeros((n + 1, obs_dim)); slots];
        let mut actions: Vec<Vec<ActionRecord>> = vec![Vec::with_capacity(n); slots];
        let mut log_probs: Vec<Vec<f64>> = vec![Vec::with_capacity(n); slots];
        let mut rewards: Vec<Vec<f64>> = vec![Vec::with_capacity(n); slots];
        let mut dones: Vec<Vec<bool>> = vec![Vec::with_capacity(n); slots];
        let mut completed = Vec::new();

        for s in 0..n {
            if s > 0 && self.refresh == RefreshPolicy::EveryStep {
                snap = self.snapshot(provider);
            }
            for i in 0..slots {
                observations[i].row_mut(s).assign(&self.obs.row(i));
            }
            let sampled = snap.act(self.obs.view(), &mut self.rng);
            let step_actions: Vec<ActionRecord> =
                sampled.iter().map(|(a, _)| a.clone()).collect();
            let out = self.env.step(&step_actions)?;
            for i in 0..slots {
                let (a, lp) = &sampled[i];
                actions[i].push(a.clone());
                log_probs[i].push(*lp);
                rewards[i].push(out.rewards[i]);
                dones[i].push(out.dones[i]);
                self.episode_returns[i] += out.rewards[i];
                if out.dones[i] {
                    completed.push(self.episode_returns[i]);
                    self.episode_returns[i] = 0.0;
                }
            }
            self.obs = out.observations;
        }
        for i in 0..slots {
            observations[i].row_mut(n).assign(&self.obs.row(i));
        }

        let mut trajectories = Vec::with_capacity(slots);
        for i in 0..slots {
            trajectories.push(Trajectory::from_log_probs(
                std::mem::replace(&mut observations[i], Array2::zeros((0, 0))),
                std::mem::take(&mut actions[i]),
                std::mem::take(&mut rewards[i]),
                std::mem::take(&mut log_probs[i]),
                std::mem::take(&mut dones[i]),
                version,
            )
            .map_err(|e| HarnessError::Agent(e.into()))?);
        }
        Ok(UnrollOutput {
            trajectories,
            completed_episodes: completed,
        })
    }
}

// ---------------------------------------------------------------------------
// Training runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    /// Trajectories per learner batch (m).
    pub batch_size: usize,
    /// Steps per trajectory (n).
    pub traj_len: usize,
    /// Environment copies per actor.
    pub env_slots: usize,
    /// Actor threads; deterministic mode always uses one.
    pub actors: usize,
    /// Queue capacity in batches.
    pub queue_batches: usize,
    pub deterministic: bool,
    pub refresh: RefreshPolicy,
    pub total_env_steps: u64,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            batch_size: 32,
            traj_len: 20,
            env_slots: 32,
            actors: 1,
            queue_batches: 4,
            deterministic: true,
            refresh: RefreshPolicy::EveryTrajectory,
            total_env_steps: 100_000,
            seed: 0,
        }
    }
}

/// Per-meta-step event handed to the metrics sink.
pub struct StepEvent<'a> {
    pub diagnostics: &'a StepDiagnostics,
    pub env_steps: u64,
    pub meta_steps: u64,
    /// Mean return over the most recent completed episodes, if any finished.
    pub recent_return: Option<f64>,
    pub episodes_completed: u64,
    pub staleness_max: u64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub env_steps: u64,
    pub meta_steps: u64,
    pub episode_returns: Vec<f64>,
    pub staleness_max: u64,
    pub staleness_mean: f64,
    pub faults: u64,
    pub produced: u64,
    pub consumed: u64,
    pub leftover_in_queue: usize,
    /// Largest queue wait observed, in items (threaded mode).
    pub max_queue_wait_items: u64,
    /// Digest of the consumed trajectory stream; equal digests mean equal
    /// streams. Stable within one build of the binary.
    pub trace_digest: u64,
}

fn digest_trajectory(hasher: &mut std::collections::hash_map::DefaultHasher, t: &Trajectory) {
    t.param_version.hash(hasher);
    for a in &t.actions {
        match a {
            ActionRecord::Discrete(i) => {
                0u8.hash(hasher);
                i.hash(hasher);
            }
            ActionRecord::Continuous { action, pre_squash } => {
                1u8.hash(hasher);
                for v in action.iter().chain(pre_squash) {
                    v.to_bits().hash(hasher);
                }
            }
        }
    }
    for r in &t.rewards {
        r.to_bits().hash(hasher);
    }
    for lp in t.behavior_log_probs() {
        lp.to_bits().hash(hasher);
    }
}

/// Runs the training loop for the configured environment-step budget.
pub fn run_training(
    agent: &mut Agent,
    spec: &EnvSpec,
    cfg: &HarnessConfig,
    on_step: &mut dyn FnMut(StepEvent),
) -> Result<RunSummary, HarnessError> {
    if cfg.deterministic || cfg.actors <= 1 {
        run_single_thread(agent, spec, cfg, on_step)
    } else {
        run_threaded(agent, spec, cfg, on_step)
    }
}

fn run_single_thread(
    agent: &mut Agent,
    spec: &EnvSpec,
    cfg: &HarnessConfig,
    on_step: &mut dyn FnMut(StepEvent),
) -> Result<RunSummary, HarnessError> {
    let start = Instant::now();
    let env = spec.build(cfg.env_slots, cfg.seed.wrapping_add(1));
    let mut actor = Actor::new(env, cfg.seed.wrapping_add(1000), cfg.traj_len, cfg.refresh);
    let mut snapshot = Arc::new(agent.snapshot());
    let mut pending: VecDeque<Trajectory> = VecDeque::new();
    let mut summary = RunSummary::default();
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    let mut staleness_sum: u64 = 0;
    let mut staleness_count: u64 = 0;
    let mut episodes_total: u64 = 0;

    while summary.env_steps < cfg.total_env_steps {
        let out = {
            let snap = snapshot.clone();
            match actor.unroll(&move || snap.clone()) {
                Ok(out) => out,
                Err(HarnessError::EnvFault(_)) => continue,
                Err(e) => return Err(e),
            }
        };
        summary.env_steps += (cfg.traj_len * cfg.env_slots) as u64;
        summary.episode_returns.extend(&out.completed_episodes);
        episodes_total += out.completed_episodes.len() as u64;
        summary.produced += out.trajectories.len() as u64;
        pending.extend(out.trajectories);

        while pending.len() >= cfg.batch_size {
            let batch_trajs: Vec<Trajectory> = pending.drain(..cfg.batch_size).collect();
            let mut staleness_max = 0;
            for t in &batch_trajs {
                digest_trajectory(&mut hasher, t);
                let staleness = agent.version.saturating_sub(t.param_version);
                staleness_max = staleness_max.max(staleness);
                staleness_sum += staleness;
                staleness_count += 1;
            }
            summary.consumed += batch_trajs.len() as u64;
            let batch = Batch::from_trajectories(&batch_trajs).map_err(|e| {
                HarnessError::Agent(e.into())
            })?;
            let diag = agent.agent_step(&batch).map_err(HarnessError::Agent)?;
            snapshot = Arc::new(agent.snapshot());
            summary.meta_steps += 1;
            summary.staleness_max = summary.staleness_max.max(staleness_max);
            let recent = recent_mean(&summary.episode_returns, 32);
            on_step(StepEvent {
                diagnostics: &diag,
                env_steps: summary.env_steps,
                meta_steps: summary.meta_steps,
                recent_return: recent,
                episodes_completed: episodes_total,
                staleness_max,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
    }
    summary.faults = actor.faults;
    summary.leftover_in_queue = pending.len();
    summary.staleness_mean = if staleness_count > 0 {
        staleness_sum as f64 / staleness_count as f64
    } else {
        0.0
    };
    summary.trace_digest = hasher.finish();
    Ok(summary)
}

fn recent_mean(values: &[f64], window: usize) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let tail = &values[values.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

fn run_threaded(
    agent: &mut Agent,
    spec: &EnvSpec,
    cfg: &HarnessConfig,
    on_step: &mut dyn FnMut(StepEvent),
) -> Result<RunSummary, HarnessError> {
    let start = Instant::now();
    let queue = Arc::new(TrajectoryQueue::new(cfg.queue_batches * cfg.batch_size));
    let slot = Arc::new(SnapshotSlot::new(agent.snapshot()));
    let episodes = Arc::new(Mutex::new(Vec::<f64>::new()));
    let stop = Arc::new(AtomicBool::new(false));

    let mut handles = Vec::new();
    for k in 0..cfg.actors {
        let queue = queue.clone();
        let slot = slot.clone();
        let episodes = episodes.clone();
        let stop = stop.clone();
        let spec = spec.clone();
        let seed = cfg.seed.wrapping_add(1).wrapping_add(k as u64 * 7919);
        let (traj_len, env_slots, refresh) = (cfg.traj_len, cfg.env_slots, cfg.refresh);
        handles.push(std::thread::spawn(move || -> u64 {
            let env = spec.build(env_slots, seed);
            let mut actor = Actor::new(env, seed.wrapping_add(1000), traj_len, refresh);
            let provider = move || slot.get();
            while !stop.load(Ordering::Relaxed) {
                let out = match actor.unroll(&provider) {
                    Ok(out) => out,
                    Err(HarnessError::EnvFault(_)) => continue,
                    Err(_) => break,
                };
                episodes.lock().unwrap().extend(out.completed_episodes);
                let mut closed = false;
                for t in out.trajectories {
                    if queue.push(t).is_err() {
                        closed = true;
                        break;
                    }
                }
                if closed {
                    break;
                }
            }
            actor.faults
        }));
    }

    let mut summary = RunSummary::default();
    let mut staleness_sum: u64 = 0;
    let mut staleness_count: u64 = 0;
    let mut result: Result<(), HarnessError> = Ok(());
    while summary.env_steps < cfg.total_env_steps {
        let mut batch_trajs = Vec::with_capacity(cfg.batch_size);
        let mut pop_failed = false;
        for _ in 0..cfg.batch_size {
            match queue.pop() {
                Ok(t) => batch_trajs.push(t),
                Err(_) => {
                    pop_failed = true;
                    break;
                }
            }
        }
        if pop_failed {
            break;
        }
        let mut staleness_max = 0;
        for t in &batch_trajs {
            let staleness = agent.version.saturating_sub(t.param_version);
            staleness_max = staleness_max.max(staleness);
            staleness_sum += staleness;
            staleness_count += 1;
        }
        summary.env_steps += (batch_trajs.len() * cfg.traj_len) as u64;
        let batch = match Batch::from_trajectories(&batch_trajs) {
            Ok(b) => b,
            Err(e) => {
                result = Err(HarnessError::Agent(e.into()));
                break;
            }
        };
        match agent.agent_step(&batch) {
            Ok(diag) => {
                slot.publish(agent.snapshot());
                summary.meta_steps += 1;
                summary.staleness_max = summary.staleness_max.max(staleness_max);
                let (recent, episodes_completed) = {
                    let eps = episodes.lock().unwrap();
                    (recent_mean(&eps, 32), eps.len() as u64)
                };
                on_step(StepEvent {
                    diagnostics: &diag,
                    env_steps: summary.env_steps,
                    meta_steps: summary.meta_steps,
                    recent_return: recent,
                    episodes_completed,
                    staleness_max,
                    elapsed_secs: start.elapsed().as_secs_f64(),
                });
            }
            Err(e) => {
                result = Err(HarnessError::Agent(e));
                break;
            }
        }
    }

    stop.store(true, Ordering::Relaxed);
    queue.close();
    for h in handles {
        summary.faults += h.join().unwrap_or(0);
    }
    result?;
    let stats = queue.stats();
    summary.produced = stats.produced;
    summary.consumed = stats.consumed;
    summary.leftover_in_queue = stats.in_queue;
    summary.max_queue_wait_items = stats.max_wait_items;
    summary.episode_returns = episodes.lock().unwrap().clone();
    summary.staleness_mean = if staleness_count > 0 {
        staleness_sum as f64 / staleness_count as f64
    } else {
        0.0
    };
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Trajectory log dump
// ---------------------------------------------------------------------------

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn take_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn take_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let mut buf = Vec::new();
    let n = t.len();
    let obs_dim = t.observations.ncols();
    put_u64(&mut buf, t.param_version).unwrap();
    put_u64(&mut buf, n as u64).unwrap();
    put_u64(&mut buf, obs_dim as u64).unwrap();
    for v in t.observations.iter() {
        put_f64(&mut buf, *v).unwrap();
    }
    for a in &t.actions {
        match a {
            ActionRecord::Discrete(i) => {
                buf.push(0);
                put_u64(&mut buf, *i as u64).unwrap();
            }
            ActionRecord::Continuous { action, pre_squash } => {
                buf.push(1);
                put_u64(&mut buf, action.len() as u64).unwrap();
                for v in action.iter().chain(pre_squash) {
                    put_f64(&mut buf, *v).unwrap();
                }
            }
        }
    }
    for v in &t.rewards {
        put_f64(&mut buf, *v).unwrap();
    }
    for v in t.behavior_log_probs() {
        put_f64(&mut buf, *v).unwrap();
    }
    for d in &t.dones {
        buf.push(*d as u8);
    }
    buf
}

fn decode_trajectory(bytes: &[u8]) -> std::io::Result<Trajectory> {
    use std::io::{Error, ErrorKind};
    let mut r = bytes;
    let version = take_u64(&mut r)?;
    let n = take_u64(&mut r)? as usize;
    let obs_dim = take_u64(&mut r)? as usize;
    let mut obs = Array2::zeros((n + 1, obs_dim));
    for v in obs.iter_mut() {
        *v = take_f64(&mut r)?;
    }
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        match tag[0] {
            0 => actions.push(ActionRecord::Discrete(take_u64(&mut r)? as usize)),
            1 => {
                let dims = take_u64(&mut r)? as usize;
                let mut action = Vec::with_capacity(dims);
                let mut pre = Vec::with_capacity(dims);
                for _ in 0..dims {
                    action.push(take_f64(&mut r)?);
                }
                for _ in 0..dims {
                    pre.push(take_f64(&mut r)?);
                }
                actions.push(ActionRecord::Continuous {
                    action,
                    pre_squash: pre,
                });
            }
            _ => return Err(Error::new(ErrorKind::InvalidData, "bad action tag")),
        }
    }
    let mut rewards = Vec::with_capacity(n);
    for _ in 0..n {
        rewards.push(take_f64(&mut r)?);
    }
    let mut log_probs = Vec::with_capacity(n);
    for _ in 0..n {
        log_probs.push(take_f64(&mut r)?);
    }
    let mut dones = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        dones.push(b[0] != 0);
    }
    Trajectory::from_log_probs(obs, actions, rewards, log_probs, dones, version)
        .map_err(|e| Error::new(ErrorKind::InvalidData, e.to_string()))
}

/// Writes length-prefixed trajectory records for replay debugging.
pub fn write_trajectory_log(
    w: &mut impl Write,
    trajectories: &[Trajectory],
) -> std::io::Result<()> {
    for t in trajectories {
        let body = encode_trajectory(t);
        put_u64(w, body.len() as u64)?;
        w.write_all(&body)?;
    }
    Ok(())
}

/// Reads back a trajectory log written by [`write_trajectory_log`].
pub fn read_trajectory_log(r: &mut impl Read) -> std::io::Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    loop {
        let mut len_bytes = [0u8; 8];
        match r.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        out.push(decode_trajectory(&body)?);
    }
    Ok(out)
}
