//! Desk-scale environments behind the batched-environment interface, each
//! with an independently computable quality oracle: the chain has a closed
//! form, the gridworld has value iteration, the point mass has a Riccati
//! recursion.

#![allow(clippy::needless_range_loop)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::ActionSpace;
use crate::error::HarnessError;
use crate::vtrace::ActionRecord;

/// Declared observation/action spaces of an environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceSpec {
    pub obs_dim: usize,
    pub action_space: ActionSpace,
}

/// One synchronous step of every slot.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub observations: Array2<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

/// A batch of environment copies stepped in lockstep. Slots that finish an
/// episode reset themselves; the returned observation is then the first of
/// the next episode.
pub trait BatchedEnv: Send {
    fn spaces(&self) -> SpaceSpec;
    fn num_slots(&self) -> usize;
    fn reset(&mut self, seeds: &[u64]) -> Array2<f64>;
    fn step(&mut self, actions: &[ActionRecord]) -> Result<StepOutput, HarnessError>;
}

/// Environment selection plus parameters; deterministic given a seed.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Chain {
        length: usize,
        slip: f64,
    },
    Grid {
        width: usize,
        height: usize,
        step_cost: f64,
        goal_reward: f64,
        episode_cap: usize,
    },
    Random {
        states: usize,
        actions: usize,
        seed: u64,
    },
    PointMass {
        dims: usize,
        action_bound: f64,
        episode_cap: usize,
    },
}

impl EnvSpec {
    pub fn spaces(&self) -> SpaceSpec {
        match *self {
            EnvSpec::Chain { length, .. } => SpaceSpec {
                obs_dim: length + 1,
                action_space: ActionSpace::Discrete(2),
            },
            EnvSpec::Grid { width, height, .. } => SpaceSpec {
                obs_dim: width * height,
                action_space: ActionSpace::Discrete(4),
            },
            EnvSpec::Random {
                states, actions, ..
            } => SpaceSpec {
                obs_dim: states,
                action_space: ActionSpace::Discrete(actions),
            },
            EnvSpec::PointMass { dims, .. } => SpaceSpec {
                obs_dim: 2 * dims,
                action_space: ActionSpace::Continuous(dims),
            },
        }
    }

    pub fn build(&self, slots: usize, seed: u64) -> Box<dyn BatchedEnv> {
        match self.clone() {
            EnvSpec::Chain { length, slip } => Box::new(ChainEnv::new(length, slip, slots, seed)),
            EnvSpec::Grid {
                width,
                height,
                step_cost,
                goal_reward,
                episode_cap,
            } => Box::new(GridEnv::new(
                GridWorld {
                    width,
                    height,
                    step_cost,
                    goal_reward,
                    episode_cap,
                },
                slots,
                seed,
            )),
            EnvSpec::Random {
                states,
                actions,
                seed: mdp_seed,
            } => Box::new(RandomMdpEnv::new(states, actions, mdp_seed, slots, seed)),
            EnvSpec::PointMass {
                dims,
                action_bound,
                episode_cap,
            } => Box::new(PointMassEnv::new(dims, action_bound, episode_cap, slots, seed)),
        }
    }
}

fn discrete_action(a: &ActionRecord) -> Result<usize, HarnessError> {
    match a {
        ActionRecord::Discrete(i) => Ok(*i),
        _ => Err(HarnessError::EnvFault(
            "discrete environment got a continuous action".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

/// Positions 0..=length; forward moves advance, reaching `length` pays the
/// goal reward and ends the episode. A slip inverts the chosen move. The
/// slip-free optimal discounted return from the start is
/// `gamma^(length-1) * goal_reward` (the goal move lands at step index
/// length-1).
pub struct ChainEnv {
    length: usize,
    slip: f64,
    goal_reward: f64,
    episode_cap: usize,
    positions: Vec<usize>,
    steps_in_episode: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
}

impl ChainEnv {
    pub fn new(length: usize, slip: f64, slots: usize, seed: u64) -> Self {
        let mut env = ChainEnv {
            length,
            slip,
            goal_reward: 1.0,
            episode_cap: 8 * length,
            positions: vec![0; slots],
            steps_in_episode: vec![0; slots],
            rngs: Vec::new(),
        };
        let seeds: Vec<u64> = (0..slots).map(|k| seed.wrapping_add(k as u64)).collect();
        env.reset(&seeds);
        env
    }

    /// Optimal discounted return from the start with slip 0.
    pub fn optimal_return(length: usize, gamma: f64, goal_reward: f64) -> f64 {
        gamma.powi(length as i32 - 1) * goal_reward
    }

    fn obs(&self) -> Array2<f64> {
        let dim = self.length + 1;
        let mut out = Array2::zeros((self.positions.len(), dim));
        for (i, &p) in self.positions.iter().enumerate() {
            out[(i, p)] = 1.0;
        }
        out
    }
}

impl BatchedEnv for ChainEnv {
    fn spaces(&self) -> SpaceSpec {
        SpaceSpec {
            obs_dim: self.length + 1,
            action_space: ActionSpace::Discrete(2),
        }
    }

    fn num_slots(&self) -> usize {
        self.positions.len()
    }

    fn reset(&mut self, seeds: &[u64]) -> Array2<f64> {
        self.rngs = seeds
            .iter()
            .map(|&s| ChaCha8Rng::seed_from_u64(s))
            .collect();
        self.positions = vec![0; seeds.len()];
        self.steps_in_episode = vec![0; seeds.len()];
        self.obs()
    }

    fn step(&mut self, actions: &[ActionRecord]) -> Result<StepOutput, HarnessError> {
        let slots = self.positions.len();
        let mut rewards = vec![0.0; slots];
        let mut dones = vec![false; slots];
        for i in 0..slots {
            let mut forward = discrete_action(&actions[i])? == 1;
            if self.slip > 0.0 && self.rngs[i].gen_range(0.0..1.0) < self.slip {
                forward = !forward;
            }
            let p = self.positions[i];
            let next = if forward {
                (p + 1).min(self.length)
            } else {
                p.saturating_sub(1)
            };
            self.positions[i] = next;
            self.steps_in_episode[i] += 1;
            if next == self.length {
                rewards[i] = self.goal_reward;
                dones[i] = true;
            } else if self.steps_in_episode[i] >= self.episode_cap {
                dones[i] = true;
            }
            if dones[i] {
                self.positions[i] = 0;
                self.steps_in_episode[i] = 0;
            }
        }
        Ok(StepOutput {
            observations: self.obs(),
            rewards,
            dones,
        })
    }
}

// ---------------------------------------------------------------------------
// Gridworld
// ---------------------------------------------------------------------------

/// Deterministic gridworld: start in one corner, goal in the opposite one,
/// a per-move cost and a terminal goal reward.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub episode_cap: usize,
}

impl GridWorld {
    pub fn states(&self) -> usize {
        self.width * self.height
    }

    fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn goal(&self) -> usize {
        self.index(self.width - 1, self.height - 1)
    }

    /// Applies an action (0 up, 1 down, 2 left, 3 right); walls block.
    pub fn next_state(&self, state: usize, action: usize) -> usize {
        let (x, y) = (state % self.width, state / self.width);
        let (nx, ny) = match action {
            0 => (x, y.saturating_sub(1)),
            1 => (x, (y + 1).min(self.height - 1)),
            2 => (x.saturating_sub(1), y),
            _ => ((x + 1).min(self.width - 1), y),
        };
        self.index(nx, ny)
    }

    pub fn reward(&self, next: usize) -> f64 {
        if next == self.goal() {
            self.goal_reward - self.step_cost
        } else {
            -self.step_cost
        }
    }

    /// Value iteration for the discounted control problem; the goal is
    /// absorbing with value zero.
    pub fn value_iteration(&self, gamma: f64, tol: f64) -> Vec<f64> {
        let n = self.states();
        let goal = self.goal();
        let mut v = vec![0.0; n];
        for _ in 0..100_000 {
            let mut delta: f64 = 0.0;
            for s in 0..n {
                if s == goal {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for a in 0..4 {
                    let ns = self.next_state(s, a);
                    let cont = if ns == goal { 0.0 } else { gamma * v[ns] };
                    best = best.max(self.reward(ns) + cont);
                }
                delta = delta.max((best - v[s]).abs());
                v[s] = best;
            }
            if delta < tol {
                break;
            }
        }
        v
    }

    /// Greedy policy of the value-iteration solution.
    pub fn greedy_policy(&self, values: &[f64], gamma: f64) -> Vec<usize> {
        let goal = self.goal();
        (0..self.states())
            .map(|s| {
                let mut best = (0, f64::NEG_INFINITY);
                for a in 0..4 {
                    let ns = self.next_state(s, a);
                    let cont = if ns == goal { 0.0 } else { gamma * values[ns] };
                    let q = self.reward(ns) + cont;
                    if q > best.1 {
                        best = (a, q);
                    }
                }
                best.0
            })
            .collect()
    }

    /// Undiscounted episode return of the greedy policy from the start:
    /// the training-quality oracle.
    pub fn optimal_episode_return(&self) -> f64 {
        let values = self.value_iteration(0.99, 1e-12);
        let policy = self.greedy_policy(&values, 0.99);
        let goal = self.goal();
        let mut s = 0;
        let mut ret = 0.0;
        for _ in 0..self.episode_cap {
            s = self.next_state(s, policy[s]);
            ret += self.reward(s);
            if s == goal {
                break;
            }
        }
        ret
    }
}

pub struct GridEnv {
    world: GridWorld,
    positions: Vec<usize>,
    steps_in_episode: Vec<usize>,
}

impl GridEnv {
    pub fn new(world: GridWorld, slots: usize, _seed: u64) -> Self {
        GridEnv {
            world,
            positions: vec![0; slots],
            steps_in_episode: vec![0; slots],
        }
    }

    fn obs(&self) -> Array2<f64> {
        let dim = self.world.states();
        let mut out = Array2::zeros((self.positions.len(), dim));
        for (i, &p) in self.positions.iter().enumerate() {
            out[(i, p)] = 1.0;
        }
        out
    }
}

impl BatchedEnv for GridEnv {
    fn spaces(&self) -> SpaceSpec {
        SpaceSpec {
            obs_dim: self.world.states(),
            action_space: ActionSpace::Discrete(4),
        }
    }

    fn num_slots(&self) -> usize {
        self.positions.len()
    }

    fn reset(&mut self, seeds: &[u64]) -> Array2<f64> {
        self.positions = vec![0; seeds.len()];
        self.steps_in_episode = vec![0; seeds.len()];
        self.obs()
    }

    fn step(&mut self, actions: &[ActionRecord]) -> Result<StepOutput, HarnessError> {
        let slots = self.positions.len();
        let mut rewards = vec![0.0; slots];
        let mut dones = vec![false; slots];
        for i in 0..slots {
            let a = discrete_action(&actions[i])?;
            if a >= 4 {
                return Err(HarnessError::EnvFault(format!("action {a} out of range")));
            }
            let next = self.world.next_state(self.positions[i], a);
            rewards[i] = self.world.reward(next);
            self.positions[i] = next;
            self.steps_in_episode[i] += 1;
            if next == self.world.goal() || self.steps_in_episode[i] >= self.world.episode_cap {
                dones[i] = true;
                self.positions[i] = 0;
                self.steps_in_episode[i] = 0;
            }
        }
        Ok(StepOutput {
            observations: self.obs(),
            rewards,
            dones,
        })
    }
}

// ---------------------------------------------------------------------------
// Random MDP
// ---------------------------------------------------------------------------

/// A continuing MDP with Dirichlet(1) transition rows and uniform rewards,
/// fixed by its construction seed.
pub struct RandomMdpEnv {
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    states: usize,
    actions: usize,
    positions: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
}

impl RandomMdpEnv {
    pub fn new(states: usize, actions: usize, mdp_seed: u64, slots: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mdp_seed);
        let mut transitions = vec![vec![vec![0.0; states]; actions]; states];
        let mut rewards = vec![vec![0.0; actions]; states];
        for x in 0..states {
            for a in 0..actions {
                let row = crate::tabular::dirichlet_row(&mut rng, states);
                transitions[x][a] = row;
                rewards[x][a] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut env = RandomMdpEnv {
            transitions,
            rewards,
            states,
            actions,
            positions: vec![0; slots],
            rngs: Vec::new(),
        };
        let seeds: Vec<u64> = (0..slots).map(|k| seed.wrapping_add(k as u64)).collect();
        env.reset(&seeds);
        env
    }

    fn obs(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.positions.len(), self.states));
        for (i, &p) in self.positions.iter().enumerate() {
            out[(i, p)] = 1.0;
        }
        out
    }
}

impl BatchedEnv for RandomMdpEnv {
    fn spaces(&self) -> SpaceSpec {
        SpaceSpec {
            obs_dim: self.states,
            action_space: ActionSpace::Discrete(self.actions),
        }
    }

    fn num_slots(&self) -> usize {
        self.positions.len()
    }

    fn reset(&mut self, seeds: &[u64]) -> Array2<f64> {
        self.rngs = seeds
            .iter()
            .map(|&s| ChaCha8Rng::seed_from_u64(s))
            .collect();
        self.positions = vec![0; seeds.len()];
        self.obs()
    }

    fn step(&mut self, actions: &[ActionRecord]) -> Result<StepOutput, HarnessError> {
        let slots = self.positions.len();
        let mut rewards = vec![0.0; slots];
        let dones = vec![false; slots];
        for i in 0..slots {
            let a = discrete_action(&actions[i])?;
            if a >= self.actions {
                return Err(HarnessError::EnvFault(format!("action {a} out of range")));
            }
            let x = self.positions[i];
            rewards[i] = self.rewards[x][a];
            let u: f64 = self.rngs[i].gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut next = self.states - 1;
            for (y, &p) in self.transitions[x][a].iter().enumerate() {
                acc += p;
                if u < acc {
                    next = y;
                    break;
                }
            }
            self.positions[i] = next;
        }
        Ok(StepOutput {
            observations: self.obs(),
            rewards,
            dones,
        })
    }
}

// ---------------------------------------------------------------------------
// Point mass
// ---------------------------------------------------------------------------

/// Double-integrator point mass per dimension with bounded acceleration and
/// quadratic cost. Rewards are negated costs.
pub struct PointMassEnv {
    dims: usize,
    action_bound: f64,
    episode_cap: usize,
    dt: f64,
    q_pos: f64,
    q_vel: f64,
    r_act: f64,
    state: Vec<Vec<f64>>, // per slot: [pos..., vel...]
    steps_in_episode: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
}

impl PointMassEnv {
    pub fn new(dims: usize, action_bound: f64, episode_cap: usize, slots: usize, seed: u64) -> Self {
        let mut env = PointMassEnv {
            dims,
            action_bound,
            episode_cap,
            dt: 0.1,
            q_pos: 1.0,
            q_vel: 0.1,
            r_act: 0.01,
            state: vec![vec![0.0; 2 * dims]; slots],
            steps_in_episode: vec![0; slots],
            rngs: Vec::new(),
        };
        let seeds: Vec<u64> = (0..slots).map(|k| seed.wrapping_add(k as u64)).collect();
        env.reset(&seeds);
        env
    }

    fn sample_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..2 * self.dims).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn obs(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.state.len(), 2 * self.dims));
        for (i, s) in self.state.iter().enumerate() {
            for (j, &v) in s.iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Finite-horizon Riccati recursion for the unconstrained problem: the
    /// optimal quadratic cost from `x0` over `horizon` steps. With a loose
    /// action bound the simulated optimal cost approaches this value; any
    /// bounded controller can only do worse.
    pub fn lqr_optimal_cost(&self, x0: &[f64], horizon: usize) -> f64 {
        // Per-dimension system: x' = A x + B u with A = [[1, dt], [0, 1]],
        // B = [0, dt]; stage cost dt*(q_pos p^2 + q_vel v^2 + r u^2).
        let (dt, qp, qv, r) = (self.dt, self.q_pos, self.q_vel, self.r_act);
        let a = [[1.0, dt], [0.0, 1.0]];
        let b = [0.0, dt];
        let q = [[qp * dt, 0.0], [0.0, qv * dt]];
        let rr = r * dt;
        let mut total = 0.0;
        for d in 0..self.dims {
            let mut p = [[0.0f64; 2]; 2];
            for _ in 0..horizon {
                // P <- Q + A^T (P - P B (R + B^T P B)^{-1} B^T P) A
                let pb = [
                    p[0][0] * b[0] + p[0][1] * b[1],
                    p[1][0] * b[0] + p[1][1] * b[1],
                ];
                let btpb = b[0] * pb[0] + b[1] * pb[1];
                let scale = 1.0 / (rr + btpb);
                let mut inner = [[0.0f64; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        inner[i][j] = p[i][j] - pb[i] * scale * pb[j];
                    }
                }
                let mut ia = [[0.0f64; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        ia[i][j] = inner[i][0] * a[0][j] + inner[i][1] * a[1][j];
                    }
                }
                let mut next = q;
                for i in 0..2 {
                    for j in 0..2 {
                        next[i][j] += a[0][i] * ia[0][j] + a[1][i] * ia[1][j];
                    }
                }
                p = next;
            }
            let x = [x0[d], x0[self.dims + d]];
            total += x[0] * (p[0][0] * x[0] + p[0][1] * x[1])
                + x[1] * (p[1][0] * x[0] + p[1][1] * x[1]);
        }
        total
    }

    /// Simulated cost of the clamped LQR feedback law from `x0`.
    pub fn simulate_feedback_cost(&self, x0: &[f64], horizon: usize, bound: f64) -> f64 {
        let (dt, qp, qv, r) = (self.dt, self.q_pos, self.q_vel, self.r_act);
        // A crude stabilizing gain works for the comparison oracle.
        let (k_p, k_v) = (1.2, 1.8);
        let mut total = 0.0;
        let mut state: Vec<f64> = x0.to_vec();
        for _ in 0..horizon {
            for d in 0..self.dims {
                let p = state[d];
                let v = state[self.dims + d];
                let u = (-k_p * p - k_v * v).clamp(-bound, bound);
                total += dt * (qp * p * p + qv * v * v + r * u * u);
                let nv = v + dt * u;
                state[self.dims + d] = nv;
                state[d] = p + dt * nv;
            }
        }
        total
    }
}

impl BatchedEnv for PointMassEnv {
    fn spaces(&self) -> SpaceSpec {
        SpaceSpec {
            obs_dim: 2 * self.dims,
            action_space: ActionSpace::Continuous(self.dims),
        }
    }

    fn num_slots(&self) -> usize {
        self.state.len()
    }

    fn reset(&mut self, seeds: &[u64]) -> Array2<f64> {
        self.rngs = seeds
            .iter()
            .map(|&s| ChaCha8Rng::seed_from_u64(s))
            .collect();
        self.state = (0..seeds.len())
            .map(|i| {
                let mut rng = self.rngs[i].clone();
                let s = self.sample_state(&mut rng);
                self.rngs[i] = rng;
                s
            })
            .collect();
        self.steps_in_episode = vec![0; seeds.len()];
        self.obs()
    }

    fn step(&mut self, actions: &[ActionRecord]) -> Result<StepOutput, HarnessError> {
        let slots = self.state.len();
        let mut rewards = vec![0.0; slots];
        let mut dones = vec![false; slots];
        for i in 0..slots {
            let act = match &actions[i] {
                ActionRecord::Continuous { action, .. } => action.clone(),
                _ => {
                    return Err(HarnessError::EnvFault(
                        "continuous environment got a discrete action".into(),
                    ))
                }
            };
            if act.len() != self.dims {
                return Err(HarnessError::EnvFault("action dimension mismatch".into()));
            }
            let mut cost = 0.0;
            for d in 0..self.dims {
                let u = (act[d] * self.action_bound).clamp(-self.action_bound, self.action_bound);
                let p = self.state[i][d];
                let v = self.state[i][self.dims + d];
                cost += self.dt * (self.q_pos * p * p + self.q_vel * v * v + self.r_act * u * u);
                let nv = v + self.dt * u;
                self.state[i][self.dims + d] = nv;
                self.state[i][d] = p + self.dt * nv;
            }
            rewards[i] = -cost;
            self.steps_in_episode[i] += 1;
            if self.steps_in_episode[i] >= self.episode_cap {
                dones[i] = true;
                let mut rng = self.rngs[i].clone();
                self.state[i] = self.sample_state(&mut rng);
                self.rngs[i] = rng;
                self.steps_in_episode[i] = 0;
            }
        }
        Ok(StepOutput {
            observations: self.obs(),
            rewards,
            dones,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_optimal_return_closed_form() {
        let gamma: f64 = 0.97;
        let length = 5;
        // Deterministic rollout of the always-forward policy.
        let mut env = ChainEnv::new(length, 0.0, 1, 0);
        let _ = env.reset(&[0]);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..length {
            let out = env.step(&[ActionRecord::Discrete(1)]).unwrap();
            ret += discount * out.rewards[0];
            discount *= gamma;
            if out.dones[0] {
                break;
            }
        }
        assert!((ret - ChainEnv::optimal_return(length, gamma, 1.0)).abs() < 1e-12);
        assert!((ChainEnv::optimal_return(length, gamma, 1.0) - gamma.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn gridworld_value_iteration_reaches_goal() {
        let world = GridWorld {
            width: 5,
            height: 5,
            step_cost: 0.05,
            goal_reward: 1.0,
            episode_cap: 60,
        };
        let values = world.value_iteration(0.99, 1e-12);
        let policy = world.greedy_policy(&values, 0.99);
        let mut s = 0;
        let mut steps = 0;
        while s != world.goal() {
            s = world.next_state(s, policy[s]);
            steps += 1;
            assert!(steps <= 8, "greedy policy must take the shortest path");
        }
        assert_eq!(steps, 8);
        let optimal = world.optimal_episode_return();
        assert!((optimal - (1.0 - 0.05 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn random_mdp_is_reproducible() {
        let mut a = RandomMdpEnv::new(5, 3, 42, 2, 7);
        let mut b = RandomMdpEnv::new(5, 3, 42, 2, 7);
        for _ in 0..50 {
            let acts = vec![ActionRecord::Discrete(1), ActionRecord::Discrete(2)];
            let oa = a.step(&acts).unwrap();
            let ob = b.step(&acts).unwrap();
            assert_eq!(oa.rewards, ob.rewards);
            assert_eq!(oa.observations, ob.observations);
        }
    }

    #[test]
    fn point_mass_bound_monotonicity() {
        let env = PointMassEnv::new(1, 1.0, 100, 1, 3);
        let x0 = [0.8, -0.3];
        let unconstrained = env.simulate_feedback_cost(&x0, 150, f64::INFINITY);
        let bounded = env.simulate_feedback_cost(&x0, 150, 1.0);
        let frozen = env.simulate_feedback_cost(&x0, 150, 0.0);
        assert!(frozen >= bounded - 1e-12);
        assert!(bounded >= unconstrained - 1e-12);
        // The Riccati recursion lower-bounds any bounded controller.
        let lqr = env.lqr_optimal_cost(&x0, 150);
        assert!(lqr <= bounded + 1e-9);
        assert!(lqr > 0.0);
    }

    #[test]
    fn done_slots_auto_reset() {
        let mut env = ChainEnv::new(3, 0.0, 1, 0);
        let _ = env.reset(&[0]);
        for _ in 0..3 {
            let out = env.step(&[ActionRecord::Discrete(1)]).unwrap();
            if out.dones[0] {
                // Back at the start after the terminal step.
                assert_eq!(out.observations[(0, 0)], 1.0);
                return;
            }
        }
        panic!("chain of length 3 must finish in 3 forward moves");
    }
}
