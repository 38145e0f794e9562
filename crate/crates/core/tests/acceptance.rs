//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! Criterion 1 is known to fail as specified: the operator's worst-case
//! contraction factor 1 - (1-gamma)(alpha_rho*beta + 1 - alpha_rho)
//! approaches 1 as alpha_rho -> 1 and beta -> 0, so 200 exact applications
//! cannot reach 1e-8 on every random instance at gamma = 0.99 (0.99^200 is
//! about 0.13). The test implements the stated gate literally and reports
//! the measured failure set; the attainable fixed-point and contraction
//! claims are covered by criteria 2 and 3 and unit tests.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use staclab_core::agent::{
    Agent, AgentConfig, ArchConfig, ActionSpace,
};
use staclab_core::diffcore::{
    grad, param_leaves, rmsprop_step, sigmoid, ParamSet, Tape,
};
use staclab_core::harness::envs::{EnvSpec, GridWorld};
use staclab_core::harness::{
    run_training, Actor, HarnessConfig, RefreshPolicy, SnapshotSlot, TrajectoryQueue,
};
use staclab_core::losses::{
    actor_critic_loss, meta_transform, outer_hypers_on_tape, policy_loss, value_loss, Batch,
    HyperParams, LossMode, MetaLayout, MetaMask, SigmaBounds,
};
use staclab_core::tabular::{
    apply_operator, contraction_certificate, contraction_modulus_bound, exact_beta, exact_value,
    fixed_point_iterate, mixture_policy, random_instance, OperatorConfig,
};
use staclab_core::vtrace::{vtrace_targets, ActionRecord, Trajectory, VTraceConfig};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {:02} {}: {} {}",
        id,
        name,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
}

fn random_trajectory(
    rng: &mut ChaCha8Rng,
    n: usize,
    on_policy: bool,
) -> (Trajectory, Vec<f64>, Vec<f64>) {
    let obs = Array2::zeros((n + 1, 1));
    let actions = vec![ActionRecord::Discrete(0); n];
    let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let pi: Vec<f64> = if on_policy {
        mu.clone()
    } else {
        (0..n).map(|_| rng.gen_range(0.05..1.0)).collect()
    };
    let values: Vec<f64> = (0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let traj = Trajectory::new(obs, actions, rewards, &mu, vec![false; n], 0).unwrap();
    (traj, pi, values)
}

/// Independent plain V-trace oracle: the forward sum
/// v_s = V(x_s) + sum_t gamma^{t-s} (prod_{i<t} c_i) rho_t delta_t with
/// truncated weights, no recursion.
fn plain_vtrace_forward_sum(
    rewards: &[f64],
    mu: &[f64],
    pi: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let is: Vec<f64> = pi.iter().zip(mu).map(|(p, m)| p / m).collect();
    let rho: Vec<f64> = is.iter().map(|&r| r.min(1.0)).collect();
    let c: Vec<f64> = is.iter().map(|&r| lambda * r.min(1.0)).collect();
    (0..n)
        .map(|s| {
            let mut v = values[s];
            for t in s..n {
                let mut w = gamma.powi((t - s) as i32);
                for ci in c.iter().take(t).skip(s) {
                    w *= ci;
                }
                let delta = rho[t] * (rewards[t] + gamma * values[t + 1] - values[t]);
                v += w * delta;
            }
            v
        })
        .collect()
}

#[test]
fn acceptance_01_operator_fixed_point_iteration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    let mut envelope_ok = true;
    for k in 0..100 {
        let gamma = if k % 2 == 0 { 0.9 } else { 0.99 };
        let inst = random_instance(&mut rng, gamma);
        let v0 = Array1::from_shape_fn(inst.mdp.states, |_| rng.gen_range(-1.0..1.0));
        let trace =
            fixed_point_iterate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, v0, 200).unwrap();
        let err = *trace.distances.last().unwrap();
        // The geometric convergence envelope always holds even where the
        // 1e-8 gate does not.
        let beta = exact_beta(&inst.mu, &inst.pi, inst.cfg.rho_bar);
        let bound = contraction_modulus_bound(gamma, inst.cfg.alpha_rho, beta);
        let d0 = trace.distances[0];
        for (i, d) in trace.distances.iter().enumerate() {
            if *d > bound.powi(i as i32) * d0 + 1e-9 {
                envelope_ok = false;
            }
        }
        if err >= 1e-8 {
            failures.push((k, gamma, inst.cfg.alpha_rho, bound, err));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 30.0;
    let worst = failures
        .iter()
        .map(|f| f.4)
        .fold(0.0f64, f64::max);
    report(
        1,
        "operator fixed point via 200 iterations",
        pass,
        &format!(
            "({}/100 instances above 1e-8 after 200 iterations; worst error {:.2e}; \
             geometric envelope held on all instances: {}; {:.1}s)",
            failures.len(),
            worst,
            envelope_ok,
            elapsed
        ),
    );
    assert!(envelope_ok, "geometric envelope must hold");
    assert!(elapsed < 30.0, "runtime budget exceeded");
    assert!(
        pass,
        "200-iteration/1e-8 gate missed on {} of 100 instances (expected: the \
         contraction bound 1-(1-gamma)(a*beta+1-a) approaches 1 for a->1, beta->0, \
         so this gate is unattainable at gamma=0.99; see decisions ledger)",
        failures.len()
    );
}

#[test]
fn acceptance_02_contraction_certificate() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = 0usize;
    let mut worst_margin: f64 = f64::NEG_INFINITY;
    for k in 0..100 {
        let gamma = if k % 2 == 0 { 0.9 } else { 0.99 };
        let inst = random_instance(&mut rng, gamma);
        let cert =
            contraction_certificate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, 100, &mut rng)
                .unwrap();
        let margin = cert.empirical - cert.bound;
        worst_margin = worst_margin.max(margin);
        if margin > 1e-12 {
            violations += 1;
        }
        // Corner identities of the bound (exact up to one rounding of the
        // algebraically identical expressions).
        let beta = exact_beta(&inst.mu, &inst.pi, 1.0);
        assert_eq!(contraction_modulus_bound(gamma, 0.0, beta), gamma);
        let corner = contraction_modulus_bound(gamma, 1.0, beta);
        assert!((corner - (1.0 - (1.0 - gamma) * beta)).abs() <= 4.0 * f64::EPSILON);
    }
    let pass = violations == 0;
    report(
        2,
        "contraction certificate",
        pass,
        &format!(
            "(0 allowed bound violations, got {violations}; worst empirical-bound margin {:.2e}; {:.1}s)",
            worst_margin,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_03_operator_corners() {
    let start = Instant::now();
    // (a) alpha = 1 leaky targets equal plain V-trace targets within 1e-12.
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..24);
        let (traj, pi, values) = random_trajectory(&mut rng, n, false);
        let gamma = if rng.gen_bool(0.5) { 0.9 } else { 0.99 };
        let lambda = rng.gen_range(0.5..1.0);
        let cfg = VTraceConfig::with_independent_alphas(gamma, lambda, 1.0, 1.0, 1.0, 1.0).unwrap();
        let out = vtrace_targets(&traj, &pi, &values, &cfg).unwrap();
        let mu = traj.behavior_probs();
        let oracle = plain_vtrace_forward_sum(&traj.rewards, &mu, &pi, &values, gamma, lambda);
        for s in 0..n {
            worst = worst.max((out.targets[s] - oracle[s]).abs());
        }
    }
    let pass_a = worst < 1e-12;

    // (b) alpha = 0 (pure importance sampling) converges to the target
    // policy's value within 1e-8.
    let mut worst_is: f64 = 0.0;
    for k in 0..50 {
        let gamma = if k % 2 == 0 { 0.9 } else { 0.99 };
        let inst = random_instance(&mut rng, gamma);
        let cfg = OperatorConfig::new(0.0, 0.0).unwrap();
        let vpi = exact_value(&inst.mdp, &inst.pi).unwrap();
        let v0 = Array1::from_shape_fn(inst.mdp.states, |_| rng.gen_range(-1.0..1.0));
        let trace = fixed_point_iterate(&inst.mdp, &inst.mu, &inst.pi, &cfg, v0, 10).unwrap();
        for (a, b) in trace.final_v.iter().zip(vpi.iter()) {
            worst_is = worst_is.max((a - b).abs());
        }
    }
    let pass_b = worst_is < 1e-8;
    let pass = pass_a && pass_b;
    report(
        3,
        "operator corners",
        pass,
        &format!(
            "(vtrace corner worst {:.2e} < 1e-12: {pass_a}; pure-IS worst {:.2e} < 1e-8: {pass_b}; {:.1}s)",
            worst, worst_is,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_04_on_policy_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = 20;
        let (traj, pi, values) = random_trajectory(&mut rng, n, true);
        let gamma = rng.gen_range(0.9..0.999);
        let cfg = VTraceConfig::new(gamma, 1.0, rng.gen_range(0.0..1.0)).unwrap();
        let out = vtrace_targets(&traj, &pi, &values, &cfg).unwrap();
        // n-step bootstrapped return over the remaining window.
        for s in 0..n {
            let mut expect = gamma.powi((n - s) as i32) * values[n];
            for j in s..n {
                expect += gamma.powi((j - s) as i32) * traj.rewards[j];
            }
            worst = worst.max((out.targets[s] - expect).abs());
        }
    }
    let pass = worst < 1e-10;
    report(
        4,
        "on-policy reduction to bootstrapped returns",
        pass,
        &format!("(worst deviation {worst:.2e}, tolerance 1e-10)"),
    );
    assert!(pass);
}

fn synthetic_batch(rng: &mut ChaCha8Rng, m: usize, n: usize, obs_dim: usize, actions: usize) -> Batch {
    let mut trajs = Vec::new();
    for _ in 0..m {
        let obs = Array2::from_shape_fn((n + 1, obs_dim), |_| rng.gen_range(-1.0..1.0));
        let acts: Vec<ActionRecord> = (0..n)
            .map(|_| ActionRecord::Discrete(rng.gen_range(0..actions)))
            .collect();
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
        trajs.push(Trajectory::new(obs, acts, rewards, &mu, vec![false; n], 0).unwrap());
    }
    Batch::from_trajectories(&trajs).unwrap()
}

#[test]
fn acceptance_05_metagradient_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let arch = ArchConfig {
        obs_dim: 5,
        torso: vec![4],
        head_hidden: 4,
        heads: 1,
        action_space: ActionSpace::Discrete(3),
    };
    let mut agent = Agent::new(AgentConfig::new(arch, 205));
    assert!(agent.net.params.num_values() <= 1000);
    // Warm up so output layers and optimizer statistics are generic.
    for _ in 0..3 {
        let b = synthetic_batch(&mut rng, 4, 6, 5, 3);
        agent.agent_step(&b).unwrap();
    }
    // Two-tolerance gradient check: relative error 1e-4 with an absolute
    // guard of 1e-8 for coordinates below the resolution of central
    // differences on an O(1) objective (the roundoff floor of the
    // difference quotient is about 1e-11 here, measured at two step sizes).
    let (rtol, atol) = (1e-4, 1e-8);
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let h = 1e-4;
    for _ in 0..20 {
        let batch = synthetic_batch(&mut rng, 4, 6, 5, 3);
        let ad = agent.metagradient(&batch).unwrap();
        let probe = agent.meta_probe(&batch).unwrap();
        for k in 0..agent.meta.raw.len() {
            let mut plus = agent.meta.raw.clone();
            plus[k] += h;
            let mut minus = agent.meta.raw.clone();
            minus[k] -= h;
            let fd = (probe.objective_at(&plus).unwrap() - probe.objective_at(&minus).unwrap())
                / (2.0 * h);
            let err = (ad[k] - fd).abs();
            let rel = err / fd.abs().max(ad[k].abs()).max(atol / rtol);
            worst_rel = worst_rel.max(rel);
            worst_abs = worst_abs.max(err);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_rel < rtol && elapsed < 60.0;
    report(
        5,
        "metagradient vs central finite differences",
        pass,
        &format!(
            "(worst relative error {worst_rel:.2e} vs {rtol:.0e}, worst absolute {worst_abs:.2e},              20 batches x 6 coordinates, {elapsed:.1}s)"
        ),
    );
    assert!(pass, "worst rel err {worst_rel}, elapsed {elapsed}");
}

#[test]
fn acceptance_06_stop_gradient_contract() {
    // Outer-mode policy loss: a parameter entering only the advantage gets
    // an exactly zero gradient.
    let mut p = ParamSet::new();
    p.insert(
        "adv_only",
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), 0.37),
    );
    let g_outer = grad(
        |t, n| {
            let a = n.id("adv_only");
            let adv = t.broadcast_scalar(a, &[3]);
            let logp = t.vector(&[-0.2, -1.0, -0.4]);
            let rho = t.vector(&[1.0, 0.8, 0.6]);
            let gp = t.scalar(1.0);
            policy_loss(t, logp, rho, adv, gp, true)
        },
        &p,
    )
    .unwrap();
    let adv_grad = g_outer.get("adv_only").unwrap()[ndarray::IxDyn(&[])];

    // Value loss: the gradient with respect to the targets is exactly zero
    // once they pass through the stop-gradient the targets carry.
    let mut q = ParamSet::new();
    q.insert(
        "targets",
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![0.5, -0.2, 0.9]).unwrap(),
    );
    let g_targets = grad(
        |t, n| {
            let raw = n.id("targets");
            let sg = t.stop_grad(raw);
            let v = t.vector(&[0.1, 0.2, 0.3]);
            let gv = t.scalar(0.25);
            value_loss(t, v, sg, gv)
        },
        &q,
    )
    .unwrap();
    let target_grad_max = g_targets
        .get("targets")
        .unwrap()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let pass = adv_grad == 0.0 && target_grad_max == 0.0;
    report(
        6,
        "stop-gradient contract",
        pass,
        &format!("(advantage-path gradient {adv_grad}, target-path gradient {target_grad_max}; both must be exactly zero)"),
    );
    assert!(pass);
}

#[test]
fn acceptance_07_ablation_reduces_to_reference_loop() {
    let start = Instant::now();
    let spec = EnvSpec::Grid {
        width: 4,
        height: 4,
        step_cost: 0.05,
        goal_reward: 1.0,
        episode_cap: 40,
    };
    let spaces = spec.spaces();
    let arch = ArchConfig {
        obs_dim: spaces.obs_dim,
        torso: vec![16],
        head_hidden: 16,
        heads: 1,
        action_space: spaces.action_space,
    };
    let mk_config = || {
        let mut config = AgentConfig::new(arch.clone(), 707);
        config.hyper.meta_lr = 0.0;
        config.mask = MetaMask::none();
        config.hyper.gamma_outer = 0.99;
        config
    };

    let (m, n, steps) = (4usize, 6usize, 40usize);

    // Path A: the self-tuning agent with the meta loop frozen.
    let mut agent = Agent::new(mk_config());
    let env = spec.build(m, 1001);
    let mut actor = Actor::new(env, 2002, n, RefreshPolicy::EveryTrajectory);
    for _ in 0..steps {
        let snap = Arc::new(agent.snapshot());
        let out = actor.unroll(&move || snap.clone()).unwrap();
        let batch = Batch::from_trajectories(&out.trajectories).unwrap();
        agent.agent_step(&batch).unwrap();
    }

    // Path B: a reference loop with no metaparameters anywhere: fixed
    // hyperparameters as constants, gradient, one RMSProp step.
    let mut reference = Agent::new(mk_config());
    let env = spec.build(m, 1001);
    let mut actor_b = Actor::new(env, 2002, n, RefreshPolicy::EveryTrajectory);
    for step in 0..steps {
        reference.version = step as u64;
        let snap = Arc::new(reference.snapshot());
        let out = actor_b.unroll(&move || snap.clone()).unwrap();
        let batch = Batch::from_trajectories(&out.trajectories).unwrap();

        let mut tape = Tape::new();
        let theta = param_leaves(&mut tape, &reference.net.params);
        let obs = tape.constant(batch.observations.clone().into_dyn());
        let heads = reference.net.forward_on_tape(&mut tape, &theta, obs);
        let eff = outer_hypers_on_tape(&mut tape, &reference.config.hyper);
        let parts = actor_critic_loss(
            &mut tape,
            &heads[0],
            &batch,
            &eff,
            LossMode::Inner,
            &SigmaBounds::default(),
        );
        let one = tape.scalar(1.0);
        let total = tape.mul(parts.total, one);
        let gids = tape.backward(total, &theta.ids()).unwrap();
        let mut grads = ParamSet::new();
        for ((name, _), gid) in theta.iter().zip(&gids) {
            grads.insert(name.to_string(), tape.value(*gid).clone());
        }
        let (new_params, new_opt) = rmsprop_step(
            &reference.net.params,
            &staclab_core::diffcore::GradSet::from_params(grads),
            &reference.opt,
        )
        .unwrap();
        reference.net.params = new_params;
        reference.opt = new_opt;
    }

    let mut identical = true;
    for (name, v) in agent.net.params.iter() {
        if v != reference.net.params.get(name).unwrap() {
            identical = false;
            println!("  parameter {name} diverged");
        }
    }
    let pass = identical;
    report(
        7,
        "meta-frozen agent is bit-identical to the reference loop",
        pass,
        &format!("({} meta steps compared, {:.1}s)", steps, start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn acceptance_08_training_smoke() {
    let start = Instant::now();
    let world = GridWorld {
        width: 5,
        height: 5,
        step_cost: 0.05,
        goal_reward: 1.0,
        episode_cap: 60,
    };
    let optimal = world.optimal_episode_return();
    let spec = EnvSpec::Grid {
        width: 5,
        height: 5,
        step_cost: 0.05,
        goal_reward: 1.0,
        episode_cap: 60,
    };
    let spaces = spec.spaces();
    let budget: u64 = 120_000; // within the 500k allowance
    let mk_agent = |heads: usize, seed: u64| {
        let arch = ArchConfig {
            obs_dim: spaces.obs_dim,
            torso: vec![64, 64],
            head_hidden: 64,
            heads,
            action_space: spaces.action_space,
        };
        let mut config = AgentConfig::new(arch, seed);
        config.hyper.gamma_outer = 0.99;
        config.hyper.meta_lr = 5e-3;
        config.lr = staclab_core::diffcore::LrSchedule::constant(3e-3);
        Agent::new(config)
    };
    let cfg = |seed: u64| HarnessConfig {
        batch_size: 16,
        traj_len: 10,
        env_slots: 16,
        actors: 1,
        queue_batches: 4,
        deterministic: true,
        refresh: RefreshPolicy::EveryTrajectory,
        total_env_steps: budget,
        seed,
    };

    // STAC, three seeds: final episodes must reach 90% of optimal.
    let mut stac_scores = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut agent = mk_agent(1, seed);
        let summary = run_training(&mut agent, &spec, &cfg(seed), &mut |_| {}).unwrap();
        let tail_start = summary.episode_returns.len().saturating_sub(50);
        let tail = &summary.episode_returns[tail_start..];
        let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        stac_scores.push(mean);
    }
    let stac_frac: Vec<f64> = stac_scores.iter().map(|s| s / optimal).collect();
    let stac_ok = stac_frac.iter().all(|&f| f >= 0.9);

    // STACX with three heads: same budget, transformed metaparameters stay
    // in (0,1), and at least one moves more than 0.01 from its init.
    let init_value = sigmoid(HyperParams::default().meta_init);
    let mut stacx_ok = true;
    let mut stacx_move: f64 = 0.0;
    for seed in [1u64, 2, 3] {
        let mut agent = mk_agent(3, seed);
        let mut in_range = true;
        let mut max_move: f64 = 0.0;
        run_training(&mut agent, &spec, &cfg(seed), &mut |ev| {
            for hd in &ev.diagnostics.heads {
                let tr = &hd.transformed;
                for v in [tr.gamma, tr.lambda, tr.alpha_rho, tr.g_v, tr.g_p, tr.g_e] {
                    if !(v > 0.0 && v < 1.0) {
                        in_range = false;
                    }
                    max_move = max_move.max((v - init_value).abs());
                }
            }
        })
        .unwrap();
        stacx_move = stacx_move.max(max_move);
        if !in_range || max_move <= 0.01 {
            stacx_ok = false;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = stac_ok && stacx_ok && elapsed < 600.0;
    report(
        8,
        "desk-scale training smoke",
        pass,
        &format!(
            "(optimal {optimal:.3}; per-seed fractions {:.2}/{:.2}/{:.2} vs 0.90; \
             largest metaparameter movement {stacx_move:.3} vs 0.01; {elapsed:.0}s vs 600s)",
            stac_frac[0], stac_frac[1], stac_frac[2]
        ),
    );
    assert!(pass, "stac {stac_frac:?}, stacx move {stacx_move}, {elapsed}s");
}

#[test]
fn acceptance_09_harness_integrity() {
    let start = Instant::now();
    let spec = EnvSpec::Grid {
        width: 4,
        height: 4,
        step_cost: 0.05,
        goal_reward: 1.0,
        episode_cap: 40,
    };
    let spaces = spec.spaces();
    let mk_agent = |seed: u64| {
        let arch = ArchConfig {
            obs_dim: spaces.obs_dim,
            torso: vec![8],
            head_hidden: 8,
            heads: 1,
            action_space: spaces.action_space,
        };
        Agent::new(AgentConfig::new(arch, seed))
    };

    // (a) deterministic mode is bit-reproducible.
    let cfg = HarnessConfig {
        batch_size: 4,
        traj_len: 5,
        env_slots: 4,
        actors: 1,
        queue_batches: 2,
        deterministic: true,
        refresh: RefreshPolicy::EveryTrajectory,
        total_env_steps: 800,
        seed: 909,
    };
    let run = || {
        let mut agent = mk_agent(909);
        let summary = run_training(&mut agent, &spec, &cfg, &mut |_| {}).unwrap();
        (summary, agent)
    };
    let (s1, a1) = run();
    let (s2, a2) = run();
    let mut repro = s1.trace_digest == s2.trace_digest && a1.meta.raw == a2.meta.raw;
    for (name, v) in a1.net.params.iter() {
        if v != a2.net.params.get(name).unwrap() {
            repro = false;
        }
    }

    // (b) threaded mode: no trajectory lost and recorded behavior
    // probabilities re-evaluate exactly under the recorded version.
    let agent = mk_agent(910);
    let queue = Arc::new(TrajectoryQueue::new(8));
    let slot = Arc::new(SnapshotSlot::new(agent.snapshot()));
    let retained = Arc::new(Mutex::new(vec![Arc::new(agent.snapshot())]));
    let mut handles = Vec::new();
    for k in 0..3u64 {
        let queue = queue.clone();
        let slot = slot.clone();
        let spec = spec.clone();
        handles.push(std::thread::spawn(move || {
            let env = spec.build(2, 7000 + k);
            let mut actor = Actor::new(env, 8000 + k, 5, RefreshPolicy::EveryTrajectory);
            let provider = move || slot.get();
            loop {
                let out = match actor.unroll(&provider) {
                    Ok(o) => o,
                    Err(_) => break,
                };
                for t in out.trajectories {
                    if queue.push(t).is_err() {
                        return;
                    }
                }
            }
        }));
    }
    // Consumer: publish fresh snapshot versions while draining, retaining
    // every published snapshot for exact re-evaluation.
    let mut consumed = Vec::new();
    let mut learner = mk_agent(910);
    for _ in 0..10 {
        for _ in 0..4 {
            consumed.push(queue.pop().unwrap());
        }
        learner.version += 1;
        let snap = Arc::new(learner.snapshot());
        retained.lock().unwrap().push(snap.clone());
        slot.publish(learner.snapshot());
    }
    queue.close();
    for h in handles {
        h.join().unwrap();
    }
    let stats = queue.stats();
    let accounting_ok = stats.produced == stats.consumed + stats.in_queue as u64;

    let snapshots = retained.lock().unwrap();
    let mut reeval_ok = true;
    let mut positive_ok = true;
    for t in &consumed {
        let snap = &snapshots[t.param_version as usize];
        assert_eq!(snap.version, t.param_version);
        for s in 0..t.len() {
            let lp = snap.log_prob(t.observations.row(s), &t.actions[s]);
            if lp != t.behavior_log_probs()[s] {
                reeval_ok = false;
            }
            if !(t.behavior_log_probs()[s].exp() > 0.0) {
                positive_ok = false;
            }
        }
    }

    let pass = repro && accounting_ok && reeval_ok && positive_ok;
    report(
        9,
        "harness integrity",
        pass,
        &format!(
            "(deterministic repro {repro}; accounting produced {} = consumed {} + queued {}; \
             exact re-evaluation {reeval_ok}; positive probabilities {positive_ok}; {:.1}s)",
            stats.produced,
            stats.consumed,
            stats.in_queue,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_10_initialization_convention() {
    let hp = HyperParams::default();
    let layout = MetaLayout {
        heads: 1,
        single_alpha: true,
    };
    let raw = vec![hp.meta_init; 6];
    let eff = meta_transform(&raw, &layout, &MetaMask::all(), &hp);
    let sigma_ok = (sigmoid(4.6) - 0.990).abs() <= 0.001;
    let gamma_ok = (eff.gamma - 0.990).abs() <= 0.001;
    let gv_expect = sigmoid(4.6) * 0.25;
    let gv_ok = eff.g_v == gv_expect && (eff.g_v - 0.2475).abs() < 5e-5;
    let pass = sigma_ok && gamma_ok && gv_ok;
    report(
        10,
        "initialization convention",
        pass,
        &format!(
            "(sigmoid(4.6) = {:.4}; effective g_v at init = {:.5} = sigmoid(4.6)*0.25)",
            sigmoid(4.6),
            eff.g_v
        ),
    );
    assert!(pass);
}
