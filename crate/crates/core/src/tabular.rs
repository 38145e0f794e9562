//! Exact analysis of the leaky V-trace operator on finite MDPs.
//!
//! The operator is evaluated in closed form. With
//!
//!   C(x,y) = sum_a mu(a|x) c(x,a) P(y|x,a)
//!   q(x)   = sum_a mu(a|x) rho(x,a) [r(x,a) + gamma sum_y P(y|x,a) V(y) - V(x)]
//!
//! where rho and c are the leaky weights evaluated on exact ratios pi/mu,
//! the infinite-horizon expectation collapses to
//!
//!   R V = V + (I - gamma C)^{-1} q,
//!
//! an affine map of V. Its fixed point is the value function of the policy
//! that mixes the truncated-ratio policy with the target policy, and the
//! sup-norm Lipschitz factor is bounded by 1 - (1-gamma)(alpha_rho*beta +
//! 1 - alpha_rho) with beta = min_x sum_a min(rho_bar*mu, pi). Certificates
//! here compute beta exactly and measure the empirical factor on sampled
//! value pairs.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TabularError;

const ROW_SUM_TOL: f64 = 1e-12;

/// Finite MDP with explicit transition tensor `P[x, a, y]` and reward table
/// `r[x, a]`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    pub transitions: Array3<f64>,
    pub rewards: Array2<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(
        transitions: Array3<f64>,
        rewards: Array2<f64>,
        gamma: f64,
    ) -> Result<Self, TabularError> {
        let (s, a, s2) = transitions.dim();
        if s == 0 || a == 0 || s2 != s {
            return Err(TabularError::InvalidMdp(format!(
                "bad transition tensor shape ({s}, {a}, {s2})"
            )));
        }
        if rewards.dim() != (s, a) {
            return Err(TabularError::InvalidMdp(
                "reward table shape must be (states, actions)".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(TabularError::InvalidMdp(format!(
                "gamma {gamma} outside (0,1)"
            )));
        }
        for x in 0..s {
            for act in 0..a {
                let row = transitions.slice(ndarray::s![x, act, ..]);
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
                    return Err(TabularError::InvalidMdp(format!(
                        "P(.|{x},{act}) is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        if !rewards.iter().all(|r| r.is_finite()) {
            return Err(TabularError::InvalidMdp("non-finite reward".into()));
        }
        Ok(TabularMdp {
            states: s,
            actions: a,
            transitions,
            rewards,
            gamma,
        })
    }
}

/// Row-stochastic policy table pi(a|x).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub probs: Array2<f64>,
}

impl PolicyTable {
    pub fn new(probs: Array2<f64>) -> Result<Self, TabularError> {
        for (x, row) in probs.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(TabularError::InvalidPolicy(format!(
                    "row {x} sums to {sum}"
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(TabularError::InvalidPolicy(format!(
                    "row {x} has a negative entry"
                )));
            }
        }
        Ok(PolicyTable { probs })
    }

    /// Skips validation; exists so the divergence guard is testable with
    /// malformed inputs.
    pub fn new_unchecked(probs: Array2<f64>) -> Self {
        PolicyTable { probs }
    }

    pub fn states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn actions(&self) -> usize {
        self.probs.ncols()
    }
}

/// Leak and truncation settings of the operator. The trace factor lambda is
/// part of the trajectory estimator but not of the infinite-horizon operator
/// analysis, so it must be 1 here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorConfig {
    pub rho_bar: f64,
    pub c_bar: f64,
    pub alpha_rho: f64,
    pub alpha_c: f64,
    pub lambda: f64,
}

impl OperatorConfig {
    pub fn new(alpha_rho: f64, alpha_c: f64) -> Result<Self, TabularError> {
        let cfg = OperatorConfig {
            rho_bar: 1.0,
            c_bar: 1.0,
            alpha_rho,
            alpha_c,
            lambda: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return Err(TabularError::InvalidConfig(format!(
                "need rho_bar >= c_bar > 0, got {} and {}",
                self.rho_bar, self.c_bar
            )));
        }
        for (name, a) in [("alpha_rho", self.alpha_rho), ("alpha_c", self.alpha_c)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(TabularError::InvalidConfig(format!(
                    "{name} {a} outside [0,1]"
                )));
            }
        }
        if self.alpha_rho < self.alpha_c {
            return Err(TabularError::InvalidConfig(format!(
                "alpha_rho {} < alpha_c {}",
                self.alpha_rho, self.alpha_c
            )));
        }
        if self.lambda != 1.0 {
            return Err(TabularError::InvalidConfig(
                "operator analysis requires lambda = 1".into(),
            ));
        }
        Ok(())
    }

    fn rho(&self, is: f64) -> f64 {
        self.alpha_rho * is.min(self.rho_bar) + (1.0 - self.alpha_rho) * is
    }

    fn c(&self, is: f64) -> f64 {
        self.alpha_c * is.min(self.c_bar) + (1.0 - self.alpha_c) * is
    }
}

fn check_compatible(
    mdp: &TabularMdp,
    mu: &PolicyTable,
    pi: &PolicyTable,
) -> Result<(), TabularError> {
    if mu.states() != mdp.states
        || pi.states() != mdp.states
        || mu.actions() != mdp.actions
        || pi.actions() != mdp.actions
    {
        return Err(TabularError::InvalidPolicy(
            "policy tables must match the MDP dimensions".into(),
        ));
    }
    for x in 0..mdp.states {
        for a in 0..mdp.actions {
            if pi.probs[(x, a)] > 0.0 && mu.probs[(x, a)] <= 0.0 {
                return Err(TabularError::InvalidPolicy(format!(
                    "mu({a}|{x}) = 0 where pi({a}|{x}) > 0"
                )));
            }
        }
    }
    Ok(())
}

/// The policy whose value function is the operator's fixed point:
/// normalized mixture of the truncated-ratio policy and the target policy.
pub fn mixture_policy(
    pi: &PolicyTable,
    mu: &PolicyTable,
    rho_bar: f64,
    alpha_rho: f64,
) -> Result<PolicyTable, TabularError> {
    if pi.probs.dim() != mu.probs.dim() {
        return Err(TabularError::InvalidPolicy(
            "pi and mu must have the same shape".into(),
        ));
    }
    let (s, a) = pi.probs.dim();
    let mut out = Array2::zeros((s, a));
    for x in 0..s {
        let mut denom = 0.0;
        for b in 0..a {
            denom += alpha_rho * (rho_bar * mu.probs[(x, b)]).min(pi.probs[(x, b)])
                + (1.0 - alpha_rho) * pi.probs[(x, b)];
        }
        for b in 0..a {
            let w = alpha_rho * (rho_bar * mu.probs[(x, b)]).min(pi.probs[(x, b)])
                + (1.0 - alpha_rho) * pi.probs[(x, b)];
            out[(x, b)] = w / denom;
        }
    }
    PolicyTable::new(out)
}

/// Exact policy evaluation by direct linear solve of
/// `(I - gamma P_pi) V = r_pi`.
pub fn exact_value(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Array1<f64>, TabularError> {
    if policy.states() != mdp.states || policy.actions() != mdp.actions {
        return Err(TabularError::InvalidPolicy(
            "policy must match the MDP dimensions".into(),
        ));
    }
    let s = mdp.states;
    let mut p_pi = DMatrix::zeros(s, s);
    let mut r_pi = DVector::zeros(s);
    for x in 0..s {
        for a in 0..mdp.actions {
            let w = policy.probs[(x, a)];
            r_pi[x] += w * mdp.rewards[(x, a)];
            for y in 0..s {
                p_pi[(x, y)] += w * mdp.transitions[(x, a, y)];
            }
        }
    }
    let system = DMatrix::identity(s, s) - &p_pi * mdp.gamma;
    let v = system
        .clone()
        .lu()
        .solve(&r_pi)
        .ok_or(TabularError::Numeric("policy evaluation solve"))?;
    let residual = (&system * &v - &r_pi).amax();
    if residual > 1e-10 {
        return Err(TabularError::Numeric("policy evaluation residual"));
    }
    Ok(Array1::from_iter(v.iter().copied()))
}

/// The operator in affine form `R V = linear * V + offset`.
#[derive(Debug, Clone)]
pub struct OperatorAffine {
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl OperatorAffine {
    pub fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        let vv = DVector::from_iterator(v.len(), v.iter().copied());
        let out = &self.linear * vv + &self.offset;
        Array1::from_iter(out.iter().copied())
    }

    /// Sup-norm gain along one direction.
    pub fn gain(&self, d: &Array1<f64>) -> f64 {
        let dd = DVector::from_iterator(d.len(), d.iter().copied());
        (&self.linear * &dd).amax() / dd.amax()
    }
}

/// Power-iteration estimate of the spectral radius of a nonnegative matrix.
fn spectral_radius_nonneg(m: &DMatrix<f64>) -> f64 {
    let s = m.nrows();
    let mut v = DVector::from_element(s, 1.0);
    let mut radius = 0.0;
    for _ in 0..200 {
        let next = m * &v;
        let norm = next.amax();
        if norm == 0.0 {
            return 0.0;
        }
        radius = norm;
        v = next / norm;
    }
    radius
}

/// Builds the affine form of the operator for the given behavior/target
/// pair. Fails with a divergence error if the discounted trace matrix does
/// not contract.
pub fn operator_affine(
    mdp: &TabularMdp,
    mu: &PolicyTable,
    pi: &PolicyTable,
    cfg: &OperatorConfig,
) -> Result<OperatorAffine, TabularError> {
    cfg.validate()?;
    check_compatible(mdp, mu, pi)?;
    let s = mdp.states;
    let mut c_mat = DMatrix::zeros(s, s);
    let mut q_mat = DMatrix::zeros(s, s);
    let mut d_rho = DVector::zeros(s);
    let mut r_til = DVector::zeros(s);
    for x in 0..s {
        for a in 0..mdp.actions {
            let muv = mu.probs[(x, a)];
            if muv <= 0.0 {
                continue;
            }
            let is = pi.probs[(x, a)] / muv;
            let rho = cfg.rho(is);
            let c = cfg.lambda * cfg.c(is);
            d_rho[x] += muv * rho;
            r_til[x] += muv * rho * mdp.rewards[(x, a)];
            for y in 0..s {
                let p = mdp.transitions[(x, a, y)];
                c_mat[(x, y)] += muv * c * p;
                q_mat[(x, y)] += muv * rho * p;
            }
        }
    }
    let gc = &c_mat * mdp.gamma;
    let radius = spectral_radius_nonneg(&gc);
    if radius >= 1.0 - 1e-12 {
        return Err(TabularError::Divergence { radius });
    }
    let resolvent = (DMatrix::identity(s, s) - gc)
        .lu()
        .try_inverse()
        .ok_or(TabularError::Numeric("trace resolvent"))?;
    // R V = V + resolvent * (r_til + gamma Q V - D V)
    let linear = DMatrix::identity(s, s)
        + &resolvent * (&q_mat * mdp.gamma - DMatrix::from_diagonal(&d_rho));
    let offset = &resolvent * r_til;
    Ok(OperatorAffine { linear, offset })
}

/// One exact application of the operator.
pub fn apply_operator(
    mdp: &TabularMdp,
    mu: &PolicyTable,
    pi: &PolicyTable,
    v: &Array1<f64>,
    cfg: &OperatorConfig,
) -> Result<Array1<f64>, TabularError> {
    if v.len() != mdp.states {
        return Err(TabularError::InvalidMdp(
            "value vector length must equal the state count".into(),
        ));
    }
    Ok(operator_affine(mdp, mu, pi, cfg)?.apply(v))
}

/// Contraction certificate: exact beta, the theoretical modulus bound, and
/// the empirical modulus over sampled value pairs.
#[derive(Debug, Clone, Copy)]
pub struct Certificate {
    pub beta: f64,
    pub bound: f64,
    pub empirical: f64,
}

/// The exact per-state minimum of `E_mu min(rho_bar, pi/mu)`: the tightest
/// constant satisfying the contraction assumption.
pub fn exact_beta(mu: &PolicyTable, pi: &PolicyTable, rho_bar: f64) -> f64 {
    let (s, a) = mu.probs.dim();
    let mut beta = f64::INFINITY;
    for x in 0..s {
        let mut acc = 0.0;
        for b in 0..a {
            acc += (rho_bar * mu.probs[(x, b)]).min(pi.probs[(x, b)]);
        }
        beta = beta.min(acc);
    }
    beta
}

pub fn contraction_modulus_bound(gamma: f64, alpha_rho: f64, beta: f64) -> f64 {
    1.0 - (1.0 - gamma) * (alpha_rho * beta + 1.0 - alpha_rho)
}

pub fn contraction_certificate(
    mdp: &TabularMdp,
    mu: &PolicyTable,
    pi: &PolicyTable,
    cfg: &OperatorConfig,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Certificate, TabularError> {
    let affine = operator_affine(mdp, mu, pi, cfg)?;
    let beta = exact_beta(mu, pi, cfg.rho_bar);
    let bound = contraction_modulus_bound(mdp.gamma, cfg.alpha_rho, beta);
    let mut empirical: f64 = 0.0;
    for _ in 0..pairs {
        let d = Array1::from_shape_fn(mdp.states, |_| {
            rng.gen_range(-1.0..1.0) - rng.gen_range(-1.0..1.0)
        });
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        empirical = empirical.max(affine.gain(&d));
    }
    Ok(Certificate {
        beta,
        bound,
        empirical,
    })
}

/// Iterates the operator and records sup-norm distances to the exact fixed
/// point (the mixture policy's value function).
#[derive(Debug, Clone)]
pub struct FixedPointTrace {
    pub distances: Vec<f64>,
    pub final_v: Array1<f64>,
    pub fixed_point: Array1<f64>,
}

pub fn fixed_point_iterate(
    mdp: &TabularMdp,
    mu: &PolicyTable,
    pi: &PolicyTable,
    cfg: &OperatorConfig,
    v0: Array1<f64>,
    iterations: usize,
) -> Result<FixedPointTrace, TabularError> {
    let affine = operator_affine(mdp, mu, pi, cfg)?;
    let target = exact_value(mdp, &mixture_policy(pi, mu, cfg.rho_bar, cfg.alpha_rho)?)?;
    let sup = |v: &Array1<f64>| -> f64 {
        v.iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
    };
    let mut distances = Vec::with_capacity(iterations + 1);
    let mut v = v0;
    distances.push(sup(&v));
    for _ in 0..iterations {
        v = affine.apply(&v);
        distances.push(sup(&v));
    }
    Ok(FixedPointTrace {
        distances,
        final_v: v,
        fixed_point: target,
    })
}

// ---------------------------------------------------------------------------
// Random instances and verification reports
// ---------------------------------------------------------------------------

/// A complete random verification instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: TabularMdp,
    pub mu: PolicyTable,
    pub pi: PolicyTable,
    pub cfg: OperatorConfig,
}

pub(crate) fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Dirichlet(1) = normalized unit exponentials.
    let draws: Vec<f64> = (0..n)
        .map(|_| -(rng.gen_range(f64::MIN_POSITIVE..1.0).ln()))
        .collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / sum).collect()
}

/// Draws an instance with Dirichlet(1) transition and policy rows, rewards
/// uniform in [-1, 1], and a single leak coefficient alpha_rho = alpha_c
/// (the configuration under which the contraction certificate is valid).
pub fn random_instance(rng: &mut ChaCha8Rng, gamma: f64) -> Instance {
    let states = rng.gen_range(2..=8);
    let actions = rng.gen_range(2..=4);
    let mut transitions = Array3::zeros((states, actions, states));
    for x in 0..states {
        for a in 0..actions {
            let row = dirichlet_row(rng, states);
            for (y, p) in row.into_iter().enumerate() {
                transitions[(x, a, y)] = p;
            }
        }
    }
    let rewards = Array2::from_shape_fn((states, actions), |_| rng.gen_range(-1.0..1.0));
    let policy_rows = |rng: &mut ChaCha8Rng| {
        let mut probs = Array2::zeros((states, actions));
        for x in 0..states {
            let row = dirichlet_row(rng, actions);
            for (a, p) in row.into_iter().enumerate() {
                probs[(x, a)] = p;
            }
        }
        PolicyTable::new(probs).expect("dirichlet rows are stochastic")
    };
    let mu = policy_rows(rng);
    let pi = policy_rows(rng);
    let alpha = rng.gen_range(0.0..1.0);
    Instance {
        mdp: TabularMdp::new(transitions, rewards, gamma).expect("valid draw"),
        mu,
        pi,
        cfg: OperatorConfig::new(alpha, alpha).expect("single alpha is valid"),
    }
}

/// Per-instance verification record, one delimited line per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub id: usize,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub alpha_rho: f64,
    pub alpha_c: f64,
    pub beta: f64,
    pub bound: f64,
    pub empirical: f64,
    pub fixed_point_residual: f64,
    pub iteration_error: f64,
    pub modulus_ok: bool,
    pub residual_ok: bool,
}

impl InstanceReport {
    pub const HEADER: &'static str = "id|states|actions|gamma|alpha_rho|alpha_c|beta|bound|empirical|fp_residual|iter_error|modulus_ok|residual_ok";

    pub fn to_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{:.17e}|{:.17e}|{:.17e}|{:.17e}|{:.17e}|{:.17e}|{:.17e}|{}|{}",
            self.id,
            self.states,
            self.actions,
            self.gamma,
            self.alpha_rho,
            self.alpha_c,
            self.beta,
            self.bound,
            self.empirical,
            self.fixed_point_residual,
            self.iteration_error,
            self.modulus_ok,
            self.residual_ok
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.trim().split('|').collect();
        if parts.len() != 13 {
            return Err(format!("expected 13 fields, got {}", parts.len()));
        }
        let f = |i: usize| -> Result<f64, String> {
            parts[i].parse().map_err(|e| format!("field {i}: {e}"))
        };
        let u = |i: usize| -> Result<usize, String> {
            parts[i].parse().map_err(|e| format!("field {i}: {e}"))
        };
        Ok(InstanceReport {
            id: u(0)?,
            states: u(1)?,
            actions: u(2)?,
            gamma: f(3)?,
            alpha_rho: f(4)?,
            alpha_c: f(5)?,
            beta: f(6)?,
            bound: f(7)?,
            empirical: f(8)?,
            fixed_point_residual: f(9)?,
            iteration_error: f(10)?,
            modulus_ok: parts[11].parse().map_err(|e| format!("field 11: {e}"))?,
            residual_ok: parts[12].parse().map_err(|e| format!("field 12: {e}"))?,
        })
    }
}

/// Runs the certificate and fixed-point checks on one instance.
pub fn verify_instance(
    id: usize,
    inst: &Instance,
    iterations: usize,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InstanceReport, TabularError> {
    let cert = contraction_certificate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, pairs, rng)?;
    let fixed = exact_value(
        &inst.mdp,
        &mixture_policy(&inst.pi, &inst.mu, inst.cfg.rho_bar, inst.cfg.alpha_rho)?,
    )?;
    let applied = apply_operator(&inst.mdp, &inst.mu, &inst.pi, &fixed, &inst.cfg)?;
    let fp_residual = applied
        .iter()
        .zip(fixed.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let v0 = Array1::from_shape_fn(inst.mdp.states, |_| rng.gen_range(-1.0..1.0));
    let trace = fixed_point_iterate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, v0, iterations)?;
    Ok(InstanceReport {
        id,
        states: inst.mdp.states,
        actions: inst.mdp.actions,
        gamma: inst.mdp.gamma,
        alpha_rho: inst.cfg.alpha_rho,
        alpha_c: inst.cfg.alpha_c,
        beta: cert.beta,
        bound: cert.bound,
        empirical: cert.empirical,
        fixed_point_residual: fp_residual,
        iteration_error: *trace.distances.last().unwrap(),
        modulus_ok: cert.empirical <= cert.bound + 1e-12,
        residual_ok: fp_residual < 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn uniform_policy(states: usize, actions: usize) -> PolicyTable {
        PolicyTable::new(Array2::from_elem((states, actions), 1.0 / actions as f64)).unwrap()
    }

    fn instance(seed: u64, gamma: f64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_instance(&mut rng, gamma)
    }

    #[test]
    fn mixture_policy_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = random_instance(&mut rng, 0.9);
        // alpha_rho = 0 collapses to the target policy.
        let mix = mixture_policy(&inst.pi, &inst.mu, 1.0, 0.0).unwrap();
        for (a, b) in mix.probs.iter().zip(inst.pi.probs.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        // alpha_rho = 1 is the truncated-ratio policy.
        let mix = mixture_policy(&inst.pi, &inst.mu, 1.0, 1.0).unwrap();
        for x in 0..inst.mdp.states {
            let mut denom = 0.0;
            for b in 0..inst.mdp.actions {
                denom += inst.mu.probs[(x, b)].min(inst.pi.probs[(x, b)]);
            }
            for b in 0..inst.mdp.actions {
                let expect = inst.mu.probs[(x, b)].min(inst.pi.probs[(x, b)]) / denom;
                assert!((mix.probs[(x, b)] - expect).abs() < 1e-14);
            }
        }
        // pi = mu with rho_bar >= 1: the mixture is pi for every alpha.
        for alpha in [0.0, 0.3, 1.0] {
            let mix = mixture_policy(&inst.mu, &inst.mu, 1.5, alpha).unwrap();
            for (a, b) in mix.probs.iter().zip(inst.mu.probs.iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixture_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 0.99);
            let alpha = rng.gen_range(0.0..1.0);
            let mix = mixture_policy(&inst.pi, &inst.mu, 1.0, alpha).unwrap();
            for row in mix.probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_value_examples() {
        // Zero rewards give zero values.
        let inst = instance(3, 0.9);
        let zero_mdp = TabularMdp::new(
            inst.mdp.transitions.clone(),
            Array2::zeros((inst.mdp.states, inst.mdp.actions)),
            0.9,
        )
        .unwrap();
        let v = exact_value(&zero_mdp, &inst.pi).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-12));

        // Single state, r = 1, gamma = 0.9: V = 10.
        let mdp = TabularMdp::new(
            Array3::from_elem((1, 1, 1), 1.0),
            Array2::from_elem((1, 1), 1.0),
            0.9,
        )
        .unwrap();
        let v = exact_value(&mdp, &uniform_policy(1, 1)).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn exact_value_bellman_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 0.99);
            let v = exact_value(&inst.mdp, &inst.pi).unwrap();
            for x in 0..inst.mdp.states {
                let mut rhs = 0.0;
                for a in 0..inst.mdp.actions {
                    let w = inst.pi.probs[(x, a)];
                    let mut next = 0.0;
                    for y in 0..inst.mdp.states {
                        next += inst.mdp.transitions[(x, a, y)] * v[y];
                    }
                    rhs += w * (inst.mdp.rewards[(x, a)] + inst.mdp.gamma * next);
                }
                assert!((v[x] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn operator_fixed_point_is_mixture_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let gamma = if rng.gen_bool(0.5) { 0.9 } else { 0.99 };
            let inst = random_instance(&mut rng, gamma);
            let vstar = exact_value(
                &inst.mdp,
                &mixture_policy(&inst.pi, &inst.mu, 1.0, inst.cfg.alpha_rho).unwrap(),
            )
            .unwrap();
            let rv = apply_operator(&inst.mdp, &inst.mu, &inst.pi, &vstar, &inst.cfg).unwrap();
            let resid = rv
                .iter()
                .zip(vstar.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(resid < 1e-10, "fixed point residual {resid}");
        }
    }

    #[test]
    fn on_policy_full_truncation_is_policy_evaluation() {
        // pi = mu, alpha = 1: the operator evaluates pi exactly in one
        // application (the trace resolvent sums the whole return).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = random_instance(&mut rng, 0.9);
        let cfg = OperatorConfig::new(1.0, 1.0).unwrap();
        let vpi = exact_value(&inst.mdp, &inst.mu).unwrap();
        let v0 = Array1::from_shape_fn(inst.mdp.states, |_| rng.gen_range(-1.0..1.0));
        let v1 = apply_operator(&inst.mdp, &inst.mu, &inst.mu, &v0, &cfg).unwrap();
        for (a, b) in v1.iter().zip(vpi.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn operator_matches_action_sequence_enumeration() {
        // Horizon-H evaluation over all action sequences with exact state
        // marginalization: for fixed actions a_0..a_t the expectation is a
        // chain of per-action matrices
        //   M_a(x,y) = mu(a|x) c(x,a) P(y|x,a)
        // applied to f_a(y) = mu(a|y) rho(y,a) [r + gamma E V - V](y,a).
        #[allow(clippy::too_many_arguments)]
        fn recurse(
            depth: usize,
            horizon: usize,
            gamma_pow: f64,
            weights: &Array2<f64>,
            m_mats: &[Array2<f64>],
            f_vecs: &[Array1<f64>],
            gamma: f64,
            total: &mut Array1<f64>,
        ) {
            if depth >= horizon {
                return;
            }
            for a in 0..m_mats.len() {
                // Terminate the sequence here: apply f_a at this depth.
                let contrib = weights.dot(&f_vecs[a]);
                for (t, c) in total.iter_mut().zip(contrib.iter()) {
                    *t += gamma_pow * c;
                }
                // Or continue one step deeper through M_a.
                let next = weights.dot(&m_mats[a]);
                recurse(
                    depth + 1,
                    horizon,
                    gamma_pow * gamma,
                    &next,
                    m_mats,
                    f_vecs,
                    gamma,
                    total,
                );
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (states, actions) = (3, 2);
            let mut transitions = Array3::zeros((states, actions, states));
            for x in 0..states {
                for a in 0..actions {
                    let row = dirichlet_row(&mut rng, states);
                    for (y, p) in row.into_iter().enumerate() {
                        transitions[(x, a, y)] = p;
                    }
                }
            }
            let rewards = Array2::from_shape_fn((states, actions), |_| rng.gen_range(-1.0..1.0));
            let mdp = TabularMdp::new(transitions, rewards, 0.9).unwrap();
            let mk_policy = |rng: &mut ChaCha8Rng| {
                let mut probs = Array2::zeros((states, actions));
                for x in 0..states {
                    let row = dirichlet_row(rng, actions);
                    for (a, p) in row.into_iter().enumerate() {
                        probs[(x, a)] = p;
                    }
                }
                PolicyTable::new(probs).unwrap()
            };
            let mu = mk_policy(&mut rng);
            let pi = mk_policy(&mut rng);
            let alpha = rng.gen_range(0.0..1.0);
            let cfg = OperatorConfig::new(alpha, alpha).unwrap();
            let v = Array1::from_shape_fn(states, |_| rng.gen_range(-1.0..1.0));

            let exact = apply_operator(&mdp, &mu, &pi, &v, &cfg).unwrap();

            let mut m_mats = Vec::new();
            let mut f_vecs = Vec::new();
            for a in 0..actions {
                let mut m = Array2::zeros((states, states));
                let mut f = Array1::zeros(states);
                for x in 0..states {
                    let muv = mu.probs[(x, a)];
                    let is = pi.probs[(x, a)] / muv;
                    let c = cfg.c(is);
                    let rho = cfg.rho(is);
                    let mut ev = 0.0;
                    for y in 0..states {
                        m[(x, y)] = muv * c * mdp.transitions[(x, a, y)];
                        ev += mdp.transitions[(x, a, y)] * v[y];
                    }
                    f[x] = muv * rho * (mdp.rewards[(x, a)] + mdp.gamma * ev - v[x]);
                }
                m_mats.push(m);
                f_vecs.push(f);
            }

            let horizon = 12;
            let mut total = v.clone();
            let eye = Array2::eye(states);
            recurse(
                0,
                horizon,
                1.0,
                &eye,
                &m_mats,
                &f_vecs,
                mdp.gamma,
                &mut total,
            );

            // Exact tail bound: sum_{t>=H} gamma^t C^t d with d = E_mu rho |delta|.
            let mut gc = DMatrix::zeros(states, states);
            let mut d_abs = DVector::zeros(states);
            for a in 0..actions {
                for x in 0..states {
                    for y in 0..states {
                        gc[(x, y)] += m_mats[a][(x, y)] * mdp.gamma;
                    }
                    d_abs[x] += f_vecs[a][x].abs();
                }
            }
            let mut tail_vec = d_abs.clone();
            for _ in 0..horizon {
                tail_vec = &gc * tail_vec;
            }
            let resolvent: DMatrix<f64> = (DMatrix::<f64>::identity(states, states) - &gc)
                .lu()
                .try_inverse()
                .unwrap();
            let tail_full: DVector<f64> = &resolvent * &tail_vec;
            let tail: f64 = tail_full.amax();

            for x in 0..states {
                let err = (exact[x] - total[x]).abs();
                assert!(
                    err <= tail + 1e-12,
                    "state {x}: err {err} vs tail bound {tail}"
                );
            }
        }
    }

    #[test]
    fn certificate_corners() {
        let inst = instance(8, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // alpha_rho = 0: bound is exactly gamma.
        let cfg = OperatorConfig::new(0.0, 0.0).unwrap();
        let cert =
            contraction_certificate(&inst.mdp, &inst.mu, &inst.pi, &cfg, 50, &mut rng).unwrap();
        assert_eq!(cert.bound, 0.9);
        // alpha_rho = 1: bound is 1 - (1-gamma) beta.
        let cfg = OperatorConfig::new(1.0, 1.0).unwrap();
        let cert =
            contraction_certificate(&inst.mdp, &inst.mu, &inst.pi, &cfg, 50, &mut rng).unwrap();
        let beta = exact_beta(&inst.mu, &inst.pi, 1.0);
        assert!((cert.bound - (1.0 - 0.1 * beta)).abs() < 1e-15);
    }

    #[test]
    fn certificate_rejects_alpha_rho_below_alpha_c() {
        assert!(matches!(
            OperatorConfig::new(0.3, 0.8),
            Err(TabularError::InvalidConfig(_))
        ));
    }

    #[test]
    fn empirical_modulus_within_bound_for_single_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for k in 0..100 {
            let gamma = if k % 2 == 0 { 0.9 } else { 0.99 };
            let inst = random_instance(&mut rng, gamma);
            let cert =
                contraction_certificate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, 100, &mut rng)
                    .unwrap();
            assert!(
                cert.empirical <= cert.bound + 1e-12,
                "instance {k}: empirical {} vs bound {}",
                cert.empirical,
                cert.bound
            );
        }
    }

    #[test]
    fn strict_leak_ordering_can_exceed_the_bound() {
        // With strictly more leak on the trace side (alpha_c < alpha_rho and
        // truncation active) the pointwise weight ordering rho >= c fails,
        // and the measured sup-norm gain can exceed the certified bound.
        // The certificate is therefore only claimed for alpha_rho = alpha_c.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut violations = 0;
        for _ in 0..60 {
            let inst = random_instance(&mut rng, 0.99);
            let cfg = OperatorConfig {
                alpha_rho: 1.0,
                alpha_c: 0.3,
                ..inst.cfg
            };
            let cert =
                match contraction_certificate(&inst.mdp, &inst.mu, &inst.pi, &cfg, 100, &mut rng)
                {
                    Ok(c) => c,
                    Err(_) => continue,
                };
            if cert.empirical > cert.bound + 1e-9 {
                violations += 1;
            }
        }
        assert!(
            violations > 0,
            "expected at least one measured violation under strict ordering"
        );
    }

    #[test]
    fn iteration_respects_geometric_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let gamma = if rng.gen_bool(0.5) { 0.9 } else { 0.99 };
            let inst = random_instance(&mut rng, gamma);
            let beta = exact_beta(&inst.mu, &inst.pi, 1.0);
            let bound = contraction_modulus_bound(gamma, inst.cfg.alpha_rho, beta);
            let v0 = Array1::from_shape_fn(inst.mdp.states, |_| rng.gen_range(-1.0..1.0));
            let trace =
                fixed_point_iterate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, v0, 80).unwrap();
            let d0 = trace.distances[0];
            for (k, d) in trace.distances.iter().enumerate() {
                assert!(
                    *d <= bound.powi(k as i32) * d0 + 1e-9,
                    "k={k}: {d} vs envelope {}",
                    bound.powi(k as i32) * d0
                );
            }
        }
    }

    #[test]
    fn iteration_from_fixed_point_stays_there() {
        let inst = instance(13, 0.99);
        let vstar = exact_value(
            &inst.mdp,
            &mixture_policy(&inst.pi, &inst.mu, 1.0, inst.cfg.alpha_rho).unwrap(),
        )
        .unwrap();
        let trace =
            fixed_point_iterate(&inst.mdp, &inst.mu, &inst.pi, &inst.cfg, vstar, 20).unwrap();
        assert!(trace.distances.iter().all(|&d| d < 1e-10));
    }

    #[test]
    fn pure_importance_sampling_fixes_target_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inst = random_instance(&mut rng, 0.99);
        let cfg = OperatorConfig::new(0.0, 0.0).unwrap();
        let vpi = exact_value(&inst.mdp, &inst.pi).unwrap();
        let v0 = Array1::from_shape_fn(inst.mdp.states, |_| rng.gen_range(-1.0..1.0));
        let trace = fixed_point_iterate(&inst.mdp, &inst.mu, &inst.pi, &cfg, v0, 5).unwrap();
        let err = trace
            .final_v
            .iter()
            .zip(vpi.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-8, "pure importance sampling fixed point error {err}");
    }

    #[test]
    fn divergence_guard_rejects_inflated_target_weights() {
        let inst = instance(15, 0.99);
        // An unnormalized "policy" with rows summing to 3 inflates the
        // untruncated ratios enough that the trace matrix stops contracting.
        let bogus = PolicyTable::new_unchecked(inst.pi.probs.mapv(|p| p * 3.0));
        let cfg = OperatorConfig::new(0.1, 0.1).unwrap();
        let v = Array1::zeros(inst.mdp.states);
        let err = apply_operator(&inst.mdp, &inst.mu, &bogus, &v, &cfg);
        assert!(matches!(err, Err(TabularError::Divergence { .. })));
    }

    #[test]
    fn report_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inst = random_instance(&mut rng, 0.9);
        let report = verify_instance(7, &inst, 50, 20, &mut rng).unwrap();
        let line = report.to_line();
        let parsed = InstanceReport::parse(&line).unwrap();
        assert_eq!(report, parsed);
        assert!(report.modulus_ok && report.residual_ok);
    }
}
