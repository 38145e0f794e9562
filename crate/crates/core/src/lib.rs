//! Self-tuning actor-critic engine.
//!
//! The crate bundles four layers: a reverse-mode differentiation core with
//! the optimizers used by the inner and meta loops ([`diffcore`]), leaky
//! V-trace target computation ([`vtrace`]) and the differentiable losses
//! built on it ([`losses`]), the self-tuning agent itself ([`agent`]), an
//! exact tabular analysis of the leaky V-trace operator ([`tabular`]), and a
//! simulated actor-learner pipeline with desk-scale environments
//! ([`harness`]).

pub mod agent;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod losses;
pub mod tabular;
pub mod vtrace;
