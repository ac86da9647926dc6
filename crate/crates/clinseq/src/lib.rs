//! Autoregressive modeling of clinical event sequences at desk scale.
//!
//! A patient history is a sequence of composite tokens (`LAB:HBA1C:Q4`,
//! `MED:DIURETIC:FUROSEMIDE`, `DX:HEART_FAILURE`, ...) paired with
//! inter-event gaps in days. This crate trains a small causal decoder over
//! such sequences and evaluates it two ways: trajectory fidelity against
//! held-out continuations, and recovery of known pharmacological effects
//! through forced-intervention counterfactual generation on synthetic
//! cohorts with planted ground truth.
//!
//! The crate is self-contained: it carries its own dense-tensor
//! reverse-mode autodiff engine ([`numerics`]), the decoder and its losses
//! ([`model`]), the training loop with free-running scheduled sampling
//! ([`trainer`]), constrained samplers ([`generator`]), n-gram reference
//! baselines ([`baselines`]), a trajectory-fidelity metric suite
//! ([`metrics`]), association statistics built around an incident-user
//! difference-in-differences design ([`stats`]), a synthetic cohort
//! generator with a planted-effect ledger ([`synth`]), and a reproducible
//! CLI harness ([`harness`]).
//!
//! Start with the `examples/` directory: each file is a runnable
//! demonstration of one capability, end to end, on a small cohort.

pub mod baselines;
pub mod cohort;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
