//! Learned one-step propagators for dissipative evolution equations.
//!
//! This crate trains operator networks to reproduce a single implicit
//! time step (backward Euler or Crank–Nicolson) of one-dimensional
//! dissipative PDEs — reaction–diffusion, Allen–Cahn, Cahn–Hilliard,
//! and a scaled kinetic transport equation — and then rolls the learned
//! step forward in time. A fast transfer step refits only the final
//! linear layer of the network at selected rollout steps, which keeps
//! long rollouts close to the reference solution at a fraction of the
//! cost of retraining.
//!
//! Layer map, bottom up:
//!
//! * [`tensor`], [`sparse`], [`tape`] — small dense/sparse matrix types
//!   and a reverse-mode differentiation tape;
//! * [`mlp`], [`adam`] — gated fully-connected networks and the
//!   optimizer;
//! * [`equation`], [`stepper`] — the model problems, their discrete
//!   spatial operators, and reference implicit steppers;
//! * [`grf`] — Gaussian random field initial data and training sets;
//! * [`deeponet`], [`loss`], [`train`] — the operator network, the
//!   physics-informed single-step losses, and the training loop;
//! * [`transfer`], [`rollout`], [`metrics`] — last-layer refits, rollout
//!   drivers, and error reports;
//! * [`harness`], [`study`] — the perturbation-growth bound harness and
//!   time-accuracy studies;
//! * [`io`], [`config`], [`pipeline`] — binary/CSV formats, run
//!   configuration, and end-to-end commands.

pub mod adam;
pub mod config;
pub mod deeponet;
pub mod equation;
pub mod error;
pub mod grf;
pub mod harness;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod mlp;
pub mod rollout;
pub mod sparse;
pub mod stepper;
pub mod study;
pub mod tape;
pub mod tensor;
pub mod transfer;
pub mod train;

pub use adam::TrainSchedule;
pub use error::{Error, Result};
