//! Event-driven surrogate optimization of expensive black-box functions.
//!
//! The crate is organized around a strategy/controller split: strategies
//! decide what to evaluate next (SRBF/DYCORS candidate search over an RBF
//! surrogate, or BO acquisitions over a GP), controllers own the workers and
//! the evaluation records. A deterministic simulated-time controller replays
//! stochastic evaluation-time distributions for benchmarking serial, batch
//! synchronous, and asynchronous execution.

pub mod aux;
pub mod controller;
pub mod design;
pub mod error;
pub mod gp;
pub mod harness;
pub mod problem;
pub mod rbf;
pub mod strategy;

pub use error::{Error, Result};
pub use problem::{Point, ProblemSpec};
