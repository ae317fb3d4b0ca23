//! Modified policy iteration for exponential-cost (risk-sensitive) average-cost
//! Markov decision processes.
//!
//! The pipeline is: build or load an [`MdpModel`], apply the aperiodicity
//! [`transform`], then run [`mpi::run_mpi`] (or its approximate variant in
//! [`approx`]). The [`oracles`] module provides exact Perron-Frobenius
//! evaluation and brute-force enumeration to check the results.

pub mod approx;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod mpi;
pub mod operators;
pub mod oracles;
pub mod transform;

pub use approx::{run_approx_mpi, ApproxConfig};
pub use error::{Error, Result};
pub use model::{generate_random, DeterministicPolicy, MdpModel, RiskParams};
pub use mpi::{run_mpi, solve, MSchedule, MpiConfig, MpiTrace, SolveResult};
pub use operators::{PositiveValueVector, TieBreak};
pub use oracles::{brute_force_optimal, evaluate_policy, PerronConfig};
pub use transform::{forward_cost, invert_cost, transform, TransformedMdp};
