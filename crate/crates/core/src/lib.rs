//! Active learning of dynamical systems with Gaussian processes, focused on
//! a user-chosen region of the joint state-input space.
//!
//! The library learns the unknown part of a discrete-time system
//! `x+ = f(x, u) + g(x, u) + w` online: a per-output-dimension GP models `g`,
//! an information score ranks where in the region a new measurement would
//! help most, and a sampling-based model-predictive planner drives the system
//! toward that point. A greedy entropy-seeking baseline, a set of benchmark
//! systems, bound diagnostics for the information gathered per planning step,
//! and a reproducible experiment harness round out the toolkit.

pub mod diag;
pub mod error;
pub mod explore;
pub mod gp;
pub mod harness;
pub mod info;
pub mod kernel;
pub mod mpc;
pub mod record;
pub mod region;
pub mod rng;
pub mod systems;
pub mod types;

pub use diag::{run_diagnostics, theorem_bound, BoundInputs, DiagRow};
pub use error::{Error, Result};
pub use explore::{entropy_run, local_run, ExploreConfig, RunFailure, RunResult};
pub use gp::{GpModel, MultiGp, TrainConfig, TrainReport};
pub use harness::{parse_config, run_experiment, ExperimentConfig, ExperimentReport};
pub use info::{most_informative_point, CandidateScore, MiScorer, SearchConfig};
pub use kernel::KernelParams;
pub use mpc::{mpc_solve, CemConfig, MpcConfig, MpcSolution, QPolicy};
pub use record::{RunRecord, Strategy};
pub use region::RegionOfInterest;
pub use systems::{SystemSpec, SYSTEM_NAMES};
pub use types::{AugmentedState, BoxBounds};
