//! Model evidence and Bayes factors for coupled hidden Markov models whose
//! chains interact only through summary statistics.
//!
//! The crate provides a generic model contract ([`model::CoupledHmm`]), the
//! individual FFBS Gibbs kernel, the DIFFBS and MIFFBS importance proposals
//! over hidden trajectories, an exact joint-state filter for small blocks,
//! a particle filter baseline, and the discrete-time SIR family used for
//! pen transmission experiments.

pub mod error;
pub mod evidence;
pub mod io;
pub mod iffbs;
pub mod math;
pub mod mcmc;
pub mod model;
pub mod oracle;
pub mod pf;
pub mod proposals;
pub mod rng;
pub mod simulate;
pub mod sir;

pub use error::{Error, Result};
pub use model::{
    compute_summaries, log_complete_density, CoupledHmm, HiddenTrajectories, ModelFamily,
    ObservationGrid, StateSpace, SummaryStatistics, Symbol,
};
