//! Certified multi-phase least-squares value iteration (Cert-LSVI-UCB) for
//! misspecified linear MDPs.
//!
//! The crate is organised bottom-up:
//!
//! * [`env`] generates synthetic linear MDPs, injects a controlled amount of
//!   misspecification and samples episodes.
//! * [`oracle`] solves the resulting tabular MDP exactly and scores policies.
//! * [`agent`] implements the learner: phase-indexed ridge regressions,
//!   local quantization and the certified action-elimination subroutine.
//! * [`harness`] sweeps misspecification levels, seeds and ablations, and
//!   writes per-episode and summary CSVs.

pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod seeding;

pub use error::{Error, Result};
