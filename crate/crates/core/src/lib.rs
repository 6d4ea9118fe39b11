//! Query-budgeted black-box evasion against malware detectors.
//!
//! The crate models an Android application abstractly ([`corpus::ApkModel`]),
//! builds an additive perturbation catalog from framework documentation and
//! benign donor apps ([`perturbset`]), organises it into a probability-weighted
//! selection tree ([`pstree`]) and drives label/confidence oracles
//! ([`detectors`]) with a feedback-adjusted search loop ([`attack`]).
//! [`harness`] runs the whole thing as a seeded, reproducible benchmark.

pub mod attack;
pub mod corpus;
pub mod detectors;
pub mod error;
pub mod features;
pub mod harness;
pub mod parallel;
pub mod perturbset;
pub mod pstree;
pub mod rng;

pub use error::{Error, Result};
