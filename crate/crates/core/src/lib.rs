//! Distributionally robust training against adversarial label shift.
//!
//! The model player minimises an importance-weighted loss while an adversary
//! picks label weights `π` inside a KL ball around the training label
//! marginal, updated by a closed-form proximal mirror-ascent step. The crate
//! also ships the reweighting baselines, the worst-case label-shift
//! evaluator, and brute-force-checkable diagnostics.

pub mod adversary;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod projection;
pub mod rng;
pub mod simplex;
pub mod trainer;

pub use adversary::{AdversaryConfig, AdversaryState};
pub use data::{Dataset, SynthConfig};
pub use error::{Error, Result};
pub use evaluator::{ErrorProfile, ShiftCurve, ShiftPoint};
pub use model::{Architecture, Example, ModelParams};
pub use simplex::LabelDistribution;
pub use trainer::{Method, TrainConfig, TrainHistory};
