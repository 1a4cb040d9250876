//! Domain adaptation under structured missingness.
//!
//! Features are either observed or replaced by zero; source and target domains
//! differ only in their per-feature missingness rates. The crate provides the
//! distribution-level corruption/recovery/transport maps, moment estimators,
//! a closed-form least-squares adaptation, a model-agnostic filtering
//! adaptation, data generators and an experiment harness.

pub mod error;
pub mod rng;
pub mod table;
pub mod distributions;
pub mod moments;
pub mod linalg;
pub mod adaptation;
pub mod datagen;
pub mod harness;
pub mod cli;

pub use error::{DamsError, Result};
pub use table::{LabeledTable, UnlabeledTable};
pub use distributions::{DiscreteJoint, MissRates, RelMiss};
pub use adaptation::{LinearModel, Method};
