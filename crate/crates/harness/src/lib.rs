//! Demonstration generation, two-phase training, evaluation and ablations
//! for the cubic bimanual policy.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pool;
pub mod train;

pub use checkpoint::{Checkpoint, Phase};
pub use config::RunConfig;
pub use dataset::Dataset;
pub use error::{HarnessError, Result};
pub use eval::{EvalReport, Policy};
