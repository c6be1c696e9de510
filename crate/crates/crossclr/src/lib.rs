//! Cross-modal contrastive representation learning at desk scale: loss
//! kernels with influence-based negative pruning and sample weighting, a
//! paired memory queue, a toy two-tower trainer, synthetic paired datasets,
//! and retrieval evaluation.

pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod influence;
pub mod losses;
pub mod queue;
pub mod trainer;

pub use error::{Error, Result};
