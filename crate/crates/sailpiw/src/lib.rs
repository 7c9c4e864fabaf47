//! Incremental training engine for graph-based implicit-feedback
//! recommenders. A frozen teacher model from the previous time block
//! regularizes the student trained on the newest block, and each user's
//! distillation strength is modulated by a learned imitation weight driven
//! by how far that user's interest distribution has shifted.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod piw;
pub mod report;
pub mod seeds;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
