//! Nested and deployment-oriented cross-validation over a hyperparameter
//! grid, with resumable distributed training tasks.

pub mod checkpoint;
pub mod hpspace;
pub mod manifest;
pub mod partition;
pub mod scheduler;
pub mod synth;
pub mod trainer;
pub mod engine;
