//! Auditable, agent-driven search over time-series model configurations.

pub mod audit;
pub mod banks;
pub mod controller;
pub mod executor;
pub mod hashing;
pub mod llm;
pub mod metrics;
pub mod planner;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod task;

pub use scalar::Real;

pub type Frame = task::TimeSeriesFrame<f64>;
pub type Frame32 = task::TimeSeriesFrame<f32>;
pub type Split = task::DatasetSplit<f64>;
