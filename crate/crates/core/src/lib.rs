//! Operator-level training-time prediction for transformer models trained
//! with pipeline, tensor and data parallelism.

pub mod benchkit;
pub mod cli;
pub mod config;
pub mod partition;
pub mod predict;
pub mod regress;
pub mod report;
pub mod timeline;
pub mod workload;
