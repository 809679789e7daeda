//! Desk-scale simulator for one-way federated knowledge distillation.
//!
//! A central generator and student learn from frozen per-node teacher
//! models through input-space distillation (confidence + diversity on
//! generated samples) and output-space distillation (importance-weighted
//! logit aggregation), with FedAvg / standalone / centralized baselines,
//! Dirichlet-heterogeneous partitioning, simulated-channel byte accounting,
//! a clip-and-noise payload sanitizer, and segmentation/generation metrics.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nets;
pub mod privacy;
pub mod runner;
pub mod svg;
pub mod tensor;

pub use error::{Error, Result};
