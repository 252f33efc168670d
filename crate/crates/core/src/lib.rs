//! Federated feature-disentangling simulator with evidential
//! Dempster-Shafer decision fusion.
//!
//! The library simulates round-based federated training of a
//! shared-encoder / shared-global-head / private-local-head classifier,
//! with subjective-logic opinions fused across the two heads and an
//! uncertainty score attached to every prediction. FedAvg, FedBN and
//! single-set baselines share the same engine through parameter
//! partition tags.
//!
//! Core numeric code is generic over the scalar type: training runs in
//! `f32`, gradient verification replays the same graphs in `f64`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod evidential;
pub mod federation;
pub mod losses;
pub mod model;
pub mod ndtensor;
pub mod scalar;
pub mod specfun;

pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = ndtensor::Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = ndtensor::Tensor<f64>;
pub type Graph32 = ndtensor::Graph<f32>;
pub type Graph64 = ndtensor::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Opinion64 = evidential::Opinion<f64>;
