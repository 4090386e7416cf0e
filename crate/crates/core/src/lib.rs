//! Desk-scale LoRA mixture-of-experts with adaptive shared experts (ASE)
//! for multi-task learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation
//!   and a finite-difference gradient oracle,
//! - [`moe`]: LoRA experts, routers, and the three gating variants
//!   (baseline sparse, naive shared, adaptive shared),
//! - [`losses`]: task losses plus the task/expert mutual-information
//!   routing regularizer,
//! - [`model`]: the multi-task model (frozen backbone, per-task routers,
//!   embeddings, heads) and parameter accounting,
//! - [`data`]: a deterministic synthetic multi-task dataset generator,
//! - [`metrics`]: the delta-m multi-task metric and expert-activation
//!   telemetry,
//! - [`config`] / [`harness`]: the config-driven experiment runner.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the harness and the type aliases below use `f64`.

pub mod config;
pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod scalar;
pub mod tensor;
pub(crate) mod util;

/// Default scalar type for experiments.
pub type Elem = f64;

pub type Tensor = tensor::Tensor<Elem>;
pub type Graph = tensor::Graph<Elem>;
pub type LoraExpert = moe::LoraExpert<Elem>;
pub type Router = moe::Router<Elem>;
pub type GatingDecision = moe::GatingDecision<Elem>;
pub type MoeLayer = moe::MoeLayer<Elem>;
pub type RoutingStats = losses::RoutingStats<Elem>;
pub type MultiTaskModel = model::MultiTaskModel<Elem>;
pub type StlModel = model::StlModel<Elem>;
pub type TeacherModel = data::TeacherModel<Elem>;
pub type Dataset = data::Dataset<Elem>;
