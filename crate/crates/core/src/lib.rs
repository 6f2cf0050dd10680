//! Desk-scale vision-language pre-training with multi-level alignment.
//!
//! A synthetic corpus stands in for detector and parser output. Captions,
//! phrase concepts, object tags and region features feed separate textual
//! and visual encoders plus a multi-modal encoder, trained in two stages with
//! concept recovery, contrastive, grounding, matching and masked-token
//! objectives. Everything numeric is generic over [`scalar::Scalar`]; `f32`
//! is the training precision and `f64` the test precision.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod inputs;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod trainer;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type Graph64 = nn::Graph<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Model32 = encoders::Model<f32>;
pub type Model64 = encoders::Model<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
