//! Hierarchical cross-modal transformer for RGB-D salient object detection.
//!
//! The crate is generic over the element type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases at the bottom of this file fix it to `f64`,
//! which is what training and gradient checks use.

pub mod attention;
pub mod config;
pub mod dcm;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fpt;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod scalar;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::HctModel;
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type HctModel64 = model::HctModel<f64>;
pub type HctModel32 = model::HctModel<f32>;
