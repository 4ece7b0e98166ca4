//! Desk-scale simulator for federating low-rank adapters over a frozen
//! character-level transformer.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Backbone64 = model::Backbone<f64>;
pub type Backbone32 = model::Backbone<f32>;
pub type LoraAdapter64 = lora::LoraAdapter<f64>;
pub type LoraAdapter32 = lora::LoraAdapter<f32>;
pub type Params64 = federation::Params<f64>;
pub type Params32 = federation::Params<f32>;
