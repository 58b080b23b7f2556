//! Semantic neural LiDAR fields: range-image projection, 4D feature fields
//! with a local range-image encoder, volume rendering of depth, intensity,
//! ray drop and semantics, training and evaluation.
//!
//! The usual flow is [`dataset_io::assemble_scene`] (or
//! [`dataset_io::synth_scene`]), [`neural_field::LidarField::new`],
//! [`training::fit`] and [`training::evaluate`].

pub mod config;
pub mod dataset_io;
pub mod error;
pub mod feature_fields;
pub mod lidar_model;
pub mod metrics;
pub mod model_io;
pub mod neural_field;
pub mod semantic_encoder;
pub mod training;

pub use error::{Error, Result};
