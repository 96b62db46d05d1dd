//! Referring change detection.
//!
//! A text-conditioned bitemporal change detector ([`rcdnet`]), a latent
//! diffusion generator of synthetic post-change images and masks
//! ([`rcdgen`]), and the semantic/binary change-detection metric stack
//! ([`metrics`]), tied together by dataset ingestion ([`data`]) and batch
//! tasks ([`tasks`]).
//!
//! All network and diffusion math is generic over [`Scalar`] (`f32`/`f64`);
//! the aliases below fix the common choices.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rcdgen;
pub mod rcdnet;
pub mod scalar;
pub mod scan;
pub mod tasks;
pub mod tensor;
pub mod textcond;

pub use domain::{
    BinaryChangeMap, ClassVocabulary, LogitMap, RasterImage, RasterPair, SemanticLabelMap,
};
pub use error::{RcdError, Result};
pub use metrics::{ConfusionState, MetricReport};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use textcond::{StubEmbedder, TextEmbedder, TextEmbedding};

pub type RcdNet32 = rcdnet::RcdNet<f32>;
pub type RcdNet64 = rcdnet::RcdNet<f64>;
pub type TinyDenoiser32 = rcdgen::TinyDenoiser<f32>;
pub type TinyDenoiser64 = rcdgen::TinyDenoiser<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type LogitMap32 = domain::LogitMap<f32>;
pub type LogitMap64 = domain::LogitMap<f64>;
