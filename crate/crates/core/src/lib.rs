//! Post-CNN half of a deep-attribute pipeline.
//!
//! Regional neural codes (one row per region proposal) are aggregated into
//! holistic image vectors by cross-region pooling, classified with
//! one-vs-rest linear SVMs, refined with context-aware region selection, and
//! evaluated with classification and retrieval protocols.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pin the common `f64` instantiation.

pub mod carr;
pub mod dataio;
pub mod error;
pub mod evalx;
pub mod geometry;
pub mod linclass;
pub mod pipeline;
pub mod pooling;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CodeMatrix = pooling::CodeMatrix<f64>;
pub type CodeMatrix32 = pooling::CodeMatrix<f32>;
pub type PooledFeature = pooling::PooledFeature<f64>;
pub type PooledFeature32 = pooling::PooledFeature<f32>;
pub type LinearModel = linclass::LinearModel<f64>;
pub type LinearModel32 = linclass::LinearModel<f32>;
pub type CarrStage = carr::CarrStage<f64>;
pub type CarrEnsemble = carr::CarrEnsemble<f64>;
pub type CarrEnsemble32 = carr::CarrEnsemble<f32>;
pub type ImageRecord = dataio::ImageRecord<f64>;
pub type ImageRecord32 = dataio::ImageRecord<f32>;
pub type RetrievalIndex = evalx::RetrievalIndex<f64>;
