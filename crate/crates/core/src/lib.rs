//! Context-fused, taxonomy-aware fine-grained classification.
//!
//! An ROI crop and square context crops at 3×, 5× and full-image scale are
//! embedded by patch transformers; per-scale cross-attention stacks fuse the
//! context into the ROI embedding, and auxiliary per-rank heads shape the
//! fused embedding along the taxonomy. Everything numeric is generic over
//! [`scalar::Scalar`] (`f32` or `f64`); the aliases below fix the common cases.

pub mod cli_config;
pub mod dataio;
pub mod model;
pub mod roi_context;
pub mod scalar;
pub mod seed;
pub mod synthdata;
pub mod taxonomy;
pub mod train_eval;

pub type Matanet32 = model::Matanet<f32>;
pub type Matanet64 = model::Matanet<f64>;
pub type Image32 = roi_context::Image<f32>;
pub type Image64 = roi_context::Image<f64>;
pub type ContextSet32 = roi_context::ContextSet<f32>;
pub type ContextSet64 = roi_context::ContextSet<f64>;
pub type TrainedModel32 = train_eval::TrainedModel<f32>;
pub type TrainedModel64 = train_eval::TrainedModel<f64>;
