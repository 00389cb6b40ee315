//! Diversity-oriented generative data augmentation for few-shot image
//! classification.
//!
//! The crate is organised around the stages of the augmentation pipeline:
//!
//! * [`model`]: dataset manifests, feature tables, pipeline configuration and
//!   their on-disk formats.
//! * [`embeddings`]: learned class concept vectors and their Gaussian-noise
//!   variants.
//! * [`prompts`]: the class prompt grammar, LLM instruction building and
//!   response parsing, plus a deterministic grammar-based generator.
//! * [`backends`]: text-to-image and text-to-text clients, the feature-space
//!   mock backend and the augmentation loop.
//! * [`weighting`]: linear probe, temperature scaling, confidence scores and
//!   the real/synthetic sampling distribution.
//! * [`metrics`]: improved precision and recall over kNN sphere manifolds.

pub mod backends;
pub mod embeddings;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod seed;
pub mod weighting;

pub use model::{
    DatasetManifest, FeatureTable, PipelineConfig, RealImageRecord, SyntheticImageRecord,
};
