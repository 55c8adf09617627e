//! Cross-view geo-localization pipeline.
//!
//! Matches ground-level street photos against a satellite image gallery,
//! with drone imagery bridging the viewpoint gap through reconstructed 3D
//! scene features. The crate provides the full desk-scale pipeline:
//!
//! - dataset scanning and scene grouping ([`data`])
//! - deterministic pseudo-label expansion of the street pool ([`grem`])
//! - a weight-sharing image encoder ([`backbone`])
//! - patch-aware feature aggregation and baseline heads ([`aggregation`])
//! - multi-scale 3D scene features from drone groups ([`bridge3d`])
//! - contrastive losses over all view pairs ([`losses`])
//! - training with augmentation, warmup + cosine schedule ([`trainer`], [`augment`])
//! - retrieval evaluation with flip/rotation test-time augmentation and
//!   ablation suites ([`evaluator`])
//!
//! Everything is CPU-only `f64` and deterministic for a fixed seed; the
//! autodiff tape lives in [`graph`].

pub mod aggregation;
pub mod augment;
pub mod backbone;
pub mod bridge3d;
pub(crate) mod bytes;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod grem;
pub mod imageio;
pub mod losses;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
