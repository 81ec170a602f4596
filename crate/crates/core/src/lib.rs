//! Weakly-supervised whole-slide classification at desk scale.
//!
//! The library implements a two-stage pipeline over synthetic multi-resolution
//! slides: an attention-based multiple-instance-learning model detects
//! suspicious tiles at low magnification, attention-guided clustering selects
//! tiles for the second stage, and a second model grades the selected regions
//! at higher magnification. Everything is deterministic given a seed and every
//! stage communicates through documented file formats.

pub mod features;
pub mod metrics;
pub mod milcore;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod selector;
pub mod stainlab;
pub mod synthgen;
pub mod tiler;
