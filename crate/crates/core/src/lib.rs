//! Pseudo segmentation labels from bounding boxes and dense features, and a
//! noise-aware loss for training a segmentation head on them.
//!
//! The pipeline has three stages:
//!
//! 1. [`bgattn`] + [`clshead`]: background attention inside boxes, background-aware
//!    pooling and an `(L+1)`-way classifier trained on the pooled features.
//! 2. [`crf`] + [`pseudolabel`]: CAM/attention unaries refined by a dense CRF
//!    (`Y_crf`), prototype retrieval (`Y_ret`), and their fusion.
//! 3. [`nal`]: cosine segmentation head trained with the noise-aware loss.
//!
//! [`metrics`] scores label maps, [`synth`] generates a self-contained corpus and
//! [`pipeline`] wires the stages together over directories.

pub mod bgattn;
pub mod clshead;
pub mod crf;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nal;
pub mod pipeline;
pub mod pseudolabel;
pub mod resample;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use geometry::{build_background_mask, resize_boxes, BBox, BackgroundMask, BoxSet};
pub use types::{
    AttentionMap, ConfidenceMap, FeatureMap, LabelMap, MarginalStack, Plane, RgbImage, Stack,
    UnaryStack, IGNORE,
};
