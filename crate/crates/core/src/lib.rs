//! Pedestrian localization in overhead depth frames.
//!
//! A window slides over the height field derived from each depth frame; its
//! oriented-gradient descriptor, extended with a histogram of the window's
//! heights, is scored by a small perceptron. High-scoring window centers are
//! thinned by non-maximum suppression into pedestrian positions.
//!
//! The crate also carries the complete-linkage clustering baseline, a
//! synthetic scene generator, the training and hard-mining pipeline, and the
//! density-binned evaluation harness.

pub mod cluster;
pub mod depth;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod mlp;
pub mod synth;
pub mod training;

pub use depth::{Calibration, DepthFrame, HeightField, Point};
pub use detector::{Candidate, DetectionSet, DetectorConfig};
pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureMethod};
pub use mlp::{InferenceMlp, Mlp};
