//! Cost-aware federation of object-detection services.
//!
//! A trace records, for every image, a feature vector and the raw output of
//! each provider. Labels are normalized through a grouping table, the selected
//! providers' detections are merged by a voting ensemble, and a learned policy
//! picks a provider subset per image to trade accuracy against cost.

pub mod agent;
pub mod baselines;
pub mod detection;
pub mod ensemble;
pub mod env;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod grouping;
pub mod nn;
pub mod plot;
pub mod report;
pub mod synth;
pub mod trace;

pub use detection::{box_area, iou, BBox, BoxFormat, Detection, ImagePrediction, RawDetection};
pub use exec::Execution;
