//! Ground sample distance estimation from oriented vehicle detections.
//!
//! Given the oriented boxes of small vehicles found in one aerial image, the
//! pipeline measures each box's longer side in pixels, drops low-confidence
//! and oversized detections, takes the mode of the remaining lengths with a
//! Gaussian KDE, and divides a calibrated reference vehicle length by it:
//!
//! ```text
//! gsd = l_ref / p_mode            (metres per pixel)
//! ```
//!
//! Each estimate carries a composite confidence with a hard resolution guard
//! so calling agents know when to fall back.
//!
//! Modules:
//! - [`geometry`]: oriented boxes, rotated IoU, NMS
//! - [`ingest`]: DOTA labels, GSD metadata, canonical detection JSON, tiling
//! - [`robust_stats`]: confidence gate, median outlier cut, Scott bandwidth, KDE mode
//! - [`estimator`]: the pipeline and reference-length calibration
//! - [`confidence`]: sub-scores, composite, resolution guard
//! - [`measurement`]: pixel counts and lengths to square metres and metres
//! - [`benchmark`]: relative error, reports, synthetic scenes, ablations
//! - [`toolapi`] and [`server`]: the agent-facing request/response surface

pub mod benchmark;
pub mod confidence;
pub mod estimator;
pub mod geometry;
pub mod ingest;
pub mod measurement;
pub mod robust_stats;
pub mod server;
pub mod toolapi;

pub use confidence::{ConfidenceConfig, ConfidenceReport};
pub use estimator::{
    calibrate_lref, estimate_gsd, Aggregation, CalibrationOptions, CalibrationRecord, CalibrationResult,
    EstimatorConfig, EstimatorPath, GsdEstimate,
};
pub use geometry::{nms_merge, rotated_iou, ObbDetection, ObbPolygon, Point};
pub use ingest::{DetectionSet, DetectionSource, ImageMeta};
pub use robust_stats::{kde_mode, KdeResult, LengthSample};
pub use toolapi::{ToolContext, ToolRequest, ToolResponse};
