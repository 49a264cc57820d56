//! The estimation pipeline and reference-length calibration.
//!
//! `estimate_gsd` runs: confidence gate, longer-side extraction, median
//! outlier cut, modal length (KDE, or median below `fallback_n` survivors),
//! `gsd = l_ref / p_mode`, then confidence scoring. Every input produces an
//! estimate; images with nothing left after filtering come back with
//! `path = no_detections` and zero confidence.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::confidence::{score_confidence, ConfidenceConfig, ConfidenceReport};
use crate::ingest::{canonical_number, to_canonical_string, DetectionSet, ImageMeta};
use crate::robust_stats::{
    filter_outliers, kde_mode_with, mean, median, outlier_keep_mask, KdeOptions, KdeResult, LengthSample, StatsError,
    DEFAULT_MIN_CONFIDENCE, DEFAULT_OUTLIER_FACTOR,
};

pub const DEFAULT_L_REF: f64 = 5.045;
pub const DEFAULT_FALLBACK_N: usize = 5;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no usable annotations: need at least one ground-truth vehicle in an image with known GSD")]
    NoUsableAnnotations,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid calibration document: {0}")]
    Calibration(String),
}

/// Statistic used for the modal length once enough detections survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Kde,
    Median,
    Mean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Kde => "kde",
            Aggregation::Median => "median",
            Aggregation::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Reference vehicle length in metres.
    pub l_ref: f64,
    pub min_conf: f64,
    /// Outlier factor; `None` disables the cut.
    pub alpha: Option<f64>,
    pub fallback_n: usize,
    pub weighted_kde: bool,
    pub aggregation: Aggregation,
    pub kde: KdeOptionsConfig,
    pub confidence: ConfidenceConfig,
}

/// Serializable mirror of [`KdeOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeOptionsConfig {
    pub grid_points: usize,
    pub bandwidth: Option<f64>,
}

impl From<KdeOptionsConfig> for KdeOptions {
    fn from(c: KdeOptionsConfig) -> Self {
        KdeOptions {
            grid_points: c.grid_points,
            bandwidth: c.bandwidth,
        }
    }
}

impl Default for KdeOptionsConfig {
    fn default() -> Self {
        let d = KdeOptions::default();
        Self {
            grid_points: d.grid_points,
            bandwidth: d.bandwidth,
        }
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::with_l_ref(DEFAULT_L_REF)
    }
}

impl EstimatorConfig {
    pub fn with_l_ref(l_ref: f64) -> Self {
        Self {
            l_ref,
            min_conf: DEFAULT_MIN_CONFIDENCE,
            alpha: Some(DEFAULT_OUTLIER_FACTOR),
            fallback_n: DEFAULT_FALLBACK_N,
            weighted_kde: false,
            aggregation: Aggregation::Kde,
            kde: KdeOptionsConfig::default(),
            confidence: ConfidenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorPath {
    Kde,
    MedianFallback,
    NoDetections,
}

impl EstimatorPath {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorPath::Kde => "kde",
            EstimatorPath::MedianFallback => "median_fallback",
            EstimatorPath::NoDetections => "no_detections",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsdEstimate {
    pub gsd_pred: Option<f64>,
    pub p_mode: Option<f64>,
    pub l_ref: f64,
    /// Detections received.
    pub n_raw: usize,
    /// Detections passing the confidence gate.
    pub n_confident: usize,
    /// Detections surviving the outlier cut.
    pub n_filtered: usize,
    pub path: EstimatorPath,
    pub bandwidth: Option<f64>,
    pub confidence: ConfidenceReport,
}

/// Runs the full pipeline on one image.
pub fn estimate_gsd(detections: &DetectionSet, config: &EstimatorConfig) -> GsdEstimate {
    let confident: Vec<_> = detections
        .detections
        .iter()
        .filter(|d| d.confidence >= config.min_conf)
        .collect();
    let lengths: Vec<f64> = confident.iter().map(|d| d.longer_side()).collect();
    let confs: Vec<f64> = confident.iter().map(|d| d.confidence).collect();

    let (lengths, confs) = match config.alpha {
        Some(alpha) => {
            let mask = outlier_keep_mask(&lengths, alpha);
            let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(&mask).filter_map(|(&x, &k)| k.then_some(x)).collect() };
            (keep(&lengths), keep(&confs))
        }
        None => (lengths, confs),
    };

    let n_filtered = lengths.len();
    let mut estimate = GsdEstimate {
        gsd_pred: None,
        p_mode: None,
        l_ref: config.l_ref,
        n_raw: detections.len(),
        n_confident: confident.len(),
        n_filtered,
        path: EstimatorPath::NoDetections,
        bandwidth: None,
        confidence: ConfidenceReport::zero(config.l_ref, &config.confidence),
    };
    if n_filtered == 0 {
        return estimate;
    }

    let (path, p_mode, bandwidth) = if n_filtered >= config.fallback_n.max(1) {
        let (p, h) = primary_mode(&lengths, &confs, config);
        (EstimatorPath::Kde, p, h)
    } else {
        (
            EstimatorPath::MedianFallback,
            median(&lengths).unwrap_or(lengths[0]),
            None,
        )
    };

    estimate.path = path;
    estimate.p_mode = Some(p_mode);
    estimate.bandwidth = bandwidth;
    estimate.gsd_pred = Some(config.l_ref / p_mode);
    estimate.confidence = score_confidence(&lengths, &confs, p_mode, config.l_ref, &config.confidence);
    estimate
}

fn primary_mode(lengths: &[f64], confs: &[f64], config: &EstimatorConfig) -> (f64, Option<f64>) {
    match config.aggregation {
        Aggregation::Median => (median(lengths).unwrap_or(lengths[0]), None),
        Aggregation::Mean => (mean(lengths).unwrap_or(lengths[0]), None),
        Aggregation::Kde => {
            let unweighted = || LengthSample::new(lengths.to_vec());
            let sample = if config.weighted_kde {
                LengthSample::weighted(lengths.to_vec(), confs.to_vec()).or_else(|_| unweighted())
            } else {
                unweighted()
            };
            // Longer sides of validated polygons are positive and finite, so
            // the sample and the KDE cannot fail; the median keeps the
            // no-error contract if they ever do.
            match sample.and_then(|s| kde_mode_with(&s, &config.kde.into())) {
                Ok(r) => (r.mode, Some(r.bandwidth)),
                Err(_) => (median(lengths).unwrap_or(lengths[0]), None),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CalibrationOptions {
    /// Apply the inference-time outlier cut per image before pooling.
    pub outlier_factor: Option<f64>,
    pub kde: KdeOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub l_ref: f64,
    pub n_instances: usize,
    /// KDE over physical lengths, in metres.
    pub kde: KdeResult,
}

impl CalibrationResult {
    /// Audit document: `{"bandwidth", "l_ref", "n_instances"}`.
    pub fn to_json(&self) -> String {
        CalibrationRecord::from(self).to_json()
    }
}

/// Persisted form of a calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub l_ref: f64,
    pub n_instances: u64,
    pub bandwidth: f64,
}

impl From<&CalibrationResult> for CalibrationRecord {
    fn from(c: &CalibrationResult) -> Self {
        Self {
            l_ref: c.l_ref,
            n_instances: c.n_instances as u64,
            bandwidth: c.kde.bandwidth,
        }
    }
}

impl CalibrationRecord {
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("bandwidth".into(), canonical_number(self.bandwidth));
        m.insert("l_ref".into(), canonical_number(self.l_ref));
        m.insert("n_instances".into(), Value::from(self.n_instances));
        to_canonical_string(&Value::Object(m))
    }

    pub fn from_json(text: &str) -> Result<Self, EstimatorError> {
        let record: CalibrationRecord =
            serde_json::from_str(text).map_err(|e| EstimatorError::Calibration(e.to_string()))?;
        if !(record.l_ref.is_finite() && record.l_ref > 0.0) {
            return Err(EstimatorError::Calibration("l_ref must be positive".into()));
        }
        if record.n_instances == 0 {
            return Err(EstimatorError::Calibration("n_instances must be at least 1".into()));
        }
        Ok(record)
    }
}

/// Physical lengths `longer_side * gsd` for every annotation in images with
/// known GSD.
pub fn physical_lengths(annotated: &[(DetectionSet, ImageMeta)], outlier_factor: Option<f64>) -> Vec<f64> {
    annotated
        .iter()
        .filter_map(|(set, meta)| meta.gsd_gt.map(|g| (set, g)))
        .flat_map(|(set, gsd)| {
            let px: Vec<f64> = set.detections.iter().map(|d| d.longer_side()).collect();
            let px = match outlier_factor {
                Some(alpha) => filter_outliers(&px, alpha),
                None => px,
            };
            px.into_iter().map(move |p| p * gsd)
        })
        .collect()
}

/// Reference length as the KDE mode of pooled physical vehicle lengths.
pub fn calibrate_lref(
    annotated: &[(DetectionSet, ImageMeta)],
    opts: &CalibrationOptions,
) -> Result<CalibrationResult, EstimatorError> {
    let lengths = physical_lengths(annotated, opts.outlier_factor);
    if lengths.is_empty() {
        return Err(EstimatorError::NoUsableAnnotations);
    }
    let n_instances = lengths.len();
    let kde = kde_mode_with(&LengthSample::new(lengths)?, &opts.kde)?;
    Ok(CalibrationResult {
        l_ref: kde.mode,
        n_instances,
        kde,
    })
}
