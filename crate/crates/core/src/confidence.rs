//! Composite confidence for a GSD estimate, with the hard resolution guard.
//!
//! Four sub-scores in [0, 1] are combined with fixed weights
//! (sufficiency 0.35, concentration 0.35, quality 0.20, anomaly 0.10). When the
//! modal pixel length falls below `l_ref / gsd_max` the vehicles are too small
//! to measure reliably, and the composite is clamped to at most 0.3.

use serde::{Deserialize, Serialize};

use crate::robust_stats::{mean, median, sample_std};

pub const WEIGHT_SUFFICIENCY: f64 = 0.35;
pub const WEIGHT_CONCENTRATION: f64 = 0.35;
pub const WEIGHT_QUALITY: f64 = 0.20;
pub const WEIGHT_ANOMALY: f64 = 0.10;

/// Tunable sub-score shapes. Defaults are the production settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    /// Coarsest GSD (m/px) at which vehicles are still measurable.
    pub gsd_max: f64,
    /// Ceiling applied to the composite when the guard trips.
    pub guard_ceiling: f64,
    /// Detection count at which sufficiency saturates.
    pub sufficiency_saturation: f64,
    /// Coefficient of variation at which concentration reaches zero.
    pub cv_ceiling: f64,
    /// Plausible GSD window (m/px) for the anomaly check.
    pub plausible_gsd: (f64, f64),
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            gsd_max: 0.3,
            guard_ceiling: 0.3,
            sufficiency_saturation: 20.0,
            cv_ceiling: 0.5,
            plausible_gsd: (0.01, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub s_sufficiency: f64,
    pub s_concentration: f64,
    pub s_quality: f64,
    pub s_anomaly: f64,
    pub c_raw: f64,
    pub c_final: f64,
    pub guard_triggered: bool,
    pub p_thresh: f64,
}

impl ConfidenceReport {
    /// Report for an image with nothing to measure.
    pub fn zero(l_ref: f64, config: &ConfidenceConfig) -> Self {
        Self {
            s_sufficiency: 0.0,
            s_concentration: 0.0,
            s_quality: 0.0,
            s_anomaly: 0.0,
            c_raw: 0.0,
            c_final: 0.0,
            guard_triggered: false,
            p_thresh: pixel_threshold(l_ref, config.gsd_max),
        }
    }
}

pub fn pixel_threshold(l_ref: f64, gsd_max: f64) -> f64 {
    l_ref / gsd_max
}

/// Whether a modal pixel length is too short to trust.
pub fn guard_triggered(p_mode: f64, l_ref: f64, gsd_max: f64) -> bool {
    p_mode < pixel_threshold(l_ref, gsd_max)
}

pub fn weighted_composite(s_sufficiency: f64, s_concentration: f64, s_quality: f64, s_anomaly: f64) -> f64 {
    WEIGHT_SUFFICIENCY * s_sufficiency
        + WEIGHT_CONCENTRATION * s_concentration
        + WEIGHT_QUALITY * s_quality
        + WEIGHT_ANOMALY * s_anomaly
}

fn coefficient_of_variation(lengths: &[f64]) -> f64 {
    match (sample_std(lengths), mean(lengths)) {
        (Some(sd), Some(m)) if m > 0.0 => sd / m,
        _ => 0.0,
    }
}

/// Scores one estimate from its filtered pixel lengths and the matching
/// detector confidences.
pub fn score_confidence(
    filtered_lengths: &[f64],
    detection_confs: &[f64],
    p_mode: f64,
    l_ref: f64,
    config: &ConfidenceConfig,
) -> ConfidenceReport {
    let n = filtered_lengths.len() as f64;
    let s_sufficiency = (n / config.sufficiency_saturation).min(1.0);

    let cv = coefficient_of_variation(filtered_lengths);
    let s_concentration = (1.0 - cv / config.cv_ceiling).clamp(0.0, 1.0);

    let s_quality = median(detection_confs).unwrap_or(0.0).clamp(0.0, 1.0);

    let gsd = l_ref / p_mode;
    let (lo, hi) = config.plausible_gsd;
    let s_anomaly = if gsd.is_finite() && (lo..=hi).contains(&gsd) {
        1.0
    } else {
        0.0
    };

    let c_raw = weighted_composite(s_sufficiency, s_concentration, s_quality, s_anomaly);
    let guard = guard_triggered(p_mode, l_ref, config.gsd_max);
    let c_final = if guard { c_raw.min(config.guard_ceiling) } else { c_raw };

    ConfidenceReport {
        s_sufficiency,
        s_concentration,
        s_quality,
        s_anomaly,
        c_raw,
        c_final,
        guard_triggered: guard,
        p_thresh: pixel_threshold(l_ref, config.gsd_max),
    }
}
