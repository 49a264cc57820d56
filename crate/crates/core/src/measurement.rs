//! Pixel-to-metric conversion with a GSD estimate.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{read_utf8, IngestError};

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("gsd must be positive and finite, got {0}")]
    InvalidGsd(f64),
    #[error("pixel length must be non-negative and finite, got {0}")]
    InvalidLength(f64),
    #[error("line {line}: expected \"image_id object_id pixel_count\"")]
    MalformedRecord { line: usize },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn check_gsd(gsd: f64) -> Result<(), MeasurementError> {
    if gsd.is_finite() && gsd > 0.0 {
        Ok(())
    } else {
        Err(MeasurementError::InvalidGsd(gsd))
    }
}

/// Area in square metres: `pixel_count * gsd^2`.
pub fn area_from_pixels(pixel_count: u64, gsd: f64) -> Result<f64, MeasurementError> {
    check_gsd(gsd)?;
    Ok(pixel_count as f64 * (gsd * gsd))
}

/// Length in metres: `pixel_length * gsd`.
pub fn length_from_pixels(pixel_length: f64, gsd: f64) -> Result<f64, MeasurementError> {
    check_gsd(gsd)?;
    if !(pixel_length.is_finite() && pixel_length >= 0.0) {
        return Err(MeasurementError::InvalidLength(pixel_length));
    }
    Ok(pixel_length * gsd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaMeasurement {
    pub pixel_count: u64,
    pub gsd: f64,
    pub area: f64,
    /// Confidence of the GSD estimate the area was derived from.
    pub confidence_passthrough: f64,
}

impl AreaMeasurement {
    pub fn new(pixel_count: u64, gsd: f64, confidence: f64) -> Result<Self, MeasurementError> {
        Ok(Self {
            pixel_count,
            gsd,
            area: area_from_pixels(pixel_count, gsd)?,
            confidence_passthrough: confidence,
        })
    }
}

/// One line of a mask pixel-count file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCountRecord {
    pub image_id: String,
    pub object_id: String,
    pub pixel_count: u64,
}

/// Parses `image_id object_id pixel_count` lines. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_pixel_counts(text: &str) -> Result<Vec<PixelCountRecord>, MeasurementError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [image_id, object_id, count] = fields[..] else {
            return Err(MeasurementError::MalformedRecord { line: i + 1 });
        };
        let pixel_count = count
            .parse()
            .map_err(|_| MeasurementError::MalformedRecord { line: i + 1 })?;
        out.push(PixelCountRecord {
            image_id: image_id.to_string(),
            object_id: object_id.to_string(),
            pixel_count,
        });
    }
    Ok(out)
}

pub fn read_pixel_counts(path: &Path) -> Result<Vec<PixelCountRecord>, MeasurementError> {
    parse_pixel_counts(&read_utf8(path)?)
}
