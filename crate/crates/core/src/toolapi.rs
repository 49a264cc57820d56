//! Agent-facing request/response handling.
//!
//! Requests carry detections (inline or by file path) plus optional config
//! overrides; responses carry the GSD, the final confidence, and a
//! recommended action. Handlers are pure functions of the request and the
//! calibration loaded at startup.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::confidence::ConfidenceReport;
use crate::estimator::{estimate_gsd, Aggregation, CalibrationRecord, EstimatorConfig, EstimatorPath, GsdEstimate};
use crate::ingest::{detection_set_from_value, read_detection_file, to_canonical_string, DetectionSet, IngestError};
use crate::measurement::AreaMeasurement;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Confidence below which callers should not act on the estimate.
pub const TRUST_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendedAction {
    Trust,
    Fallback,
}

impl RecommendedAction {
    pub fn for_confidence(confidence: f64) -> Self {
        if confidence < TRUST_THRESHOLD {
            RecommendedAction::Fallback
        } else {
            RecommendedAction::Trust
        }
    }
}

/// Read-only state shared by every request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToolContext {
    pub calibration: CalibrationRecord,
}

impl ToolContext {
    pub fn new(calibration: CalibrationRecord) -> Self {
        Self { calibration }
    }

    pub fn base_config(&self) -> EstimatorConfig {
        EstimatorConfig::with_l_ref(self.calibration.l_ref)
    }
}

/// Optional overrides on top of the calibrated defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub min_conf: Option<f64>,
    /// `Some(None)` disables the outlier cut (JSON `null`).
    #[serde(default, with = "double_option")]
    pub alpha: Option<Option<f64>>,
    pub fallback_n: Option<usize>,
    pub weighted_kde: Option<bool>,
    pub gsd_max: Option<f64>,
    pub aggregation: Option<Aggregation>,
}

mod double_option {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Option<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(inner) => inner.serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<f64>>, D::Error> {
        Option::<f64>::deserialize(d).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectionInput {
    Inline(DetectionSet),
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolRequest {
    pub detections: DetectionInput,
    pub pixel_count: Option<u64>,
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub report: ConfidenceReport,
    pub n_raw: usize,
    pub n_confident: usize,
    pub n_filtered: usize,
    pub p_mode: Option<f64>,
    pub l_ref: f64,
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub image_id: String,
    pub gsd_pred: Option<f64>,
    pub confidence: f64,
    pub guard_triggered: bool,
    pub path: EstimatorPath,
    pub recommended_action: RecommendedAction,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<AreaMeasurement>,
}

impl ToolResponse {
    pub fn from_estimate(image_id: impl Into<String>, est: &GsdEstimate) -> Self {
        let confidence = est.confidence.c_final;
        Self {
            image_id: image_id.into(),
            gsd_pred: est.gsd_pred,
            confidence,
            guard_triggered: est.confidence.guard_triggered,
            path: est.path,
            recommended_action: RecommendedAction::for_confidence(confidence),
            diagnostics: Diagnostics {
                report: est.confidence,
                n_raw: est.n_raw,
                n_confident: est.n_confident,
                n_filtered: est.n_filtered,
                p_mode: est.p_mode,
                l_ref: est.l_ref,
                bandwidth: est.bandwidth,
            },
            area: None,
        }
    }

    pub fn to_json(&self) -> String {
        to_canonical_string(&serde_json::to_value(self).unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidJson,
    SchemaViolation,
    NotFound,
    Internal,
}

/// Structured failure returned to callers instead of a crash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ToolError {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: ErrorCode::SchemaViolation,
            message: message.into(),
            field: Some(field.into()),
        }
    }

    /// HTTP-style status class for the error.
    pub fn status(&self) -> u16 {
        match self.code {
            ErrorCode::InvalidJson | ErrorCode::SchemaViolation => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::Internal => 500,
        }
    }

    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("error".into(), serde_json::to_value(self).unwrap_or_default());
        to_canonical_string(&Value::Object(m))
    }
}

impl std::fmt::Display for ToolError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{}: {}", field, self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl From<IngestError> for ToolError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Schema { field, reason } => ToolError::schema(format!("detections.{field}"), reason),
            IngestError::Json(msg) => ToolError {
                code: ErrorCode::InvalidJson,
                message: msg,
                field: None,
            },
            IngestError::Io { .. } | IngestError::Encoding { .. } => ToolError {
                code: ErrorCode::NotFound,
                message: e.to_string(),
                field: Some("detections_path".into()),
            },
            IngestError::Tiling(msg) => ToolError {
                code: ErrorCode::SchemaViolation,
                message: msg,
                field: None,
            },
        }
    }
}

/// Validates a request body.
pub fn parse_request(body: &str) -> Result<ToolRequest, ToolError> {
    let value: Value = serde_json::from_str(body).map_err(|e| ToolError {
        code: ErrorCode::InvalidJson,
        message: e.to_string(),
        field: None,
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| ToolError::schema("$", "expected an object"))?;
    if let Some(extra) = obj
        .keys()
        .find(|k| !["detections", "detections_path", "pixel_count", "config"].contains(&k.as_str()))
    {
        return Err(ToolError::schema(extra.as_str(), "unknown field"));
    }

    let detections = match (obj.get("detections"), obj.get("detections_path")) {
        (Some(inline), None) => DetectionInput::Inline(detection_set_from_value(inline)?),
        (None, Some(path)) => DetectionInput::File(
            path.as_str()
                .ok_or_else(|| ToolError::schema("detections_path", "expected a string"))?
                .to_string(),
        ),
        (Some(_), Some(_)) => {
            return Err(ToolError::schema(
                "detections",
                "give exactly one of detections / detections_path",
            ))
        }
        (None, None) => return Err(ToolError::schema("detections", "missing required field")),
    };

    let pixel_count = match obj.get("pixel_count") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| ToolError::schema("pixel_count", "expected a non-negative integer"))?,
        ),
    };

    let overrides = match obj.get("config") {
        None | Some(Value::Null) => ConfigOverrides::default(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| ToolError::schema("config", e.to_string()))?,
    };

    Ok(ToolRequest {
        detections,
        pixel_count,
        overrides,
    })
}

fn apply_overrides(mut cfg: EstimatorConfig, o: &ConfigOverrides) -> Result<EstimatorConfig, ToolError> {
    if let Some(m) = o.min_conf {
        if !(0.0..=1.0).contains(&m) {
            return Err(ToolError::schema("config.min_conf", "must lie in [0, 1]"));
        }
        cfg.min_conf = m;
    }
    if let Some(alpha) = o.alpha {
        if let Some(a) = alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(ToolError::schema("config.alpha", "must be positive or null"));
            }
        }
        cfg.alpha = alpha;
    }
    if let Some(n) = o.fallback_n {
        if n == 0 {
            return Err(ToolError::schema("config.fallback_n", "must be at least 1"));
        }
        cfg.fallback_n = n;
    }
    if let Some(w) = o.weighted_kde {
        cfg.weighted_kde = w;
    }
    if let Some(g) = o.gsd_max {
        if !(g.is_finite() && g > 0.0) {
            return Err(ToolError::schema("config.gsd_max", "must be positive"));
        }
        cfg.confidence.gsd_max = g;
    }
    if let Some(a) = o.aggregation {
        cfg.aggregation = a;
    }
    Ok(cfg)
}

fn resolve_detections(input: &DetectionInput) -> Result<DetectionSet, ToolError> {
    match input {
        DetectionInput::Inline(set) => Ok(set.clone()),
        DetectionInput::File(path) => Ok(read_detection_file(Path::new(path))?),
    }
}

pub fn handle_estimate(request: &ToolRequest, ctx: &ToolContext) -> Result<ToolResponse, ToolError> {
    let cfg = apply_overrides(ctx.base_config(), &request.overrides)?;
    let set = resolve_detections(&request.detections)?;
    let est = estimate_gsd(&set, &cfg);
    let mut response = ToolResponse::from_estimate(set.image_id.clone(), &est);
    if let (Some(count), Some(gsd)) = (request.pixel_count, est.gsd_pred) {
        response.area = AreaMeasurement::new(count, gsd, response.confidence).ok();
    }
    Ok(response)
}

/// Like [`handle_estimate`] but requires a pixel count.
pub fn handle_area(request: &ToolRequest, ctx: &ToolContext) -> Result<ToolResponse, ToolError> {
    if request.pixel_count.is_none() {
        return Err(ToolError::schema("pixel_count", "required for area requests"));
    }
    handle_estimate(request, ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Estimate,
    Area,
}

/// Body-in, body-out entry point: returns an HTTP-style status and a
/// canonical JSON document.
pub fn handle_body(endpoint: Endpoint, body: &str, ctx: &ToolContext) -> (u16, String) {
    let result = parse_request(body).and_then(|req| match endpoint {
        Endpoint::Estimate => handle_estimate(&req, ctx),
        Endpoint::Area => handle_area(&req, ctx),
    });
    match result {
        Ok(resp) => (200, resp.to_json()),
        Err(err) => (err.status(), err.to_json()),
    }
}

pub fn health_json(ctx: &ToolContext) -> String {
    let mut m = Map::new();
    m.insert("l_ref".into(), serde_json::json!(ctx.calibration.l_ref));
    m.insert("n_instances".into(), Value::from(ctx.calibration.n_instances));
    m.insert("status".into(), Value::from("ok"));
    m.insert("version".into(), Value::from(VERSION));
    to_canonical_string(&Value::Object(m))
}
