//! Readers and writers for detection sets.
//!
//! Three inputs are understood: DOTA-style text annotations (read only), GSD
//! metadata lines, and the canonical detection JSON interchange document. The
//! JSON writer is canonical: sorted keys, floats rounded to nine significant
//! digits, trailing newline. Identical sets always serialise to identical bytes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{GeometryError, ObbDetection, ObbPolygon};

pub const DEFAULT_CATEGORY: &str = "small-vehicle";
pub const DEFAULT_TILE_SIZE: u32 = 1024;
pub const DEFAULT_TILE_OVERLAP: u32 = 200;
/// Detections may overshoot the image by this fraction of the larger dimension.
pub const DEFAULT_BOUNDS_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    Encoding { path: String },
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("schema violation at \"{field}\": {reason}")]
    Schema { field: String, reason: String },
    #[error("invalid tiling request: {0}")]
    Tiling(String),
}

impl IngestError {
    fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        IngestError::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Offending field for schema errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            IngestError::Schema { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    GroundTruth,
    Detector,
}

impl DetectionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionSource::GroundTruth => "ground_truth",
            DetectionSource::Detector => "detector",
        }
    }
}

impl fmt::Display for DetectionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All detections for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub source: DetectionSource,
    pub detections: Vec<ObbDetection>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32, source: DetectionSource) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            source,
            detections: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Whether `polygon` lies inside the image grown by `margin_frac` of the
    /// larger dimension on every side.
    pub fn within_bounds(&self, polygon: &ObbPolygon, margin_frac: f64) -> bool {
        let margin = margin_frac * f64::from(self.width.max(self.height));
        let (x0, y0, x1, y1) = polygon.bounds();
        x0 >= -margin && y0 >= -margin && x1 <= f64::from(self.width) + margin && y1 <= f64::from(self.height) + margin
    }
}

/// Ground-truth metadata for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub gsd_gt: Option<f64>,
}

/// Options for reading a DOTA label file.
#[derive(Debug, Clone)]
pub struct DotaOptions {
    pub image_id: String,
    pub category: String,
    /// Image size when known; otherwise inferred from the polygon extents.
    pub image_size: Option<(u32, u32)>,
    /// Keep only objects whose difficulty flag is at most this value.
    pub max_difficulty: Option<u32>,
}

impl Default for DotaOptions {
    fn default() -> Self {
        Self {
            image_id: String::new(),
            category: DEFAULT_CATEGORY.to_string(),
            image_size: None,
            max_difficulty: None,
        }
    }
}

/// Result of parsing one DOTA label document.
#[derive(Debug, Clone, PartialEq)]
pub struct DotaAnnotation {
    pub set: DetectionSet,
    /// Non-header lines that could not be turned into a valid object.
    pub skipped_lines: usize,
    /// GSD from a `gsd:` header line, when the file carries one.
    pub gsd_header: Option<f64>,
}

/// Parses DOTA text, keeping objects of `opts.category` as ground truth
/// detections with confidence 1.0.
pub fn parse_dota_annotation(text: &str, opts: &DotaOptions) -> DotaAnnotation {
    let mut detections = Vec::new();
    let mut skipped = 0usize;
    let mut gsd_header = None;
    let mut header_seen = false;

    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("imagesource:") {
            continue;
        }
        if line.starts_with("gsd:") {
            if !header_seen {
                gsd_header = parse_gsd_value(line);
                header_seen = true;
            }
            continue;
        }
        match parse_dota_line(line) {
            Some(obj) => {
                if obj.category != opts.category {
                    continue;
                }
                if let (Some(max), Some(d)) = (opts.max_difficulty, obj.difficulty) {
                    if d > max {
                        continue;
                    }
                }
                match ObbPolygon::from_array(obj.corners) {
                    Ok(poly) => detections.push(ObbDetection::new(poly, 1.0, obj.category)),
                    Err(_) => skipped += 1,
                }
            }
            None => skipped += 1,
        }
    }

    let (width, height) = opts.image_size.unwrap_or_else(|| extent_of(&detections));
    let mut set = DetectionSet::new(opts.image_id.clone(), width, height, DetectionSource::GroundTruth);
    if opts.image_size.is_some() {
        let before = detections.len();
        detections.retain(|d| set.within_bounds(&d.polygon, DEFAULT_BOUNDS_MARGIN));
        skipped += before - detections.len();
    }
    set.detections = detections;
    DotaAnnotation {
        set,
        skipped_lines: skipped,
        gsd_header,
    }
}

/// Reads a DOTA label file from disk. The image id defaults to the file stem.
pub fn read_dota_file(path: &Path, opts: &DotaOptions) -> Result<DotaAnnotation, IngestError> {
    let text = read_utf8(path)?;
    let mut opts = opts.clone();
    if opts.image_id.is_empty() {
        opts.image_id = file_stem(path);
    }
    Ok(parse_dota_annotation(&text, &opts))
}

struct DotaObject {
    corners: [[f64; 2]; 4],
    category: String,
    difficulty: Option<u32>,
}

fn parse_dota_line(line: &str) -> Option<DotaObject> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 9 && tokens.len() != 10 {
        return None;
    }
    let mut coords = [0.0f64; 8];
    for (slot, tok) in coords.iter_mut().zip(&tokens[..8]) {
        let v: f64 = tok.parse().ok()?;
        if !v.is_finite() {
            return None;
        }
        *slot = v;
    }
    let difficulty = match tokens.get(9) {
        Some(tok) => Some(tok.parse().ok()?),
        None => None,
    };
    Some(DotaObject {
        corners: [
            [coords[0], coords[1]],
            [coords[2], coords[3]],
            [coords[4], coords[5]],
            [coords[6], coords[7]],
        ],
        category: tokens[8].to_string(),
        difficulty,
    })
}

fn extent_of(detections: &[ObbDetection]) -> (u32, u32) {
    let (mx, my) = detections.iter().fold((1.0f64, 1.0f64), |(mx, my), d| {
        let (_, _, x1, y1) = d.polygon.bounds();
        (mx.max(x1), my.max(y1))
    });
    (
        mx.ceil().min(f64::from(u32::MAX)) as u32,
        my.ceil().min(f64::from(u32::MAX)) as u32,
    )
}

fn parse_gsd_value(line: &str) -> Option<f64> {
    let value = line.strip_prefix("gsd:")?.trim();
    if value.eq_ignore_ascii_case("null") {
        return None;
    }
    value.parse::<f64>().ok().filter(|g| g.is_finite() && *g > 0.0)
}

/// Extracts the first `gsd:` line. Missing, `null`, or unusable values all
/// map to an absent GSD.
pub fn parse_gsd_meta(image_id: &str, text: &str) -> ImageMeta {
    let gsd_gt = text
        .lines()
        .map(str::trim)
        .find(|l| l.starts_with("gsd:"))
        .and_then(parse_gsd_value);
    ImageMeta {
        image_id: image_id.to_string(),
        gsd_gt,
    }
}

pub fn read_gsd_meta_file(path: &Path) -> Result<ImageMeta, IngestError> {
    let text = read_utf8(path)?;
    Ok(parse_gsd_meta(&file_stem(path), &text))
}

pub(crate) fn read_utf8(path: &Path) -> Result<String, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|_| IngestError::Encoding {
        path: path.display().to_string(),
    })
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Canonical JSON

/// Rounds to nine significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub(crate) fn canonical_number(x: f64) -> Value {
    serde_json::Number::from_f64(round_sig9(x))
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

/// Rewrites every float in `value` to nine significant digits and rebuilds
/// objects with sorted keys.
pub fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => canonical_number(n.as_f64().unwrap_or(0.0)),
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        other => other.clone(),
    }
}

/// Serialises any value with the canonical rules, newline-terminated.
pub fn to_canonical_string(value: &Value) -> String {
    let mut s = serde_json::to_string(&canonicalize(value)).unwrap_or_else(|_| "null".to_string());
    s.push('\n');
    s
}

pub fn detection_set_to_value(set: &DetectionSet) -> Value {
    let detections: Vec<Value> = set
        .detections
        .iter()
        .map(|d| {
            let mut m = Map::new();
            m.insert("conf".into(), canonical_number(d.confidence));
            m.insert("label".into(), Value::String(d.label.clone()));
            m.insert(
                "poly".into(),
                Value::Array(
                    d.polygon
                        .to_array()
                        .iter()
                        .map(|[x, y]| Value::Array(vec![canonical_number(*x), canonical_number(*y)]))
                        .collect(),
                ),
            );
            Value::Object(m)
        })
        .collect();
    let mut m = Map::new();
    m.insert("detections".into(), Value::Array(detections));
    m.insert("height".into(), Value::from(set.height));
    m.insert("image_id".into(), Value::String(set.image_id.clone()));
    m.insert("source".into(), Value::String(set.source.as_str().into()));
    m.insert("width".into(), Value::from(set.width));
    Value::Object(m)
}

pub fn write_detection_json(set: &DetectionSet) -> String {
    to_canonical_string(&detection_set_to_value(set))
}

pub fn read_detection_json(document: &str) -> Result<DetectionSet, IngestError> {
    let value: Value = serde_json::from_str(document).map_err(|e| IngestError::Json(e.to_string()))?;
    detection_set_from_value(&value)
}

pub fn read_detection_file(path: &Path) -> Result<DetectionSet, IngestError> {
    read_detection_json(&read_utf8(path)?)
}

/// Validates a parsed detection document against the interchange schema.
pub fn detection_set_from_value(value: &Value) -> Result<DetectionSet, IngestError> {
    let obj = value
        .as_object()
        .ok_or_else(|| IngestError::schema("$", "expected an object"))?;
    const KNOWN: [&str; 5] = ["detections", "height", "image_id", "source", "width"];
    if let Some(extra) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(IngestError::schema(extra.as_str(), "unknown field"));
    }

    let image_id = required(obj, "image_id", "")?
        .as_str()
        .ok_or_else(|| IngestError::schema("image_id", "expected a string"))?
        .to_string();
    let width = dimension(obj, "width")?;
    let height = dimension(obj, "height")?;
    let source = match required(obj, "source", "")?.as_str() {
        Some("ground_truth") => DetectionSource::GroundTruth,
        Some("detector") => DetectionSource::Detector,
        _ => {
            return Err(IngestError::schema(
                "source",
                "expected \"ground_truth\" or \"detector\"",
            ))
        }
    };
    let items = required(obj, "detections", "")?
        .as_array()
        .ok_or_else(|| IngestError::schema("detections", "expected an array"))?;

    let mut set = DetectionSet::new(image_id, width, height, source);
    for (i, item) in items.iter().enumerate() {
        let det = detection_from_value(item, i)?;
        if !set.within_bounds(&det.polygon, DEFAULT_BOUNDS_MARGIN) {
            return Err(IngestError::schema(
                format!("detections[{i}].poly"),
                "polygon lies outside the image bounds",
            ));
        }
        set.detections.push(det);
    }
    Ok(set)
}

fn required<'a>(obj: &'a Map<String, Value>, key: &str, prefix: &str) -> Result<&'a Value, IngestError> {
    obj.get(key)
        .ok_or_else(|| IngestError::schema(format!("{prefix}{key}"), "missing required field"))
}

fn dimension(obj: &Map<String, Value>, key: &str) -> Result<u32, IngestError> {
    required(obj, key, "")?
        .as_u64()
        .filter(|&v| v > 0 && v <= u64::from(u32::MAX))
        .map(|v| v as u32)
        .ok_or_else(|| IngestError::schema(key, "expected a positive integer"))
}

fn detection_from_value(item: &Value, i: usize) -> Result<ObbDetection, IngestError> {
    let prefix = format!("detections[{i}].");
    let obj = item
        .as_object()
        .ok_or_else(|| IngestError::schema(format!("detections[{i}]"), "expected an object"))?;
    if let Some(extra) = obj.keys().find(|k| !["conf", "label", "poly"].contains(&k.as_str())) {
        return Err(IngestError::schema(format!("{prefix}{extra}"), "unknown field"));
    }

    let conf_field = format!("{prefix}conf");
    let conf = required(obj, "conf", &prefix)?
        .as_f64()
        .ok_or_else(|| IngestError::schema(&conf_field, "expected a number"))?;
    if !(0.0..=1.0).contains(&conf) {
        return Err(IngestError::schema(
            conf_field,
            format!("confidence {conf} outside [0, 1]"),
        ));
    }

    let label = required(obj, "label", &prefix)?
        .as_str()
        .ok_or_else(|| IngestError::schema(format!("{prefix}label"), "expected a string"))?
        .to_string();

    let poly_field = format!("{prefix}poly");
    let pts = required(obj, "poly", &prefix)?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| IngestError::schema(&poly_field, "expected 4 points"))?;
    let mut corners = [[0.0f64; 2]; 4];
    for (slot, p) in corners.iter_mut().zip(pts) {
        let xy = p
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]))
            .ok_or_else(|| IngestError::schema(&poly_field, "each point must be [x, y]"))?;
        *slot = xy;
    }
    let polygon =
        ObbPolygon::from_array(corners).map_err(|e: GeometryError| IngestError::schema(poly_field, e.to_string()))?;
    Ok(ObbDetection::new(polygon, conf, label))
}

// ---------------------------------------------------------------------------
// Tiling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

fn axis_origins(extent: u32, tile: u32, stride: u32) -> Vec<u32> {
    if extent <= tile {
        return vec![0];
    }
    let span = extent - tile;
    let n = span.div_ceil(stride) + 1;
    let mut origins: Vec<u32> = (0..n - 1).map(|i| i * stride).collect();
    origins.push(span);
    origins
}

/// Overlapping tiles covering the whole image, row-major. The last row and
/// column are shifted inward so every tile keeps the full tile size (unless
/// the image itself is smaller than a tile).
pub fn tile_plan(
    image_width: u32,
    image_height: u32,
    tile_size: u32,
    overlap: u32,
) -> Result<Vec<TileRect>, IngestError> {
    if image_width == 0 || image_height == 0 {
        return Err(IngestError::Tiling("image dimensions must be positive".into()));
    }
    if tile_size == 0 || tile_size <= overlap {
        return Err(IngestError::Tiling(format!(
            "tile size {tile_size} must exceed overlap {overlap}"
        )));
    }
    let stride = tile_size - overlap;
    let xs = axis_origins(image_width, tile_size, stride);
    let ys = axis_origins(image_height, tile_size, stride);
    let w = tile_size.min(image_width);
    let h = tile_size.min(image_height);
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| TileRect {
                x,
                y,
                width: w,
                height: h,
            })
        })
        .collect())
}

/// Translates per-tile detections to image coordinates and removes
/// tile-boundary duplicates.
pub fn merge_tiles(per_tile: &[(TileRect, Vec<ObbDetection>)], iou_threshold: f64) -> Vec<ObbDetection> {
    let global: Vec<ObbDetection> = per_tile
        .iter()
        .flat_map(|(tile, dets)| {
            dets.iter()
                .map(move |d| d.translated(f64::from(tile.x), f64::from(tile.y)))
        })
        .collect();
    crate::geometry::nms_merge(&global, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> DotaOptions {
        DotaOptions {
            image_id: "P0001".into(),
            ..DotaOptions::default()
        }
    }

    #[test]
    fn dota_single_vehicle() {
        let a = parse_dota_annotation("0 0 40 0 40 18 0 18 small-vehicle 0\n", &opts());
        assert_eq!(a.set.len(), 1);
        assert_eq!(a.set.detections[0].longer_side(), 40.0);
        assert_eq!(a.set.detections[0].confidence, 1.0);
        assert_eq!(a.set.source, DetectionSource::GroundTruth);
        assert_eq!((a.set.width, a.set.height), (40, 18));
    }

    #[test]
    fn dota_category_filter() {
        let a = parse_dota_annotation("0 0 40 0 40 18 0 18 plane 0\n", &opts());
        assert!(a.set.is_empty());
        assert_eq!(a.skipped_lines, 0);
    }

    #[test]
    fn dota_counts_malformed_lines() {
        let text = "imagesource:GoogleEarth\n\
                    gsd:0.146\n\
                    0 0 40 0 40 18 0 18 small-vehicle 0\n\
                    10 10 50 10 50 28 10 28 small-vehicle 1\n\
                    0 0 40 0 40 18 small-vehicle 0\n\
                    100 100 130 100 130 112 100 112 small-vehicle 0\n";
        let a = parse_dota_annotation(text, &opts());
        assert_eq!(a.set.len(), 3);
        assert_eq!(a.skipped_lines, 1);
        assert_eq!(a.gsd_header, Some(0.146));
    }

    #[test]
    fn dota_degenerate_polygon_is_skipped() {
        let a = parse_dota_annotation("0 0 10 0 20 0 30 0 small-vehicle 0\nx y\n", &opts());
        assert!(a.set.is_empty());
        assert_eq!(a.skipped_lines, 2);
    }

    #[test]
    fn dota_difficulty_filter() {
        let text = "0 0 40 0 40 18 0 18 small-vehicle 0\n0 0 40 0 40 18 0 18 small-vehicle 2\n";
        let mut o = opts();
        assert_eq!(parse_dota_annotation(text, &o).set.len(), 2);
        o.max_difficulty = Some(1);
        assert_eq!(parse_dota_annotation(text, &o).set.len(), 1);
    }

    #[test]
    fn dota_out_of_bounds_with_known_size() {
        let mut o = opts();
        o.image_size = Some((100, 100));
        let a = parse_dota_annotation("500 500 540 500 540 518 500 518 small-vehicle 0\n", &o);
        assert!(a.set.is_empty());
        assert_eq!(a.skipped_lines, 1);
    }

    #[test]
    fn dota_missing_file_is_error() {
        let err = read_dota_file(Path::new("/nonexistent/label.txt"), &opts()).unwrap_err();
        assert!(matches!(err, IngestError::Io { .. }));
    }

    #[test]
    fn dota_invalid_utf8_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, [0xff, 0xfe, 0x00]).unwrap();
        assert!(matches!(
            read_dota_file(&path, &DotaOptions::default()),
            Err(IngestError::Encoding { .. })
        ));
    }

    #[test]
    fn gsd_meta_variants() {
        assert_eq!(parse_gsd_meta("a", "gsd:0.146").gsd_gt, Some(0.146));
        assert_eq!(parse_gsd_meta("a", "gsd:null").gsd_gt, None);
        assert_eq!(parse_gsd_meta("a", "imagesource:GoogleEarth\n").gsd_gt, None);
        assert_eq!(parse_gsd_meta("a", "gsd:-1").gsd_gt, None);
        assert_eq!(parse_gsd_meta("a", "x\ngsd:0.5\ngsd:0.7").gsd_gt, Some(0.5));
    }

    fn sample_set(n: usize) -> DetectionSet {
        let mut set = DetectionSet::new("img", 1000, 800, DetectionSource::Detector);
        for i in 0..n {
            let x = 10.0 + (i as f64) * 13.37;
            let poly = ObbPolygon::rectangle(
                crate::geometry::Point::new(x, 300.0 + (i as f64).sin() * 50.0),
                41.123456789123 + i as f64 * 0.1,
                17.0,
                i as f64 * 0.3,
            )
            .unwrap();
            set.detections
                .push(ObbDetection::new(poly, 0.1 + 0.017 * i as f64, "small-vehicle"));
        }
        set
    }

    #[test]
    fn json_minimal_document() {
        let doc = r#"{"image_id":"x","width":100,"height":100,"source":"detector",
            "detections":[{"poly":[[0,0],[40,0],[40,18],[0,18]],"conf":0.9,"label":"small-vehicle"}]}"#;
        let set = read_detection_json(doc).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.source, DetectionSource::Detector);
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let set = sample_set(50);
        let first = write_detection_json(&set);
        let reread = read_detection_json(&first).unwrap();
        let second = write_detection_json(&reread);
        assert_eq!(first, second);
        assert!(first.ends_with('\n'));
        assert_eq!(reread.len(), 50);
    }

    #[test]
    fn json_keys_are_sorted() {
        let text = write_detection_json(&sample_set(1));
        let keys = [
            "\"detections\"",
            "\"height\"",
            "\"image_id\"",
            "\"source\"",
            "\"width\"",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let inner = ["\"conf\"", "\"label\"", "\"poly\""];
        let pos: Vec<usize> = inner.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn json_rejects_bad_confidence() {
        let doc = r#"{"image_id":"x","width":100,"height":100,"source":"detector",
            "detections":[{"poly":[[0,0],[40,0],[40,18],[0,18]],"conf":1.3,"label":"small-vehicle"}]}"#;
        let err = read_detection_json(doc).unwrap_err();
        assert_eq!(err.field(), Some("detections[0].conf"));
    }

    #[test]
    fn json_schema_errors_name_field() {
        let cases = [
            (
                r#"{"width":1,"height":1,"source":"detector","detections":[]}"#,
                "image_id",
            ),
            (
                r#"{"image_id":"x","width":0,"height":1,"source":"detector","detections":[]}"#,
                "width",
            ),
            (
                r#"{"image_id":"x","width":1,"height":1,"source":"camera","detections":[]}"#,
                "source",
            ),
            (
                r#"{"image_id":"x","width":1,"height":1,"source":"detector","detections":{}}"#,
                "detections",
            ),
            (
                r#"{"image_id":"x","width":1,"height":1,"source":"detector","detections":[],"extra":1}"#,
                "extra",
            ),
            (
                r#"{"image_id":"x","width":100,"height":100,"source":"detector","detections":[{"poly":[[0,0],[1,1]],"conf":0.5,"label":"v"}]}"#,
                "detections[0].poly",
            ),
            (
                r#"{"image_id":"x","width":100,"height":100,"source":"detector","detections":[{"poly":[[0,0],[40,0],[40,18],[0,18]],"conf":0.5}]}"#,
                "detections[0].label",
            ),
            (
                r#"{"image_id":"x","width":10,"height":10,"source":"detector","detections":[{"poly":[[0,0],[40,0],[40,18],[0,18]],"conf":0.5,"label":"v"}]}"#,
                "detections[0].poly",
            ),
        ];
        for (doc, field) in cases {
            let err = read_detection_json(doc).unwrap_err();
            assert_eq!(err.field(), Some(field), "{doc}");
        }
        assert!(matches!(read_detection_json("{not json"), Err(IngestError::Json(_))));
    }

    #[test]
    fn tile_plan_examples() {
        let single = tile_plan(1000, 1000, 1024, 0).unwrap();
        assert_eq!(
            single,
            vec![TileRect {
                x: 0,
                y: 0,
                width: 1000,
                height: 1000
            }]
        );

        let row = tile_plan(2000, 1000, 1024, 200).unwrap();
        assert_eq!(row.iter().map(|t| t.x).collect::<Vec<_>>(), vec![0, 824, 976]);
        assert!(row.iter().all(|t| t.y == 0 && t.width == 1024 && t.height == 1000));

        let big = tile_plan(4000, 4000, 1024, 200).unwrap();
        assert_eq!(big.len(), 25);
        let mut xs: Vec<u32> = big.iter().map(|t| t.x).collect();
        xs.sort();
        xs.dedup();
        assert_eq!(xs, vec![0, 824, 1648, 2472, 2976]);
    }

    #[test]
    fn tile_plan_errors() {
        assert!(tile_plan(0, 10, 5, 1).is_err());
        assert!(tile_plan(10, 10, 5, 5).is_err());
        assert!(tile_plan(10, 10, 0, 0).is_err());
    }

    #[test]
    fn merge_tiles_removes_boundary_duplicate() {
        let poly = ObbPolygon::from_array([[0.0, 0.0], [40.0, 0.0], [40.0, 18.0], [0.0, 18.0]]).unwrap();
        let a = TileRect {
            x: 0,
            y: 0,
            width: 1024,
            height: 1024,
        };
        let b = TileRect {
            x: 824,
            y: 0,
            width: 1024,
            height: 1024,
        };
        let in_a = ObbDetection::new(poly.translated(850.0, 10.0), 0.9, "v");
        let in_b = ObbDetection::new(poly.translated(26.0, 10.0), 0.8, "v");
        let merged = merge_tiles(&[(a, vec![in_a.clone()]), (b, vec![in_b])], 0.5);
        assert_eq!(merged, vec![in_a]);
    }

    proptest! {
        #[test]
        fn tiles_cover_every_pixel(w in 1u32..120, h in 1u32..120, tile in 2u32..50, ov_frac in 0.0..0.95f64) {
            let overlap = ((tile as f64) * ov_frac) as u32;
            let overlap = overlap.min(tile - 1);
            let tiles = tile_plan(w, h, tile, overlap).unwrap();
            let mut grid = vec![false; (w * h) as usize];
            for t in &tiles {
                prop_assert!(t.x + t.width <= w && t.y + t.height <= h);
                for y in t.y..t.y + t.height {
                    for x in t.x..t.x + t.width {
                        grid[(y * w + x) as usize] = true;
                    }
                }
            }
            prop_assert!(grid.iter().all(|&c| c));
        }

        #[test]
        fn dota_parser_is_total(text in "\\PC{0,400}") {
            let a = parse_dota_annotation(&text, &DotaOptions::default());
            prop_assert!(a.set.detections.iter().all(|d| d.confidence == 1.0));
            let _ = read_detection_json(&text);
            let _ = parse_gsd_meta("x", &text);
        }

        #[test]
        fn canonical_round_trip(n in 0usize..20) {
            let set = sample_set(n);
            let once = write_detection_json(&set);
            let twice = write_detection_json(&read_detection_json(&once).unwrap());
            prop_assert_eq!(once, twice);
        }
    }
}
