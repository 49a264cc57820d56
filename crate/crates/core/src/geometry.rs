//! Oriented bounding box arithmetic.
//!
//! Boxes are stored as four corners in the order the producer emitted them.
//! Construction validates the quadrilateral (finite, non-degenerate, convex),
//! so every [`ObbPolygon`] in circulation is safe to measure and clip.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when deciding whether a corner turn is a real
/// reflex turn or floating-point noise on a straight edge.
const CONVEXITY_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite polygon coordinate")]
    NonFinite,
    #[error("degenerate polygon")]
    Degenerate,
    #[error("non-convex polygon")]
    NonConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// A validated convex quadrilateral in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbPolygon {
    corners: [Point; 4],
}

impl ObbPolygon {
    pub fn new(corners: [Point; 4]) -> Result<Self, GeometryError> {
        if corners.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let area = signed_area(&corners);
        let scale = corners
            .iter()
            .flat_map(|p| [p.x.abs(), p.y.abs()])
            .fold(1.0_f64, f64::max);
        if area.abs() <= f64::EPSILON * scale * scale {
            return Err(GeometryError::Degenerate);
        }
        let orientation = area.signum();
        for i in 0..4 {
            let a = corners[i];
            let b = corners[(i + 1) % 4];
            let c = corners[(i + 2) % 4];
            let turn = b.sub(a).cross(c.sub(b));
            let tol = CONVEXITY_EPS * b.sub(a).norm().max(1.0) * c.sub(b).norm().max(1.0);
            if turn * orientation < -tol {
                return Err(GeometryError::NonConvex);
            }
        }
        Ok(Self { corners })
    }

    pub fn from_array(corners: [[f64; 2]; 4]) -> Result<Self, GeometryError> {
        Self::new(corners.map(Point::from))
    }

    /// Builds a rectangle of the given side lengths centred at `center`, with
    /// its first side rotated `angle` radians from the x axis.
    pub fn rectangle(center: Point, length: f64, width: f64, angle: f64) -> Result<Self, GeometryError> {
        let (s, c) = angle.sin_cos();
        let hl = length / 2.0;
        let hw = width / 2.0;
        let local = [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)];
        Self::new(local.map(|(u, v)| Point::new(center.x + u * c - v * s, center.y + u * s + v * c)))
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    pub fn to_array(&self) -> [[f64; 2]; 4] {
        self.corners.map(<[f64; 2]>::from)
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.corners).abs()
    }

    /// Longer of the two side-pair lengths, each pair averaged over its two
    /// opposite edges.
    pub fn longer_side(&self) -> f64 {
        let [p1, p2, p3, p4] = self.corners;
        let first = 0.5 * (p1.distance(p2) + p3.distance(p4));
        let second = 0.5 * (p2.distance(p3) + p4.distance(p1));
        first.max(second)
    }

    /// Smallest axis-aligned box containing the polygon: `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.corners.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            corners: self.corners.map(|p| Point::new(p.x + dx, p.y + dy)),
        }
    }

    /// Uniform scaling about the origin. `factor` must be positive.
    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(self.corners.map(|p| Point::new(p.x * factor, p.y * factor)))
    }

    /// Rigid rotation by `angle` radians about `pivot`.
    pub fn rotated(&self, angle: f64, pivot: Point) -> Result<Self, GeometryError> {
        let (s, c) = angle.sin_cos();
        Self::new(self.corners.map(|p| {
            let d = p.sub(pivot);
            Point::new(pivot.x + d.x * c - d.y * s, pivot.y + d.x * s + d.y * c)
        }))
    }

    pub fn centroid(&self) -> Point {
        let sum = self
            .corners
            .iter()
            .fold(Point::new(0.0, 0.0), |acc, p| Point::new(acc.x + p.x, acc.y + p.y));
        Point::new(sum.x / 4.0, sum.y / 4.0)
    }

    fn counter_clockwise(&self) -> [Point; 4] {
        let mut pts = self.corners;
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        pts
    }
}

fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    let twice: f64 = (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum();
    0.5 * twice
}

/// Clips `subject` against every edge of the convex counter-clockwise `clip`.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b.sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (s_cur, s_prev) = (side(cur), side(prev));
            if s_cur >= 0.0 {
                if s_prev < 0.0 {
                    output.push(intersect(prev, cur, s_prev, s_cur));
                }
                output.push(cur);
            } else if s_prev >= 0.0 {
                output.push(intersect(prev, cur, s_prev, s_cur));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Intersection-over-union of two convex quadrilaterals.
pub fn rotated_iou(a: &ObbPolygon, b: &ObbPolygon) -> f64 {
    if a == b {
        return 1.0;
    }
    let pa = a.counter_clockwise();
    let pb = b.counter_clockwise();
    let inter_poly = clip_convex(&pa, &pb);
    if inter_poly.len() < 3 {
        return 0.0;
    }
    let inter = signed_area(&inter_poly).abs();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// One oriented detection: box, detector score, and category label.
#[derive(Debug, Clone, PartialEq)]
pub struct ObbDetection {
    pub polygon: ObbPolygon,
    pub confidence: f64,
    pub label: String,
}

impl ObbDetection {
    pub fn new(polygon: ObbPolygon, confidence: f64, label: impl Into<String>) -> Self {
        Self {
            polygon,
            confidence,
            label: label.into(),
        }
    }

    pub fn longer_side(&self) -> f64 {
        self.polygon.longer_side()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            polygon: self.polygon.translated(dx, dy),
            confidence: self.confidence,
            label: self.label.clone(),
        }
    }
}

pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Greedy rotated non-maximum suppression.
///
/// Detections are visited in descending confidence (stable, so equal scores
/// keep input order); a detection survives iff its IoU with every survivor so
/// far is at most `iou_threshold`.
pub fn nms_merge(detections: &[ObbDetection], iou_threshold: f64) -> Vec<ObbDetection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| detections[j].confidence.total_cmp(&detections[i].confidence));

    let mut kept: Vec<ObbDetection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        if kept
            .iter()
            .all(|k| rotated_iou(&k.polygon, &cand.polygon) <= iou_threshold)
        {
            kept.push(cand.clone());
        }
    }
    kept
}
