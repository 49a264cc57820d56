//! Evaluation harness: relative error, aggregate reports, seeded synthetic
//! scenes, and one-factor-at-a-time ablation sweeps.

use std::fmt::Write as _;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_gsd, Aggregation, EstimatorConfig, EstimatorPath, GsdEstimate};
use crate::geometry::{ObbDetection, ObbPolygon, Point};
use crate::ingest::{to_canonical_string, DetectionSet, DetectionSource, ImageMeta, DEFAULT_CATEGORY};
use crate::robust_stats::median;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("ground-truth GSD must be positive, got {0}")]
    InvalidGroundTruth(f64),
    #[error("no evaluable records")]
    NothingToEvaluate,
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

pub fn relative_error(pred: f64, gt: f64) -> Result<f64, BenchmarkError> {
    if !(gt.is_finite() && gt > 0.0) {
        return Err(BenchmarkError::InvalidGroundTruth(gt));
    }
    Ok((pred - gt).abs() / gt)
}

/// Outcome for one image with known ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub gsd_pred: Option<f64>,
    pub gsd_gt: f64,
    pub rel_error: Option<f64>,
    pub confidence: f64,
    pub path: EstimatorPath,
    pub n_filtered: usize,
}

impl EvalRecord {
    pub fn from_estimate(
        image_id: impl Into<String>,
        estimate: &GsdEstimate,
        gsd_gt: f64,
    ) -> Result<Self, BenchmarkError> {
        let rel_error = estimate.gsd_pred.map(|p| relative_error(p, gsd_gt)).transpose()?;
        if rel_error.is_none() {
            relative_error(gsd_gt, gsd_gt)?;
        }
        Ok(Self {
            image_id: image_id.into(),
            gsd_pred: estimate.gsd_pred,
            gsd_gt,
            rel_error,
            confidence: estimate.confidence.c_final,
            path: estimate.path,
            n_filtered: estimate.n_filtered,
        })
    }
}

/// Error statistics over a set of evaluated images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub median_err: f64,
    pub mean_err: f64,
    pub frac_lt_10: f64,
    pub frac_lt_20: f64,
}

impl ErrorSummary {
    /// Order-independent: errors are sorted before every reduction.
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let frac = |limit: f64| sorted.iter().filter(|&&e| e < limit).count() as f64 / n as f64;
        Some(Self {
            n,
            median_err: median(&sorted)?,
            mean_err: sorted.iter().sum::<f64>() / n as f64,
            frac_lt_10: frac(0.10),
            frac_lt_20: frac(0.20),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    VehiclesAtLeast20,
    VehiclesBelow5,
    GsdBelow0_3,
    GsdAbove0_7,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [
        Bucket::VehiclesAtLeast20,
        Bucket::VehiclesBelow5,
        Bucket::GsdBelow0_3,
        Bucket::GsdAbove0_7,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Bucket::VehiclesAtLeast20 => "N>=20",
            Bucket::VehiclesBelow5 => "N<5",
            Bucket::GsdBelow0_3 => "GSD<0.3",
            Bucket::GsdAbove0_7 => "GSD>0.7",
        }
    }

    pub fn factor(self) -> &'static str {
        match self {
            Bucket::VehiclesAtLeast20 | Bucket::VehiclesBelow5 => "vehicle_count",
            Bucket::GsdBelow0_3 | Bucket::GsdAbove0_7 => "gsd_range",
        }
    }

    pub fn contains(self, record: &EvalRecord) -> bool {
        match self {
            Bucket::VehiclesAtLeast20 => record.n_filtered >= 20,
            Bucket::VehiclesBelow5 => record.n_filtered < 5,
            Bucket::GsdBelow0_3 => record.gsd_gt < 0.3,
            Bucket::GsdAbove0_7 => record.gsd_gt > 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: Bucket,
    pub summary: Option<ErrorSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_evaluated: usize,
    pub n_no_estimate: usize,
    pub median_err: f64,
    pub mean_err: f64,
    pub frac_lt_10: f64,
    pub frac_lt_20: f64,
    /// Pearson r between final confidence and relative error; needs at least
    /// three evaluated images with non-constant values.
    pub confidence_error_correlation: Option<f64>,
    pub per_bucket: Vec<BucketSummary>,
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 3 {
        return None;
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = sorted.len() as f64;
    let mx = sorted.iter().map(|p| p.0).sum::<f64>() / n;
    let my = sorted.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &sorted {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let denom = (sxx * syy).sqrt();
    (denom > 0.0).then(|| (sxy / denom).clamp(-1.0, 1.0))
}

/// Aggregates per-image records. Images without an estimate are counted in
/// `n_no_estimate` and left out of every error statistic.
pub fn evaluate(records: &[EvalRecord]) -> Result<EvalReport, BenchmarkError> {
    let errors: Vec<f64> = records.iter().filter_map(|r| r.rel_error).collect();
    let overall = ErrorSummary::from_errors(&errors).ok_or(BenchmarkError::NothingToEvaluate)?;

    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.rel_error.map(|e| (r.confidence, e)))
        .collect();

    let per_bucket = Bucket::ALL
        .iter()
        .map(|&bucket| {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| bucket.contains(r))
                .filter_map(|r| r.rel_error)
                .collect();
            BucketSummary {
                bucket,
                summary: ErrorSummary::from_errors(&errs),
            }
        })
        .collect();

    Ok(EvalReport {
        n_evaluated: overall.n,
        n_no_estimate: records.len() - overall.n,
        median_err: overall.median_err,
        mean_err: overall.mean_err,
        frac_lt_10: overall.frac_lt_10,
        frac_lt_20: overall.frac_lt_20,
        confidence_error_correlation: pearson(&pairs),
        per_bucket,
    })
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "evaluated      {}", report.n_evaluated);
    let _ = writeln!(s, "no estimate    {}", report.n_no_estimate);
    let _ = writeln!(s, "median error   {:.2}%", 100.0 * report.median_err);
    let _ = writeln!(s, "mean error     {:.2}%", 100.0 * report.mean_err);
    let _ = writeln!(s, "<10%           {:.1}%", 100.0 * report.frac_lt_10);
    let _ = writeln!(s, "<20%           {:.1}%", 100.0 * report.frac_lt_20);
    match report.confidence_error_correlation {
        Some(r) => {
            let _ = writeln!(s, "conf/err r     {r:.3}");
        }
        None => {
            let _ = writeln!(s, "conf/err r     n/a");
        }
    }
    for b in &report.per_bucket {
        match b.summary {
            Some(sum) => {
                let _ = writeln!(
                    s,
                    "  {:<8} n={:<5} median {:.2}%",
                    b.bucket.label(),
                    sum.n,
                    100.0 * sum.median_err
                );
            }
            None => {
                let _ = writeln!(s, "  {:<8} empty", b.bucket.label());
            }
        }
    }
    s
}

/// One canonical JSON document per line.
pub fn records_to_ndjson(records: &[EvalRecord]) -> String {
    records
        .iter()
        .map(|r| to_canonical_string(&serde_json::to_value(r).unwrap_or_default()))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Seeded description of one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image_id: String,
    pub true_gsd: f64,
    pub vehicle_lengths_m: Vec<f64>,
    pub false_positive_lengths_px: Vec<f64>,
    pub detector_noise_sigma: f64,
    pub seed: u64,
}

/// Short side as a fraction of the long side for generated boxes.
const SYNTHETIC_ASPECT: f64 = 0.4;
const MIN_SYNTHETIC_LENGTH_PX: f64 = 1.0;

/// Renders a scene into detections plus its ground-truth metadata.
///
/// Objects are laid out one per cell of a square grid whose cell size is
/// three times the larger of the nominal vehicle length (`l_ref_truth /
/// true_gsd`) and the longest object, so boxes never overlap or leave the
/// image.
pub fn generate_scene(scene: &SyntheticScene, l_ref_truth: f64) -> (DetectionSet, ImageMeta) {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let noise = Normal::new(0.0, scene.detector_noise_sigma.max(0.0)).ok();

    let mut objects: Vec<f64> = scene
        .vehicle_lengths_m
        .iter()
        .map(|&len| {
            let jitter = match &noise {
                Some(n) if scene.detector_noise_sigma > 0.0 => n.sample(&mut rng),
                _ => 0.0,
            };
            (len / scene.true_gsd + jitter).max(MIN_SYNTHETIC_LENGTH_PX)
        })
        .collect();
    objects.extend(
        scene
            .false_positive_lengths_px
            .iter()
            .map(|&l| l.max(MIN_SYNTHETIC_LENGTH_PX)),
    );

    let nominal = l_ref_truth / scene.true_gsd;
    let longest = objects.iter().copied().fold(nominal, f64::max);
    let cell = (3.0 * longest).ceil();
    let cols = ((objects.len() as f64).sqrt().ceil() as usize).max(1);
    let side = (cell * cols as f64).max(64.0);
    let side_px = side.min(f64::from(u32::MAX)) as u32;

    let mut set = DetectionSet::new(scene.image_id.clone(), side_px, side_px, DetectionSource::Detector);
    for (i, &len) in objects.iter().enumerate() {
        let (row, col) = (i / cols, i % cols);
        let cx = (col as f64 + 0.5) * cell + rng.random_range(-0.1..0.1) * cell;
        let cy = (row as f64 + 0.5) * cell + rng.random_range(-0.1..0.1) * cell;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let conf = rng.random_range(0.3..0.99);
        let poly = ObbPolygon::rectangle(Point::new(cx, cy), len, SYNTHETIC_ASPECT * len, angle)
            .expect("positive-size rectangle is a valid polygon");
        set.detections.push(ObbDetection::new(poly, conf, DEFAULT_CATEGORY));
    }
    let meta = ImageMeta {
        image_id: scene.image_id.clone(),
        gsd_gt: Some(scene.true_gsd),
    };
    (set, meta)
}

/// Gaussian mixture over physical vehicle lengths in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetModel {
    /// `(weight, mean, std)` per component; weights need not be normalised.
    pub components: Vec<(f64, f64, f64)>,
}

impl FleetModel {
    /// Passenger cars plus a minority of longer vans and trucks:
    /// `0.8 N(5.0, 0.3) + 0.2 N(8.0, 0.5)`.
    pub fn urban_mixture() -> Self {
        Self {
            components: vec![(0.8, 5.0, 0.3), (0.2, 8.0, 0.5)],
        }
    }

    pub fn homogeneous(length: f64) -> Self {
        Self {
            components: vec![(1.0, length, 0.0)],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        (0..n)
            .map(|_| {
                let mut u = rng.random_range(0.0..total);
                let mut chosen = self.components[self.components.len() - 1];
                for &c in &self.components {
                    if u < c.0 {
                        chosen = c;
                        break;
                    }
                    u -= c.0;
                }
                let (_, mu, sd) = chosen;
                let x = if sd > 0.0 {
                    Normal::new(mu, sd).map(|d| d.sample(rng)).unwrap_or(mu)
                } else {
                    mu
                };
                x.max(0.5)
            })
            .collect()
    }

    /// Mixture density at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        self.components
            .iter()
            .filter(|c| c.2 > 0.0)
            .map(|&(w, mu, sd)| {
                let z = (x - mu) / sd;
                w / total * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    }
}

/// Parameters for a batch of seeded synthetic trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub n_trials: usize,
    pub seed: u64,
    /// Inclusive range of vehicles per scene.
    pub vehicles: (usize, usize),
    pub gsd_range: (f64, f64),
    pub noise_sigma: f64,
    /// False positives per scene as a fraction of the vehicle count.
    pub false_positive_fraction: f64,
    /// False-positive lengths as multiples of the nominal vehicle length.
    pub false_positive_scale: (f64, f64),
    pub fleet: FleetModel,
    pub l_ref_truth: f64,
}

impl TrialSpec {
    /// 200 scenes, 20 to 60 mixed-fleet vehicles, GSD in [0.05, 0.25],
    /// 1 px jitter and 10% oversized false positives.
    pub fn standard(seed: u64) -> Self {
        Self {
            n_trials: 200,
            seed,
            vehicles: (20, 60),
            gsd_range: (0.05, 0.25),
            noise_sigma: 1.0,
            false_positive_fraction: 0.1,
            false_positive_scale: (2.0, 4.0),
            fleet: FleetModel::urban_mixture(),
            l_ref_truth: 5.0,
        }
    }

    pub fn scenes(&self) -> Vec<SyntheticScene> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_trials)
            .map(|i| {
                let n = rng.random_range(self.vehicles.0..=self.vehicles.1);
                let gsd = if self.gsd_range.0 < self.gsd_range.1 {
                    rng.random_range(self.gsd_range.0..self.gsd_range.1)
                } else {
                    self.gsd_range.0
                };
                let vehicle_lengths_m = self.fleet.sample(&mut rng, n);
                let n_fp = (self.false_positive_fraction * n as f64).round() as usize;
                let nominal = self.l_ref_truth / gsd;
                let (lo, hi) = self.false_positive_scale;
                let false_positive_lengths_px = (0..n_fp)
                    .map(|_| nominal * if lo < hi { rng.random_range(lo..hi) } else { lo })
                    .collect();
                SyntheticScene {
                    image_id: format!("synthetic_{:05}", i),
                    true_gsd: gsd,
                    vehicle_lengths_m,
                    false_positive_lengths_px,
                    detector_noise_sigma: self.noise_sigma,
                    seed: rng.random(),
                }
            })
            .collect()
    }

    pub fn dataset(&self) -> Vec<(DetectionSet, ImageMeta)> {
        self.scenes()
            .iter()
            .map(|s| generate_scene(s, self.l_ref_truth))
            .collect()
    }
}

/// Runs the estimator over every image that has ground truth.
pub fn run_dataset(dataset: &[(DetectionSet, ImageMeta)], config: &EstimatorConfig) -> Vec<EvalRecord> {
    dataset
        .iter()
        .filter_map(|(set, meta)| {
            let gt = meta.gsd_gt?;
            let est = estimate_gsd(set, config);
            EvalRecord::from_estimate(set.image_id.clone(), &est, gt).ok()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ablation

/// Settings varied one at a time around `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub base: EstimatorConfig,
    pub aggregations: Vec<Aggregation>,
    pub l_refs: Vec<f64>,
    /// `None` disables the outlier cut.
    pub alphas: Vec<Option<f64>>,
    pub include_buckets: bool,
}

impl SweepGrid {
    /// All three aggregators, `l_ref` ± 0.5 m, and alpha in {1.0, 1.5, off}.
    pub fn standard(base: EstimatorConfig) -> Self {
        Self {
            base,
            aggregations: vec![Aggregation::Kde, Aggregation::Median, Aggregation::Mean],
            l_refs: vec![base.l_ref - 0.5, base.l_ref, base.l_ref + 0.5],
            alphas: vec![Some(1.0), Some(1.5), None],
            include_buckets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub factor: String,
    pub setting: String,
    /// `None` when the cell has no evaluable images.
    pub report: Option<EvalReport>,
}

fn cell(factor: &str, setting: String, records: &[EvalRecord]) -> SweepCell {
    SweepCell {
        factor: factor.to_string(),
        setting,
        report: evaluate(records).ok(),
    }
}

pub fn ablation_sweep(dataset: &[(DetectionSet, ImageMeta)], grid: &SweepGrid) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &agg in &grid.aggregations {
        let cfg = EstimatorConfig {
            aggregation: agg,
            ..grid.base
        };
        cells.push(cell(
            "aggregation",
            agg.as_str().to_string(),
            &run_dataset(dataset, &cfg),
        ));
    }
    for &l_ref in &grid.l_refs {
        let cfg = EstimatorConfig { l_ref, ..grid.base };
        cells.push(cell("l_ref", format!("{l_ref}"), &run_dataset(dataset, &cfg)));
    }
    for &alpha in &grid.alphas {
        let cfg = EstimatorConfig { alpha, ..grid.base };
        let label = alpha.map_or_else(|| "none".to_string(), |a| format!("{a}"));
        cells.push(cell("alpha", label, &run_dataset(dataset, &cfg)));
    }
    if grid.include_buckets {
        let base_records = run_dataset(dataset, &grid.base);
        for bucket in Bucket::ALL {
            let subset: Vec<EvalRecord> = base_records.iter().filter(|r| bucket.contains(r)).cloned().collect();
            cells.push(cell(bucket.factor(), bucket.label().to_string(), &subset));
        }
    }
    cells
}

pub fn write_sweep_csv<W: io::Write>(cells: &[SweepCell], out: W) -> Result<(), BenchmarkError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "factor",
        "setting",
        "n_evaluated",
        "n_no_estimate",
        "median_err",
        "mean_err",
        "frac_lt_10",
        "frac_lt_20",
        "confidence_error_correlation",
    ])?;
    for c in cells {
        let mut row = vec![c.factor.clone(), c.setting.clone()];
        match &c.report {
            Some(r) => row.extend([
                r.n_evaluated.to_string(),
                r.n_no_estimate.to_string(),
                format!("{:.6}", r.median_err),
                format!("{:.6}", r.mean_err),
                format!("{:.6}", r.frac_lt_10),
                format!("{:.6}", r.frac_lt_20),
                r.confidence_error_correlation
                    .map(|x| format!("{x:.6}"))
                    .unwrap_or_default(),
            ]),
            None => row.extend(std::iter::repeat_n(String::new(), 7)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn format_sweep_table(cells: &[SweepCell]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:<12} {:>6} {:>10} {:>8}",
        "factor", "setting", "n", "med.err", "<20%"
    );
    for c in cells {
        match &c.report {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "{:<14} {:<12} {:>6} {:>9.2}% {:>7.1}%",
                    c.factor,
                    c.setting,
                    r.n_evaluated,
                    100.0 * r.median_err,
                    100.0 * r.frac_lt_20
                );
            }
            None => {
                let _ = writeln!(s, "{:<14} {:<12} {:>6} {:>10} {:>8}", c.factor, c.setting, 0, "-", "-");
            }
        }
    }
    s
}
