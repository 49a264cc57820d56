//! Robust one-dimensional statistics over pixel lengths: confidence gating,
//! the median outlier cut, Scott's-rule bandwidth, and Gaussian KDE mode search.

use thiserror::Error;

use crate::geometry::ObbDetection;

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.1;
pub const DEFAULT_OUTLIER_FACTOR: f64 = 1.5;
pub const DEFAULT_GRID_POINTS: usize = 512;
/// Grid half-margin beyond the data extremes, in bandwidths.
pub const GRID_MARGIN_BANDWIDTHS: f64 = 3.0;

/// Relative gap under which two grid densities count as tied.
const TIE_RTOL: f64 = 1e-12;
const INV_GOLDEN: f64 = 0.618_033_988_749_894_8;
/// Enough to shrink one grid cell by ~1e-20; also bounds the loop once the
/// bracket reaches float resolution.
const MAX_GOLDEN_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("zero-variance sample")]
    ZeroVariance,
    #[error("sample value {0} is not a positive finite length")]
    InvalidValue(f64),
    #[error("weights must lie in [0, 1] with at least one positive")]
    InvalidWeights,
    #[error("{values} values but {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("bandwidth override must be positive and finite")]
    InvalidBandwidth,
}

/// Strictly positive lengths with optional per-value weights in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LengthSample {
    values: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl LengthSample {
    pub fn new(values: Vec<f64>) -> Result<Self, StatsError> {
        if let Some(&bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(StatsError::InvalidValue(bad));
        }
        Ok(Self { values, weights: None })
    }

    pub fn weighted(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, StatsError> {
        if values.len() != weights.len() {
            return Err(StatsError::LengthMismatch {
                values: values.len(),
                weights: weights.len(),
            });
        }
        let valid = weights.iter().all(|w| (0.0..=1.0).contains(w));
        let any_positive = weights.iter().any(|&w| w > 0.0);
        if !values.is_empty() && !(valid && any_positive) {
            return Err(StatsError::InvalidWeights);
        }
        let mut sample = Self::new(values)?;
        sample.weights = Some(weights);
        Ok(sample)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeResult {
    pub mode: f64,
    /// Zero for a degenerate (single-valued) sample.
    pub bandwidth: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub n_evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeOptions {
    pub grid_points: usize,
    /// Replaces Scott's rule when set.
    pub bandwidth: Option<f64>,
}

impl Default for KdeOptions {
    fn default() -> Self {
        Self {
            grid_points: DEFAULT_GRID_POINTS,
            bandwidth: None,
        }
    }
}

/// Keeps detections with `confidence >= min_conf`, in input order.
pub fn threshold_confidence(detections: &[ObbDetection], min_conf: f64) -> Vec<ObbDetection> {
    detections
        .iter()
        .filter(|d| d.confidence >= min_conf)
        .cloned()
        .collect()
}

/// Median; even-length inputs average the two central order statistics.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Which inputs survive `P <= alpha * median(P)`. The median is taken once
/// over the unfiltered input.
pub fn outlier_keep_mask(lengths: &[f64], alpha: f64) -> Vec<bool> {
    match median(lengths) {
        Some(med) => {
            let cutoff = alpha * med;
            lengths.iter().map(|&p| p <= cutoff).collect()
        }
        None => Vec::new(),
    }
}

pub fn filter_outliers(lengths: &[f64], alpha: f64) -> Vec<f64> {
    lengths
        .iter()
        .zip(outlier_keep_mask(lengths, alpha))
        .filter_map(|(&p, keep)| keep.then_some(p))
        .collect()
}

/// Weights rescaled so the largest is exactly 1. Constant weights therefore
/// become all-ones and follow the unweighted arithmetic bit for bit.
fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Vec<f64> {
    match weights {
        None => vec![1.0; n],
        Some(w) => {
            let max = w.iter().copied().fold(0.0f64, f64::max);
            if max > 0.0 {
                w.iter().map(|x| x / max).collect()
            } else {
                vec![1.0; n]
            }
        }
    }
}

/// Weighted mean and reliability-weighted variance plus effective sample size.
fn weighted_moments(values: &[f64], weights: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let m = values.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ss: f64 = values.iter().zip(weights).map(|(x, w)| w * (x - m) * (x - m)).sum();
    let denom = sw - sw2 / sw;
    let var = if denom > 0.0 { ss / denom } else { 0.0 };
    (m, var, sw * sw / sw2)
}

/// Scott's rule `sigma * n^(-1/5)` over raw values. With weights, sigma is the
/// weighted standard deviation and `n` the effective sample size.
pub fn scott_bandwidth_of(values: &[f64], weights: Option<&[f64]>) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let w = normalized_weights(values.len(), weights);
    let (_, var, n_eff) = weighted_moments(values, &w);
    let h = var.sqrt() * n_eff.powf(-0.2);
    if h.is_finite() && h > 0.0 {
        Ok(h)
    } else {
        Err(StatsError::ZeroVariance)
    }
}

pub fn scott_bandwidth(sample: &LengthSample) -> Result<f64, StatsError> {
    scott_bandwidth_of(&sample.values, sample.weights.as_deref())
}

struct Density<'a> {
    values: &'a [f64],
    weights: &'a [f64],
    inv_h: f64,
    norm: f64,
}

impl Density<'_> {
    fn at(&self, x: f64) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .zip(self.weights)
            .map(|(&v, &w)| {
                let z = (x - v) * self.inv_h;
                w * (-0.5 * z * z).exp()
            })
            .sum();
        s * self.norm
    }
}

pub fn kde_mode(sample: &LengthSample) -> Result<KdeResult, StatsError> {
    kde_mode_with(sample, &KdeOptions::default())
}

/// Arg-max of the Gaussian KDE: a uniform grid over `[min - 3h, max + 3h]`
/// followed by golden-section refinement inside the winning grid cell's
/// neighbours. Grid ties go to the smaller x.
pub fn kde_mode_with(sample: &LengthSample, opts: &KdeOptions) -> Result<KdeResult, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let all_weights = normalized_weights(sample.len(), sample.weights.as_deref());
    // Zero-weight points contribute nothing to the density.
    let (values, weights): (Vec<f64>, Vec<f64>) = sample
        .values
        .iter()
        .zip(&all_weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, &w)| (v, w))
        .unzip();

    let lo_v = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_v = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo_v == hi_v {
        return Ok(KdeResult {
            mode: lo_v,
            bandwidth: 0.0,
            grid_lo: lo_v,
            grid_hi: lo_v,
            n_evaluations: 0,
        });
    }

    let h = match opts.bandwidth {
        Some(h) if h.is_finite() && h > 0.0 => h,
        Some(_) => return Err(StatsError::InvalidBandwidth),
        None => scott_bandwidth_of(&values, Some(&weights))?,
    };
    let sw: f64 = weights.iter().sum();
    let density = Density {
        values: &values,
        weights: &weights,
        inv_h: 1.0 / h,
        norm: 1.0 / (sw * h * (2.0 * std::f64::consts::PI).sqrt()),
    };

    let grid_lo = lo_v - GRID_MARGIN_BANDWIDTHS * h;
    let grid_hi = hi_v + GRID_MARGIN_BANDWIDTHS * h;
    let g = opts.grid_points.max(3);
    let step = (grid_hi - grid_lo) / (g - 1) as f64;
    let grid_x = |k: usize| if k == g - 1 { grid_hi } else { grid_lo + k as f64 * step };

    let mut best_k = 0;
    let mut best_f = density.at(grid_x(0));
    for k in 1..g {
        let f = density.at(grid_x(k));
        if f > best_f + TIE_RTOL * best_f {
            best_k = k;
            best_f = f;
        }
    }
    let mut n_evaluations = g;

    let mut a = grid_x(best_k.saturating_sub(1));
    let mut b = grid_x((best_k + 1).min(g - 1));
    let mut c = b - INV_GOLDEN * (b - a);
    let mut d = a + INV_GOLDEN * (b - a);
    let mut fc = density.at(c);
    let mut fd = density.at(d);
    n_evaluations += 2;
    let tol = 1e-10 * (grid_hi - grid_lo);
    let mut iterations = 0;
    while b - a > tol && iterations < MAX_GOLDEN_ITERATIONS {
        iterations += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_GOLDEN * (b - a);
            fc = density.at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_GOLDEN * (b - a);
            fd = density.at(d);
        }
        n_evaluations += 1;
    }
    let refined = 0.5 * (a + b);
    let f_refined = density.at(refined);
    n_evaluations += 1;
    let mode = if f_refined >= best_f { refined } else { grid_x(best_k) };

    Ok(KdeResult {
        mode: mode.clamp(grid_lo, grid_hi),
        bandwidth: h,
        grid_lo,
        grid_hi,
        n_evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObbPolygon;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn det(conf: f64) -> ObbDetection {
        let p = ObbPolygon::from_array([[0.0, 0.0], [4.0, 0.0], [4.0, 2.0], [0.0, 2.0]]).unwrap();
        ObbDetection::new(p, conf, "small-vehicle")
    }

    #[test]
    fn threshold_keeps_boundary() {
        let dets = [det(0.05), det(0.10), det(0.95)];
        let kept: Vec<f64> = threshold_confidence(&dets, 0.1).iter().map(|d| d.confidence).collect();
        assert_eq!(kept, vec![0.10, 0.95]);
        assert!(threshold_confidence(&[], 0.1).is_empty());
        assert!(threshold_confidence(&[det(0.01), det(0.09)], 0.1).is_empty());
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 100.0]), Some(52.0));
    }

    #[test]
    fn outlier_examples() {
        assert_eq!(
            filter_outliers(&[10.0, 10.0, 11.0, 12.0, 30.0], 1.5),
            vec![10.0, 10.0, 11.0, 12.0]
        );
        assert_eq!(filter_outliers(&[7.0; 6], 1.5), vec![7.0; 6]);
        assert_eq!(filter_outliers(&[4.0, 100.0], 1.5), vec![4.0]);
        assert!(filter_outliers(&[], 1.5).is_empty());
    }

    #[test]
    fn outlier_filter_is_single_pass() {
        // First pass: median 11 -> cut 16.5 drops 30 only. A second pass would
        // recompute the median on the survivors.
        let input = [10.0, 10.0, 11.0, 16.0, 30.0];
        let once = filter_outliers(&input, 1.5);
        assert_eq!(once, vec![10.0, 10.0, 11.0, 16.0]);
        let twice = filter_outliers(&once, 1.4);
        assert_eq!(twice, vec![10.0, 10.0, 11.0]);
    }

    #[test]
    fn scott_examples() {
        let h = scott_bandwidth_of(&[0.0, 10.0], None).unwrap();
        assert_relative_eq!(h, 50f64.sqrt() * 2f64.powf(-0.2), epsilon = 1e-12);
        assert!((h - 6.1557).abs() < 1e-4);

        assert_eq!(scott_bandwidth_of(&[5.0], None), Err(StatsError::ZeroVariance));
        assert_eq!(
            scott_bandwidth_of(&[5.0, 5.0, 5.0], None),
            Err(StatsError::ZeroVariance)
        );
        assert_eq!(scott_bandwidth_of(&[], None), Err(StatsError::EmptySample));

        // 16 values at 8 and 16 at 12 (n - 1 = 31 denominator) rescaled so the
        // sample std is exactly 2; 32^(-1/5) = 1/2.
        let raw: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let s = sample_std(&raw).unwrap();
        let values: Vec<f64> = raw.iter().map(|r| 10.0 + 2.0 * r / s).collect();
        let sample = LengthSample::new(values).unwrap();
        assert_relative_eq!(scott_bandwidth(&sample).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scott_weighted_uses_effective_size() {
        let values = [10.0, 12.0, 20.0, 22.0];
        let uniform = scott_bandwidth_of(&values, Some(&[0.4; 4])).unwrap();
        assert_eq!(uniform, scott_bandwidth_of(&values, None).unwrap());
        let skewed = scott_bandwidth_of(&values, Some(&[1.0, 1.0, 0.1, 0.1])).unwrap();
        assert!(skewed.is_finite() && skewed > 0.0);
    }

    #[test]
    fn sample_validation() {
        assert!(matches!(
            LengthSample::new(vec![1.0, 0.0]),
            Err(StatsError::InvalidValue(_))
        ));
        assert!(matches!(
            LengthSample::new(vec![f64::NAN]),
            Err(StatsError::InvalidValue(_))
        ));
        assert_eq!(
            LengthSample::weighted(vec![1.0, 2.0], vec![1.0]),
            Err(StatsError::LengthMismatch { values: 2, weights: 1 })
        );
        assert_eq!(
            LengthSample::weighted(vec![1.0, 2.0], vec![0.0, 0.0]),
            Err(StatsError::InvalidWeights)
        );
        assert_eq!(
            LengthSample::weighted(vec![1.0, 2.0], vec![0.5, 1.5]),
            Err(StatsError::InvalidWeights)
        );
    }

    #[test]
    fn kde_degenerate_and_empty() {
        let r = kde_mode(&LengthSample::new(vec![42.0]).unwrap()).unwrap();
        assert_eq!(r.mode, 42.0);
        assert_eq!(r.bandwidth, 0.0);
        assert_eq!(r.n_evaluations, 0);
        let r = kde_mode(&LengthSample::new(vec![50.45; 30]).unwrap()).unwrap();
        assert_eq!(r.mode, 50.45);
        assert_eq!(
            kde_mode(&LengthSample::new(vec![]).unwrap()),
            Err(StatsError::EmptySample)
        );
    }

    #[test]
    fn kde_weighted_heavier_cluster_wins() {
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for i in 0..20 {
            let jitter = if i % 2 == 0 { 0.5 } else { -0.5 };
            values.push(30.0 + jitter);
            weights.push(1.0);
        }
        for i in 0..20 {
            let jitter = if i % 2 == 0 { 0.5 } else { -0.5 };
            values.push(60.0 + jitter);
            weights.push(0.1);
        }
        let sample = LengthSample::weighted(values, weights).unwrap();
        let r = kde_mode(&sample).unwrap();
        assert!((29.0..=31.0).contains(&r.mode), "mode {}", r.mode);
    }

    #[test]
    fn kde_symmetric_bimodal_breaks_toward_smaller() {
        let d = 0.1;
        let sample = LengthSample::new(vec![10.0 - d, 10.0 + d, 20.0 - d, 20.0 + d]).unwrap();
        let r = kde_mode(&sample).unwrap();
        assert!(r.mode < 15.0, "mode {}", r.mode);
    }

    #[test]
    fn kde_bandwidth_override() {
        let sample = LengthSample::new(vec![10.0, 11.0, 30.0]).unwrap();
        let r = kde_mode_with(
            &sample,
            &KdeOptions {
                bandwidth: Some(0.5),
                ..KdeOptions::default()
            },
        )
        .unwrap();
        assert_eq!(r.bandwidth, 0.5);
        assert!((r.mode - 10.5).abs() < 0.05);
        assert_eq!(
            kde_mode_with(
                &sample,
                &KdeOptions {
                    bandwidth: Some(-1.0),
                    ..KdeOptions::default()
                }
            ),
            Err(StatsError::InvalidBandwidth)
        );
    }

    #[test]
    fn kde_single_positive_weight_is_degenerate() {
        let sample = LengthSample::weighted(vec![10.0, 20.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(kde_mode(&sample).unwrap().mode, 20.0);
    }

    fn arb_values() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1.0..200.0f64, 2..60)
            .prop_filter("needs spread", |v| v.iter().any(|x| (x - v[0]).abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn outlier_output_is_subset(v in proptest::collection::vec(0.1..500.0f64, 0..50), alpha in 0.5..3.0f64) {
            let out = filter_outliers(&v, alpha);
            prop_assert!(out.len() <= v.len());
            prop_assert!(out.iter().all(|x| v.contains(x)));
        }

        #[test]
        fn kde_mode_within_bounds(v in arb_values()) {
            let r = kde_mode(&LengthSample::new(v.clone()).unwrap()).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.grid_lo <= r.mode && r.mode <= r.grid_hi);
            prop_assert!(r.mode >= lo - 3.0 * r.bandwidth - 1e-9);
            prop_assert!(r.mode <= hi + 3.0 * r.bandwidth + 1e-9);
            prop_assert!(r.bandwidth > 0.0);
        }

        #[test]
        fn kde_scale_equivariant(v in arb_values(), s in 0.1..10.0f64) {
            let base = kde_mode(&LengthSample::new(v.clone()).unwrap()).unwrap();
            let scaled = kde_mode(&LengthSample::new(v.iter().map(|x| x * s).collect()).unwrap()).unwrap();
            let tol = 0.005 * (base.grid_hi - base.grid_lo) * s;
            prop_assert!((scaled.mode - s * base.mode).abs() <= tol,
                "{} vs {}", scaled.mode, s * base.mode);
        }

        #[test]
        fn kde_translation_equivariant(v in arb_values(), t in 0.0..500.0f64) {
            let base = kde_mode(&LengthSample::new(v.clone()).unwrap()).unwrap();
            let moved = kde_mode(&LengthSample::new(v.iter().map(|x| x + t).collect()).unwrap()).unwrap();
            let tol = 0.005 * (base.grid_hi - base.grid_lo);
            prop_assert!((moved.mode - (base.mode + t)).abs() <= tol);
        }

        #[test]
        fn kde_equal_weights_match_unweighted(v in arb_values(), w in 0.01..1.0f64) {
            let plain = kde_mode(&LengthSample::new(v.clone()).unwrap()).unwrap();
            let n = v.len();
            let weighted = kde_mode(&LengthSample::weighted(v, vec![w; n]).unwrap()).unwrap();
            prop_assert_eq!(plain, weighted);
        }
    }
}
