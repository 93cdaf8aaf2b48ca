//! Depth and occupancy evaluation.
//!
//! Three families share one depth report: the discrete depth metric (walk a
//! lidar ray until the grid says occupied), dense depth-map comparison, and
//! binary classification of labeled key points.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::geometry::{Point3, Ray};
use crate::image::DepthMap;
use crate::labeler::{LabelSet, PointCloud};
use crate::volume::{sigmoid, softplus, ActivationMode, Interp, ScalarGrid};

/// Spacing of evaluation points along a lidar ray.
pub const DEPTH_STEP: f64 = 0.2;
/// Farthest evaluated distance; also the depth reported for all-empty rays.
pub const DEPTH_MAX: f64 = 52.0;

pub const CSV_HEADER: &str = "abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,n";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n: usize,
}

impl MetricReport {
    /// Statistics over paired positive predictions and ground truths,
    /// summed in input order.
    pub fn from_pairs(pred: &[f64], gt: &[f64]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(OccError::ShapeMismatch("prediction and ground truth lengths differ".into()));
        }
        if pred.is_empty() {
            return Err(OccError::Empty("no depth pairs to evaluate".into()));
        }
        if pred.iter().chain(gt).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(OccError::invalid("depths must be positive and finite"));
        }
        let t1 = 1.25;
        let (t2, t3) = (t1 * t1, t1 * t1 * t1);
        let mut s = [0.0f64; 4];
        let mut hits = [0usize; 3];
        for (&p, &g) in pred.iter().zip(gt) {
            let diff = p - g;
            s[0] += diff.abs() / g;
            s[1] += diff * diff / g;
            s[2] += diff * diff;
            let dl = p.ln() - g.ln();
            s[3] += dl * dl;
            let ratio = (p / g).max(g / p);
            hits[0] += (ratio < t1) as usize;
            hits[1] += (ratio < t2) as usize;
            hits[2] += (ratio < t3) as usize;
        }
        let n = pred.len() as f64;
        Ok(MetricReport {
            abs_rel: s[0] / n,
            sq_rel: s[1] / n,
            rmse: (s[2] / n).sqrt(),
            rmse_log: (s[3] / n).sqrt(),
            delta1: hits[0] as f64 / n,
            delta2: hits[1] as f64 / n,
            delta3: hits[2] as f64 / n,
            n: pred.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3, self.n
        )
    }

    pub fn pretty(&self) -> String {
        format!(
            "abs_rel {:.4}  sq_rel {:.4}  rmse {:.4}  rmse_log {:.4}  a1 {:.4}  a2 {:.4}  a3 {:.4}  (n = {})",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3, self.n
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub iou: f64,
}

impl ConfusionReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ConfusionReport {
            tp,
            fp,
            tn,
            fn_,
            f1,
            precision,
            recall,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            iou: ratio(tp, tp + fn_ + fp),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub const CSV_HEADER: &'static str = "tp,fp,tn,fn,f1,precision,recall,accuracy,iou";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.tp, self.fp, self.tn, self.fn_, self.f1, self.precision, self.recall, self.accuracy, self.iou
        )
    }
}

/// Occupancy decision for a raw voxel value.
#[inline]
pub fn occupied_raw(grid: &ScalarGrid, raw: f64, threshold: f64) -> bool {
    match grid.mode {
        ActivationMode::Probability => sigmoid(raw) >= threshold,
        ActivationMode::Density => softplus(raw) >= threshold,
        ActivationMode::Sdf if grid.sdf_sign_flip => raw <= threshold,
        ActivationMode::Sdf => raw >= threshold,
    }
}

/// Nearest-voxel occupancy at `p`; false outside the grid.
pub fn occupied_at(grid: &ScalarGrid, p: &Point3, threshold: f64) -> bool {
    grid.sample(p, Interp::Nearest)
        .is_some_and(|raw| occupied_raw(grid, raw, threshold))
}

fn step_count(step: f64, max: f64) -> Result<usize> {
    if !(step > 0.0 && max > step && max.is_finite()) {
        return Err(OccError::invalid(format!("invalid walk step {step} / max {max}")));
    }
    Ok((max / step + 1e-9).floor() as usize)
}

fn walk(grid: &ScalarGrid, ray: &Ray, threshold: f64, step: f64, max: f64, steps: usize) -> f64 {
    (1..=steps)
        .map(|k| k as f64 * step)
        .find(|&t| occupied_at(grid, &ray.at(t), threshold))
        .unwrap_or(max)
}

/// Distance of the first occupied evaluation point `k * step` (k ≥ 1,
/// `k * step ≤ max`) along `ray`, or `max` when none is occupied.
pub fn first_occupied_depth(grid: &ScalarGrid, ray: &Ray, threshold: f64, step: f64, max: f64) -> Result<f64> {
    let steps = step_count(step, max)?;
    Ok(walk(grid, ray, threshold, step, max, steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub step: f64,
    pub max: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            step: DEPTH_STEP,
            max: DEPTH_MAX,
        }
    }
}

/// Discrete depth report plus the number of ground-truth points skipped
/// because they were outside the grid, farther than the walk limit, or at
/// the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDepthReport {
    pub report: MetricReport,
    pub skipped: usize,
}

/// Per-point `(predicted, true)` distances for in-range points.
pub fn discrete_depth_pairs(
    grid: &ScalarGrid,
    cloud: &PointCloud,
    threshold: f64,
    walk_cfg: WalkConfig,
) -> Result<(Vec<(f64, f64)>, usize)> {
    let steps = step_count(walk_cfg.step, walk_cfg.max)?;
    let pairs: Vec<Option<(f64, f64)>> = cloud
        .points
        .par_iter()
        .map(|p| {
            if !grid.spec.contains(p) {
                return None;
            }
            let (ray, dist) = Ray::towards(cloud.origin, *p).ok()?;
            if dist > walk_cfg.max {
                return None;
            }
            Some((walk(grid, &ray, threshold, walk_cfg.step, walk_cfg.max, steps), dist))
        })
        .collect();
    let skipped = pairs.iter().filter(|p| p.is_none()).count();
    Ok((pairs.into_iter().flatten().collect(), skipped))
}

pub fn discrete_depth_metrics(
    grid: &ScalarGrid,
    cloud: &PointCloud,
    threshold: f64,
    walk_cfg: WalkConfig,
) -> Result<DiscreteDepthReport> {
    let (pairs, skipped) = discrete_depth_pairs(grid, cloud, threshold, walk_cfg)?;
    if pairs.is_empty() {
        return Err(OccError::Empty("no ground-truth points inside the evaluation range".into()));
    }
    let (pred, gt): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(DiscreteDepthReport {
        report: MetricReport::from_pairs(&pred, &gt)?,
        skipped,
    })
}

/// Predictions below this are clamped before evaluation.
pub const MIN_PRED_DEPTH: f64 = 1e-3;

/// Dense comparison on pixels valid in both maps with `0 < gt ≤ cap`.
pub fn depth_map_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<MetricReport> {
    if !pred.same_shape(gt) {
        return Err(OccError::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.depth.len() {
        let d = gt.depth[i];
        if pred.valid[i] && gt.valid[i] && d > 0.0 && d <= cap {
            p.push(pred.depth[i].max(MIN_PRED_DEPTH));
            g.push(d);
        }
    }
    MetricReport::from_pairs(&p, &g)
}

/// Pools several maps into one report (pixels weighted equally).
pub fn depth_maps_metrics(pairs: &[(&DepthMap, &DepthMap)], cap: f64) -> Result<MetricReport> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (pred, gt) in pairs {
        if !pred.same_shape(gt) {
            return Err(OccError::ShapeMismatch("depth map resolutions differ".into()));
        }
        for i in 0..gt.depth.len() {
            let d = gt.depth[i];
            if pred.valid[i] && gt.valid[i] && d > 0.0 && d <= cap {
                p.push(pred.depth[i].max(MIN_PRED_DEPTH));
                g.push(d);
            }
        }
    }
    MetricReport::from_pairs(&p, &g)
}

pub fn classification_metrics(grid: &ScalarGrid, labels: &LabelSet, threshold: f64) -> Result<ConfusionReport> {
    if labels.is_empty() {
        return Err(OccError::Empty("label set is empty".into()));
    }
    let count = |pts: &[Point3]| pts.par_iter().filter(|p| occupied_at(grid, p, threshold)).count();
    let tp = count(&labels.occupied);
    let fp = count(&labels.empty);
    Ok(ConfusionReport::from_counts(
        tp,
        fp,
        labels.empty.len() - fp,
        labels.occupied.len() - tp,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl ThresholdRange {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo < hi && step > 0.0 && lo.is_finite() && hi.is_finite()) {
            return Err(OccError::invalid(format!("invalid threshold range {lo}..{hi} step {step}")));
        }
        Ok(ThresholdRange { lo, hi, step })
    }

    /// 0 to 1 in steps of 0.05.
    pub fn probability() -> Self {
        ThresholdRange {
            lo: 0.0,
            hi: 1.0,
            step: 0.05,
        }
    }

    /// -0.5 to 0.5 in steps of 0.05.
    pub fn sdf() -> Self {
        ThresholdRange {
            lo: -0.5,
            hi: 0.5,
            step: 0.05,
        }
    }

    pub fn for_mode(mode: ActivationMode) -> Self {
        match mode {
            ActivationMode::Sdf => Self::sdf(),
            _ => Self::probability(),
        }
    }

    /// `lo + k * step` for every k with the value ≤ `hi`, rounded to 1e-9 so
    /// that printed thresholds are clean.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| ((self.lo + k as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub report: DiscreteDepthReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub best_index: usize,
}

impl SweepResult {
    pub fn best(&self) -> &SweepRow {
        &self.rows[self.best_index]
    }

    pub fn csv(&self) -> String {
        let mut out = format!("threshold,{CSV_HEADER},skipped\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.threshold, r.report.report.csv_row(), r.report.skipped);
        }
        out
    }
}

/// Discrete depth metrics at every threshold; the best row minimizes
/// abs_rel with ties going to the smaller threshold.
pub fn threshold_sweep(
    grid: &ScalarGrid,
    cloud: &PointCloud,
    range: ThresholdRange,
    walk_cfg: WalkConfig,
) -> Result<SweepResult> {
    ThresholdRange::new(range.lo, range.hi, range.step)?;
    let mut rows = Vec::new();
    for threshold in range.values() {
        rows.push(SweepRow {
            threshold,
            report: discrete_depth_metrics(grid, cloud, threshold, walk_cfg)?,
        });
    }
    let mut best_index = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.report.report.abs_rel < rows[best_index].report.report.abs_rel {
            best_index = i;
        }
    }
    Ok(SweepResult { rows, best_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GridSpec, Vec3};
    use crate::labeler::{generate_labels, voxelize};

    fn naive_report(pred: &[f64], gt: &[f64]) -> [f64; 7] {
        let n = pred.len() as f64;
        let mut out = [0.0; 7];
        for i in 0..pred.len() {
            out[0] += (pred[i] - gt[i]).abs() / gt[i] / n;
            out[1] += (pred[i] - gt[i]).powi(2) / gt[i] / n;
            out[2] += (pred[i] - gt[i]).powi(2) / n;
            out[3] += (pred[i].ln() - gt[i].ln()).powi(2) / n;
            let r = f64::max(pred[i] / gt[i], gt[i] / pred[i]);
            for (k, t) in [1.25, 1.5625, 1.953125].iter().enumerate() {
                if r < *t {
                    out[4 + k] += 1.0 / n;
                }
            }
        }
        out[2] = out[2].sqrt();
        out[3] = out[3].sqrt();
        out
    }

    #[test]
    fn four_pixel_hand_case() {
        let pred = [2.0, 3.0, 10.0, 0.5];
        let gt = [2.5, 3.0, 6.0, 1.0];
        let r = MetricReport::from_pairs(&pred, &gt).unwrap();
        let abs_rel = (0.5 / 2.5 + 0.0 + 4.0 / 6.0 + 0.5) / 4.0;
        let sq_rel = (0.25 / 2.5 + 0.0 + 16.0 / 6.0 + 0.25) / 4.0;
        let rmse = ((0.25 + 0.0 + 16.0 + 0.25) / 4.0f64).sqrt();
        let rmse_log = (((2.0f64 / 2.5).ln().powi(2) + (10.0f64 / 6.0).ln().powi(2) + 2.0f64.ln().powi(2)) / 4.0).sqrt();
        assert!((r.abs_rel - abs_rel).abs() < 1e-12);
        assert!((r.sq_rel - sq_rel).abs() < 1e-12);
        assert!((r.rmse - rmse).abs() < 1e-12);
        assert!((r.rmse_log - rmse_log).abs() < 1e-12);
        // ratios 1.25, 1, 1.667, 2
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.25, 0.5, 0.75));
    }

    #[test]
    fn constant_ratio_boundary_is_strict() {
        let gt: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * 1.25).collect();
        let r = MetricReport::from_pairs(&pred, &gt).unwrap();
        assert_eq!(r.delta1, 0.0);
        assert_eq!((r.delta2, r.delta3), (1.0, 1.0));
        assert!((r.abs_rel - 0.25).abs() < 1e-12);
        let same = MetricReport::from_pairs(&gt, &gt).unwrap();
        assert_eq!((same.abs_rel, same.rmse, same.delta1), (0.0, 0.0, 1.0));
    }

    #[test]
    fn randomized_against_naive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..60.0)).collect();
            let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.4..2.5)).collect();
            let r = MetricReport::from_pairs(&pred, &gt).unwrap();
            let o = naive_report(&pred, &gt);
            let got = [r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3];
            for k in 0..7 {
                assert!((got[k] - o[k]).abs() < 1e-9);
            }
            assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3 && r.delta3 <= 1.0);
        }
    }

    #[test]
    fn confusion_formulas() {
        let c = ConfusionReport::from_counts(6, 2, 10, 3);
        assert!((c.precision - 0.75).abs() < 1e-15);
        assert!((c.recall - 6.0 / 9.0).abs() < 1e-15);
        assert!((c.iou - 6.0 / 11.0).abs() < 1e-15);
        assert!((c.accuracy - 16.0 / 21.0).abs() < 1e-15);
        let zero = ConfusionReport::from_counts(0, 0, 5, 0);
        assert_eq!((zero.precision, zero.recall, zero.f1, zero.iou), (0.0, 0.0, 0.0, 0.0));
    }

    fn unit_spec() -> GridSpec {
        GridSpec::new([-8.0, -8.0, -8.0], [8.0, 8.0, 8.0], [16, 16, 16]).unwrap()
    }

    #[test]
    fn occupancy_decisions() {
        let g = ScalarGrid::filled(unit_spec(), ActivationMode::Probability, 0.0).unwrap();
        assert!(occupied_at(&g, &Point3::new(1.0, 2.0, 3.0), 0.5));
        assert!(!occupied_at(&g, &Point3::new(9.0, 0.0, 0.0), 0.5));

        let radius = 4.0;
        let sphere = |p: &Point3| radius - p.coords.norm();
        let sdf = ScalarGrid::from_fn(unit_spec(), ActivationMode::Sdf, sphere).unwrap();
        let flipped = ScalarGrid::from_fn(unit_spec(), ActivationMode::Sdf, |p| -sphere(p))
            .unwrap()
            .with_sign_flip(true);
        for i in 0..sdf.spec.len() {
            let c = sdf.spec.voxel_center(sdf.spec.unravel(i)).unwrap();
            let inside = c.coords.norm() <= radius;
            assert_eq!(occupied_at(&sdf, &c, 0.0), inside);
            assert_eq!(occupied_at(&flipped, &c, 0.0), inside);
        }
    }

    #[test]
    fn walk_rules() {
        let ray = Ray::new(Point3::new(-7.9, 0.1, 0.1), Vec3::x()).unwrap();
        let full = ScalarGrid::filled(unit_spec(), ActivationMode::Probability, 5.0).unwrap();
        let empty = ScalarGrid::filled(unit_spec(), ActivationMode::Probability, -5.0).unwrap();
        assert_eq!(first_occupied_depth(&full, &ray, 0.5, DEPTH_STEP, DEPTH_MAX).unwrap(), 0.2);
        assert_eq!(first_occupied_depth(&empty, &ray, 0.5, DEPTH_STEP, DEPTH_MAX).unwrap(), 52.0);

        // One voxel straddling x = 2.1 (t = 10.0 from x = -7.9).
        let mut one = empty.clone();
        let idx = unit_spec().voxel_index(&Point3::new(2.1, 0.1, 0.1)).unwrap();
        one.set(idx, 5.0);
        let brute = (1..=260)
            .map(|k| k as f64 * 0.2)
            .find(|t| unit_spec().voxel_index(&ray.at(*t)) == Some(idx))
            .unwrap();
        let d = first_occupied_depth(&one, &ray, 0.5, DEPTH_STEP, DEPTH_MAX).unwrap();
        assert_eq!(d, brute);
        assert!((d - 10.0).abs() <= 0.2 + 1e-9);
    }

    #[test]
    fn empty_grid_last_point_rule() {
        let spec = GridSpec::new([-30.0, -30.0, -30.0], [30.0, 30.0, 30.0], [30, 30, 30]).unwrap();
        let g = ScalarGrid::filled(spec, ActivationMode::Probability, -5.0).unwrap();
        let pts: Vec<Point3> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.7;
                Point3::new(26.0 * a.cos(), 0.0, 26.0 * a.sin())
            })
            .collect();
        let cloud = PointCloud::new(pts, Point3::origin()).unwrap();
        let r = discrete_depth_metrics(&g, &cloud, 0.5, WalkConfig::default()).unwrap();
        assert!((r.report.abs_rel - 1.0).abs() < 1e-12);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn classification_perfect_and_inverted() {
        let spec = GridSpec::new([-8.0, 0.0, -8.0], [8.0, 4.0, 8.0], [40, 10, 40]).unwrap();
        let pts = vec![Point3::new(5.0, 1.1, 5.0), Point3::new(-6.0, 2.3, 1.0), Point3::new(2.0, 0.5, -7.0)];
        let cloud = PointCloud::new(pts, Point3::new(0.0, 1.5, 0.0)).unwrap();
        let occ = voxelize(&cloud, &spec);
        let labels = generate_labels(&cloud, &spec, 30, 0).unwrap();
        let grid = ScalarGrid::from_fn(spec, ActivationMode::Probability, |p| {
            if occ.contains(&spec.voxel_index(p).unwrap()) { 10.0 } else { -10.0 }
        })
        .unwrap();
        let c = classification_metrics(&grid, &labels, 0.5).unwrap();
        assert_eq!((c.f1, c.precision, c.recall, c.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(c.total(), labels.len());
        let mut inv = grid.clone();
        inv.values.iter_mut().for_each(|v| *v = -*v);
        let c = classification_metrics(&inv, &labels, 0.5).unwrap();
        assert_eq!((c.accuracy, c.f1), (0.0, 0.0));
    }

    #[test]
    fn sweep_tie_breaks_to_smallest() {
        let spec = GridSpec::new([-30.0, -30.0, -30.0], [30.0, 30.0, 30.0], [30, 30, 30]).unwrap();
        let g = ScalarGrid::filled(spec, ActivationMode::Probability, 0.3).unwrap();
        let cloud = PointCloud::new(vec![Point3::new(10.0, 0.0, 0.0)], Point3::origin()).unwrap();
        let sweep = threshold_sweep(&g, &cloud, ThresholdRange::probability(), WalkConfig::default()).unwrap();
        assert_eq!(sweep.rows.len(), 21);
        assert_eq!(sweep.best().threshold, 0.0);
        let values = ThresholdRange::probability().values();
        assert_eq!(values[3], 0.15);
        assert_eq!(values[20], 1.0);
        assert_eq!(ThresholdRange::sdf().values().len(), 21);
    }
}
