//! Randomized gradient and oracle suites.
//!
//! Gradient suites compare analytic derivatives with central differences;
//! oracle suites compare the metric code with direct brute-force
//! evaluations. Every suite is seeded and reports how many instances agreed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Camera, CameraIntrinsics, GridSpec, Point3, Pose, Vec3};
use crate::image::{DepthMap, Image};
use crate::labeler::{LabelSet, PointCloud};
use crate::losses::{bce, photometric_loss, silog_values, weighted_l1, EMPTY_WEIGHT, PHOTOMETRIC_BETA};
use crate::metrics::{classification_metrics, depth_map_metrics, discrete_depth_metrics, MetricReport, WalkConfig};
use crate::render::{composite, composite_backward, render_depth_map_backward, RaySamples, RenderConfig, Renderer};
use crate::volume::{ActivationMode, Interp, ScalarGrid};

/// Relative agreement required between analytic and numeric gradients.
pub const GRAD_REL_TOL: f64 = 1e-5;
/// Absolute slack for gradients that are zero up to rounding.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;
/// Agreement required between metrics and their brute-force evaluation.
pub const ORACLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Largest error seen, relative for gradient suites and absolute for
    /// the others.
    pub worst: f64,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            passed: 0,
            total: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, ok: bool, err: f64) {
        self.total += 1;
        self.passed += ok as usize;
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
    }

    pub fn ok(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} {:>5}/{:<5} worst {:.3e}  {}",
            self.name,
            self.passed,
            self.total,
            self.worst,
            if self.ok() { "ok" } else { "FAIL" }
        )
    }
}

/// Whether `analytic` matches `numeric`, plus the relative error.
fn grad_agrees(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let ok = diff <= GRAD_REL_TOL * scale + GRAD_ABS_FLOOR;
    (ok, diff / scale.max(GRAD_ABS_FLOOR / GRAD_REL_TOL))
}

/// Folds per-component checks into one instance result.
#[derive(Default)]
struct Instance {
    ok: bool,
    worst: f64,
}

impl Instance {
    fn start() -> Self {
        Instance { ok: true, worst: 0.0 }
    }

    fn grad(&mut self, analytic: f64, numeric: f64) {
        let (ok, err) = grad_agrees(analytic, numeric);
        self.ok &= ok;
        self.worst = self.worst.max(err);
    }

    fn close(&mut self, a: f64, b: f64) {
        let err = (a - b).abs();
        self.ok &= err <= ORACLE_TOL;
        self.worst = self.worst.max(err);
    }

    fn exact(&mut self, cond: bool) {
        self.ok &= cond;
    }
}

fn random_samples(rng: &mut ChaCha8Rng) -> RaySamples {
    let n = rng.gen_range(1..=64);
    let mut t = Vec::with_capacity(n);
    let mut acc = rng.gen_range(0.1..2.0);
    for _ in 0..n {
        acc += rng.gen_range(0.05..0.6);
        t.push(acc);
    }
    let sigma = (0..n)
        .map(|_| match rng.gen_range(0..8) {
            0 => 0.0,
            1 => rng.gen_range(10.0..200.0),
            _ => rng.gen_range(0.0..10.0),
        })
        .collect();
    RaySamples::new(t, sigma, acc + rng.gen_range(0.0..1.0)).expect("valid samples")
}

/// Total opacity equals `1 - exp(-sum sigma delta)` on random rays.
pub fn composite_identity(rays: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("composite-identity");
    for _ in 0..rays {
        let s = random_samples(&mut rng);
        let tau: f64 = s.sigma.iter().zip(&s.delta).map(|(a, b)| a * b).sum();
        let r = composite(&s);
        let sum: f64 = r.weights.iter().sum();
        let err = (sum - (1.0 - (-tau).exp())).abs().max((r.opacity - sum).abs());
        rep.record(err <= 1e-9, err);
    }
    rep
}

/// A near-infinite first density puts all weight on the first sample.
pub fn composite_saturation(rays: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("composite-saturation");
    for _ in 0..rays {
        let mut s = random_samples(&mut rng);
        s.sigma[0] = 1e12;
        let err = (composite(&s).depth - s.t[0]).abs();
        rep.record(err <= 1e-6, err);
    }
    rep
}

pub fn composite_gradient(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("composite-backward");
    for _ in 0..instances {
        let s = random_samples(&mut rng);
        let upstream = rng.gen_range(-2.0..2.0);
        let g = composite_backward(&s, upstream);
        let mut inst = Instance::start();
        for k in 0..s.len() {
            let h = 1e-6 * s.sigma[k].max(1.0);
            let mut p = s.clone();
            let mut m = s.clone();
            p.sigma[k] += h;
            m.sigma[k] = (m.sigma[k] - h).max(0.0);
            let fd = upstream * (composite(&p).depth - composite(&m).depth) / (p.sigma[k] - m.sigma[k]);
            inst.grad(g[k], fd);
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

pub fn silog_gradient(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("silog-gradient");
    for _ in 0..instances {
        let n = rng.gen_range(2..40);
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..60.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.3..3.0)).collect();
        let (lambda, alpha) = (crate::losses::SILOG_LAMBDA, crate::losses::SILOG_ALPHA);
        let f = |p: &[f64]| silog_values(p, &gt, lambda, alpha).expect("valid silog").value;
        let g = silog_values(&pred, &gt, lambda, alpha).expect("valid silog").gradient.expect("gradient");
        let mut inst = Instance::start();
        for k in 0..n {
            let h = 1e-6 * pred[k];
            let mut p = pred.clone();
            p[k] += h;
            let fp = f(&p);
            p[k] -= 2.0 * h;
            let fm = f(&p);
            inst.grad(g[k], (fp - fm) / (2.0 * h));
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

pub fn bce_gradient(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("bce-gradient");
    for _ in 0..instances {
        let n = rng.gen_range(1..50);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let g = bce(&pred, &labels).expect("valid bce").gradient.expect("gradient");
        let mut inst = Instance::start();
        for k in 0..n {
            let h = 1e-7;
            let mut p = pred.clone();
            p[k] += h;
            let fp = bce(&p, &labels).expect("valid bce").value;
            p[k] -= 2.0 * h;
            let fm = bce(&p, &labels).expect("valid bce").value;
            inst.grad(g[k], (fp - fm) / (2.0 * h));
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

pub fn weighted_l1_gradient(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("weighted-l1-gradient");
    for _ in 0..instances {
        let occ: Vec<f64> = (0..rng.gen_range(0..30)).map(|_| rng.gen_range(0.01..0.99)).collect();
        let n_empty = rng.gen_range(usize::from(occ.is_empty())..30);
        let empty: Vec<f64> = (0..n_empty).map(|_| rng.gen_range(0.01..0.99)).collect();
        let g = weighted_l1(&occ, &empty, EMPTY_WEIGHT).expect("valid l1").gradient.expect("gradient");
        let f = |o: &[f64], e: &[f64]| weighted_l1(o, e, EMPTY_WEIGHT).expect("valid l1").value;
        let h = 1e-6;
        let mut inst = Instance::start();
        for k in 0..occ.len() + empty.len() {
            let (mut o, mut e) = (occ.clone(), empty.clone());
            let slot = |o: &mut Vec<f64>, e: &mut Vec<f64>, d: f64| {
                if k < occ.len() {
                    o[k] += d
                } else {
                    e[k - occ.len()] += d
                }
            };
            slot(&mut o, &mut e, h);
            let fp = f(&o, &e);
            slot(&mut o, &mut e, -2.0 * h);
            let fm = f(&o, &e);
            inst.grad(g[k], (fp - fm) / (2.0 * h));
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

pub fn photometric_gradient(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("photometric-gradient");
    for _ in 0..instances {
        let (w, h, c) = (rng.gen_range(2..7), rng.gen_range(2..6), rng.gen_range(1..=3));
        let mut random_image = || Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect());
        let target = random_image().expect("valid image");
        let synth = random_image().expect("valid image");
        let mut mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
        mask[0] = true;
        let beta = if rng.gen_bool(0.8) { PHOTOMETRIC_BETA } else { rng.gen_range(0.0..1.0) };
        let f = |s: &Image| photometric_loss(&target, s, &mask, beta).expect("valid loss").value;
        let g = photometric_loss(&target, &synth, &mask, beta).expect("valid loss").gradient.expect("gradient");
        let mut inst = Instance::start();
        for k in 0..w * h * c {
            let step = 1e-6;
            let mut s = synth.clone();
            s.data[k] += step;
            let fp = f(&s);
            s.data[k] -= 2.0 * step;
            let fm = f(&s);
            inst.grad(g[k], (fp - fm) / (2.0 * step));
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

/// Grid gradient of a weighted sum of rendered depths, in every mode.
pub fn render_gradient(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("render-backward");
    let spec = GridSpec::new([-1.0, -1.0, 1.0], [1.0, 1.0, 3.0], [3, 3, 3]).expect("valid spec");
    let intr = CameraIntrinsics::new(3.0, 3.0, 2.0, 2.0, 5, 5).expect("valid intrinsics");
    for i in 0..instances {
        let mode = [ActivationMode::Probability, ActivationMode::Density, ActivationMode::Sdf][i % 3];
        let values: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut grid = ScalarGrid::new(spec, values, mode, rng.gen_range(0.2..1.0)).expect("valid grid");
        let shift = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
        let cam = Camera::new("c", intr, Pose::from_translation(shift)).expect("valid camera");
        let interp = if rng.gen_bool(0.5) { Interp::Trilinear } else { Interp::Nearest };
        let cfg = RenderConfig {
            samples: rng.gen_range(8..32),
            near: 0.5,
            far: Some(3.3),
            interp,
            ..Default::default()
        };
        let weights: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |g: &ScalarGrid| {
            let r = Renderer::new(g, cfg).expect("valid renderer");
            let rays = crate::render::camera_rays(&cam, 0);
            r.render_rays(&rays).iter().zip(&weights).map(|(d, w)| d.depth * w).sum::<f64>()
        };
        let grad = render_depth_map_backward(&grid, &cam, &cfg, &weights).expect("valid backward");
        let h = 1e-6;
        let mut inst = Instance::start();
        for l in 0..27 {
            let orig = grid.values[l];
            grid.values[l] = orig + h;
            let fp = objective(&grid);
            grid.values[l] = orig - h;
            let fm = objective(&grid);
            grid.values[l] = orig;
            inst.grad(grad.values[l], (fp - fm) / (2.0 * h));
        }
        if mode == ActivationMode::Sdf {
            let b = grid.beta;
            grid.beta = b + h;
            let fp = objective(&grid);
            grid.beta = b - h;
            let fm = objective(&grid);
            grid.beta = b;
            inst.grad(grad.beta, (fp - fm) / (2.0 * h));
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

fn naive_metrics(pred: &[f64], gt: &[f64]) -> [f64; 8] {
    let n = pred.len() as f64;
    let mut out = [0.0; 8];
    for i in 0..pred.len() {
        out[0] += (pred[i] - gt[i]).abs() / gt[i];
        out[1] += (pred[i] - gt[i]).powi(2) / gt[i];
        out[2] += (pred[i] - gt[i]).powi(2);
        out[3] += (pred[i].ln() - gt[i].ln()).powi(2);
        let r = f64::max(pred[i] / gt[i], gt[i] / pred[i]);
        for (k, t) in [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if r < *t {
                out[4 + k] += 1.0;
            }
        }
    }
    for v in &mut out[..7] {
        *v /= n;
    }
    out[2] = out[2].sqrt();
    out[3] = out[3].sqrt();
    out[7] = n;
    out
}

fn report_array(r: &MetricReport) -> [f64; 8] {
    [r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3, r.n as f64]
}

/// Voxel containing `p` found by scanning every cell along each axis.
fn brute_voxel(spec: &GridSpec, p: &Point3) -> Option<[usize; 3]> {
    let vs = spec.voxel_size();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        idx[a] = (0..spec.dims[a]).find(|&i| {
            let lo = spec.min[a] + i as f64 * vs[a];
            let hi = if i + 1 == spec.dims[a] { spec.max[a] } else { lo + vs[a] };
            p[a] >= lo && p[a] < hi
        })?;
    }
    Some(idx)
}

fn brute_occupied(grid: &ScalarGrid, p: &Point3, threshold: f64) -> bool {
    let Some([i, j, k]) = brute_voxel(&grid.spec, p) else {
        return false;
    };
    let d = grid.spec.dims;
    let raw = grid.values[i + d[0] * (j + d[1] * k)];
    match grid.mode {
        ActivationMode::Probability => 1.0 / (1.0 + (-raw).exp()) >= threshold,
        ActivationMode::Density => (1.0 + raw.exp()).ln() >= threshold,
        ActivationMode::Sdf => raw >= threshold,
    }
}

fn random_grid(rng: &mut ChaCha8Rng) -> ScalarGrid {
    let dims = [rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=32)];
    let min = [rng.gen_range(-8.0..-1.0), rng.gen_range(-3.0..-0.5), rng.gen_range(-8.0..-1.0)];
    let max = [rng.gen_range(1.0..8.0), rng.gen_range(0.5..3.0), rng.gen_range(1.0..8.0)];
    let spec = GridSpec::new(min, max, dims).expect("valid spec");
    let mode = [ActivationMode::Probability, ActivationMode::Density, ActivationMode::Sdf][rng.gen_range(0..3)];
    let fill = rng.gen_range(0.02..0.4);
    let values = (0..spec.len())
        .map(|_| {
            if rng.gen_bool(fill) {
                rng.gen_range(0.5..4.0)
            } else {
                rng.gen_range(-4.0..0.3)
            }
        })
        .collect();
    ScalarGrid::new(spec, values, mode, 0.5).expect("valid grid")
}

fn random_point(rng: &mut ChaCha8Rng, spec: &GridSpec, overshoot: f64) -> Point3 {
    let c = |a: usize, rng: &mut ChaCha8Rng| {
        let pad = overshoot * (spec.max[a] - spec.min[a]);
        rng.gen_range(spec.min[a] - pad..spec.max[a] + pad)
    };
    Point3::new(c(0, rng), c(1, rng), c(2, rng))
}

/// Discrete depth metrics against a direct walk with a brute-force voxel
/// lookup.
pub fn discrete_depth_oracle(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("discrete-depth-oracle");
    for _ in 0..instances {
        let grid = random_grid(&mut rng);
        let spec = grid.spec;
        let origin = random_point(&mut rng, &spec, 0.0);
        let points: Vec<Point3> = (0..rng.gen_range(1..=50)).map(|_| random_point(&mut rng, &spec, 0.15)).collect();
        let threshold = match grid.mode {
            ActivationMode::Sdf => rng.gen_range(-0.5..0.5),
            _ => rng.gen_range(0.05..0.95),
        };
        let walk = WalkConfig {
            step: rng.gen_range(0.1..0.5),
            max: rng.gen_range(4.0..20.0),
        };
        let cloud = PointCloud::new(points.clone(), origin).expect("valid cloud");
        let (mut pred, mut gt, mut skipped) = (Vec::new(), Vec::new(), 0usize);
        for p in &points {
            let d = p - origin;
            let dist = d.norm();
            if brute_voxel(&spec, p).is_none() || dist > walk.max || dist == 0.0 {
                skipped += 1;
                continue;
            }
            let dir = d / dist;
            let mut depth = walk.max;
            let mut k = 1;
            while k as f64 * walk.step <= walk.max + 1e-9 * walk.max {
                let t = k as f64 * walk.step;
                if brute_occupied(&grid, &(origin + dir * t), threshold) {
                    depth = t;
                    break;
                }
                k += 1;
            }
            pred.push(depth);
            gt.push(dist);
        }
        let mut inst = Instance::start();
        match discrete_depth_metrics(&grid, &cloud, threshold, walk) {
            Ok(r) => {
                inst.exact(!gt.is_empty() && r.skipped == skipped);
                if !gt.is_empty() {
                    for (a, b) in report_array(&r.report).iter().zip(naive_metrics(&pred, &gt)) {
                        inst.close(*a, b);
                    }
                }
            }
            Err(_) => inst.exact(gt.is_empty()),
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

pub fn depth_map_oracle(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("depth-map-oracle");
    for _ in 0..instances {
        let (w, h) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let mut gt = DepthMap::invalid(w, h);
        let mut pred = DepthMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                let g = rng.gen_range(0.5..90.0);
                if rng.gen_bool(0.8) {
                    gt.set(x, y, g);
                }
                if rng.gen_bool(0.9) {
                    let p = if rng.gen_bool(0.05) { 1e-5 } else { g * rng.gen_range(0.4..2.5) };
                    pred.set(x, y, p);
                }
            }
        }
        let cap = rng.gen_range(20.0..100.0);
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for y in 0..h {
            for x in 0..w {
                if let (Some(a), Some(b)) = (pred.get(x, y), gt.get(x, y)) {
                    if b <= cap {
                        p.push(a.max(crate::metrics::MIN_PRED_DEPTH));
                        g.push(b);
                    }
                }
            }
        }
        let mut inst = Instance::start();
        match depth_map_metrics(&pred, &gt, cap) {
            Ok(r) => {
                inst.exact(!g.is_empty());
                if !g.is_empty() {
                    for (a, b) in report_array(&r).iter().zip(naive_metrics(&p, &g)) {
                        inst.close(*a, b);
                    }
                }
            }
            Err(_) => inst.exact(g.is_empty()),
        }
        rep.record(inst.ok, inst.worst);
    }
    rep
}

pub fn classification_oracle(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport::new("classification-oracle");
    for _ in 0..instances {
        let grid = random_grid(&mut rng);
        let spec = grid.spec;
        let threshold = match grid.mode {
            ActivationMode::Sdf => rng.gen_range(-0.5..0.5),
            _ => rng.gen_range(0.05..0.95),
        };
        let n = rng.gen_range(1..=50);
        let mut labels = LabelSet {
            occupied: Vec::new(),
            empty: Vec::new(),
            empty_source: Vec::new(),
            origin: Point3::origin(),
            samples_per_ray: 1,
            voxel_size: [0.0; 3],
        };
        for _ in 0..n {
            let p = random_point(&mut rng, &spec, 0.1);
            if rng.gen_bool(0.4) {
                labels.occupied.push(p);
            } else {
                labels.empty.push(p);
                labels.empty_source.push(0);
            }
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (p, occ) in labels.labeled_points() {
            match (brute_occupied(&grid, p, threshold), occ) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let r = classification_metrics(&grid, &labels, threshold).expect("non-empty labels");
        let mut inst = Instance::start();
        inst.exact((r.tp, r.fp, r.tn, r.fn_) == (tp, fp, tn, fn_));
        inst.close(r.precision, precision);
        inst.close(r.recall, recall);
        inst.close(r.f1, f1);
        inst.close(r.accuracy, ratio(tp + tn, n));
        inst.close(r.iou, ratio(tp, tp + fp + fn_));
        rep.record(inst.ok, inst.worst);
    }
    rep
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfcheckConfig {
    /// Instances per gradient and oracle suite.
    pub instances: usize,
    /// Rays for the compositing identities.
    pub rays: usize,
    /// Instances for the renderer gradient, which is the slowest suite.
    pub render_instances: usize,
    pub seed: u64,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        SelfcheckConfig {
            instances: 1000,
            rays: 10_000,
            render_instances: 100,
            seed: 0,
        }
    }
}

pub fn run_all(cfg: &SelfcheckConfig) -> Vec<SuiteReport> {
    let s = cfg.seed;
    let n = cfg.instances;
    vec![
        composite_identity(cfg.rays, s),
        composite_saturation(cfg.rays, s.wrapping_add(1)),
        composite_gradient(n, s.wrapping_add(2)),
        silog_gradient(n, s.wrapping_add(3)),
        bce_gradient(n, s.wrapping_add(4)),
        weighted_l1_gradient(n, s.wrapping_add(5)),
        photometric_gradient(n, s.wrapping_add(6)),
        render_gradient(cfg.render_instances, s.wrapping_add(7)),
        discrete_depth_oracle(n, s.wrapping_add(8)),
        depth_map_oracle(n, s.wrapping_add(9)),
        classification_oracle(n, s.wrapping_add(10)),
    ]
}
