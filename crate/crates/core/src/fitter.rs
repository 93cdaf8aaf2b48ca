//! Synthetic scenes with exact ray-cast ground truth, and direct Adam
//! fitting of a raw voxel grid against rendered depth, point labels or
//! photometric consistency.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::geometry::{Camera, CameraIntrinsics, CameraRig, GridSpec, Point3, Pose, Ray, Vec3};
use crate::image::{DepthMap, Image};
use crate::labeler::{LabelSet, PointCloud};
use crate::losses::{self, LossValue};
use crate::render::{camera_rays, ray_seed, GridGradient, Jitter, PixelRay, RenderConfig, Renderer};
use crate::volume::{sigmoid, softplus_inverse, ActivationMode, ScalarGrid, Stencil};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Primitive {
    /// Horizontal plane `y = height`; everything below is solid.
    Ground { height: f64 },
    /// Solid axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
}

/// Where a ray first meets the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    /// Unit surface normal facing the ray origin's side.
    pub normal: Vec3,
    pub primitive: usize,
}

impl Primitive {
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Ground { height } => {
                let d = ray.direction.y;
                if d.abs() < 1e-12 {
                    return None;
                }
                let t = (height - ray.origin.y) / d;
                let up = if ray.origin.y >= height { 1.0 } else { -1.0 };
                (t > 0.0).then(|| (t, Vec3::new(0.0, up, 0.0)))
            }
            Primitive::Box { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0;
                let mut axis1 = 0;
                for a in 0..3 {
                    let (o, d) = (ray.origin[a], ray.direction[a]);
                    if d.abs() < 1e-300 {
                        if o < min[a] || o > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o) / d, (max[a] - o) / d);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis1 = a;
                    }
                }
                if t0 > t1 || t1 <= 0.0 {
                    return None;
                }
                let (t, axis, entering) = if t0 > 0.0 { (t0, axis0, true) } else { (t1, axis1, false) };
                let mut n = Vec3::zeros();
                let s = ray.direction[axis].signum();
                n[axis] = if entering { -s } else { s };
                Some((t, n))
            }
        }
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: &Point3) -> f64 {
        match *self {
            Primitive::Ground { height } => p.y - height,
            Primitive::Box { min, max } => {
                let mut outside = 0.0f64;
                let mut inside = f64::NEG_INFINITY;
                for a in 0..3 {
                    let c = 0.5 * (min[a] + max[a]);
                    let h = 0.5 * (max[a] - min[a]);
                    let q = (p[a] - c).abs() - h;
                    outside += q.max(0.0).powi(2);
                    inside = inside.max(q);
                }
                outside.sqrt() + inside.min(0.0)
            }
        }
    }

    fn top(&self) -> f64 {
        match *self {
            Primitive::Ground { height } => height,
            Primitive::Box { max, .. } => max[1],
        }
    }
}

/// Ring-by-azimuth lidar scan pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPattern {
    pub origin: [f64; 3],
    pub rings: usize,
    pub azimuth_steps: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl LidarPattern {
    /// Unit scan directions. With `offset`, rings and azimuths shift by half
    /// a step, giving an interleaved scan that shares no ray with the
    /// regular one.
    pub fn directions(&self, offset: bool) -> Vec<Vec3> {
        let o = if offset { 0.5 } else { 0.0 };
        let ring_step = if self.rings > 1 {
            (self.elevation_max_deg - self.elevation_min_deg) / (self.rings - 1) as f64
        } else {
            0.0
        };
        let rings = if offset && self.rings > 1 { self.rings - 1 } else { self.rings };
        let mut out = Vec::with_capacity(rings * self.azimuth_steps);
        for r in 0..rings {
            let el = (self.elevation_min_deg + (r as f64 + o) * ring_step).to_radians();
            for a in 0..self.azimuth_steps {
                let az = std::f64::consts::TAU * (a as f64 + o) / self.azimuth_steps as f64;
                out.push(Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()));
            }
        }
        out
    }

    pub fn origin_point(&self) -> Point3 {
        Point3::from(self.origin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: GridSpec,
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(grid: GridSpec, primitives: Vec<Primitive>) -> Result<Self> {
        grid.validate()?;
        if primitives.is_empty() {
            return Err(OccError::invalid("scene needs at least one primitive"));
        }
        for p in &primitives {
            if let Primitive::Box { min, max } = p {
                let ok = (0..3).all(|a| min[a] < max[a] && min[a] >= grid.min[a] && max[a] <= grid.max[a]);
                if !ok {
                    return Err(OccError::invalid("boxes must be non-empty and inside the grid"));
                }
            }
        }
        Ok(Scene { grid, primitives })
    }

    /// Ground plane plus two boxes in a 25.6 m x 3.2 m x 25.6 m grid of
    /// 0.4 m voxels. Every face lies 1 cm inside a voxel boundary, so the
    /// voxelization of the surfaces is tight.
    pub fn default_scene() -> Self {
        let grid = GridSpec::new([-12.8, 0.0, -12.8], [12.8, 3.2, 12.8], [64, 8, 64]).expect("valid grid");
        Scene::new(
            grid,
            vec![
                Primitive::Ground { height: 0.39 },
                Primitive::Box {
                    min: [2.01, 0.39, 3.21],
                    max: [3.99, 1.19, 5.59],
                },
                Primitive::Box {
                    min: [-5.19, 0.39, -3.99],
                    max: [-3.21, 1.59, -2.41],
                },
            ],
        )
        .expect("valid scene")
    }

    /// Nearest positive intersection closer than `max`.
    pub fn raycast(&self, ray: &Ray, max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.intersect(ray) {
                if t <= max && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, normal, primitive: i });
                }
            }
        }
        best
    }

    /// Nearest hit that lies inside the grid box.
    pub fn raycast_in_grid(&self, ray: &Ray, max: f64) -> Option<Hit> {
        let hit = self.raycast(ray, max)?;
        let p = ray.at(hit.t);
        let tol = 1e-9;
        (0..3)
            .all(|a| p[a] >= self.grid.min[a] - tol && p[a] < self.grid.max[a] + tol)
            .then_some(hit)
    }

    pub fn sdf(&self, p: &Point3) -> f64 {
        self.primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Height of the tallest primitive's top face.
    pub fn top(&self) -> f64 {
        self.primitives.iter().map(Primitive::top).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Scene geometry plus the sensors that observe it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSetup {
    pub scene: Scene,
    pub rig: CameraRig,
    pub lidar: LidarPattern,
}

impl SyntheticSetup {
    /// Six cameras at 2 m looking slightly down, 160x96 pixels, and a lidar
    /// at 1.8 m scanning 32 rings between -20 and +10 degrees.
    pub fn default_setup() -> Self {
        let intr = CameraIntrinsics::new(80.0, 80.0, 79.5, 47.5, 160, 96).expect("valid intrinsics");
        let rig = CameraRig::surround(Point3::new(0.0, 2.0, 0.0), 6, intr, -0.2).expect("valid rig");
        SyntheticSetup {
            scene: Scene::default_scene(),
            rig,
            lidar: LidarPattern {
                origin: [0.05, 1.8, 0.05],
                rings: 32,
                azimuth_steps: 360,
                elevation_min_deg: -20.0,
                elevation_max_deg: 10.0,
            },
        }
    }
}

/// Exact ground truth rendered from a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticViews {
    pub depth: Vec<DepthMap>,
    pub cloud: PointCloud,
    pub images: Vec<Image>,
}

fn albedo(p: &Point3) -> f64 {
    0.5 + 0.22 * (2.3 * p.x).sin() * (1.9 * p.z).cos() + 0.14 * (3.1 * p.y + 0.7 * p.x).sin() + 0.08 * (5.3 * p.z).sin()
}

const SKY: f64 = 0.95;

/// Lambertian shading of a hit under a fixed directional light.
pub fn shade(p: &Point3, normal: &Vec3) -> f64 {
    let light = Vec3::new(0.4, 1.0, 0.3).normalize();
    albedo(p) * (0.35 + 0.65 * normal.dot(&light).max(0.0))
}

/// z-depth map and shaded image seen by `camera`. Pixels whose ray misses
/// the in-grid scene are invalid and shaded with the sky value.
pub fn render_truth(scene: &Scene, camera: &Camera) -> (DepthMap, Image) {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let max = scene.grid.diagonal();
    let rows: Vec<Vec<(Option<f64>, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (ray, cos) = camera.pixel_ray(x as f64, y as f64);
                    match scene.raycast_in_grid(&ray, max) {
                        Some(hit) => (Some(hit.t * cos), shade(&ray.at(hit.t), &hit.normal)),
                        None => (None, SKY),
                    }
                })
                .collect()
        })
        .collect();
    let mut depth = DepthMap::invalid(w, h);
    let mut image = Image::filled(w, h, 1, SKY);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (d, s)) in row.into_iter().enumerate() {
            if let Some(d) = d {
                depth.set(x, y, d);
            }
            image.pixel_mut(x, y)[0] = s;
        }
    }
    (depth, image)
}

/// Lidar returns inside the grid for the given scan directions.
pub fn scan(scene: &Scene, lidar: &LidarPattern, offset: bool) -> PointCloud {
    let origin = lidar.origin_point();
    let max = scene.grid.diagonal();
    let points: Vec<Point3> = lidar
        .directions(offset)
        .par_iter()
        .filter_map(|d| {
            let ray = Ray::new(origin, *d).ok()?;
            scene.raycast_in_grid(&ray, max).map(|h| ray.at(h.t))
        })
        .collect();
    PointCloud { points, origin }
}

pub fn synthesize_views(setup: &SyntheticSetup) -> Result<SyntheticViews> {
    if setup.rig.is_empty() {
        return Err(OccError::invalid("camera rig is empty"));
    }
    let (depth, images) = setup.rig.cameras.iter().map(|c| render_truth(&setup.scene, c)).unzip();
    Ok(SyntheticViews {
        depth,
        cloud: scan(&setup.scene, &setup.lidar, false),
        images,
    })
}

/// Target/source image pair for one camera with the rigid transform from
/// target-camera to source-camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoPair {
    pub target: Image,
    pub source: Image,
    pub target_to_source: Pose,
}

/// For each rig camera, a second view displaced by `motion` (the source
/// camera's pose expressed in the target camera frame).
pub fn synthesize_pairs(scene: &Scene, rig: &CameraRig, motion: &Pose) -> Result<Vec<PhotoPair>> {
    rig.cameras
        .iter()
        .map(|cam| {
            let src_cam = Camera::new(
                format!("{}-source", cam.name),
                cam.intrinsics,
                cam.cam_to_world().compose(motion),
            )?;
            let (_, target) = render_truth(scene, cam);
            let (_, source) = render_truth(scene, &src_cam);
            Ok(PhotoPair {
                target,
                source,
                target_to_source: motion.inverse(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Silog,
    Bce,
    #[serde(rename = "l1")]
    WeightedL1,
    Photometric,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Silog => "silog",
            LossKind::Bce => "bce",
            LossKind::WeightedL1 => "l1",
            LossKind::Photometric => "photometric",
        }
    }

    /// Activation mode a fresh grid uses for this loss.
    pub fn default_mode(self) -> ActivationMode {
        match self {
            LossKind::Bce | LossKind::WeightedL1 => ActivationMode::Probability,
            LossKind::Silog | LossKind::Photometric => ActivationMode::Density,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = OccError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silog" | "depth" => Ok(LossKind::Silog),
            "bce" => Ok(LossKind::Bce),
            "l1" | "weighted-l1" => Ok(LossKind::WeightedL1),
            "photometric" | "self" => Ok(LossKind::Photometric),
            other => Err(OccError::invalid(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub kind: LossKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters: usize,
    pub losses: Vec<LossTerm>,
    /// Pixel rays per iteration for the depth loss.
    pub ray_batch: usize,
    /// Labeled points per iteration for the classification losses.
    pub label_batch: usize,
    pub render: RenderConfig,
}

impl OptimConfig {
    pub fn single(kind: LossKind, iters: usize) -> Self {
        OptimConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iters,
            losses: vec![LossTerm { kind, weight: 1.0 }],
            ray_batch: 1024,
            label_batch: 4096,
            render: RenderConfig {
                jitter: Jitter::Stratified(0),
                ..RenderConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(OccError::invalid("learning rate must be non-negative"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(OccError::invalid("Adam moments must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) || self.iters == 0 || self.losses.is_empty() {
            return Err(OccError::invalid("need eps > 0, iters >= 1 and at least one loss"));
        }
        if self.ray_batch == 0 || self.label_batch == 0 {
            return Err(OccError::invalid("batch sizes must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.lr != 0.0 {
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Freshly initialized grid: probability 0.5, density 0.01, or signed
/// distance of half a voxel diagonal.
pub fn initial_grid(spec: GridSpec, mode: ActivationMode) -> Result<ScalarGrid> {
    let v = match mode {
        ActivationMode::Probability => 0.0,
        ActivationMode::Density => softplus_inverse(0.01),
        ActivationMode::Sdf => 0.5 * spec.voxel_diagonal(),
    };
    ScalarGrid::filled(spec, mode, v)
}

/// Supervision available to the fitter.
#[derive(Debug, Clone, Default)]
pub struct FitTargets {
    pub rig: CameraRig,
    /// One ground-truth depth map per rig camera.
    pub depth: Vec<DepthMap>,
    pub labels: Option<LabelSet>,
    /// One pair per rig camera.
    pub pairs: Vec<PhotoPair>,
}

/// Displacement of each photometric source view in its target camera frame.
pub fn default_pair_motion() -> Pose {
    Pose::from_translation(Vec3::new(0.3, 0.0, 0.5))
}

/// Ground truth for `setup` and the supervision `losses` need: depth maps
/// always, labels from the training scan for the classification losses,
/// and image pairs for the photometric loss.
pub fn synthetic_targets(setup: &SyntheticSetup, losses: &[LossTerm], label_seed: u64) -> Result<(SyntheticViews, FitTargets)> {
    let views = synthesize_views(setup)?;
    let needs = |k: &[LossKind]| losses.iter().any(|t| k.contains(&t.kind));
    let labels = if needs(&[LossKind::Bce, LossKind::WeightedL1]) {
        Some(crate::labeler::generate_labels(
            &views.cloud,
            &setup.scene.grid,
            crate::labeler::SAMPLES_PER_RAY,
            label_seed,
        )?)
    } else {
        None
    };
    let pairs = if needs(&[LossKind::Photometric]) {
        synthesize_pairs(&setup.scene, &setup.rig, &default_pair_motion())?
    } else {
        Vec::new()
    };
    let targets = FitTargets {
        rig: setup.rig.clone(),
        depth: views.depth.clone(),
        labels,
        pairs,
    };
    Ok((views, targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub grid: ScalarGrid,
    pub curve: Vec<CurvePoint>,
    pub wall_ms: f64,
    /// 50-iteration windows whose mean loss exceeded the previous window's.
    pub rising_windows: usize,
}

impl FitResult {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iter,loss,wall_ms\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{:.3}\n", p.iter, p.loss, p.wall_ms));
        }
        s
    }
}

struct PreparedTargets<'a> {
    targets: &'a FitTargets,
    /// (camera, pixel, gt depth) of every valid ground-truth pixel.
    pixels: Vec<(usize, usize, f64)>,
    occupied: Vec<Stencil>,
    empty: Vec<Stencil>,
    /// Stencils of all labels with their label, occupied first.
    all: Vec<(Stencil, bool)>,
}

impl<'a> PreparedTargets<'a> {
    fn new(grid: &ScalarGrid, targets: &'a FitTargets, cfg: &OptimConfig) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut occupied = Vec::new();
        let mut empty = Vec::new();
        for term in &cfg.losses {
            match term.kind {
                LossKind::Silog => {
                    if targets.depth.len() != targets.rig.len() || targets.depth.is_empty() {
                        return Err(OccError::invalid("depth loss needs one ground-truth map per camera"));
                    }
                    if pixels.is_empty() {
                        for (c, map) in targets.depth.iter().enumerate() {
                            let cam = &targets.rig.cameras[c];
                            if map.width != cam.intrinsics.width || map.height != cam.intrinsics.height {
                                return Err(OccError::ShapeMismatch("depth map does not match its camera".into()));
                            }
                            for (i, (&d, &v)) in map.depth.iter().zip(&map.valid).enumerate() {
                                if v && d > 0.0 {
                                    pixels.push((c, i, d));
                                }
                            }
                        }
                        if pixels.is_empty() {
                            return Err(OccError::Empty("no valid ground-truth depth pixels".into()));
                        }
                    }
                }
                LossKind::Bce | LossKind::WeightedL1 => {
                    if grid.mode != ActivationMode::Probability {
                        return Err(OccError::invalid(format!(
                            "the {} loss needs a probability grid, got {}",
                            term.kind.name(),
                            grid.mode.name()
                        )));
                    }
                    let labels = targets
                        .labels
                        .as_ref()
                        .ok_or_else(|| OccError::invalid("classification losses need labels"))?;
                    if occupied.is_empty() && empty.is_empty() {
                        occupied = labels.occupied.iter().filter_map(|p| grid.trilinear_stencil(p)).collect();
                        empty = labels.empty.iter().filter_map(|p| grid.trilinear_stencil(p)).collect();
                        if occupied.is_empty() && empty.is_empty() {
                            return Err(OccError::Empty("no labels inside the grid".into()));
                        }
                    }
                }
                LossKind::Photometric => {
                    if targets.pairs.len() != targets.rig.len() || targets.pairs.is_empty() {
                        return Err(OccError::invalid("photometric loss needs one image pair per camera"));
                    }
                }
            }
        }
        let all = occupied
            .iter()
            .map(|s| (*s, true))
            .chain(empty.iter().map(|s| (*s, false)))
            .collect();
        Ok(PreparedTargets {
            targets,
            pixels,
            occupied,
            empty,
            all,
        })
    }
}

#[inline]
fn stencil_read(grid: &ScalarGrid, st: &Stencil) -> f64 {
    st.iter().map(|&(l, w)| w * grid.values[l]).sum()
}

fn iter_seed(seed: u64, iter: usize) -> u64 {
    ray_seed(seed, 0x5EED_0000_0000 + iter as u64)
}

fn silog_term(grid: &ScalarGrid, prep: &PreparedTargets, cfg: &OptimConfig, seed: u64, iter: usize) -> Result<(f64, GridGradient)> {
    let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(seed, 1 + 2 * iter as u64));
    let rig = &prep.targets.rig;
    let mut rays = Vec::with_capacity(cfg.ray_batch);
    let mut gt = Vec::with_capacity(cfg.ray_batch);
    for _ in 0..cfg.ray_batch {
        let (c, i, d) = prep.pixels[rng.gen_range(0..prep.pixels.len())];
        let cam = &rig.cameras[c];
        let w = cam.intrinsics.width;
        let (ray, cos) = cam.pixel_ray((i % w) as f64, (i / w) as f64);
        rays.push(PixelRay {
            ray,
            cos,
            key: (c * w * cam.intrinsics.height + i) as u64,
        });
        gt.push(d);
    }
    let render_cfg = RenderConfig {
        jitter: jitter_for(cfg.render.jitter, seed, iter),
        ..cfg.render
    };
    let renderer = Renderer::new(grid, render_cfg)?;
    let out = renderer.render_rays(&rays);
    let floor = crate::metrics::MIN_PRED_DEPTH;
    let pred: Vec<f64> = out.iter().map(|r| r.depth.max(floor)).collect();
    let loss = losses::silog_values(&pred, &gt, losses::SILOG_LAMBDA, losses::SILOG_ALPHA)?;
    let upstream: Vec<f64> = loss
        .gradient
        .expect("silog gradient")
        .iter()
        .zip(&out)
        .map(|(g, r)| if r.depth > floor { *g } else { 0.0 })
        .collect();
    Ok((loss.value, renderer.backward_rays(&rays, &upstream)))
}

fn jitter_for(base: Jitter, seed: u64, iter: usize) -> Jitter {
    match base {
        Jitter::Off => Jitter::Off,
        Jitter::Stratified(s) => Jitter::Stratified(iter_seed(seed ^ s, iter)),
    }
}

fn scatter_prob(grid: &ScalarGrid, st: &Stencil, d_prob: f64, g: &mut GridGradient) {
    let p = sigmoid(stencil_read(grid, st));
    let d_raw = d_prob * p * (1.0 - p);
    for &(l, w) in st {
        g.values[l] += d_raw * w;
    }
}

fn bce_term(grid: &ScalarGrid, prep: &PreparedTargets, cfg: &OptimConfig, seed: u64, iter: usize) -> Result<(f64, GridGradient)> {
    let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(seed, 2 + 2 * iter as u64));
    let batch: Vec<&(Stencil, bool)> = (0..cfg.label_batch)
        .map(|_| &prep.all[rng.gen_range(0..prep.all.len())])
        .collect();
    let probs: Vec<f64> = batch.iter().map(|(st, _)| sigmoid(stencil_read(grid, st))).collect();
    let labels: Vec<bool> = batch.iter().map(|(_, y)| *y).collect();
    let loss = losses::bce(&probs, &labels)?;
    let mut g = GridGradient::zeros(grid.values.len());
    for ((st, _), d) in batch.iter().zip(loss.gradient.as_ref().expect("bce gradient")) {
        scatter_prob(grid, st, *d, &mut g);
    }
    Ok((loss.value, g))
}

fn l1_term(grid: &ScalarGrid, prep: &PreparedTargets, cfg: &OptimConfig, seed: u64, iter: usize) -> Result<(f64, GridGradient)> {
    let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(seed, 2 + 2 * iter as u64));
    let half = cfg.label_batch.div_ceil(2);
    let pick = |set: &[Stencil], rng: &mut ChaCha8Rng| -> Vec<Stencil> {
        if set.is_empty() {
            Vec::new()
        } else {
            (0..half).map(|_| set[rng.gen_range(0..set.len())]).collect()
        }
    };
    let occ = pick(&prep.occupied, &mut rng);
    let emp = pick(&prep.empty, &mut rng);
    let p_occ: Vec<f64> = occ.iter().map(|st| sigmoid(stencil_read(grid, st))).collect();
    let p_emp: Vec<f64> = emp.iter().map(|st| sigmoid(stencil_read(grid, st))).collect();
    let loss = losses::weighted_l1(&p_occ, &p_emp, losses::EMPTY_WEIGHT)?;
    let mut g = GridGradient::zeros(grid.values.len());
    for (st, d) in occ.iter().chain(&emp).zip(loss.gradient.as_ref().expect("l1 gradient")) {
        scatter_prob(grid, st, *d, &mut g);
    }
    Ok((loss.value, g))
}

fn photometric_term(grid: &ScalarGrid, prep: &PreparedTargets, cfg: &OptimConfig, seed: u64, iter: usize) -> Result<(f64, GridGradient)> {
    let c = iter % prep.targets.rig.len();
    let cam = &prep.targets.rig.cameras[c];
    let pair = &prep.targets.pairs[c];
    let render_cfg = RenderConfig {
        jitter: jitter_for(cfg.render.jitter, seed, iter),
        ..cfg.render
    };
    let renderer = Renderer::new(grid, render_cfg)?;
    let rays = camera_rays(cam, c);
    let out = renderer.render_rays(&rays);
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut depth = DepthMap::invalid(w, h);
    for (i, r) in out.iter().enumerate() {
        if r.opacity >= render_cfg.opacity_floor && r.depth > 0.0 {
            depth.depth[i] = r.depth;
            depth.valid[i] = true;
        }
    }
    let warped = losses::warp_with_jacobian(&pair.source, &depth, &cam.intrinsics, &pair.target_to_source);
    if !warped.mask.iter().any(|&m| m) {
        return Ok((0.0, GridGradient::zeros(grid.values.len())));
    }
    let LossValue { value, gradient } =
        losses::photometric_loss(&pair.target, &warped.image, &warped.mask, losses::PHOTOMETRIC_BETA)?;
    let g_img = gradient.expect("photometric gradient");
    let jac = warped.d_depth.expect("warp jacobian");
    let ch = pair.source.channels;
    let upstream: Vec<f64> = (0..w * h)
        .map(|i| (0..ch).map(|k| g_img[i * ch + k] * jac[i * ch + k]).sum())
        .collect();
    Ok((value, renderer.backward_rays(&rays, &upstream)))
}

/// Weighted objective and its gradient at one iteration's batch. Pure in
/// `(grid, targets, cfg, seed, iter)`.
pub fn objective(grid: &ScalarGrid, targets: &FitTargets, cfg: &OptimConfig, seed: u64, iter: usize) -> Result<(f64, GridGradient)> {
    cfg.validate()?;
    let prep = PreparedTargets::new(grid, targets, cfg)?;
    objective_prepared(grid, &prep, cfg, seed, iter)
}

fn objective_prepared(
    grid: &ScalarGrid,
    prep: &PreparedTargets,
    cfg: &OptimConfig,
    seed: u64,
    iter: usize,
) -> Result<(f64, GridGradient)> {
    let mut total = 0.0;
    let mut grad = GridGradient::zeros(grid.values.len());
    for term in &cfg.losses {
        let (v, mut g) = match term.kind {
            LossKind::Silog => silog_term(grid, prep, cfg, seed, iter)?,
            LossKind::Bce => bce_term(grid, prep, cfg, seed, iter)?,
            LossKind::WeightedL1 => l1_term(grid, prep, cfg, seed, iter)?,
            LossKind::Photometric => photometric_term(grid, prep, cfg, seed, iter)?,
        };
        total += term.weight * v;
        g.scale(term.weight);
        grad.add_assign(&g);
    }
    Ok((total, grad))
}

/// Smallest SDF scale the optimizer may reach.
pub const MIN_BETA: f64 = 1e-4;

pub fn fit(grid: &ScalarGrid, targets: &FitTargets, cfg: &OptimConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    let prep = PreparedTargets::new(grid, targets, cfg)?;
    let mut grid = grid.clone();
    let learn_beta = grid.mode == ActivationMode::Sdf;
    let n = grid.values.len() + learn_beta as usize;
    let mut adam = Adam::new(n, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut params = grid.values.clone();
    if learn_beta {
        params.push(grid.beta);
    }
    let mut flat = vec![0.0; n];
    let mut curve = Vec::with_capacity(cfg.iters);
    let start = Instant::now();
    for iter in 0..cfg.iters {
        let (loss, g) = objective_prepared(&grid, &prep, cfg, seed, iter)?;
        if g.values.iter().any(|v| !v.is_finite()) || !g.beta.is_finite() || !loss.is_finite() {
            return Err(OccError::NonFinite(format!("objective at iteration {iter}")));
        }
        flat[..grid.values.len()].copy_from_slice(&g.values);
        if learn_beta {
            flat[n - 1] = g.beta;
        }
        adam.step(&mut params, &flat);
        if learn_beta {
            params[n - 1] = params[n - 1].max(MIN_BETA);
            grid.beta = params[n - 1];
        }
        let len = grid.values.len();
        grid.values.copy_from_slice(&params[..len]);
        curve.push(CurvePoint {
            iter,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let rising_windows = rising_windows(&curve, 50);
    if rising_windows > 0 {
        log::warn!("{rising_windows} loss windows rose relative to the previous window");
    }
    Ok(FitResult {
        grid,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        curve,
        rising_windows,
    })
}

fn rising_windows(curve: &[CurvePoint], window: usize) -> usize {
    let means: Vec<f64> = curve
        .chunks_exact(window)
        .map(|c| c.iter().map(|p| p.loss).sum::<f64>() / window as f64)
        .collect();
    means.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Floater count along sky-bound lidar rays: rays of the scan with no
/// in-grid return are marched at `step` through the grid, and samples above
/// the scene's tallest primitive that the grid calls occupied are counted.
/// Samples within one voxel diagonal of a surface are resolution error, not
/// floaters, and are ignored.
pub fn sky_floater_count(grid: &ScalarGrid, scene: &Scene, lidar: &LidarPattern, threshold: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) {
        return Err(OccError::invalid("march step must be positive"));
    }
    let top = scene.top();
    let margin = grid.spec.voxel_diagonal();
    let origin = lidar.origin_point();
    let max = scene.grid.diagonal();
    let counts: Vec<usize> = lidar
        .directions(false)
        .par_iter()
        .map(|d| {
            let Ok(ray) = Ray::new(origin, *d) else {
                return 0;
            };
            if scene.raycast_in_grid(&ray, max).is_some() {
                return 0;
            }
            let Some((t0, t1)) = grid.spec.ray_interval(&ray) else {
                return 0;
            };
            let mut n = 0;
            let mut k = (t0 / step).ceil().max(1.0) as usize;
            while (k as f64) * step < t1 {
                let p = ray.at(k as f64 * step);
                if p.y > top && scene.sdf(&p) > margin && crate::metrics::occupied_at(grid, &p, threshold) {
                    n += 1;
                }
                k += 1;
            }
            n
        })
        .collect();
    Ok(counts.into_iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::{generate_labels, project_depth_map};

    #[test]
    fn raycast_examples() {
        let scene = Scene::new(
            GridSpec::new([-10.0, -1.0, -10.0], [10.0, 10.0, 10.0], [4, 4, 4]).unwrap(),
            vec![Primitive::Ground { height: 0.5 }],
        )
        .unwrap();
        let down = Ray::new(Point3::new(1.0, 3.0, 2.0), -Vec3::y()).unwrap();
        assert!((scene.raycast(&down, 100.0).unwrap().t - 2.5).abs() < 1e-12);
        let flat = Ray::new(Point3::new(0.0, 3.0, 0.0), Vec3::x()).unwrap();
        assert!(scene.raycast(&flat, 100.0).is_none());
        assert!(scene.raycast(&down, 2.0).is_none());

        let grid = GridSpec::new([0.0; 3], [8.0; 3], [8, 8, 8]).unwrap();
        let boxed = Scene::new(grid, vec![Primitive::Box { min: [4.0; 3], max: [5.0; 3] }]).unwrap();
        let (ray, dist) = Ray::towards(Point3::origin(), Point3::new(4.5, 4.5, 4.5)).unwrap();
        let hit = boxed.raycast(&ray, 100.0).unwrap();
        // Entry at the corner (4,4,4): t = 4 / (1/sqrt 3).
        assert!((hit.t - 4.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!(hit.t < dist);
    }

    #[test]
    fn scene_truth_is_consistent() {
        let mut setup = SyntheticSetup::default_setup();
        setup.lidar.azimuth_steps = 90;
        let views = synthesize_views(&setup).unwrap();
        for p in &views.cloud.points {
            assert!(setup.scene.sdf(p).abs() < 1e-6);
        }
        assert!(views.cloud.len() > 1000);

        // Ground-only check against the plane-depth formula.
        let ground = Scene::new(setup.scene.grid, vec![Primitive::Ground { height: 0.2 }]).unwrap();
        let cam = &setup.rig.cameras[1];
        let (depth, _) = render_truth(&ground, cam);
        let mut hits = 0;
        for y in 0..depth.height {
            for x in 0..depth.width {
                if let Some(d) = depth.get(x, y) {
                    let (ray, cos) = cam.pixel_ray(x as f64, y as f64);
                    let t = (0.2 - ray.origin.y) / ray.direction.y;
                    assert!((d - t * cos).abs() < 1e-9);
                    hits += 1;
                }
            }
        }
        assert!(hits > 1000);
    }

    #[test]
    fn projected_cloud_matches_truth_depth() {
        let setup = SyntheticSetup::default_setup();
        let cam = &setup.rig.cameras[0];
        let (truth, _) = render_truth(&setup.scene, cam);
        // A cloud ray-cast through pixel centers reprojects onto them.
        let mut pts = Vec::new();
        for y in 0..cam.intrinsics.height {
            for x in 0..cam.intrinsics.width {
                let (ray, _) = cam.pixel_ray(x as f64, y as f64);
                if let Some(h) = setup.scene.raycast_in_grid(&ray, 100.0) {
                    pts.push(ray.at(h.t));
                }
            }
        }
        let cloud = PointCloud::new(pts, cam.center()).unwrap();
        let proj = project_depth_map(&cloud, cam);
        let mut n = 0;
        for i in 0..truth.depth.len() {
            assert_eq!(truth.valid[i], proj.valid[i]);
            if truth.valid[i] {
                assert!((truth.depth[i] - proj.depth[i]).abs() < 1e-4);
                n += 1;
            }
        }
        assert!(n > 1000);
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut adam = Adam::new(1, 0.1, 0.9, 0.999, 1e-8);
        let mut p = [2.0];
        adam.step(&mut p, &[0.3]);
        // Bias correction makes the first step lr * g / (|g| + eps).
        let first = 2.0 - 0.1 * 0.3 / (0.3 + 1e-8);
        assert!((p[0] - first).abs() < 1e-15);

        // A second step follows the same recurrences.
        adam.step(&mut p, &[-0.1]);
        let m: f64 = 0.9 * 0.03 + 0.1 * -0.1;
        let v: f64 = 0.999 * 0.00009 + 0.001 * 0.01;
        let expect = first
            - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999 * 0.999)).sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    fn small_targets(kind: LossKind) -> (ScalarGrid, FitTargets) {
        let mut setup = SyntheticSetup::default_setup();
        let intr = CameraIntrinsics::new(16.0, 16.0, 15.5, 9.5, 32, 20).unwrap();
        setup.rig = CameraRig::surround(Point3::new(0.0, 2.0, 0.0), 3, intr, -0.25).unwrap();
        setup.lidar.azimuth_steps = 40;
        setup.lidar.rings = 6;
        let views = synthesize_views(&setup).unwrap();
        let labels = generate_labels(&views.cloud, &setup.scene.grid, 30, 0).unwrap();
        let motion = Pose::from_translation(Vec3::new(0.3, 0.0, 0.5));
        let pairs = synthesize_pairs(&setup.scene, &setup.rig, &motion).unwrap();
        let grid = initial_grid(setup.scene.grid, kind.default_mode()).unwrap();
        let targets = FitTargets {
            rig: setup.rig,
            depth: views.depth,
            labels: Some(labels),
            pairs,
        };
        (grid, targets)
    }

    #[test]
    fn zero_learning_rate_keeps_grid_bitwise() {
        let (grid, targets) = small_targets(LossKind::Silog);
        let mut cfg = OptimConfig::single(LossKind::Silog, 5);
        cfg.lr = 0.0;
        cfg.ray_batch = 64;
        let out = fit(&grid, &targets, &cfg, 3).unwrap();
        assert!(out.grid.values.iter().zip(&grid.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mode_loss_compatibility() {
        let (grid, targets) = small_targets(LossKind::Silog);
        assert!(fit(&grid, &targets, &OptimConfig::single(LossKind::Bce, 1), 0).is_err());
        assert!(fit(&grid, &targets, &OptimConfig::single(LossKind::WeightedL1, 1), 0).is_err());
    }

    #[test]
    fn small_step_does_not_increase_any_loss() {
        for kind in [LossKind::Silog, LossKind::Bce, LossKind::WeightedL1, LossKind::Photometric] {
            let (base, targets) = small_targets(kind);
            let mut cfg = OptimConfig::single(kind, 1);
            cfg.ray_batch = 128;
            cfg.label_batch = 256;
            let mut rng = ChaCha8Rng::seed_from_u64(kind as u64);
            for start in 0..20 {
                let mut grid = base.clone();
                grid.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
                let (before, g) = objective(&grid, &targets, &cfg, start, 0).unwrap();
                let mut adam = Adam::new(grid.values.len(), 1e-6, 0.9, 0.999, 1e-8);
                adam.step(&mut grid.values, &g.values);
                let (after, _) = objective(&grid, &targets, &cfg, start, 0).unwrap();
                assert!(after <= before + 1e-12, "{kind:?} start {start}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let (grid, targets) = small_targets(LossKind::Silog);
        let mut cfg = OptimConfig::single(LossKind::Silog, 4);
        cfg.ray_batch = 128;
        let a = fit(&grid, &targets, &cfg, 11).unwrap();
        let b = fit(&grid, &targets, &cfg, 11).unwrap();
        assert!(a.grid.values.iter().zip(&b.grid.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        let losses = |r: &FitResult| r.curve.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn sdf_fit_learns_beta_above_floor() {
        let (_, targets) = small_targets(LossKind::Silog);
        let spec = targets.labels.as_ref().map(|_| SyntheticSetup::default_setup().scene.grid).unwrap();
        let grid = initial_grid(spec, ActivationMode::Sdf).unwrap();
        let mut cfg = OptimConfig::single(LossKind::Silog, 3);
        cfg.ray_batch = 128;
        let out = fit(&grid, &targets, &cfg, 1).unwrap();
        assert!(out.grid.beta != grid.beta);
        assert!(out.grid.beta >= MIN_BETA);
    }

    #[test]
    fn sky_floaters_count_only_occupied_samples_above_the_scene() {
        let setup = SyntheticSetup::default_setup();
        let mut lidar = setup.lidar;
        lidar.azimuth_steps = 8;
        let mut grid = initial_grid(setup.scene.grid, ActivationMode::Probability).unwrap();
        grid.values.iter_mut().for_each(|v| *v = -5.0);
        assert_eq!(sky_floater_count(&grid, &setup.scene, &lidar, 0.5, 0.2).unwrap(), 0);
        // Fill a high layer; only upward rays that miss the scene cross it.
        for z in 0..64 {
            for x in 0..64 {
                grid.set([x, 7, z], 5.0);
            }
        }
        let high = sky_floater_count(&grid, &setup.scene, &lidar, 0.5, 0.2).unwrap();
        assert!(high > 0);
        // Occupancy below the tallest top is never counted.
        let mut low = initial_grid(setup.scene.grid, ActivationMode::Probability).unwrap();
        low.values.iter_mut().for_each(|v| *v = -5.0);
        for z in 0..64 {
            for x in 0..64 {
                low.set([x, 2, z], 5.0);
            }
        }
        assert_eq!(sky_floater_count(&low, &setup.scene, &lidar, 0.5, 0.2).unwrap(), 0);
    }
}
