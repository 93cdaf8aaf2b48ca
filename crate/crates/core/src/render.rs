//! Ray sampling, alpha compositing of depth, and its analytic gradient.
//!
//! For samples `t_1 < ... < t_W` with gaps `delta_i` and densities `sigma_i`:
//!
//! ```text
//! T_i   = exp(-sum_{j<i} sigma_j delta_j)
//! w_i   = T_i (1 - exp(-sigma_i delta_i))
//! depth = sum_i w_i t_i
//! ```
//!
//! Depth maps store z-depth, so a pixel's rendered value is the ray-distance
//! depth above times the cosine between the pixel ray and the optical axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::geometry::{Camera, Ray};
use crate::image::DepthMap;
use crate::volume::{ActivationGrad, Interp, ScalarGrid, Stencil};

/// Minimum length of the final sample interval.
pub const MIN_LAST_DELTA: f64 = 1e-6;

/// Placement of sample distances inside each bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Jitter {
    /// Bin midpoints.
    Off,
    /// One uniform draw per bin from a generator seeded with this value.
    Stratified(u64),
}

/// Sample distances, gaps and densities along one ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl RaySamples {
    /// Builds samples from distances and densities, deriving the gaps with
    /// the last gap extended by one bin width past `far`.
    pub fn new(t: Vec<f64>, sigma: Vec<f64>, far: f64) -> Result<Self> {
        if t.is_empty() || t.len() != sigma.len() {
            return Err(OccError::invalid("ray samples need matching non-empty t and sigma"));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(OccError::invalid("sample distances must be strictly increasing"));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(OccError::invalid("densities must be non-negative"));
        }
        let mut delta = Vec::with_capacity(t.len());
        fill_deltas(&t, far, &mut delta);
        Ok(RaySamples { t, delta, sigma })
    }

    /// Samples with explicit gaps.
    pub fn with_deltas(t: Vec<f64>, delta: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if t.is_empty() || t.len() != sigma.len() || t.len() != delta.len() {
            return Err(OccError::invalid("ray samples need matching non-empty arrays"));
        }
        if delta.iter().any(|d| !(*d > 0.0)) || sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(OccError::invalid("gaps must be positive and densities non-negative"));
        }
        Ok(RaySamples { t, delta, sigma })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn fill_deltas(t: &[f64], far: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(t.windows(2).map(|w| w[1] - w[0]));
    let bin = if t.len() > 1 {
        (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64
    } else {
        2.0 * (far - t[0])
    };
    let last = (far - t[t.len() - 1]) + bin;
    out.push(last.max(MIN_LAST_DELTA));
}

/// Writes `count` increasing distances in `[near, far]` into `out`.
fn fill_distances(near: f64, far: f64, count: usize, rng: Option<&mut ChaCha8Rng>, out: &mut Vec<f64>) {
    out.clear();
    let width = (far - near) / count as f64;
    match rng {
        None => out.extend((0..count).map(|i| near + (i as f64 + 0.5) * width)),
        Some(rng) => {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..count {
                let u: f64 = rng.gen();
                let mut t = near + (i as f64 + u) * width;
                if t <= prev {
                    t = prev.next_up();
                }
                out.push(t);
                prev = t;
            }
        }
    }
}

fn check_bounds(near: f64, far: f64, count: usize) -> Result<()> {
    if !(near >= 0.0 && far > near && far.is_finite()) {
        return Err(OccError::invalid(format!("invalid ray bounds near={near} far={far}")));
    }
    if count == 0 {
        return Err(OccError::invalid("need at least one sample per ray"));
    }
    Ok(())
}

/// `count` sample distances over `[near, far]`.
pub fn sample_ray(near: f64, far: f64, count: usize, jitter: Jitter) -> Result<Vec<f64>> {
    check_bounds(near, far, count)?;
    let mut out = Vec::with_capacity(count);
    match jitter {
        Jitter::Off => fill_distances(near, far, count, None, &mut out),
        Jitter::Stratified(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fill_distances(near, far, count, Some(&mut rng), &mut out);
        }
    }
    Ok(out)
}

/// Composited depth, per-sample weights and total opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub depth: f64,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

pub fn composite(samples: &RaySamples) -> RenderResult {
    let mut weights = Vec::with_capacity(samples.len());
    let (depth, opacity) = composite_into(&samples.t, &samples.delta, &samples.sigma, &mut weights);
    RenderResult {
        depth,
        weights,
        opacity,
    }
}

#[inline]
fn composite_into(t: &[f64], delta: &[f64], sigma: &[f64], weights: &mut Vec<f64>) -> (f64, f64) {
    weights.clear();
    let mut optical = 0.0f64;
    let mut depth = 0.0;
    let mut opacity = 0.0;
    for i in 0..t.len() {
        let tau = sigma[i] * delta[i];
        let transmittance = (-optical).exp();
        let w = transmittance * -(-tau).exp_m1();
        weights.push(w);
        depth += w * t[i];
        opacity += w;
        optical += tau;
    }
    (depth, opacity)
}

/// `dL/dsigma_k = upstream * delta_k (T_{k+1} t_k - sum_{i>k} w_i t_i)`,
/// where `T_{k+1} = T_k exp(-sigma_k delta_k)`.
pub fn composite_backward(samples: &RaySamples, upstream: f64) -> Vec<f64> {
    let r = composite(samples);
    let mut grad = vec![0.0; samples.len()];
    backward_into(&samples.t, &samples.delta, &samples.sigma, &r.weights, upstream, &mut grad);
    grad
}

#[inline]
fn backward_into(t: &[f64], delta: &[f64], sigma: &[f64], weights: &[f64], upstream: f64, grad: &mut [f64]) {
    let mut optical = 0.0f64;
    let mut suffix: f64 = weights.iter().zip(t).map(|(w, t)| w * t).sum();
    for k in 0..t.len() {
        optical += sigma[k] * delta[k];
        suffix -= weights[k] * t[k];
        grad[k] = upstream * delta[k] * ((-optical).exp() * t[k] - suffix);
    }
}

/// Sampling and masking parameters for depth rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples: usize,
    pub near: f64,
    /// Far bound; defaults to the grid diagonal.
    pub far: Option<f64>,
    pub interp: Interp,
    pub jitter: Jitter,
    /// Pixels with total opacity below this are marked invalid.
    pub opacity_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: 64,
            near: 0.4,
            far: None,
            interp: Interp::Trilinear,
            jitter: Jitter::Off,
            opacity_floor: 1e-4,
        }
    }
}

/// A world ray plus the factor converting ray distance to z-depth and a key
/// that decorrelates per-ray jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRay {
    pub ray: Ray,
    pub cos: f64,
    pub key: u64,
}

/// Forward output for one pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayDepth {
    /// z-depth (ray depth times `cos`).
    pub depth: f64,
    pub opacity: f64,
}

/// Gradient of a scalar objective with respect to the grid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub values: Vec<f64>,
    pub beta: f64,
}

impl GridGradient {
    pub fn zeros(len: usize) -> Self {
        GridGradient {
            values: vec![0.0; len],
            beta: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &GridGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.beta += other.beta;
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
        self.beta *= k;
    }
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-ray generator seed derived from the run seed and the ray key.
#[inline]
pub fn ray_seed(seed: u64, key: u64) -> u64 {
    splitmix64(seed ^ splitmix64(key))
}

/// Fixed shard count for gradient reduction; independent of thread count so
/// results are bitwise reproducible.
const GRAD_SHARDS: usize = 16;

struct RayScratch {
    t: Vec<f64>,
    delta: Vec<f64>,
    sigma: Vec<f64>,
    weights: Vec<f64>,
    grad_sigma: Vec<f64>,
    /// Per-sample grid taps and activation derivatives, kept for backward.
    taps: Vec<(Stencil, usize)>,
    act: Vec<ActivationGrad>,
}

impl RayScratch {
    fn new(n: usize) -> Self {
        RayScratch {
            t: Vec::with_capacity(n),
            delta: Vec::with_capacity(n),
            sigma: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            grad_sigma: vec![0.0; n],
            taps: Vec::new(),
            act: Vec::new(),
        }
    }
}

/// Depth renderer bound to a grid and a configuration.
pub struct Renderer<'a> {
    grid: &'a ScalarGrid,
    cfg: RenderConfig,
    far: f64,
}

impl<'a> Renderer<'a> {
    pub fn new(grid: &'a ScalarGrid, cfg: RenderConfig) -> Result<Self> {
        let diag = grid.spec.diagonal();
        let far = cfg.far.unwrap_or(diag);
        if far > diag * (1.0 + 1e-9) {
            return Err(OccError::invalid(format!(
                "far bound {far} exceeds the scene diagonal {diag}"
            )));
        }
        check_bounds(cfg.near, far, cfg.samples)?;
        Ok(Renderer { grid, cfg, far })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    /// Samples the ray over `[near, far]` clipped to the grid box. Returns
    /// false if no part of that interval lies inside the grid.
    fn prepare(&self, pr: &PixelRay, s: &mut RayScratch, keep: bool) -> bool {
        let Some((enter, exit)) = self.grid.spec.ray_interval(&pr.ray) else {
            return false;
        };
        let near = self.cfg.near.max(enter);
        let far = self.far.min(exit);
        if !(far > near) {
            return false;
        }
        match self.cfg.jitter {
            Jitter::Off => fill_distances(near, far, self.cfg.samples, None, &mut s.t),
            Jitter::Stratified(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(seed, pr.key));
                fill_distances(near, far, self.cfg.samples, Some(&mut rng), &mut s.t);
            }
        }
        fill_deltas(&s.t, far, &mut s.delta);
        s.sigma.clear();
        s.taps.clear();
        s.act.clear();
        for &t in &s.t {
            let p = pr.ray.at(t);
            let (stencil, taps) = match self.cfg.interp {
                Interp::Trilinear => match self.grid.trilinear_stencil(&p) {
                    Some(st) => (st, 8),
                    None => ([(0, 0.0); 8], 0),
                },
                Interp::Nearest => match self.grid.spec.voxel_index(&p) {
                    Some(idx) => {
                        let mut st = [(0, 0.0); 8];
                        st[0] = (self.grid.spec.linear_index(idx), 1.0);
                        (st, 1)
                    }
                    None => ([(0, 0.0); 8], 0),
                },
            };
            let act = if taps == 0 {
                ActivationGrad {
                    sigma: 0.0,
                    d_raw: 0.0,
                    d_beta: 0.0,
                }
            } else {
                let raw: f64 = stencil[..taps].iter().map(|&(l, w)| w * self.grid.values[l]).sum();
                self.grid.density(raw)
            };
            s.sigma.push(act.sigma);
            if keep {
                s.taps.push((stencil, taps));
                s.act.push(act);
            }
        }
        true
    }

    fn forward_one(&self, pr: &PixelRay, s: &mut RayScratch) -> RayDepth {
        if !self.prepare(pr, s, false) {
            return RayDepth {
                depth: 0.0,
                opacity: 0.0,
            };
        }
        let (depth, opacity) = composite_into(&s.t, &s.delta, &s.sigma, &mut s.weights);
        RayDepth {
            depth: depth * pr.cos,
            opacity,
        }
    }

    /// Samples along the ray as [`RaySamples`] (distances along the ray).
    pub fn ray_samples(&self, pr: &PixelRay) -> Option<RaySamples> {
        let mut s = RayScratch::new(self.cfg.samples);
        self.prepare(pr, &mut s, false).then(|| RaySamples {
            t: s.t,
            delta: s.delta,
            sigma: s.sigma,
        })
    }

    pub fn render_ray(&self, pr: &PixelRay) -> RayDepth {
        let mut s = RayScratch::new(self.cfg.samples);
        self.forward_one(pr, &mut s)
    }

    pub fn render_rays(&self, rays: &[PixelRay]) -> Vec<RayDepth> {
        rays.par_chunks(256)
            .flat_map_iter(|chunk| {
                let mut s = RayScratch::new(self.cfg.samples);
                chunk.iter().map(|pr| self.forward_one(pr, &mut s)).collect::<Vec<_>>()
            })
            .collect()
    }

    fn backward_one(&self, pr: &PixelRay, upstream: f64, s: &mut RayScratch, grad: &mut GridGradient) {
        if upstream == 0.0 || !self.prepare(pr, s, true) {
            return;
        }
        composite_into(&s.t, &s.delta, &s.sigma, &mut s.weights);
        let n = s.t.len();
        s.grad_sigma.resize(n, 0.0);
        backward_into(&s.t, &s.delta, &s.sigma, &s.weights, upstream * pr.cos, &mut s.grad_sigma);
        for k in 0..n {
            let g = s.grad_sigma[k];
            let (stencil, taps) = &s.taps[k];
            if g == 0.0 || *taps == 0 {
                continue;
            }
            let act = &s.act[k];
            let g_raw = g * act.d_raw;
            for &(l, w) in &stencil[..*taps] {
                grad.values[l] += g_raw * w;
            }
            grad.beta += g * act.d_beta;
        }
    }

    /// Gradient of `sum_r upstream[r] * depth[r]` with respect to the raw
    /// grid values (and beta), accumulated in a fixed shard order.
    pub fn backward_rays(&self, rays: &[PixelRay], upstream: &[f64]) -> GridGradient {
        assert_eq!(rays.len(), upstream.len(), "one upstream value per ray");
        let len = self.grid.values.len();
        if rays.is_empty() {
            return GridGradient::zeros(len);
        }
        let shard = rays.len().div_ceil(GRAD_SHARDS);
        let partials: Vec<GridGradient> = rays
            .par_chunks(shard)
            .zip(upstream.par_chunks(shard))
            .map(|(rs, us)| {
                let mut g = GridGradient::zeros(len);
                let mut s = RayScratch::new(self.cfg.samples);
                for (pr, &u) in rs.iter().zip(us) {
                    self.backward_one(pr, u, &mut s, &mut g);
                }
                g
            })
            .collect();
        let mut it = partials.into_iter();
        let mut total = it.next().expect("at least one shard");
        for p in it {
            total.add_assign(&p);
        }
        total
    }
}

/// Rays through the pixel centers of `camera`, row-major; keys are
/// `camera_index * W * H + pixel`.
pub fn camera_rays(camera: &Camera, camera_index: usize) -> Vec<PixelRay> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let base = (camera_index * w * h) as u64;
    let mut rays = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (ray, cos) = camera.pixel_ray(x as f64, y as f64);
            rays.push(PixelRay {
                ray,
                cos,
                key: base + (y * w + x) as u64,
            });
        }
    }
    rays
}

/// Renders a z-depth map and the per-pixel opacity.
pub fn render_depth_map_with_opacity(
    grid: &ScalarGrid,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<(DepthMap, Vec<f64>)> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    if w == 0 || h == 0 {
        return Err(OccError::invalid("camera resolution is zero"));
    }
    let renderer = Renderer::new(grid, *cfg)?;
    let rays = camera_rays(camera, 0);
    let out = renderer.render_rays(&rays);
    let mut map = DepthMap::invalid(w, h);
    let mut opacity = Vec::with_capacity(w * h);
    for (i, r) in out.iter().enumerate() {
        if r.opacity >= cfg.opacity_floor {
            map.depth[i] = r.depth;
            map.valid[i] = true;
        }
        opacity.push(r.opacity);
    }
    Ok((map, opacity))
}

pub fn render_depth_map(grid: &ScalarGrid, camera: &Camera, cfg: &RenderConfig) -> Result<DepthMap> {
    render_depth_map_with_opacity(grid, camera, cfg).map(|(m, _)| m)
}

/// Gradient of `sum_px upstream[px] * depth[px]` for a full camera image.
pub fn render_depth_map_backward(
    grid: &ScalarGrid,
    camera: &Camera,
    cfg: &RenderConfig,
    upstream: &[f64],
) -> Result<GridGradient> {
    let rays = camera_rays(camera, 0);
    if upstream.len() != rays.len() {
        return Err(OccError::ShapeMismatch("upstream gradient must have one value per pixel".into()));
    }
    Ok(Renderer::new(grid, *cfg)?.backward_rays(&rays, upstream))
}
