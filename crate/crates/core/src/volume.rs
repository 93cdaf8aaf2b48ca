//! Scalar voxel volumes, their conversion to rendering density, grid
//! interpolation and parameter-free lifting of image features into a volume.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::geometry::{CameraRig, GridSpec, Point3};
use crate::image::Image;

/// What the raw voxel scalar represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationMode {
    /// Occupancy logit; density is `sigmoid(raw)`.
    Probability,
    /// Unbounded density logit; density is `softplus(raw)`.
    Density,
    /// Signed distance converted with the Laplace-CDF style transform.
    Sdf,
}

impl ActivationMode {
    pub fn tag(self) -> u8 {
        match self {
            ActivationMode::Probability => 0,
            ActivationMode::Density => 1,
            ActivationMode::Sdf => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ActivationMode::Probability),
            1 => Some(ActivationMode::Density),
            2 => Some(ActivationMode::Sdf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationMode::Probability => "probability",
            ActivationMode::Density => "density",
            ActivationMode::Sdf => "sdf",
        }
    }
}

impl std::str::FromStr for ActivationMode {
    type Err = OccError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" | "prob" => Ok(ActivationMode::Probability),
            "density" => Ok(ActivationMode::Density),
            "sdf" => Ok(ActivationMode::Sdf),
            other => Err(OccError::invalid(format!("unknown activation mode '{other}'"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

/// Density and its partial derivatives with respect to the raw value and `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationGrad {
    pub sigma: f64,
    pub d_raw: f64,
    pub d_beta: f64,
}

/// Density from a raw voxel scalar.
///
/// SDF values follow the printed convention: density grows with `s`,
/// `s <= 0 -> exp(s/b)/(2b)` and `s > 0 -> (1 - exp(-s/b)/2)/b`.
pub fn activate(raw: f64, mode: ActivationMode, beta: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(OccError::NonFinite(format!("raw voxel value {raw}")));
    }
    if mode == ActivationMode::Sdf && !(beta > 0.0) {
        return Err(OccError::invalid(format!("sdf beta must be positive, got {beta}")));
    }
    Ok(activate_with_grad(raw, mode, beta).sigma)
}

#[inline]
pub fn activate_with_grad(raw: f64, mode: ActivationMode, beta: f64) -> ActivationGrad {
    match mode {
        ActivationMode::Probability => {
            let s = sigmoid(raw);
            ActivationGrad {
                sigma: s,
                d_raw: s * (1.0 - s),
                d_beta: 0.0,
            }
        }
        ActivationMode::Density => ActivationGrad {
            sigma: softplus(raw),
            d_raw: sigmoid(raw),
            d_beta: 0.0,
        },
        ActivationMode::Sdf => {
            let inv = 1.0 / beta;
            if raw <= 0.0 {
                let e = (raw * inv).exp();
                ActivationGrad {
                    sigma: 0.5 * inv * e,
                    d_raw: 0.5 * inv * inv * e,
                    d_beta: -0.5 * inv * inv * e * (1.0 + raw * inv),
                }
            } else {
                let e = (-raw * inv).exp();
                ActivationGrad {
                    sigma: inv * (1.0 - 0.5 * e),
                    d_raw: 0.5 * inv * inv * e,
                    d_beta: -inv * inv + 0.5 * inv * inv * e * (1.0 - raw * inv),
                }
            }
        }
    }
}

/// Interpolation used when querying a grid at a continuous point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Trilinear,
}

impl std::str::FromStr for Interp {
    type Err = OccError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "trilinear" => Ok(Interp::Trilinear),
            other => Err(OccError::invalid(format!("unknown interpolation '{other}'"))),
        }
    }
}

/// Eight flat voxel offsets with their trilinear weights.
pub type Stencil = [(usize, f64); 8];

/// Raw scalar per voxel plus the interpretation of those scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub mode: ActivationMode,
    /// Laplace scale, only meaningful in [`ActivationMode::Sdf`].
    pub beta: f64,
    /// Treat negative SDF as occupied (VolSDF convention) instead of the
    /// printed one. Not persisted in grid files.
    pub sdf_sign_flip: bool,
}

impl ScalarGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>, mode: ActivationMode, beta: f64) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(OccError::ShapeMismatch(format!(
                "grid has {} values, dims {:?} need {}",
                values.len(),
                spec.dims,
                spec.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(OccError::NonFinite(format!("grid value at offset {i}")));
        }
        if mode == ActivationMode::Sdf && !(beta > 0.0) {
            return Err(OccError::invalid("sdf grids need beta > 0"));
        }
        Ok(ScalarGrid {
            spec,
            values,
            mode,
            beta,
            sdf_sign_flip: false,
        })
    }

    pub fn filled(spec: GridSpec, mode: ActivationMode, value: f64) -> Result<Self> {
        Self::new(spec, vec![value; spec.len()], mode, 1.0)
    }

    /// Grid with `values[i] = f(voxel_center(i))`.
    pub fn from_fn(spec: GridSpec, mode: ActivationMode, f: impl Fn(&Point3) -> f64) -> Result<Self> {
        let values = (0..spec.len())
            .map(|l| f(&spec.voxel_center_unchecked(spec.unravel(l))))
            .collect();
        Self::new(spec, values, mode, 1.0)
    }

    pub fn with_sign_flip(mut self, flip: bool) -> Self {
        self.sdf_sign_flip = flip;
        self
    }

    #[inline]
    pub fn get(&self, idx: [usize; 3]) -> f64 {
        self.values[self.spec.linear_index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 3], v: f64) {
        let l = self.spec.linear_index(idx);
        self.values[l] = v;
    }

    /// Rendering density of a raw value under this grid's mode.
    #[inline]
    pub fn density(&self, raw: f64) -> ActivationGrad {
        if self.mode == ActivationMode::Sdf && self.sdf_sign_flip {
            let g = activate_with_grad(-raw, self.mode, self.beta);
            ActivationGrad {
                d_raw: -g.d_raw,
                ..g
            }
        } else {
            activate_with_grad(raw, self.mode, self.beta)
        }
    }

    /// Value in the domain used for thresholding and meshing: the activated
    /// value for probability/density grids, the raw value for SDF grids.
    #[inline]
    pub fn level_value(&self, raw: f64) -> f64 {
        match self.mode {
            ActivationMode::Probability => sigmoid(raw),
            ActivationMode::Density => softplus(raw),
            ActivationMode::Sdf => raw,
        }
    }

    pub fn sample(&self, p: &Point3, interp: Interp) -> Option<f64> {
        match interp {
            Interp::Nearest => self.spec.voxel_index(p).map(|i| self.get(i)),
            Interp::Trilinear => self
                .trilinear_stencil(p)
                .map(|st| st.iter().map(|&(l, w)| w * self.values[l]).sum()),
        }
    }

    /// Trilinear stencil on the cell-centered lattice. Points in the outer
    /// half-voxel margin clamp to the boundary layer; points outside the
    /// grid have no stencil.
    #[inline]
    pub fn trilinear_stencil(&self, p: &Point3) -> Option<Stencil> {
        if !self.spec.contains(p) {
            return None;
        }
        let vs = self.spec.voxel_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.spec.dims[a];
            let c = (p[a] - self.spec.min[a]) / vs[a] - 0.5;
            let f = c.floor();
            if f < 0.0 {
                lo[a] = 0;
                hi[a] = 0;
                frac[a] = 0.0;
            } else {
                let i = f as usize;
                if i + 1 >= n {
                    lo[a] = n - 1;
                    hi[a] = n - 1;
                    frac[a] = 0.0;
                } else {
                    lo[a] = i;
                    hi[a] = i + 1;
                    frac[a] = c - f;
                }
            }
        }
        let [nx, ny, _] = self.spec.dims;
        let flat = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Some([
            (flat(lo[0], lo[1], lo[2]), gx * gy * gz),
            (flat(hi[0], lo[1], lo[2]), fx * gy * gz),
            (flat(lo[0], hi[1], lo[2]), gx * fy * gz),
            (flat(hi[0], hi[1], lo[2]), fx * fy * gz),
            (flat(lo[0], lo[1], hi[2]), gx * gy * fz),
            (flat(hi[0], lo[1], hi[2]), fx * gy * fz),
            (flat(lo[0], hi[1], hi[2]), gx * fy * fz),
            (flat(hi[0], hi[1], hi[2]), fx * fy * fz),
        ])
    }
}

/// Per-voxel mean of image features over the cameras that see the voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub spec: GridSpec,
    pub channels: usize,
    /// `spec.len() * channels` values, voxel-major.
    pub values: Vec<f64>,
    pub valid_count: Vec<u32>,
}

impl FeatureVolume {
    pub fn feature(&self, idx: [usize; 3]) -> &[f64] {
        let l = self.spec.linear_index(idx);
        &self.values[l * self.channels..(l + 1) * self.channels]
    }

    pub fn count(&self, idx: [usize; 3]) -> u32 {
        self.valid_count[self.spec.linear_index(idx)]
    }
}

/// Projects every voxel center into each camera, bilinearly samples its
/// feature image and averages over the cameras with a valid sample.
///
/// Images may be smaller than the camera resolution (feature maps); pixel
/// coordinates are rescaled with the pixel-center convention.
pub fn lift_images_to_volume(images: &[Image], rig: &CameraRig, spec: &GridSpec) -> Result<FeatureVolume> {
    if rig.is_empty() {
        return Err(OccError::invalid("camera rig is empty"));
    }
    if images.len() != rig.len() {
        return Err(OccError::ShapeMismatch(format!(
            "{} images for {} cameras",
            images.len(),
            rig.len()
        )));
    }
    let channels = images[0].channels;
    if images.iter().any(|im| im.channels != channels) {
        return Err(OccError::ShapeMismatch("images have differing channel counts".into()));
    }
    let n = spec.len();
    let mut values = vec![0.0; n * channels];
    let mut valid_count = vec![0u32; n];

    values
        .par_chunks_mut(channels)
        .zip(valid_count.par_iter_mut())
        .enumerate()
        .for_each(|(l, (feat, count))| {
            let center = spec.voxel_center_unchecked(spec.unravel(l));
            let mut sample = vec![0.0; channels];
            // Per-camera samples, camera-major.
            let mut hits: Vec<f64> = Vec::with_capacity(rig.len() * channels);
            for (cam, img) in rig.cameras.iter().zip(images) {
                let Some((u, v, _)) = cam.project(&center).visible() else {
                    continue;
                };
                let sx = img.width as f64 / cam.intrinsics.width as f64;
                let sy = img.height as f64 / cam.intrinsics.height as f64;
                let (ui, vi) = ((u + 0.5) * sx - 0.5, (v + 0.5) * sy - 0.5);
                if img.bilinear_into(ui, vi, &mut sample) {
                    hits.extend_from_slice(&sample);
                }
            }
            let k = hits.len() / channels;
            *count = k as u32;
            if k == 0 {
                return;
            }
            // Summing each channel in sorted order makes the mean independent
            // of camera order, bit for bit.
            let mut column = Vec::with_capacity(k);
            for (c, f) in feat.iter_mut().enumerate() {
                column.clear();
                column.extend((0..k).map(|j| hits[j * channels + c]));
                column.sort_by(f64::total_cmp);
                *f = column.iter().sum::<f64>() / k as f64;
            }
        });

    Ok(FeatureVolume {
        spec: *spec,
        channels,
        values,
        valid_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, CameraIntrinsics, Pose};
    use proptest::prelude::*;

    #[test]
    fn activation_examples() {
        assert_eq!(activate(0.0, ActivationMode::Probability, 1.0).unwrap(), 0.5);
        assert_eq!(activate(0.0, ActivationMode::Sdf, 1.0).unwrap(), 0.5);
        assert!((activate(60.0, ActivationMode::Sdf, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(activate(-60.0, ActivationMode::Sdf, 1.0).unwrap() < 1e-20);
        assert!(activate(f64::NAN, ActivationMode::Density, 1.0).is_err());
        assert!(activate(1.0, ActivationMode::Sdf, 0.0).is_err());
    }

    #[test]
    fn sdf_activation_continuous_at_zero() {
        for beta in [0.1, 0.5, 1.0, 3.0] {
            let left = activate_with_grad(0.0, ActivationMode::Sdf, beta);
            let right = activate_with_grad(1e-300, ActivationMode::Sdf, beta);
            assert!((left.sigma - 0.5 / beta).abs() < 1e-12);
            assert!((right.sigma - 0.5 / beta).abs() < 1e-12);
            // Also C1 in both raw and beta.
            assert!((left.d_raw - right.d_raw).abs() < 1e-12);
            assert!((left.d_beta - right.d_beta).abs() < 1e-12);
            assert!((left.d_raw - 0.5 / (beta * beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_derivatives_match_differences() {
        let h = 1e-6;
        for mode in [ActivationMode::Probability, ActivationMode::Density, ActivationMode::Sdf] {
            for &raw in &[-3.0, -0.4, 0.3, 2.5] {
                let beta = 0.7;
                let g = activate_with_grad(raw, mode, beta);
                let f = |r: f64, b: f64| activate_with_grad(r, mode, b).sigma;
                let dr = (f(raw + h, beta) - f(raw - h, beta)) / (2.0 * h);
                let db = (f(raw, beta + h) - f(raw, beta - h)) / (2.0 * h);
                assert!((g.d_raw - dr).abs() < 1e-7, "{mode:?} {raw}");
                assert!((g.d_beta - db).abs() < 1e-7, "{mode:?} {raw}");
            }
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [0.01, 0.5, 3.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn activation_monotone_nonnegative(a in -40.0f64..40.0, b in -40.0f64..40.0, beta in 0.05f64..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for mode in [ActivationMode::Probability, ActivationMode::Density, ActivationMode::Sdf] {
                let s_lo = activate(lo, mode, beta).unwrap();
                let s_hi = activate(hi, mode, beta).unwrap();
                prop_assert!(s_lo >= 0.0);
                prop_assert!(s_hi >= s_lo);
            }
        }
    }

    fn unit_spec(dims: [usize; 3]) -> GridSpec {
        GridSpec::new([0.0; 3], [dims[0] as f64, dims[1] as f64, dims[2] as f64], dims).unwrap()
    }

    #[test]
    fn sample_at_centers_and_constant() {
        let spec = unit_spec([4, 3, 2]);
        let grid = ScalarGrid::from_fn(spec, ActivationMode::Density, |p| p.x * 2.0 + p.y - p.z).unwrap();
        for l in 0..spec.len() {
            let idx = spec.unravel(l);
            let c = spec.voxel_center(idx).unwrap();
            assert_eq!(grid.sample(&c, Interp::Nearest), Some(grid.get(idx)));
            assert!((grid.sample(&c, Interp::Trilinear).unwrap() - grid.get(idx)).abs() < 1e-12);
        }
        let flat = ScalarGrid::filled(spec, ActivationMode::Density, 1.25).unwrap();
        assert!((flat.sample(&Point3::new(0.01, 2.9, 1.3), Interp::Trilinear).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(flat.sample(&Point3::new(-0.01, 1.0, 1.0), Interp::Trilinear), None);
        assert_eq!(flat.sample(&Point3::new(4.0, 1.0, 1.0), Interp::Nearest), None);
    }

    #[test]
    fn trilinear_midpoint() {
        let spec = unit_spec([2, 1, 1]);
        let grid = ScalarGrid::new(spec, vec![0.0, 1.0], ActivationMode::Density, 1.0).unwrap();
        assert_eq!(grid.sample(&Point3::new(1.0, 0.5, 0.5), Interp::Trilinear), Some(0.5));
    }

    #[test]
    fn grid_validation() {
        let spec = unit_spec([2, 2, 2]);
        assert!(ScalarGrid::new(spec, vec![0.0; 7], ActivationMode::Density, 1.0).is_err());
        assert!(ScalarGrid::new(spec, vec![f64::INFINITY; 8], ActivationMode::Density, 1.0).is_err());
        assert!(ScalarGrid::new(spec, vec![0.0; 8], ActivationMode::Sdf, -1.0).is_err());
    }

    #[test]
    fn sign_flip_mirrors_density() {
        let spec = unit_spec([1, 1, 1]);
        let g = ScalarGrid::new(spec, vec![0.0], ActivationMode::Sdf, 0.5).unwrap();
        let f = g.clone().with_sign_flip(true);
        let a = g.density(0.8);
        let b = f.density(-0.8);
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.d_raw, -b.d_raw);
    }

    fn looking_down_z(at: Point3) -> Camera {
        let intr = CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 21, 21).unwrap();
        Camera::new("c", intr, Pose::camera_yaw_pitch(at, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn lifting_single_and_overlap() {
        let spec = GridSpec::new([-1.0, -1.0, 2.0], [1.0, 1.0, 4.0], [4, 4, 4]).unwrap();
        let rig = CameraRig::new(vec![looking_down_z(Point3::origin())]);
        let img = Image::filled(21, 21, 2, 3.0);
        let vol = lift_images_to_volume(&[img.clone()], &rig, &spec).unwrap();
        for l in 0..spec.len() {
            let idx = spec.unravel(l);
            assert_eq!(vol.count(idx), 1);
            assert_eq!(vol.feature(idx), &[3.0, 3.0]);
        }

        let rig2 = CameraRig::new(vec![looking_down_z(Point3::origin()), looking_down_z(Point3::new(0.1, 0.0, 0.0))]);
        let img_b = Image::filled(21, 21, 2, 5.0);
        let vol = lift_images_to_volume(&[img, img_b], &rig2, &spec).unwrap();
        let mid = vol.feature([2, 2, 2]);
        assert_eq!(mid, &[4.0, 4.0]);
        assert_eq!(vol.count([2, 2, 2]), 2);
    }

    #[test]
    fn lifting_behind_cameras_is_zero() {
        let spec = GridSpec::new([-1.0, -1.0, -4.0], [1.0, 1.0, -2.0], [2, 2, 2]).unwrap();
        let rig = CameraRig::new(vec![looking_down_z(Point3::origin())]);
        let vol = lift_images_to_volume(&[Image::filled(21, 21, 1, 9.0)], &rig, &spec).unwrap();
        assert!(vol.valid_count.iter().all(|&c| c == 0));
        assert!(vol.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lifting_rejects_channel_mismatch() {
        let spec = GridSpec::new([-1.0, -1.0, 2.0], [1.0, 1.0, 4.0], [2, 2, 2]).unwrap();
        let rig = CameraRig::new(vec![looking_down_z(Point3::origin()), looking_down_z(Point3::origin())]);
        let r = lift_images_to_volume(&[Image::filled(21, 21, 1, 0.0), Image::filled(21, 21, 2, 0.0)], &rig, &spec);
        assert!(matches!(r, Err(OccError::ShapeMismatch(_))));
    }
}
