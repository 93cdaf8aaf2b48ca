//! Training objectives with analytic gradients, and the view warp used for
//! photometric self-supervision.

use rayon::prelude::*;

use crate::error::{OccError, Result};
use crate::geometry::{backproject, CameraIntrinsics, Pose};
use crate::image::{DepthMap, Image};

pub const SILOG_LAMBDA: f64 = 0.85;
pub const SILOG_ALPHA: f64 = 10.0;
pub const BCE_EPS: f64 = 1e-7;
pub const EMPTY_WEIGHT: f64 = 5.0;
pub const PHOTOMETRIC_BETA: f64 = 0.85;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Loss value and, when requested, its gradient with respect to the input
/// that was differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
}

/// Scale-invariant log loss over paired positive depths.
pub fn silog_values(pred: &[f64], gt: &[f64], lambda: f64, alpha: f64) -> Result<LossValue> {
    if pred.len() != gt.len() {
        return Err(OccError::ShapeMismatch("prediction and ground truth lengths differ".into()));
    }
    if pred.is_empty() {
        return Err(OccError::Empty("silog needs at least one pixel".into()));
    }
    if pred.iter().chain(gt).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(OccError::invalid("silog needs positive finite depths"));
    }
    let m = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.ln() - g.ln()).collect();
    let sum: f64 = diff.iter().sum();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let mut radicand = sq / m - lambda / (m * m) * sum * sum;
    if radicand < -1e-12 {
        return Err(OccError::invalid(format!("silog radicand is negative ({radicand:e})")));
    }
    radicand = radicand.max(0.0);
    let value = alpha * radicand.sqrt();
    let gradient = if radicand == 0.0 {
        vec![0.0; pred.len()]
    } else {
        let k = alpha / (2.0 * radicand.sqrt());
        diff.iter()
            .zip(pred)
            .map(|(d, p)| k * (2.0 * d / m - 2.0 * lambda * sum / (m * m)) / p)
            .collect()
    };
    Ok(LossValue {
        value,
        gradient: Some(gradient),
    })
}

/// Scale-invariant log loss over pixels valid in both maps with positive
/// ground truth. The gradient has one entry per pixel (zero where unused).
pub fn silog(pred: &DepthMap, gt: &DepthMap, lambda: f64, alpha: f64) -> Result<LossValue> {
    if !pred.same_shape(gt) {
        return Err(OccError::ShapeMismatch("depth map resolutions differ".into()));
    }
    let used: Vec<usize> = (0..gt.depth.len())
        .filter(|&i| pred.valid[i] && gt.valid[i] && gt.depth[i] > 0.0)
        .collect();
    let p: Vec<f64> = used.iter().map(|&i| pred.depth[i]).collect();
    let g: Vec<f64> = used.iter().map(|&i| gt.depth[i]).collect();
    let inner = silog_values(&p, &g, lambda, alpha)?;
    let mut grad = vec![0.0; gt.depth.len()];
    for (k, &i) in used.iter().enumerate() {
        grad[i] = inner.gradient.as_ref().expect("silog gradient")[k];
    }
    Ok(LossValue {
        value: inner.value,
        gradient: Some(grad),
    })
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn bce(pred: &[f64], labels: &[bool]) -> Result<LossValue> {
    if pred.len() != labels.len() {
        return Err(OccError::ShapeMismatch("one label per prediction".into()));
    }
    if pred.is_empty() {
        return Err(OccError::Empty("bce needs at least one sample".into()));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(labels) {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let inside = p > BCE_EPS && p < 1.0 - BCE_EPS;
        if y {
            value -= q.ln();
            grad.push(if inside { -1.0 / (q * n) } else { 0.0 });
        } else {
            value -= (1.0 - q).ln();
            grad.push(if inside { 1.0 / ((1.0 - q) * n) } else { 0.0 });
        }
    }
    Ok(LossValue {
        value: value / n,
        gradient: Some(grad),
    })
}

/// Mean absolute error toward 1 on occupied points plus `omega` times the
/// mean absolute error toward 0 on empty points. The gradient lists the
/// occupied entries first, then the empty ones.
pub fn weighted_l1(p_occupied: &[f64], p_empty: &[f64], omega: f64) -> Result<LossValue> {
    if p_occupied.is_empty() && p_empty.is_empty() {
        return Err(OccError::Empty("weighted L1 needs at least one point".into()));
    }
    let (n, k) = (p_occupied.len() as f64, p_empty.len() as f64);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p_occupied.len() + p_empty.len());
    if !p_occupied.is_empty() {
        value += p_occupied.iter().map(|p| (1.0 - p).abs()).sum::<f64>() / n;
        grad.extend(p_occupied.iter().map(|p| -sign(1.0 - p) / n));
    }
    if !p_empty.is_empty() {
        value += omega * p_empty.iter().map(|p| p.abs()).sum::<f64>() / k;
        grad.extend(p_empty.iter().map(|p| omega * sign(*p) / k));
    }
    Ok(LossValue {
        value,
        gradient: Some(grad),
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Target-view image synthesized from a source view.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: Image,
    pub mask: Vec<bool>,
    /// Per pixel and channel derivative of the warped value with respect to
    /// the target depth; present when requested.
    pub d_depth: Option<Vec<f64>>,
}

/// Samples `source` at the reprojection of every valid target pixel.
/// `target_to_source` maps target-camera coordinates to source-camera
/// coordinates; both views share `intr`.
pub fn warp(source: &Image, target_depth: &DepthMap, intr: &CameraIntrinsics, target_to_source: &Pose) -> Warped {
    warp_impl(source, target_depth, intr, target_to_source, false)
}

pub fn warp_with_jacobian(
    source: &Image,
    target_depth: &DepthMap,
    intr: &CameraIntrinsics,
    target_to_source: &Pose,
) -> Warped {
    warp_impl(source, target_depth, intr, target_to_source, true)
}

fn warp_impl(source: &Image, depth: &DepthMap, intr: &CameraIntrinsics, pose: &Pose, jac: bool) -> Warped {
    let (w, h, c) = (depth.width, depth.height, source.channels);
    let mut image = Image::filled(w, h, c, 0.0);
    let mut mask = vec![false; w * h];
    let mut d_depth = jac.then(|| vec![0.0; w * h * c]);
    let rows: Vec<(Vec<f64>, Vec<bool>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; w * c];
            let mut ok = vec![false; w];
            let mut dd = if jac { vec![0.0; w * c] } else { Vec::new() };
            let (mut du, mut dv) = (vec![0.0; c], vec![0.0; c]);
            for x in 0..w {
                let i = y * w + x;
                if !depth.valid[i] || !(depth.depth[i] > 0.0) {
                    continue;
                }
                let d = depth.depth[i];
                let Ok(p_t) = backproject(x as f64, y as f64, d, intr, &Pose::identity()) else {
                    continue;
                };
                let p_s = pose.transform_point(&p_t);
                if p_s.z <= 0.0 {
                    continue;
                }
                // Offset form keeps the identity warp exact on the pixel grid.
                let u = x as f64 + intr.fx * (p_s.x / p_s.z - p_t.x / p_t.z);
                let v = y as f64 + intr.fy * (p_s.y / p_s.z - p_t.y / p_t.z);
                let out = &mut vals[x * c..(x + 1) * c];
                if !jac {
                    ok[x] = source.bilinear_into(u, v, out);
                    continue;
                }
                if !source.bilinear_with_grad(u, v, out, &mut du, &mut dv) {
                    continue;
                }
                ok[x] = true;
                // p_s = R (d r) + t, r = ((x-cx)/fx, (y-cy)/fy, 1).
                let dir = pose.rotate(&(p_t.coords / d));
                let z = p_s.z;
                let du_dd = intr.fx * (dir.x * z - p_s.x * dir.z) / (z * z);
                let dv_dd = intr.fy * (dir.y * z - p_s.y * dir.z) / (z * z);
                for ch in 0..c {
                    dd[x * c + ch] = du[ch] * du_dd + dv[ch] * dv_dd;
                }
            }
            (vals, ok, dd)
        })
        .collect();
    for (y, (vals, ok, dd)) in rows.into_iter().enumerate() {
        image.data[y * w * c..(y + 1) * w * c].copy_from_slice(&vals);
        for x in 0..w {
            if !ok[x] {
                image.data[(y * w + x) * c..(y * w + x + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        mask[y * w..(y + 1) * w].copy_from_slice(&ok);
        if let Some(d) = d_depth.as_mut() {
            d[y * w * c..(y + 1) * w * c].copy_from_slice(&dd);
        }
    }
    Warped { image, mask, d_depth }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Mean of `f` over the 3x3 reflect-padded window of each pixel.
fn box3(w: usize, h: usize, f: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += f(reflect(y + dy, h) * w + reflect(x + dx, w));
                }
            }
            s / 9.0
        })
        .collect()
}

/// Per-pixel SSIM of two single-channel planes and the statistics needed
/// for its gradient.
struct SsimPlane {
    ssim: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimPlane {
    let mu_x = box3(w, h, |i| x[i]);
    let mu_y = box3(w, h, |i| y[i]);
    let xx = box3(w, h, |i| x[i] * x[i]);
    let yy = box3(w, h, |i| y[i] * y[i]);
    let xy = box3(w, h, |i| x[i] * y[i]);
    let n = w * h;
    let mut out = SsimPlane {
        ssim: vec![0.0; n],
        a: vec![0.0; n],
        b: vec![0.0; n],
        e: vec![0.0; n],
        f: vec![0.0; n],
        mu_x,
        mu_y,
    };
    for i in 0..n {
        let (mx, my) = (out.mu_x[i], out.mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        out.a[i] = 2.0 * mx * my + SSIM_C1;
        out.b[i] = 2.0 * sxy + SSIM_C2;
        out.e[i] = mx * mx + my * my + SSIM_C1;
        out.f[i] = sx + sy + SSIM_C2;
        out.ssim[i] = out.a[i] * out.b[i] / (out.e[i] * out.f[i]);
    }
    out
}

/// Per-pixel, channel-averaged SSIM with a 3x3 box window.
pub fn ssim(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    let mut out = vec![0.0; w * h];
    for ch in 0..c {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data[i * c + ch]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data[i * c + ch]).collect();
        let s = ssim_plane(&pa, &pb, w, h);
        for i in 0..w * h {
            out[i] += s.ssim[i] / c as f64;
        }
    }
    Ok(out)
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(OccError::ShapeMismatch("images differ in shape".into()));
    }
    if a.width < 2 || a.height < 2 {
        return Err(OccError::invalid("SSIM window needs images of at least 2x2"));
    }
    Ok(())
}

/// Masked mean over pixels of `beta (1 - SSIM) / 2 + (1 - beta) |I_t - Î_t|`,
/// both terms averaged over channels. Pixels outside the mask take the
/// target's value in `synth` before windowing so they never perturb a
/// neighbor's SSIM. The gradient is with respect to `synth`.
pub fn photometric_loss(target: &Image, synth: &Image, mask: &[bool], beta: f64) -> Result<LossValue> {
    check_pair(target, synth)?;
    let (w, h, c) = (target.width, target.height, target.channels);
    if mask.len() != w * h {
        return Err(OccError::ShapeMismatch("mask must have one entry per pixel".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(OccError::Empty("photometric mask is empty".into()));
    }
    let inv = 1.0 / count as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; w * h * c];
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|i| target.data[i * c + ch]).collect();
        let y: Vec<f64> = (0..w * h)
            .map(|i| if mask[i] { synth.data[i * c + ch] } else { x[i] })
            .collect();
        let s = ssim_plane(&x, &y, w, h);
        // dL/dS per pixel, then through the window statistics.
        let ds = -beta / (2.0 * c as f64) * inv;
        let mut g_mu = vec![0.0; w * h];
        let mut g_sy = vec![0.0; w * h];
        let mut g_sxy = vec![0.0; w * h];
        for i in 0..w * h {
            if !mask[i] {
                continue;
            }
            value += beta * (1.0 - s.ssim[i]) / (2.0 * c as f64) + (1.0 - beta) * (x[i] - y[i]).abs() / c as f64;
            let d = s.e[i] * s.f[i];
            let si = s.ssim[i];
            let dmu = (2.0 * s.mu_x[i] * s.b[i] - si * 2.0 * s.mu_y[i] * s.f[i]) / d;
            let dsy = -si / s.f[i];
            let dsxy = 2.0 * s.a[i] / d;
            // sigma_y = E[y^2] - mu_y^2 and sigma_xy = E[xy] - mu_x mu_y, so
            // the mean's total derivative folds in their mu_y dependence.
            g_mu[i] = ds * (dmu - 2.0 * s.mu_y[i] * dsy - s.mu_x[i] * dsxy);
            g_sy[i] = ds * dsy;
            g_sxy[i] = ds * dsxy;
            grad[i * c + ch] += (1.0 - beta) / c as f64 * inv * -sign(x[i] - y[i]);
        }
        for py in 0..h as isize {
            for px in 0..w as isize {
                let i = py as usize * w + px as usize;
                if !mask[i] {
                    continue;
                }
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let q = reflect(py + dy, h) * w + reflect(px + dx, w);
                        if !mask[q] {
                            continue;
                        }
                        let g = (g_mu[i] + g_sy[i] * 2.0 * y[q] + g_sxy[i] * x[q]) / 9.0;
                        grad[q * c + ch] += g;
                    }
                }
            }
        }
    }
    Ok(LossValue {
        value: value * inv,
        gradient: Some(grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-9
    }

    #[test]
    fn silog_examples() {
        assert_eq!(silog_values(&[3.0, 4.0], &[3.0, 4.0], 0.85, 10.0).unwrap().value, 0.0);
        let a = silog_values(&[2.0, 4.0, 7.0], &[1.0, 3.0, 5.0], 1.0, 10.0).unwrap().value;
        let b = silog_values(&[6.0, 12.0, 21.0], &[1.0, 3.0, 5.0], 1.0, 10.0).unwrap().value;
        assert!((a - b).abs() < 1e-9);
        // d = (ln 2, ln 4): mean(d^2) = 2.5 ln^2 2, (sum d)^2 / 4 = 2.25 ln^2 2.
        let l = silog_values(&[2.0, 4.0], &[1.0, 1.0], 0.85, 10.0).unwrap().value;
        let ln2 = 2.0f64.ln();
        let expect = 10.0 * (2.5 * ln2 * ln2 - 0.85 * 2.25 * ln2 * ln2).sqrt();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 5.312_872_534_485_872).abs() < 1e-12);
    }

    #[test]
    fn silog_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(2..20);
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..50.0)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..50.0)).collect();
            let g = silog_values(&pred, &gt, 0.85, 10.0).unwrap().gradient.unwrap();
            for k in 0..n {
                let h = 1e-6 * pred[k];
                let mut p = pred.clone();
                p[k] += h;
                let fp = silog_values(&p, &gt, 0.85, 10.0).unwrap().value;
                p[k] -= 2.0 * h;
                let fm = silog_values(&p, &gt, 0.85, 10.0).unwrap().value;
                assert!(close(g[k], (fp - fm) / (2.0 * h), 1e-5));
            }
        }
    }

    #[test]
    fn bce_examples() {
        let v = bce(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap().value;
        assert!((v - 2.0f64.ln()).abs() < 1e-15);
        let v = bce(&[0.9, 0.2], &[true, false]).unwrap().value;
        assert!((v - (-(0.9f64).ln() - (0.8f64).ln()) / 2.0).abs() < 1e-15);
        let v = bce(&[1.0, 0.0], &[true, false]).unwrap().value;
        assert!(v > 0.0 && v <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn weighted_l1_examples() {
        assert_eq!(weighted_l1(&[1.0, 1.0], &[0.0], 5.0).unwrap().value, 0.0);
        assert!((weighted_l1(&[0.5], &[0.1], 5.0).unwrap().value - 1.0).abs() < 1e-15);
        let a = weighted_l1(&[0.7, 0.4], &[0.2, 0.3], 5.0).unwrap().value;
        let b = weighted_l1(&[0.7, 0.4], &[0.2, 0.3], 10.0).unwrap().value;
        let occ = (0.3 + 0.6) / 2.0;
        assert!(((b - occ) - 2.0 * (a - occ)).abs() < 1e-12);
        assert!(weighted_l1(&[], &[], 5.0).is_err());
    }

    fn textured(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 3, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel_mut(x, y);
                p[0] = 0.5 + 0.4 * (x as f64 * 0.37).sin() * (y as f64 * 0.23).cos();
                p[1] = 0.3 + 0.01 * x as f64;
                p[2] = (x * 7 + y * 13) as f64 % 5.0 / 5.0;
            }
        }
        img
    }

    #[test]
    fn identity_warp_is_exact_and_loss_zero() {
        let intr = CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let src = textured(32, 24);
        let mut depth = DepthMap::from_values(32, 24, (0..32 * 24).map(|i| 2.0 + (i % 7) as f64).collect()).unwrap();
        depth.invalidate(3, 3);
        let out = warp(&src, &depth, &intr, &Pose::identity());
        assert_eq!(out.mask.iter().filter(|&&m| m).count(), 32 * 24 - 1);
        for i in 0..32 * 24 {
            if out.mask[i] {
                for ch in 0..3 {
                    assert!((out.image.data[i * 3 + ch] - src.data[i * 3 + ch]).abs() < 1e-12);
                }
            }
        }
        let loss = photometric_loss(&src, &out.image, &out.mask, 0.85).unwrap();
        assert!(loss.value.abs() < 1e-12);
    }

    #[test]
    fn plane_translation_disparity() {
        let (w, h) = (40, 20);
        let intr = CameraIntrinsics::new(30.0, 30.0, 19.5, 9.5, w, h).unwrap();
        let src = Image::from_fn(w, h, |x, y| 0.1 * x as f64 + 0.05 * y as f64);
        let z = 4.0;
        let tx = 0.4;
        let depth = DepthMap::from_values(w, h, vec![z; w * h]).unwrap();
        let out = warp(&src, &depth, &intr, &Pose::from_translation(Vec3::new(tx, 0.0, 0.0)));
        let disparity = intr.fx * tx / z;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let u = x as f64 + disparity;
                assert_eq!(out.mask[i], u <= (w - 1) as f64);
                if out.mask[i] {
                    let expect = 0.1 * u + 0.05 * y as f64;
                    assert!((out.image.data[i] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_patch_ssim_closed_form() {
        let (a, b) = (0.3, 0.7);
        let x = Image::filled(5, 4, 1, a);
        let y = Image::filled(5, 4, 1, b);
        let s = ssim(&x, &y).unwrap();
        let expect = (2.0 * a * b + SSIM_C1) * SSIM_C2 / ((a * a + b * b + SSIM_C1) * SSIM_C2);
        assert!(s.iter().all(|v| (v - expect).abs() < 1e-12));
        let mask = vec![true; 20];
        let loss = photometric_loss(&x, &y, &mask, 0.85).unwrap().value;
        assert!((loss - (0.85 * (1.0 - expect) / 2.0 + 0.15 * 0.4)).abs() < 1e-12);
        let l1 = photometric_loss(&x, &y, &mask, 0.0).unwrap().value;
        assert!((l1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let (w, h, c) = (rng.gen_range(2..7), rng.gen_range(2..6), 1 + trial % 3);
            let x = Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let y = Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let mut mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
            mask[0] = true;
            let g = photometric_loss(&x, &y, &mask, 0.85).unwrap().gradient.unwrap();
            for k in 0..w * h * c {
                let h_ = 1e-6;
                let mut yp = y.clone();
                yp.data[k] += h_;
                let fp = photometric_loss(&x, &yp, &mask, 0.85).unwrap().value;
                yp.data[k] -= 2.0 * h_;
                let fm = photometric_loss(&x, &yp, &mask, 0.85).unwrap().value;
                let fd = (fp - fm) / (2.0 * h_);
                assert!(close(g[k], fd, 1e-5), "{k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn warp_depth_jacobian_matches_differences() {
        let (w, h) = (24, 16);
        let intr = CameraIntrinsics::new(20.0, 20.0, 11.5, 7.5, w, h).unwrap();
        let src = textured(w, h);
        let pose = Pose::from_axis_angle(Vec3::new(0.2, 1.0, 0.1), 0.05, Vec3::new(0.3, -0.05, 0.1));
        let depth = DepthMap::from_values(w, h, (0..w * h).map(|i| 3.0 + (i % 5) as f64 * 0.3).collect()).unwrap();
        let out = warp_with_jacobian(&src, &depth, &intr, &pose);
        let jac = out.d_depth.unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for i in 0..w * h {
            if !out.mask[i] {
                continue;
            }
            let mut dp = depth.clone();
            dp.depth[i] += eps;
            let a = warp(&src, &dp, &intr, &pose);
            dp.depth[i] -= 2.0 * eps;
            let b = warp(&src, &dp, &intr, &pose);
            if !(a.mask[i] && b.mask[i]) {
                continue;
            }
            for ch in 0..3 {
                let fd = (a.image.data[i * 3 + ch] - b.image.data[i * 3 + ch]) / (2.0 * eps);
                // Skip pixels whose bilinear cell changes inside the step.
                if (fd - jac[i * 3 + ch]).abs() < 1e-4 * fd.abs().max(1.0) {
                    checked += 1;
                }
            }
        }
        assert!(checked as f64 > 0.95 * (3 * out.mask.iter().filter(|&&m| m).count()) as f64);
    }
}
