//! Occupancy supervision from lidar returns and sparse projected depth.
//!
//! Every return inside the grid becomes an occupied label. The segment from
//! the lidar origin to the return, shortened by half a voxel diagonal, is
//! split into `n` equal bins with one uniform draw per bin; draws that land
//! in any occupied voxel are discarded and the rest become empty labels.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{OccError, Result};
use crate::geometry::{Camera, GridSpec, Point3, Ray};
use crate::image::DepthMap;
use crate::render::ray_seed;

/// Default number of empty samples per lidar ray.
pub const SAMPLES_PER_RAY: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub origin: Point3,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, origin: Point3) -> Result<Self> {
        let finite = |p: &Point3| p.coords.iter().all(|v| v.is_finite());
        if !finite(&origin) || !points.iter().all(finite) {
            return Err(OccError::NonFinite("point cloud coordinates".into()));
        }
        Ok(PointCloud { points, origin })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points inside the grid's half-open extent, in input order.
    pub fn in_range<'a>(&'a self, spec: &'a GridSpec) -> impl Iterator<Item = &'a Point3> + 'a {
        self.points.iter().filter(move |p| spec.contains(p))
    }
}

/// Labeled key points. `empty_source[i]` is the index into `occupied` of
/// the return whose ray produced `empty[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub occupied: Vec<Point3>,
    pub empty: Vec<Point3>,
    pub empty_source: Vec<usize>,
    pub origin: Point3,
    pub samples_per_ray: usize,
    pub voxel_size: [f64; 3],
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.occupied.len() + self.empty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All points with their labels (occupied first).
    pub fn labeled_points(&self) -> impl Iterator<Item = (&Point3, bool)> {
        self.occupied
            .iter()
            .map(|p| (p, true))
            .chain(self.empty.iter().map(|p| (p, false)))
    }
}

/// Distinct voxel indices containing at least one in-range point.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> BTreeSet<[usize; 3]> {
    cloud.points.iter().filter_map(|p| spec.voxel_index(p)).collect()
}

/// Dense occupancy mask over `spec`, x-fastest.
pub fn occupancy_mask(cloud: &PointCloud, spec: &GridSpec) -> Vec<bool> {
    let mut mask = vec![false; spec.len()];
    for p in &cloud.points {
        if let Some(idx) = spec.voxel_index(p) {
            mask[spec.linear_index(idx)] = true;
        }
    }
    mask
}

pub fn generate_labels(cloud: &PointCloud, spec: &GridSpec, n: usize, seed: u64) -> Result<LabelSet> {
    if n == 0 {
        return Err(OccError::invalid("need at least one sample per ray"));
    }
    let mask = occupancy_mask(cloud, spec);
    let margin = spec.voxel_diagonal() / 2.0;
    let occupied: Vec<Point3> = cloud.in_range(spec).copied().collect();

    let per_ray: Vec<Vec<Point3>> = occupied
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let Ok((ray, range)) = Ray::towards(cloud.origin, *p) else {
                return Vec::new();
            };
            let upper = range - margin;
            if upper <= 0.0 {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(seed, i as u64));
            let width = upper / n as f64;
            let mut out = Vec::with_capacity(n);
            let mut prev = 0.0f64;
            for k in 0..n {
                let u: f64 = Open01.sample(&mut rng);
                let mut t = (k as f64 + u) * width;
                if t <= prev {
                    t = prev.next_up();
                }
                if t >= upper {
                    break;
                }
                prev = t;
                let q = ray.at(t);
                let blocked = spec
                    .voxel_index(&q)
                    .is_some_and(|idx| mask[spec.linear_index(idx)]);
                if !blocked {
                    out.push(q);
                }
            }
            out
        })
        .collect();

    let mut empty = Vec::new();
    let mut empty_source = Vec::new();
    for (i, samples) in per_ray.into_iter().enumerate() {
        empty_source.extend(std::iter::repeat(i).take(samples.len()));
        empty.extend(samples);
    }
    let vs = spec.voxel_size();
    Ok(LabelSet {
        occupied,
        empty,
        empty_source,
        origin: cloud.origin,
        samples_per_ray: n,
        voxel_size: [vs.x, vs.y, vs.z],
    })
}

/// Sparse z-depth map: each point lands on its nearest pixel and the
/// smallest positive depth per pixel wins.
pub fn project_depth_map(cloud: &PointCloud, camera: &Camera) -> DepthMap {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut map = DepthMap::invalid(w, h);
    for p in &cloud.points {
        let Some((u, v, depth)) = camera.project(p).visible() else {
            continue;
        };
        let (x, y) = (u.round(), v.round());
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let i = y as usize * w + x as usize;
        if !map.valid[i] || depth < map.depth[i] {
            map.depth[i] = depth;
            map.valid[i] = true;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Pose};
    use rand::Rng;

    fn spec() -> GridSpec {
        GridSpec::new([-52.0, 0.0, -52.0], [52.0, 6.0, 52.0], [260, 15, 260]).unwrap()
    }

    #[test]
    fn voxelize_dedups_and_matches_floor_oracle() {
        let s = spec();
        let origin = Point3::new(0.0, 1.0, 0.0);
        let two = PointCloud::new(vec![Point3::new(1.01, 1.01, 1.01), Point3::new(1.05, 1.15, 1.1)], origin).unwrap();
        assert_eq!(voxelize(&two, &s).len(), 1);
        assert!(voxelize(&PointCloud::new(vec![], origin).unwrap(), &s).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..10)
            .map(|_| Point3::new(rng.gen_range(-51.9..51.9), rng.gen_range(0.01..5.99), rng.gen_range(-51.9..51.9)))
            .collect();
        let oracle: BTreeSet<[usize; 3]> = pts
            .iter()
            .map(|p| {
                [
                    ((p.x + 52.0) / 0.4).floor() as usize,
                    (p.y / 0.4).floor() as usize,
                    ((p.z + 52.0) / 0.4).floor() as usize,
                ]
            })
            .collect();
        assert_eq!(voxelize(&PointCloud::new(pts, origin).unwrap(), &s), oracle);
    }

    #[test]
    fn single_return_labels() {
        let s = spec();
        let origin = Point3::new(0.0, 1.0, 0.0);
        let cloud = PointCloud::new(vec![Point3::new(0.0, 1.0, 30.0)], origin).unwrap();
        let labels = generate_labels(&cloud, &s, 30, 7).unwrap();
        assert_eq!(labels.occupied.len(), 1);
        assert!(labels.empty.len() <= 30 && labels.empty.len() >= 29);
        let margin = s.voxel_diagonal() / 2.0;
        let mut prev = 0.0;
        for q in &labels.empty {
            let d = (q - origin).norm();
            assert!(d > prev && d < 30.0 - margin);
            prev = d;
        }
    }

    #[test]
    fn near_returns_sample_denser() {
        let s = spec();
        let origin = Point3::new(0.0, 1.0, 0.0);
        let spacing = |r: f64| {
            let cloud = PointCloud::new(vec![Point3::new(r, 1.0, 0.0)], origin).unwrap();
            let l = generate_labels(&cloud, &s, 30, 1).unwrap();
            let d: Vec<f64> = l.empty.iter().map(|q| (q - origin).norm()).collect();
            (d[d.len() - 1] - d[0]) / (d.len() - 1) as f64
        };
        let ratio = spacing(3.0) / spacing(51.0);
        let margin = s.voxel_diagonal() / 2.0;
        let expected = (3.0 - margin) / (51.0 - margin);
        assert!((ratio - expected).abs() < 0.02, "{ratio} vs {expected}");
    }

    #[test]
    fn samples_in_other_returns_voxels_are_dropped() {
        let s = spec();
        let origin = Point3::new(0.1, 1.1, 0.1);
        // B sits on the segment toward A.
        let a = Point3::new(0.1, 1.1, 20.1);
        let b = Point3::new(0.1, 1.1, 10.1);
        let cloud = PointCloud::new(vec![a, b], origin).unwrap();
        let labels = generate_labels(&cloud, &s, 200, 2).unwrap();
        let vb = s.voxel_index(&b).unwrap();
        let from_a: Vec<&Point3> = labels
            .empty
            .iter()
            .zip(&labels.empty_source)
            .filter(|(_, &src)| src == 0)
            .map(|(p, _)| p)
            .collect();
        assert!(from_a.iter().all(|p| s.voxel_index(p) != Some(vb)));
        // Without B the same ray does sample inside B's voxel.
        let alone = generate_labels(&PointCloud::new(vec![a], origin).unwrap(), &s, 200, 2).unwrap();
        assert!(alone.empty.iter().any(|p| s.voxel_index(p) == Some(vb)));
    }

    #[test]
    fn labels_are_reproducible_and_never_inside_occupied_voxels() {
        let s = GridSpec::new([-8.0, 0.0, -8.0], [8.0, 4.0, 8.0], [40, 10, 40]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..300)
            .map(|_| Point3::new(rng.gen_range(-9.0..9.0), rng.gen_range(0.0..4.5), rng.gen_range(-9.0..9.0)))
            .collect();
        let cloud = PointCloud::new(pts, Point3::new(0.3, 1.7, -0.2)).unwrap();
        let a = generate_labels(&cloud, &s, 30, 5).unwrap();
        let b = generate_labels(&cloud, &s, 30, 5).unwrap();
        assert_eq!(a, b);
        let occ = voxelize(&cloud, &s);
        for p in &a.empty {
            if let Some(idx) = s.voxel_index(p) {
                assert!(!occ.contains(&idx));
            }
        }
        assert_eq!(a.occupied.len(), cloud.in_range(&s).count());
    }

    #[test]
    fn projection_z_buffer() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap();
        let cam = Camera::new("c", intr, Pose::identity()).unwrap();
        let cloud = PointCloud::new(
            vec![Point3::new(0.0, 0.0, 5.0), Point3::new(0.4, 0.0, 4.0), Point3::new(0.6, 0.0, 6.0), Point3::new(0.0, 0.0, -3.0)],
            Point3::origin(),
        )
        .unwrap();
        let map = project_depth_map(&cloud, &cam);
        assert_eq!(map.get(50, 40), Some(5.0));
        assert_eq!(map.get(60, 40), Some(4.0));
        assert_eq!(map.valid_count(), 2);
    }
}
