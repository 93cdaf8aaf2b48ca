//! On-disk formats.
//!
//! Grid (`OCCGRID1`), little-endian:
//!
//! ```text
//! b"OCCGRID1" | u32 nx | u32 ny | u32 nz | u8 mode (0 probability, 1 density, 2 sdf)
//! | f32 beta | f32 min[3] | f32 max[3] | f32 values[nx*ny*nz], x fastest
//! ```
//!
//! Depth maps: binary PGM (`P5`, maxval 65535, big-endian u16 millimeters,
//! 0 = invalid, depths above 65.535 m saturate) or raw f32 (`u32 width |
//! u32 height | f32 depth[w*h]` little-endian, row-major, 0.0 = invalid).
//!
//! Point clouds: ASCII XYZ (one `x y z` per line, blank lines and `#`
//! comments ignored) or `b"PCBIN1" | u32 count | f32 xyz[count][3]`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::fitter::{LidarPattern, Primitive, Scene, SyntheticSetup};
use crate::geometry::{CameraRig, GridSpec, Point3};
use crate::image::DepthMap;
use crate::labeler::PointCloud;
use crate::volume::{ActivationMode, ScalarGrid};

pub const GRID_MAGIC: &[u8; 8] = b"OCCGRID1";
pub const CLOUD_MAGIC: &[u8; 6] = b"PCBIN1";
const GRID_HEADER: usize = 8 + 12 + 1 + 4 + 24;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| OccError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| OccError::io(path, e))
}

/// Little-endian cursor that reports failures with the file and offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn fail(&self, msg: impl Into<String>) -> OccError {
        OccError::format(self.path, self.pos as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

pub fn grid_bytes(grid: &ScalarGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER + 4 * grid.values.len());
    out.extend_from_slice(GRID_MAGIC);
    for d in grid.spec.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(grid.mode.tag());
    out.extend_from_slice(&(grid.beta as f32).to_le_bytes());
    for v in grid.spec.min.iter().chain(&grid.spec.max) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn parse_grid(bytes: &[u8], path: &Path) -> Result<ScalarGrid> {
    let mut r = Reader::new(bytes, path);
    if r.take(8, "magic")? != GRID_MAGIC {
        r.pos = 0;
        return Err(r.fail("missing OCCGRID1 magic"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u32("dimensions")? as usize;
    }
    let tag_pos = r.pos;
    let tag = r.take(1, "mode tag")?[0];
    let mode = ActivationMode::from_tag(tag).ok_or_else(|| OccError::format(path, tag_pos as u64, format!("unknown mode tag {tag}")))?;
    let beta = r.f32("beta")? as f64;
    let mut ext = [0.0f64; 6];
    for v in &mut ext {
        *v = r.f32("extent")? as f64;
    }
    let spec = GridSpec::new([ext[0], ext[1], ext[2]], [ext[3], ext[4], ext[5]], dims)
        .map_err(|e| OccError::format(path, 12, e.to_string()))?;
    let n = spec.len();
    let body = r.take(n.checked_mul(4).ok_or_else(|| r.fail("grid too large"))?, "voxel values")?;
    r.finish()?;
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ScalarGrid::new(spec, values, mode, beta).map_err(|e| OccError::format(path, GRID_HEADER as u64, e.to_string()))
}

pub fn write_grid(grid: &ScalarGrid, path: &Path) -> Result<()> {
    write_file(path, &grid_bytes(grid))
}

pub fn read_grid(path: &Path) -> Result<ScalarGrid> {
    parse_grid(&read_file(path)?, path)
}

/// Millimeters stored for a depth: rounded, clamped to `1..=65535`.
fn depth_to_mm(d: f64) -> u16 {
    (d * 1000.0).round().clamp(1.0, 65535.0) as u16
}

pub fn pgm_bytes(map: &DepthMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for (d, v) in map.depth.iter().zip(&map.valid) {
        let mm = if *v { depth_to_mm(*d) } else { 0 };
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let fail = |pos: usize, msg: &str| OccError::format(path, pos as u64, msg);
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // then exactly one whitespace byte.
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "truncated PGM header"));
        }
        tokens.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if tokens[0].1 != "P5" {
        return Err(fail(0, "not a binary PGM (P5)"));
    }
    let num = |(at, t): (usize, &str)| t.parse::<usize>().map_err(|_| fail(at, "bad PGM header number"));
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 65535 {
        return Err(fail(tokens[3].0, "depth PGM must have maxval 65535"));
    }
    pos += 1;
    let need = w * h * 2;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(fail(bytes.len().min(pos + need), "PGM body has the wrong length"));
    }
    let mut map = DepthMap::invalid(w, h);
    for (i, c) in bytes[pos..].chunks_exact(2).enumerate() {
        let mm = u16::from_be_bytes([c[0], c[1]]);
        if mm > 0 {
            map.depth[i] = mm as f64 / 1000.0;
            map.valid[i] = true;
        }
    }
    Ok(map)
}

pub fn depth_f32_bytes(map: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * map.depth.len());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for (d, v) in map.depth.iter().zip(&map.valid) {
        let x = if *v { *d as f32 } else { 0.0 };
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn parse_depth_f32(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let mut r = Reader::new(bytes, path);
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let mut map = DepthMap::invalid(w, h);
    for i in 0..w * h {
        let d = r.f32("depth values")?;
        if !d.is_finite() || d < 0.0 {
            r.pos -= 4;
            return Err(r.fail("depth must be finite and non-negative"));
        }
        if d > 0.0 {
            map.depth[i] = d as f64;
            map.valid[i] = true;
        }
    }
    r.finish()?;
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    Pgm16,
    F32,
}

impl DepthFormat {
    /// `.pgm` selects PGM; anything else is raw f32.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => DepthFormat::Pgm16,
            _ => DepthFormat::F32,
        }
    }
}

pub fn write_depth(map: &DepthMap, path: &Path, format: DepthFormat) -> Result<()> {
    let bytes = match format {
        DepthFormat::Pgm16 => pgm_bytes(map),
        DepthFormat::F32 => depth_f32_bytes(map),
    };
    write_file(path, &bytes)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = read_file(path)?;
    match DepthFormat::from_path(path) {
        DepthFormat::Pgm16 => parse_pgm(&bytes, path),
        DepthFormat::F32 => parse_depth_f32(&bytes, path),
    }
}

pub fn xyz_bytes(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("write to vec");
    }
    out
}

pub fn parse_xyz(bytes: &[u8], path: &Path) -> Result<Vec<Point3>> {
    let text = std::str::from_utf8(bytes).map_err(|e| OccError::format(path, e.valid_up_to() as u64, "not UTF-8"))?;
    let mut points = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let vals: Vec<f64> = body
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| OccError::format(path, offset as u64, "bad coordinate"))?;
            if vals.len() != 3 || !vals.iter().all(|v| v.is_finite()) {
                return Err(OccError::format(path, offset as u64, "expected three finite coordinates"));
            }
            points.push(Point3::new(vals[0], vals[1], vals[2]));
        }
        offset += line.len();
    }
    Ok(points)
}

pub fn pcbin_bytes(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 12 * points.len());
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_pcbin(bytes: &[u8], path: &Path) -> Result<Vec<Point3>> {
    let mut r = Reader::new(bytes, path);
    if r.take(6, "magic")? != CLOUD_MAGIC {
        r.pos = 0;
        return Err(r.fail("missing PCBIN1 magic"));
    }
    let n = r.u32("point count")? as usize;
    let mut points = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let start = r.pos;
        let p = [r.f32("points")?, r.f32("points")?, r.f32("points")?];
        if !p.iter().all(|v| v.is_finite()) {
            r.pos = start;
            return Err(r.fail("non-finite coordinate"));
        }
        points.push(Point3::new(p[0] as f64, p[1] as f64, p[2] as f64));
    }
    r.finish()?;
    Ok(points)
}

/// Reads XYZ text or PCBIN1, chosen by the file's leading bytes.
pub fn read_points(path: &Path) -> Result<Vec<Point3>> {
    let bytes = read_file(path)?;
    if bytes.starts_with(CLOUD_MAGIC) {
        parse_pcbin(&bytes, path)
    } else {
        parse_xyz(&bytes, path)
    }
}

pub fn read_cloud(path: &Path, origin: Point3) -> Result<PointCloud> {
    PointCloud::new(read_points(path)?, origin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PcBin,
}

impl CloudFormat {
    /// `.bin` / `.pcbin` select PCBIN1; anything else is XYZ text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "pcbin") => CloudFormat::PcBin,
            _ => CloudFormat::Xyz,
        }
    }
}

pub fn write_points(points: &[Point3], path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Xyz => xyz_bytes(points),
        CloudFormat::PcBin => pcbin_bytes(points),
    };
    write_file(path, &bytes)
}

/// Byte offset of a 1-based line/column position.
fn line_col_offset(text: &str, line: usize, col: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + col.saturating_sub(1)) as u64
}

fn json_error(path: &Path, text: &str, e: serde_json::Error) -> OccError {
    OccError::format(path, line_col_offset(text, e.line(), e.column()), e.to_string())
}

pub fn read_rig(path: &Path) -> Result<CameraRig> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| OccError::format(path, e.valid_up_to() as u64, "not UTF-8"))?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_error(path, text, e))?;
    CameraRig::from_json_value(value).map_err(|e| OccError::format(path, 0, e.to_string()))
}

pub fn write_rig(rig: &CameraRig, path: &Path) -> Result<()> {
    write_file(path, format!("{}\n", rig.to_json()).as_bytes())
}

/// Camera rig inline or as a path relative to the scene file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RigRef {
    Path(PathBuf),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    grid: GridSpec,
    primitives: Vec<Primitive>,
    rig: RigRef,
    lidar: LidarPattern,
}

/// Scene description (JSON):
///
/// ```text
/// {"grid": {"min": [..3], "max": [..3], "dims": [..3]},
///  "primitives": [{"type": "ground", "height": h},
///                 {"type": "box", "min": [..3], "max": [..3]}],
///  "rig": "rig.json" | {"cameras": [...]},
///  "lidar": {"origin": [..3], "rings": n, "azimuth_steps": n,
///            "elevation_min_deg": a, "elevation_max_deg": b}}
/// ```
pub fn parse_scene(text: &str, path: &Path) -> Result<SyntheticSetup> {
    let rec: SceneRecord = serde_json::from_str(text).map_err(|e| json_error(path, text, e))?;
    let scene = Scene::new(rec.grid, rec.primitives).map_err(|e| OccError::format(path, 0, e.to_string()))?;
    let rig = match rec.rig {
        RigRef::Path(p) => {
            let p = if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p
            };
            read_rig(&p)?
        }
        RigRef::Inline(v) => CameraRig::from_json_value(v).map_err(|e| OccError::format(path, 0, e.to_string()))?,
    };
    if rig.is_empty() {
        return Err(OccError::format(path, 0, "camera rig is empty"));
    }
    if rec.lidar.rings == 0 || rec.lidar.azimuth_steps == 0 {
        return Err(OccError::format(path, 0, "lidar pattern needs rings and azimuth steps"));
    }
    Ok(SyntheticSetup {
        scene,
        rig,
        lidar: rec.lidar,
    })
}

pub fn read_scene(path: &Path) -> Result<SyntheticSetup> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| OccError::format(path, e.valid_up_to() as u64, "not UTF-8"))?;
    parse_scene(text, path)
}

/// Scene JSON with the rig inlined.
pub fn scene_json(setup: &SyntheticSetup) -> String {
    let rec = SceneRecord {
        grid: setup.scene.grid,
        primitives: setup.scene.primitives.clone(),
        rig: RigRef::Inline(setup.rig.to_json_value()),
        lidar: setup.lidar,
    };
    format!("{}\n", serde_json::to_string_pretty(&rec).expect("scene serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test.bin")
    }

    fn f32_grid(values: Vec<f32>, mode: ActivationMode) -> ScalarGrid {
        let spec = GridSpec::new([-1.5, 0.0, -2.25], [2.5, 1.0, 1.75], [4, 2, 3]).unwrap();
        ScalarGrid::new(spec, values.into_iter().map(f64::from).collect(), mode, 0.125).unwrap()
    }

    proptest! {
        #[test]
        fn grid_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e6f32..1e6, 24), tag in 0u8..3) {
            let g = f32_grid(vals, ActivationMode::from_tag(tag).unwrap());
            let bytes = grid_bytes(&g);
            let back = parse_grid(&bytes, p()).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(grid_bytes(&back), bytes);
        }
    }

    #[test]
    fn grid_header_layout() {
        let g = f32_grid(vec![0.5; 24], ActivationMode::Density);
        let b = grid_bytes(&g);
        assert_eq!(&b[..8], b"OCCGRID1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
        assert_eq!(b[20], 1);
        assert_eq!(f32::from_le_bytes(b[21..25].try_into().unwrap()), 0.125);
        assert_eq!(f32::from_le_bytes(b[25..29].try_into().unwrap()), -1.5);
        assert_eq!(b.len(), GRID_HEADER + 24 * 4);
    }

    #[test]
    fn grid_errors_carry_offsets() {
        let g = f32_grid(vec![0.0; 24], ActivationMode::Probability);
        let mut b = grid_bytes(&g);
        b[20] = 7;
        match parse_grid(&b, p()) {
            Err(OccError::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        let b = grid_bytes(&g);
        match parse_grid(&b[..b.len() - 2], p()) {
            Err(OccError::Format { offset, .. }) => assert_eq!(offset as usize, GRID_HEADER),
            other => panic!("{other:?}"),
        }
        assert!(parse_grid(b"OCCGRID2", p()).is_err());
    }

    #[test]
    fn pgm_and_f32_depth_round_trip() {
        let mut map = DepthMap::invalid(5, 3);
        map.set(0, 0, 1.234);
        map.set(4, 2, 70.0);
        map.set(2, 1, 0.0004);
        let pgm = pgm_bytes(&map);
        assert!(pgm.starts_with(b"P5\n5 3\n65535\n"));
        let back = parse_pgm(&pgm, p()).unwrap();
        assert_eq!(back.get(0, 0), Some(1.234));
        assert_eq!(back.get(4, 2), Some(65.535));
        assert_eq!(back.get(2, 1), Some(0.001));
        assert_eq!(back.valid_count(), 3);
        assert_eq!(pgm_bytes(&back), pgm);

        let raw = depth_f32_bytes(&map);
        assert_eq!(raw.len(), 8 + 15 * 4);
        let back = parse_depth_f32(&raw, p()).unwrap();
        assert_eq!(back.get(0, 0), Some(1.234f32 as f64));
        assert_eq!(back.valid, map.valid);
        assert_eq!(depth_f32_bytes(&back), raw);
    }

    #[test]
    fn clouds_round_trip() {
        let pts = vec![Point3::new(0.1, -2.0, 3.5e-3), Point3::new(1e3, 0.0, -7.25)];
        let text = xyz_bytes(&pts);
        assert_eq!(parse_xyz(&text, p()).unwrap(), pts);
        let with_comments = b"# header\n\n1 2 3\n  4 5 6 # tail\n";
        assert_eq!(parse_xyz(with_comments, p()).unwrap().len(), 2);
        match parse_xyz(b"1 2 3\n1 2\n", p()) {
            Err(OccError::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        let bin = pcbin_bytes(&pts);
        let back = parse_pcbin(&bin, p()).unwrap();
        assert_eq!(pcbin_bytes(&back), bin);
        assert_eq!(back[1], pts[1]);
        assert!(parse_pcbin(&bin[..bin.len() - 1], p()).is_err());
    }

    #[test]
    fn scene_round_trip_with_inline_and_referenced_rig() {
        let setup = SyntheticSetup::default_setup();
        let text = scene_json(&setup);
        let back = parse_scene(&text, Path::new("scene.json")).unwrap();
        assert_eq!(back, setup);

        let dir = tempfile::tempdir().unwrap();
        write_rig(&setup.rig, &dir.path().join("rig.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["rig"] = serde_json::Value::String("rig.json".into());
        let path = dir.path().join("scene.json");
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(read_scene(&path).unwrap(), setup);
    }

    #[test]
    fn malformed_scene_reports_position() {
        let text = "{\n  \"grid\": oops\n}";
        match parse_scene(text, Path::new("s.json")) {
            Err(OccError::Format { offset, .. }) => assert!((10..=14).contains(&offset), "{offset}"),
            other => panic!("{other:?}"),
        }
    }
}
