//! Marching-cubes extraction on the voxel-center lattice and PLY files.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{OccError, Result};
use crate::geometry::{Point3, Vec3};
use crate::mesh_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use crate::volume::{ActivationMode, ScalarGrid};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

/// Triangles with area at or below this are rejected.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v as usize >= n) {
                return Err(OccError::invalid(format!("triangle {i} references a missing vertex")));
            }
            if self.triangle_area(i) <= MIN_TRIANGLE_AREA {
                return Err(OccError::invalid(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangles[i].map(|v| self.vertices[v as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Every undirected edge is used by exactly two triangles, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &c)| c == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Volume enclosed by a closed mesh; positive when normals face out.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|v| self.vertices[v as usize].coords);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn flipped(&self) -> Mesh {
        Mesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }
}

/// Level at which a grid of this mode is meshed.
pub fn default_iso(mode: ActivationMode) -> f64 {
    match mode {
        ActivationMode::Probability | ActivationMode::Density => 0.5,
        ActivationMode::Sdf => 0.0,
    }
}

// Cube corner offsets and the two corners of each of the twelve edges.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Signed field that is non-negative where the grid is occupied at `iso`.
fn occupancy_field(grid: &ScalarGrid, iso: f64) -> Vec<f64> {
    let flip = grid.mode == ActivationMode::Sdf && grid.sdf_sign_flip;
    grid.values
        .iter()
        .map(|&raw| if flip { iso - raw } else { grid.level_value(raw) - iso })
        .collect()
}

/// Triangle mesh of the `iso` level set of the grid's level values
/// (activated for probability and density, raw for SDF), with voxel centers
/// as lattice points. Triangles wind counter-clockwise seen from the free
/// side. A grid with no crossing yields an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<Mesh> {
    if !iso.is_finite() {
        return Err(OccError::NonFinite("iso level".into()));
    }
    let [nx, ny, nz] = grid.spec.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(OccError::invalid("marching cubes needs at least 2 voxels per axis"));
    }
    let field = occupancy_field(grid, iso);
    mesh_field(grid, &field)
}

fn mesh_field(grid: &ScalarGrid, field: &[f64]) -> Result<Mesh> {
    let spec = &grid.spec;
    let [nx, ny, nz] = spec.dims;
    let flat = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);

    // Per z-slab triangle lists keyed by lattice edge (corner index * 3 + axis).
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let mut case = 0usize;
                    let mut corner = [0usize; 8];
                    for (k, o) in CORNERS.iter().enumerate() {
                        corner[k] = flat(x + o[0], y + o[1], z + o[2]);
                        if field[corner[k]] < 0.0 {
                            case |= 1 << k;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let key = |e: usize| -> u64 {
                        let (a, b) = EDGES[e];
                        let (pa, pb) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&i| pa[i] != pb[i]).expect("edge spans one axis");
                        let lo = if pa[axis] < pb[axis] { corner[a] } else { corner[b] };
                        lo as u64 * 3 + axis as u64
                    };
                    let row = &TRIANGLE_TABLE[case];
                    for t in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                        tris.push([key(t[0] as usize), key(t[1] as usize), key(t[2] as usize)]);
                    }
                }
            }
            tris
        })
        .collect();

    let vs = spec.voxel_size();
    let origin = spec.min_point() + vs * 0.5;
    let lattice = |l: usize| -> Point3 {
        let [x, y, z] = spec.unravel(l);
        origin + Vec3::new(x as f64 * vs.x, y as f64 * vs.y, z as f64 * vs.z)
    };
    let stride = [1usize, nx, nx * ny];
    // Vertices are numbered in edge-key order, independent of triangle order.
    let mut keys: Vec<u64> = slabs.iter().flatten().flatten().copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let ids: HashMap<u64, u32> = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
    let vertices: Vec<Point3> = keys
        .iter()
        .map(|&k| {
            let (lo, axis) = ((k / 3) as usize, (k % 3) as usize);
            let hi = lo + stride[axis];
            let (fa, fb) = (field[lo], field[hi]);
            let t = fa / (fa - fb);
            let (pa, pb) = (lattice(lo), lattice(hi));
            pa + (pb - pa) * t
        })
        .collect();
    let mut mesh = Mesh {
        vertices,
        triangles: Vec::new(),
    };
    for keys in slabs.into_iter().flatten() {
        let tri = keys.map(|k| ids[&k]);
        let [a, b, c] = tri.map(|v| mesh.vertices[v as usize]);
        if 0.5 * (b - a).cross(&(c - a)).norm() > MIN_TRIANGLE_AREA {
            mesh.triangles.push(tri);
        }
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn ply_header(mesh: &Mesh, format: PlyFormat) -> String {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
}

/// PLY bytes: vertices as f32 (six decimals in ASCII), faces as index lists.
pub fn ply_bytes(mesh: &Mesh, format: PlyFormat) -> Vec<u8> {
    let mut out = ply_header(mesh, format).into_bytes();
    match format {
        PlyFormat::Ascii => {
            for v in &mesh.vertices {
                writeln!(out, "{:.6} {:.6} {:.6}", v.x as f32, v.y as f32, v.z as f32).expect("write to vec");
            }
            for t in &mesh.triangles {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2]).expect("write to vec");
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for v in &mesh.vertices {
                for c in [v.x, v.y, v.z] {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
            for t in &mesh.triangles {
                out.push(3);
                for &i in t {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(mesh: &Mesh, path: &Path, format: PlyFormat) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, ply_bytes(mesh, format)).map_err(|e| OccError::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes = std::fs::read(path).map_err(|e| OccError::io(path, e))?;
    parse_ply(&bytes, path)
}

/// Parses the vertex/face layout written by [`ply_bytes`].
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Mesh> {
    let fail = |offset: usize, msg: &str| OccError::format(path, offset as u64, msg);
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| fail(start, "unexpected end of header"))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| fail(start, "header is not UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(fail(off, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut n_vertex = None;
    let mut n_face = None;
    let mut vertex_props = Vec::new();
    let mut current = "";
    loop {
        let (off, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", "1.0"] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", ..] => return Err(fail(off, "unsupported PLY format")),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                n_vertex = Some(n.parse::<usize>().map_err(|_| fail(off, "bad vertex count"))?);
                current = "vertex";
            }
            ["element", "face", n] => {
                n_face = Some(n.parse::<usize>().map_err(|_| fail(off, "bad face count"))?);
                current = "face";
            }
            ["property", "float", name] if current == "vertex" => vertex_props.push(name.to_string()),
            ["property", "list", "uchar", "int" | "uint", _] if current == "face" => {}
            _ => return Err(fail(off, &format!("unsupported header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| fail(0, "missing format line"))?;
    if vertex_props != ["x", "y", "z"] {
        return Err(fail(0, "vertex properties must be float x y z"));
    }
    let (nv, nf) = (n_vertex.unwrap_or(0), n_face.unwrap_or(0));
    let mut mesh = Mesh {
        vertices: Vec::with_capacity(nv),
        triangles: Vec::with_capacity(nf),
    };
    match format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[pos..]).map_err(|_| fail(pos, "body is not UTF-8"))?;
            let mut offset = pos;
            let mut lines = body.split_inclusive('\n');
            for _ in 0..nv {
                let line = lines.next().ok_or_else(|| fail(offset, "missing vertex line"))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f32>().map(f64::from))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| fail(offset, "bad vertex coordinate"))?;
                if vals.len() != 3 {
                    return Err(fail(offset, "vertex needs three coordinates"));
                }
                mesh.vertices.push(Point3::new(vals[0], vals[1], vals[2]));
                offset += line.len();
            }
            for _ in 0..nf {
                let line = lines.next().ok_or_else(|| fail(offset, "missing face line"))?;
                let vals: Vec<u32> = line
                    .split_whitespace()
                    .map(str::parse::<u32>)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| fail(offset, "bad face index"))?;
                if vals.len() != 4 || vals[0] != 3 {
                    return Err(fail(offset, "faces must be triangles"));
                }
                mesh.triangles.push([vals[1], vals[2], vals[3]]);
                offset += line.len();
            }
            if lines.any(|l| !l.trim().is_empty()) {
                return Err(fail(offset, "trailing data after faces"));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let need = pos + nv * 12 + nf * 13;
            if bytes.len() != need {
                return Err(fail(bytes.len().min(need), "binary body has the wrong length"));
            }
            let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
            for i in 0..nv {
                let o = pos + i * 12;
                mesh.vertices.push(Point3::new(f(o), f(o + 4), f(o + 8)));
            }
            let base = pos + nv * 12;
            for i in 0..nf {
                let o = base + i * 13;
                if bytes[o] != 3 {
                    return Err(fail(o, "faces must be triangles"));
                }
                let idx = |k: usize| i32::from_le_bytes(bytes[o + 1 + 4 * k..o + 5 + 4 * k].try_into().expect("4 bytes"));
                let t = [idx(0), idx(1), idx(2)];
                if t.iter().any(|&v| v < 0) {
                    return Err(fail(o, "negative vertex index"));
                }
                mesh.triangles.push(t.map(|v| v as u32));
            }
        }
    }
    if mesh.triangles.iter().flatten().any(|&v| v as usize >= nv) {
        return Err(fail(pos, "face references a missing vertex"));
    }
    Ok(mesh)
}
