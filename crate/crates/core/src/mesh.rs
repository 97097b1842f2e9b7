//! Triangle meshes: OBJ loading, canonical normalization and area-weighted
//! surface sampling.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounds, PointCloud, Vec3};
use crate::rng::rng_from_seed;

/// Faces with smaller area are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Indexed triangle surface of one assembly part.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Validates face indices and drops degenerate faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        Self::new_with_report(vertices, faces).map(|(m, _)| m)
    }

    /// Like [`TriangleMesh::new`], also returning how many faces were dropped.
    pub fn new_with_report(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<(Self, usize)> {
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        for f in &faces {
            if f.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "face {f:?} references a vertex out of range (have {})",
                    vertices.len()
                )));
            }
        }
        let before = faces.len();
        let faces: Vec<[usize; 3]> = faces
            .into_iter()
            .filter(|f| triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) >= DEGENERATE_AREA)
            .collect();
        let dropped = before - faces.len();
        if dropped > 0 {
            log::warn!("dropped {dropped} degenerate faces");
        }
        Ok((Self { vertices, faces }, dropped))
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        triangle_area(&a, &b, &c)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.vertices)
    }

    /// Merges several meshes into one, re-indexing faces.
    pub fn merge(meshes: &[TriangleMesh]) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for m in meshes {
            let base = vertices.len();
            vertices.extend_from_slice(&m.vertices);
            faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        Self::new(vertices, faces)
    }

    fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Result<Self> {
        Self::new(self.vertices.iter().map(f).collect(), self.faces.clone())
    }

    /// Parses the `v`/`f` subset of Wavefront OBJ; polygons are fan-split.
    pub fn parse_obj(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let coords: Vec<f64> = tokens
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(lineno, format!("bad vertex coordinate: {e}")))?;
                    if coords.len() != 3 {
                        return Err(err(lineno, "vertex needs 3 coordinates".into()));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for t in tokens {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| err(lineno, format!("bad face index '{t}'")))?;
                        let resolved = if i > 0 {
                            i - 1
                        } else if i < 0 {
                            vertices.len() as i64 + i
                        } else {
                            return Err(err(lineno, "face index 0 is invalid".into()));
                        };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(err(lineno, format!("face index {i} out of range")));
                        }
                        idx.push(resolved as usize);
                    }
                    if idx.len() < 3 {
                        return Err(err(lineno, "face needs at least 3 vertices".into()));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        if faces.is_empty() {
            return Err(err(0, "no faces".into()));
        }
        Self::new(vertices, faces)
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse_obj(&text, &path.display().to_string())
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Uniform scale plus offset mapping raw coordinates to canonical ones:
/// `canonical = scale · raw + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Normalization {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p * self.scale + Vec3::from(self.offset)
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.offset)) / self.scale
    }
}

/// Jointly normalizes all parts of one object into the canonical frame:
/// longest axis-aligned extent 1, horizontal bounding-box center at the
/// origin, lowest point at z = 0. The z-up orientation is kept as given.
pub fn canonical_normalize(parts: &[TriangleMesh]) -> Result<(Vec<TriangleMesh>, Normalization)> {
    if parts.is_empty() {
        return Err(Error::Empty("part list"));
    }
    let all: Vec<Vec3> = parts.iter().flat_map(|m| m.vertices.iter().copied()).collect();
    let (lo, hi) = bounds(&all);
    let extent = (hi - lo).max();
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::ZeroExtent);
    }
    let scale = 1.0 / extent;
    let offset = [
        -scale * 0.5 * (lo.x + hi.x),
        -scale * 0.5 * (lo.y + hi.y),
        -scale * lo.z,
    ];
    let norm = Normalization { scale, offset };
    let out = parts
        .iter()
        .map(|m| m.map_vertices(|v| norm.apply(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, norm))
}

/// Area-weighted surface sampling; returns the points and their source faces.
pub fn sample_surface_with_faces(
    mesh: &TriangleMesh,
    count: usize,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let a = mesh.face_area(f);
        if a >= DEGENERATE_AREA {
            total += a;
        }
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh);
    }
    let mut rng = rng_from_seed(seed);
    let mut points = Vec::with_capacity(count);
    let mut sources = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.gen::<f64>() * total;
        let face = cumulative
            .partition_point(|&c| c <= r)
            .min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(face);
        let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push(a + (b - a) * u + (c - a) * v);
        sources.push(face);
    }
    Ok((PointCloud::new(points)?, sources))
}

/// Draws `count` points by area-weighted face choice and uniform barycentric
/// placement. Deterministic for a fixed seed.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<PointCloud> {
    sample_surface_with_faces(mesh, count, seed).map(|(c, _)| c)
}

/// Axis-aligned box `[lo, hi]` with outward-facing triangles.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> Result<TriangleMesh> {
    let v = |x: bool, y: bool, z: bool| {
        Vec3::new(
            if x { hi.x } else { lo.x },
            if y { hi.y } else { lo.y },
            if z { hi.z } else { lo.z },
        )
    };
    let vertices = vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, false, true),
        v(true, false, true),
        v(true, true, true),
        v(false, true, true),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [1, 2, 6],
        [1, 6, 5],
        [0, 4, 7],
        [0, 7, 3],
    ];
    TriangleMesh::new(vertices, faces)
}
