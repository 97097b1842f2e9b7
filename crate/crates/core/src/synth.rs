//! Procedural multi-part assemblies and the dataset pipeline that turns them
//! into step files.
//!
//! Families:
//! * `stack`: boxes stacked in z with touching faces;
//! * `table`: a slab on four legs touching its underside;
//! * `peg_board`: a board carrying cylindrical pegs and a plate with matching
//!   holes resting on it;
//! * `fractured_block`: a box cut by 1 to 3 planes into closed convex pieces.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{pose_to_vector, tokenize};
use crate::error::{Error, Result};
use crate::geometry::{uniform_unit_vector, PointCloud, Vec3};
use crate::io::{
    write_atomic, write_json, write_jsonl, write_point_cloud, AssetRecord, FailureRecord, Manifest, Split, StepRecord,
    MANIFEST_VERSION,
};
use crate::mesh::{box_mesh, canonical_normalize, sample_surface, TriangleMesh};
use crate::planner::{build_connectivity, build_steps, infer_order, StepConfig};
use crate::rng::{derive_seed, derive_seed_str, rng_from_seed};

/// Generation attempts before an asset is given up.
pub const MAX_ATTEMPTS: usize = 10;
/// Points per part used for the connectivity check during generation.
const CHECK_POINTS: usize = 4096;
/// Polygon resolution of pegs and holes.
const SEGMENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Stack,
    Table,
    PegBoard,
    FracturedBlock,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Stack, Family::Table, Family::PegBoard, Family::FracturedBlock];

    pub fn name(self) -> &'static str {
        match self {
            Family::Stack => "stack",
            Family::Table => "table",
            Family::PegBoard => "peg_board",
            Family::FracturedBlock => "fractured_block",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSpec {
    pub family: Family,
    /// Boxes of a stack; tables always have 5 parts and peg boards 2.
    pub part_count: Option<usize>,
    /// Cutting planes of a fractured block (1 to 3).
    pub cuts: Option<usize>,
    /// Draw dimensions at random instead of the fixed defaults.
    pub randomize: bool,
    /// Radial peg/hole clearance in canonical units.
    pub clearance: f64,
    pub seed: u64,
}

impl AssetSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        Self {
            family,
            part_count: None,
            cuts: None,
            randomize: false,
            clearance: 0.01,
            seed,
        }
    }

    pub fn randomized(family: Family, seed: u64) -> Self {
        Self {
            randomize: true,
            ..Self::new(family, seed)
        }
    }
}

#[derive(Default)]
struct Builder {
    v: Vec<Vec3>,
    f: Vec<[usize; 3]>,
}

impl Builder {
    fn add(&mut self, p: Vec3) -> usize {
        self.v.push(p);
        self.v.len() - 1
    }

    fn tri(&mut self, a: usize, b: usize, c: usize) {
        self.f.push([a, b, c]);
    }

    fn quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.tri(a, b, c);
        self.tri(a, c, d);
    }

    fn fan(&mut self, ring: &[usize]) {
        for k in 1..ring.len().saturating_sub(1) {
            self.tri(ring[0], ring[k], ring[k + 1]);
        }
    }

    fn polygon(&mut self, pts: &[Vec3]) {
        let ring: Vec<usize> = pts.iter().map(|p| self.add(*p)).collect();
        self.fan(&ring);
    }

    fn build(self) -> Result<TriangleMesh> {
        TriangleMesh::new(self.v, self.f)
    }
}

fn circle(cx: f64, cy: f64, r: f64, z: f64) -> Vec<Vec3> {
    (0..SEGMENTS)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / SEGMENTS as f64;
            Vec3::new(cx + r * a.cos(), cy + r * a.sin(), z)
        })
        .collect()
}

/// Closed-top cylinder side from `z0` to `z1`; the bottom is left open.
fn add_peg(b: &mut Builder, cx: f64, cy: f64, r: f64, z0: f64, z1: f64) {
    let lo: Vec<usize> = circle(cx, cy, r, z0).into_iter().map(|p| b.add(p)).collect();
    let hi: Vec<usize> = circle(cx, cy, r, z1).into_iter().map(|p| b.add(p)).collect();
    for k in 0..SEGMENTS {
        let n = (k + 1) % SEGMENTS;
        b.quad(lo[k], lo[n], hi[n], hi[k]);
    }
    b.fan(&hi);
}

/// Triangulates the annulus between a rectangle `[x0,x1]×[y0,y1]` and a
/// concentric polygonal hole, at height `z`.
fn add_holed_cell(b: &mut Builder, (x0, x1, y0, y1): (f64, f64, f64, f64), r: f64, z: f64) {
    let tau = std::f64::consts::TAU;
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let (hx, hy) = (0.5 * (x1 - x0), 0.5 * (y1 - y0));
    let inner: Vec<(f64, Vec3)> = circle(cx, cy, r, z)
        .into_iter()
        .enumerate()
        .map(|(k, p)| (tau * k as f64 / SEGMENTS as f64, p))
        .collect();
    let mut outer: Vec<(f64, Vec3)> = inner
        .iter()
        .map(|(a, _)| {
            let (c, s) = (a.cos(), a.sin());
            let t = (hx / c.abs().max(1e-300)).min(hy / s.abs().max(1e-300));
            (*a, Vec3::new(cx + t * c, cy + t * s, z))
        })
        .collect();
    for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        let a = (sy * hy).atan2(sx * hx).rem_euclid(tau);
        if outer.iter().all(|(o, _)| (o - a).abs() > 1e-12) {
            outer.push((a, Vec3::new(cx + sx * hx, cy + sy * hy, z)));
        }
    }
    outer.sort_by(|a, b| a.0.total_cmp(&b.0));
    let iv: Vec<usize> = inner.iter().map(|(_, p)| b.add(*p)).collect();
    let ov: Vec<usize> = outer.iter().map(|(_, p)| b.add(*p)).collect();
    let ang = |list: &[(f64, Vec3)], k: usize| if k == list.len() { tau } else { list[k].0 };
    let (ni, no) = (iv.len(), ov.len());
    let (mut i, mut j) = (0, 0);
    while i < ni || j < no {
        if j == no || (i < ni && ang(&inner, i + 1) <= ang(&outer, j + 1)) {
            b.tri(iv[i], ov[j % no], iv[(i + 1) % ni]);
            i += 1;
        } else {
            b.tri(iv[i % ni], ov[j], ov[(j + 1) % no]);
            j += 1;
        }
    }
}

fn stack<R: Rng>(spec: &AssetSpec, rng: &mut R) -> Result<Vec<TriangleMesh>> {
    let n = match spec.part_count {
        Some(n) if n >= 2 => n,
        Some(n) => return Err(Error::InvalidArgument(format!("a stack needs at least 2 boxes, got {n}"))),
        None if spec.randomize => rng.gen_range(2..=4),
        None => 3,
    };
    let mut z = 0.0;
    (0..n)
        .map(|_| {
            let (hx, hy, h) = if spec.randomize {
                // long side along x so the footprint orientation is canonical
                let hx = rng.gen_range(0.3..0.5);
                (hx, rng.gen_range(0.2..hx / 1.25), rng.gen_range(0.25..0.7))
            } else {
                (0.5, 0.5, 1.0)
            };
            let m = box_mesh(Vec3::new(-hx, -hy, z), Vec3::new(hx, hy, z + h));
            z += h;
            m
        })
        .collect()
}

fn table<R: Rng>(spec: &AssetSpec, rng: &mut R) -> Result<Vec<TriangleMesh>> {
    if let Some(n) = spec.part_count.filter(|&n| n != 5) {
        return Err(Error::InvalidArgument(format!("a table has 5 parts, got {n}")));
    }
    let (w, d, th, legh, s, inset) = if spec.randomize {
        (
            rng.gen_range(1.0..1.6),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.04..0.1),
            rng.gen_range(0.5..0.9),
            rng.gen_range(0.05..0.1),
            rng.gen_range(0.0..0.1),
        )
    } else {
        (1.2, 0.8, 0.06, 0.7, 0.08, 0.05)
    };
    let mut parts = vec![box_mesh(Vec3::new(-w / 2.0, -d / 2.0, legh), Vec3::new(w / 2.0, d / 2.0, legh + th))?];
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let x0 = if sx < 0.0 { -w / 2.0 + inset } else { w / 2.0 - inset - s };
        let y0 = if sy < 0.0 { -d / 2.0 + inset } else { d / 2.0 - inset - s };
        parts.push(box_mesh(Vec3::new(x0, y0, 0.0), Vec3::new(x0 + s, y0 + s, legh))?);
    }
    Ok(parts)
}

/// Built directly in canonical units: the board spans x ∈ [−0.5, 0.5].
fn peg_board<R: Rng>(spec: &AssetSpec, rng: &mut R) -> Result<Vec<TriangleMesh>> {
    if let Some(n) = spec.part_count.filter(|&n| n != 2) {
        return Err(Error::InvalidArgument(format!("a peg board has 2 parts, got {n}")));
    }
    if !(spec.clearance > 0.0) {
        return Err(Error::InvalidArgument("clearance must be positive".into()));
    }
    let (depth, tb, tp, protrude, cols, rows, rho) = if spec.randomize {
        (
            rng.gen_range(0.5..0.8),
            rng.gen_range(0.06..0.12),
            rng.gen_range(0.04..0.1),
            rng.gen_range(0.03..0.1),
            rng.gen_range(2..=4),
            rng.gen_range(1..=3),
            rng.gen_range(0.15..0.25),
        )
    } else {
        (0.6, 0.08, 0.06, 0.05, 3, 2, 0.2)
    };
    let (cw, ch) = (1.0 / cols as f64, depth / rows as f64);
    let r_peg = rho * cw.min(ch);
    // offset the vertex radius so the flat faces of peg and hole are exactly
    // `clearance` apart
    let r_hole = r_peg + spec.clearance / (std::f64::consts::PI / SEGMENTS as f64).cos();
    if r_hole >= 0.45 * cw.min(ch) {
        return Err(Error::InvalidArgument(format!("clearance {} too large for the peg grid", spec.clearance)));
    }
    // every cell carries a peg, keeping the plate symmetric about both axes
    let cells: Vec<(usize, usize)> = (0..cols).flat_map(|i| (0..rows).map(move |j| (i, j))).collect();
    let bounds = |i: usize, j: usize| {
        let x0 = -0.5 + i as f64 * cw;
        let y0 = -depth / 2.0 + j as f64 * ch;
        (x0, x0 + cw, y0, y0 + ch)
    };
    let center = |i: usize, j: usize| {
        let (x0, x1, y0, y1) = bounds(i, j);
        (0.5 * (x0 + x1), 0.5 * (y0 + y1))
    };

    let mut board = Builder::default();
    let base = box_mesh(Vec3::new(-0.5, -depth / 2.0, 0.0), Vec3::new(0.5, depth / 2.0, tb))?;
    let off = base.vertices().len();
    board.v.extend_from_slice(base.vertices());
    board.f.extend_from_slice(base.faces());
    debug_assert_eq!(off, 8);
    for &(i, j) in &cells {
        let (cx, cy) = center(i, j);
        add_peg(&mut board, cx, cy, r_peg, tb, tb + tp + protrude);
    }

    let mut plate = Builder::default();
    let (z0, z1) = (tb, tb + tp);
    for i in 0..cols {
        for j in 0..rows {
            let rect = bounds(i, j);
            let (x0, x1, y0, y1) = rect;
            if cells.contains(&(i, j)) {
                add_holed_cell(&mut plate, rect, r_hole, z0);
                add_holed_cell(&mut plate, rect, r_hole, z1);
                let (cx, cy) = center(i, j);
                let lo: Vec<usize> = circle(cx, cy, r_hole, z0).into_iter().map(|p| plate.add(p)).collect();
                let hi: Vec<usize> = circle(cx, cy, r_hole, z1).into_iter().map(|p| plate.add(p)).collect();
                for k in 0..SEGMENTS {
                    let n = (k + 1) % SEGMENTS;
                    plate.quad(lo[k], hi[k], hi[n], lo[n]);
                }
            } else {
                for z in [z0, z1] {
                    plate.polygon(&[
                        Vec3::new(x0, y0, z),
                        Vec3::new(x1, y0, z),
                        Vec3::new(x1, y1, z),
                        Vec3::new(x0, y1, z),
                    ]);
                }
            }
        }
    }
    let (hx, hy) = (0.5, depth / 2.0);
    let corners = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)];
    for k in 0..4 {
        let (a, c) = (corners[k], corners[(k + 1) % 4]);
        plate.polygon(&[
            Vec3::new(a.0, a.1, z0),
            Vec3::new(c.0, c.1, z0),
            Vec3::new(c.0, c.1, z1),
            Vec3::new(a.0, a.1, z1),
        ]);
    }
    Ok(vec![board.build()?, plate.build()?])
}

type Polygon = Vec<Vec3>;

fn box_polygons(lo: Vec3, hi: Vec3) -> Vec<Polygon> {
    let v = |x: bool, y: bool, z: bool| {
        Vec3::new(
            if x { hi.x } else { lo.x },
            if y { hi.y } else { lo.y },
            if z { hi.z } else { lo.z },
        )
    };
    let mut faces = Vec::new();
    for axis in 0..3 {
        for side in [false, true] {
            let corner = |a: bool, b: bool| match axis {
                0 => v(side, a, b),
                1 => v(a, side, b),
                _ => v(a, b, side),
            };
            faces.push(vec![
                corner(false, false),
                corner(true, false),
                corner(true, true),
                corner(false, true),
            ]);
        }
    }
    faces
}

fn dedup_points(points: &mut Vec<Vec3>) {
    let mut out: Vec<Vec3> = Vec::with_capacity(points.len());
    for p in points.drain(..) {
        if out.iter().all(|q| (p - q).norm() > 1e-10) {
            out.push(p);
        }
    }
    *points = out;
}

/// Keeps the part of a convex polyhedron with `n·x ≤ c` and caps the cut.
fn clip_polyhedron(faces: &[Polygon], n: &Vec3, c: f64) -> Vec<Polygon> {
    let mut out = Vec::new();
    let mut cap = Vec::new();
    for face in faces {
        let mut poly = Vec::new();
        for k in 0..face.len() {
            let (a, b) = (face[k], face[(k + 1) % face.len()]);
            let (da, db) = (n.dot(&a) - c, n.dot(&b) - c);
            if da <= 0.0 {
                poly.push(a);
                if da.abs() < 1e-12 {
                    cap.push(a);
                }
            }
            if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
                let p = a + (b - a) * (da / (da - db));
                poly.push(p);
                cap.push(p);
            }
        }
        dedup_points(&mut poly);
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    dedup_points(&mut cap);
    if cap.len() >= 3 {
        let center = cap.iter().sum::<Vec3>() / cap.len() as f64;
        let u = (cap[0] - center).normalize();
        let w = n.cross(&u);
        cap.sort_by(|p, q| {
            let (dp, dq) = (p - center, q - center);
            dp.dot(&w).atan2(dp.dot(&u)).total_cmp(&dq.dot(&w).atan2(dq.dot(&u)))
        });
        out.push(cap);
    }
    out
}

fn polyhedron_volume(faces: &[Polygon]) -> f64 {
    let pts: Vec<&Vec3> = faces.iter().flatten().collect();
    if pts.is_empty() {
        return 0.0;
    }
    let o = pts.iter().copied().sum::<Vec3>() / pts.len() as f64;
    let mut vol = 0.0;
    for f in faces {
        for k in 1..f.len().saturating_sub(1) {
            vol += (f[0] - o).dot(&(f[k] - o).cross(&(f[k + 1] - o))).abs() / 6.0;
        }
    }
    vol
}

fn fractured_block<R: Rng>(spec: &AssetSpec, rng: &mut R) -> Result<Vec<TriangleMesh>> {
    let cuts = match spec.cuts {
        Some(k) if (1..=3).contains(&k) => k,
        Some(k) => return Err(Error::InvalidArgument(format!("a fractured block takes 1 to 3 cuts, got {k}"))),
        None if spec.randomize => rng.gen_range(1..=3),
        None => 1,
    };
    let ext = if spec.randomize {
        Vec3::new(rng.gen_range(0.6..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.4..1.0))
    } else {
        Vec3::new(1.0, 0.8, 0.6)
    };
    let lo = Vec3::new(-ext.x / 2.0, -ext.y / 2.0, 0.0);
    let hi = Vec3::new(ext.x / 2.0, ext.y / 2.0, ext.z);
    let center = (lo + hi) / 2.0;
    let planes: Vec<(Vec3, f64)> = (0..cuts)
        .map(|_| {
            let n = uniform_unit_vector(rng);
            let p = center + Vec3::from_fn(|i, _| rng.gen_range(-0.25..0.25) * ext[i]);
            (n, n.dot(&p))
        })
        .collect();
    let total = ext.x * ext.y * ext.z;
    let mut pieces = Vec::new();
    for mask in 0..(1usize << cuts) {
        let mut faces = box_polygons(lo, hi);
        for (k, (n, c)) in planes.iter().enumerate() {
            faces = if mask >> k & 1 == 0 {
                clip_polyhedron(&faces, n, *c)
            } else {
                clip_polyhedron(&faces, &-n, -c)
            };
            if faces.len() < 4 {
                break;
            }
        }
        let vol = if faces.len() >= 4 { polyhedron_volume(&faces) } else { 0.0 };
        if vol <= 1e-9 * total {
            continue;
        }
        if vol < 0.02 * total {
            return Err(Error::Generation {
                attempts: 1,
                reason: format!("sliver piece with {:.2}% of the volume", 100.0 * vol / total),
            });
        }
        let mut b = Builder::default();
        for f in &faces {
            b.polygon(f);
        }
        pieces.push(b.build()?);
    }
    Ok(pieces)
}

fn build_family(spec: &AssetSpec, seed: u64) -> Result<Vec<TriangleMesh>> {
    let mut rng = rng_from_seed(seed);
    match spec.family {
        Family::Stack => stack(spec, &mut rng),
        Family::Table => table(spec, &mut rng),
        Family::PegBoard => peg_board(spec, &mut rng),
        Family::FracturedBlock => fractured_block(spec, &mut rng),
    }
}

/// Generates an asset in canonical coordinates whose parts form one
/// connected assembly at the default threshold.
pub fn generate_asset(spec: &AssetSpec) -> Result<Vec<TriangleMesh>> {
    generate_asset_with_tau(spec, crate::DEFAULT_TAU)
}

/// [`generate_asset`] with an explicit connectivity threshold. Up to
/// [`MAX_ATTEMPTS`] candidates are drawn from seeds derived from `spec.seed`.
pub fn generate_asset_with_tau(spec: &AssetSpec, tau: f64) -> Result<Vec<TriangleMesh>> {
    let mut reason = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let seed = derive_seed(spec.seed, attempt as u64);
        let parts = match build_family(spec, seed) {
            Ok(p) => p,
            Err(Error::InvalidArgument(m)) => return Err(Error::InvalidArgument(m)),
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        let (parts, _) = canonical_normalize(&parts)?;
        let clouds = parts
            .iter()
            .enumerate()
            .map(|(k, m)| sample_surface(m, CHECK_POINTS, derive_seed(seed, 0xC0 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let m = build_connectivity(&clouds, tau)?;
        if m.components().len() == 1 {
            return Ok(parts);
        }
        reason = format!("disconnected parts {:?}", m.components());
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS,
        reason,
    })
}

/// Settings of the dataset pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub points_coarse: usize,
    pub points: usize,
    pub tau: f64,
    pub rotation_limit_degrees: Option<f64>,
    pub translation_limit: f64,
    pub randomize_fixed: bool,
    pub translation_scale: f64,
    pub validation_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            points_coarse: crate::DEFAULT_POINTS_COARSE,
            points: crate::DEFAULT_POINTS,
            tau: crate::DEFAULT_TAU,
            rotation_limit_degrees: None,
            translation_limit: 0.0,
            randomize_fixed: false,
            translation_scale: 1.0,
            validation_fraction: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            points: self.points,
            rotation_limit_degrees: self.rotation_limit_degrees,
            translation_limit: self.translation_limit,
            randomize_fixed: self.randomize_fixed,
            fixed_from_coarse: true,
        }
    }
}

/// `count` specs per family, with ids `{family}_{index:04}`.
pub fn specs_for(families: &[Family], count: usize, randomize: bool, seed: u64) -> Vec<(String, AssetSpec)> {
    families
        .iter()
        .flat_map(|&family| {
            (0..count).map(move |i| {
                let id = format!("{}_{i:04}", family.name());
                let spec = AssetSpec {
                    randomize,
                    ..AssetSpec::new(family, derive_seed_str(seed, &id))
                };
                (id, spec)
            })
        })
        .collect()
}

struct AssetOutput {
    record: AssetRecord,
    steps: Vec<StepRecord>,
}

fn process_asset(id: &str, spec: &AssetSpec, config: &DatasetConfig, root: &Path) -> Result<AssetOutput> {
    let meshes = generate_asset_with_tau(spec, config.tau)?;
    let (record, steps) = write_asset(id, spec.family.name(), &meshes, spec.seed, config, root)?;
    Ok(AssetOutput { record, steps })
}

/// Normalizes, samples, plans and splits one asset into steps, writing its
/// files under `root/assets/{id}`. Paths in the returned records are
/// relative to `root`; every record is tagged as training data.
pub fn write_asset(
    id: &str,
    category: &str,
    meshes: &[TriangleMesh],
    seed: u64,
    config: &DatasetConfig,
    root: &Path,
) -> Result<(AssetRecord, Vec<StepRecord>)> {
    let (meshes, normalization) = canonical_normalize(meshes)?;
    let clouds: Vec<PointCloud> = meshes
        .iter()
        .enumerate()
        .map(|(k, m)| sample_surface(m, config.points_coarse, derive_seed(seed, 0x5A00 + k as u64)))
        .collect::<Result<_>>()?;
    let matrix = build_connectivity(&clouds, config.tau)?;
    let order = infer_order(&clouds, &matrix)?;
    let step_seed = derive_seed(seed, 0x57E9);
    let sequence = build_steps(&clouds, &order, step_seed, &config.step_config())?;

    let final_dir = root.join("assets").join(id);
    let tmp_dir = root.join("assets").join(format!("{id}.partial"));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir)?;
    }
    fs::create_dir_all(&tmp_dir)?;
    let rel = |name: &str| format!("assets/{id}/{name}");
    let mut parts = Vec::new();
    let mut part_clouds = Vec::new();
    for (k, (m, c)) in meshes.iter().zip(&clouds).enumerate() {
        write_atomic(&tmp_dir.join(format!("part_{k}.obj")), m.to_obj().as_bytes())?;
        write_point_cloud(&tmp_dir.join(format!("part_{k}.pc")), c)?;
        parts.push(rel(&format!("part_{k}.obj")));
        part_clouds.push(rel(&format!("part_{k}.pc")));
    }
    write_json(&tmp_dir.join("normalization.json"), &normalization)?;
    let mut steps = Vec::new();
    for step in &sequence.steps {
        let i = step.index;
        write_point_cloud(&tmp_dir.join(format!("step_{i}_fixed.pc")), &step.fixed_cloud)?;
        write_point_cloud(&tmp_dir.join(format!("step_{i}_moving.pc")), &step.moving_cloud)?;
        // the stored label maps the stored (f32) cloud
        let encoded = pose_to_vector(&step.target_pose, config.translation_scale)?;
        if encoded.saturated > 0 {
            warn!("{id}/{i}: {} pose slots saturated", encoded.saturated);
        }
        let tokens = tokenize(&encoded.vector);
        steps.push(StepRecord {
            id: StepRecord::step_id(id, i),
            asset_id: id.to_string(),
            category: category.to_string(),
            split: Split::Train,
            step_index: i,
            part_id: step.part_id,
            fixed_cloud: rel(&format!("step_{i}_fixed.pc")),
            moving_cloud: rel(&format!("step_{i}_moving.pc")),
            target_pose: step.target_pose,
            pose_vector: encoded.vector.0,
            tokens,
            token_text: tokens.to_string(),
            translation_scale: config.translation_scale,
            saturated: encoded.saturated,
            seed: step_seed,
        });
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp_dir, &final_dir)?;
    let record = AssetRecord {
        id: id.to_string(),
        family: category.to_string(),
        category: category.to_string(),
        split: Split::Train,
        seed,
        parts,
        part_clouds,
        order,
        normalization,
    };
    Ok((record, steps))
}

/// Validation members per family: a seeded shuffle of the family's assets,
/// of which the first `round(n · fraction)` (at least one when n ≥ 2) are held out.
fn assign_splits(assets: &mut [AssetRecord], fraction: f64, seed: u64) {
    let mut families: Vec<String> = assets.iter().map(|a| a.family.clone()).collect();
    families.sort();
    families.dedup();
    for fam in families {
        let mut idx: Vec<usize> = (0..assets.len()).filter(|&i| assets[i].family == fam).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed_str(seed, &format!("split/{fam}"))));
        let n = idx.len();
        let mut k = (n as f64 * fraction).round() as usize;
        if n >= 2 && fraction > 0.0 {
            k = k.clamp(1, n - 1);
        }
        for &i in &idx[..k.min(n)] {
            assets[i].split = Split::Validation;
        }
    }
}

/// Runs normalize → sample → plan → steps for every spec and writes the
/// per-asset files, `steps.jsonl` and `manifest.json` under `root`.
///
/// Failed assets are recorded in the manifest and skipped; the caller decides
/// whether the failure rate is acceptable.
pub fn generate_dataset(
    specs: &[(String, AssetSpec)],
    config: &DatasetConfig,
    seed: u64,
    root: &Path,
) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::Empty("asset specs"));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidArgument("validation_fraction must be in [0, 1)".into()));
    }
    fs::create_dir_all(root.join("assets"))?;
    let results: Vec<Result<AssetOutput>> = specs
        .par_iter()
        .map(|(id, spec)| process_asset(id, spec, config, root))
        .collect();
    let mut assets = Vec::new();
    let mut steps = Vec::new();
    let mut failures = Vec::new();
    for ((id, _), r) in specs.iter().zip(results) {
        match r {
            Ok(out) => {
                assets.push(out.record);
                steps.extend(out.steps);
            }
            Err(e @ (Error::Io(_) | Error::InvalidArgument(_))) => return Err(e),
            Err(e) => {
                warn!("asset {id} skipped: {e}");
                failures.push(FailureRecord {
                    asset_id: id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    assign_splits(&mut assets, config.validation_fraction, seed);
    for s in &mut steps {
        s.split = assets
            .iter()
            .find(|a| a.id == s.asset_id)
            .map(|a| a.split)
            .unwrap_or(Split::Train);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.to_string(),
        seed,
        config: config.clone(),
        assets,
        steps,
        failures,
    };
    write_jsonl(&root.join("steps.jsonl"), &manifest.steps)?;
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
