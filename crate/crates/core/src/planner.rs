//! Assembly-order inference and per-step fixed/moving inputs.
//!
//! Parts are connected when the minimum distance between their sampled
//! clouds is below `tau`. The order starts from the part with the lowest
//! point and repeatedly adds the lowest unassembled part that touches the
//! assembled set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, farthest_point_sample, random_se3, PointCloud, RigidTransform, Vec3};
use crate::rng::derive_seed;

/// Symmetric boolean adjacency between parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    n: usize,
    entries: Vec<bool>,
    tau: f64,
}

impl ConnectivityMatrix {
    pub fn from_edges(n: usize, edges: &[(usize, usize)], tau: f64) -> Result<Self> {
        let mut entries = vec![false; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::InvalidArgument(format!("bad edge ({i}, {j})")));
            }
            entries[i * n + j] = true;
            entries[j * n + i] = true;
        }
        Ok(Self { n, entries, tau })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.n];
        let mut comps = Vec::new();
        for s in 0..self.n {
            if label[s] != usize::MAX {
                continue;
            }
            let mut comp = vec![s];
            label[s] = comps.len();
            let mut k = 0;
            while k < comp.len() {
                let u = comp[k];
                for v in 0..self.n {
                    if self.get(u, v) && label[v] == usize::MAX {
                        label[v] = comps.len();
                        comp.push(v);
                    }
                }
                k += 1;
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vec3, size: f64) -> Cell {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Uniform hash grid over one cloud, for exact radius queries.
struct Grid<'a> {
    points: &'a [Vec3],
    size: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec3], size: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, size)).or_default().push(i);
        }
        Self { points, size, cells }
    }

    /// True iff some point lies strictly closer than `tau` (≤ cell size) to `q`.
    fn any_within(&self, q: &Vec3, tau: f64) -> bool {
        let (cx, cy, cz) = cell_of(q, self.size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        if ids.iter().any(|&i| (self.points[i] - q).norm() < tau) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn clouds_touch(a: &PointCloud, b: &PointCloud, tau: f64) -> bool {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    for k in 0..3 {
        if alo[k] - bhi[k] >= tau || blo[k] - ahi[k] >= tau {
            return false;
        }
    }
    // grid over the larger cloud, query with the smaller
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let grid = Grid::new(large.points(), tau);
    small.points().iter().any(|q| grid.any_within(q, tau))
}

/// Entry `(i, j)` is true iff `min ‖p − q‖ < tau` over `p ∈ Pᵢ, q ∈ Pⱼ`.
///
/// Uses an exact hash-grid search; the predicate is identical to a brute-force
/// scan over all point pairs.
pub fn build_connectivity(clouds: &[PointCloud], tau: f64) -> Result<ConnectivityMatrix> {
    if clouds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "connectivity needs at least 2 parts, got {}",
            clouds.len()
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let n = clouds.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if clouds_touch(&clouds[i], &clouds[j], tau) {
                edges.push((i, j));
            }
        }
    }
    ConnectivityMatrix::from_edges(n, &edges, tau)
}

/// Bottom-up assembly order.
///
/// The base is the part with the lowest point; every later part is the lowest
/// among unassembled parts connected to the assembled set. Ties go to the
/// lower part index. Fails when the candidate set runs empty.
pub fn infer_order(clouds: &[PointCloud], m: &ConnectivityMatrix) -> Result<Vec<usize>> {
    let n = clouds.len();
    if n == 0 {
        return Err(Error::Empty("part list"));
    }
    if m.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} clouds but a {}x{} connectivity matrix",
            n,
            m.len(),
            m.len()
        )));
    }
    let heights: Vec<f64> = clouds.iter().map(PointCloud::min_z).collect();
    let lowest = |cands: &mut dyn Iterator<Item = usize>| {
        cands.fold(None, |best: Option<usize>, i| match best {
            Some(b) if heights[b] <= heights[i] => Some(b),
            _ => Some(i),
        })
    };
    let mut assembled = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let base = lowest(&mut (0..n)).expect("non-empty");
    assembled[base] = true;
    order.push(base);
    while order.len() < n {
        let next = lowest(
            &mut (0..n).filter(|&o| !assembled[o] && order.iter().any(|&a| m.get(o, a))),
        );
        match next {
            Some(o) => {
                assembled[o] = true;
                order.push(o);
            }
            None => {
                return Err(Error::Disconnected {
                    step: order.len(),
                    components: m.components(),
                })
            }
        }
    }
    Ok(order)
}

/// One assembly step: place `part_id` onto the already assembled parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyStep {
    /// Position in the order, starting at 1.
    pub index: usize,
    pub part_id: usize,
    pub fixed_cloud: PointCloud,
    pub moving_cloud: PointCloud,
    /// Maps the moving cloud onto its assembled placement.
    pub target_pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblySequence {
    pub order: Vec<usize>,
    pub steps: Vec<AssemblyStep>,
}

/// How step clouds are built and perturbed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepConfig {
    /// Points per fixed and moving cloud.
    pub points: usize,
    /// Rotation bound of the moving-part perturbation; `None` is full SO(3).
    pub rotation_limit_degrees: Option<f64>,
    /// Half-extent of the translation perturbation cube.
    pub translation_limit: f64,
    /// Also move the fixed cloud (and the label) by one shared random transform.
    pub randomize_fixed: bool,
    /// Build the fixed cloud from the coarse part samples rather than from the
    /// already downsampled part clouds.
    pub fixed_from_coarse: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            points: crate::DEFAULT_POINTS,
            rotation_limit_degrees: None,
            translation_limit: 0.0,
            randomize_fixed: false,
            fixed_from_coarse: true,
        }
    }
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::InvalidOrder(format!("order has {} entries for {n} parts", order.len())));
    }
    let mut seen = vec![false; n];
    for &o in order {
        if o >= n || seen[o] {
            return Err(Error::InvalidOrder(format!("{order:?} is not a permutation of 0..{n}")));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Per-step fixed/moving clouds and ground-truth poses for `n − 1` steps.
///
/// The moving cloud is the part's farthest-point sample expressed in a random
/// local frame `T⁻¹`; the target pose is `T`. The fixed cloud is a
/// farthest-point sample of the union of all previously placed parts, in
/// canonical coordinates.
pub fn build_steps(
    parts: &[PointCloud],
    order: &[usize],
    seed: u64,
    config: &StepConfig,
) -> Result<AssemblySequence> {
    check_permutation(order, parts.len())?;
    if parts.len() < 2 {
        return Err(Error::InvalidOrder("need at least two parts".into()));
    }
    let dense: Vec<PointCloud> = parts
        .iter()
        .map(|p| farthest_point_sample(p, config.points))
        .collect::<Result<_>>()?;
    let mut steps = Vec::with_capacity(parts.len() - 1);
    for i in 1..order.len() {
        let placed = &order[..i];
        let fixed = if config.fixed_from_coarse {
            PointCloud::concat(placed.iter().map(|&o| &parts[o]))?
        } else {
            PointCloud::concat(placed.iter().map(|&o| &dense[o]))?
        };
        let mut fixed = farthest_point_sample(&fixed, config.points)?;
        let part = order[i];
        let perturb = random_se3(
            derive_seed(seed, i as u64),
            config.rotation_limit_degrees,
            Some(config.translation_limit),
        )?;
        let moving = apply_transform(&dense[part], &perturb.inverse());
        let mut target = perturb;
        if config.randomize_fixed {
            let shared = random_se3(
                derive_seed(seed, 0x1000 + i as u64),
                config.rotation_limit_degrees,
                Some(config.translation_limit),
            )?;
            fixed = apply_transform(&fixed, &shared);
            target = shared.compose(&perturb);
        }
        steps.push(AssemblyStep {
            index: i,
            part_id: part,
            fixed_cloud: fixed,
            moving_cloud: moving,
            target_pose: target,
        });
    }
    Ok(AssemblySequence {
        order: order.to_vec(),
        steps,
    })
}
