//! Point clouds, rigid transforms and farthest point sampling.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Ordered list of 3D points in canonical length units.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn from_slices(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    pub fn min_z(&self) -> f64 {
        self.points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.points)
    }

    /// Concatenates clouds in the given order.
    pub fn concat<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<Self> {
        let points: Vec<Vec3> = clouds
            .into_iter()
            .flat_map(|c| c.points.iter().copied())
            .collect();
        Self::new(points)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

pub fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Element of SE(3): `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRecord", into = "TransformRecord")]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

/// Serialized form: row-major rotation plus translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRecord) -> Result<Self> {
        let rot = Mat3::from_fn(|i, j| r.rotation[i][j]);
        Self::new(rot, Vec3::from(r.translation))
    }
}

impl From<RigidTransform> for TransformRecord {
    fn from(t: RigidTransform) -> Self {
        let m = t.rotation;
        Self {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

/// Largest elementwise deviation of `RᵀR` from identity, and of det(R) from 1.
pub fn rotation_defect(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

impl RigidTransform {
    /// Validates orthonormality and determinant to 1e-6.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let defect = rotation_defect(&rotation);
        if !(defect <= 1e-6) || !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::NotOrthonormal(defect));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Skips validation; callers guarantee a proper rotation.
    pub(crate) fn new_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new_unchecked(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new_unchecked(Mat3::identity(), t)
    }

    pub fn from_rotation(r: Mat3) -> Result<Self> {
        Self::new(r, Vec3::zeros())
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self::new_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self::new_unchecked(rt, -(rt * self.translation))
    }

    pub fn with_translation(&self, t: Vec3) -> RigidTransform {
        Self::new_unchecked(self.rotation, t)
    }

    /// Rotation angle of this transform in radians.
    pub fn angle(&self) -> f64 {
        geodesic_angle(&Mat3::identity(), &self.rotation)
    }
}

/// Geodesic distance on SO(3): `arccos((tr(AᵀB) − 1)/2)`.
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    let tr = (a.transpose() * b).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Rotation about a unit axis through the origin.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

pub fn rot_z(angle: f64) -> Mat3 {
    axis_angle(Vec3::z(), angle)
}

/// Applies `T` to every point.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}

/// Seeded random rigid transform.
///
/// Without a rotation limit the rotation is Haar-uniform over SO(3). With a
/// limit the angle is uniform in `[0, limit]` about a uniform random axis.
/// The translation is uniform in the cube `[-L, L]³`.
pub fn random_se3(
    seed: u64,
    rotation_limit_degrees: Option<f64>,
    translation_limit: Option<f64>,
) -> Result<RigidTransform> {
    if rotation_limit_degrees.is_some_and(|l| !(l >= 0.0))
        || translation_limit.is_some_and(|l| !(l >= 0.0))
    {
        return Err(Error::InvalidArgument("limits must be nonnegative".into()));
    }
    let mut rng = rng_from_seed(seed);
    let rotation = match rotation_limit_degrees {
        None => uniform_rotation(&mut rng),
        Some(limit) if limit >= 180.0 => uniform_rotation(&mut rng),
        Some(limit) => {
            let axis = uniform_unit_vector(&mut rng);
            let angle = rng.gen::<f64>() * limit.to_radians();
            if angle == 0.0 {
                Mat3::identity()
            } else {
                axis_angle(axis, angle)
            }
        }
    };
    let l = translation_limit.unwrap_or(0.0);
    let translation = if l == 0.0 {
        Vec3::zeros()
    } else {
        Vec3::from_fn(|_, _| rng.gen_range(-l..=l))
    };
    Ok(RigidTransform::new_unchecked(rotation, translation))
}

pub(crate) fn uniform_unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.gen_range(-1.0..=1.0));
        let n2 = v.norm_squared();
        if n2 > 1e-12 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

/// Haar-uniform rotation via a uniform unit quaternion (Shoemake).
pub(crate) fn uniform_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    );
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Greedy max-min subset selection.
///
/// The first point is the one farthest from the centroid (lowest index on
/// ties); each following point maximizes its distance to the selected set,
/// again with lowest-index tie-breaks. Returns indices in selection order.
pub fn farthest_point_indices(points: &[Vec3], count: usize) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(Error::CountExceedsPoints {
            requested: count,
            available: points.len(),
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let c = centroid(points);
    let mut start = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d > best {
            best = d;
            start = i;
        }
    }
    let mut selected = Vec::with_capacity(count);
    selected.push(start);
    let mut min_dist: Vec<f64> = points
        .iter()
        .map(|p| (p - points[start]).norm_squared())
        .collect();
    while selected.len() < count {
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > far {
                far = d;
                next = i;
            }
        }
        selected.push(next);
        let q = points[next];
        for (d, p) in min_dist.iter_mut().zip(points) {
            let nd = (p - q).norm_squared();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Farthest point sampling; output order is selection order.
pub fn farthest_point_sample(cloud: &PointCloud, count: usize) -> Result<PointCloud> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let idx = farthest_point_indices(&cloud.points, count)?;
    Ok(cloud.select(&idx))
}

/// Exact k nearest neighbours of every point (self excluded), ordered by
/// distance with ties broken by index.
pub fn knn_graph(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if n < k + 1 {
        return Err(Error::TooFewPoints {
            points: n,
            needed: k + 1,
        });
    }
    let mut graph = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        cand.clear();
        cand.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p - q).norm_squared(), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, cmp);
        let mut nn: Vec<(f64, usize)> = cand[..k].to_vec();
        nn.sort_by(cmp);
        graph.push(nn.into_iter().map(|(_, j)| j).collect());
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn approx(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn rz90_maps_x_to_y() {
        let t = RigidTransform::from_rotation(rot_z(FRAC_PI_2)).unwrap();
        let c = PointCloud::from_slices(&[[1.0, 0.0, 0.0]]).unwrap();
        let out = apply_transform(&c, &t);
        assert!(approx(&out.points()[0], &Vec3::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn identity_transform_is_noop() {
        let c = PointCloud::from_slices(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(apply_transform(&c, &RigidTransform::identity()), c);
    }

    #[test]
    fn composition_matches_sequential_application() {
        let t1 = random_se3(1, None, Some(1.0)).unwrap();
        let t2 = random_se3(2, None, Some(1.0)).unwrap();
        let c = PointCloud::from_slices(&[[0.3, -0.2, 0.9], [1.0, 1.0, 1.0]]).unwrap();
        let a = apply_transform(&apply_transform(&c, &t1), &t2);
        let b = apply_transform(&c, &t2.compose(&t1));
        for (p, q) in a.points().iter().zip(b.points()) {
            assert!(approx(p, q, 1e-9));
        }
    }

    #[test]
    fn random_se3_zero_limits_is_identity() {
        let t = random_se3(42, Some(0.0), Some(0.0)).unwrap();
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn random_se3_respects_angle_limit() {
        for s in 0..500 {
            let t = random_se3(s, Some(45.0), Some(0.3)).unwrap();
            assert!(t.angle() <= 45f64.to_radians() + 1e-9);
            assert!(t.translation().amax() <= 0.3);
            assert!(rotation_defect(t.rotation()) < 1e-12);
        }
    }

    #[test]
    fn random_se3_rejects_negative_limits() {
        assert!(random_se3(0, Some(-1.0), None).is_err());
        assert!(random_se3(0, None, Some(-0.1)).is_err());
    }

    #[test]
    fn fps_collinear_picks_diameter_pair() {
        let c = PointCloud::from_slices(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
        ])
        .unwrap();
        let out = farthest_point_sample(&c, 2).unwrap();
        let xs: Vec<f64> = out.points().iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![10.0, 0.0]);
    }

    #[test]
    fn fps_full_count_is_permutation() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.2, 0.0],
            [0.3, 1.0, 0.5],
            [-1.0, 0.0, 2.0],
            [0.5, -0.5, -0.5],
        ];
        let c = PointCloud::from_slices(&pts).unwrap();
        let mut idx = farthest_point_indices(c.points(), 5).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_rejects_oversized_count() {
        let c = PointCloud::from_slices(&[[0.0; 3]]).unwrap();
        assert!(matches!(
            farthest_point_sample(&c, 2),
            Err(Error::CountExceedsPoints { .. })
        ));
    }

    #[test]
    fn knn_breaks_ties_by_index() {
        let c = PointCloud::from_slices(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [5.0, 0.0, 0.0],
        ])
        .unwrap();
        let g = knn_graph(c.points(), 3).unwrap();
        assert_eq!(g[0], vec![1, 2, 3]);
        assert!(knn_graph(c.points(), 5).is_err());
    }

    #[test]
    fn transform_record_round_trip() {
        let t = random_se3(9, None, Some(2.0)).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }
}
