//! Vector Neuron primitives. A feature is a list of channels, each a 3-vector;
//! weights mix channels and never mix spatial coordinates, so every layer
//! commutes with rotations of the input.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

use super::tensor::Tensor;

/// Denominator guard of the VN-ReLU projection.
pub const VN_EPS: f64 = 1e-12;
/// Directions with a smaller squared norm pass the input through.
pub const VN_ZERO_DIRECTION: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Equivariant,
    Invariant,
}

/// `channels × 3` matrix-valued feature.
#[derive(Debug, Clone, PartialEq)]
pub struct VnFeature {
    pub values: Vec<Vec3>,
    pub kind: FeatureKind,
}

impl VnFeature {
    pub fn new(values: Vec<Vec3>, kind: FeatureKind) -> Self {
        Self { values, kind }
    }

    pub fn equivariant(values: Vec<Vec3>) -> Self {
        Self::new(values, FeatureKind::Equivariant)
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    /// Left-multiplies every channel by `r`.
    pub fn rotated(&self, r: &Mat3) -> Self {
        Self::new(self.values.iter().map(|v| r * v).collect(), self.kind)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }

    /// Frobenius distance to another feature of the same width.
    pub fn distance(&self, other: &VnFeature) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }
}

/// Output channel `c` is `Σ_j W[c, j] · feature[j]`.
pub fn vn_linear(feature: &VnFeature, weights: &Tensor) -> Result<VnFeature> {
    if weights.shape.len() != 2 || weights.cols() != feature.channels() {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} cannot mix {} channels",
            weights.shape,
            feature.channels()
        )));
    }
    let out = (0..weights.rows())
        .map(|c| {
            feature
                .values
                .iter()
                .enumerate()
                .fold(Vec3::zeros(), |acc, (j, v)| acc + v * weights.at(c, j))
        })
        .collect();
    Ok(VnFeature::new(out, feature.kind))
}

/// VN-ReLU of one channel: keep `v` when `⟨v, d⟩ ≥ 0`, otherwise remove its
/// component along `d`.
#[inline]
pub fn vn_relu_vec(v: &Vec3, d: &Vec3) -> Vec3 {
    let dot = v.dot(d);
    let dd = d.norm_squared();
    if dot >= 0.0 || dd < VN_ZERO_DIRECTION {
        *v
    } else {
        v - d * (dot / (dd + VN_EPS))
    }
}

/// Gradients of [`vn_relu_vec`] with respect to `v` and `d`.
#[inline]
pub fn vn_relu_vec_backward(v: &Vec3, d: &Vec3, g: &Vec3) -> (Vec3, Vec3) {
    let dot = v.dot(d);
    let dd = d.norm_squared();
    if dot >= 0.0 || dd < VN_ZERO_DIRECTION {
        return (*g, Vec3::zeros());
    }
    let n = dd + VN_EPS;
    let gd = g.dot(d);
    let s = dot / n;
    let grad_v = g - d * (gd / n);
    let grad_d = -(v * (gd / n) + g * s - d * (2.0 * s * gd / n));
    (grad_v, grad_d)
}

/// Applies VN-ReLU channel-wise with the given directions.
pub fn vn_relu(feature: &VnFeature, directions: &VnFeature) -> Result<VnFeature> {
    if feature.channels() != directions.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} channels vs {} directions",
            feature.channels(),
            directions.channels()
        )));
    }
    let out = feature
        .values
        .iter()
        .zip(&directions.values)
        .map(|(v, d)| vn_relu_vec(v, d))
        .collect();
    Ok(VnFeature::new(out, feature.kind))
}

/// VN-ReLU with learned directions `d = U · feature`.
pub fn vn_nonlinear(feature: &VnFeature, direction_weights: &Tensor) -> Result<VnFeature> {
    let d = vn_linear(feature, direction_weights)?;
    vn_relu(feature, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_se3;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_feature(c: usize, seed: u64) -> VnFeature {
        let mut rng = rng_from_seed(seed);
        VnFeature::equivariant((0..c).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect())
    }

    #[test]
    fn identity_weights_pass_through() {
        let v = random_feature(5, 1);
        assert_eq!(vn_linear(&v, &Tensor::identity(5)).unwrap(), v);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let v = random_feature(4, 2);
        let w = Tensor::uniform(&[3, 4], 4, &mut rng_from_seed(3));
        let out = vn_linear(&v, &w).unwrap();
        for c in 0..3 {
            for k in 0..3 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += w.data[c * 4 + j] * v.values[j][k];
                }
                assert!((out.values[c][k] - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_commutes_with_rotation() {
        let v = random_feature(6, 4);
        let w = Tensor::uniform(&[8, 6], 6, &mut rng_from_seed(5));
        let r = *random_se3(6, None, None).unwrap().rotation();
        let a = vn_linear(&v.rotated(&r), &w).unwrap();
        let b = vn_linear(&v, &w).unwrap().rotated(&r);
        assert!(a.distance(&b) < 1e-12);
    }

    #[test]
    fn linear_shape_mismatch() {
        assert!(vn_linear(&random_feature(3, 1), &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn relu_aligned_and_opposite() {
        let d = Vec3::new(0.3, -0.2, 0.9);
        assert_eq!(vn_relu_vec(&(d * 2.0), &d), d * 2.0);
        assert!(vn_relu_vec(&-d, &d).norm() < 1e-10);
        // zero direction passes through
        assert_eq!(vn_relu_vec(&-d, &Vec3::zeros()), -d);
    }

    #[test]
    fn nonlinear_is_equivariant() {
        let mut rng = rng_from_seed(7);
        for trial in 0..100 {
            let v = random_feature(6, 100 + trial);
            let u = Tensor::uniform(&[6, 6], 6, &mut rng);
            let r = *random_se3(trial, None, None).unwrap().rotation();
            let a = vn_nonlinear(&v.rotated(&r), &u).unwrap();
            let b = vn_nonlinear(&v, &u).unwrap().rotated(&r);
            assert!(a.distance(&b) < 1e-9);
        }
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let v = Vec3::new(0.4, -0.7, 0.2);
        let d = Vec3::new(-0.5, 0.6, 0.1);
        assert!(v.dot(&d) < 0.0);
        let g = Vec3::new(0.3, 0.8, -0.5);
        let (gv, gd) = vn_relu_vec_backward(&v, &d, &g);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fv = (g.dot(&vn_relu_vec(&(v + e), &d)) - g.dot(&vn_relu_vec(&(v - e), &d))) / (2.0 * h);
            let fd = (g.dot(&vn_relu_vec(&v, &(d + e))) - g.dot(&vn_relu_vec(&v, &(d - e)))) / (2.0 * h);
            assert!((fv - gv[k]).abs() < 1e-8);
            assert!((fd - gd[k]).abs() < 1e-8);
        }
    }
}
