//! Pose codec: rigid transforms ⇄ 9D continuous pose vectors ⇄ 9 discrete
//! pose tokens over a 201-symbol vocabulary.
//!
//! The 9D layout is `[tx, ty, tz, r11, r21, r31, r12, r22, r32]`: the
//! translation followed by the first two rotation-matrix columns.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_defect, Mat3, RigidTransform, Vec3};

/// Number of symbols in the pose vocabulary.
pub const NUM_BINS: u16 = 201;
/// Largest token id.
pub const MAX_BIN: u16 = NUM_BINS - 1;
/// Slots per pose.
pub const POSE_SLOTS: usize = 9;

const DEGENERATE_NORM: f64 = 1e-8;

/// 9D continuous pose (translation + 6D rotation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseVector9(pub [f64; POSE_SLOTS]);

impl PoseVector9 {
    pub fn new(translation: [f64; 3], rotation6d: [f64; 6]) -> Self {
        let mut v = [0.0; POSE_SLOTS];
        v[..3].copy_from_slice(&translation);
        v[3..].copy_from_slice(&rotation6d);
        Self(v)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn rotation6d(&self) -> [f64; 6] {
        let mut r = [0.0; 6];
        r.copy_from_slice(&self.0[3..]);
        r
    }

    /// Clamps every slot into `[-1, 1]`, returning how many slots saturated.
    pub fn clamped(&self) -> (Self, usize) {
        let mut out = self.0;
        let mut saturated = 0;
        for x in &mut out {
            let c = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
            if c != *x {
                saturated += 1;
            }
            *x = c;
        }
        (Self(out), saturated)
    }
}

/// Exactly nine pose-vocabulary indices, each in `0..=200`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u16>", into = "Vec<u16>")]
pub struct PoseTokens([u16; POSE_SLOTS]);

impl PoseTokens {
    pub fn new(bins: [u16; POSE_SLOTS]) -> Result<Self> {
        if let Some(b) = bins.iter().find(|&&b| b > MAX_BIN) {
            return Err(Error::InvalidArgument(format!("token id {b} outside 0..={MAX_BIN}")));
        }
        Ok(Self(bins))
    }

    pub fn bins(&self) -> &[u16; POSE_SLOTS] {
        &self.0
    }

    pub fn len(&self) -> usize {
        POSE_SLOTS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Little-endian u16 per slot.
    pub fn to_bytes(&self) -> [u8; 2 * POSE_SLOTS] {
        let mut out = [0u8; 2 * POSE_SLOTS];
        for (i, b) in self.0.iter().enumerate() {
            out[2 * i..2 * i + 2].copy_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 2 * POSE_SLOTS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bytes of pose tokens, got {}",
                2 * POSE_SLOTS,
                bytes.len()
            )));
        }
        let mut bins = [0u16; POSE_SLOTS];
        for (i, b) in bins.iter_mut().enumerate() {
            *b = u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
        }
        Self::new(bins)
    }
}

impl TryFrom<Vec<u16>> for PoseTokens {
    type Error = Error;

    fn try_from(v: Vec<u16>) -> Result<Self> {
        let bins: [u16; POSE_SLOTS] = v.as_slice().try_into().map_err(|_| {
            Error::ShapeMismatch(format!("expected {POSE_SLOTS} pose tokens, got {}", v.len()))
        })?;
        Self::new(bins)
    }
}

impl From<PoseTokens> for Vec<u16> {
    fn from(t: PoseTokens) -> Self {
        t.0.to_vec()
    }
}

/// Text form: whitespace-separated `<assemble_pose_K>` tokens.
impl fmt::Display for PoseTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "<assemble_pose_{b}>")?;
        }
        Ok(())
    }
}

impl FromStr for PoseTokens {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // tolerate tokens written back-to-back without spaces
        let spaced = s.replace("><", "> <");
        let bins = spaced
            .split_whitespace()
            .map(|tok| {
                tok.strip_prefix("<assemble_pose_")
                    .and_then(|r| r.strip_suffix('>'))
                    .and_then(|n| n.parse::<u16>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("not a pose token: '{tok}'")))
            })
            .collect::<Result<Vec<u16>>>()?;
        Self::try_from(bins)
    }
}

/// First two columns of `R`, column-major.
pub fn rotation_to_6d(r: &Mat3) -> Result<[f64; 6]> {
    let defect = rotation_defect(r);
    if !(defect <= 1e-4) {
        return Err(Error::NotOrthonormal(defect));
    }
    Ok([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Intermediate values of the Gram–Schmidt decode, kept for backprop.
#[derive(Debug, Clone, Copy)]
pub struct GramSchmidt {
    pub a1: Vec3,
    pub a2: Vec3,
    pub b1: Vec3,
    pub b2: Vec3,
    pub b3: Vec3,
    n1: f64,
    n2: f64,
}

impl GramSchmidt {
    pub fn new(a1: Vec3, a2: Vec3) -> Result<Self> {
        let n1 = a1.norm();
        if !(n1 >= DEGENERATE_NORM) {
            return Err(Error::DegenerateRotation);
        }
        let b1 = a1 / n1;
        let u2 = a2 - b1 * b1.dot(&a2);
        let n2 = u2.norm();
        if !(n2 >= DEGENERATE_NORM) {
            return Err(Error::DegenerateRotation);
        }
        let b2 = u2 / n2;
        let b3 = b1.cross(&b2);
        Ok(Self {
            a1,
            a2,
            b1,
            b2,
            b3,
            n1,
            n2,
        })
    }

    /// Matrix with columns `[b1 b2 b3]`.
    pub fn matrix(&self) -> Mat3 {
        Mat3::from_columns(&[self.b1, self.b2, self.b3])
    }

    /// Pulls a gradient on the output columns back to `(a1, a2)`.
    pub fn backward(&self, g: &Mat3) -> (Vec3, Vec3) {
        let (g1, g2, g3) = (g.column(0).into_owned(), g.column(1).into_owned(), g.column(2).into_owned());
        // b3 = b1 × b2
        let mut gb1 = g1 + self.b2.cross(&g3);
        let gb2 = g2 + g3.cross(&self.b1);
        // b2 = u2 / |u2|
        let gu2 = (gb2 - self.b2 * self.b2.dot(&gb2)) / self.n2;
        // u2 = a2 − (b1·a2) b1
        let proj = self.b1.dot(&self.a2);
        let bg = self.b1.dot(&gu2);
        let ga2 = gu2 - self.b1 * bg;
        gb1 += -(self.a2 * bg) - gu2 * proj;
        // b1 = a1 / |a1|
        let ga1 = (gb1 - self.b1 * self.b1.dot(&gb1)) / self.n1;
        (ga1, ga2)
    }
}

/// Gram–Schmidt decode of the 6D representation into a proper rotation.
pub fn rotation_from_6d(v: &[f64; 6]) -> Result<Mat3> {
    let gs = GramSchmidt::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))?;
    Ok(gs.matrix())
}

/// A pose vector plus the number of slots clamped while building it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedPose {
    pub vector: PoseVector9,
    pub saturated: usize,
}

/// Translation divided by `translation_scale` then clamped; rotation as 6D.
pub fn pose_to_vector(t: &RigidTransform, translation_scale: f64) -> Result<EncodedPose> {
    if !(translation_scale > 0.0) {
        return Err(Error::InvalidArgument("translation_scale must be positive".into()));
    }
    let tr = t.translation() / translation_scale;
    let raw = PoseVector9::new([tr.x, tr.y, tr.z], rotation_to_6d(t.rotation())?);
    let (vector, saturated) = raw.clamped();
    Ok(EncodedPose { vector, saturated })
}

/// Nearest-bin index of one slot value, ties rounding up.
pub fn tokenize_value(x: f64) -> u16 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    let scaled = (x + 1.0) * f64::from(MAX_BIN) / 2.0;
    ((scaled + 0.5).floor() as u16).min(MAX_BIN)
}

/// Bin center of one token.
pub fn detokenize_value(bin: u16) -> f64 {
    f64::from(bin) / f64::from(MAX_BIN) * 2.0 - 1.0
}

pub fn tokenize(v: &PoseVector9) -> PoseTokens {
    let mut bins = [0u16; POSE_SLOTS];
    for (b, &x) in bins.iter_mut().zip(v.0.iter()) {
        *b = tokenize_value(x);
    }
    PoseTokens(bins)
}

pub fn tokens_to_vector(tokens: &PoseTokens) -> PoseVector9 {
    let mut v = [0.0; POSE_SLOTS];
    for (x, &b) in v.iter_mut().zip(tokens.0.iter()) {
        *x = detokenize_value(b);
    }
    PoseVector9(v)
}

/// Decodes a pose vector; the rotation is re-orthonormalized.
pub fn vector_to_pose(v: &PoseVector9, translation_scale: f64) -> Result<RigidTransform> {
    if !(translation_scale > 0.0) {
        return Err(Error::InvalidArgument("translation_scale must be positive".into()));
    }
    let r = rotation_from_6d(&v.rotation6d())?;
    Ok(RigidTransform::new_unchecked(r, v.translation() * translation_scale))
}

pub fn detokenize(tokens: &PoseTokens, translation_scale: f64) -> Result<RigidTransform> {
    vector_to_pose(&tokens_to_vector(tokens), translation_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_se3, rot_z};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_and_rz90_to_6d() {
        assert_eq!(rotation_to_6d(&Mat3::identity()).unwrap(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = rotation_to_6d(&rot_z(FRAC_PI_2)).unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn to_6d_rejects_non_rotation() {
        let m = Mat3::identity() * 2.0;
        assert!(matches!(rotation_to_6d(&m), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn from_6d_examples() {
        assert_eq!(rotation_from_6d(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), Mat3::identity());
        assert_eq!(rotation_from_6d(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), Mat3::identity());
        let r = rotation_from_6d(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let expect = Mat3::from_columns(&[Vec3::z(), Vec3::x(), Vec3::y()]);
        assert!((r - expect).abs().max() < 1e-15);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!(rotation_defect(&r) < 1e-12);
    }

    #[test]
    fn from_6d_degenerate() {
        assert!(matches!(rotation_from_6d(&[0.0; 6]), Err(Error::DegenerateRotation)));
        assert!(matches!(
            rotation_from_6d(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation)
        ));
    }

    #[test]
    fn random_rotation_round_trip() {
        for s in 0..1000 {
            let t = random_se3(s, None, None).unwrap();
            let back = rotation_from_6d(&rotation_to_6d(t.rotation()).unwrap()).unwrap();
            assert!((back - t.rotation()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn pose_to_vector_examples() {
        let e = pose_to_vector(&RigidTransform::identity(), 1.0).unwrap();
        assert_eq!(e.vector.0, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(e.saturated, 0);
        let half = RigidTransform::from_translation(Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(pose_to_vector(&half, 1.0).unwrap().vector.translation(), Vec3::new(0.5, 0.0, 0.0));
        let far = RigidTransform::from_translation(Vec3::new(3.0, 0.0, 0.0));
        let e = pose_to_vector(&far, 1.0).unwrap();
        assert_eq!(e.vector.translation(), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(e.saturated, 1);
    }

    #[test]
    fn tokenize_endpoints_and_midpoint() {
        assert_eq!(tokenize_value(0.0), 100);
        assert_eq!(tokenize_value(-1.0), 0);
        assert_eq!(tokenize_value(1.0), 200);
        assert_eq!(tokenize_value(7.0), 200);
        // exact half-bin ties round up
        assert_eq!(tokenize_value(-0.375), 63);
        assert_eq!(tokenize_value(0.125), 113);
    }

    #[test]
    fn token_bins_round_trip_per_slot() {
        for b in 0..=MAX_BIN {
            assert_eq!(tokenize_value(detokenize_value(b)), b);
        }
    }

    #[test]
    fn identity_tokens_decode_to_identity() {
        let v = pose_to_vector(&RigidTransform::identity(), 1.0).unwrap().vector;
        let t = detokenize(&tokenize(&v), 1.0).unwrap();
        assert!((t.rotation() - Mat3::identity()).abs().max() < 1e-9);
        assert!(t.translation().norm() < 1e-9);
    }

    #[test]
    fn all_zero_bins_are_degenerate() {
        let t = PoseTokens::new([0; 9]).unwrap();
        assert!(matches!(detokenize(&t, 1.0), Err(Error::DegenerateRotation)));
    }

    #[test]
    fn text_form_round_trip() {
        let t = PoseTokens::new([0, 1, 2, 100, 150, 199, 200, 7, 42]).unwrap();
        let s = t.to_string();
        assert!(s.starts_with("<assemble_pose_0> <assemble_pose_1>"));
        assert_eq!(s.parse::<PoseTokens>().unwrap(), t);
        assert_eq!(s.replace(' ', "").parse::<PoseTokens>().unwrap(), t);
        assert!("<assemble_pose_1>".parse::<PoseTokens>().is_err());
        assert!("<assemble_pose_201> ".repeat(9).parse::<PoseTokens>().is_err());
    }

    #[test]
    fn binary_form_round_trip() {
        let t = PoseTokens::new([200, 0, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes[0..2], [200, 0]);
        assert_eq!(PoseTokens::from_bytes(&bytes).unwrap(), t);
        assert!(PoseTokens::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn gram_schmidt_backward_matches_finite_differences() {
        let a1 = Vec3::new(0.3, -1.2, 0.5);
        let a2 = Vec3::new(0.9, 0.4, -0.7);
        let w = Mat3::new(0.3, -0.1, 0.8, 0.5, 0.2, -0.6, -0.4, 0.9, 0.1);
        let f = |a1: Vec3, a2: Vec3| GramSchmidt::new(a1, a2).unwrap().matrix().component_mul(&w).sum();
        let (g1, g2) = GramSchmidt::new(a1, a2).unwrap().backward(&w);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fd1 = (f(a1 + e, a2) - f(a1 - e, a2)) / (2.0 * h);
            let fd2 = (f(a1, a2 + e) - f(a1, a2 - e)) / (2.0 * h);
            assert!((fd1 - g1[k]).abs() < 1e-8, "{fd1} vs {}", g1[k]);
            assert!((fd2 - g2[k]).abs() < 1e-8, "{fd2} vs {}", g2[k]);
        }
    }
}
