//! Fixed/moving correlation and the pose projector.
//!
//! The mixer builds an `f × f` matrix `M = W_M + G_f · B · G_fᵀ` from the
//! invariant features of the fixed cloud and applies it to the centered
//! equivariant features of the moving cloud. The result is equivariant to
//! rotations of the moving cloud and invariant to motions of the fixed one.
//!
//! The projector reads rotation-invariant Gram scalars of the correlation
//! together with both invariant features, passes them through a small tanh
//! layer and uses the hidden units to gate linear read-outs:
//!
//! * an up axis `u = Σ_c α_c · C_c`,
//! * an in-plane axis `e`: the dominant eigenvector of `P A P` where
//!   `P = I − ûûᵀ` and `A` is the moving covariance plus `Σ_c λ_c Cc_c Cc_cᵀ`.
//!   Its sign follows the third moment of the moving cloud along it, or the
//!   largest coordinate when that moment vanishes,
//! * the rotation rows `a_0 = q_0 e + q_1 (û × e)` and `a_1 = u × a_0`,
//!   turned into `R = GS(a_0, a_1)ᵀ`,
//! * the canonical centroid `ĉ = Σ_c β_c · F_fixed,c + κ · R m`, with
//!   `t = ĉ − R · m` where `m` is the centroid of the moving cloud.
//!
//! Everything is equivariant to rotations of the moving cloud about the
//! origin except the sign tie-break, which only fires for clouds that are
//! symmetric along `e`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{GramSchmidt, PoseVector9};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};

use super::model::{encode_backward, encode_with_cache, EncodeCache, EncoderConfig, EncoderOutput, EncoderParams, PreparedCloud};
use super::tensor::Tensor;
use super::vn::{FeatureKind, VnFeature};

#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    /// `[f, f]`
    pub w_m: Tensor,
    /// `[3, 3]`
    pub b: Tensor,
}

impl MixerParams {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut w_m = Tensor::uniform(&[channels, channels], channels, rng);
        w_m.scale(0.5);
        w_m.add_assign(&Tensor::identity(channels));
        let mut b = Tensor::uniform(&[3, 3], 3 * channels, rng);
        b.scale(1.0 / channels as f64);
        Self { w_m, b }
    }
}

/// Correlation of the moving features under the fixed-part mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationFeature {
    /// `C_c = Σ_d M_cd (F_moving,d − m) + s_c · m`
    pub values: VnFeature,
    /// Row sums `s_c = Σ_d M_cd`.
    pub row_sums: Vec<f64>,
    /// Centroid `m` of the moving cloud.
    pub origin: Vec3,
}

impl CorrelationFeature {
    pub fn centered(&self) -> Vec<Vec3> {
        self.values
            .values
            .iter()
            .zip(&self.row_sums)
            .map(|(v, s)| v - self.origin * *s)
            .collect()
    }
}

pub fn mixing_matrix(g_fixed: &VnFeature, mixer: &MixerParams) -> Result<Tensor> {
    let f = g_fixed.channels();
    if mixer.w_m.shape != [f, f] {
        return Err(Error::ShapeMismatch(format!(
            "mixer is {:?} for {f} channels",
            mixer.w_m.shape
        )));
    }
    let b = Mat3::from_row_slice(&mixer.b.data);
    let gb: Vec<Vec3> = g_fixed.values.iter().map(|g| b.transpose() * g).collect();
    let mut m = mixer.w_m.clone();
    for c in 0..f {
        for d in 0..f {
            m.data[c * f + d] += gb[c].dot(&g_fixed.values[d]);
        }
    }
    Ok(m)
}

fn apply_matrix(m: &Tensor, v: &[Vec3]) -> Vec<Vec3> {
    let f = v.len();
    (0..f)
        .map(|c| {
            let row = &m.data[c * f..(c + 1) * f];
            row.iter().zip(v).fold(Vec3::zeros(), |acc, (w, x)| acc + x * *w)
        })
        .collect()
}

/// Mixes the moving features with the fixed-part invariants.
pub fn correlate(moving: &EncoderOutput, g_fixed: &VnFeature, mixer: &MixerParams) -> Result<CorrelationFeature> {
    if moving.equivariant.kind != FeatureKind::Equivariant || g_fixed.kind != FeatureKind::Invariant {
        return Err(Error::ShapeMismatch("correlate expects equivariant moving and invariant fixed features".into()));
    }
    if moving.equivariant.channels() != g_fixed.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} moving channels vs {} fixed channels",
            moving.equivariant.channels(),
            g_fixed.channels()
        )));
    }
    let m = mixing_matrix(g_fixed, mixer)?;
    let cc = apply_matrix(&m, &moving.centered());
    let f = cc.len();
    let row_sums: Vec<f64> = (0..f).map(|c| m.data[c * f..(c + 1) * f].iter().sum()).collect();
    let values = cc
        .iter()
        .zip(&row_sums)
        .map(|(v, s)| v + moving.centroid * *s)
        .collect();
    Ok(CorrelationFeature {
        values: VnFeature::new(values, FeatureKind::Equivariant),
        row_sums,
        origin: moving.centroid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    /// Channels of the Gram projection.
    pub gram: usize,
    /// Hidden tanh units.
    pub hidden: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { gram: 8, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub config: ProjectorConfig,
    /// `[p, f]`
    pub p_z: Tensor,
    /// `[h, p(p+1)/2 + 6f]`
    pub w1: Tensor,
    /// `[h]`
    pub b1: Tensor,
    /// Up-axis weights on the correlation channels, `[f]`.
    pub r0: Tensor,
    /// `[f, h]`
    pub rg: Tensor,
    /// Second-order weights on the correlation channels, `[f]`.
    pub lam: Tensor,
    /// In-plane angle read-out, `[2]`.
    pub q0: Tensor,
    /// `[2, h]`
    pub qg: Tensor,
    /// `[f]`
    pub t0: Tensor,
    /// `[f, h]`
    pub tg: Tensor,
    /// Weight of the rotated moving centroid in `ĉ`, `[1]`.
    pub k0: Tensor,
    /// `[1, h]`
    pub kg: Tensor,
}

fn pair_count(p: usize) -> usize {
    p * (p + 1) / 2
}

impl ProjectorParams {
    pub fn init<R: Rng>(config: ProjectorConfig, channels: usize, rng: &mut R) -> Self {
        let (p, h, f) = (config.gram, config.hidden, channels);
        let u = pair_count(p) + 6 * f;
        let mut gated = |rows: usize| {
            let mut t = Tensor::uniform(&[rows, h], h * f, rng);
            t.scale(0.1);
            t
        };
        let (rg, qg, tg, kg) = (gated(f), gated(2), gated(f), gated(1));
        // both channel read-outs start near the channel mean
        let mean_init = |rng: &mut R| {
            let mut t = Tensor::uniform(&[f], f, rng);
            t.scale(0.1 / (f as f64).sqrt());
            for x in &mut t.data {
                *x += 1.0 / f as f64;
            }
            t
        };
        let r0 = mean_init(rng);
        let t0 = mean_init(rng);
        let mut q0 = Tensor::zeros(&[2]);
        q0.data[0] = 1.0;
        Self {
            config,
            p_z: Tensor::uniform(&[p, f], f, rng),
            w1: Tensor::uniform(&[h, u], u, rng),
            b1: Tensor::zeros(&[h]),
            r0,
            rg,
            lam: Tensor::zeros(&[f]),
            q0,
            qg,
            t0,
            tg,
            k0: Tensor::zeros(&[1]),
            kg,
        }
    }
}

/// Raw head output and the decoded pose.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `(ĉ, a_0, a_1)`: canonical centroid and the two rotation rows.
    pub raw: PoseVector9,
    pub pose: RigidTransform,
}

/// Below this relative third moment the in-plane axis sign is a tie.
const SKEW_TIE: f64 = 0.05;
const TINY: f64 = 1e-12;

/// What the head sees of the moving cloud.
struct MovingView<'a> {
    cc: Vec<Vec3>,
    row_sums: &'a [f64],
    origin: Vec3,
    second: &'a Mat3,
    third: &'a [Mat3; 3],
    g_moving: &'a VnFeature,
}

struct Readout {
    z: Vec<Vec3>,
    u: Vec<f64>,
    h: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    kappa: f64,
    q: [f64; 2],
    up: Vec3,
    up_hat: Vec3,
    proj: Mat3,
    tensor: Mat3,
    eig_values: [f64; 3],
    eig_vectors: [Vec3; 3],
    axis: usize,
    sign: f64,
    e: Vec3,
    e2: Vec3,
    rows: [Vec3; 2],
    gs: Option<GramSchmidt>,
    chat: Vec3,
}

impl Readout {
    fn raw(&self) -> PoseVector9 {
        let (c, r) = (&self.chat, &self.rows);
        PoseVector9::new([c.x, c.y, c.z], [r[0].x, r[0].y, r[0].z, r[1].x, r[1].y, r[1].z])
    }
}

/// Equivariant sign choice for an axis: the tail of the third moment, or a
/// fixed coordinate convention when the cloud is symmetric along it.
fn axis_sign(e: &Vec3, second: &Mat3, third: &[Mat3; 3]) -> f64 {
    let skew: f64 = (0..3).map(|a| e[a] * e.dot(&(third[a] * e))).sum();
    let sigma2 = e.dot(&(second * e)).max(0.0);
    if skew.abs() > SKEW_TIE * sigma2.powf(1.5) {
        return skew.signum();
    }
    let k = e.iamax();
    if e[k] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn readout(mv: &MovingView, fixed: &EncoderOutput, params: &ProjectorParams) -> Result<Readout> {
    let cc = &mv.cc;
    let f = cc.len();
    let (p, hn) = (params.config.gram, params.config.hidden);
    if params.p_z.shape != [p, f] || fixed.equivariant.channels() != f || mv.g_moving.channels() != f {
        return Err(Error::ShapeMismatch(format!("projector expects {} channels", params.p_z.cols())));
    }
    let z: Vec<Vec3> = (0..p)
        .map(|a| (0..f).fold(Vec3::zeros(), |acc, c| acc + cc[c] * params.p_z.at(a, c)))
        .collect();
    let mut u = Vec::with_capacity(params.w1.cols());
    for a in 0..p {
        for b in a..p {
            u.push(z[a].dot(&z[b]));
        }
    }
    for g in fixed.invariant.values.iter().chain(&mv.g_moving.values) {
        u.extend_from_slice(g.as_slice());
    }
    let cols = u.len();
    let h: Vec<f64> = (0..hn)
        .map(|j| {
            let row = &params.w1.data[j * cols..(j + 1) * cols];
            let pre = params.b1.data[j] + row.iter().zip(&u).map(|(w, x)| w * x).sum::<f64>();
            pre.tanh()
        })
        .collect();
    let gate = |base: f64, g: &Tensor, r: usize| base + g.data[r * hn..(r + 1) * hn].iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
    let alpha: Vec<f64> = (0..f).map(|c| gate(params.r0.data[c], &params.rg, c)).collect();
    let beta: Vec<f64> = (0..f).map(|c| gate(params.t0.data[c], &params.tg, c)).collect();
    let q = [0, 1].map(|k| gate(params.q0.data[k], &params.qg, k));
    let kappa = gate(params.k0.data[0], &params.kg, 0);

    // up axis from the uncentered correlation C_c = Cc_c + s_c m
    let up = (0..f).fold(Vec3::zeros(), |acc, c| acc + (cc[c] + mv.origin * mv.row_sums[c]) * alpha[c]);
    let norm = up.norm();
    let up_hat = if norm > TINY { up / norm } else { Vec3::zeros() };
    let proj = Mat3::identity() - up_hat * up_hat.transpose();
    let tensor = (0..f).fold(*mv.second, |acc, c| acc + cc[c] * cc[c].transpose() * params.lam.data[c]);
    let eig = nalgebra::SymmetricEigen::new(proj * tensor * proj);
    let eig_values = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    let eig_vectors = [0, 1, 2].map(|j| eig.eigenvectors.column(j).into_owned());
    let along = (0..3)
        .max_by(|&a, &b| eig_vectors[a].dot(&up_hat).abs().total_cmp(&eig_vectors[b].dot(&up_hat).abs()))
        .unwrap_or(0);
    let axis = (0..3)
        .filter(|&j| norm <= TINY || j != along)
        .max_by(|&a, &b| eig_values[a].total_cmp(&eig_values[b]))
        .unwrap_or(0);
    let sign = axis_sign(&eig_vectors[axis], mv.second, mv.third);
    let e = eig_vectors[axis] * sign;
    let e2 = up_hat.cross(&e);
    let a0 = e * q[0] + e2 * q[1];
    let rows = [a0, up.cross(&a0)];
    let gs = GramSchmidt::new(rows[0], rows[1]).ok();
    let mut chat = (0..f).fold(Vec3::zeros(), |acc, c| acc + fixed.equivariant.values[c] * beta[c]);
    if let Some(gs) = &gs {
        chat += gs.matrix().transpose() * mv.origin * kappa;
    }
    Ok(Readout {
        z,
        u,
        h,
        alpha,
        beta,
        kappa,
        q,
        up,
        up_hat,
        proj,
        tensor,
        eig_values,
        eig_vectors,
        axis,
        sign,
        e,
        e2,
        rows,
        gs,
        chat,
    })
}

/// Decodes a raw head vector into a pose for a moving cloud centered at `origin`.
pub fn decode_head(raw: &PoseVector9, origin: &Vec3) -> Result<RigidTransform> {
    let r = raw.rotation6d();
    let gs = GramSchmidt::new(Vec3::new(r[0], r[1], r[2]), Vec3::new(r[3], r[4], r[5]))?;
    let rotation = gs.matrix().transpose();
    Ok(RigidTransform::new_unchecked(rotation, raw.translation() - rotation * origin))
}

struct HeadCache {
    cc: Vec<Vec3>,
    row_sums: Vec<f64>,
    origin: Vec3,
    f_fixed: Vec<Vec3>,
    ro: Readout,
    gs: GramSchmidt,
    rotation: Mat3,
}

fn head_forward(mv: MovingView, fixed: &EncoderOutput, params: &ProjectorParams) -> Result<(HeadOutput, HeadCache)> {
    let ro = readout(&mv, fixed, params)?;
    let gs = match &ro.gs {
        Some(gs) => *gs,
        None => GramSchmidt::new(ro.rows[0], ro.rows[1])?,
    };
    let rotation = gs.matrix().transpose();
    let pose = RigidTransform::new_unchecked(rotation, ro.chat - rotation * mv.origin);
    let raw = ro.raw();
    Ok((
        HeadOutput { raw, pose },
        HeadCache {
            cc: mv.cc,
            row_sums: mv.row_sums.to_vec(),
            origin: mv.origin,
            f_fixed: fixed.equivariant.values.clone(),
            ro,
            gs,
            rotation,
        },
    ))
}

/// Gradients of the head inputs.
struct HeadGrads {
    cc: Vec<Vec3>,
    row_sums: Vec<f64>,
    f_fixed: Vec<Vec3>,
    g_fixed: Vec<Vec3>,
    g_moving: Vec<Vec3>,
}

fn head_backward(
    cache: &HeadCache,
    params: &ProjectorParams,
    grads: &mut ProjectorParams,
    g_t: &Vec3,
    g_r: &Mat3,
) -> HeadGrads {
    let ro = &cache.ro;
    let f = cache.cc.len();
    let (p, hn) = (params.config.gram, params.config.hidden);
    let m = cache.origin;
    let rm = cache.rotation * m;
    // t = ĉ − R m, ĉ = Σ β F + κ R m
    let g_chat = *g_t;
    let g_rot = g_r + g_t * m.transpose() * (ro.kappa - 1.0);
    let g_kappa = g_chat.dot(&rm);
    let (ga0, ga1) = cache.gs.backward(&g_rot.transpose());

    let mut g_h = vec![0.0; hn];
    let mut add_gate = |g: f64, gate: &Tensor, ggate: &mut Tensor, r: usize| {
        let (w, gw) = (&gate.data[r * hn..(r + 1) * hn], &mut ggate.data[r * hn..(r + 1) * hn]);
        for j in 0..hn {
            gw[j] += g * ro.h[j];
            g_h[j] += g * w[j];
        }
    };
    grads.k0.data[0] += g_kappa;
    add_gate(g_kappa, &params.kg, &mut grads.kg, 0);

    // a1 = u × a0
    let mut g_up = ro.rows[0].cross(&ga1);
    let g_a0 = ga0 + ga1.cross(&ro.up);
    // a0 = q0 e + q1 e2
    for (k, v) in [ro.e, ro.e2].iter().enumerate() {
        let g = g_a0.dot(v);
        grads.q0.data[k] += g;
        add_gate(g, &params.qg, &mut grads.qg, k);
    }
    let g_e2 = g_a0 * ro.q[1];
    let mut g_e = g_a0 * ro.q[0];
    // e2 = û × e
    let mut g_uhat = ro.e.cross(&g_e2);
    g_e += g_e2.cross(&ro.up_hat);
    // e = sign · v_axis, eigenvector of P A P
    let g_v = g_e * ro.sign;
    let v1 = ro.eig_vectors[ro.axis];
    let mut g_perp = Mat3::zeros();
    for j in 0..3 {
        let gap = ro.eig_values[ro.axis] - ro.eig_values[j];
        if j != ro.axis && gap.abs() > TINY {
            g_perp += ro.eig_vectors[j] * v1.transpose() * (ro.eig_vectors[j].dot(&g_v) / gap);
        }
    }
    let (pm, a) = (&ro.proj, &ro.tensor);
    let g_tensor = pm * g_perp * pm;
    let g_proj = g_perp * pm * a + a * pm * g_perp;
    g_uhat -= (g_proj + g_proj.transpose()) * ro.up_hat;
    let norm = ro.up.norm();
    if norm > TINY {
        g_up += (g_uhat - ro.up_hat * ro.up_hat.dot(&g_uhat)) / norm;
    }

    let mut g_cc = vec![Vec3::zeros(); f];
    let mut g_s = vec![0.0; f];
    let g_sym = g_tensor + g_tensor.transpose();
    for c in 0..f {
        let cc = cache.cc[c];
        // up = Σ α_c (Cc_c + s_c m)
        let g_alpha = g_up.dot(&(cc + m * cache.row_sums[c]));
        g_cc[c] += g_up * ro.alpha[c];
        g_s[c] += ro.alpha[c] * g_up.dot(&m);
        grads.r0.data[c] += g_alpha;
        add_gate(g_alpha, &params.rg, &mut grads.rg, c);
        // A = Σ_cov + Σ λ_c Cc_c Cc_cᵀ
        grads.lam.data[c] += cc.dot(&(g_tensor * cc));
        g_cc[c] += g_sym * cc * params.lam.data[c];
    }
    let mut g_ff = vec![Vec3::zeros(); f];
    for c in 0..f {
        let g_beta = g_chat.dot(&cache.f_fixed[c]);
        g_ff[c] = g_chat * ro.beta[c];
        grads.t0.data[c] += g_beta;
        add_gate(g_beta, &params.tg, &mut grads.tg, c);
    }

    let cols = ro.u.len();
    let mut g_u = vec![0.0; cols];
    for j in 0..hn {
        let g_pre = g_h[j] * (1.0 - ro.h[j] * ro.h[j]);
        grads.b1.data[j] += g_pre;
        let row = &params.w1.data[j * cols..(j + 1) * cols];
        let grow = &mut grads.w1.data[j * cols..(j + 1) * cols];
        for i in 0..cols {
            grow[i] += g_pre * ro.u[i];
            g_u[i] += g_pre * row[i];
        }
    }

    let mut g_z = vec![Vec3::zeros(); p];
    let mut idx = 0;
    for a in 0..p {
        for b in a..p {
            let g = g_u[idx];
            idx += 1;
            g_z[a] += ro.z[b] * g;
            g_z[b] += ro.z[a] * g;
        }
    }
    for a in 0..p {
        for c in 0..f {
            grads.p_z.data[a * f + c] += g_z[a].dot(&cache.cc[c]);
            g_cc[c] += g_z[a] * params.p_z.at(a, c);
        }
    }
    let to_vecs = |s: &[f64]| s.chunks(3).map(Vec3::from_column_slice).collect::<Vec<_>>();
    let np = pair_count(p);
    HeadGrads {
        cc: g_cc,
        row_sums: g_s,
        f_fixed: g_ff,
        g_fixed: to_vecs(&g_u[np..np + 3 * f]),
        g_moving: to_vecs(&g_u[np + 3 * f..]),
    }
}

/// Predicts the moving-part pose from a correlation and both encodings.
///
/// Returns the raw head vector `(ĉ, a_0, a_1)`; [`decode_head`] turns it into
/// a pose.
pub fn project_pose(
    correlation: &CorrelationFeature,
    fixed: &EncoderOutput,
    moving: &EncoderOutput,
    params: &ProjectorParams,
) -> Result<PoseVector9> {
    let mv = MovingView {
        cc: correlation.centered(),
        row_sums: &correlation.row_sums,
        origin: correlation.origin,
        second: &moving.second_moment,
        third: &moving.third_moment,
        g_moving: &moving.invariant,
    };
    readout(&mv, fixed, params).map(|r| r.raw())
}

/// Complete configuration of a pose model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

impl ModelConfig {
    pub fn desk(channels: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(channels),
            projector: ProjectorConfig::default(),
        }
    }
}

/// Shared encoder, mixer and projector.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel {
    pub encoder: EncoderParams,
    pub mixer: MixerParams,
    pub projector: ProjectorParams,
}

/// Forward values kept for the backward pass.
pub struct ForwardCache {
    fixed: EncodeCache,
    moving: EncodeCache,
    fixed_out: EncoderOutput,
    moving_centered: Vec<Vec3>,
    mix: Tensor,
    head: HeadCache,
    pub output: HeadOutput,
}

impl ForwardCache {
    /// Combined branch signature of both encoder passes and the head's
    /// axis and sign choice.
    pub fn signature(&self) -> u64 {
        let ro = &self.head.ro;
        let head = (ro.axis as u64 + 1) * if ro.sign > 0.0 { 0x9E37_79B9 } else { 0x85EB_CA6B };
        self.fixed.signature ^ self.moving.signature.rotate_left(17) ^ head.rotate_left(41)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.head.rotation
    }
}

impl PoseModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let encoder = EncoderParams::init(config.encoder.clone(), &mut rng)?;
        let f = config.encoder.channels;
        let mixer = MixerParams::init(f, &mut rng);
        let projector = ProjectorParams::init(config.projector, f, &mut rng);
        Ok(Self {
            encoder,
            mixer,
            projector,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.config.clone(),
            projector: self.projector.config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        let p = &self.projector;
        Self {
            encoder: self.encoder.zeros_like(),
            mixer: MixerParams {
                w_m: z(&self.mixer.w_m),
                b: z(&self.mixer.b),
            },
            projector: ProjectorParams {
                config: p.config,
                p_z: z(&p.p_z),
                w1: z(&p.w1),
                b1: z(&p.b1),
                r0: z(&p.r0),
                rg: z(&p.rg),
                lam: z(&p.lam),
                q0: z(&p.q0),
                qg: z(&p.qg),
                t0: z(&p.t0),
                tg: z(&p.tg),
                k0: z(&p.k0),
                kg: z(&p.kg),
            },
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors();
        out.push(("mixer.w_m".into(), &self.mixer.w_m));
        out.push(("mixer.b".into(), &self.mixer.b));
        let p = &self.projector;
        for (name, t) in [
            ("p_z", &p.p_z),
            ("w1", &p.w1),
            ("b1", &p.b1),
            ("r0", &p.r0),
            ("rg", &p.rg),
            ("lam", &p.lam),
            ("q0", &p.q0),
            ("qg", &p.qg),
            ("t0", &p.t0),
            ("tg", &p.tg),
            ("k0", &p.k0),
            ("kg", &p.kg),
        ] {
            out.push((format!("projector.{name}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.mixer.w_m);
        out.push(&mut self.mixer.b);
        let p = &mut self.projector;
        out.extend([
            &mut p.p_z, &mut p.w1, &mut p.b1, &mut p.r0, &mut p.rg, &mut p.lam, &mut p.q0, &mut p.qg, &mut p.t0, &mut p.tg,
            &mut p.k0, &mut p.kg,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Full forward pass on a (fixed, moving) pair.
    pub fn forward(&self, fixed: &PreparedCloud, moving: &PreparedCloud) -> Result<ForwardCache> {
        let (fixed_out, fixed_cache) = encode_with_cache(fixed, &self.encoder)?;
        let (moving_out, moving_cache) = encode_with_cache(moving, &self.encoder)?;
        let mix = mixing_matrix(&fixed_out.invariant, &self.mixer)?;
        let moving_centered = moving_out.centered();
        let f = mix.rows();
        let row_sums: Vec<f64> = (0..f).map(|c| mix.data[c * f..(c + 1) * f].iter().sum()).collect();
        let mv = MovingView {
            cc: apply_matrix(&mix, &moving_centered),
            row_sums: &row_sums,
            origin: moving_out.centroid,
            second: &moving_out.second_moment,
            third: &moving_out.third_moment,
            g_moving: &moving_out.invariant,
        };
        let (output, head) = head_forward(mv, &fixed_out, &self.projector)?;
        Ok(ForwardCache {
            fixed: fixed_cache,
            moving: moving_cache,
            fixed_out,
            moving_centered,
            mix,
            head,
            output,
        })
    }

    pub fn predict(&self, fixed: &PreparedCloud, moving: &PreparedCloud) -> Result<HeadOutput> {
        self.forward(fixed, moving).map(|c| c.output)
    }

    /// Accumulates parameter gradients for upstream gradients on the
    /// predicted translation and rotation matrix.
    pub fn backward(
        &self,
        fixed: &PreparedCloud,
        moving: &PreparedCloud,
        cache: &ForwardCache,
        g_t: &Vec3,
        g_r: &Mat3,
        grads: &mut PoseModel,
    ) {
        let hg = head_backward(&cache.head, &self.projector, &mut grads.projector, g_t, g_r);
        let f = hg.cc.len();
        // Cc = M · F̃_moving, s = M · 1
        let mut g_mix = vec![0.0; f * f];
        let mut g_fm = vec![Vec3::zeros(); f];
        for c in 0..f {
            for d in 0..f {
                g_mix[c * f + d] = hg.cc[c].dot(&cache.moving_centered[d]) + hg.row_sums[c];
                g_fm[d] += hg.cc[c] * cache.mix.data[c * f + d];
            }
        }
        // M = W_M + G B Gᵀ, entry (c, d) = G_cᵀ B G_d
        let g = &cache.fixed_out.invariant.values;
        let b = Mat3::from_row_slice(&self.mixer.b.data);
        let bg: Vec<Vec3> = g.iter().map(|x| b * x).collect();
        let btg: Vec<Vec3> = g.iter().map(|x| b.transpose() * x).collect();
        let mut g_g = hg.g_fixed;
        let mut g_b = Mat3::zeros();
        for c in 0..f {
            let mut left = Vec3::zeros();
            let mut weighted = Vec3::zeros();
            for d in 0..f {
                let gm = g_mix[c * f + d];
                grads.mixer.w_m.data[c * f + d] += gm;
                left += bg[d] * gm;
                weighted += g[d] * gm;
                g_g[d] += btg[c] * gm;
            }
            g_g[c] += left;
            g_b += g[c] * weighted.transpose();
        }
        for r in 0..3 {
            for s in 0..3 {
                grads.mixer.b.data[r * 3 + s] += g_b[(r, s)];
            }
        }
        encode_backward(fixed, &self.encoder, &cache.fixed, &hg.f_fixed, &g_g, &mut grads.encoder);
        encode_backward(moving, &self.encoder, &cache.moving, &g_fm, &hg.g_moving, &mut grads.encoder);
    }
}
