//! Vector Neuron DGCNN encoder with an equivariant and an invariant branch.
//!
//! Forward: subtract the centroid, build a k-NN graph, run VN edge
//! convolutions over edge features `[v_j − v_i, v_i]`, concatenate the block
//! outputs and mean-pool over points.
//!
//! * equivariant branch: `F = W_F · mean_i(Y_i) + centroid` per channel;
//! * invariant branch: per point, a 3-vector frame `T_i = W_T · Y_i` is
//!   dotted with every channel of `Y_i`; the resulting rotation-invariant
//!   scalars are mean-pooled and mixed by `W_G` into `f × 3` values.
//!
//! Edge features are never materialized: `W·[v_j − v_i; v_i]` is computed as
//! `W_a·v_j + (W_b − W_a)·v_i`, with per-point products shared by all edges.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, knn_graph, PointCloud, Vec3};

use super::tensor::Tensor;
use super::vn::{vn_relu_vec, vn_relu_vec_backward, FeatureKind, VnFeature, VN_ZERO_DIRECTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output channels `f` of both branches.
    pub channels: usize,
    /// Output channels of each edge-convolution block.
    pub hidden: Vec<usize>,
    /// Neighbours per point in the k-NN graph.
    pub k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 1024,
            hidden: vec![64, 64, 128],
            k: 20,
        }
    }
}

impl EncoderConfig {
    /// Small configuration used for tests and CPU training.
    pub fn desk(channels: usize) -> Self {
        Self {
            channels,
            hidden: vec![16, 32],
            k: 16,
        }
    }

    pub fn concat_channels(&self) -> usize {
        self.hidden.iter().sum()
    }
}

/// Channel-mixing weights of one edge-convolution block, both `[c_out, 2·c_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConv {
    pub w: Tensor,
    pub u: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub blocks: Vec<EdgeConv>,
    /// `[f, c_y]` equivariant readout.
    pub w_f: Tensor,
    /// `[3, c_y]` per-point invariant frame.
    pub w_t: Tensor,
    /// `[f, c_y]` invariant readout.
    pub w_g: Tensor,
}

impl EncoderParams {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.channels == 0 || config.hidden.is_empty() || config.hidden.contains(&0) || config.k == 0 {
            return Err(Error::InvalidArgument(format!("bad encoder config {config:?}")));
        }
        let mut blocks = Vec::new();
        let mut cin = 1;
        for &cout in &config.hidden {
            blocks.push(EdgeConv {
                w: Tensor::uniform(&[cout, 2 * cin], 2 * cin, rng),
                u: Tensor::uniform(&[cout, 2 * cin], 2 * cin, rng),
            });
            cin = cout;
        }
        let cy = config.concat_channels();
        let f = config.channels;
        Ok(Self {
            w_f: Tensor::uniform(&[f, cy], cy, rng),
            w_t: Tensor::uniform(&[3, cy], cy, rng),
            w_g: Tensor::uniform(&[f, cy], cy, rng),
            blocks,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        Self {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| EdgeConv { w: z(&b.w), u: z(&b.u) })
                .collect(),
            w_f: z(&self.w_f),
            w_t: z(&self.w_t),
            w_g: z(&self.w_g),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("encoder.block{i}.w"), &b.w));
            out.push((format!("encoder.block{i}.u"), &b.u));
        }
        out.push(("encoder.w_f".into(), &self.w_f));
        out.push(("encoder.w_t".into(), &self.w_t));
        out.push(("encoder.w_g".into(), &self.w_g));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.w);
            out.push(&mut b.u);
        }
        out.push(&mut self.w_f);
        out.push(&mut self.w_t);
        out.push(&mut self.w_g);
        out
    }
}

/// A cloud with its neighbour graph, ready for repeated encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    pub points: Vec<Vec3>,
    /// Flattened `[n, k]` neighbour indices.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, k: usize) -> Result<Self> {
        let graph = knn_graph(cloud.points(), k)?;
        Ok(Self {
            points: cloud.points().to_vec(),
            neighbors: graph.into_iter().flatten().collect(),
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Both branches plus the input centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `F`: transforms as `R·F + t` under `P ↦ RP + t`.
    pub equivariant: VnFeature,
    /// `G`: unchanged under rigid motions of the input.
    pub invariant: VnFeature,
    pub centroid: Vec3,
    /// Covariance of the centered input points.
    pub second_moment: Matrix3<f64>,
    /// Third central moment, `third_moment[a][(b, c)] = mean(x_a x_b x_c)`.
    pub third_moment: [Matrix3<f64>; 3],
}

impl EncoderOutput {
    /// `F` with the centroid removed from every channel.
    pub fn centered(&self) -> Vec<Vec3> {
        self.equivariant.values.iter().map(|v| v - self.centroid).collect()
    }
}

struct BlockCache {
    cin: usize,
    cout: usize,
    input: Vec<Vec3>,
    a: Vec<Vec3>,
    b: Vec<Vec3>,
    ad: Vec<Vec3>,
    bd: Vec<Vec3>,
}

/// Intermediate values kept for the backward pass.
pub struct EncodeCache {
    n: usize,
    blocks: Vec<BlockCache>,
    y: Vec<Vec3>,
    ybar: Vec<Vec3>,
    frames: Vec<Vec3>,
    ibar: Vec<Vec3>,
    /// Hash of every VN-ReLU branch decision.
    pub signature: u64,
}

/// `out[i, c] = Σ_d w[c, col0 + d] · v[i, d]`, optionally minus a second slice.
fn mix_points(v: &[Vec3], n: usize, cin: usize, w: &Tensor, col0: usize, minus: Option<usize>) -> Vec<Vec3> {
    let cout = w.rows();
    let cols = w.cols();
    let mut out = vec![Vec3::zeros(); n * cout];
    for c in 0..cout {
        let row = &w.data[c * cols..(c + 1) * cols];
        for d in 0..cin {
            let mut wt = row[col0 + d];
            if let Some(m) = minus {
                wt -= row[m + d];
            }
            if wt == 0.0 {
                continue;
            }
            for i in 0..n {
                out[i * cout + c] += v[i * cin + d] * wt;
            }
        }
    }
    out
}

const FNV_PRIME: u64 = 0x0100_0000_01B3;

fn edge_conv_forward(
    input: Vec<Vec3>,
    cin: usize,
    params: &EdgeConv,
    cloud: &PreparedCloud,
    signature: &mut u64,
) -> (Vec<Vec3>, BlockCache) {
    let n = cloud.len();
    let k = cloud.k;
    let cout = params.w.rows();
    // H_ij = W_a v_j + (W_b − W_a) v_i, likewise for directions
    let a = mix_points(&input, n, cin, &params.w, 0, None);
    let b = mix_points(&input, n, cin, &params.w, cin, Some(0));
    let ad = mix_points(&input, n, cin, &params.u, 0, None);
    let bd = mix_points(&input, n, cin, &params.u, cin, Some(0));
    let inv_k = 1.0 / k as f64;
    let mut out = vec![Vec3::zeros(); n * cout];
    let mut sig = *signature;
    for i in 0..n {
        for &j in &cloud.neighbors[i * k..(i + 1) * k] {
            for c in 0..cout {
                let h = a[j * cout + c] + b[i * cout + c];
                let d = ad[j * cout + c] + bd[i * cout + c];
                let active = h.dot(&d) >= 0.0 || d.norm_squared() < VN_ZERO_DIRECTION;
                sig = (sig ^ u64::from(active)).wrapping_mul(FNV_PRIME);
                out[i * cout + c] += vn_relu_vec(&h, &d) * inv_k;
            }
        }
    }
    *signature = sig;
    (
        out,
        BlockCache {
            cin,
            cout,
            input,
            a,
            b,
            ad,
            bd,
        },
    )
}

/// Accumulates parameter gradients and returns the gradient on the block input.
fn edge_conv_backward(
    cache: &BlockCache,
    params: &EdgeConv,
    grads: &mut EdgeConv,
    g_out: &[Vec3],
    cloud: &PreparedCloud,
    need_input_grad: bool,
) -> Vec<Vec3> {
    let n = cloud.len();
    let k = cloud.k;
    let (cin, cout) = (cache.cin, cache.cout);
    let inv_k = 1.0 / k as f64;
    let mut g_a = vec![Vec3::zeros(); n * cout];
    let mut g_b = vec![Vec3::zeros(); n * cout];
    let mut g_ad = vec![Vec3::zeros(); n * cout];
    let mut g_bd = vec![Vec3::zeros(); n * cout];
    for i in 0..n {
        for &j in &cloud.neighbors[i * k..(i + 1) * k] {
            for c in 0..cout {
                let h = cache.a[j * cout + c] + cache.b[i * cout + c];
                let d = cache.ad[j * cout + c] + cache.bd[i * cout + c];
                let g = g_out[i * cout + c] * inv_k;
                let (gh, gd) = vn_relu_vec_backward(&h, &d, &g);
                g_a[j * cout + c] += gh;
                g_b[i * cout + c] += gh;
                g_ad[j * cout + c] += gd;
                g_bd[i * cout + c] += gd;
            }
        }
    }
    let v = &cache.input;
    let mut g_in = if need_input_grad {
        vec![Vec3::zeros(); n * cin]
    } else {
        Vec::new()
    };
    for (w, gw, ga, gb) in [
        (&params.w, &mut grads.w, &g_a, &g_b),
        (&params.u, &mut grads.u, &g_ad, &g_bd),
    ] {
        let cols = 2 * cin;
        for c in 0..cout {
            for d in 0..cin {
                let mut sa = 0.0;
                let mut sb = 0.0;
                for i in 0..n {
                    let vi = &v[i * cin + d];
                    sa += ga[i * cout + c].dot(vi);
                    sb += gb[i * cout + c].dot(vi);
                }
                gw.data[c * cols + d] += sa - sb;
                gw.data[c * cols + cin + d] += sb;
                if need_input_grad {
                    let wa = w.data[c * cols + d];
                    let wba = w.data[c * cols + cin + d] - wa;
                    for i in 0..n {
                        g_in[i * cin + d] += ga[i * cout + c] * wa + gb[i * cout + c] * wba;
                    }
                }
            }
        }
    }
    g_in
}

fn moments(centered: &[Vec3]) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let inv_n = 1.0 / centered.len().max(1) as f64;
    let mut second = Matrix3::zeros();
    let mut third = [Matrix3::zeros(); 3];
    for x in centered {
        let xx = x * x.transpose();
        second += xx;
        for (a, t) in third.iter_mut().enumerate() {
            *t += xx * x[a];
        }
    }
    (second * inv_n, third.map(|t| t * inv_n))
}

/// Runs the encoder and keeps what the backward pass needs.
pub fn encode_with_cache(cloud: &PreparedCloud, params: &EncoderParams) -> Result<(EncoderOutput, EncodeCache)> {
    let n = cloud.len();
    if n < cloud.k + 1 || cloud.k != params.config.k {
        return Err(Error::TooFewPoints {
            points: n,
            needed: params.config.k + 1,
        });
    }
    let c = centroid(&cloud.points);
    let mut v: Vec<Vec3> = cloud.points.iter().map(|p| p - c).collect();
    let (second_moment, third_moment) = moments(&v);
    let mut cin = 1;
    let mut signature = 0xCBF2_9CE4_8422_2325u64;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut outputs = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (out, cache) = edge_conv_forward(v, cin, block, cloud, &mut signature);
        cin = cache.cout;
        v = out.clone();
        outputs.push(out);
        blocks.push(cache);
    }
    let cy = params.config.concat_channels();
    let mut y = vec![Vec3::zeros(); n * cy];
    let mut off = 0;
    for (out, cache) in outputs.iter().zip(&blocks) {
        for i in 0..n {
            y[i * cy + off..i * cy + off + cache.cout].copy_from_slice(&out[i * cache.cout..(i + 1) * cache.cout]);
        }
        off += cache.cout;
    }
    let inv_n = 1.0 / n as f64;
    let mut ybar = vec![Vec3::zeros(); cy];
    for i in 0..n {
        for d in 0..cy {
            ybar[d] += y[i * cy + d];
        }
    }
    ybar.iter_mut().for_each(|v| *v *= inv_n);

    let f = params.config.channels;
    let equivariant: Vec<Vec3> = (0..f)
        .map(|ch| (0..cy).fold(Vec3::zeros(), |acc, d| acc + ybar[d] * params.w_f.at(ch, d)) + c)
        .collect();

    let mut frames = vec![Vec3::zeros(); n * 3];
    let mut ibar = vec![Vec3::zeros(); cy];
    for i in 0..n {
        let yi = &y[i * cy..(i + 1) * cy];
        let mut t = [Vec3::zeros(); 3];
        for (kk, tk) in t.iter_mut().enumerate() {
            *tk = (0..cy).fold(Vec3::zeros(), |acc, d| acc + yi[d] * params.w_t.at(kk, d));
        }
        for d in 0..cy {
            ibar[d] += Vec3::new(yi[d].dot(&t[0]), yi[d].dot(&t[1]), yi[d].dot(&t[2]));
        }
        frames[i * 3..i * 3 + 3].copy_from_slice(&t);
    }
    ibar.iter_mut().for_each(|v| *v *= inv_n);
    let invariant: Vec<Vec3> = (0..f)
        .map(|ch| (0..cy).fold(Vec3::zeros(), |acc, d| acc + ibar[d] * params.w_g.at(ch, d)))
        .collect();

    Ok((
        EncoderOutput {
            equivariant: VnFeature::new(equivariant, FeatureKind::Equivariant),
            invariant: VnFeature::new(invariant, FeatureKind::Invariant),
            centroid: c,
            second_moment,
            third_moment,
        },
        EncodeCache {
            n,
            blocks,
            y,
            ybar,
            frames,
            ibar,
            signature,
        },
    ))
}

/// Encodes a prepared cloud.
pub fn encode_prepared(cloud: &PreparedCloud, params: &EncoderParams) -> Result<EncoderOutput> {
    encode_with_cache(cloud, params).map(|(o, _)| o)
}

/// Builds the k-NN graph and encodes the cloud.
pub fn encode(cloud: &PointCloud, params: &EncoderParams) -> Result<EncoderOutput> {
    let prepared = PreparedCloud::new(cloud, params.config.k)?;
    encode_prepared(&prepared, params)
}

/// Backpropagates gradients on `F` and `G` into `grads`.
pub fn encode_backward(
    cloud: &PreparedCloud,
    params: &EncoderParams,
    cache: &EncodeCache,
    g_equivariant: &[Vec3],
    g_invariant: &[Vec3],
    grads: &mut EncoderParams,
) {
    let n = cache.n;
    let cy = params.config.concat_channels();
    let f = params.config.channels;
    let inv_n = 1.0 / n as f64;

    let mut g_ybar = vec![Vec3::zeros(); cy];
    let mut g_ibar = vec![Vec3::zeros(); cy];
    for ch in 0..f {
        let gf = &g_equivariant[ch];
        let gg = &g_invariant[ch];
        for d in 0..cy {
            grads.w_f.data[ch * cy + d] += gf.dot(&cache.ybar[d]);
            grads.w_g.data[ch * cy + d] += gg.dot(&cache.ibar[d]);
            g_ybar[d] += gf * params.w_f.at(ch, d);
            g_ibar[d] += gg * params.w_g.at(ch, d);
        }
    }

    let mut g_y = vec![Vec3::zeros(); n * cy];
    for i in 0..n {
        let yi = &cache.y[i * cy..(i + 1) * cy];
        let t = &cache.frames[i * 3..i * 3 + 3];
        let mut g_t = [Vec3::zeros(); 3];
        for d in 0..cy {
            let gi = g_ibar[d] * inv_n;
            g_y[i * cy + d] = g_ybar[d] * inv_n + t[0] * gi.x + t[1] * gi.y + t[2] * gi.z;
            g_t[0] += yi[d] * gi.x;
            g_t[1] += yi[d] * gi.y;
            g_t[2] += yi[d] * gi.z;
        }
        for (kk, gtk) in g_t.iter().enumerate() {
            for d in 0..cy {
                grads.w_t.data[kk * cy + d] += gtk.dot(&yi[d]);
                g_y[i * cy + d] += gtk * params.w_t.at(kk, d);
            }
        }
    }

    // split the concatenated gradient back into block outputs
    let mut offsets = Vec::with_capacity(cache.blocks.len());
    let mut off = 0;
    for b in &cache.blocks {
        offsets.push(off);
        off += b.cout;
    }
    let mut carry: Option<Vec<Vec3>> = None;
    for l in (0..cache.blocks.len()).rev() {
        let b = &cache.blocks[l];
        let mut g_out = vec![Vec3::zeros(); n * b.cout];
        for i in 0..n {
            for c in 0..b.cout {
                g_out[i * b.cout + c] = g_y[i * cy + offsets[l] + c];
            }
        }
        if let Some(prev) = carry.take() {
            for (g, p) in g_out.iter_mut().zip(prev) {
                *g += p;
            }
        }
        let g_in = edge_conv_backward(b, &params.blocks[l], &mut grads.blocks[l], &g_out, cloud, l > 0);
        if l > 0 {
            carry = Some(g_in);
        }
    }
}
