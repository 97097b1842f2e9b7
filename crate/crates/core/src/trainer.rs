//! Geometry warm-up: supervised training of the encoder and pose projector
//! with an L1 translation loss and a geodesic rotation loss.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, PoseModel, PreparedCloud};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Mat3, PointCloud, RigidTransform, Vec3};
use crate::planner::AssemblyStep;
use crate::rng::{derive_seed, rng_from_seed};

/// Cosine clamp used inside the geodesic loss.
pub const GEODESIC_CLAMP: f64 = 1e-7;

/// `Σ |pred_i − target_i|`.
pub fn loss_translation(pred: &Vec3, target: &Vec3) -> f64 {
    (pred - target).abs().sum()
}

fn loss_translation_grad(pred: &Vec3, target: &Vec3) -> Vec3 {
    (pred - target).map(|d| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
}

fn geodesic_cos(r_pred: &Mat3, r_target: &Mat3) -> f64 {
    ((r_pred.transpose() * r_target).trace() - 1.0) / 2.0
}

/// `arccos((tr(R_predᵀ R_target) − 1) / 2)` with the argument clamped to
/// `[−1 + 1e-7, 1 − 1e-7]`.
pub fn loss_geodesic(r_pred: &Mat3, r_target: &Mat3) -> f64 {
    geodesic_cos(r_pred, r_target)
        .clamp(-1.0 + GEODESIC_CLAMP, 1.0 - GEODESIC_CLAMP)
        .acos()
}

/// Gradient of [`loss_geodesic`] with respect to `r_pred`; zero where the
/// clamp is active.
fn loss_geodesic_grad(r_pred: &Mat3, r_target: &Mat3) -> Mat3 {
    let x = geodesic_cos(r_pred, r_target);
    if x <= -1.0 + GEODESIC_CLAMP || x >= 1.0 - GEODESIC_CLAMP {
        return Mat3::zeros();
    }
    r_target * (-0.5 / (1.0 - x * x).sqrt())
}

/// A training example with cached neighbour graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub step_id: String,
    pub category: String,
    pub fixed: PreparedCloud,
    pub moving: PreparedCloud,
    /// Full-resolution moving cloud, used for SCD.
    pub moving_cloud: PointCloud,
    pub target: RigidTransform,
}

impl TrainSample {
    /// Prepares a step; `encoder_points` optionally downsamples both clouds
    /// by farthest point sampling before the graphs are built.
    pub fn from_step(
        step_id: impl Into<String>,
        category: impl Into<String>,
        step: &AssemblyStep,
        k: usize,
        encoder_points: Option<usize>,
    ) -> Result<Self> {
        let reduce = |c: &PointCloud| -> Result<PointCloud> {
            match encoder_points {
                Some(n) if n < c.len() => farthest_point_sample(c, n),
                _ => Ok(c.clone()),
            }
        };
        Ok(Self {
            step_id: step_id.into(),
            category: category.into(),
            fixed: PreparedCloud::new(&reduce(&step.fixed_cloud)?, k)?,
            moving: PreparedCloud::new(&reduce(&step.moving_cloud)?, k)?,
            moving_cloud: step.moving_cloud.clone(),
            target: step.target_pose,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_trans: f64,
    pub w_rot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_trans: 1.0,
            w_rot: 1.0,
        }
    }
}

/// Halve the learning rate when the monitored loss stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    /// Evaluations without relative improvement before halving.
    pub patience: usize,
    /// Minimum relative improvement that resets the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self {
            patience: 5,
            threshold: 1e-3,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rotation bound the training data was generated with; recorded only.
    pub rotation_limit_degrees: Option<f64>,
    pub loss: LossWeights,
    /// Evaluate, checkpoint and adjust the schedule every this many optimizer
    /// steps; `None` means once per epoch.
    pub eval_every: Option<usize>,
    pub plateau: Option<PlateauSchedule>,
    /// Rescale the averaged gradient to at most this norm.
    pub grad_clip: Option<f64>,
    /// Farthest-point subsample applied to the encoder inputs.
    pub encoder_points: Option<usize>,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(64),
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            rotation_limit_degrees: None,
            loss: LossWeights::default(),
            eval_every: None,
            plateau: None,
            grad_clip: None,
            encoder_points: None,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.loss.w_trans >= 0.0 && self.loss.w_rot >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_trans: f64,
    pub loss_rot: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

impl TrainRecord {
    /// Equality ignoring the wall-clock field.
    pub fn same_values(&self, other: &TrainRecord) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub trans: f64,
    pub rot: f64,
}

/// Loss of one sample, and its parameter gradient when `grads` is given.
pub fn sample_loss(
    model: &PoseModel,
    sample: &TrainSample,
    weights: &LossWeights,
    grads: Option<&mut PoseModel>,
) -> Result<(LossParts, u64)> {
    let cache = model.forward(&sample.fixed, &sample.moving)?;
    let pose = &cache.output.pose;
    let (t_pred, r_pred) = (pose.translation(), pose.rotation());
    let (t_gt, r_gt) = (sample.target.translation(), sample.target.rotation());
    let trans = loss_translation(t_pred, t_gt);
    let rot = loss_geodesic(r_pred, r_gt);
    let parts = LossParts {
        total: weights.w_trans * trans + weights.w_rot * rot,
        trans,
        rot,
    };
    // fold the translation-residual signs into the branch signature
    let mut signature = cache.signature();
    for d in (t_pred - t_gt).iter() {
        signature = (signature ^ u64::from(*d > 0.0)).wrapping_mul(0x0100_0000_01B3);
    }
    if let Some(grads) = grads {
        let g_t = loss_translation_grad(t_pred, t_gt) * weights.w_trans;
        let g_r = loss_geodesic_grad(r_pred, r_gt) * weights.w_rot;
        model.backward(&sample.fixed, &sample.moving, &cache, &g_t, &g_r, grads);
    }
    Ok((parts, signature))
}

/// Predicted pose for one sample.
pub fn predict(model: &PoseModel, sample: &TrainSample) -> Result<RigidTransform> {
    Ok(model.predict(&sample.fixed, &sample.moving)?.pose)
}

/// Mean loss over a set of samples; failed forward passes count as the
/// maximal rotation loss.
pub fn mean_loss(model: &PoseModel, samples: &[TrainSample], weights: &LossWeights) -> Result<LossParts> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let parts: Vec<LossParts> = samples
        .par_iter()
        .map(|s| {
            sample_loss(model, s, weights, None)
                .map(|(p, _)| p)
                .unwrap_or(LossParts {
                    total: weights.w_rot * std::f64::consts::PI,
                    trans: 0.0,
                    rot: std::f64::consts::PI,
                })
        })
        .collect();
    let n = parts.len() as f64;
    let mut acc = LossParts::default();
    for p in &parts {
        acc.total += p.total / n;
        acc.trans += p.trans / n;
        acc.rot += p.rot / n;
    }
    Ok(acc)
}

fn flat_grad(model: &PoseModel) -> Vec<f64> {
    model.tensors().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest monitored loss.
    pub best: PoseModel,
    /// Parameters after the last step.
    pub last: PoseModel,
    pub best_loss: f64,
    pub records: Vec<TrainRecord>,
}

/// Trains from a freshly initialized model.
pub fn train_warmup(train: &[TrainSample], validation: &[TrainSample], config: &WarmupConfig) -> Result<TrainOutcome> {
    let model = PoseModel::init(&config.model, derive_seed(config.seed, 0x1417))?;
    train_from(model, train, validation, config)
}

/// Minibatch SGD with momentum from the given parameters.
///
/// Batches are drawn from a per-epoch shuffle seeded by `config.seed`;
/// per-sample gradients are computed in parallel and summed in batch order,
/// so results do not depend on the thread count. Every `eval_every` steps the
/// validation loss (training loss without a validation set) is measured, the
/// best parameters are kept and the plateau schedule is applied.
pub fn train_from(
    mut model: PoseModel,
    train: &[TrainSample],
    validation: &[TrainSample],
    config: &WarmupConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if model.config() != config.model {
        return Err(Error::ShapeMismatch("model does not match the configured architecture".into()));
    }
    let monitor = if validation.is_empty() { train } else { validation };
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let eval_every = config.eval_every.unwrap_or(batches_per_epoch);
    let started = Instant::now();
    let mut velocity = model.zeros_like();
    let mut lr = config.learning_rate;
    let mut records = Vec::new();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut plateau_best = f64::INFINITY;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(config.seed, epoch as u64)));
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(LossParts, PoseModel)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = model.zeros_like();
                    sample_loss(&model, &train[i], &config.loss, Some(&mut g)).map(|(p, _)| (p, g))
                })
                .collect();
            let mut grad = model.zeros_like();
            let mut loss = LossParts::default();
            let mut used = 0usize;
            for (r, &i) in results.into_iter().zip(batch) {
                match r {
                    Ok((p, g)) => {
                        loss.total += p.total;
                        loss.trans += p.trans;
                        loss.rot += p.rot;
                        for (a, b) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                            a.add_assign(b.1);
                        }
                        used += 1;
                    }
                    Err(Error::DegenerateRotation) => {
                        warn!("degenerate rotation output on {}, sample skipped", train[i].step_id);
                    }
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                return Err(Error::NanLoss { batch: step });
            }
            let inv = 1.0 / used as f64;
            loss.total *= inv;
            loss.trans *= inv;
            loss.rot *= inv;
            if !loss.total.is_finite() {
                return Err(Error::NanLoss { batch: step });
            }
            let mut norm_sq = 0.0;
            for t in grad.tensors_mut() {
                t.scale(inv);
                norm_sq += t.norm_squared();
            }
            let grad_norm = norm_sq.sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::NanLoss { batch: step });
            }
            if let Some(clip) = config.grad_clip {
                if grad_norm > clip {
                    let s = clip / grad_norm;
                    grad.tensors_mut().into_iter().for_each(|t| t.scale(s));
                }
            }
            for ((p, v), g) in model
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
            {
                for ((x, m), d) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.1.data) {
                    *m = config.momentum * *m + d;
                    *x -= lr * *m;
                }
            }
            records.push(TrainRecord {
                epoch,
                step,
                loss_total: loss.total,
                loss_trans: loss.trans,
                loss_rot: loss.rot,
                grad_norm,
                learning_rate: lr,
                wall_time: started.elapsed().as_secs_f64(),
            });
            step += 1;

            if step.is_multiple_of(eval_every) {
                let monitored = mean_loss(&model, monitor, &config.loss)?.total;
                if !monitored.is_finite() {
                    return Err(Error::NanLoss { batch: step - 1 });
                }
                if monitored < best_loss {
                    best_loss = monitored;
                    best = model.clone();
                }
                if let Some(plateau) = &config.plateau {
                    if monitored < plateau_best * (1.0 - plateau.threshold) {
                        plateau_best = monitored;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= plateau.patience && lr > plateau.min_lr {
                            lr = (lr * 0.5).max(plateau.min_lr);
                            stale = 0;
                            info!("step {step}: learning rate halved to {lr:e}");
                        }
                    }
                }
                info!(
                    "epoch {epoch} step {step}: train {:.5} monitored {monitored:.5} lr {lr:e}",
                    loss.total
                );
            }
        }
    }
    if best_loss.is_infinite() {
        best_loss = mean_loss(&model, monitor, &config.loss)?.total;
        best = model.clone();
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_loss,
        records,
    })
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest `|g_analytic − g_fd| / max(|g_analytic|, |g_fd|, 1e-6 · max(1, |loss|))`
    /// over checked coordinates. The floor sits well above the rounding noise
    /// of the difference quotient, about `1e-15 · |loss| / epsilon`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a branch boundary and were re-perturbed.
    pub flagged: usize,
    /// Coordinates dropped after repeated boundary crossings.
    pub skipped: usize,
}

/// One evaluation of a loss: value, gradient (if requested) and a hash of
/// its piecewise branch decisions.
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Option<Vec<f64>>,
    pub signature: u64,
}

const MAX_REPERTURB: usize = 5;
const GRAD_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against a fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` on the coordinates in
/// `coords`.
///
/// A coordinate whose stencil changes the branch signature sits on a kink;
/// it is flagged, the parameter is shifted by a seeded random offset and the
/// comparison is repeated at the new point.
pub fn grad_check<F>(f: F, params: &[f64], coords: &[usize], epsilon: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64], bool) -> Result<Evaluation>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        flagged: 0,
        skipped: 0,
    };
    for &i in coords {
        if i >= x.len() {
            return Err(Error::InvalidArgument(format!("coordinate {i} out of range")));
        }
        let mut done = false;
        for attempt in 0..=MAX_REPERTURB {
            let base = f(&x, true)?;
            let analytic = base
                .gradient
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("loss did not return a gradient".into()))?[i];
            let x0 = x[i];
            let mut values = [0.0; 4];
            let mut crossed = false;
            for (v, s) in values.iter_mut().zip([1.0, -1.0, 2.0, -2.0]) {
                x[i] = x0 + s * epsilon;
                let e = f(&x, false)?;
                crossed |= e.signature != base.signature;
                *v = e.loss;
            }
            x[i] = x0;
            if crossed {
                if attempt == 0 {
                    report.flagged += 1;
                }
                x[i] = x0 + rng.gen_range(-1.0..1.0) * 50.0 * epsilon;
                continue;
            }
            let fd = (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * epsilon);
            let floor = GRAD_FLOOR * base.loss.abs().max(1.0);
            let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(floor);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
            done = true;
            break;
        }
        if !done {
            report.skipped += 1;
        }
    }
    Ok(report)
}

/// Gradient check of the full model loss on one sample, over `count`
/// coordinates spread evenly across every parameter tensor.
pub fn grad_check_model(
    model: &PoseModel,
    sample: &TrainSample,
    weights: &LossWeights,
    count: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let shapes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let per = count.div_ceil(shapes.len()).max(1);
    let mut coords = Vec::new();
    let mut offset = 0;
    for &n in &shapes {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        coords.extend(idx.into_iter().take(per).map(|j| offset + j));
        offset += n;
    }
    let params = flat_grad(model);
    let eval = |x: &[f64], need_grad: bool| -> Result<Evaluation> {
        let mut m = model.clone();
        let mut off = 0;
        for t in m.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&x[off..off + n]);
            off += n;
        }
        if need_grad {
            let mut g = m.zeros_like();
            let (p, signature) = sample_loss(&m, sample, weights, Some(&mut g))?;
            Ok(Evaluation {
                loss: p.total,
                gradient: Some(flat_grad(&g)),
                signature,
            })
        } else {
            let (p, signature) = sample_loss(&m, sample, weights, None)?;
            Ok(Evaluation {
                loss: p.total,
                gradient: None,
                signature,
            })
        }
    };
    grad_check(eval, &params, &coords, epsilon, seed)
}
