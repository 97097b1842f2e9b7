//! Acceptance suite: one PASS/FAIL line per criterion on stdout.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use assemkit::codec::{detokenize, detokenize_value, pose_to_vector, tokenize, tokenize_value, POSE_SLOTS};
use assemkit::encoder::{correlate, encode, EncoderConfig, EncoderParams, ModelConfig, PoseModel};
use assemkit::geometry::{apply_transform, geodesic_angle, random_se3, rotation_defect, Vec3};
use assemkit::io::{load_manifest, load_step, Split};
use assemkit::mesh::{canonical_normalize, sample_surface};
use assemkit::metrics::{chamfer, is_success, scd_between};
use assemkit::planner::{build_connectivity, build_steps, infer_order, StepConfig};
use assemkit::rng::rng_from_seed;
use assemkit::synth::{generate_asset, generate_dataset, specs_for, AssetSpec, DatasetConfig, Family};
use assemkit::trainer::{grad_check_model, predict, train_warmup, LossWeights, TrainSample, WarmupConfig};
use assemkit::{PointCloud, RigidTransform};
use rand::Rng;

/// Largest rotation error of a token round trip; the observed maximum over
/// 200k Haar-uniform rotations is 0.0114 rad.
const CODEC_ROTATION_BOUND: f64 = 0.0125;
/// Regression ceiling on the held-out median SCD of the desk-scale run.
const GENERALIZATION_CEILING: f64 = 0.005;

/// Writes straight to stdout so the line survives test output capture.
fn report(name: &str, pass: bool, detail: String) {
    let line = format!("ACCEPTANCE {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{name}: {detail}");
}

fn random_cloud(n: usize, seed: u64, scale: Vec3) -> PointCloud {
    let mut rng = rng_from_seed(seed);
    PointCloud::new((0..n).map(|_| Vec3::from_fn(|i, _| rng.gen_range(-1.0..1.0) * scale[i])).collect()).unwrap()
}

fn rel(a: &[Vec3], b: &[Vec3]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    let den: f64 = b.iter().map(|x| x.norm_squared()).sum();
    (num / den.max(1e-300)).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn equivariance_suite() {
    let start = Instant::now();
    let params = EncoderParams::init(EncoderConfig::desk(64), &mut rng_from_seed(1)).unwrap();
    let cloud = random_cloud(256, 2, Vec3::new(0.6, 0.4, 0.3));
    let base = encode(&cloud, &params).unwrap();
    let (mut worst_f, mut worst_g) = (0.0f64, 0.0f64);
    for s in 0..100 {
        let t = random_se3(1000 + s, None, Some(1.0)).unwrap();
        let out = encode(&apply_transform(&cloud, &t), &params).unwrap();
        let expected: Vec<Vec3> = base.equivariant.values.iter().map(|v| t.apply_point(v)).collect();
        worst_f = worst_f.max(rel(&out.equivariant.values, &expected));
        worst_g = worst_g.max(rel(&out.invariant.values, &base.invariant.values));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "equivariance",
        worst_f <= 1e-4 && worst_g <= 1e-4 && secs < 60.0,
        format!("F err {worst_f:.2e}, G err {worst_g:.2e} over 100 transforms (f=64, N=256, ≤ 1e-4), {secs:.1} s"),
    );
}

#[test]
fn correlation_contract() {
    let model = PoseModel::init(&ModelConfig::desk(64), 4).unwrap();
    let fixed = random_cloud(256, 5, Vec3::new(0.5, 0.5, 0.2));
    let moving = random_cloud(256, 6, Vec3::new(0.3, 0.1, 0.2));
    let p = &model.encoder;
    let (ef, em) = (encode(&fixed, p).unwrap(), encode(&moving, p).unwrap());
    let c = correlate(&em, &ef.invariant, &model.mixer).unwrap();
    let (mut inv, mut eqv) = (0.0f64, 0.0f64);
    for s in 0..20 {
        let t = random_se3(2000 + s, None, Some(1.0)).unwrap();
        let ef2 = encode(&apply_transform(&fixed, &t), p).unwrap();
        let c_fixed = correlate(&em, &ef2.invariant, &model.mixer).unwrap();
        inv = inv.max(rel(&c_fixed.values.values, &c.values.values));
        let em2 = encode(&apply_transform(&moving, &t), p).unwrap();
        let c_moving = correlate(&em2, &ef.invariant, &model.mixer).unwrap();
        let expected: Vec<Vec3> = c
            .values
            .values
            .iter()
            .zip(&c.row_sums)
            .map(|(v, s)| t.rotation() * v + t.translation() * *s)
            .collect();
        eqv = eqv.max(rel(&c_moving.values.values, &expected));
    }
    report(
        "correlation",
        inv <= 1e-4 && eqv <= 1e-4,
        format!("fixed-motion err {inv:.2e}, moving-motion err {eqv:.2e} over 20 transforms (≤ 1e-4)"),
    );
}

#[test]
fn pose_codec() {
    let mut rng = rng_from_seed(7);
    let mut slot_err = 0.0f64;
    for _ in 0..10_000 {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        slot_err = slot_err.max((detokenize_value(tokenize_value(x)) - x).abs());
    }
    let (mut t_err, mut r_err, mut defect) = (0.0f64, 0.0f64, 0.0f64);
    let mut nine = true;
    for s in 0..10_000 {
        let t = random_se3(3000 + s, None, Some(1.0)).unwrap();
        let tokens = tokenize(&pose_to_vector(&t, 1.0).unwrap().vector);
        nine &= tokens.len() == POSE_SLOTS && POSE_SLOTS == 9;
        let d = detokenize(&tokens, 1.0).unwrap();
        t_err = t_err.max((d.translation() - t.translation()).norm());
        r_err = r_err.max(geodesic_angle(d.rotation(), t.rotation()));
        defect = defect.max(rotation_defect(d.rotation()));
    }
    let t_bound = 0.005 * 3f64.sqrt();
    report(
        "pose_codec",
        nine && slot_err <= 0.005 && t_err <= t_bound && r_err <= CODEC_ROTATION_BOUND && defect <= 1e-9,
        format!(
            "9 tokens {nine}, slot err {slot_err:.5} (≤ 0.005), translation err {t_err:.5} (≤ {t_bound:.5}), \
             rotation err {r_err:.5} rad (≤ {CODEC_ROTATION_BOUND}), orthonormality {defect:.1e} (≤ 1e-9) over 10000 poses"
        ),
    );
}

fn brute_touch(a: &PointCloud, b: &PointCloud, tau: f64) -> bool {
    a.points().iter().any(|p| b.points().iter().any(|q| (p - q).norm() < tau))
}

/// Order by repeated scans of the parts sorted by (lowest point, index).
fn brute_order(clouds: &[PointCloud], adj: &[Vec<bool>]) -> Option<Vec<usize>> {
    let mut ranked: Vec<usize> = (0..clouds.len()).collect();
    ranked.sort_by(|&a, &b| clouds[a].min_z().total_cmp(&clouds[b].min_z()).then(a.cmp(&b)));
    let mut order = vec![ranked[0]];
    while order.len() < clouds.len() {
        let next = ranked
            .iter()
            .copied()
            .find(|&o| !order.contains(&o) && order.iter().any(|&a| adj[o][a]))?;
        order.push(next);
    }
    Some(order)
}

#[test]
fn planner_oracle() {
    let tau = 0.06;
    let mut mismatches = Vec::new();
    let mut fixtures = 0;
    for (i, family) in Family::ALL.iter().cycle().take(50).enumerate() {
        let meshes = generate_asset(&AssetSpec::randomized(*family, 500 + i as u64)).unwrap();
        let (meshes, _) = canonical_normalize(&meshes).unwrap();
        let clouds: Vec<PointCloud> =
            meshes.iter().enumerate().map(|(k, m)| sample_surface(m, 600, 40 * i as u64 + k as u64).unwrap()).collect();
        let m = build_connectivity(&clouds, tau).unwrap();
        let n = clouds.len();
        let adj: Vec<Vec<bool>> =
            (0..n).map(|a| (0..n).map(|b| a != b && brute_touch(&clouds[a], &clouds[b], tau)).collect()).collect();
        let same_edges = (0..n).all(|a| (0..n).all(|b| m.get(a, b) == adj[a][b]));
        let same_order = infer_order(&clouds, &m).ok() == brute_order(&clouds, &adj);
        if !(same_edges && same_order) {
            mismatches.push(format!("{}#{i}", family.name()));
        }
        fixtures += 1;
    }
    // two single-point parts at an exact distance
    let pair = |d: f64| {
        let a = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let b = PointCloud::new(vec![Vec3::new(d, 0.0, 0.0)]).unwrap();
        build_connectivity(&[a, b], tau).unwrap().get(0, 1)
    };
    let boundary = pair(tau - 1e-6) && !pair(tau) && !pair(tau + 1e-6);
    report(
        "planner_oracle",
        mismatches.is_empty() && boundary,
        format!("{fixtures} fixtures, mismatches {mismatches:?}, boundary at 0.06 ± 1e-6 strict: {boundary}"),
    );
}

#[test]
fn metric_oracle() {
    let a = random_cloud(128, 8, Vec3::new(1.0, 0.5, 0.3));
    let b = random_cloud(128, 9, Vec3::new(0.7, 0.9, 0.2));
    let directed = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .iter()
            .map(|p| y.points().iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    let reference = 0.5 * (directed(&a, &b) + directed(&b, &a));
    let cd_err = (chamfer(&a, &b) - reference).abs();
    let t = random_se3(10, None, Some(0.5)).unwrap();
    let placed = apply_transform(&a, &t);
    let scd_ref = 2.0 * 0.5 * (directed(&placed, &a) + directed(&a, &placed));
    let scd_err = (scd_between(&t, &RigidTransform::identity(), &a) - scd_ref).abs();
    let strict = !is_success(0.02, 0.02) && is_success(0.02 - 1e-12, 0.02);
    report(
        "metric_oracle",
        cd_err <= 1e-12 && scd_err <= 1e-12 && strict,
        format!("chamfer err {cd_err:.1e}, SCD err {scd_err:.1e} on 128 points (≤ 1e-12), SR strict at 0.02: {strict}"),
    );
}

/// One step of a synthetic asset with full-rotation perturbation.
fn single_step(family: Family, seed: u64, points: usize) -> assemkit::planner::AssemblyStep {
    let meshes = generate_asset(&AssetSpec::randomized(family, seed)).unwrap();
    let (meshes, _) = canonical_normalize(&meshes).unwrap();
    let clouds: Vec<PointCloud> =
        meshes.iter().enumerate().map(|(k, m)| sample_surface(m, 4 * points, seed + k as u64).unwrap()).collect();
    let order = infer_order(&clouds, &build_connectivity(&clouds, 0.06).unwrap()).unwrap();
    let config = StepConfig {
        points,
        ..Default::default()
    };
    build_steps(&clouds, &order, seed, &config).unwrap().steps.remove(0)
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let model = PoseModel::init(&ModelConfig::desk(8), 11).unwrap();
    let step = single_step(Family::Table, 12, 32);
    let sample = TrainSample::from_step("g", "table", &step, model.encoder.config.k, None).unwrap();
    let r = grad_check_model(&model, &sample, &LossWeights::default(), 96, 1e-4, 13).unwrap();
    let tensors = model.tensors().len();
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient_check",
        r.max_relative_error <= 1e-4 && r.checked >= 64 && secs < 300.0,
        format!(
            "max rel err {:.2e} (≤ 1e-4) over {} coordinates in {tensors} tensors, {} flagged, {} skipped, {secs:.1} s",
            r.max_relative_error, r.checked, r.flagged, r.skipped
        ),
    );
}

#[test]
fn warmup_overfit() {
    let start = Instant::now();
    let step = single_step(Family::Stack, 21, 1024);
    let sample = TrainSample::from_step("o", "stack", &step, 16, Some(256)).unwrap();
    let config = WarmupConfig {
        model: ModelConfig::desk(32),
        learning_rate: 3e-3,
        batch_size: 1,
        epochs: 2000,
        seed: 1,
        grad_clip: Some(10.0),
        encoder_points: Some(256),
        ..Default::default()
    };
    let out = train_warmup(std::slice::from_ref(&sample), &[], &config).unwrap();
    let scd = scd_between(&predict(&out.best, &sample).unwrap(), &sample.target, &sample.moving_cloud);
    let secs = start.elapsed().as_secs_f64();
    report(
        "warmup_overfit",
        scd < 0.02 && secs < 600.0,
        format!("SCD {scd:.5} after 2000 iterations (< 0.02), {secs:.1} s"),
    );
}

fn held_out(root: &Path, split: Split) -> Vec<TrainSample> {
    let manifest = load_manifest(&root.join("manifest.json")).unwrap();
    manifest
        .steps_in(split)
        .map(|r| TrainSample::from_step(&r.id, &r.category, &load_step(root, r).unwrap(), 16, Some(256)).unwrap())
        .collect()
}

#[test]
fn desk_generalization() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = DatasetConfig {
        rotation_limit_degrees: Some(45.0),
        validation_fraction: 0.099,
        ..Default::default()
    };
    let specs = specs_for(&[Family::Stack, Family::PegBoard], 111, true, 7);
    let manifest = generate_dataset(&specs, &config, 7, dir.path()).unwrap();
    let held: std::collections::BTreeSet<&str> =
        manifest.assets.iter().filter(|a| a.split == Split::Validation).map(|a| a.id.as_str()).collect();
    let (train, val) = (held_out(dir.path(), Split::Train), held_out(dir.path(), Split::Validation));
    let wc = WarmupConfig {
        model: ModelConfig::desk(32),
        learning_rate: 3e-3,
        batch_size: 8,
        epochs: 20,
        seed: 1,
        rotation_limit_degrees: Some(45.0),
        plateau: Some(Default::default()),
        grad_clip: Some(10.0),
        encoder_points: Some(256),
        ..Default::default()
    };
    let untrained = PoseModel::init(&wc.model, wc.seed).unwrap();
    let out = train_warmup(&train, &val, &wc).unwrap();
    let scores = |pose: &dyn Fn(&TrainSample) -> RigidTransform| {
        median(val.iter().map(|s| scd_between(&pose(s), &s.target, &s.moving_cloud)).collect())
    };
    let model = scores(&|s| predict(&out.best, s).unwrap());
    let identity = scores(&|_| RigidTransform::identity());
    let initial = scores(&|s| predict(&untrained, s).unwrap());
    let secs = start.elapsed().as_secs_f64();
    report(
        "desk_generalization",
        model < 0.05 && identity >= 5.0 * model && model <= GENERALIZATION_CEILING && held.len() == 22 && secs < 7200.0,
        format!(
            "held-out median SCD {model:.5} (< 0.05, ≤ {GENERALIZATION_CEILING}) vs identity {identity:.5} ({:.1}x, ≥ 5x); \
             untrained {initial:.5}; {} train / {} held-out assets, {} / {} steps, {secs:.0} s",
            identity / model,
            manifest.assets.len() - held.len(),
            held.len(),
            train.len(),
            val.len()
        ),
    );
}

fn run(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_assemkit"))
        .args(args)
        .env("ASMK_THREADS", "1")
        .status()
        .unwrap();
    assert!(status.success(), "assemkit {args:?} failed with {status}");
}

fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
    [args, &["--seed", "5", "--points-coarse", "2048", "--points", "256"][..]].concat()
}

fn pipeline(root: &Path) -> Vec<u8> {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let data = p("data");
    run(&with(&["gen-synth", "--families", "stack,peg_board", "--count", "3", "--out", &data]));
    run(&with(&[
        "train-warmup", &data, "--out", &p("model.ckpt"), "--log", &p("train.jsonl"), "--channels", "8",
        "--encoder-points", "64", "--epochs", "2",
    ]));
    run(&with(&["predict", &data, "--checkpoint", &p("model.ckpt"), "--split", "all", "--out", &p("pred.jsonl")]));
    run(&with(&["eval", &data, "--predictions", &p("pred.jsonl"), "--out", &p("results.jsonl")]));
    run(&with(&["report", &p("results.jsonl"), "--out", &p("report.json")]));
    std::fs::read(root.join("report.json")).unwrap()
}

#[test]
fn end_to_end_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    let ckpt = |d: &Path| std::fs::read(d.join("model.ckpt")).unwrap();
    let same = ra == rb && !ra.is_empty() && ckpt(a.path()) == ckpt(b.path());
    report(
        "end_to_end_determinism",
        same,
        format!("gen-synth → train → eval → report twice: reports {} bytes, identical {same}", ra.len()),
    );
}
