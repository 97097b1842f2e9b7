//! Evaluation metrics: translation RMSE, Chamfer distance, symmetric Chamfer
//! distance (SCD), success rate and per-category aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, PointCloud, RigidTransform, Vec3};
use crate::planner::AssemblyStep;

/// `sqrt(mean ‖t_pred − t_gt‖²)`.
pub fn rmse_translation(preds: &[Vec3], targets: &[Vec3]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("translation list"));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).norm_squared())
        .sum();
    Ok((sum / preds.len() as f64).sqrt())
}

/// Mean over `a` of the squared distance to the nearest point of `b`.
fn directed_mean_sq(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let d = (p - q).norm_squared();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / a.len() as f64
}

/// `½ (mean_a min_b ‖a−b‖² + mean_b min_a ‖a−b‖²)`, by exact brute force.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    0.5 * (directed_mean_sq(a.points(), b.points()) + directed_mean_sq(b.points(), a.points()))
}

/// Symmetric Chamfer distance (twice the Chamfer distance) between the
/// moving cloud placed by the predicted and by the ground-truth pose.
pub fn scd(pred_pose: &RigidTransform, step: &AssemblyStep) -> f64 {
    scd_between(pred_pose, &step.target_pose, &step.moving_cloud)
}

pub fn scd_between(pred: &RigidTransform, target: &RigidTransform, moving: &PointCloud) -> f64 {
    let a = apply_transform(moving, pred);
    let b = apply_transform(moving, target);
    2.0 * chamfer(&a, &b)
}

/// SCD after substituting the ground-truth translation into the prediction.
pub fn scd_rotation_only(pred_pose: &RigidTransform, step: &AssemblyStep) -> f64 {
    let pred = pred_pose.with_translation(*step.target_pose.translation());
    scd(&pred, step)
}

/// Metrics of one evaluated step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub step_id: String,
    pub category: String,
    /// Translation error norm of this step.
    pub rmse_t: f64,
    pub scd: f64,
    pub success: bool,
}

impl EvalResult {
    pub fn new(
        step_id: impl Into<String>,
        category: impl Into<String>,
        pred: &RigidTransform,
        target: &RigidTransform,
        moving: &PointCloud,
        sr_threshold: f64,
    ) -> Self {
        let scd = scd_between(pred, target, moving);
        Self {
            step_id: step_id.into(),
            category: category.into(),
            rmse_t: (pred.translation() - target.translation()).norm(),
            scd,
            success: scd < sr_threshold,
        }
    }
}

/// Strict success criterion.
pub fn is_success(scd: f64, threshold: f64) -> bool {
    scd < threshold
}

/// One row of a category report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    /// Root of the mean squared translation error over the category.
    pub rmse_t: f64,
    pub scd: f64,
    pub success_rate: f64,
}

/// Per-category rows (sorted by name) plus the count-weighted "All" row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub rows: Vec<CategoryRow>,
    pub all: CategoryRow,
}

#[derive(Default)]
struct Acc {
    count: usize,
    sq_t: f64,
    scd: f64,
    success: usize,
}

impl Acc {
    fn row(&self, category: &str) -> CategoryRow {
        let n = self.count as f64;
        CategoryRow {
            category: category.to_string(),
            count: self.count,
            rmse_t: (self.sq_t / n).sqrt(),
            scd: self.scd / n,
            success_rate: self.success as f64 / n,
        }
    }
}

/// Aggregates step results by category.
///
/// Each category's RMSE(T) pools the squared translation errors of its steps;
/// SCD and success rate are arithmetic means. The "All" row weights category
/// rows by their sample counts. Sums run over results sorted by step id, so
/// the report does not depend on input order.
pub fn aggregate(results: &[EvalResult]) -> Result<CategoryReport> {
    if results.is_empty() {
        return Err(Error::Empty("evaluation results"));
    }
    let mut sorted: Vec<&EvalResult> = results.iter().collect();
    sorted.sort_by(|a, b| {
        a.category
            .cmp(&b.category)
            .then_with(|| a.step_id.cmp(&b.step_id))
            .then_with(|| a.scd.total_cmp(&b.scd))
    });
    let mut groups: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in sorted {
        let acc = groups.entry(r.category.as_str()).or_default();
        acc.count += 1;
        acc.sq_t += r.rmse_t * r.rmse_t;
        acc.scd += r.scd;
        acc.success += usize::from(r.success);
    }
    let rows: Vec<CategoryRow> = groups.iter().map(|(c, a)| a.row(c)).collect();
    let total: usize = rows.iter().map(|r| r.count).sum();
    let weighted = |f: fn(&CategoryRow) -> f64| {
        rows.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / total as f64
    };
    let all = CategoryRow {
        category: "All".to_string(),
        count: total,
        rmse_t: weighted(|r| r.rmse_t),
        scd: weighted(|r| r.scd),
        success_rate: weighted(|r| r.success_rate),
    };
    Ok(CategoryReport { rows, all })
}

impl CategoryReport {
    /// Aligned text table: one row per category and a final "All" row.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.category.len())
            .max()
            .unwrap_or(0)
            .max("Category".len());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>9}  {:>9}  {:>7}",
            "Category", "N", "RMSE(T)", "SCD", "SR"
        );
        let line = |s: &mut String, r: &CategoryRow| {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>9.4}  {:>9.4}  {:>6.1}%",
                r.category,
                r.count,
                r.rmse_t,
                r.scd,
                100.0 * r.success_rate
            );
        };
        for r in &self.rows {
            line(&mut s, r);
        }
        line(&mut s, &self.all);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_se3, rot_z};
    use rand::Rng;

    fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
        let dir = |x: &PointCloud, y: &PointCloud| {
            let mut s = 0.0;
            for p in x.points() {
                let m = y
                    .points()
                    .iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                s += m;
            }
            s / x.len() as f64
        };
        0.5 * (dir(a, b) + dir(b, a))
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = crate::rng::rng_from_seed(seed);
        PointCloud::new((0..n).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let z = Vec3::zeros();
        assert_eq!(rmse_translation(&[z], &[z]).unwrap(), 0.0);
        assert_eq!(rmse_translation(&[Vec3::x()], &[z]).unwrap(), 1.0);
        let r = rmse_translation(&[z, Vec3::new(0.0, 2.0, 0.0)], &[z, z]).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
        assert!(rmse_translation(&[], &[]).is_err());
        assert!(rmse_translation(&[z], &[z, z]).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let a = random_cloud(50, 1);
        assert_eq!(chamfer(&a, &a), 0.0);
        let p = PointCloud::from_slices(&[[0.0, 0.0, 0.0]]).unwrap();
        let q = PointCloud::from_slices(&[[0.3, 0.0, 0.0]]).unwrap();
        assert!((chamfer(&p, &q) - 0.09).abs() < 1e-15);
        let b = random_cloud(128, 2);
        let c = random_cloud(128, 3);
        assert!((chamfer(&b, &c) - brute_chamfer(&b, &c)).abs() < 1e-12);
        assert_eq!(chamfer(&b, &c), chamfer(&c, &b));
    }

    #[test]
    fn scd_of_small_shift_is_two_delta_squared() {
        let moving = random_cloud(128, 4);
        let target = random_se3(5, None, Some(0.5)).unwrap();
        let delta = 1e-3;
        let pred = RigidTransform::from_translation(Vec3::new(delta, 0.0, 0.0)).compose(&target);
        let step = AssemblyStep {
            index: 1,
            part_id: 0,
            fixed_cloud: moving.clone(),
            moving_cloud: moving,
            target_pose: target,
        };
        assert_eq!(scd(&target, &step), 0.0);
        let s = scd(&pred, &step);
        assert!((s - 2.0 * delta * delta).abs() < 1e-12, "{s}");
        assert_eq!(scd_rotation_only(&pred, &step), 0.0);
        let rot = RigidTransform::from_rotation(rot_z(1.0)).unwrap().compose(&target);
        let brute = 2.0
            * brute_chamfer(
                &apply_transform(&step.moving_cloud, &rot.with_translation(*target.translation())),
                &apply_transform(&step.moving_cloud, &target),
            );
        assert!((scd_rotation_only(&rot, &step) - brute).abs() < 1e-12);
    }

    #[test]
    fn success_is_strict() {
        assert!(is_success(0.019, 0.02));
        assert!(!is_success(0.021, 0.02));
        assert!(!is_success(0.02, 0.02));
        assert!(is_success(0.02 - 1e-9, 0.02));
        assert!(!is_success(0.02 + 1e-9, 0.02));
    }

    fn result(id: &str, cat: &str, t: f64, scd: f64) -> EvalResult {
        EvalResult {
            step_id: id.into(),
            category: cat.into(),
            rmse_t: t,
            scd,
            success: scd < 0.02,
        }
    }

    #[test]
    fn aggregate_single_category() {
        let rep = aggregate(&[result("a", "stack", 0.1, 0.01), result("b", "stack", 0.2, 0.03)]).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].count, rep.all.count);
        assert!((rep.rows[0].rmse_t - rep.all.rmse_t).abs() < 1e-15);
        assert!((rep.rows[0].scd - rep.all.scd).abs() < 1e-15);
        assert_eq!(rep.all.success_rate, 0.5);
    }

    #[test]
    fn aggregate_weights_by_count() {
        let rs = vec![
            result("a", "x", 0.0, 0.001),
            result("b", "y", 0.0, 0.5),
            result("c", "y", 0.0, 0.5),
            result("d", "y", 0.0, 0.5),
        ];
        let rep = aggregate(&rs).unwrap();
        assert_eq!(rep.all.success_rate, 0.25);
        let table = rep.to_table();
        assert!(table.lines().last().unwrap().starts_with("All"));
        assert!(table.contains("25.0%"));
        assert!(aggregate(&[]).is_err());
    }
}
