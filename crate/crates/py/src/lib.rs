//! Python bindings for the assembly-pose toolkit.
//!
//! Points cross the boundary as lists of `[x, y, z]`; poses as `Pose`
//! objects holding a rotation matrix and a translation.

use std::path::PathBuf;

use kit::codec::{detokenize, pose_to_vector, tokenize, PoseTokens};
use kit::encoder::{ModelConfig, PoseModel as CoreModel, PreparedCloud};
use kit::geometry::{farthest_point_sample as fps, random_se3, Mat3, Vec3};
use kit::io::{load_checkpoint, save_checkpoint};
use kit::mesh::{sample_surface, TriangleMesh};
use kit::metrics::{chamfer as core_chamfer, scd_between};
use kit::planner::{build_connectivity, infer_order};
use kit::synth::{generate_asset as core_generate_asset, generate_dataset as core_generate_dataset, specs_for, AssetSpec, DatasetConfig, Family};
use kit::{Error, PointCloud, RigidTransform};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NotFound(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e @ (Error::NanLoss { .. } | Error::Generation { .. } | Error::Json(_)) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Points = Vec<[f64; 3]>;

fn cloud(points: &Points) -> PyResult<PointCloud> {
    PointCloud::from_slices(points).map_err(py_err)
}

fn points_of(cloud: &PointCloud) -> Points {
    cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Rigid transform `x ↦ R x + t`.
#[pyclass(frozen, skip_from_py_object, module = "assemkit")]
#[derive(Clone)]
pub struct Pose {
    inner: RigidTransform,
}

#[pymethods]
impl Pose {
    #[new]
    #[pyo3(signature = (rotation, translation=[0.0; 3]))]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = Mat3::from_fn(|i, j| rotation[i][j]);
        let inner = RigidTransform::new(r, Vec3::from(translation)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: RigidTransform::identity(),
        }
    }

    /// Seeded random motion; Haar-uniform rotation unless a bound in degrees is given.
    #[staticmethod]
    #[pyo3(signature = (seed, rotation_limit_deg=None, translation_limit=None))]
    fn random(seed: u64, rotation_limit_deg: Option<f64>, translation_limit: Option<f64>) -> PyResult<Self> {
        let inner = random_se3(seed, rotation_limit_deg, translation_limit).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Decodes 9 tokens.
    #[staticmethod]
    #[pyo3(signature = (tokens, translation_scale=1.0))]
    fn from_tokens(tokens: [u16; 9], translation_scale: f64) -> PyResult<Self> {
        let t = PoseTokens::new(tokens).map_err(py_err)?;
        let inner = detokenize(&t, translation_scale).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.inner.rotation();
        [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]])
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation();
        [t.x, t.y, t.z]
    }

    /// Rotation angle in radians.
    fn angle(&self) -> f64 {
        self.inner.angle()
    }

    /// `self ∘ other`.
    fn compose(&self, other: &Pose) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn apply(&self, points: Points) -> Points {
        points
            .iter()
            .map(|p| {
                let q = self.inner.apply_point(&Vec3::from(*p));
                [q.x, q.y, q.z]
            })
            .collect()
    }

    /// The 9 pose tokens.
    #[pyo3(signature = (translation_scale=1.0))]
    fn tokens(&self, translation_scale: f64) -> PyResult<[u16; 9]> {
        let v = pose_to_vector(&self.inner, translation_scale).map_err(py_err)?;
        Ok(*tokenize(&v.vector).bins())
    }

    fn __repr__(&self) -> String {
        format!("Pose(rotation={:?}, translation={:?})", self.rotation(), self.translation())
    }
}

/// Encoder, mixer and pose head.
#[pyclass(module = "assemkit")]
pub struct PoseModel {
    inner: CoreModel,
}

#[pymethods]
impl PoseModel {
    #[new]
    #[pyo3(signature = (channels=32, seed=0))]
    fn new(channels: usize, seed: u64) -> PyResult<Self> {
        let inner = CoreModel::init(&ModelConfig::desk(channels), seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, &serde_json::json!({})).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Pose that places `moving` onto `fixed`; both clouds are optionally
    /// reduced by farthest point sampling first.
    #[pyo3(signature = (fixed, moving, encoder_points=None))]
    fn predict(&self, fixed: Points, moving: Points, encoder_points: Option<usize>) -> PyResult<Pose> {
        let k = self.inner.encoder.config.k;
        let prepare = |p: &Points| -> PyResult<PreparedCloud> {
            let mut c = cloud(p)?;
            if let Some(n) = encoder_points.filter(|&n| n < c.len()) {
                c = fps(&c, n).map_err(py_err)?;
            }
            PreparedCloud::new(&c, k).map_err(py_err)
        };
        let out = self.inner.predict(&prepare(&fixed)?, &prepare(&moving)?).map_err(py_err)?;
        Ok(Pose { inner: out.pose })
    }
}

/// Chamfer distance with squared point distances.
#[pyfunction]
fn chamfer(a: Points, b: Points) -> PyResult<f64> {
    Ok(core_chamfer(&cloud(&a)?, &cloud(&b)?))
}

/// Symmetric Chamfer distance between `moving` placed by `pred` and by `target`.
#[pyfunction]
fn scd(pred: &Pose, target: &Pose, moving: Points) -> PyResult<f64> {
    Ok(scd_between(&pred.inner, &target.inner, &cloud(&moving)?))
}

#[pyfunction]
#[pyo3(signature = (clouds, tau=kit::DEFAULT_TAU))]
fn connectivity(clouds: Vec<Points>, tau: f64) -> PyResult<Vec<(usize, usize)>> {
    let clouds: Vec<PointCloud> = clouds.iter().map(cloud).collect::<PyResult<_>>()?;
    Ok(build_connectivity(&clouds, tau).map_err(py_err)?.edges())
}

/// Bottom-up assembly order of the parts.
#[pyfunction]
#[pyo3(signature = (clouds, tau=kit::DEFAULT_TAU))]
fn assembly_order(clouds: Vec<Points>, tau: f64) -> PyResult<Vec<usize>> {
    let clouds: Vec<PointCloud> = clouds.iter().map(cloud).collect::<PyResult<_>>()?;
    let m = build_connectivity(&clouds, tau).map_err(py_err)?;
    infer_order(&clouds, &m).map_err(py_err)
}

#[pyfunction]
fn farthest_point_sample(points: Points, count: usize) -> PyResult<Points> {
    Ok(points_of(&fps(&cloud(&points)?, count).map_err(py_err)?))
}

/// Area-weighted surface sample of an OBJ mesh.
#[pyfunction]
#[pyo3(signature = (path, count=kit::DEFAULT_POINTS_COARSE, seed=0))]
fn sample_mesh(path: PathBuf, count: usize, seed: u64) -> PyResult<Points> {
    let mesh = TriangleMesh::read_obj(&path).map_err(py_err)?;
    Ok(points_of(&sample_surface(&mesh, count, seed).map_err(py_err)?))
}

fn family(name: &str) -> PyResult<Family> {
    name.parse().map_err(py_err)
}

/// OBJ text of every part of one synthetic object.
#[pyfunction]
#[pyo3(signature = (family_name, seed, randomize=true))]
fn generate_asset(family_name: &str, seed: u64, randomize: bool) -> PyResult<Vec<String>> {
    let spec = AssetSpec {
        randomize,
        ..AssetSpec::new(family(family_name)?, seed)
    };
    Ok(core_generate_asset(&spec).map_err(py_err)?.iter().map(TriangleMesh::to_obj).collect())
}

/// Writes a synthetic dataset; returns `(assets, steps, failures)`.
#[pyfunction]
#[pyo3(signature = (out, families, count, seed=0, rotation_limit_deg=None, validation_fraction=0.1, points=kit::DEFAULT_POINTS, points_coarse=kit::DEFAULT_POINTS_COARSE))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    py: Python<'_>,
    out: PathBuf,
    families: Vec<String>,
    count: usize,
    seed: u64,
    rotation_limit_deg: Option<f64>,
    validation_fraction: f64,
    points: usize,
    points_coarse: usize,
) -> PyResult<(usize, usize, usize)> {
    let families: Vec<Family> = families.iter().map(|f| family(f)).collect::<PyResult<_>>()?;
    let config = DatasetConfig {
        points,
        points_coarse,
        rotation_limit_degrees: rotation_limit_deg,
        validation_fraction,
        ..Default::default()
    };
    let specs = specs_for(&families, count, true, seed);
    let manifest = py
        .detach(|| core_generate_dataset(&specs, &config, seed, &out))
        .map_err(py_err)?;
    Ok((manifest.assets.len(), manifest.steps.len(), manifest.failures.len()))
}

#[pymodule]
fn assemkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pose>()?;
    m.add_class::<PoseModel>()?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(scd, m)?)?;
    m.add_function(wrap_pyfunction!(connectivity, m)?)?;
    m.add_function(wrap_pyfunction!(assembly_order, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mesh, m)?)?;
    m.add_function(wrap_pyfunction!(generate_asset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add("TAU", kit::DEFAULT_TAU)?;
    m.add("NUM_BINS", kit::codec::NUM_BINS)?;
    Ok(())
}
