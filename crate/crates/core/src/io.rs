//! File formats: binary point clouds, JSON/JSONL records, the dataset
//! manifest, model checkpoints and prediction files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{pose_to_vector, tokenize, vector_to_pose, PoseTokens, PoseVector9, POSE_SLOTS};
use crate::encoder::{ModelConfig, PoseModel};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, Vec3};
use crate::mesh::Normalization;
use crate::planner::AssemblyStep;
use crate::synth::DatasetConfig;

pub const POINT_CLOUD_MAGIC: &[u8; 7] = b"ASMKPC1";
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ASMK1";
pub const MANIFEST_VERSION: &str = "assemkit-manifest/1";

fn not_found_or(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| not_found_or(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| not_found_or(path, e))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(POINT_CLOUD_MAGIC.len() + 4 + 12 * cloud.len());
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_point_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let head = POINT_CLOUD_MAGIC.len();
    if bytes.len() < head + 4 || &bytes[..head] != POINT_CLOUD_MAGIC {
        return Err(bad("missing ASMKPC1 header".into()));
    }
    let n = u32::from_le_bytes(bytes[head..head + 4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[head + 4..];
    if body.len() != 12 * n {
        return Err(bad(format!("expected {} point bytes for {n} points, found {}", 12 * n, body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    PointCloud::new(vals.chunks_exact(3).map(Vec3::from_column_slice).collect()).map_err(|e| bad(e.to_string()))
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_point_cloud(cloud))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    decode_point_cloud(&read_bytes(path)?, path)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

fn parse_error(path: &Path, line: usize, e: serde_json::Error) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line: if line == 0 { e.line() } else { line },
        message: e.to_string(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_error(path, 0, e))
}

/// One compact JSON object per line.
pub fn to_jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl_bytes(records)?)
}

/// Reads JSONL, skipping blank lines; errors name the file and line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_error(path, i + 1, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub id: String,
    pub family: String,
    pub category: String,
    pub split: Split,
    pub seed: u64,
    /// Canonical part meshes, relative to the dataset root.
    pub parts: Vec<String>,
    /// Coarse part samples, relative to the dataset root.
    pub part_clouds: Vec<String>,
    pub order: Vec<usize>,
    pub normalization: Normalization,
}

/// One assembly step as stored in the manifest and in `steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `"{asset_id}/{step_index}"`
    pub id: String,
    pub asset_id: String,
    pub category: String,
    pub split: Split,
    pub step_index: usize,
    pub part_id: usize,
    pub fixed_cloud: String,
    pub moving_cloud: String,
    pub target_pose: RigidTransform,
    pub pose_vector: [f64; POSE_SLOTS],
    pub tokens: PoseTokens,
    /// Token text form, `<assemble_pose_K>` × 9.
    pub token_text: String,
    pub translation_scale: f64,
    /// Slots clamped into [−1, 1] while encoding.
    pub saturated: usize,
    pub seed: u64,
}

impl StepRecord {
    pub fn step_id(asset_id: &str, index: usize) -> String {
        format!("{asset_id}/{index}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub asset_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: DatasetConfig,
    pub assets: Vec<AssetRecord>,
    pub steps: Vec<StepRecord>,
    pub failures: Vec<FailureRecord>,
}

impl Manifest {
    pub fn steps_in(&self, split: Split) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.split == split)
    }
}

/// Reads a manifest after checking its schema version.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let value: serde_json::Value = read_json(path)?;
    let found = value
        .get("version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>")
        .to_string();
    if found != MANIFEST_VERSION {
        return Err(Error::SchemaVersion {
            expected: MANIFEST_VERSION.into(),
            found,
        });
    }
    serde_json::from_value(value).map_err(|e| parse_error(path, 0, e))
}

/// Loads the clouds of a step record.
pub fn load_step(root: &Path, record: &StepRecord) -> Result<AssemblyStep> {
    Ok(AssemblyStep {
        index: record.step_index,
        part_id: record.part_id,
        fixed_cloud: read_point_cloud(&root.join(&record.fixed_cloud))?,
        moving_cloud: read_point_cloud(&root.join(&record.moving_cloud))?,
        target_pose: record.target_pose,
    })
}

/// Token/vector/pose agreement of one step record.
pub fn check_step_codec(record: &StepRecord) -> Result<()> {
    let fail = |m: String| Err(Error::Validation(format!("step {}: {m}", record.id)));
    let expected = pose_to_vector(&record.target_pose, record.translation_scale)?;
    if expected
        .vector
        .0
        .iter()
        .zip(&record.pose_vector)
        .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return fail("pose vector disagrees with the target pose".into());
    }
    if tokenize(&PoseVector9(record.pose_vector)) != record.tokens {
        return fail("tokens disagree with the pose vector".into());
    }
    if record.token_text != record.tokens.to_string() {
        return fail("token text disagrees with the tokens".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationSummary {
    pub assets: usize,
    pub steps: usize,
    pub files: usize,
}

/// Checks every reference of a manifest and the codec consistency of every
/// step. Point-cloud files must re-encode to identical bytes.
pub fn validate_manifest(manifest: &Manifest, root: &Path) -> Result<ValidationSummary> {
    use std::collections::BTreeSet;
    let mut files = 0;
    let check_cloud = |rel: &str, expected: Option<usize>| -> Result<()> {
        let path = root.join(rel);
        let bytes = fs::read(&path).map_err(|_| Error::Validation(format!("dangling reference {rel}")))?;
        let cloud = decode_point_cloud(&bytes, &path)?;
        if encode_point_cloud(&cloud) != bytes {
            return Err(Error::Validation(format!("{rel} does not round-trip")));
        }
        if let Some(n) = expected {
            if cloud.len() != n {
                return Err(Error::Validation(format!("{rel} has {} points, expected {n}", cloud.len())));
            }
        }
        Ok(())
    };
    let mut ids = BTreeSet::new();
    for a in &manifest.assets {
        if !ids.insert(a.id.as_str()) {
            return Err(Error::Validation(format!("duplicate asset id {}", a.id)));
        }
        if a.parts.len() != a.part_clouds.len() {
            return Err(Error::Validation(format!("asset {}: part/cloud count mismatch", a.id)));
        }
        for p in &a.parts {
            if !root.join(p).is_file() {
                return Err(Error::Validation(format!("dangling reference {p}")));
            }
            files += 1;
        }
        for c in &a.part_clouds {
            check_cloud(c, Some(manifest.config.points_coarse))?;
            files += 1;
        }
    }
    let mut step_ids = BTreeSet::new();
    for s in &manifest.steps {
        if !ids.contains(s.asset_id.as_str()) {
            return Err(Error::Validation(format!("step {} references unknown asset {}", s.id, s.asset_id)));
        }
        if s.id != StepRecord::step_id(&s.asset_id, s.step_index) || !step_ids.insert(s.id.as_str()) {
            return Err(Error::Validation(format!("bad or duplicate step id {}", s.id)));
        }
        check_cloud(&s.fixed_cloud, Some(manifest.config.points))?;
        check_cloud(&s.moving_cloud, Some(manifest.config.points))?;
        files += 2;
        check_step_codec(s)?;
    }
    let listing = root.join("steps.jsonl");
    if listing.is_file() {
        let listed: Vec<StepRecord> =
            read_jsonl(&listing).map_err(|e| Error::Validation(format!("steps.jsonl is unreadable: {e}")))?;
        for s in &listed {
            check_step_codec(s)?;
        }
        if listed != manifest.steps {
            return Err(Error::Validation("steps.jsonl disagrees with the manifest".into()));
        }
        files += 1;
    }
    for a in &manifest.assets {
        let n = manifest.steps.iter().filter(|s| s.asset_id == a.id).count();
        if n + 1 != a.parts.len() {
            return Err(Error::Validation(format!(
                "asset {} has {} parts but {n} steps",
                a.id,
                a.parts.len()
            )));
        }
    }
    Ok(ValidationSummary {
        assets: manifest.assets.len(),
        steps: manifest.steps.len(),
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// `ASMK1`, u32 LE header length, JSON header, then row-major f64 LE data.
pub fn encode_checkpoint(model: &PoseModel, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut tensors = Vec::new();
    for (name, t) in model.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.config(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + header.len() + 8 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.tensors() {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(PoseModel, serde_json::Value)> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m + 4 || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(bad("missing ASMK1 header".into()));
    }
    let hlen = u32::from_le_bytes(bytes[m..m + 4].try_into().expect("4 bytes")) as usize;
    let data_start = m + 4 + hlen;
    if bytes.len() < data_start {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[m + 4..data_start]).map_err(|e| bad(format!("header: {e}")))?;
    let data = &bytes[data_start..];
    if !data.len().is_multiple_of(8) {
        return Err(bad("data section is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = PoseModel::init(&header.model, 0)?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(bad(format!("expected {} tensors, found {}", names.len(), header.tensors.len())));
    }
    let mut used = 0;
    for ((t, name), entry) in model.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
        if *name != entry.name || t.shape != entry.shape {
            return Err(bad(format!("tensor {} {:?} does not match {name} {:?}", entry.name, entry.shape, t.shape)));
        }
        let n = t.len();
        let slice = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| bad(format!("tensor {name} out of range")))?;
        t.data.copy_from_slice(slice);
        used += n;
    }
    if used != values.len() {
        return Err(bad("trailing data after the last tensor".into()));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(path: &Path, model: &PoseModel, meta: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(PoseModel, serde_json::Value)> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// A prediction for one step in token, token-text, pose-vector or
/// explicit-transform form. Exactly one form must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub step_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PoseTokens>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_vector: Option<[f64; POSE_SLOTS]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<RigidTransform>,
}

impl PredictionRecord {
    pub fn from_pose(step_id: impl Into<String>, pose: RigidTransform) -> Self {
        Self {
            step_id: step_id.into(),
            tokens: None,
            text: None,
            pose_vector: None,
            pose: Some(pose),
        }
    }

    pub fn from_tokens(step_id: impl Into<String>, tokens: PoseTokens) -> Self {
        Self {
            step_id: step_id.into(),
            tokens: Some(tokens),
            text: None,
            pose_vector: None,
            pose: None,
        }
    }

    /// Decodes the prediction to a transform.
    pub fn resolve(&self, translation_scale: f64) -> Result<RigidTransform> {
        let forms = usize::from(self.tokens.is_some())
            + usize::from(self.text.is_some())
            + usize::from(self.pose_vector.is_some())
            + usize::from(self.pose.is_some());
        if forms != 1 {
            return Err(Error::Validation(format!(
                "prediction {} must carry exactly one pose form, found {forms}",
                self.step_id
            )));
        }
        if let Some(p) = self.pose {
            return Ok(p);
        }
        if let Some(v) = self.pose_vector {
            return vector_to_pose(&PoseVector9(v), translation_scale);
        }
        let tokens = match (&self.tokens, &self.text) {
            (Some(t), _) => *t,
            (None, Some(s)) => s.parse::<PoseTokens>()?,
            _ => unreachable!("form count checked above"),
        };
        crate::codec::detokenize(&tokens, translation_scale)
    }
}
