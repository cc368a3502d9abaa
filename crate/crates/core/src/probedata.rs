//! On-disk probe datasets: feature maps, boxes, visibility and raw state
//! labels for one backbone.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/features/000000.bin   rank-3 blob, C x H x W
//! <dir>/labels/000000.bin     rank-1 blob, one label record
//! ```
//!
//! A label record is a flat f32 vector:
//!
//! ```text
//! image_width, image_height,
//! per object slot (N_o times):
//!     visible (0 | 1), x1, y1, x2, y2,
//!     px, py, pz, qw, qx, qy, qz, sx, sy, sz, material
//! lighting, joints[N_j], ee[N_ee]
//! ```
//!
//! Boxes are pixel coordinates of the source image. All values are stored
//! as f32, so state and box values round-trip exactly when they are
//! f32-representable (everything produced by [`read_dataset`] or the
//! synthetic generator is).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::pooling::FeatureMap;
use crate::statevec::{EnvState, ObjectState, StateSchema};

pub const FORMAT_NAME: &str = "staterank-probedata";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Label-record fields per object slot.
pub const OBJECT_RECORD: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub features: FeatureMap,
    /// `[x1, y1, x2, y2]` per object slot, source-image pixels.
    pub bboxes: Vec<[f64; 4]>,
    /// `(width, height)` of the source image.
    pub image_size: (u32, u32),
    pub objects: Vec<ObjectState>,
    pub env: EnvState,
}

impl Frame {
    pub fn visibility(&self) -> Vec<bool> {
        self.objects.iter().map(|o| o.visible).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub name: String,
    pub backbone: String,
    pub schema: StateSchema,
    pub split_seed: u64,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub backbone: String,
    pub dtype: String,
    pub schema: StateSchema,
    /// `[C, H, W]`.
    pub feature_shape: [usize; 3],
    pub label_len: usize,
    pub frame_count: usize,
    pub split_seed: u64,
    /// Frame ids; blob file stems under `features/` and `labels/`.
    pub frames: Vec<String>,
}

pub fn label_len(schema: &StateSchema) -> usize {
    2 + schema.num_objects * OBJECT_RECORD + 1 + schema.joint_dim + schema.ee_dim
}

fn frame_id(k: usize) -> String {
    format!("{k:06}")
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_shape(&self) -> Option<[usize; 3]> {
        self.frames.first().map(|f| f.features.shape())
    }

    /// Copies the frames at `indices` (in the given order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> ProbeDataset {
        ProbeDataset {
            name: self.name.clone(),
            backbone: self.backbone.clone(),
            schema: self.schema.clone(),
            split_seed: self.split_seed,
            frames: indices.iter().map(|i| self.frames[*i].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let Some(shape) = self.feature_shape() else {
            return Err(Error::Validation(format!("dataset `{}` has no frames", self.name)));
        };
        for (k, frame) in self.frames.iter().enumerate() {
            validate_frame(frame, &self.schema, shape).map_err(|msg| Error::Validation(format!("frame {k}: {msg}")))?;
        }
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            name: self.name.clone(),
            backbone: self.backbone.clone(),
            dtype: DTYPE.to_string(),
            schema: self.schema.clone(),
            feature_shape: self.feature_shape().unwrap_or([0; 3]),
            label_len: label_len(&self.schema),
            frame_count: self.frames.len(),
            split_seed: self.split_seed,
            frames: (0..self.frames.len()).map(frame_id).collect(),
        }
    }
}

fn validate_frame(frame: &Frame, schema: &StateSchema, shape: [usize; 3]) -> std::result::Result<(), String> {
    if frame.features.shape() != shape {
        return Err(format!("feature shape {:?} differs from {:?}", frame.features.shape(), shape));
    }
    if !frame.features.is_finite() {
        return Err("feature map contains NaN or Inf".into());
    }
    let (w, h) = frame.image_size;
    if w == 0 || h == 0 {
        return Err(format!("empty image size {w}x{h}"));
    }
    if frame.objects.len() != schema.num_objects || frame.bboxes.len() != schema.num_objects {
        return Err(format!(
            "{} objects / {} boxes, schema expects {}",
            frame.objects.len(),
            frame.bboxes.len(),
            schema.num_objects
        ));
    }
    frame.env.check(schema).map_err(|e| e.to_string())?;
    if !frame.env.joints.iter().chain(&frame.env.ee_pose).all(|v| v.is_finite()) {
        return Err("non-finite environment state".into());
    }
    for (i, (obj, b)) in frame.objects.iter().zip(&frame.bboxes).enumerate() {
        if obj.material >= schema.num_materials {
            return Err(format!("object {i}: material {} out of range", obj.material));
        }
        let finite = obj.position.iter().chain(&obj.orientation).chain(&obj.extent).chain(b).all(|v| v.is_finite());
        if !finite {
            return Err(format!("object {i}: non-finite state or box"));
        }
        if !obj.visible {
            continue;
        }
        if obj.extent.iter().any(|e| *e <= 0.0) {
            return Err(format!("object {i}: non-positive extent {:?}", obj.extent));
        }
        let [x1, y1, x2, y2] = *b;
        if !(0.0 <= x1 && x1 < x2 && x2 <= w as f64 && 0.0 <= y1 && y1 < y2 && y2 <= h as f64) {
            return Err(format!("object {i}: visible box {b:?} outside image {w}x{h}"));
        }
    }
    Ok(())
}

fn encode_label(frame: &Frame, schema: &StateSchema) -> Vec<f32> {
    let mut out = Vec::with_capacity(label_len(schema));
    out.push(frame.image_size.0 as f32);
    out.push(frame.image_size.1 as f32);
    for (obj, b) in frame.objects.iter().zip(&frame.bboxes) {
        out.push(if obj.visible { 1.0 } else { 0.0 });
        out.extend(b.iter().map(|v| *v as f32));
        out.extend(obj.position.iter().map(|v| *v as f32));
        out.extend(obj.orientation.iter().map(|v| *v as f32));
        out.extend(obj.extent.iter().map(|v| *v as f32));
        out.push(obj.material as f32);
    }
    out.push(frame.env.lighting as f32);
    out.extend(frame.env.joints.iter().map(|v| *v as f32));
    out.extend(frame.env.ee_pose.iter().map(|v| *v as f32));
    out
}

fn as_index(v: f32, what: &str, path: &Path) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::format(path, format!("{what} {v} is not a non-negative integer")))
    }
}

fn decode_label(rec: &[f32], schema: &StateSchema, features: FeatureMap, path: &Path) -> Result<Frame> {
    let d = |k: usize| rec[k] as f64;
    let image_size = (as_index(rec[0], "image width", path)? as u32, as_index(rec[1], "image height", path)? as u32);
    let mut objects = Vec::with_capacity(schema.num_objects);
    let mut bboxes = Vec::with_capacity(schema.num_objects);
    for i in 0..schema.num_objects {
        let o = 2 + i * OBJECT_RECORD;
        let visible = match rec[o] {
            0.0 => false,
            1.0 => true,
            v => return Err(Error::format(path, format!("object {i}: visibility flag {v} is not 0 or 1"))),
        };
        bboxes.push([d(o + 1), d(o + 2), d(o + 3), d(o + 4)]);
        objects.push(ObjectState {
            position: [d(o + 5), d(o + 6), d(o + 7)],
            orientation: [d(o + 8), d(o + 9), d(o + 10), d(o + 11)],
            extent: [d(o + 12), d(o + 13), d(o + 14)],
            material: as_index(rec[o + 15], "material", path)?,
            visible,
        });
    }
    let e = 2 + schema.num_objects * OBJECT_RECORD;
    let env = EnvState {
        lighting: as_index(rec[e], "lighting", path)?,
        joints: rec[e + 1..e + 1 + schema.joint_dim].iter().map(|v| *v as f64).collect(),
        ee_pose: rec[e + 1 + schema.joint_dim..].iter().map(|v| *v as f64).collect(),
    };
    Ok(Frame { features, bboxes, image_size, objects, env })
}

/// Writes `dataset` under `dir` (created if needed). The dataset is
/// validated first; nothing is written for an invalid dataset.
pub fn write_dataset(dataset: &ProbeDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let features_dir = dir.join("features");
    let labels_dir = dir.join("labels");
    for d in [dir, &features_dir, &labels_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest = dataset.manifest();
    for (id, frame) in manifest.frames.iter().zip(&dataset.frames) {
        blob::write(&features_dir.join(format!("{id}.bin")), &frame.features.shape(), &frame.features.data)?;
        let label = encode_label(frame, &dataset.schema);
        blob::write(&labels_dir.join(format!("{id}.bin")), &[label.len()], &label)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    // version gate before the full parse so newer layouts get a clear error
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::UnsupportedVersion { path, version: v }),
        None => return Err(Error::format(&path, "missing format version")),
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::format(&path, format!("unknown format `{}`", manifest.format)));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::format(&path, format!("unsupported dtype `{}`", manifest.dtype)));
    }
    if manifest.frames.len() != manifest.frame_count {
        return Err(Error::format(
            &path,
            format!("frame_count {} but {} frames listed", manifest.frame_count, manifest.frames.len()),
        ));
    }
    manifest.schema.validate()?;
    if manifest.label_len != label_len(&manifest.schema) {
        return Err(Error::format(&path, format!("label_len {} inconsistent with schema", manifest.label_len)));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<ProbeDataset> {
    let manifest = read_manifest(dir)?;
    let [c, h, w] = manifest.feature_shape;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for id in &manifest.frames {
        let fpath: PathBuf = dir.join("features").join(format!("{id}.bin"));
        let (dims, data) = blob::read(&fpath)?;
        if dims != [c, h, w] {
            return Err(Error::format(
                &fpath,
                format!("shape {dims:?} does not match manifest {:?}", manifest.feature_shape),
            ));
        }
        let features = FeatureMap::new(c, h, w, data).map_err(|e| Error::format(&fpath, e.to_string()))?;
        let lpath = dir.join("labels").join(format!("{id}.bin"));
        let (ldims, rec) = blob::read(&lpath)?;
        if ldims != [manifest.label_len] {
            return Err(Error::format(&lpath, format!("label shape {ldims:?}, expected [{}]", manifest.label_len)));
        }
        frames.push(decode_label(&rec, &manifest.schema, features, &lpath)?);
    }
    let dataset = ProbeDataset {
        name: manifest.name,
        backbone: manifest.backbone,
        schema: manifest.schema,
        split_seed: manifest.split_seed,
        frames,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Deterministic disjoint train/val index split. Validation size is
/// `round(val_fraction * n)`, at least 1 and at most `n - 1`. Both lists
/// are ascending.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 frames to split, got {n}")));
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split(dataset: &ProbeDataset, val_fraction: f64, seed: u64) -> Result<(ProbeDataset, ProbeDataset)> {
    let (train, val) = split_indices(dataset.len(), val_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}
