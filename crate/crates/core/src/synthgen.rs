//! Synthetic scenes and feature maps with a known linear decoder.
//!
//! Each pseudo-backbone renders the same scenes; only the feature noise
//! differs, so a lower noise level is a strictly better representation.
//!
//! Rendering: a fixed random matrix `Q` with orthonormal columns is split
//! into an object block `Q_obj` (C x d_obj) and an environment block
//! `Q_env` (C x d_env). With `t_i` the encoded local target of object `i`
//! and `t_env` the environment target, every cell of the fine feature grid
//! holds
//!
//! ```text
//! scale * (Q_env t_env + sum_{i : cell in box_i} Q_obj t_i)
//! ```
//!
//! mixed with white noise (see [`render_features`]).
//!
//! Boxes snap to the 7x7 probe grid and never overlap, so at zero noise
//! the closed-form inverse is exact:
//!
//! ```text
//! t_i   = Q_obj^T roi_pool_i / scale
//! t_env = Q_env^T global_pool / scale
//! ```
//!
//! (`Q_obj^T Q_env = 0` removes the cross terms.) All sampled state values
//! are rounded to f32 so datasets round-trip through the on-disk format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::{FeatureMap, PROBE_GRID};
use crate::probedata::{Frame, ProbeDataset};
use crate::statevec::{canonicalize_quaternion, quantize_shape, EnvState, ObjectState, StateSchema};

/// Box edge lengths are sampled log-uniformly in this range (meters).
pub const EXTENT_RANGE: (f64, f64) = (0.02, 0.2);
/// Joint angles are uniform in `[-JOINT_LIMIT, JOINT_LIMIT]`.
pub const JOINT_LIMIT: f64 = std::f64::consts::PI;
/// End-effector dims are uniform in `[-1, 1]`.
pub const EE_LIMIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub schema: StateSchema,
    pub num_frames: usize,
    pub channels: usize,
    /// `(width, height)` of the virtual source image.
    pub image_size: (u32, u32),
    /// Feature grid side is `7 * upsample`.
    pub upsample: usize,
    /// Feature amplitude; noise levels are relative to it.
    pub embed_scale: f64,
    pub visible_prob: f64,
    /// Largest box side, in probe-grid cells.
    pub max_box_cells: usize,
    /// Probe-grid cells two boxes may share.
    pub overlap_tolerance: usize,
    pub seed: u64,
    pub embedding_seed: u64,
}

impl GenConfig {
    /// Shape edges are uniform over [`EXTENT_RANGE`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_objects: usize,
        num_materials: usize,
        num_lighting: usize,
        shape_bins: usize,
        joint_dim: usize,
        ee_dim: usize,
        channels: usize,
        num_frames: usize,
        seed: u64,
    ) -> Result<Self> {
        let schema = StateSchema::uniform(
            num_objects,
            num_materials,
            num_lighting,
            shape_bins,
            joint_dim,
            ee_dim,
            EXTENT_RANGE.0,
            EXTENT_RANGE.1,
        )?;
        let cfg = GenConfig {
            schema,
            num_frames,
            channels,
            image_size: (224, 224),
            upsample: 2,
            embed_scale: 8.0,
            visible_prob: 0.9,
            max_box_cells: 2,
            overlap_tolerance: 0,
            seed,
            embedding_seed: seed ^ 0x5eed_e111_bedd_1e55,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two objects, 3 materials, 3 lighting presets, 4 shape bins, a 7-joint
    /// arm with a 6-dim end-effector pose, 64 channels.
    pub fn small(num_frames: usize, seed: u64) -> Self {
        Self::new(2, 3, 3, 4, 7, 6, 64, num_frames, seed).expect("preset is valid")
    }

    /// Local target widths `(d_obj, d_env)`.
    pub fn local_dims(&self) -> (usize, usize) {
        (self.schema.object_head_dim(), self.schema.env_head_dim())
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let (d_obj, d_env) = self.local_dims();
        if self.channels < d_obj + d_env {
            return Err(Error::InvalidInput(format!(
                "{} channels cannot embed {d_obj} object + {d_env} env target dims",
                self.channels
            )));
        }
        if self.num_frames == 0 || self.upsample == 0 || self.max_box_cells == 0 || self.max_box_cells > PROBE_GRID {
            return Err(Error::InvalidInput(
                "num_frames, upsample, max_box_cells must be positive (boxes <= 7 cells)".into(),
            ));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if !(self.embed_scale > 0.0 && self.embed_scale.is_finite()) {
            return Err(Error::InvalidInput(format!("embed_scale must be positive, got {}", self.embed_scale)));
        }
        if !(0.0..=1.0).contains(&self.visible_prob) {
            return Err(Error::InvalidInput(format!("visible_prob must be in [0, 1], got {}", self.visible_prob)));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        PROBE_GRID * self.upsample
    }
}

/// One sampled scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<ObjectState>,
    pub env: EnvState,
    /// Pixel boxes; all zeros for invisible objects.
    pub bboxes: Vec<[f64; 4]>,
    /// Probe-grid cell rectangles `(x0, y0, w, h)` of visible objects.
    pub cells: Vec<Option<(usize, usize, usize, usize)>>,
}

fn r32(x: f64) -> f64 {
    x as f32 as f64
}

/// Splitmix64 finalizer over `(base, a, b)`; independent per-frame streams.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> usize {
    let w = (a.0 + a.2).min(b.0 + b.2).saturating_sub(a.0.max(b.0));
    let h = (a.1 + a.3).min(b.1 + b.3).saturating_sub(a.1.max(b.1));
    w * h
}

/// Samples a scene: positions uniform in the unit cube, quaternions uniform
/// on the sphere then canonicalized, extents log-uniform over
/// [`EXTENT_RANGE`], classes uniform, boxes snapped to the probe grid.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    let schema = &cfg.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ln_lo, ln_hi) = (EXTENT_RANGE.0.ln(), EXTENT_RANGE.1.ln());
    let mut objects = Vec::with_capacity(schema.num_objects);
    let mut bboxes = Vec::with_capacity(schema.num_objects);
    let mut cells: Vec<Option<(usize, usize, usize, usize)>> = Vec::with_capacity(schema.num_objects);
    let (iw, ih) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let g = PROBE_GRID as f64;

    for _ in 0..schema.num_objects {
        let position = [(); 3].map(|_| r32(rng.gen::<f64>()));
        let q = [(); 4].map(|_| rng.sample::<f64, _>(StandardNormal));
        let orientation = canonicalize_quaternion(q)?.map(r32);
        let extent = [(); 3].map(|_| r32(rng.gen_range(ln_lo..ln_hi).exp()).clamp(EXTENT_RANGE.0, EXTENT_RANGE.1));
        let material = rng.gen_range(0..schema.num_materials);
        let visible = rng.gen::<f64>() < cfg.visible_prob;
        objects.push(ObjectState { position, orientation, extent, material, visible });
        if !visible {
            bboxes.push([0.0; 4]);
            cells.push(None);
            continue;
        }
        let mut placed = None;
        for _ in 0..1000 {
            let w = rng.gen_range(1..=cfg.max_box_cells);
            let h = rng.gen_range(1..=cfg.max_box_cells);
            let cand = (rng.gen_range(0..=PROBE_GRID - w), rng.gen_range(0..=PROBE_GRID - h), w, h);
            if cells.iter().flatten().all(|c| overlap(*c, cand) <= cfg.overlap_tolerance) {
                placed = Some(cand);
                break;
            }
        }
        let Some((x0, y0, w, h)) = placed else {
            return Err(Error::Validation(format!(
                "could not place {} boxes with overlap <= {} cells",
                schema.num_objects, cfg.overlap_tolerance
            )));
        };
        bboxes.push([
            r32(x0 as f64 * iw / g),
            r32(y0 as f64 * ih / g),
            r32((x0 + w) as f64 * iw / g),
            r32((y0 + h) as f64 * ih / g),
        ]);
        cells.push(Some((x0, y0, w, h)));
    }

    let env = EnvState {
        lighting: rng.gen_range(0..schema.num_lighting),
        joints: (0..schema.joint_dim).map(|_| r32(rng.gen_range(-JOINT_LIMIT..JOINT_LIMIT))).collect(),
        ee_pose: (0..schema.ee_dim).map(|_| r32(rng.gen_range(-EE_LIMIT..EE_LIMIT))).collect(),
    };
    Ok(Scene { objects, env, bboxes, cells })
}

/// Population statistics of the sampling distributions, used to put every
/// local target dim on a unit scale.
mod dist {
    use std::f64::consts::PI;

    pub const POS_MEAN: f64 = 0.5;
    pub fn pos_std() -> f64 {
        (1.0f64 / 12.0).sqrt()
    }
    /// `E[|w|]` for a uniform unit quaternion.
    pub fn quat_w_mean() -> f64 {
        4.0 / (3.0 * PI)
    }
    pub fn quat_w_std() -> f64 {
        (0.25 - quat_w_mean().powi(2)).sqrt()
    }
    pub const QUAT_XYZ_STD: f64 = 0.5;
    pub fn joint_std() -> f64 {
        super::JOINT_LIMIT / 3f64.sqrt()
    }
    pub fn ee_std() -> f64 {
        super::EE_LIMIT / 3f64.sqrt()
    }
}

/// Fixed orthonormal embedding of local targets into feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub channels: usize,
    pub scale: f64,
    /// Object block columns, each of length `channels`.
    pub object_cols: Vec<Vec<f64>>,
    pub env_cols: Vec<Vec<f64>>,
}

impl Embedding {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let (d_obj, d_env) = cfg.local_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embedding_seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_obj + d_env);
        while cols.len() < d_obj + d_env {
            let mut v: Vec<f64> = (0..cfg.channels).map(|_| rng.sample(StandardNormal)).collect();
            // two Gram-Schmidt passes
            for _ in 0..2 {
                for c in &cols {
                    let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                cols.push(v);
            }
        }
        let env_cols = cols.split_off(d_obj);
        Ok(Embedding { channels: cfg.channels, scale: cfg.embed_scale, object_cols: cols, env_cols })
    }

    /// Local object target: unit-scaled pose, then material and shape-bin
    /// one-hots.
    pub fn object_target(obj: &ObjectState, schema: &StateSchema) -> Vec<f64> {
        let mut t = Vec::with_capacity(schema.object_head_dim());
        t.extend(obj.position.iter().map(|p| (p - dist::POS_MEAN) / dist::pos_std()));
        t.push((obj.orientation[0] - dist::quat_w_mean()) / dist::quat_w_std());
        t.extend(obj.orientation[1..].iter().map(|q| q / dist::QUAT_XYZ_STD));
        t.extend((0..schema.num_materials).map(|k| (k == obj.material) as u8 as f64));
        for b in quantize_shape(obj.extent, schema) {
            t.extend((0..schema.shape_bins).map(|k| (k == b) as u8 as f64));
        }
        t
    }

    pub fn env_target(env: &EnvState, schema: &StateSchema) -> Vec<f64> {
        let mut t = Vec::with_capacity(schema.env_head_dim());
        t.extend(env.joints.iter().map(|j| j / dist::joint_std()));
        t.extend(env.ee_pose.iter().map(|e| e / dist::ee_std()));
        t.extend((0..schema.num_lighting).map(|k| (k == env.lighting) as u8 as f64));
        t
    }

    fn embed(cols: &[Vec<f64>], t: &[f64], scale: f64, channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; channels];
        for (c, v) in cols.iter().zip(t) {
            out.iter_mut().zip(c).for_each(|(o, x)| *o += scale * v * x);
        }
        out
    }

    fn project(cols: &[Vec<f64>], u: &[f64], scale: f64) -> Vec<f64> {
        cols.iter().map(|c| c.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / scale).collect()
    }

    pub fn embed_object(&self, t: &[f64]) -> Vec<f64> {
        Self::embed(&self.object_cols, t, self.scale, self.channels)
    }

    pub fn embed_env(&self, t: &[f64]) -> Vec<f64> {
        Self::embed(&self.env_cols, t, self.scale, self.channels)
    }

    /// Recovers an object's local target from its RoI-pooled vector.
    pub fn decode_object(&self, pooled: &[f64]) -> Vec<f64> {
        Self::project(&self.object_cols, pooled, self.scale)
    }

    /// Recovers the environment target from the global-pooled vector.
    pub fn decode_env(&self, pooled: &[f64]) -> Vec<f64> {
        Self::project(&self.env_cols, pooled, self.scale)
    }
}

/// Renders a frame. With `n = noise_level`, the clean features are scaled
/// by `1 / sqrt(1 + n^2)` and white noise of stddev
/// `embed_scale * n / sqrt(1 + n^2)` is added, so `n` is the noise-to-signal
/// amplitude ratio. `f64::INFINITY` renders pure noise of stddev
/// `embed_scale`.
pub fn render_features(
    scene: &Scene,
    cfg: &GenConfig,
    embedding: &Embedding,
    noise_level: f64,
    noise_seed: u64,
) -> Result<Frame> {
    if !(noise_level >= 0.0) {
        return Err(Error::InvalidInput(format!("noise level must be >= 0, got {noise_level}")));
    }
    for (i, a) in scene.cells.iter().enumerate() {
        for b in scene.cells[..i].iter() {
            if let (Some(a), Some(b)) = (a, b) {
                if overlap(*a, *b) > cfg.overlap_tolerance {
                    return Err(Error::Validation(format!(
                        "boxes overlap by more than {} cells",
                        cfg.overlap_tolerance
                    )));
                }
            }
        }
    }
    let schema = &cfg.schema;
    let c = cfg.channels;
    let side = cfg.grid_side();
    let signal = noise_level.is_finite();
    let env_vec = embedding.embed_env(&Embedding::env_target(&scene.env, schema));
    let obj_vecs: Vec<Option<Vec<f64>>> = scene
        .objects
        .iter()
        .zip(&scene.cells)
        .map(|(o, cell)| cell.map(|_| embedding.embed_object(&Embedding::object_target(o, schema))))
        .collect();

    let mut cell_vecs: Vec<Vec<f64>> = Vec::with_capacity(PROBE_GRID * PROBE_GRID);
    for gy in 0..PROBE_GRID {
        for gx in 0..PROBE_GRID {
            let mut v = env_vec.clone();
            for (cell, ov) in scene.cells.iter().zip(&obj_vecs) {
                if let (Some((x0, y0, w, h)), Some(ov)) = (cell, ov) {
                    if (*x0..x0 + w).contains(&gx) && (*y0..y0 + h).contains(&gy) {
                        v.iter_mut().zip(ov).for_each(|(a, b)| *a += b);
                    }
                }
            }
            cell_vecs.push(v);
        }
    }

    // total per-cell power stays bounded as noise grows
    let (gain, noise_std) = if signal {
        let norm = (1.0 + noise_level * noise_level).sqrt();
        (1.0 / norm, noise_level * cfg.embed_scale / norm)
    } else {
        (0.0, cfg.embed_scale)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = vec![0f32; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                let mut v = gain * cell_vecs[(y / cfg.upsample) * PROBE_GRID + x / cfg.upsample][ch];
                if noise_std > 0.0 {
                    v += noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                data[(ch * side + y) * side + x] = v as f32;
            }
        }
    }
    Ok(Frame {
        features: FeatureMap::new(c, side, side, data)?,
        bboxes: scene.bboxes.clone(),
        image_size: cfg.image_size,
        objects: scene.objects.clone(),
        env: scene.env.clone(),
    })
}

pub fn generate_scenes(cfg: &GenConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.num_frames).into_par_iter().map(|k| generate_scene(derive_seed(cfg.seed, 0, k as u64), cfg)).collect()
}

pub fn level_name(noise_level: f64) -> String {
    format!("noise_{noise_level}")
}

fn render_dataset(
    scenes: &[Scene],
    cfg: &GenConfig,
    embedding: &Embedding,
    noise_level: f64,
    level_index: usize,
) -> Result<ProbeDataset> {
    let frames = scenes
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            render_features(s, cfg, embedding, noise_level, derive_seed(cfg.seed, 1 + level_index as u64, k as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeDataset {
        name: level_name(noise_level),
        backbone: format!("synthetic(noise={noise_level})"),
        schema: cfg.schema.clone(),
        split_seed: cfg.seed,
        frames,
    })
}

/// One dataset at a single noise level.
pub fn generate_dataset(cfg: &GenConfig, noise_level: f64) -> Result<ProbeDataset> {
    let scenes = generate_scenes(cfg)?;
    render_dataset(&scenes, cfg, &Embedding::new(cfg)?, noise_level, 0)
}

/// One dataset per noise level over identical scenes. Levels must be
/// non-negative and strictly ascending (`f64::INFINITY` allowed last).
pub fn generate_model_family(cfg: &GenConfig, noise_levels: &[f64]) -> Result<Vec<ProbeDataset>> {
    if noise_levels.is_empty() {
        return Err(Error::InvalidInput("empty noise level list".into()));
    }
    if noise_levels.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput(format!("noise levels must be >= 0: {noise_levels:?}")));
    }
    if noise_levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(format!("noise levels must be strictly ascending: {noise_levels:?}")));
    }
    let scenes = generate_scenes(cfg)?;
    let embedding = Embedding::new(cfg)?;
    noise_levels.iter().enumerate().map(|(k, level)| render_dataset(&scenes, cfg, &embedding, *level, k)).collect()
}

/// Ground-truth quality of a noise level, in `[0, 1]`: `1 / (1 + noise)`.
pub fn quality(noise_level: f64) -> f64 {
    1.0 / (1.0 + noise_level)
}
