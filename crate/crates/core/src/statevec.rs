//! Unified state representation and its encoding into probe targets.
//!
//! A scene is `N_o` object-level vectors plus one environment-level vector:
//!
//! ```text
//! s_obj_i = [p_pose(3), q_pose(4), s_shape(3), m_mat(M one-hot)]
//! s_env   = [lighting(1), q_J(N_j), p_ee(N_ee)]
//! D       = N_o * (3 + 4 + 3 + M) + (1 + N_j + N_ee)
//! ```
//!
//! For training, positions, quaternions, joints and end-effector dims are
//! standardized with training-set statistics and regressed; material,
//! lighting and the three quantized box edges are class indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous dims carried per object: position (3) + quaternion (4).
pub const OBJECT_CONTINUOUS: usize = 7;

/// Default number of bins per box edge.
pub const DEFAULT_SHAPE_BINS: usize = 16;

/// State groups scored by the proxy, in reporting order.
pub const STATE_GROUPS: [&str; 7] = ["p_pose", "q_pose", "s_shape", "m_mat", "q_j", "p_ee", "l"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSchema {
    pub num_objects: usize,
    pub num_materials: usize,
    pub num_lighting: usize,
    pub shape_bins: usize,
    pub joint_dim: usize,
    pub ee_dim: usize,
    /// Bin edges (meters) for each of the three box edges; `shape_bins + 1`
    /// strictly increasing entries each.
    pub shape_bin_edges: [Vec<f64>; 3],
}

impl StateSchema {
    /// Builds a schema with uniform bin edges over `[lo, hi]` for every box edge.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        num_objects: usize,
        num_materials: usize,
        num_lighting: usize,
        shape_bins: usize,
        joint_dim: usize,
        ee_dim: usize,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        let edges = uniform_edges(lo, hi, shape_bins)?;
        let schema = StateSchema {
            num_objects,
            num_materials,
            num_lighting,
            shape_bins,
            joint_dim,
            ee_dim,
            shape_bin_edges: [edges.clone(), edges.clone(), edges],
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchema(msg));
        if self.num_materials < 2 {
            return bad(format!("num_materials must be >= 2, got {}", self.num_materials));
        }
        if self.num_lighting < 2 {
            return bad(format!("num_lighting must be >= 2, got {}", self.num_lighting));
        }
        if self.shape_bins < 2 {
            return bad(format!("shape_bins must be >= 2, got {}", self.shape_bins));
        }
        if self.joint_dim < 1 || self.ee_dim < 1 {
            return bad(format!("joint_dim and ee_dim must be >= 1, got {} and {}", self.joint_dim, self.ee_dim));
        }
        for (axis, edges) in self.shape_bin_edges.iter().enumerate() {
            if edges.len() != self.shape_bins + 1 {
                return bad(format!(
                    "shape edge {axis}: expected {} bin edges, got {}",
                    self.shape_bins + 1,
                    edges.len()
                ));
            }
            if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("shape edge {axis}: bin edges must be finite and strictly increasing"));
            }
        }
        Ok(())
    }

    /// Length of the flat state vector `s`.
    pub fn state_dim(&self) -> usize {
        self.num_objects * (3 + 4 + 3 + self.num_materials) + (1 + self.joint_dim + self.ee_dim)
    }

    /// Length of the continuous target block.
    pub fn continuous_dim(&self) -> usize {
        self.num_objects * OBJECT_CONTINUOUS + self.env_continuous_dim()
    }

    pub fn env_continuous_dim(&self) -> usize {
        self.joint_dim + self.ee_dim
    }

    /// Outputs of the per-object head: 7 regressed dims, material logits,
    /// then three blocks of shape-bin logits.
    pub fn object_head_dim(&self) -> usize {
        OBJECT_CONTINUOUS + self.num_materials + 3 * self.shape_bins
    }

    /// Outputs of the environment head: joints, end-effector, lighting logits.
    pub fn env_head_dim(&self) -> usize {
        self.env_continuous_dim() + self.num_lighting
    }

    /// Length of a target vector with every categorical expanded to one-hot.
    pub fn target_dim(&self) -> usize {
        self.num_objects * self.object_head_dim() + self.env_head_dim()
    }
}

/// `bins + 1` evenly spaced edges spanning `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidSchema(format!("need at least 2 bins, got {bins}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidSchema(format!("bad bin range [{lo}, {hi}]")));
    }
    let width = hi - lo;
    let mut edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64 / bins as f64).collect();
    edges[bins] = hi;
    Ok(edges)
}

/// Uniform bin edges per box edge over the training-set min/max extents.
pub fn fit_shape_edges<'a, I>(objects: I, bins: usize) -> Result<[Vec<f64>; 3]>
where
    I: IntoIterator<Item = &'a ObjectState>,
{
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut seen = false;
    for obj in objects.into_iter().filter(|o| o.visible) {
        seen = true;
        for a in 0..3 {
            lo[a] = lo[a].min(obj.extent[a]);
            hi[a] = hi[a].max(obj.extent[a]);
        }
    }
    if !seen {
        return Err(Error::InvalidInput("no visible objects to fit shape bins".into()));
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for a in 0..3 {
        let (l, mut h) = (lo[a], hi[a]);
        if h <= l {
            h = l + l.abs().max(1.0) * 1e-3;
        }
        out[a] = uniform_edges(l, h, bins)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    /// Meters.
    pub position: [f64; 3],
    /// Unit quaternion, (w, x, y, z).
    pub orientation: [f64; 4],
    /// Box edge lengths in meters.
    pub extent: [f64; 3],
    pub material: usize,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub lighting: usize,
    /// Radians.
    pub joints: Vec<f64>,
    pub ee_pose: Vec<f64>,
}

impl EnvState {
    pub fn check(&self, schema: &StateSchema) -> Result<()> {
        if self.joints.len() != schema.joint_dim || self.ee_pose.len() != schema.ee_dim {
            return Err(Error::SchemaMismatch(format!(
                "env state has {} joints / {} ee dims, schema expects {} / {}",
                self.joints.len(),
                self.ee_pose.len(),
                schema.joint_dim,
                schema.ee_dim
            )));
        }
        if self.lighting >= schema.num_lighting {
            return Err(Error::SchemaMismatch(format!(
                "lighting index {} out of range [0, {})",
                self.lighting, schema.num_lighting
            )));
        }
        Ok(())
    }
}

/// Flattens a scene into the raw state vector `s` (material one-hot,
/// lighting as its class index).
pub fn flatten_state(objects: &[ObjectState], env: &EnvState, schema: &StateSchema) -> Result<Vec<f64>> {
    check_scene(objects, env, schema)?;
    let mut out = Vec::with_capacity(schema.state_dim());
    for obj in objects {
        out.extend_from_slice(&obj.position);
        out.extend_from_slice(&obj.orientation);
        out.extend_from_slice(&obj.extent);
        out.extend((0..schema.num_materials).map(|k| if k == obj.material { 1.0 } else { 0.0 }));
    }
    out.push(env.lighting as f64);
    out.extend_from_slice(&env.joints);
    out.extend_from_slice(&env.ee_pose);
    Ok(out)
}

fn check_scene(objects: &[ObjectState], env: &EnvState, schema: &StateSchema) -> Result<()> {
    if objects.len() != schema.num_objects {
        return Err(Error::SchemaMismatch(format!(
            "scene has {} objects, schema expects {}",
            objects.len(),
            schema.num_objects
        )));
    }
    for (i, obj) in objects.iter().enumerate() {
        if obj.material >= schema.num_materials {
            return Err(Error::SchemaMismatch(format!(
                "object {i}: material index {} out of range [0, {})",
                obj.material, schema.num_materials
            )));
        }
    }
    env.check(schema)
}

/// Normalizes `q` to unit length and picks the representative with `w >= 0`.
/// When `w == 0` the first nonzero of `(x, y, z)` is made positive.
pub fn canonicalize_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-9) || !norm.is_finite() {
        return Err(Error::InvalidInput(format!("quaternion norm {norm} too small to normalize")));
    }
    // already-unit input is left untouched so the map is idempotent bitwise
    let mut out = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON { q } else { q.map(|v| v / norm) };
    let leading = out.iter().copied().find(|v| *v != 0.0).unwrap_or(0.0);
    if leading < 0.0 {
        out = out.map(|v| -v);
    }
    // -0.0 would break idempotent bitwise comparisons
    Ok(out.map(|v| if v == 0.0 { 0.0 } else { v }))
}

/// Maps each box edge to its bin; out-of-range values clamp to the first or
/// last bin.
pub fn quantize_shape(extent: [f64; 3], schema: &StateSchema) -> [usize; 3] {
    let last = schema.shape_bins - 1;
    let mut out = [0usize; 3];
    for a in 0..3 {
        let edges = &schema.shape_bin_edges[a];
        let above = edges.partition_point(|e| *e <= extent[a]);
        out[a] = above.saturating_sub(1).min(last);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mean: f64,
    pub std: f64,
    /// Zero variance (or no samples) in training; `std` is forced to 1.
    pub constant: bool,
}

/// Per-dimension standardization statistics for the continuous block.
///
/// Layout: for each object slot, position (3) then quaternion (4); then
/// joints, then end-effector dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub dims: Vec<DimStats>,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        self.dims.iter().enumerate().filter_map(|(i, d)| d.constant.then_some(i)).collect()
    }
}

/// Zero-variance threshold on the population standard deviation.
const CONSTANT_STD: f64 = 1e-12;

fn dim_stats(values: &[f64]) -> DimStats {
    if values.is_empty() {
        return DimStats { mean: 0.0, std: 1.0, constant: true };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= CONSTANT_STD * mean.abs().max(1.0) {
        DimStats { mean, std: 1.0, constant: true }
    } else {
        DimStats { mean, std, constant: false }
    }
}

/// Fits mean and population standard deviation per continuous dim.
///
/// The object head is shared across slots, so object dims are pooled over
/// every visible object in every slot and the same statistics are stored
/// for each slot. Quaternions are canonicalized first.
pub fn fit_normalization<'a, I>(train: I, schema: &StateSchema) -> Result<NormStats>
where
    I: IntoIterator<Item = (&'a [ObjectState], &'a EnvState)>,
{
    let mut object_cols: Vec<Vec<f64>> = vec![Vec::new(); OBJECT_CONTINUOUS];
    let mut env_cols: Vec<Vec<f64>> = vec![Vec::new(); schema.env_continuous_dim()];
    let mut frames = 0usize;
    for (objects, env) in train {
        check_scene(objects, env, schema)?;
        frames += 1;
        for obj in objects.iter().filter(|o| o.visible) {
            let q = canonicalize_quaternion(obj.orientation)?;
            for (col, v) in object_cols.iter_mut().zip(obj.position.iter().chain(&q)) {
                col.push(*v);
            }
        }
        for (col, v) in env_cols.iter_mut().zip(env.joints.iter().chain(&env.ee_pose)) {
            col.push(*v);
        }
    }
    if frames == 0 {
        return Err(Error::InvalidInput("cannot fit normalization on an empty training set".into()));
    }
    if frames < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 training frames to fit normalization, got {frames}")));
    }
    let object: Vec<DimStats> = object_cols.iter().map(|c| dim_stats(c)).collect();
    let mut dims = Vec::with_capacity(schema.continuous_dim());
    for _ in 0..schema.num_objects {
        dims.extend_from_slice(&object);
    }
    dims.extend(env_cols.iter().map(|c| dim_stats(c)));
    Ok(NormStats { dims })
}

/// `(x - mean) / std`.
pub fn standardize(x: f64, stats: &DimStats) -> Result<f64> {
    if !(stats.std > 0.0) {
        return Err(Error::InvalidInput(format!("non-positive standard deviation {}", stats.std)));
    }
    Ok((x - stats.mean) / stats.std)
}

/// Inverse of [`standardize`].
pub fn destandardize(z: f64, stats: &DimStats) -> f64 {
    z * stats.std + stats.mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    /// Standardized values; see [`NormStats`] for the layout.
    pub continuous: Vec<f64>,
    pub materials: Vec<usize>,
    pub shape_bins: Vec<[usize; 3]>,
    pub lighting: usize,
    /// Per-object visibility. Invisible objects keep their slots but are
    /// excluded from losses and scores.
    pub visible: Vec<bool>,
}

impl TargetVector {
    /// Per-dim mask over the continuous block.
    pub fn continuous_mask(&self) -> Vec<bool> {
        let mut mask: Vec<bool> =
            self.visible.iter().flat_map(|v| std::iter::repeat_n(*v, OBJECT_CONTINUOUS)).collect();
        mask.resize(self.continuous.len(), true);
        mask
    }

    /// Per-object continuous slice.
    pub fn object_continuous(&self, i: usize) -> &[f64] {
        &self.continuous[i * OBJECT_CONTINUOUS..(i + 1) * OBJECT_CONTINUOUS]
    }

    pub fn env_continuous(&self) -> &[f64] {
        &self.continuous[self.visible.len() * OBJECT_CONTINUOUS..]
    }

    /// Flattens in head-output order, categoricals expanded to one-hot:
    /// per object `[7 continuous, M, S, S, S]`, then `[N_j + N_ee, L]`.
    pub fn flatten(&self, schema: &StateSchema) -> Vec<f64> {
        let one_hot = |k: usize, n: usize| (0..n).map(move |c| if c == k { 1.0 } else { 0.0 });
        let mut out = Vec::with_capacity(schema.target_dim());
        for i in 0..self.visible.len() {
            out.extend_from_slice(self.object_continuous(i));
            out.extend(one_hot(self.materials[i], schema.num_materials));
            for a in 0..3 {
                out.extend(one_hot(self.shape_bins[i][a], schema.shape_bins));
            }
        }
        out.extend_from_slice(self.env_continuous());
        out.extend(one_hot(self.lighting, schema.num_lighting));
        out
    }

    /// Recovers `(materials, shape_bins, lighting)` from a [`flatten`]ed
    /// vector by per-block argmax.
    ///
    /// [`flatten`]: TargetVector::flatten
    pub fn categorical_from_flat(schema: &StateSchema, flat: &[f64]) -> Result<(Vec<usize>, Vec<[usize; 3]>, usize)> {
        if flat.len() != schema.target_dim() {
            return Err(Error::SchemaMismatch(format!(
                "flat target has length {}, schema expects {}",
                flat.len(),
                schema.target_dim()
            )));
        }
        let per_obj = schema.object_head_dim();
        let mut materials = Vec::with_capacity(schema.num_objects);
        let mut shapes = Vec::with_capacity(schema.num_objects);
        for i in 0..schema.num_objects {
            let obj = &flat[i * per_obj..(i + 1) * per_obj];
            let mut at = OBJECT_CONTINUOUS;
            materials.push(argmax(&obj[at..at + schema.num_materials]));
            at += schema.num_materials;
            let mut bins = [0usize; 3];
            for b in &mut bins {
                *b = argmax(&obj[at..at + schema.shape_bins]);
                at += schema.shape_bins;
            }
            shapes.push(bins);
        }
        let env = &flat[schema.num_objects * per_obj..];
        let lighting = argmax(&env[schema.env_continuous_dim()..]);
        Ok((materials, shapes, lighting))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Encodes one scene into probe targets.
pub fn encode_targets(
    objects: &[ObjectState],
    env: &EnvState,
    schema: &StateSchema,
    stats: &NormStats,
) -> Result<TargetVector> {
    check_scene(objects, env, schema)?;
    if stats.len() != schema.continuous_dim() {
        return Err(Error::SchemaMismatch(format!(
            "normalization stats cover {} dims, schema has {}",
            stats.len(),
            schema.continuous_dim()
        )));
    }
    let mut continuous = Vec::with_capacity(schema.continuous_dim());
    let mut materials = Vec::with_capacity(objects.len());
    let mut shape_bins = Vec::with_capacity(objects.len());
    let mut visible = Vec::with_capacity(objects.len());
    for obj in objects {
        // invisible objects may carry placeholder orientations
        let q = canonicalize_quaternion(obj.orientation).unwrap_or([1.0, 0.0, 0.0, 0.0]);
        for v in obj.position.iter().chain(q.iter()) {
            let k = continuous.len();
            continuous.push(standardize(*v, &stats.dims[k])?);
        }
        materials.push(obj.material);
        shape_bins.push(quantize_shape(obj.extent, schema));
        visible.push(obj.visible);
    }
    for v in env.joints.iter().chain(env.ee_pose.iter()) {
        let k = continuous.len();
        continuous.push(standardize(*v, &stats.dims[k])?);
    }
    Ok(TargetVector { continuous, materials, shape_bins, lighting: env.lighting, visible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema(n_obj: usize) -> StateSchema {
        StateSchema::uniform(n_obj, 3, 2, 4, 2, 1, 0.0, 1.0).unwrap()
    }

    fn obj(x: f64, visible: bool) -> ObjectState {
        ObjectState {
            position: [x, 0.0, 0.0],
            orientation: [1.0, 0.0, 0.0, 0.0],
            extent: [0.3, 0.3, 0.3],
            material: 2,
            visible,
        }
    }

    fn env(j: f64) -> EnvState {
        EnvState { lighting: 1, joints: vec![j, 2.0 * j], ee_pose: vec![j] }
    }

    #[test]
    fn schema_validation() {
        assert!(StateSchema::uniform(1, 1, 2, 4, 1, 1, 0.0, 1.0).is_err());
        assert!(StateSchema::uniform(1, 2, 2, 1, 1, 1, 0.0, 1.0).is_err());
        assert!(StateSchema::uniform(1, 2, 2, 4, 0, 1, 0.0, 1.0).is_err());
        let mut s = schema(2);
        s.shape_bin_edges[1] = vec![0.0, 0.5, 0.5, 0.7, 1.0];
        assert!(s.validate().is_err());
        s.shape_bin_edges[1] = vec![0.0, 1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn state_dim_matches_flattened_state() {
        let s = schema(2);
        let objects = vec![obj(0.0, true), obj(1.0, false)];
        let flat = flatten_state(&objects, &env(0.1), &s).unwrap();
        assert_eq!(flat.len(), s.state_dim());
        assert_eq!(s.state_dim(), 2 * (3 + 4 + 3 + 3) + (1 + 2 + 1));
    }

    #[test]
    fn fit_constant_dim_is_flagged() {
        let s = schema(1);
        let a = [obj(5.0, true)];
        let b = [obj(5.0, true)];
        let (ea, eb) = (env(0.0), env(2.0));
        let stats = fit_normalization([(&a[..], &ea), (&b[..], &eb)], &s).unwrap();
        assert_eq!(stats.dims[0].mean, 5.0);
        assert_eq!(stats.dims[0].std, 1.0);
        assert!(stats.dims[0].constant);
        // joints {0, 2}: mean 1, population std 1
        assert_eq!(stats.dims[7].mean, 1.0);
        assert_eq!(stats.dims[7].std, 1.0);
        assert!(!stats.dims[7].constant);
    }

    #[test]
    fn fit_population_std() {
        let s = schema(1);
        let a = [obj(0.0, true)];
        let b = [obj(2.0, true)];
        let e = env(0.0);
        let stats = fit_normalization([(&a[..], &e), (&b[..], &e)], &s).unwrap();
        assert_eq!(stats.dims[0].mean, 1.0);
        assert_eq!(stats.dims[0].std, 1.0);
    }

    #[test]
    fn fit_rejects_empty_and_single() {
        let s = schema(1);
        let none: Vec<(&[ObjectState], &EnvState)> = vec![];
        assert!(fit_normalization(none, &s).is_err());
        let a = [obj(0.0, true)];
        let e = env(0.0);
        assert!(fit_normalization([(&a[..], &e)], &s).is_err());
    }

    #[test]
    fn fit_ignores_invisible_objects() {
        let s = schema(1);
        let a = [obj(0.0, true)];
        let b = [obj(2.0, true)];
        let c = [obj(100.0, false)];
        let e = env(0.0);
        let stats = fit_normalization([(&a[..], &e), (&b[..], &e), (&c[..], &e)], &s).unwrap();
        assert_eq!(stats.dims[0].mean, 1.0);
    }

    #[test]
    fn fit_uniform_samples_against_two_pass_oracle() {
        let s = schema(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let scenes: Vec<([ObjectState; 1], EnvState)> = samples.iter().map(|x| ([obj(*x, true)], env(0.0))).collect();
        let stats = fit_normalization(scenes.iter().map(|(o, e)| (&o[..], e)), &s).unwrap();

        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((stats.dims[0].mean - mean).abs() < 1e-12);
        assert!((stats.dims[0].std - std).abs() < 1e-12);
        assert!((mean - 0.5).abs() < 0.02);
        assert!((std - 0.2887).abs() < 0.02);
    }

    #[test]
    fn standardize_examples() {
        let d = |mean, std| DimStats { mean, std, constant: false };
        assert_eq!(standardize(5.0, &d(5.0, 2.0)).unwrap(), 0.0);
        assert_eq!(standardize(7.0, &d(5.0, 2.0)).unwrap(), 1.0);
        assert_eq!(standardize(-1.0, &d(1.0, 0.5)).unwrap(), -4.0);
        assert!(standardize(1.0, &d(0.0, 0.0)).is_err());
        assert!(standardize(1.0, &d(0.0, -1.0)).is_err());
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize_quaternion([-1.0, 0.0, 0.0, 0.0]).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(canonicalize_quaternion([0.5, 0.5, 0.5, 0.5]).unwrap(), [0.5, 0.5, 0.5, 0.5]);
        assert_eq!(canonicalize_quaternion([0.0, 0.0, 0.0, -2.0]).unwrap(), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(canonicalize_quaternion([0.0, 0.0, -3.0, 4.0]).unwrap(), [0.0, 0.0, 0.6, -0.8]);
        assert!(canonicalize_quaternion([0.0; 4]).is_err());
        assert!(canonicalize_quaternion([1e-12, 0.0, 0.0, 0.0]).is_err());
    }

    fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
        // v' = q v q*, expanded
        let [w, x, y, z] = q;
        let t = [2.0 * (y * v[2] - z * v[1]), 2.0 * (z * v[0] - x * v[2]), 2.0 * (x * v[1] - y * v[0])];
        [
            v[0] + w * t[0] + (y * t[2] - z * t[1]),
            v[1] + w * t[1] + (z * t[0] - x * t[2]),
            v[2] + w * t[2] + (x * t[1] - y * t[0]),
        ]
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent_and_rotation_preserving(
            q in prop::array::uniform4(-2.0f64..2.0),
            vs in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 100),
        ) {
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            let c = canonicalize_quaternion(q).unwrap();
            prop_assert!(c[0] >= 0.0);
            prop_assert!((c.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            prop_assert_eq!(canonicalize_quaternion(c).unwrap(), c);
            let unit = q.map(|v| v / norm);
            for v in vs {
                let a = rotate(unit, v);
                let b = rotate(c, v);
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn quantize_examples() {
        let s = schema(1);
        assert_eq!(s.shape_bin_edges[0], vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(quantize_shape([0.3, 0.0, 1.7], &s), [1, 0, 3]);
        assert_eq!(quantize_shape([-0.2, 0.25, 1.0], &s), [0, 1, 3]);
        assert_eq!(quantize_shape([0.999, 0.5, 0.7499], &s), [3, 2, 2]);
    }

    #[test]
    fn fit_shape_edges_spans_training_range() {
        let mut a = obj(0.0, true);
        a.extent = [0.1, 0.2, 0.3];
        let mut b = obj(0.0, true);
        b.extent = [0.5, 0.2, 0.7];
        let edges = fit_shape_edges([&a, &b], 4).unwrap();
        assert_eq!(edges[0].first(), Some(&0.1));
        assert_eq!(edges[0].last(), Some(&0.5));
        // degenerate range gets widened, still strictly increasing
        assert!(edges[1].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn encode_examples() {
        let s = schema(2);
        let scenes = [([obj(0.0, true), obj(1.0, true)], env(0.0)), ([obj(2.0, true), obj(3.0, true)], env(2.0))];
        let stats = fit_normalization(scenes.iter().map(|(o, e)| (&o[..], e)), &s).unwrap();
        let objects = [obj(0.0, true), obj(1.0, false)];
        let t = encode_targets(&objects, &env(1.0), &s, &stats).unwrap();
        assert_eq!(t.materials, vec![2, 2]);
        assert_eq!(t.visible, vec![true, false]);
        assert_eq!(t.continuous.len(), 2 * 7 + 3);
        // joints at the training mean standardize to zero
        assert_eq!(t.env_continuous(), &[0.0, 0.0, 0.0]);
        let mask = t.continuous_mask();
        assert!(mask[..7].iter().all(|m| *m));
        assert!(mask[7..14].iter().all(|m| !*m));
        assert!(mask[14..].iter().all(|m| *m));
        // one-hot at loss time
        let flat = t.flatten(&s);
        assert_eq!(flat.len(), s.target_dim());
        assert_eq!(&flat[7..10], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_rejects_mismatch() {
        let s = schema(2);
        let stats = NormStats { dims: vec![DimStats { mean: 0.0, std: 1.0, constant: false }; s.continuous_dim()] };
        assert!(encode_targets(&[obj(0.0, true)], &env(0.0), &s, &stats).is_err());
        let mut bad = obj(0.0, true);
        bad.material = 3;
        assert!(encode_targets(&[bad, obj(0.0, true)], &env(0.0), &s, &stats).is_err());
        let short = NormStats { dims: stats.dims[..3].to_vec() };
        assert!(encode_targets(&[obj(0.0, true), obj(0.0, true)], &env(0.0), &s, &short).is_err());
    }

    proptest! {
        #[test]
        fn categorical_round_trip(
            mats in prop::collection::vec(0usize..3, 2),
            bins in prop::collection::vec(prop::array::uniform3(0usize..4), 2),
            light in 0usize..2,
            cont in prop::collection::vec(-3.0f64..3.0, 17),
        ) {
            let s = schema(2);
            let t = TargetVector {
                continuous: cont,
                materials: mats.clone(),
                shape_bins: bins.clone(),
                lighting: light,
                visible: vec![true, false],
            };
            let flat = t.flatten(&s);
            prop_assert_eq!(flat.len(), s.target_dim());
            let (m, b, l) = TargetVector::categorical_from_flat(&s, &flat).unwrap();
            prop_assert_eq!(m, mats);
            prop_assert_eq!(b, bins);
            prop_assert_eq!(l, light);
        }

        #[test]
        fn standardized_training_set_is_unit(
            xs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 2..60),
        ) {
            let s = schema(2);
            let scenes: Vec<([ObjectState; 2], EnvState)> = xs
                .iter()
                .map(|(x, y, vis)| ([obj(*x, true), obj(*y, *vis)], env(*x * 0.5)))
                .collect();
            let stats = fit_normalization(scenes.iter().map(|(o, e)| (&o[..], e)), &s).unwrap();
            let targets: Vec<TargetVector> =
                scenes.iter().map(|(o, e)| encode_targets(o, e, &s, &stats).unwrap()).collect();
            let unit = |z: Vec<f64>| {
                let n = z.len() as f64;
                let m = z.iter().sum::<f64>() / n;
                let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                (m, sd)
            };
            // object dims pool every visible instance across slots
            if !stats.dims[0].constant {
                prop_assert_eq!(stats.dims[0], stats.dims[OBJECT_CONTINUOUS]);
                let z: Vec<f64> = targets
                    .iter()
                    .flat_map(|t| {
                        (0..2).filter(|i| t.visible[*i]).map(|i| t.object_continuous(i)[0]).collect::<Vec<_>>()
                    })
                    .collect();
                let (m, sd) = unit(z);
                prop_assert!(m.abs() < 1e-6);
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
            for k in 0..3 {
                if stats.dims[14 + k].constant {
                    continue;
                }
                let (m, sd) = unit(targets.iter().map(|t| t.env_continuous()[k]).collect());
                prop_assert!(m.abs() < 1e-6);
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
