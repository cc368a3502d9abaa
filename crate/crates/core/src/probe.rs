//! Linear state-prediction probe: two linear heads on pooled features,
//! trained with SGD (momentum, weight decay) on summed cross-entropy and
//! masked L2 losses.
//!
//! Per frame the pipeline is resize -> pool -> heads -> masked losses:
//!
//! * the object head maps each visible object's RoI vector to
//!   `[7 standardized pose dims, M material logits, 3 x S shape logits]`;
//! * the environment head maps the global vector to
//!   `[N_j + N_ee standardized dims, L lighting logits]`.
//!
//! ```text
//! frame loss = MSE(object pose block, visibility mask) + MSE(env block)
//!            + one CE per categorical of every visible object + lighting CE
//! ```
//!
//! Batch loss is the mean frame loss.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::pooling::pool_frame;
use crate::probedata::ProbeDataset;
use crate::statevec::{
    argmax, encode_targets, fit_normalization, NormStats, StateSchema, TargetVector, OBJECT_CONTINUOUS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 32, learning_rate: 5e-4, momentum: 0.9, weight_decay: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidInput("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "weight decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn ce_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {}", logits.len())));
    }
    if target >= logits.len() {
        return Err(Error::InvalidInput(format!("target {target} out of range for {} classes", logits.len())));
    }
    let top = argmax(logits);
    let max = logits[top];
    // ln(1 + rest) keeps precision when the loss is tiny
    let rest: f64 = logits.iter().enumerate().filter(|(k, _)| *k != top).map(|(_, v)| (v - max).exp()).sum();
    let loss = (max - logits[target]) + rest.ln_1p();
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Squared error summed over masked-in dims, divided by `max(1, #masked-in)`.
/// Masked-out dims get zero gradient.
pub fn mse_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::InvalidInput(format!(
            "mse shapes differ: pred {}, target {}, mask {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), m)| {
            if *m {
                let d = p - t;
                loss += d * d;
                2.0 * d / count
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / count, grad))
}

/// Dense layer, `y = W x + b`, `W` row-major `out x inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear { inp, out, weight: vec![0.0; inp * out], bias: vec![0.0; out] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inp)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `dy x^T` into `grad.weight` and `dy` into `grad.bias`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) {
        for ((row, g), d) in grad.weight.chunks_exact_mut(self.inp).zip(&mut grad.bias).zip(dy) {
            if *d == 0.0 {
                continue;
            }
            *g += d;
            for (w, v) in row.iter_mut().zip(x) {
                *w += d * v;
            }
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `g = grad + wd * w; v = momentum * v + g; w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { learning_rate, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Updates parameter tensor number `slot` in place.
    pub fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != params.len() {
            *v = vec![0.0; params.len()];
        }
        for ((w, g), vel) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
            let g = g + self.weight_decay * *w;
            *vel = self.momentum * *vel + g;
            *w -= self.learning_rate * *vel;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub schema: StateSchema,
    pub stats: NormStats,
    pub channels: usize,
    pub object_head: Linear,
    pub env_head: Linear,
}

/// Pooled inputs and encoded targets for one frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub objects: Vec<Option<Vec<f64>>>,
    pub global: Vec<f64>,
    pub target: TargetVector,
}

/// Pools every frame and encodes its targets with `stats`.
pub fn prepare(dataset: &ProbeDataset, stats: &NormStats) -> Result<Vec<Sample>> {
    dataset
        .frames
        .par_iter()
        .map(|f| {
            let pooled = pool_frame(&f.features, &f.bboxes, &f.visibility(), f.image_size)?;
            let target = encode_targets(&f.objects, &f.env, &dataset.schema, stats)?;
            Ok(Sample { objects: pooled.objects, global: pooled.global, target })
        })
        .collect()
}

/// Head outputs for one frame.
pub struct Prediction {
    pub objects: Vec<Option<Vec<f64>>>,
    pub env: Vec<f64>,
}

impl ProbeModel {
    pub fn zeros(schema: StateSchema, stats: NormStats, channels: usize) -> Self {
        ProbeModel {
            object_head: Linear::zeros(channels, schema.object_head_dim()),
            env_head: Linear::zeros(channels, schema.env_head_dim()),
            schema,
            stats,
            channels,
        }
    }

    pub fn predict(&self, sample: &Sample) -> Prediction {
        Prediction {
            objects: sample.objects.iter().map(|u| u.as_ref().map(|u| self.object_head.forward(u))).collect(),
            env: self.env_head.forward(&sample.global),
        }
    }

    fn check_compatible(&self, dataset: &ProbeDataset) -> Result<()> {
        if dataset.schema != self.schema {
            return Err(Error::SchemaMismatch(format!("dataset `{}` schema differs from the probe's", dataset.name)));
        }
        match dataset.feature_shape() {
            Some([c, _, _]) if c == self.channels => Ok(()),
            Some([c, _, _]) => Err(Error::SchemaMismatch(format!(
                "dataset `{}` has {c} channels, probe expects {}",
                dataset.name, self.channels
            ))),
            None => Err(Error::InvalidInput(format!("dataset `{}` is empty", dataset.name))),
        }
    }

    /// Frame loss; when `grads` is given, accumulates `scale * dloss/dparams`.
    fn frame_loss(&self, sample: &Sample, grads: Option<(&mut Linear, &mut Linear, f64)>) -> Result<f64> {
        let schema = &self.schema;
        let pred = self.predict(sample);
        let t = &sample.target;
        let n_obj = schema.num_objects;
        let mut obj_dy: Vec<Vec<f64>> = vec![vec![0.0; schema.object_head_dim()]; n_obj];

        let mut pose_pred = vec![0.0; n_obj * OBJECT_CONTINUOUS];
        for (i, p) in pred.objects.iter().enumerate() {
            if let Some(p) = p {
                pose_pred[i * OBJECT_CONTINUOUS..(i + 1) * OBJECT_CONTINUOUS].copy_from_slice(&p[..OBJECT_CONTINUOUS]);
            }
        }
        let split = n_obj * OBJECT_CONTINUOUS;
        let mask = t.continuous_mask();
        let (mut loss, pose_grad) = mse_loss(&pose_pred, &t.continuous[..split], &mask[..split])?;
        for (i, p) in pred.objects.iter().enumerate() {
            let Some(p) = p else { continue };
            let dy = &mut obj_dy[i];
            dy[..OBJECT_CONTINUOUS].copy_from_slice(&pose_grad[i * OBJECT_CONTINUOUS..(i + 1) * OBJECT_CONTINUOUS]);
            let mut at = OBJECT_CONTINUOUS;
            let mut heads = vec![(schema.num_materials, t.materials[i])];
            heads.extend(t.shape_bins[i].iter().map(|b| (schema.shape_bins, *b)));
            for (width, class) in heads {
                let (l, g) = ce_loss(&p[at..at + width], class)?;
                loss += l;
                dy[at..at + width].copy_from_slice(&g);
                at += width;
            }
        }

        let env_cont = schema.env_continuous_dim();
        let (l_env, g_env) = mse_loss(&pred.env[..env_cont], t.env_continuous(), &vec![true; env_cont])?;
        let (l_light, g_light) = ce_loss(&pred.env[env_cont..], t.lighting)?;
        loss += l_env + l_light;

        if let Some((g_obj, g_envh, scale)) = grads {
            for (u, dy) in sample.objects.iter().zip(&mut obj_dy) {
                if let Some(u) = u {
                    dy.iter_mut().for_each(|d| *d *= scale);
                    self.object_head.backward(u, dy, g_obj);
                }
            }
            let dy: Vec<f64> = g_env.iter().chain(&g_light).map(|d| d * scale).collect();
            self.env_head.backward(&sample.global, &dy, g_envh);
        }
        Ok(loss)
    }

    /// Mean frame loss over `samples`.
    pub fn loss(&self, samples: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            total += self.frame_loss(s, None)?;
        }
        Ok(total / samples.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean of the batch losses seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the training set after the last update.
    pub final_loss: f64,
}

pub fn train_probe(train: &ProbeDataset, cfg: &TrainConfig) -> Result<ProbeModel> {
    train_probe_with_history(train, cfg).map(|(m, _)| m)
}

/// Fits normalization on `train`, then trains zero-initialized heads for
/// `cfg.epochs` epochs over seeded shuffles. The last partial batch is kept.
/// Fails if the weights go non-finite or the final loss exceeds the initial one.
pub fn train_probe_with_history(train: &ProbeDataset, cfg: &TrainConfig) -> Result<(ProbeModel, TrainHistory)> {
    cfg.validate()?;
    let Some([channels, _, _]) = train.feature_shape() else {
        return Err(Error::InvalidInput(format!("training set `{}` is empty", train.name)));
    };
    train.schema.validate()?;
    let stats = fit_normalization(train.frames.iter().map(|f| (&f.objects[..], &f.env)), &train.schema)?;
    let samples = prepare(train, &stats)?;
    let mut model = ProbeModel::zeros(train.schema.clone(), stats, channels);
    model.check_compatible(train)?;

    let initial_loss = model.loss(&samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let (obj_in, obj_out) = (model.object_head.inp, model.object_head.out);
    let (env_in, env_out) = (model.env_head.inp, model.env_head.out);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut g_obj = Linear::zeros(obj_in, obj_out);
            let mut g_env = Linear::zeros(env_in, env_out);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &k in batch {
                batch_loss += model.frame_loss(&samples[k], Some((&mut g_obj, &mut g_env, scale)))?;
            }
            epoch_total += batch_loss * scale;
            batches += 1;
            opt.step(0, &mut model.object_head.weight, &g_obj.weight);
            opt.step(1, &mut model.object_head.bias, &g_obj.bias);
            opt.step(2, &mut model.env_head.weight, &g_env.weight);
            opt.step(3, &mut model.env_head.bias, &g_env.bias);
        }
        epoch_losses.push(epoch_total / batches as f64);
    }
    let final_loss = model.loss(&samples)?;
    let params_finite = |l: &Linear| l.weight.iter().chain(&l.bias).all(|v| v.is_finite());
    if !params_finite(&model.object_head) || !params_finite(&model.env_head) {
        return Err(Error::InvalidInput("training diverged: non-finite probe weights".into()));
    }
    if !(final_loss <= initial_loss) {
        return Err(Error::InvalidInput(format!(
            "training diverged: loss rose from {initial_loss} to {final_loss}; lower the learning rate"
        )));
    }
    Ok((model, TrainHistory { initial_loss, epoch_losses, final_loss }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateScore {
    pub name: String,
    /// Accuracy in `[0, 1]` for categorical states, negative MSE for
    /// continuous ones; `None` when no masked-in instance exists.
    pub score: Option<f64>,
    /// Scored instances (objects or frames).
    pub count: usize,
}

/// Raw per-state scores for one model, in [`STATE_GROUPS`] order.
///
/// [`STATE_GROUPS`]: crate::statevec::STATE_GROUPS
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerStateScores {
    pub states: Vec<StateScore>,
}

impl PerStateScores {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.states.iter().find(|s| s.name == name).and_then(|s| s.score)
    }

    pub fn is_absent(&self, name: &str) -> bool {
        self.states.iter().any(|s| s.name == name && s.score.is_none())
    }

    /// `state,score,count` lines; absent scores are written as `absent`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,score,count\n");
        for s in &self.states {
            match s.score {
                Some(v) => out.push_str(&format!("{},{},{}\n", s.name, v, s.count)),
                None => out.push_str(&format!("{},absent,{}\n", s.name, s.count)),
            }
        }
        out
    }

    /// Parses the output of [`PerStateScores::to_csv`].
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, "state,score,count")) => {}
            Some((n, _)) => return Err(parse_err(n, "expected header `state,score,count`".into())),
            None => return Err(parse_err(1, "empty score file".into())),
        }
        let mut states = Vec::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [name, score, count] = fields[..] else {
                return Err(parse_err(n, format!("expected 3 fields, got {}", fields.len())));
            };
            let score = match score {
                "absent" => None,
                v => Some(
                    v.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(n, format!("bad score `{v}`")))?,
                ),
            };
            let count = count.parse().map_err(|_| parse_err(n, format!("bad count `{count}`")))?;
            if states.iter().any(|s: &StateScore| s.name == name) {
                return Err(parse_err(n, format!("duplicate state `{name}`")));
            }
            states.push(StateScore { name: name.to_string(), score, count });
        }
        Ok(PerStateScores { states })
    }
}

/// Order-independent mean: values are sorted before summation.
fn sorted_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn accuracy(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Scores `model` on `val`: top-1 accuracy (ties to the lowest class) for
/// categorical states, negative MSE over standardized masked-in dims for
/// continuous ones. Shape accuracy is the mean over the three box edges.
pub fn evaluate(model: &ProbeModel, val: &ProbeDataset) -> Result<PerStateScores> {
    model.check_compatible(val)?;
    let samples = prepare(val, &model.stats)?;
    let schema = &model.schema;
    let env_cont = schema.env_continuous_dim();

    let mut pos_err = Vec::new();
    let mut quat_err = Vec::new();
    let mut joint_err = Vec::new();
    let mut ee_err = Vec::new();
    let (mut objs, mut mat_ok, mut shape_ok, mut light_ok) = (0usize, 0usize, 0usize, 0usize);

    for s in &samples {
        let pred = model.predict(s);
        let t = &s.target;
        for (i, p) in pred.objects.iter().enumerate() {
            let Some(p) = p else { continue };
            objs += 1;
            let tc = t.object_continuous(i);
            pos_err.extend((0..3).map(|k| (p[k] - tc[k]).powi(2)));
            quat_err.extend((3..7).map(|k| (p[k] - tc[k]).powi(2)));
            let mut at = OBJECT_CONTINUOUS;
            mat_ok += (argmax(&p[at..at + schema.num_materials]) == t.materials[i]) as usize;
            at += schema.num_materials;
            for b in t.shape_bins[i] {
                shape_ok += (argmax(&p[at..at + schema.shape_bins]) == b) as usize;
                at += schema.shape_bins;
            }
        }
        let te = t.env_continuous();
        joint_err.extend((0..schema.joint_dim).map(|k| (pred.env[k] - te[k]).powi(2)));
        ee_err.extend((schema.joint_dim..env_cont).map(|k| (pred.env[k] - te[k]).powi(2)));
        light_ok += (argmax(&pred.env[env_cont..]) == t.lighting) as usize;
    }
    let frames = samples.len();
    let neg = |v: Option<f64>| v.map(|m| -m);
    let entry = |name: &str, score: Option<f64>, count: usize| StateScore { name: name.to_string(), score, count };
    Ok(PerStateScores {
        states: vec![
            entry("p_pose", neg(sorted_mean(pos_err)), objs),
            entry("q_pose", neg(sorted_mean(quat_err)), objs),
            entry("s_shape", accuracy(shape_ok, 3 * objs), objs),
            entry("m_mat", accuracy(mat_ok, objs), objs),
            entry("q_j", neg(sorted_mean(joint_err)), frames),
            entry("p_ee", neg(sorted_mean(ee_err)), frames),
            entry("l", accuracy(light_ok, frames), frames),
        ],
    })
}

pub const MODEL_FORMAT: &str = "staterank-probe";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    version: u32,
    channels: usize,
    schema: StateSchema,
    stats: NormStats,
}

impl ProbeModel {
    /// Writes `model.json` plus f32 weight and bias blobs under `dir`.
    /// Weights are narrowed to f32 on disk.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let narrow = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        for (name, head) in [("object", &self.object_head), ("env", &self.env_head)] {
            blob::write(&dir.join(format!("{name}_weight.bin")), &[head.out, head.inp], &narrow(&head.weight))?;
            blob::write(&dir.join(format!("{name}_bias.bin")), &[head.out], &narrow(&head.bias))?;
        }
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            channels: self.channels,
            schema: self.schema.clone(),
            stats: self.stats.clone(),
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&manifest).expect("model manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != MODEL_FORMAT {
            return Err(Error::format(&path, format!("unknown format `{}`", m.format)));
        }
        if m.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion { path, version: m.version as u64 });
        }
        m.schema.validate()?;
        let load_head = |name: &str, out: usize| -> Result<Linear> {
            let wp = dir.join(format!("{name}_weight.bin"));
            let (wd, w) = blob::read(&wp)?;
            if wd != [out, m.channels] {
                return Err(Error::format(&wp, format!("weight shape {wd:?}, expected [{out}, {}]", m.channels)));
            }
            let bp = dir.join(format!("{name}_bias.bin"));
            let (bd, b) = blob::read(&bp)?;
            if bd != [out] {
                return Err(Error::format(&bp, format!("bias shape {bd:?}, expected [{out}]")));
            }
            Ok(Linear {
                inp: m.channels,
                out,
                weight: w.into_iter().map(f64::from).collect(),
                bias: b.into_iter().map(f64::from).collect(),
            })
        };
        Ok(ProbeModel {
            object_head: load_head("object", m.schema.object_head_dim())?,
            env_head: load_head("env", m.schema.env_head_dim())?,
            channels: m.channels,
            schema: m.schema,
            stats: m.stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Log-sum-exp written out directly with no shift.
    fn direct_ce(logits: &[f64], target: usize) -> f64 {
        logits.iter().map(|v| v.exp()).sum::<f64>().ln() - logits[target]
    }

    #[test]
    fn ce_examples() {
        let (l, _) = ce_loss(&[0.3; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);

        let (l, _) = ce_loss(&[10.0, -10.0], 0).unwrap();
        let oracle = (-20f64).exp().ln_1p();
        assert!((l - oracle).abs() <= 1e-12 * oracle);
        assert!((l - 2.06e-9).abs() < 1e-11);
        assert!((direct_ce(&[10.0, -10.0], 0) - oracle).abs() < 1e-12);

        let (_, g) = ce_loss(&[0.0, 0.0], 0).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);

        assert!(ce_loss(&[0.0, 1.0], 2).is_err());
        assert!(ce_loss(&[0.0], 0).is_err());
    }

    #[test]
    fn ce_stable_for_huge_logits() {
        let (l, g) = ce_loss(&[1000.0, 0.0, -1000.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap().0, 0.0);
        assert_eq!(mse_loss(&[2.0, 3.0], &[1.0, 2.0], &[true, true]).unwrap().0, 1.0);
        let (l, g) = mse_loss(&[100.0, 5.0], &[0.0, 5.0], &[false, true]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, g) = mse_loss(&[1.0], &[0.0], &[false]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0]));
        assert!(mse_loss(&[1.0], &[0.0, 1.0], &[true]).is_err());
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let k = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sgd_lr_zero_is_noop() {
        let mut opt = Sgd::new(0.0, 0.9, 1e-4);
        let mut w = vec![0.5, -2.0, 3.0];
        let before = w.clone();
        for _ in 0..5 {
            opt.step(0, &mut w, &[1.0, 2.0, 3.0]);
        }
        assert_eq!(w, before);
    }

    #[test]
    fn sgd_weight_decay_shrinks_on_zero_gradient() {
        let (lr, wd) = (5e-4, 1e-4);
        let mut opt = Sgd::new(lr, 0.9, wd);
        let mut w = vec![0.5, -2.0, 3.0, 1e3];
        let before = w.clone();
        opt.step(0, &mut w, &[0.0; 4]);
        for (a, b) in w.iter().zip(&before) {
            let want = b * (1.0 - lr * wd);
            assert!((a - want).abs() <= 1e-15 * want.abs());
        }
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut opt = Sgd::new(0.1, 0.5, 0.0);
        let mut w = vec![1.0];
        opt.step(0, &mut w, &[2.0]); // v = 2, w = 0.8
        opt.step(0, &mut w, &[2.0]); // v = 3, w = 0.5
        assert!((w[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_backward_accumulates_outer_product() {
        let l = Linear { inp: 2, out: 2, weight: vec![1.0, 2.0, 3.0, 4.0], bias: vec![0.5, -0.5] };
        assert_eq!(l.forward(&[1.0, -1.0]), vec![-0.5, -1.5]);
        let mut g = Linear::zeros(2, 2);
        l.backward(&[1.0, 2.0], &[3.0, -1.0], &mut g);
        assert_eq!(g.weight, vec![3.0, 6.0, -1.0, -2.0]);
        assert_eq!(g.bias, vec![3.0, -1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { weight_decay: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        let zero_lr = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(zero_lr.validate().is_ok());
    }

    #[test]
    fn sorted_mean_is_order_free() {
        let a = vec![1e16, 1.0, -1e16, 3.0];
        let b = vec![3.0, -1e16, 1.0, 1e16];
        assert_eq!(sorted_mean(a), sorted_mean(b));
        assert_eq!(sorted_mean(vec![]), None);
    }
}
