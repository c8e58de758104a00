//! A small real learner: one hidden ReLU layer with a softmax output, trained
//! by mini-batch SGD with momentum. It is sensitive to every axis of the
//! preset search space, which makes selection behave like it would with a
//! real network.
//!
//! Axis mapping:
//! - `architecture` picks the hidden width (ResNet50 32, InceptionV3 48,
//!   Xception 64; 32 when the axis is absent)
//! - `batch_size`, `learning_rate`, `momentum`, `nesterov` as usual
//! - `decay` is a per-epoch schedule `lr_e = lr / (1 + decay * e)` where `e`
//!   counts completed epochs
//!
//! The output layer starts at zero weights with biases set to the smoothed
//! log class prior of the training folds, so an untrained model predicts the
//! training majority class everywhere.

use std::sync::Arc;

use super::{resume_blob, TaskContext, TaskMode, TaskResult, Trainer, TrainerError, TrainingTask};
use crate::hpspace::{mix64, SplitMix64};
use crate::manifest::Manifest;
use crate::trainer::mock::fnv1a64;

const MAGIC: &[u8; 8] = b"NCVTINY1";

#[derive(Debug, Clone, PartialEq)]
struct Hyper {
    hidden: usize,
    batch_size: usize,
    learning_rate: f64,
    decay: f64,
    momentum: f64,
    nesterov: bool,
}

impl Hyper {
    fn from_task(task: &TrainingTask) -> Result<Self, TrainerError> {
        let c = &task.config;
        let bad = |m: String| TrainerError::InvalidTask(format!("{}: {m}", task.task_id));
        let num = |axis: &str| c.get_f64(axis).map_err(|e| bad(e.to_string()));
        let hidden = match c.get("architecture") {
            None | Some("ResNet50") => 32,
            Some("InceptionV3") => 48,
            Some("Xception") => 64,
            Some(other) => return Err(bad(format!("unknown architecture `{other}`"))),
        };
        let batch_size = num("batch_size")?.unwrap_or(32.0);
        if batch_size < 1.0 || batch_size.fract() != 0.0 {
            return Err(bad(format!("batch size {batch_size} is not a positive integer")));
        }
        let nesterov = match c.get("nesterov") {
            None | Some("disabled") | Some("false") => false,
            Some("enabled") | Some("true") => true,
            Some(other) => return Err(bad(format!("bad nesterov value `{other}`"))),
        };
        Ok(Self {
            hidden,
            batch_size: batch_size as usize,
            learning_rate: num("learning_rate")?.unwrap_or(0.01),
            decay: num("decay")?.unwrap_or(0.0),
            momentum: num("momentum")?.unwrap_or(0.0),
            nesterov,
        })
    }
}

/// Full optimizer state after some epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub epoch: u32,
    /// Metric reported for `epoch`.
    pub metric: f64,
    /// w1 (hidden x inputs), b1, w2 (classes x hidden), b2
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl TinyModel {
    fn param_count(inputs: usize, hidden: usize, classes: usize) -> usize {
        hidden * inputs + hidden + classes * hidden + classes
    }

    fn init(inputs: usize, hidden: usize, prior: &[f64], rng: &mut SplitMix64) -> Self {
        let classes = prior.len();
        let mut params = vec![0.0; Self::param_count(inputs, hidden, classes)];
        let bound = (6.0 / inputs as f64).sqrt();
        for w in &mut params[..hidden * inputs] {
            *w = (2.0 * rng.next_f64() - 1.0) * bound;
        }
        let b2 = params.len() - classes;
        params[b2..].copy_from_slice(prior);
        Self {
            inputs,
            hidden,
            classes,
            epoch: 0,
            metric: 0.0,
            velocity: vec![0.0; params.len()],
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 16 * self.params.len());
        out.extend_from_slice(MAGIC);
        for v in [self.inputs, self.hidden, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.metric.to_le_bytes());
        for v in self.params.iter().chain(&self.velocity) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let rest = bytes.strip_prefix(MAGIC)?;
        let u32_at = |n: usize| Some(u32::from_le_bytes(rest.get(4 * n..4 * n + 4)?.try_into().ok()?));
        let (inputs, hidden, classes) = (u32_at(0)? as usize, u32_at(1)? as usize, u32_at(2)? as usize);
        let epoch = u32_at(3)?;
        let floats: Vec<f64> = rest
            .get(16..)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let n = Self::param_count(inputs, hidden, classes);
        if floats.len() != 1 + 2 * n || (rest.len() - 16) % 8 != 0 {
            return None;
        }
        Some(Self {
            inputs,
            hidden,
            classes,
            epoch,
            metric: floats[0],
            params: floats[1..=n].to_vec(),
            velocity: floats[n + 1..].to_vec(),
        })
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        (b1, w2, b2)
    }

    /// Hidden activations and output logits.
    fn forward(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        for h in 0..self.hidden {
            let row = &self.params[h * self.inputs..(h + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.params[b1 + h];
            hidden[h] = z.max(0.0);
        }
        for c in 0..self.classes {
            let row = &self.params[w2 + c * self.hidden..w2 + (c + 1) * self.hidden];
            logits[c] = row.iter().zip(hidden.iter()).map(|(w, a)| w * a).sum::<f64>()
                + self.params[b2 + c];
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        self.forward(x, &mut hidden, &mut logits);
        argmax(&logits)
    }

    /// Mean cross-entropy gradient over `batch`; returns the summed loss.
    fn gradient(&self, batch: &[(&[f64], usize)], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (b1, w2, b2) = self.offsets();
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let mut dlogits = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (x, y) in batch {
            self.forward(x, &mut hidden, &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for c in 0..self.classes {
                dlogits[c] = (logits[c] - max).exp() / sum;
            }
            loss -= ((logits[*y] - max) - sum.ln()).min(0.0);
            dlogits[*y] -= 1.0;
            for c in 0..self.classes {
                grad[b2 + c] += dlogits[c];
                for h in 0..self.hidden {
                    grad[w2 + c * self.hidden + h] += dlogits[c] * hidden[h];
                }
            }
            for h in 0..self.hidden {
                if hidden[h] <= 0.0 {
                    continue;
                }
                let da: f64 = (0..self.classes)
                    .map(|c| self.params[w2 + c * self.hidden + h] * dlogits[c])
                    .sum();
                grad[b1 + h] += da;
                for (i, v) in x.iter().enumerate() {
                    grad[h * self.inputs + i] += da * v;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        loss
    }

    fn step(&mut self, grad: &[f64], lr: f64, momentum: f64, nesterov: bool) {
        for ((w, v), g) in self.params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v - lr * g;
            *w += if nesterov { momentum * *v - lr * g } else { *v };
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (n, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = n;
        }
    }
    best
}

/// Standardized features and class indices for a set of manifest rows.
struct Rows {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
}

fn prepare(manifest: &Manifest, train: &[usize], eval: &[usize]) -> Result<(Rows, Rows), TrainerError> {
    let dim = manifest
        .feature_dim()
        .ok_or_else(|| TrainerError::Data("tiny learner needs uniform feature vectors on every item".into()))?;
    let items = manifest.items();
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &n in train {
        for (m, v) in mean.iter_mut().zip(items[n].features.as_ref().expect("checked")) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len().max(1) as f64);
    for &n in train {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(items[n].features.as_ref().expect("checked")) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut sd {
        *s = (*s / train.len().max(1) as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let rows = |idx: &[usize]| Rows {
        x: idx
            .iter()
            .map(|&n| {
                items[n]
                    .features
                    .as_ref()
                    .expect("checked")
                    .iter()
                    .zip(mean.iter().zip(&sd))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect(),
        y: idx
            .iter()
            .map(|&n| manifest.class_index(&items[n].label).expect("label is a class"))
            .collect(),
    };
    Ok((rows(train), rows(eval)))
}

fn accuracy(model: &TinyModel, rows: &Rows) -> f64 {
    if rows.y.is_empty() {
        return 0.0;
    }
    let correct = rows
        .x
        .iter()
        .zip(&rows.y)
        .filter(|(x, y)| model.predict(x) == **y)
        .count();
    correct as f64 / rows.y.len() as f64
}

#[derive(Debug, Clone, Default)]
pub struct TinyLearner;

impl TinyLearner {
    /// Trains `task` to completion, returning the final model.
    pub fn train(&self, task: &TrainingTask, ctx: &TaskContext<'_>) -> Result<TinyModel, TrainerError> {
        task.validate()?;
        let hyper = Hyper::from_task(task)?;
        let data = ctx
            .data
            .ok_or_else(|| TrainerError::Data("tiny learner needs manifest data".into()))?;
        let manifest: &Arc<Manifest> = &data.manifest;
        let train_idx = data.folds.item_indices(manifest, &task.train_folds);
        if train_idx.is_empty() {
            return Err(TrainerError::Data(format!("{}: training folds are empty", task.task_id)));
        }
        let eval_idx = match task.mode {
            TaskMode::FinalTrain => train_idx.clone(),
            _ => data.folds.item_indices(manifest, &task.eval_fold.into_iter().collect::<Vec<_>>()),
        };
        let (train, eval) = prepare(manifest, &train_idx, &eval_idx)?;
        let classes = manifest.class_names().len();

        let task_key = fnv1a64(task.task_id.as_bytes());
        let mut model = match resume_blob(task, ctx.store)? {
            Some(bytes) => {
                let model = TinyModel::from_bytes(&bytes).ok_or_else(|| TrainerError::Failure {
                    message: format!("{}: unreadable checkpoint", task.task_id),
                    last_epoch: Some(task.resume_from_epoch),
                })?;
                let expected = (train.x[0].len(), hyper.hidden, classes, task.resume_from_epoch);
                if (model.inputs, model.hidden, model.classes, model.epoch) != expected {
                    return Err(TrainerError::Data(format!(
                        "{}: checkpoint shape does not match task",
                        task.task_id
                    )));
                }
                model
            }
            None => {
                let mut counts = vec![0usize; classes];
                for y in &train.y {
                    counts[*y] += 1;
                }
                let total = train.y.len() + classes;
                let prior: Vec<f64> = counts.iter().map(|c| ((c + 1) as f64 / total as f64).ln()).collect();
                let mut rng = SplitMix64::stream(task.seed, task_key);
                TinyModel::init(train.x[0].len(), hyper.hidden, &prior, &mut rng)
            }
        };

        let mut grad = vec![0.0; model.params.len()];
        let mut order: Vec<usize> = (0..train.y.len()).collect();
        for epoch in model.epoch + 1..=task.epochs {
            let lr = hyper.learning_rate / (1.0 + hyper.decay * f64::from(epoch - 1));
            let mut rng = SplitMix64::stream(mix64(task.seed ^ task_key), u64::from(epoch));
            order.sort_unstable();
            rng.shuffle(&mut order);
            let mut loss = 0.0;
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<(&[f64], usize)> =
                    chunk.iter().map(|&n| (train.x[n].as_slice(), train.y[n])).collect();
                loss += model.gradient(&batch, &mut grad);
                model.step(&grad, lr, hyper.momentum, hyper.nesterov);
            }
            if !loss.is_finite() || model.params.iter().any(|w| !w.is_finite()) {
                return Err(TrainerError::Failure {
                    message: format!("{}: non-finite loss in epoch {epoch}", task.task_id),
                    last_epoch: Some(epoch - 1),
                });
            }
            model.epoch = epoch;
            model.metric = accuracy(&model, &eval);
            if let Some(store) = ctx.store {
                store.save_model(&task.task_id, epoch, &model.to_bytes())?;
            }
            (ctx.progress)(epoch, model.metric);
        }
        Ok(model)
    }
}

impl Trainer for TinyLearner {
    fn name(&self) -> &str {
        "tiny"
    }

    fn run_task(&self, task: &TrainingTask, ctx: &TaskContext<'_>) -> Result<TaskResult, TrainerError> {
        let model = self.train(task, ctx)?;
        let checkpoint_ref = match ctx.store {
            Some(_) => crate::checkpoint::CheckpointStore::blob_ref(&task.task_id, model.epoch),
            None => String::new(),
        };
        Ok(TaskResult {
            task_id: task.task_id.clone(),
            metric: model.metric,
            epochs_completed: model.epoch,
            checkpoint_ref,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{CheckpointStore, StoreOptions};
    use crate::hpspace::{Axis, HyperparameterConfig, SearchSpace};
    use crate::manifest::DataItem;
    use crate::partition::{assign_folds, PartitionLevel};
    use crate::trainer::TrainingData;

    /// Two Gaussian-ish blobs around (-2,-2) and (2,2).
    fn blobs(n: usize, seed: u64) -> Manifest {
        let mut rng = SplitMix64::new(seed);
        let items = (0..n)
            .map(|k| {
                let class = k % 2;
                let centre = if class == 0 { -2.0 } else { 2.0 };
                let mut item = DataItem::new(format!("i{k}"), format!("c{class}"));
                item.features = Some(vec![
                    centre + (rng.next_f64() - 0.5) * 2.0,
                    centre + (rng.next_f64() - 0.5) * 2.0,
                ]);
                item
            })
            .collect();
        Manifest::new(items).unwrap()
    }

    /// Brute-force search for a separating line through angle/offset grid.
    fn linearly_separable(m: &Manifest) -> bool {
        let pts: Vec<(f64, f64, bool)> = m
            .items()
            .iter()
            .map(|i| {
                let f = i.features.as_ref().unwrap();
                (f[0], f[1], i.label == "c1")
            })
            .collect();
        (0..360).any(|deg| {
            let (s, c) = (deg as f64).to_radians().sin_cos();
            (-40..=40).any(|b| {
                let b = b as f64 / 10.0;
                pts.iter().all(|(x, y, pos)| ((c * x + s * y + b) > 0.0) == *pos)
            })
        })
    }

    fn data(m: Manifest, k: usize) -> TrainingData {
        let folds = assign_folds(&m, k, PartitionLevel::Item, 1, Default::default()).unwrap();
        TrainingData {
            manifest: Arc::new(m),
            folds: Arc::new(folds),
            manifest_path: None,
            folds_path: None,
        }
    }

    fn config(values: &[(&str, &str)]) -> HyperparameterConfig {
        HyperparameterConfig {
            index: 0,
            values: values.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn preset_config() -> HyperparameterConfig {
        config(&[
            ("architecture", "InceptionV3"),
            ("batch_size", "16"),
            ("learning_rate", "0.01"),
            ("decay", "0.001"),
            ("momentum", "0.9"),
            ("nesterov", "enabled"),
        ])
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let m = blobs(200, 3);
        assert!(linearly_separable(&m));
        let d = data(m, 4);
        let task = TrainingTask::new("t", TaskMode::TrainVal, preset_config(), None, Some(0), vec![1, 2, 3], 30, 5)
            .unwrap();
        let ctx = TaskContext { data: Some(&d), store: None, progress: &|_, _| {} };
        let r = TinyLearner.run_task(&task, &ctx).unwrap();
        assert!(r.metric >= 0.95, "accuracy {}", r.metric);
        assert_eq!(r.epochs_completed, 30);
    }

    #[test]
    fn zero_learning_rate_predicts_training_majority() {
        // 3:1 class ratio so the majority class is unambiguous everywhere
        let mut rng = SplitMix64::new(9);
        let items = (0..80)
            .map(|k| {
                let mut item = DataItem::new(format!("i{k}"), if k % 4 == 3 { "b" } else { "a" }.to_string());
                item.features = Some(vec![rng.next_f64(), rng.next_f64(), rng.next_f64()]);
                item
            })
            .collect();
        let d = data(Manifest::new(items).unwrap(), 4);
        let space = SearchSpace::new(vec![
            Axis::new("batch_size", &["8"]),
            Axis::new("learning_rate", &["0.0"]),
            Axis::new("momentum", &["0.9"]),
        ])
        .unwrap();
        let cfg = space.sample_configs(1, 0).remove(0);
        let task = TrainingTask::new("t", TaskMode::TrainVal, cfg, None, Some(2), vec![0, 1, 3], 3, 1).unwrap();
        let ctx = TaskContext { data: Some(&d), store: None, progress: &|_, _| {} };
        let r = TinyLearner.run_task(&task, &ctx).unwrap();
        let eval = d.folds.item_indices(&d.manifest, &[2]);
        let majority = eval.iter().filter(|&&n| d.manifest.items()[n].label == "a").count() as f64
            / eval.len() as f64;
        assert!(majority > 0.5);
        assert_eq!(r.metric, majority);
    }

    #[test]
    fn resume_is_bit_exact() {
        let d = data(blobs(120, 4), 3);
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open_with(dir.path(), StoreOptions { sync: false }).unwrap();
        let ctx = TaskContext { data: Some(&d), store: Some(&store), progress: &|_, _| {} };
        let task = TrainingTask::new("a", TaskMode::TrainTest, preset_config(), Some(0), None, vec![1, 2], 6, 2)
            .unwrap();
        let full = TinyLearner.train(&task, &TaskContext { store: None, ..ctx }).unwrap();

        // run 0..4 then resume 4..6
        let mut short = task.clone();
        short.epochs = 4;
        let mid = TinyLearner.train(&short, &ctx).unwrap();
        assert_eq!(mid.epoch, 4);
        let mut rest = task.clone();
        rest.resume_from_epoch = 4;
        let resumed = TinyLearner.train(&rest, &ctx).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.velocity, full.velocity);
        assert_eq!(resumed.metric, full.metric);

        // resuming at the final epoch trains nothing
        let mut done = task.clone();
        done.resume_from_epoch = 6;
        let again = TinyLearner.run_task(&done, &ctx).unwrap();
        assert_eq!(again.metric, full.metric);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let mut rng = SplitMix64::new(1);
        let mut m = TinyModel::init(3, 4, &[-0.5, -1.0], &mut rng);
        m.epoch = 7;
        m.metric = 0.25;
        assert_eq!(TinyModel::from_bytes(&m.to_bytes()), Some(m.clone()));
        assert_eq!(TinyModel::from_bytes(&m.to_bytes()[..20]), None);
    }

    #[test]
    fn divergence_is_a_trainer_failure() {
        let d = data(blobs(60, 2), 3);
        let cfg = config(&[("batch_size", "4"), ("learning_rate", "1e308"), ("momentum", "0.99")]);
        let task = TrainingTask::new("t", TaskMode::TrainVal, cfg, None, Some(0), vec![1, 2], 5, 1).unwrap();
        let ctx = TaskContext { data: Some(&d), store: None, progress: &|_, _| {} };
        let err = TinyLearner.run_task(&task, &ctx).unwrap_err();
        assert!(matches!(err, TrainerError::Failure { .. }), "{err}");
        assert!(err.is_retryable());
    }

    #[test]
    fn missing_features_is_a_data_error() {
        let m = Manifest::new(vec![DataItem::new("a", "x"), DataItem::new("b", "y"), DataItem::new("c", "x")])
            .unwrap();
        let d = data(m, 3);
        let task = TrainingTask::new("t", TaskMode::TrainVal, preset_config(), None, Some(0), vec![1, 2], 1, 1)
            .unwrap();
        let ctx = TaskContext { data: Some(&d), store: None, progress: &|_, _| {} };
        assert!(matches!(TinyLearner.run_task(&task, &ctx), Err(TrainerError::Data(_))));
    }
}
