use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, predict, Prober};
use super::tasks::Split;
use super::ProbeError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub l2: f64,
    /// Epochs without dev-accuracy improvement before stopping.
    pub patience: usize,
    /// Standardize linear-prober inputs with training-split statistics.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 30,
            learning_rate: 0.01,
            lr_decay: 0.5,
            decay_every: 10,
            l2: 1e-4,
            patience: 5,
            standardize: true,
        }
    }
}

/// Extracted inputs with their labels and splits, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<X> {
    pub inputs: Vec<X>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub class_names: Vec<String>,
}

impl<X: Clone> FeatureSet<X> {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&k| self.splits[k] == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Label-shuffle control: labels permuted within each split, inputs untouched.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut out = self.clone();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let idx = self.indices(split);
            let mut labels: Vec<usize> = idx.iter().map(|&k| self.labels[k]).collect();
            labels.shuffle(&mut seed::rng(seed, &format!("label-shuffle/{split:?}")));
            for (k, l) in idx.into_iter().zip(labels) {
                out.labels[k] = l;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Full training-split objective after the epoch (after any rollback).
    pub train_loss: f64,
    pub dev_accuracy: f64,
    /// False when the epoch raised the training objective and was rolled back.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Training-objective slack tolerated per epoch before it is rolled back.
pub const LOSS_SLACK: f64 = 1e-6;

/// Minibatch Adam on L2-regularized cross-entropy with step decay and early stopping on dev
/// accuracy. An epoch that raises the full training objective is rolled back and the step size
/// halved, so the logged training loss never increases. Returns the best-dev parameters.
pub fn train<P>(
    mut model: P,
    data: &FeatureSet<P::Input>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(P, TrainLog), ProbeError>
where
    P: Prober + Clone,
    P::Input: Clone,
{
    let train_idx = data.indices(Split::Train);
    let dev_idx = data.indices(Split::Dev);
    if train_idx.is_empty() {
        return Err(ProbeError::EmptySplit(Split::Train));
    }
    if dev_idx.is_empty() {
        return Err(ProbeError::EmptySplit(Split::Dev));
    }
    let mut warnings = Vec::new();
    let first = data.labels[train_idx[0]];
    if train_idx.iter().all(|&k| data.labels[k] == first) {
        warnings.push(format!("degenerate task: every training label is class {first}"));
    }

    let n = model.params().len();
    let mut grad = vec![0.0; n];
    let mut adam = Adam::new(n);
    let mut rng = seed::rng(seed, "train-batches");
    let mut order = train_idx.clone();

    let objective = |m: &P| loss_and_grad(m, &data.inputs, &data.labels, &train_idx, cfg.l2, None);
    let mut prev_loss = objective(&model);
    if !prev_loss.is_finite() {
        return Err(ProbeError::DivergedLoss(0));
    }
    let initial_loss = prev_loss;
    let mut best = (model.clone(), accuracy_on(&model, data, &dev_idx), 0usize);
    let mut backoff = 1.0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let decay_steps = (epoch - 1) / cfg.decay_every.max(1);
        let lr = cfg.learning_rate * cfg.lr_decay.powi(decay_steps as i32) * backoff;
        let snapshot = (model.params().to_vec(), adam.m.clone(), adam.v.clone(), adam.t);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            loss_and_grad(&model, &data.inputs, &data.labels, batch, cfg.l2, Some(&mut grad));
            adam.step(model.params_mut(), &grad, lr);
        }
        let mut loss = objective(&model);
        if !loss.is_finite() {
            return Err(ProbeError::DivergedLoss(epoch));
        }
        let accepted = loss <= prev_loss + LOSS_SLACK;
        if accepted {
            prev_loss = loss;
        } else {
            model.params_mut().copy_from_slice(&snapshot.0);
            adam.m = snapshot.1;
            adam.v = snapshot.2;
            adam.t = snapshot.3;
            backoff *= 0.5;
            loss = prev_loss;
        }
        let dev_accuracy = accuracy_on(&model, data, &dev_idx);
        epochs.push(EpochLog { epoch, learning_rate: lr, train_loss: loss, dev_accuracy, accepted });
        if dev_accuracy > best.1 {
            best = (model.clone(), dev_accuracy, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (model, best_dev_accuracy, best_epoch) = best;
    Ok((model, TrainLog { initial_loss, epochs, best_epoch, best_dev_accuracy, stopped_early, warnings }))
}

fn accuracy_on<P: Prober>(model: &P, data: &FeatureSet<P::Input>, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = idx.iter().filter(|&&k| predict(model, &data.inputs[k]) == data.labels[k]).count();
    hits as f64 / idx.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: Split,
    pub count: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate<P: Prober>(model: &P, data: &FeatureSet<P::Input>, split: Split) -> Result<Metrics, ProbeError>
where
    P::Input: Clone,
{
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(ProbeError::EmptySplit(split));
    }
    let c = model.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for &k in &idx {
        confusion[data.labels[k]][predict(model, &data.inputs[k])] += 1;
    }
    let hits: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    Ok(Metrics {
        split,
        count: idx.len(),
        accuracy: hits as f64 / idx.len() as f64,
        per_class_accuracy,
        confusion,
    })
}
