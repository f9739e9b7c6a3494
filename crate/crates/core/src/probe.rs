//! Linear classification probe on globally pooled embeddings.
//!
//! Softmax regression trained with mini-batch SGD (momentum, decoupled weight
//! decay, cosine-annealed learning rate). A small random search draws learning
//! rate and weight decay log-uniformly per trial; the trial with the best
//! validation top-1 wins.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Seeds, PROBE_TRIALS};
use crate::store::EmbeddingSet;

/// Mean over the `N` tokens of every image, `[n_images × d]`.
pub fn pool(set: &EmbeddingSet) -> Array2<f64> {
    set.tokens().mean_axis(Axis(1)).expect("N > 0")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Vec<Split>,
}

impl LabeledPool {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize, split: Vec<Split>) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || split.len() != n {
            return Err(Error::Shape(format!(
                "{n} pooled rows, {} labels, {} split tags",
                labels.len(),
                split.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument("a probe needs at least two classes".into()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {n_classes})")));
        }
        for s in [Split::Train, Split::Val] {
            if !split.contains(&s) {
                return Err(Error::InvalidArgument(format!("the {s:?} split is empty")));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pooled feature".into()));
        }
        Ok(LabeledPool {
            features,
            labels,
            n_classes,
            split,
        })
    }

    /// Pools `set` and attaches labels by image id. Images without a label are dropped;
    /// a label for an id missing from the set is an error. `n_classes` is one more than the largest label.
    pub fn from_labels(set: &EmbeddingSet, labels: &[LabelRow]) -> Result<Self> {
        let pooled = pool(set);
        let mut by_id: HashMap<&str, &LabelRow> = HashMap::new();
        for row in labels {
            if set.index_of(&row.image_id).is_none() {
                return Err(Error::UnknownId(row.image_id.clone()));
            }
            if by_id.insert(&row.image_id, row).is_some() {
                return Err(Error::Parse(format!("image {:?} is labelled twice", row.image_id)));
            }
        }
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut split = Vec::new();
        for (m, id) in set.image_ids().iter().enumerate() {
            if let Some(row) = by_id.get(id.as_str()) {
                rows.push(pooled.row(m));
                y.push(row.label);
                split.push(row.split);
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no labelled images in the embedding set".into()));
        }
        let features = ndarray::stack(Axis(0), &rows).expect("rows share d");
        let n_classes = y.iter().max().map_or(0, |m| m + 1);
        LabeledPool::new(features, y, n_classes, split)
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn indices(&self, s: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.split[i] == s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_id: String,
    pub label: usize,
    pub split: Split,
}

pub fn read_labels_csv<R: io::Read>(input: R) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn load_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    read_labels_csv(std::fs::File::open(path)?)
}

pub fn write_labels_csv<W: io::Write>(rows: &[LabelRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub lr_range: (f64, f64),
    pub wd_range: (f64, f64),
    pub trials: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            batch: 1024,
            momentum: 0.9,
            lr_range: (1e-3, 1e-2),
            wd_range: (1e-5, 1e-4),
            trials: 5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !range_ok(self.lr_range) {
            return Err(Error::InvalidArgument(format!(
                "bad learning-rate range {:?}",
                self.lr_range
            )));
        }
        if !range_ok(self.wd_range) {
            return Err(Error::InvalidArgument(format!(
                "bad weight-decay range {:?}",
                self.wd_range
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.trials == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch and trials must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Logits are `x · w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    /// `[d × n_classes]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ProbeWeights {
    pub fn zeros(d: usize, n_classes: usize) -> Self {
        ProbeWeights {
            w: Array2::zeros((d, n_classes)),
            b: Array1::zeros(n_classes),
        }
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w) + self.b.view().insert_axis(Axis(0))
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (c, v)| if *v > row[best] { c } else { best })
}

/// Top-1 accuracy on the validation split.
pub fn evaluate_probe(weights: &ProbeWeights, data: &LabeledPool) -> Result<f64> {
    if weights.w.nrows() != data.dim() || weights.w.ncols() != data.n_classes {
        return Err(Error::Shape(format!(
            "probe is {:?}, data has d = {} and {} classes",
            weights.w.dim(),
            data.dim(),
            data.n_classes
        )));
    }
    let val = data.indices(Split::Val);
    let x = data.features.select(Axis(0), &val);
    let logits = weights.logits(x.view());
    let correct = val
        .iter()
        .zip(logits.rows())
        .filter(|(&i, row)| argmax(row.view()) == data.labels[i])
        .count();
    Ok(correct as f64 / val.len() as f64)
}

/// Mean cross-entropy over `rows` and, when `grad` is given, its gradient.
fn cross_entropy(weights: &ProbeWeights, data: &LabeledPool, rows: &[usize], grad: Option<&mut ProbeWeights>) -> f64 {
    let x = data.features.select(Axis(0), rows);
    let mut probs = weights.logits(x.view());
    let mut loss = 0.0;
    for (mut row, &i) in probs.rows_mut().into_iter().zip(rows) {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[data.labels[i]].ln();
    }
    let inv = 1.0 / rows.len() as f64;
    if let Some(g) = grad {
        for (mut row, &i) in probs.rows_mut().into_iter().zip(rows) {
            row[data.labels[i]] -= 1.0;
        }
        probs *= inv;
        g.w = x.t().dot(&probs);
        g.b = probs.sum_axis(Axis(0));
    }
    loss * inv
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Completed,
    Aborted { epoch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub trial: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub status: TrialStatus,
    /// Full training-split loss after each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub weights: ProbeWeights,
    pub best_trial: usize,
    pub best_val_top1: f64,
    pub trials: Vec<TrialLog>,
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn run_trial(data: &LabeledPool, cfg: &ProbeConfig, trial: usize) -> (TrialLog, Option<ProbeWeights>) {
    let mut rng = Seeds::new(cfg.seed).indexed_stream(PROBE_TRIALS, trial as u64);
    let lr = log_uniform(&mut rng, cfg.lr_range);
    let wd = log_uniform(&mut rng, cfg.wd_range);
    let mut log = TrialLog {
        trial,
        lr,
        weight_decay: wd,
        status: TrialStatus::Completed,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        val_top1: None,
    };
    let (d, c) = (data.dim(), data.n_classes);
    let mut weights = ProbeWeights::zeros(d, c);
    let mut velocity = ProbeWeights::zeros(d, c);
    let mut grad = ProbeWeights::zeros(d, c);
    let train = data.indices(Split::Train);
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        let rate = lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        order.shuffle(&mut rng);
        let mut finite = true;
        for batch in order.chunks(cfg.batch) {
            let loss = cross_entropy(&weights, data, batch, Some(&mut grad));
            if !loss.is_finite() {
                finite = false;
                break;
            }
            velocity.w = &velocity.w * cfg.momentum + &grad.w;
            velocity.b = &velocity.b * cfg.momentum + &grad.b;
            weights.w *= 1.0 - rate * wd;
            weights.w.scaled_add(-rate, &velocity.w);
            weights.b.scaled_add(-rate, &velocity.b);
        }
        let epoch_loss = if finite {
            cross_entropy(&weights, data, &train, None)
        } else {
            f64::NAN
        };
        if !epoch_loss.is_finite() || weights.w.iter().any(|v| !v.is_finite()) {
            log.status = TrialStatus::Aborted { epoch };
            return (log, None);
        }
        log.epoch_losses.push(epoch_loss);
    }
    log.val_top1 = Some(evaluate_probe(&weights, data).expect("shapes match"));
    (log, Some(weights))
}

/// Runs `cfg.trials` independent trials and keeps the best by validation top-1
/// (earliest trial on ties). Fails only when every trial diverged.
pub fn train_probe(data: &LabeledPool, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let outcomes: Vec<(TrialLog, Option<ProbeWeights>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(data, cfg, t))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (t, (log, _)) in outcomes.iter().enumerate() {
        if let Some(acc) = log.val_top1 {
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((t, acc));
            }
        }
    }
    let (best_trial, best_val_top1) = best.ok_or(Error::NonFinite {
        step: 0,
        learning_rate: cfg.lr_range.1,
    })?;
    let mut trials = Vec::with_capacity(outcomes.len());
    let mut weights = None;
    for (t, (log, w)) in outcomes.into_iter().enumerate() {
        if t == best_trial {
            weights = w;
        }
        trials.push(log);
    }
    Ok(ProbeResult {
        weights: weights.expect("best trial completed"),
        best_trial,
        best_val_top1,
        trials,
    })
}

#[derive(Serialize)]
struct TrialRow {
    trial: String,
    lr: f64,
    weight_decay: f64,
    status: String,
    epochs_completed: usize,
    final_train_loss: Option<f64>,
    val_top1: Option<f64>,
}

/// One row per trial plus a final `best` row repeating the selected trial.
pub fn write_probe_csv<W: io::Write>(result: &ProbeResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let row = |log: &TrialLog, name: String| TrialRow {
        trial: name,
        lr: log.lr,
        weight_decay: log.weight_decay,
        status: match log.status {
            TrialStatus::Completed => "completed".into(),
            TrialStatus::Aborted { epoch } => format!("aborted_nonfinite_epoch_{epoch}"),
        },
        epochs_completed: log.epoch_losses.len(),
        final_train_loss: log.epoch_losses.last().copied(),
        val_top1: log.val_top1,
    };
    for log in &result.trials {
        w.serialize(row(log, log.trial.to_string()))?;
    }
    w.serialize(row(&result.trials[result.best_trial], "best".into()))?;
    w.flush()?;
    Ok(())
}
