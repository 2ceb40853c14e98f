//! Mini-batch Adam training with per-epoch validation checkpointing, plus
//! eval-mode evaluation and the run logs both produce.
//!
//! Each epoch reshuffles the training set and walks it in batches without
//! replacement; every iteration runs forward → loss → backward → Adam. After
//! each epoch the network is scored on the validation set (mean foreground
//! dice, batch size 1) and the best-scoring snapshot is the one returned.

use crate::data::{batch, Dataset};
use crate::error::{Error, Result};
use crate::loss::{LabelMap, LossConfig};
use crate::metrics::{argmax_labels, dice, summarize, ClassSummary, MetricRow};
use crate::network::Network;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Optimization settings. Defaults: batch 5, learning rate 0.001, 400
/// epochs, one pass over the training set per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Batches per epoch; `None` means one full pass, `ceil(n / batch_size)`.
    pub iterations_per_epoch: Option<usize>,
    pub loss: LossConfig,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            batch_size: 5,
            learning_rate: 0.001,
            epochs: 400,
            iterations_per_epoch: None,
            loss: LossConfig::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::Config("iterations_per_epoch must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be finite and positive, got {}",
                self.epsilon
            )));
        }
        self.loss.validate()
    }
}

/// Bias-corrected Adam with one first/second moment buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(net: &Network, hp: &Hyperparams) -> Adam {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.data().len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: hp.beta1,
            beta2: hp.beta2,
            epsilon: hp.epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from per-parameter gradients in canonical order.
    pub fn step(&mut self, net: &mut Network, grads: &[&[f64]], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", "parameter count", self.m.len(), grads.len()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::shape("adam_step", "gradient numel", self.m[i].len(), g.len()));
            }
            let data = net.param_data_mut(i);
            for (j, &gj) in g.iter().enumerate() {
                let m = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                let v = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                self.m[i][j] = m;
                self.v[i][j] = v;
                data[j] -= lr * (m / c1) / ((v / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One optimization-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Mean of the per-pixel weight map for this batch (1.0 in uniform mode).
    pub mean_weight: f64,
}

/// One per-epoch validation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub mean_val_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub validation: Vec<ValidationRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,loss,mean_weight";
pub const VALIDATION_LOG_HEADER: &str = "epoch,mean_val_dice";

impl TrainLog {
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.loss, r.mean_weight));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_validation_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(VALIDATION_LOG_HEADER);
        out.push('\n');
        for r in &self.validation {
            out.push_str(&format!("{},{}\n", r.epoch, r.mean_val_dice));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Result of a training run: the best-validation snapshot (or the final
/// network when there is no validation set) and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: TrainLog,
    /// `(epoch, mean_val_dice)` of the returned snapshot; `None` without a
    /// validation set.
    pub best: Option<(usize, f64)>,
}

/// Train `net` and return the best-validation snapshot plus the log.
pub fn train(
    mut net: Network,
    train_set: &Dataset,
    val_set: &Dataset,
    hp: &Hyperparams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    let n = train_set.len();
    if n == 0 {
        return Err(Error::Usage("training set is empty".into()));
    }
    if hp.batch_size > n {
        return Err(Error::Usage(format!(
            "batch_size {} exceeds training-set size {n}",
            hp.batch_size
        )));
    }
    let iterations = hp
        .iterations_per_epoch
        .unwrap_or_else(|| n.div_ceil(hp.batch_size));

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = Adam::new(&net, hp);
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64)> = None;
    let mut best_net: Option<Network> = None;

    for epoch in 1..=hp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0usize;
        for _ in 0..iterations {
            // Without replacement within a pass; a fresh shuffled pass
            // starts whenever the current one is exhausted.
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + hp.batch_size).min(order.len());
            let picks: Vec<&_> = order[cursor..end]
                .iter()
                .map(|&i| &train_set.samples[i])
                .collect();
            cursor = end;

            let (shape, images, labels) = batch(&picks)?;
            let images = Tensor::new(shape, images)?;
            let mut fwd = net.forward_train(&images, &mut rng)?;
            let outcome = crate::loss::loss_step(&mut fwd.tape, fwd.probs, &labels, &hp.loss)?;
            let loss = fwd.tape.data(outcome.loss)[0];
            let step = adam.step_count() + 1;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} at step {step} (epoch {epoch}); \
                     parameter max-abs {:.3e}",
                    param_max_abs(&net)
                )));
            }
            fwd.tape.backward(outcome.loss)?;
            let grads: Vec<&[f64]> = fwd
                .param_ids
                .iter()
                .map(|&id| {
                    fwd.tape
                        .grad(id)
                        .ok_or_else(|| Error::Numerical("missing parameter gradient".into()))
                })
                .collect::<Result<_>>()?;
            adam.step(&mut net, &grads, hp.learning_rate)?;
            if !param_max_abs(&net).is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters diverged to non-finite values at step {step} (epoch {epoch})"
                )));
            }
            log.records.push(TrainRecord {
                step,
                epoch,
                loss,
                mean_weight: outcome.weights.mean(),
            });
        }

        if !val_set.is_empty() {
            let val_dice = mean_foreground_dice(&net, val_set)?;
            log.validation.push(ValidationRecord { epoch, mean_val_dice: val_dice });
            if best.is_none_or(|(_, d)| val_dice > d) {
                best = Some((epoch, val_dice));
                best_net = Some(net.clone());
            }
        }
    }

    Ok(TrainOutcome {
        network: best_net.unwrap_or(net),
        log,
        best,
    })
}

fn param_max_abs(net: &Network) -> f64 {
    net.params()
        .iter()
        .flat_map(|p| p.data())
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
}

/// Mean dice over all (validation image, foreground class) pairs.
pub fn mean_foreground_dice(net: &Network, set: &Dataset) -> Result<f64> {
    let report = evaluate(net, set, false)?;
    let total: f64 = report.rows.iter().map(|r| r.dice).sum();
    Ok(total / report.rows.len() as f64)
}

/// Per-image, per-class dice rows plus their per-class summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<ClassSummary>,
    /// Rows where prediction and truth were both empty (dice 1.0 by
    /// convention).
    pub degenerate_rows: usize,
}

/// Eval-mode forward per image (batch size 1), argmax, per-class dice.
pub fn evaluate(net: &Network, set: &Dataset, include_background: bool) -> Result<RunReport> {
    let mut preds = Vec::with_capacity(set.len());
    for s in &set.samples {
        let (shape, images, _) = batch(&[s])?;
        let images = Tensor::new(shape, images)?;
        let fwd = net.forward_eval(&images)?;
        preds.push(argmax_labels(&fwd.tape, fwd.probs)?);
    }
    report(&preds, set, include_background)
}

/// Score externally supplied label maps against a dataset's ground truth;
/// `evaluate` is this applied to the network's argmax predictions.
pub fn report(preds: &[LabelMap], set: &Dataset, include_background: bool) -> Result<RunReport> {
    if preds.len() != set.len() {
        return Err(Error::shape("report", "predictions", set.len(), preds.len()));
    }
    let first_class = if include_background { 0 } else { 1 };
    let mut rows = Vec::with_capacity(set.len() * (set.num_classes - first_class));
    let mut degenerate_rows = 0usize;
    for (pred, sample) in preds.iter().zip(&set.samples) {
        for class_id in first_class..set.num_classes {
            let score = dice(pred, &sample.mask, class_id)?;
            degenerate_rows += score.degenerate as usize;
            rows.push(MetricRow {
                image_id: sample.id.clone(),
                class_id,
                dice: score.value,
            });
        }
    }
    let summaries = summarize(&rows)?;
    Ok(RunReport { rows, summaries, degenerate_rows })
}
