//! SGD training with plateau-driven learning-rate decay, dev-set model
//! selection, and majority-vote ensembling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, RelationInstance};
use crate::error::{Error, Result};
use crate::eval::{gold_ids, predict_probabilities, score_model, score_with_breakdown, ScoreReport};
use crate::model::{argmax, ForwardMode, Model};
use crate::tensor::{ParamStore, RngState, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    /// Decay is only considered after this many epochs.
    pub decay_start_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// L2 penalty coefficient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_decay: 0.9,
            patience: 1,
            decay_start_epoch: 15,
            epochs: 60,
            batch_size: 50,
            seed: 1,
            max_grad_norm: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.max_grad_norm < 0.0 || self.weight_decay < 0.0 {
            return bad("max_grad_norm and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Learning-rate schedule: after `decay_start_epoch`, each run of
/// `patience` epochs without a strict dev-F1 improvement multiplies the rate
/// by `lr_decay` and restarts the count.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    lr0: f64,
    decay: f64,
    patience: usize,
    decay_start: usize,
    pub lr: f64,
    pub best_f1: f64,
    pub since_improvement: usize,
    pub decays: u32,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr0: cfg.lr,
            decay: cfg.lr_decay,
            patience: cfg.patience,
            decay_start: cfg.decay_start_epoch,
            lr: cfg.lr,
            best_f1: f64::NEG_INFINITY,
            since_improvement: 0,
            decays: 0,
        }
    }

    /// Record the dev F1 of 1-based `epoch` and return the rate for the next
    /// epoch. Returns whether this epoch was a strict improvement.
    pub fn update(&mut self, epoch: usize, dev_f1: f64) -> bool {
        let improved = dev_f1 > self.best_f1;
        if improved {
            self.best_f1 = dev_f1;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        if epoch > self.decay_start && self.since_improvement >= self.patience {
            self.decays += 1;
            self.lr = self.lr0 * self.decay.powi(self.decays as i32);
            self.since_improvement = 0;
        }
        improved
    }
}

/// `p ← p − lr·(g + weight_decay·p)` for every trainable tensor, then clear
/// the gradients. Frozen tensors are left untouched.
pub fn sgd_step(params: &mut ParamStore, lr: f64, weight_decay: f64) {
    for (_, t) in params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        let Some(g) = t.grad.take() else { continue };
        for (p, gi) in t.data_mut().iter_mut().zip(&g) {
            *p -= lr * (gi + weight_decay * *p);
        }
        t.grad = Some(vec![0.0; g.len()]);
    }
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn clip_gradients(params: &mut ParamStore, max_norm: f64) {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub dev_p: f64,
    pub dev_r: f64,
    pub dev_f1: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,dev_p,dev_r,dev_f1,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.loss, r.dev_p, r.dev_r, r.dev_f1, r.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_dev: ScoreReport,
    pub log: Vec<EpochMetrics>,
}

/// Run one epoch of mini-batch SGD over `train` in shuffled order and
/// return the mean training loss.
pub fn train_epoch(model: &mut Model, train: &[RelationInstance], cfg: &TrainConfig, lr: f64, rng: &mut RngState) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut order);
    let limit = model.config.encoder.max_len;
    let mut total = 0.0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&RelationInstance> = chunk.iter().map(|&i| &train[i]).collect();
        let batch = encode_batch(&refs, &model.vocabs, limit)?;
        let (loss, grads, stats) = {
            let mut tape = Tape::new(&model.params);
            let out = model.config.forward(&mut tape, &batch, ForwardMode::Train, rng)?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at batch {bi} (instances {}..)",
                    refs[0].id
                )));
            }
            (value, tape.backward(loss)?, out.encoder.stats)
        };
        model.params.accumulate(&grads);
        model.update_running_stats(&stats)?;
        if cfg.max_grad_norm > 0.0 {
            clip_gradients(&mut model.params, cfg.max_grad_norm);
        }
        sgd_step(&mut model.params, lr, cfg.weight_decay);
        total += loss * chunk.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// Train for `cfg.epochs` epochs, scoring on `dev` after each one and
/// keeping the parameters of the best epoch. `on_epoch` sees each log row
/// as it is produced.
pub fn train(
    model: &mut Model,
    train: &[RelationInstance],
    dev: &[RelationInstance],
    cfg: &TrainConfig,
    rng: &mut RngState,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("training and dev splits must be nonempty".into()));
    }
    let mut schedule = Schedule::new(cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ParamStore, usize, ScoreReport)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr;
        let loss = train_epoch(model, train, cfg, lr, rng)?;
        let (report, _) = score_model(model, dev, cfg.batch_size)?;
        let row = EpochMetrics {
            epoch,
            loss,
            dev_p: report.precision,
            dev_r: report.recall,
            dev_f1: report.f1,
            lr,
        };
        on_epoch(&row);
        log.push(row);
        if schedule.update(epoch, report.f1) {
            best = Some((model.params.clone(), epoch, report));
        }
    }
    let (best, best_epoch, best_dev) = best.expect("first epoch always improves");
    Ok(TrainOutcome { best, best_epoch, best_dev, log })
}

/// Majority vote across models. Ties are broken by the larger summed
/// softmax probability, then by the lower label id.
pub fn ensemble_predict(models: &[&Model], instances: &[RelationInstance], batch_size: usize) -> Result<Vec<usize>> {
    let Some(first) = models.first() else {
        return Err(Error::Usage("ensemble needs at least one checkpoint".into()));
    };
    if models.iter().any(|m| m.vocabs.labels != first.vocabs.labels) {
        return Err(Error::Config("ensemble members have different label sets".into()));
    }
    let c = first.num_labels();
    let mut votes = vec![vec![0usize; c]; instances.len()];
    let mut mass = vec![vec![0.0f64; c]; instances.len()];
    for m in models {
        for (i, p) in predict_probabilities(m, instances, batch_size)?.into_iter().enumerate() {
            votes[i][argmax(&p)] += 1;
            mass[i].iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
    }
    Ok(votes.iter().zip(&mass).map(|(v, m)| vote(v, m)).collect())
}

pub(crate) fn vote(votes: &[usize], mass: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..votes.len() {
        if votes[k] > votes[best] || (votes[k] == votes[best] && mass[k] > mass[best]) {
            best = k;
        }
    }
    best
}

/// Score an ensemble against gold labels.
pub fn score_ensemble(models: &[&Model], instances: &[RelationInstance], batch_size: usize) -> Result<(ScoreReport, Vec<usize>)> {
    let labels = &models
        .first()
        .ok_or_else(|| Error::Usage("ensemble needs at least one checkpoint".into()))?
        .vocabs
        .labels;
    let gold = gold_ids(instances, labels)?;
    let pred = ensemble_predict(models, instances, batch_size)?;
    Ok((score_with_breakdown(&gold, &pred, labels)?, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn no_decay_before_start() {
        let mut s = Schedule::new(&cfg());
        for e in 1..=15 {
            s.update(e, 0.0);
            assert_eq!(s.lr, 0.1);
        }
    }

    #[test]
    fn two_flat_epochs_decay_twice() {
        let mut s = Schedule::new(&cfg());
        for e in 1..=15 {
            s.update(e, e as f64);
        }
        s.update(16, 1.0);
        assert_eq!(s.lr, 0.1 * 0.9);
        s.update(17, 1.0);
        assert_eq!(s.lr, 0.1 * 0.9f64.powi(2));
        s.update(18, 100.0);
        assert_eq!(s.decays, 2);
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap().with_grad());
        p.get_mut("w").unwrap().grad = Some(vec![0.5, -1.0]);
        sgd_step(&mut p, 0.1, 0.0);
        let w = p.get("w").unwrap();
        assert_eq!(w.data(), &[1.0 - 0.05, -2.0 + 0.1]);
        assert_eq!(w.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![3.0]).unwrap().with_grad());
        let mut prev = 3.0f64;
        for _ in 0..50 {
            let w = p.get("w").unwrap().data()[0];
            p.get_mut("w").unwrap().grad = Some(vec![w]);
            sgd_step(&mut p, 0.5, 0.0);
            let now = p.get("w").unwrap().data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn vote_tie_breaks() {
        // A,A,B,B,C with B holding more probability mass.
        assert_eq!(vote(&[2, 2, 1], &[1.5, 1.9, 1.6]), 1);
        assert_eq!(vote(&[2, 2, 1], &[1.5, 1.5, 2.0]), 0);
        assert_eq!(vote(&[0, 5, 0], &[0.0, 5.0, 0.0]), 1);
    }

    #[test]
    fn csv_layout() {
        let rows = [EpochMetrics { epoch: 1, loss: 0.5, dev_p: 0.25, dev_r: 0.5, dev_f1: 1.0 / 3.0, lr: 0.1 }];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        assert_eq!(lines.next().unwrap().split(',').count(), 6);
    }
}
