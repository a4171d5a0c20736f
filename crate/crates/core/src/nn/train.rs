use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::uamat::{loss, snap, Batch, Mode, UamatModel, BN_MOMENTUM};
use crate::domain::{argmax_situation, Situation};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            decay_rate: 0.96,
            decay_steps: 1000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidInput("lr0, batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput("validation_fraction must be within [0, 0.5)".into()));
        }
        Ok(())
    }

    /// Staircase decay: `lr0 · decay_rate^⌊iteration / decay_steps⌋`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr0 * self.decay_rate.powi((iteration / self.decay_steps.max(1)) as i32)
    }
}

/// One training input.
#[derive(Debug, Clone, Copy)]
pub struct UamatExample<'a> {
    pub mel: &'a MelSpectrogram,
    pub user: &'a [f32],
    pub label: Situation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub iterations: usize,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Mean clipped cross-entropy and accuracy (fraction) in inference mode.
pub fn evaluate(model: &UamatModel, examples: &[UamatExample<'_>]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let per: Vec<(f64, bool)> = examples
        .par_iter()
        .map(|e| {
            let p = model.forward(e.mel, e.user, false)?;
            Ok((loss(&p, e.label)?, argmax_situation(&p) == e.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(|(l, _)| l).sum::<f64>() / n,
        per.iter().filter(|(_, ok)| *ok).count() as f64 / n,
    ))
}

/// Per-situation seeded holdout of `fraction` of the examples.
fn stratified_holdout(examples: &[UamatExample<'_>], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<Situation, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, mut idx) in by_class {
        idx.shuffle(&mut rng::derived(seed, "holdout", s.index() as u64));
        let k = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &UamatModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One step; parameters stay float32-representable.
    fn step(&mut self, model: &mut UamatModel, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, param) in model.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in param.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w = snap(*w - update);
            }
        }
    }
}

fn check_examples(model: &UamatModel, examples: &[UamatExample<'_>]) -> Result<()> {
    for e in examples {
        model.check_mel(e.mel)?;
        model.check_user(e.user)?;
        if !model.config.taxonomy.contains(e.label) {
            return Err(Error::InvalidInput(format!(
                "label {} is outside the C={} taxonomy",
                e.label,
                model.n_classes()
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam with staircase decay and early stopping on validation
/// loss; returns the parameters of the best validation epoch.
pub fn train(mut model: UamatModel, examples: &[UamatExample<'_>], cfg: &TrainConfig) -> Result<(UamatModel, TrainHistory)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    check_examples(&model, examples)?;
    let (train_ix, val_ix) = stratified_holdout(examples, cfg.validation_fraction, cfg.seed);
    if train_ix.is_empty() {
        return Err(Error::InvalidInput("no training examples left after the validation holdout".into()));
    }
    let val: Vec<UamatExample<'_>> = val_ix.iter().map(|&i| examples[i]).collect();

    let mut adam = Adam::new(&model);
    let mut iteration = 0usize;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, UamatModel)> = None;
    for epoch in 0..cfg.max_epochs {
        let mut order = train_ix.clone();
        order.shuffle(&mut rng::derived(cfg.seed, "epoch", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch {
                mels: chunk.iter().map(|&i| examples[i].mel.data.as_slice()).collect(),
                users: chunk.iter().map(|&i| examples[i].user).collect(),
                labels: chunk.iter().map(|&i| examples[i].label.index()).collect(),
                dropout_seed: rng::mix(cfg.seed, iteration as u64),
            };
            let res = model.loss_and_grads(&batch, Mode::TRAIN)?;
            model.running_mean = snap(BN_MOMENTUM * model.running_mean + (1.0 - BN_MOMENTUM) * res.mean);
            model.running_var = snap(BN_MOMENTUM * model.running_var + (1.0 - BN_MOMENTUM) * res.var);
            adam.step(&mut model, &res.grads, cfg.lr_at(iteration), cfg);
            loss_sum += res.loss * chunk.len() as f64;
            correct += res.correct;
            iteration += 1;
        }
        let n = train_ix.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&model, &val)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch,
            lr: cfg.lr_at(iteration.saturating_sub(1)),
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        tracing::debug!(?record, "epoch finished");
        let score = val_loss.unwrap_or(record.train_loss);
        epochs.push(record);
        if !score.is_finite() {
            return Err(Error::InvalidInput(format!("training diverged at epoch {epoch} (loss {score})")));
        }
        match &best {
            Some((b, _, _)) if score >= *b => {}
            _ => best = Some((score, epoch, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let history = TrainHistory {
        config: *cfg,
        epochs,
        best_epoch,
        iterations: iteration,
        n_train: train_ix.len(),
        n_validation: val.len(),
    };
    Ok((best_model, history))
}
