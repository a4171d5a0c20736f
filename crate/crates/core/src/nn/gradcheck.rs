//! Central-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::train::UamatExample;
use super::uamat::{Batch, LayerKind, Mode, UamatModel};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Smallest step tried when a perturbation crosses a ReLU or pooling
    /// boundary.
    pub min_epsilon: f64,
    /// Parameters sampled per layer kind (all of them when fewer exist).
    pub samples_per_kind: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            min_epsilon: 1e-8,
            samples_per_kind: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step actually used; smaller than `epsilon` when the first step
    /// crossed a non-differentiable point.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_kind: BTreeMap<String, f64>,
    pub samples: Vec<GradSample>,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn kind_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::BatchNorm => "batch_norm",
        LayerKind::Conv => "conv",
        LayerKind::Dense => "dense",
    }
}

/// Picks parameter coordinates of one kind: the first entry of every
/// tensor, then uniform draws.
fn sample_coordinates(model: &UamatModel, kind: LayerKind, wanted: usize, seed: u64) -> Vec<(usize, usize)> {
    let blocks: Vec<(usize, usize)> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == kind)
        .map(|(i, p)| (i, p.tensor.len()))
        .collect();
    let total: usize = blocks.iter().map(|b| b.1).sum();
    if total <= wanted {
        return blocks.iter().flat_map(|&(i, n)| (0..n).map(move |j| (i, j))).collect();
    }
    let mut picked: Vec<(usize, usize)> = blocks.iter().map(|&(i, _)| (i, 0)).collect();
    let mut r = rng::derived(seed, kind_name(kind), 0);
    while picked.len() < wanted {
        let mut at = r.random_range(0..total);
        for &(i, n) in &blocks {
            if at < n {
                if !picked.contains(&(i, at)) {
                    picked.push((i, at));
                }
                break;
            }
            at -= n;
        }
    }
    picked
}

fn make_batch<'a>(model: &UamatModel, examples: &[UamatExample<'a>]) -> Result<Batch<'a>> {
    for e in examples {
        model.check_mel(e.mel)?;
        model.check_user(e.user)?;
    }
    Ok(Batch {
        mels: examples.iter().map(|e| e.mel.data.as_slice()).collect(),
        users: examples.iter().map(|e| e.user).collect(),
        labels: examples
            .iter()
            .map(|e| {
                if model.config.taxonomy.contains(e.label) {
                    Ok(e.label.index())
                } else {
                    Err(Error::InvalidInput(format!("label {} is outside the taxonomy", e.label)))
                }
            })
            .collect::<Result<_>>()?,
        dropout_seed: 0,
    })
}

/// Mean loss of `examples` as one batch (batch statistics, no dropout) and
/// its gradient, one vector per parameter tensor.
pub fn batch_gradients(model: &UamatModel, examples: &[UamatExample<'_>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let res = model.loss_and_grads(&make_batch(model, examples)?, Mode::GRAD_CHECK)?;
    Ok((res.loss, res.grads))
}

/// Compares backpropagated gradients of the mean batch loss (batch
/// statistics, no dropout) with central differences on sampled parameters.
/// A difference whose ±step changes any ReLU or pooling decision is
/// retaken with a tenfold smaller step, down to `min_epsilon`.
pub fn grad_check(model: &UamatModel, examples: &[UamatExample<'_>], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("gradient check needs at least one example".into()));
    }
    if !(cfg.epsilon > 0.0) || !(cfg.min_epsilon > 0.0) || cfg.samples_per_kind == 0 {
        return Err(Error::InvalidInput("epsilon, min_epsilon and samples_per_kind must be positive".into()));
    }
    let batch = make_batch(model, examples)?;
    let base = model.loss_and_grads(&batch, Mode::GRAD_CHECK)?;
    let analytic = base.grads;
    let mut probe = model.clone();
    let mut samples = Vec::new();
    let mut per_kind = BTreeMap::new();
    for kind in [LayerKind::BatchNorm, LayerKind::Conv, LayerKind::Dense] {
        let mut worst: f64 = 0.0;
        for (p, j) in sample_coordinates(model, kind, cfg.samples_per_kind, cfg.seed) {
            let orig = model.params[p].tensor.data()[j];
            let mut step = cfg.epsilon;
            let numeric = loop {
                probe.params[p].tensor.data_mut()[j] = orig + step;
                let up = probe.loss_and_grads(&batch, Mode::GRAD_CHECK)?;
                probe.params[p].tensor.data_mut()[j] = orig - step;
                let down = probe.loss_and_grads(&batch, Mode::GRAD_CHECK)?;
                probe.params[p].tensor.data_mut()[j] = orig;
                let smooth = up.pattern == base.pattern && down.pattern == base.pattern;
                if smooth || step / 10.0 < cfg.min_epsilon {
                    break (up.loss - down.loss) / (2.0 * step);
                }
                step /= 10.0;
            };
            let a = analytic[p][j];
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            samples.push(GradSample {
                param: p,
                index: j,
                analytic: a,
                numeric,
                rel_error: rel,
                step,
            });
        }
        per_kind.insert(kind_name(kind).to_string(), worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_kind.values().copied().fold(0.0, f64::max),
        per_kind,
        samples,
    })
}
