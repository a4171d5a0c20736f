use rayon::prelude::*;

use super::forest::{Node, SpForest, SpTrainConfig, Tree};
use crate::domain::{softmax, Situation, TaxonomySubset};
use crate::error::{Error, Result};
use crate::features::SP_FEATURE_DIM;

pub type SpRow = [f64; SP_FEATURE_DIM];

const NONE: u32 = u32::MAX;
const PRIOR_FLOOR: f64 = 1e-7;

/// An f32 `t` next to the midpoint with `a < t <= b`, or `None` when no f32
/// separates the two values.
pub fn threshold_between(a: f64, b: f64) -> Option<f32> {
    let mid = (a + (b - a) / 2.0) as f32;
    [mid, mid.next_up(), mid.next_down()]
        .into_iter()
        .find(|&t| a < f64::from(t) && f64::from(t) <= b)
}

/// Second-order split gain, already net of `min_gain`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, cfg: &SpTrainConfig) -> f64 {
    let score = |g: f64, h: f64| {
        let d = h + cfg.l2_reg;
        if d > 0.0 {
            g * g / d
        } else {
            0.0
        }
    };
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - cfg.min_gain
}

pub fn leaf_weight(g: f64, h: f64, cfg: &SpTrainConfig) -> f32 {
    let d = h + cfg.l2_reg;
    if d > 0.0 {
        (-g / d * cfg.shrinkage) as f32
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f32,
    pub gain: f64,
}

/// Row indices sorted by each feature (ties by row index).
pub struct Presorted(Vec<Vec<u32>>);

impl Presorted {
    pub fn new(x: &[SpRow]) -> Self {
        Presorted(
            (0..SP_FEATURE_DIM)
                .map(|f| {
                    let mut idx: Vec<u32> = (0..x.len() as u32).collect();
                    idx.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]).then(a.cmp(&b)));
                    idx
                })
                .collect(),
        )
    }
}

/// Best split per node for every node in `node_of` (rows mapped to `NONE`
/// are ignored). Features are scanned in increasing index and thresholds in
/// increasing value; only a strictly larger gain replaces the incumbent.
fn scan_level(
    x: &[SpRow],
    g: &[f64],
    h: &[f64],
    sorted: &Presorted,
    node_of: &[u32],
    totals: &[(f64, f64)],
    cfg: &SpTrainConfig,
) -> Vec<Option<SplitCandidate>> {
    let n_nodes = totals.len();
    let mut best: Vec<Option<SplitCandidate>> = vec![None; n_nodes];
    let mut state: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, f64::NAN); n_nodes];
    for (f, order) in sorted.0.iter().enumerate() {
        state.iter_mut().for_each(|s| *s = (0.0, 0.0, f64::NAN));
        for &row in order {
            let row = row as usize;
            let n = node_of[row];
            if n == NONE {
                continue;
            }
            let n = n as usize;
            let v = x[row][f];
            let (gl, hl, last) = state[n];
            if v > last {
                let (gt, ht) = totals[n];
                let hr = ht - hl;
                if hl >= cfg.min_child_weight && hr >= cfg.min_child_weight {
                    if let Some(t) = threshold_between(last, v) {
                        let gain = split_gain(gl, hl, gt - gl, hr, cfg);
                        if gain > best[n].map_or(0.0, |b| b.gain) {
                            best[n] = Some(SplitCandidate {
                                feature: f,
                                threshold: t,
                                gain,
                            });
                        }
                    }
                }
            }
            state[n] = (gl + g[row], hl + h[row], v);
        }
    }
    best
}

fn node_totals(g: &[f64], h: &[f64], node_of: &[u32], n_nodes: usize) -> Vec<(f64, f64)> {
    let mut totals = vec![(0.0, 0.0); n_nodes];
    for (row, &n) in node_of.iter().enumerate() {
        if n != NONE {
            totals[n as usize].0 += g[row];
            totals[n as usize].1 += h[row];
        }
    }
    totals
}

/// Exact greedy search over the given rows; the building block of tree
/// growth, exposed for verification.
pub fn best_split(x: &[SpRow], g: &[f64], h: &[f64], rows: &[usize], cfg: &SpTrainConfig) -> Option<SplitCandidate> {
    let mut node_of = vec![NONE; x.len()];
    for &r in rows {
        node_of[r] = 0;
    }
    let totals = node_totals(g, h, &node_of, 1);
    scan_level(x, g, h, &Presorted::new(x), &node_of, &totals, cfg)[0]
}

/// Grows one regression tree level by level.
pub fn grow_tree(x: &[SpRow], g: &[f64], h: &[f64], sorted: &Presorted, cfg: &SpTrainConfig) -> Tree {
    let mut nodes = vec![Node::Leaf(0.0)];
    // frontier[i] = index in `nodes` of the i-th open node
    let mut frontier: Vec<usize> = vec![0];
    let mut node_of: Vec<u32> = vec![0; x.len()];
    for depth in 0..=cfg.max_depth {
        if frontier.is_empty() {
            break;
        }
        let totals = node_totals(g, h, &node_of, frontier.len());
        let splits = if depth < cfg.max_depth {
            scan_level(x, g, h, sorted, &node_of, &totals, cfg)
        } else {
            vec![None; frontier.len()]
        };
        let mut next = Vec::new();
        let mut remap = vec![(NONE, NONE); frontier.len()];
        for (i, (&tree_ix, split)) in frontier.iter().zip(&splits).enumerate() {
            match split {
                Some(s) => {
                    let (left, right) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[tree_ix] = Node::Split {
                        feature: s.feature as u8,
                        threshold: s.threshold,
                        left: left as u32,
                        right: right as u32,
                    };
                    remap[i] = (next.len() as u32, next.len() as u32 + 1);
                    next.push(left);
                    next.push(right);
                }
                None => {
                    let (gt, ht) = totals[i];
                    nodes[tree_ix] = Node::Leaf(leaf_weight(gt, ht, cfg));
                }
            }
        }
        for (row, n) in node_of.iter_mut().enumerate() {
            if *n == NONE {
                continue;
            }
            let i = *n as usize;
            *n = match splits[i] {
                Some(s) => {
                    if x[row][s.feature] < f64::from(s.threshold) {
                        remap[i].0
                    } else {
                        remap[i].1
                    }
                }
                None => NONE,
            };
        }
        frontier = next;
    }
    Tree { nodes }
}

fn check_training_set(x: &[SpRow], y: &[Situation], taxonomy: TaxonomySubset) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            context: "training labels",
            expected: x.len().to_string(),
            got: y.len().to_string(),
        });
    }
    if let Some(s) = y.iter().find(|s| !taxonomy.contains(**s)) {
        return Err(Error::InvalidInput(format!("label {s} is outside the C={} taxonomy", taxonomy.size())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    Ok(())
}

pub(crate) fn class_prior(y: &[Situation], c: usize) -> Vec<f64> {
    let mut prior = vec![0.0; c];
    for s in y {
        prior[s.index()] += 1.0;
    }
    prior.iter_mut().for_each(|p| *p /= y.len() as f64);
    prior
}

fn log_loss(scores: &[f64], y: &[Situation], c: usize) -> f64 {
    let total: f64 = scores
        .chunks(c)
        .zip(y)
        .map(|(s, label)| {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - s[label.index()]
        })
        .sum();
    total / y.len() as f64
}

/// Multiclass softmax boosting. Base scores are the log class priors, so a
/// single-class training set is predicted with near certainty from the
/// start.
pub fn sp_train(x: &[SpRow], y: &[Situation], taxonomy: TaxonomySubset, cfg: &SpTrainConfig) -> Result<SpForest> {
    cfg.validate()?;
    check_training_set(x, y, taxonomy)?;
    let c = taxonomy.size();
    let n = x.len();
    let base_scores: Vec<f32> = class_prior(y, c).iter().map(|p| p.max(PRIOR_FLOOR).ln() as f32).collect();
    let mut scores: Vec<f64> = (0..n).flat_map(|_| base_scores.iter().map(|&b| f64::from(b))).collect();
    let sorted = Presorted::new(x);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut train_loss = vec![log_loss(&scores, y, c)];
    for _ in 0..cfg.rounds {
        let probs: Vec<f64> = scores.chunks(c).flat_map(softmax).collect();
        let trees: Vec<Tree> = (0..c)
            .into_par_iter()
            .map(|k| {
                let (g, h): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| {
                        let p = probs[i * c + k];
                        let target = if y[i].index() == k { 1.0 } else { 0.0 };
                        (p - target, p * (1.0 - p))
                    })
                    .unzip();
                grow_tree(x, &g, &h, &sorted, cfg)
            })
            .collect();
        for (i, row) in x.iter().enumerate() {
            for (k, tree) in trees.iter().enumerate() {
                scores[i * c + k] += f64::from(tree.predict(row));
            }
        }
        train_loss.push(log_loss(&scores, y, c));
        rounds.push(trees);
    }
    Ok(SpForest {
        taxonomy,
        config: *cfg,
        base_scores,
        rounds,
        train_loss,
    })
}
