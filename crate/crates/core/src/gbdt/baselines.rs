use super::train::{threshold_between, SpRow};
use crate::domain::{ProbabilityVector, Situation, TaxonomySubset};
use crate::error::{Error, Result};
use crate::features::SP_FEATURE_DIM;

fn check(x: &[SpRow], y: &[Situation], taxonomy: TaxonomySubset) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "need equally many rows and labels, at least one (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    if let Some(s) = y.iter().find(|s| !taxonomy.contains(**s)) {
        return Err(Error::InvalidInput(format!("label {s} is outside the C={} taxonomy", taxonomy.size())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    Ok(())
}

fn distribution(rows: &[usize], y: &[Situation], c: usize) -> Vec<f64> {
    let mut d = vec![0.0; c];
    for &r in rows {
        d[y[r].index()] += 1.0;
    }
    d.iter_mut().for_each(|v| *v /= rows.len() as f64);
    d
}

#[derive(Debug, Clone, PartialEq)]
enum DtNode {
    Split {
        feature: usize,
        threshold: f32,
        left: Box<DtNode>,
        right: Box<DtNode>,
    },
    Leaf(Vec<f64>),
}

/// A single CART tree with Gini impurity; leaves hold label frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    taxonomy: TaxonomySubset,
    root: DtNode,
}

fn gini_mass(counts: &[f64], n: f64) -> f64 {
    // n · impurity
    n - counts.iter().map(|k| k * k).sum::<f64>() / n
}

fn grow_dt(x: &[SpRow], y: &[Situation], rows: Vec<usize>, c: usize, depth: usize) -> DtNode {
    let dist = distribution(&rows, y, c);
    if depth == 0 || dist.iter().any(|&p| p == 1.0) {
        return DtNode::Leaf(dist);
    }
    let n = rows.len() as f64;
    let mut totals = vec![0.0; c];
    for &r in &rows {
        totals[y[r].index()] += 1.0;
    }
    let parent = gini_mass(&totals, n);
    let mut best: Option<(f64, usize, f32)> = None;
    for f in 0..SP_FEATURE_DIM {
        let mut order = rows.clone();
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left = vec![0.0; c];
        for (i, pair) in order.windows(2).enumerate() {
            left[y[pair[0]].index()] += 1.0;
            let (a, b) = (x[pair[0]][f], x[pair[1]][f]);
            if a == b {
                continue;
            }
            let Some(t) = threshold_between(a, b) else { continue };
            let nl = (i + 1) as f64;
            let right: Vec<f64> = totals.iter().zip(&left).map(|(t, l)| t - l).collect();
            let gain = parent - gini_mass(&left, nl) - gini_mass(&right, n - nl);
            if gain > best.map_or(1e-12, |b| b.0) {
                best = Some((gain, f, t));
            }
        }
    }
    match best {
        None => DtNode::Leaf(dist),
        Some((_, feature, threshold)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x[r][feature] < f64::from(threshold));
            DtNode::Split {
                feature,
                threshold,
                left: Box::new(grow_dt(x, y, l, c, depth - 1)),
                right: Box::new(grow_dt(x, y, r, c, depth - 1)),
            }
        }
    }
}

pub const DEFAULT_DT_DEPTH: usize = 8;

pub fn baseline_dt_train(x: &[SpRow], y: &[Situation], taxonomy: TaxonomySubset, max_depth: usize) -> Result<DecisionTree> {
    check(x, y, taxonomy)?;
    Ok(DecisionTree {
        taxonomy,
        root: grow_dt(x, y, (0..x.len()).collect(), taxonomy.size(), max_depth),
    })
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> Result<ProbabilityVector> {
        if x.len() != SP_FEATURE_DIM {
            return Err(Error::ShapeMismatch {
                context: "decision tree input",
                expected: SP_FEATURE_DIM.to_string(),
                got: x.len().to_string(),
            });
        }
        let mut node = &self.root;
        loop {
            match node {
                DtNode::Leaf(d) => return ProbabilityVector::new(d.clone()),
                DtNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] < f64::from(*threshold) { left } else { right },
            }
        }
    }

    pub fn taxonomy(&self) -> TaxonomySubset {
        self.taxonomy
    }
}

/// Feature indices expanded one-hot for nearest-neighbor distances.
const CATEGORICAL: [usize; 4] = [6, 7, 9, 10];
pub const DEFAULT_K: usize = 15;

#[derive(Debug, Clone)]
pub struct KnnModel {
    k: usize,
    taxonomy: TaxonomySubset,
    cardinality: [usize; 4],
    points: Vec<Vec<f64>>,
    labels: Vec<Situation>,
}

impl KnnModel {
    pub fn fit(x: &[SpRow], y: &[Situation], taxonomy: TaxonomySubset, k: usize) -> Result<Self> {
        check(x, y, taxonomy)?;
        if k == 0 || k > x.len() {
            return Err(Error::InvalidInput(format!("k must be within 1..={}, got {k}", x.len())));
        }
        let mut cardinality = [0usize; 4];
        for (slot, &f) in CATEGORICAL.iter().enumerate() {
            if let Some(v) = x.iter().map(|r| r[f]).find(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(Error::InvalidInput(format!("feature {f} must hold integer codes, got {v}")));
            }
            cardinality[slot] = x.iter().map(|r| r[f] as usize + 1).max().unwrap_or(1);
        }
        let mut model = KnnModel {
            k,
            taxonomy,
            cardinality,
            points: Vec::new(),
            labels: y.to_vec(),
        };
        model.points = x.iter().map(|r| model.expand(r)).collect();
        Ok(model)
    }

    /// Continuous features as-is, categorical codes one-hot; codes unseen in
    /// training map to the all-zero block.
    fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..SP_FEATURE_DIM).filter(|f| !CATEGORICAL.contains(f)).map(|f| x[f]).collect();
        for (slot, &f) in CATEGORICAL.iter().enumerate() {
            let mut block = vec![0.0; self.cardinality[slot]];
            if x[f] >= 0.0 && (x[f] as usize) < block.len() && x[f].fract() == 0.0 {
                block[x[f] as usize] = 1.0;
            }
            out.extend(block);
        }
        out
    }

    /// Label frequencies among the `k` nearest training points (ties in
    /// distance go to the earlier training row).
    pub fn predict(&self, x: &[f64]) -> Result<ProbabilityVector> {
        if x.len() != SP_FEATURE_DIM {
            return Err(Error::ShapeMismatch {
                context: "nearest-neighbor input",
                expected: SP_FEATURE_DIM.to_string(),
                got: x.len().to_string(),
            });
        }
        let q = self.expand(x);
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        d.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbors: Vec<usize> = d[..self.k].iter().map(|(_, i)| *i).collect();
        ProbabilityVector::new(distribution(&neighbors, &self.labels, self.taxonomy.size()))
    }
}

pub fn baseline_knn_predict(model: &KnnModel, x: &[f64]) -> Result<ProbabilityVector> {
    model.predict(x)
}
