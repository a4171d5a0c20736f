use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::domain::{ProbabilityVector, Situation, TaxonomySubset};
use crate::error::{Error, Result};
use crate::features::{SP_FEATURE_DIM, SP_FEATURE_NAMES};

pub const SPF_MAGIC: &[u8; 4] = b"SPF1";
pub const SPF_VERSION: u32 = 1;
const NODE_BYTES: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpTrainConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub l2_reg: f64,
    pub min_child_weight: f64,
    pub min_gain: f64,
}

impl Default for SpTrainConfig {
    fn default() -> Self {
        SpTrainConfig {
            rounds: 100,
            max_depth: 6,
            shrinkage: 0.3,
            l2_reg: 1.0,
            min_child_weight: 1.0,
            min_gain: 0.0,
        }
    }
}

impl SpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidInput("rounds must be at least 1".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::InvalidInput(format!("shrinkage must be in (0, 1], got {}", self.shrinkage)));
        }
        if self.l2_reg < 0.0 || self.min_child_weight < 0.0 || self.min_gain < 0.0 {
            return Err(Error::InvalidInput("l2_reg, min_child_weight and min_gain must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Rows with `x[feature] < threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: u8,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf(f32),
}

/// A regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(weight: f32) -> Self {
        Tree { nodes: vec![Node::Leaf(weight)] }
    }

    pub fn predict(&self, x: &[f64]) -> f32 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf(w) => return w,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] < f64::from(threshold) {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left as usize).max(go(nodes, right as usize)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Boosted multiclass forest: per-class base scores plus one tree per class
/// per round.
#[derive(Debug, Clone, PartialEq)]
pub struct SpForest {
    pub taxonomy: TaxonomySubset,
    pub config: SpTrainConfig,
    pub base_scores: Vec<f32>,
    /// `rounds[r][c]` is class c's tree in round r.
    pub rounds: Vec<Vec<Tree>>,
    /// Training log-loss after each round, index 0 before any tree.
    pub train_loss: Vec<f64>,
}

impl SpForest {
    /// No trees and zero scores: predicts the uniform distribution.
    pub fn empty(taxonomy: TaxonomySubset) -> Self {
        SpForest {
            taxonomy,
            config: SpTrainConfig::default(),
            base_scores: vec![0.0; taxonomy.size()],
            rounds: Vec::new(),
            train_loss: Vec::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.taxonomy.size()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = self.base_scores.iter().map(|&b| f64::from(b)).collect();
        for round in &self.rounds {
            for (c, tree) in round.iter().enumerate() {
                s[c] += f64::from(tree.predict(x));
            }
        }
        s
    }

    pub fn max_depth(&self) -> usize {
        self.rounds.iter().flatten().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    /// Hex SHA-256 of the serialized forest.
    pub fn hash(&self) -> String {
        binfmt::content_hash(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        SpForest::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Like [`SpForest::load`], but fails unless the forest was trained for
    /// `expected`.
    pub fn load_for(path: &Path, expected: TaxonomySubset) -> Result<Self> {
        let f = SpForest::load(path)?;
        if f.taxonomy != expected {
            return Err(Error::TaxonomyMismatch {
                found: f.taxonomy.size(),
                expected: expected.size(),
            });
        }
        Ok(f)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SPF_MAGIC)?;
        binfmt::write_u32(w, SPF_VERSION)?;
        let header = SpfHeader {
            config: self.config,
            n_classes: self.n_classes(),
            feature_names: SP_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            n_rounds: self.rounds.len(),
            train_loss: self.train_loss.clone(),
        };
        binfmt::write_json_header(w, &header)?;
        for &b in &self.base_scores {
            binfmt::write_f32(w, b)?;
        }
        for tree in self.rounds.iter().flatten() {
            binfmt::write_u32(w, tree.nodes.len() as u32)?;
            for node in &tree.nodes {
                let mut rec = [0u8; NODE_BYTES];
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        rec[0] = feature;
                        rec[1..5].copy_from_slice(&threshold.to_le_bytes());
                        rec[5..9].copy_from_slice(&left.to_le_bytes());
                        rec[9..13].copy_from_slice(&right.to_le_bytes());
                    }
                    Node::Leaf(weight) => {
                        rec[13] = 1;
                        rec[14..18].copy_from_slice(&weight.to_le_bytes());
                    }
                }
                w.write_all(&rec)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::expect_magic(r, SPF_MAGIC)?;
        binfmt::expect_version(r, SPF_VERSION)?;
        let header: SpfHeader = binfmt::read_json_header(r)?;
        let taxonomy = TaxonomySubset::new(header.n_classes)?;
        if header.feature_names.len() != SP_FEATURE_DIM {
            return Err(Error::Format(format!(
                "forest expects {} features, this build uses {SP_FEATURE_DIM}",
                header.feature_names.len()
            )));
        }
        let c = taxonomy.size();
        let base_scores = (0..c).map(|_| binfmt::read_f32(r, "base scores")).collect::<Result<Vec<_>>>()?;
        let mut rounds = Vec::with_capacity(header.n_rounds);
        for _ in 0..header.n_rounds {
            let mut round = Vec::with_capacity(c);
            for _ in 0..c {
                round.push(read_tree(r)?);
            }
            rounds.push(round);
        }
        Ok(SpForest {
            taxonomy,
            config: header.config,
            base_scores,
            rounds,
            train_loss: header.train_loss,
        })
    }
}

fn read_tree<R: Read>(r: &mut R) -> Result<Tree> {
    let n = binfmt::read_u32(r, "tree size")? as usize;
    if n == 0 {
        return Err(Error::Format("tree with no nodes".into()));
    }
    let mut nodes = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let mut rec = [0u8; NODE_BYTES];
        r.read_exact(&mut rec)
            .map_err(|_| Error::Format("truncated file while reading tree nodes".into()))?;
        let f32_at = |k: usize| f32::from_le_bytes(rec[k..k + 4].try_into().expect("4 bytes"));
        let u32_at = |k: usize| u32::from_le_bytes(rec[k..k + 4].try_into().expect("4 bytes"));
        let node = match rec[13] {
            1 => Node::Leaf(f32_at(14)),
            0 => {
                let (feature, left, right) = (rec[0], u32_at(5), u32_at(9));
                if feature as usize >= SP_FEATURE_DIM
                    || left as usize <= i
                    || right as usize <= i
                    || left as usize >= n
                    || right as usize >= n
                {
                    return Err(Error::Format(format!("malformed split node {i}")));
                }
                Node::Split {
                    feature,
                    threshold: f32_at(1),
                    left,
                    right,
                }
            }
            other => return Err(Error::Format(format!("bad leaf flag {other}"))),
        };
        nodes.push(node);
    }
    Ok(Tree { nodes })
}

#[derive(Debug, Serialize, Deserialize)]
struct SpfHeader {
    config: SpTrainConfig,
    n_classes: usize,
    feature_names: Vec<String>,
    n_rounds: usize,
    train_loss: Vec<f64>,
}

fn check_input(x: &[f64]) -> Result<()> {
    if x.len() != SP_FEATURE_DIM {
        return Err(Error::ShapeMismatch {
            context: "situation predictor input",
            expected: SP_FEATURE_DIM.to_string(),
            got: x.len().to_string(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("situation predictor input must be finite".into()));
    }
    Ok(())
}

pub fn sp_predict(forest: &SpForest, x: &[f64]) -> Result<ProbabilityVector> {
    check_input(x)?;
    ProbabilityVector::softmax(&forest.scores(x))
}

/// Top `k` situations, most likely first; ties go to the canonical order.
pub fn sp_rank(forest: &SpForest, x: &[f64], k: usize) -> Result<Vec<(Situation, f64)>> {
    if k == 0 || k > forest.n_classes() {
        return Err(Error::InvalidInput(format!("k must be within 1..={}, got {k}", forest.n_classes())));
    }
    let mut ranked = sp_predict(forest, x)?.ranked();
    ranked.truncate(k);
    Ok(ranked)
}
