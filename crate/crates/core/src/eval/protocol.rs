use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, accuracy_at_k, confusion_matrix, joint_overlap, macro_auc_ovr, ConfusionMatrix, JointOverlap, MeanStd};
use crate::datagen::{make_split, DatasetSplit, SplitKind, SynthCorpus};
use crate::domain::{argmax_situation, Demographics, ProbabilityVector, Situation, Stream, TaxonomySubset, TrackId, UserId};
use crate::error::{invalid, Result};
use crate::features::{assemble_sp_features, train_user_embeddings, AlsConfig, CountryDictionary, InteractionMatrix, MelSpectrogram};
use crate::gbdt::{baseline_dt_train, sp_predict, sp_train, KnnModel, SpRow, SpTrainConfig, DEFAULT_DT_DEPTH, DEFAULT_K};
use crate::nn::{train, TrainConfig, UamatConfig, UamatExample, UamatModel};

/// Everything the protocols read: labeled streams plus the per-track and
/// per-user inputs of both branches.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub streams: Vec<Stream>,
    pub mels: HashMap<TrackId, MelSpectrogram>,
    pub demographics: HashMap<UserId, Demographics>,
    pub interactions: InteractionMatrix,
}

impl EvalData {
    pub fn from_synth(corpus: &SynthCorpus) -> Self {
        EvalData {
            streams: corpus.streams.clone(),
            mels: corpus.mels.iter().cloned().collect(),
            demographics: corpus.demographics.iter().cloned().collect(),
            interactions: corpus.interactions.clone(),
        }
    }

    pub fn check_labels(&self, taxonomy: TaxonomySubset) -> Result<()> {
        for s in &self.streams {
            match s.situation {
                None => return Err(invalid("every stream must be labeled for evaluation")),
                Some(l) if !taxonomy.contains(l) => {
                    return Err(invalid(format!("label {l} is outside the C={} taxonomy", taxonomy.size())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn countries(&self) -> CountryDictionary {
        CountryDictionary::from_countries(self.demographics.values().map(|d| d.country.clone()))
    }

    /// Situation-predictor input for one stream; unknown users get the
    /// sentinel demographics.
    pub fn sp_row(&self, stream: &Stream, countries: &CountryDictionary) -> SpRow {
        let unknown = Demographics::unknown();
        let d = self.demographics.get(&stream.user).unwrap_or(&unknown);
        assemble_sp_features(&stream.device, d, countries)
    }
}

/// ALS user factors as float32 vectors keyed by user.
pub fn user_embeddings(interactions: &InteractionMatrix, cfg: &AlsConfig) -> Result<HashMap<UserId, Vec<f32>>> {
    let f = train_user_embeddings(interactions, cfg)?;
    Ok(f.users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.clone(), f.user_vector(i).iter().map(|&v| v as f32).collect()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UamatSetup {
    pub width: f64,
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for UamatSetup {
    fn default() -> Self {
        UamatSetup {
            width: 0.25,
            dropout: 0.3,
            train: TrainConfig {
                lr0: 1e-3,
                max_epochs: 10,
                patience: 2,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_seeds: usize,
    /// Seed of the first run; run `i` uses `seed + i`.
    pub seed: u64,
    pub test_fraction: f64,
    pub k: usize,
    pub als: AlsConfig,
    pub uamat: Option<UamatSetup>,
    pub sp: Option<SpTrainConfig>,
    /// Also score the decision-tree and k-NN baselines on SP features.
    pub baselines: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_seeds: 3,
            seed: 0,
            test_fraction: 0.2,
            k: 3,
            als: AlsConfig {
                factors: 32,
                ..Default::default()
            },
            uamat: Some(UamatSetup::default()),
            sp: Some(SpTrainConfig::default()),
            baselines: false,
        }
    }
}

pub const UAMAT: &str = "uamat";
pub const SP: &str = "sp";
pub const DECISION_TREE: &str = "decision_tree";
pub const KNN: &str = "knn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMetrics {
    pub auc: f64,
    /// Classes without positives or negatives in the test set.
    pub auc_skipped: Vec<Situation>,
    pub accuracy: f64,
    pub accuracy_at_k: f64,
    pub confusion: ConfusionMatrix,
}

impl BranchMetrics {
    pub fn compute(probs: &[ProbabilityVector], labels: &[Situation], taxonomy: TaxonomySubset, k: usize) -> Result<Self> {
        let preds: Vec<Situation> = probs.iter().map(argmax_situation).collect();
        let auc = macro_auc_ovr(probs, labels)?;
        Ok(BranchMetrics {
            auc: auc.macro_auc,
            auc_skipped: auc.skipped,
            accuracy: accuracy(&preds, labels)?,
            accuracy_at_k: accuracy_at_k(probs, labels, k)?,
            confusion: confusion_matrix(&preds, labels, taxonomy)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Test streams the UAMAT could not score (missing spectrogram or
    /// embedding).
    pub uamat_skipped: usize,
    pub branches: BTreeMap<String, BranchMetrics>,
    /// Joint evaluation over the test streams both branches scored.
    pub overlap: Option<JointOverlap>,
    pub uamat_epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub auc: MeanStd,
    pub accuracy: MeanStd,
    pub accuracy_at_k: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub uamat_accuracy: MeanStd,
    pub sp_accuracy: MeanStd,
    pub overlap: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: SplitKind,
    pub c: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub config: ProtocolConfig,
    pub rows: Vec<SeedRow>,
    pub summary: BTreeMap<String, BranchSummary>,
    pub overlap: Option<OverlapSummary>,
    /// Confusion matrices summed over seeds.
    pub confusion: BTreeMap<String, ConfusionMatrix>,
}

impl EvalReport {
    fn assemble(kind: SplitKind, taxonomy: TaxonomySubset, config: &ProtocolConfig, rows: Vec<SeedRow>) -> Result<Self> {
        let mut summary = BTreeMap::new();
        let mut confusion: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
        let names: Vec<String> = rows.first().map(|r| r.branches.keys().cloned().collect()).unwrap_or_default();
        for name in names {
            let pick = |f: fn(&BranchMetrics) -> f64| -> Vec<f64> { rows.iter().map(|r| f(&r.branches[&name])).collect() };
            summary.insert(
                name.clone(),
                BranchSummary {
                    auc: MeanStd::of(&pick(|m| m.auc)),
                    accuracy: MeanStd::of(&pick(|m| m.accuracy)),
                    accuracy_at_k: MeanStd::of(&pick(|m| m.accuracy_at_k)),
                },
            );
            let mut total = ConfusionMatrix::new(taxonomy);
            for r in &rows {
                total.add(&r.branches[&name].confusion)?;
            }
            confusion.insert(name, total);
        }
        let overlaps: Vec<JointOverlap> = rows.iter().filter_map(|r| r.overlap).collect();
        let overlap = (!overlaps.is_empty() && overlaps.len() == rows.len()).then(|| OverlapSummary {
            uamat_accuracy: MeanStd::of(&overlaps.iter().map(|o| o.uamat_accuracy).collect::<Vec<_>>()),
            sp_accuracy: MeanStd::of(&overlaps.iter().map(|o| o.sp_accuracy).collect::<Vec<_>>()),
            overlap: MeanStd::of(&overlaps.iter().map(|o| o.overlap).collect::<Vec<_>>()),
        });
        Ok(EvalReport {
            kind,
            c: taxonomy.size(),
            k: config.k,
            seeds: rows.iter().map(|r| r.seed).collect(),
            config: config.clone(),
            rows,
            summary,
            overlap,
            confusion,
        })
    }
}

fn validate_config(cfg: &ProtocolConfig, taxonomy: TaxonomySubset) -> Result<()> {
    if cfg.n_seeds == 0 {
        return Err(invalid("n_seeds must be at least 1"));
    }
    if cfg.k == 0 || cfg.k > taxonomy.size() {
        return Err(invalid(format!("K must be within 1..={}, got {}", taxonomy.size(), cfg.k)));
    }
    if cfg.uamat.is_none() && cfg.sp.is_none() && !cfg.baselines {
        return Err(invalid("nothing to evaluate: enable the UAMAT, the SP or the baselines"));
    }
    Ok(())
}

/// Trains a UAMAT on the train streams of `split` and scores the test
/// streams it has inputs for. Returns (test indices scored, predictions,
/// epochs run).
fn run_uamat(
    data: &EvalData,
    embeddings: &HashMap<UserId, Vec<f32>>,
    split: &DatasetSplit,
    taxonomy: TaxonomySubset,
    setup: &UamatSetup,
    seed: u64,
) -> Result<(Vec<usize>, Vec<ProbabilityVector>, usize)> {
    let resolvable = |s: &Stream| data.mels.contains_key(&s.track) && embeddings.contains_key(&s.user);
    let examples: Vec<UamatExample<'_>> = split
        .train
        .iter()
        .map(|&i| &data.streams[i])
        .filter(|s| resolvable(s))
        .map(|s| UamatExample {
            mel: &data.mels[&s.track],
            user: &embeddings[&s.user],
            label: s.situation.expect("checked labels"),
        })
        .collect();
    let first = examples.first().ok_or_else(|| invalid("no train stream has both a spectrogram and an embedding"))?;
    let config = UamatConfig {
        mel_bands: first.mel.bands,
        mel_frames: first.mel.frames,
        user_dim: first.user.len(),
        taxonomy,
        width: setup.width,
        dropout: setup.dropout,
    };
    let model = UamatModel::new(config, seed)?;
    let (model, history) = train(model, &examples, &TrainConfig { seed, ..setup.train })?;

    let scored: Vec<usize> = split.test.iter().copied().filter(|&i| resolvable(&data.streams[i])).collect();
    let mut track_ix: HashMap<&TrackId, usize> = HashMap::new();
    let mut user_ix: HashMap<&UserId, usize> = HashMap::new();
    let (mut mels, mut users): (Vec<&MelSpectrogram>, Vec<&[f32]>) = (Vec::new(), Vec::new());
    let pairs: Vec<(usize, usize)> = scored
        .iter()
        .map(|&i| {
            let s = &data.streams[i];
            let a = *track_ix.entry(&s.track).or_insert_with(|| {
                mels.push(&data.mels[&s.track]);
                mels.len() - 1
            });
            let u = *user_ix.entry(&s.user).or_insert_with(|| {
                users.push(&embeddings[&s.user]);
                users.len() - 1
            });
            (a, u)
        })
        .collect();
    let probs = model.predict_many(&mels, &users, &pairs)?;
    Ok((scored, probs, history.epochs.len()))
}

fn run_seed(
    data: &EvalData,
    embeddings: Option<&HashMap<UserId, Vec<f32>>>,
    taxonomy: TaxonomySubset,
    kind: SplitKind,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<SeedRow> {
    let split = make_split(&data.streams, kind, cfg.test_fraction, seed)?;
    let labels_of = |ix: &[usize]| -> Vec<Situation> { ix.iter().map(|&i| data.streams[i].situation.expect("checked labels")).collect() };
    let test_labels = labels_of(&split.test);
    let mut branches = BTreeMap::new();

    let countries = data.countries();
    let rows_of = |ix: &[usize]| -> Vec<SpRow> { ix.iter().map(|&i| data.sp_row(&data.streams[i], &countries)).collect() };
    let (train_x, test_x) = (rows_of(&split.train), rows_of(&split.test));
    let train_y = labels_of(&split.train);

    let mut sp_probs = None;
    if let Some(sp_cfg) = &cfg.sp {
        let forest = sp_train(&train_x, &train_y, taxonomy, sp_cfg)?;
        let probs: Vec<ProbabilityVector> = test_x.iter().map(|x| sp_predict(&forest, x)).collect::<Result<_>>()?;
        branches.insert(SP.to_string(), BranchMetrics::compute(&probs, &test_labels, taxonomy, cfg.k)?);
        sp_probs = Some(probs);
    }
    if cfg.baselines {
        let tree = baseline_dt_train(&train_x, &train_y, taxonomy, DEFAULT_DT_DEPTH)?;
        let probs: Vec<ProbabilityVector> = test_x.iter().map(|x| tree.predict(x)).collect::<Result<_>>()?;
        branches.insert(DECISION_TREE.to_string(), BranchMetrics::compute(&probs, &test_labels, taxonomy, cfg.k)?);
        let knn = KnnModel::fit(&train_x, &train_y, taxonomy, DEFAULT_K.min(train_x.len()))?;
        let probs: Vec<ProbabilityVector> = test_x.iter().map(|x| knn.predict(x)).collect::<Result<_>>()?;
        branches.insert(KNN.to_string(), BranchMetrics::compute(&probs, &test_labels, taxonomy, cfg.k)?);
    }

    let (mut overlap, mut uamat_epochs, mut uamat_skipped) = (None, None, 0);
    if let (Some(setup), Some(emb)) = (&cfg.uamat, embeddings) {
        let (scored, probs, epochs) = run_uamat(data, emb, &split, taxonomy, setup, seed)?;
        let labels = labels_of(&scored);
        branches.insert(UAMAT.to_string(), BranchMetrics::compute(&probs, &labels, taxonomy, cfg.k)?);
        uamat_skipped = split.test.len() - scored.len();
        uamat_epochs = Some(epochs);
        if let Some(sp) = &sp_probs {
            let pos: HashMap<usize, usize> = split.test.iter().enumerate().map(|(j, &i)| (i, j)).collect();
            let sp_scored: Vec<ProbabilityVector> = scored.iter().map(|i| sp[pos[i]].clone()).collect();
            overlap = Some(joint_overlap(&probs, &sp_scored, &labels)?);
        }
    }
    Ok(SeedRow {
        seed,
        n_train: split.train.len(),
        n_test: split.test.len(),
        uamat_skipped,
        branches,
        overlap,
        uamat_epochs,
    })
}

/// Runs `n_seeds` independent split → train → test cycles of one protocol
/// and aggregates them. The SP has no notion of tracks: on the cold-track
/// protocol it is trained and scored on that split's streams.
pub fn run_protocol(data: &EvalData, taxonomy: TaxonomySubset, kind: SplitKind, cfg: &ProtocolConfig) -> Result<EvalReport> {
    validate_config(cfg, taxonomy)?;
    data.check_labels(taxonomy)?;
    let embeddings = match cfg.uamat {
        Some(_) => Some(user_embeddings(&data.interactions, &AlsConfig { seed: cfg.seed, ..cfg.als })?),
        None => None,
    };
    let rows: Vec<SeedRow> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|i| run_seed(data, embeddings.as_ref(), taxonomy, kind, cfg, cfg.seed + i))
        .collect::<Result<_>>()?;
    EvalReport::assemble(kind, taxonomy, cfg, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalGlobalConfig {
    pub seed: u64,
    pub test_fraction: f64,
    pub sp: SpTrainConfig,
    /// Locations with fewer labeled streams are skipped.
    pub min_streams: usize,
}

impl Default for LocalGlobalConfig {
    fn default() -> Self {
        LocalGlobalConfig {
            seed: 0,
            test_fraction: 0.2,
            sp: SpTrainConfig::default(),
            min_streams: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRow {
    pub location: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Percent accuracy of the SP trained on every location.
    pub global_accuracy: f64,
    /// Percent accuracy of the SP trained on this location only.
    pub local_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGlobalReport {
    pub c: usize,
    pub seed: u64,
    pub rows: Vec<LocationRow>,
    /// (location, labeled streams) of locations too small to evaluate.
    pub skipped: Vec<(String, usize)>,
}

/// One warm split; a global SP on all train streams against one SP per
/// location, each scored on that location's test streams.
pub fn local_vs_global(data: &EvalData, taxonomy: TaxonomySubset, cfg: &LocalGlobalConfig) -> Result<LocalGlobalReport> {
    data.check_labels(taxonomy)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &data.streams {
        if let Some(l) = &s.location {
            *counts.entry(l.as_str()).or_default() += 1;
        }
    }
    if counts.len() < 2 {
        return Err(invalid(format!(
            "local vs global needs at least two locations, found {}",
            counts.len()
        )));
    }
    let split = make_split(&data.streams, SplitKind::Warm, cfg.test_fraction, cfg.seed)?;
    let countries = data.countries();
    let row = |i: usize| data.sp_row(&data.streams[i], &countries);
    let label = |i: usize| data.streams[i].situation.expect("checked labels");
    let global = sp_train(
        &split.train.iter().map(|&i| row(i)).collect::<Vec<_>>(),
        &split.train.iter().map(|&i| label(i)).collect::<Vec<_>>(),
        taxonomy,
        &cfg.sp,
    )?;
    let at = |i: usize| data.streams[i].location.as_deref();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (&loc, &n) in &counts {
        let train_ix: Vec<usize> = split.train.iter().copied().filter(|&i| at(i) == Some(loc)).collect();
        let test_ix: Vec<usize> = split.test.iter().copied().filter(|&i| at(i) == Some(loc)).collect();
        let distinct: HashSet<Situation> = train_ix.iter().map(|&i| label(i)).collect();
        if n < cfg.min_streams || test_ix.is_empty() || distinct.len() < 2 {
            tracing::warn!(location = loc, streams = n, "skipping location with too few streams");
            skipped.push((loc.to_string(), n));
            continue;
        }
        let local = sp_train(
            &train_ix.iter().map(|&i| row(i)).collect::<Vec<_>>(),
            &train_ix.iter().map(|&i| label(i)).collect::<Vec<_>>(),
            taxonomy,
            &cfg.sp,
        )?;
        let labels: Vec<Situation> = test_ix.iter().map(|&i| label(i)).collect();
        let score = |f: &crate::gbdt::SpForest| -> Result<f64> {
            let preds: Vec<Situation> = test_ix
                .iter()
                .map(|&i| sp_predict(f, &row(i)).map(|p| argmax_situation(&p)))
                .collect::<Result<_>>()?;
            accuracy(&preds, &labels)
        };
        rows.push(LocationRow {
            location: loc.to_string(),
            n_train: train_ix.len(),
            n_test: test_ix.len(),
            global_accuracy: score(&global)?,
            local_accuracy: score(&local)?,
        });
    }
    Ok(LocalGlobalReport {
        c: taxonomy.size(),
        seed: cfg.seed,
        rows,
        skipped,
    })
}
