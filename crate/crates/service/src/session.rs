use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sitgen::datagen::{load_demographics, load_embeddings};
use sitgen::features::{assemble_sp_features, CountryDictionary};
use sitgen::gbdt::{sp_rank, SpForest};
use sitgen::{Demographics, DeviceSnapshot, Error, Result, Situation, TaxonomySubset, TrackId, UserId};

use crate::store::TagStore;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_N: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHashes {
    pub sp: String,
    pub uamat: String,
    pub tag_store: String,
}

/// Everything one request reads. Never mutated once built; reloads
/// replace the whole snapshot.
#[derive(Debug)]
pub struct Snapshot {
    pub forest: SpForest,
    pub store: TagStore,
    pub demographics: HashMap<UserId, Demographics>,
    pub countries: CountryDictionary,
    /// Users with a preference embedding.
    pub embedded: HashSet<UserId>,
    pub hashes: ModelHashes,
}

/// Files a snapshot is loaded from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotPaths {
    pub forest: PathBuf,
    pub store: PathBuf,
    pub demographics: PathBuf,
    pub embeddings: Option<PathBuf>,
}

impl Snapshot {
    /// The country dictionary is rebuilt from `demographics`, which must be
    /// the table the forest was trained with.
    pub fn new(
        forest: SpForest,
        store: TagStore,
        demographics: HashMap<UserId, Demographics>,
        embedded: HashSet<UserId>,
    ) -> Result<Self> {
        if forest.taxonomy != store.taxonomy {
            return Err(Error::TaxonomyMismatch {
                found: store.taxonomy.size(),
                expected: forest.taxonomy.size(),
            });
        }
        let countries = CountryDictionary::from_countries(demographics.values().map(|d| d.country.clone()));
        let hashes = ModelHashes {
            sp: forest.hash(),
            uamat: store.model_hash.clone(),
            tag_store: store.hash(),
        };
        Ok(Snapshot {
            forest,
            store,
            demographics,
            countries,
            embedded,
            hashes,
        })
    }

    pub fn load(paths: &SnapshotPaths) -> Result<Self> {
        let forest = SpForest::load(&paths.forest).map_err(|e| with_path(e, &paths.forest))?;
        let store = TagStore::load(&paths.store).map_err(|e| with_path(e, &paths.store))?;
        let demographics = load_demographics(&paths.demographics)
            .map_err(|e| with_path(e, &paths.demographics))?
            .into_iter()
            .collect();
        let embedded = match &paths.embeddings {
            Some(p) => load_embeddings(p).map_err(|e| with_path(e, p))?.into_keys().collect(),
            None => HashSet::new(),
        };
        Snapshot::new(forest, store, demographics, embedded)
    }

    pub fn taxonomy(&self) -> TaxonomySubset {
        self.forest.taxonomy
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SituationScore {
    pub tag: Situation,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationRanking {
    pub situations: Vec<SituationScore>,
    /// No demographics for the user; the sentinel values were used.
    pub cold_user: bool,
}

/// Top `k` situations for a user in a device context.
pub fn infer_situations(snap: &Snapshot, user: &UserId, device: &DeviceSnapshot, k: usize) -> Result<SituationRanking> {
    let unknown = Demographics::unknown();
    let (demographics, cold_user) = match snap.demographics.get(user) {
        Some(d) => (d, false),
        None => (&unknown, true),
    };
    let x = assemble_sp_features(device, demographics, &snap.countries);
    let situations = sp_rank(&snap.forest, &x, k)?
        .into_iter()
        .map(|(tag, prob)| SituationScore { tag, prob })
        .collect();
    Ok(SituationRanking { situations, cold_user })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrack {
    pub track_id: TrackId,
    /// Stored probability of the situation, or for filled tracks the
    /// track's share of the situation's labeled streams.
    pub score: f64,
    pub filled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSession {
    pub tracks: Vec<SessionTrack>,
    /// The user has no stored pairs; the list is popularity only.
    pub cold_user: bool,
}

/// Up to `n` tracks for `situation`: stored probabilities above `floor`
/// (default `1/C`) in decreasing order, ties by popularity then track id,
/// followed by the situation's most streamed tracks if fewer than `n`
/// qualify.
pub fn generate_session(store: &TagStore, user: &UserId, situation: Situation, n: usize, floor: Option<f64>) -> Result<GeneratedSession> {
    if !store.taxonomy.contains(situation) {
        return Err(Error::InvalidInput(format!(
            "situation {situation} is outside the C={} taxonomy",
            store.taxonomy.size()
        )));
    }
    let floor = floor.unwrap_or(1.0 / store.taxonomy.size() as f64);
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::InvalidInput(format!("floor must be within [0, 1], got {floor}")));
    }
    let c = situation.index();
    let mut tracks = Vec::with_capacity(n);
    let mut taken = HashSet::new();

    let entries = store.user_entries(user).unwrap_or(&[]);
    let cold_user = entries.is_empty();
    let mut ranked: Vec<(usize, f64)> = entries
        .iter()
        .map(|(t, p)| (*t as usize, p.as_slice()[c]))
        .filter(|&(_, p)| p > floor)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| store.track_popularity(b.0).cmp(&store.track_popularity(a.0)))
            .then_with(|| store.tracks[a.0].cmp(&store.tracks[b.0]))
    });
    for (t, p) in ranked.into_iter().take(n) {
        taken.insert(t);
        tracks.push(SessionTrack {
            track_id: store.tracks[t].clone(),
            score: p,
            filled: false,
        });
    }

    if tracks.len() < n {
        let mut popular: Vec<(usize, u64)> = (0..store.tracks.len())
            .map(|t| (t, store.situation_popularity(t, situation)))
            .filter(|&(t, count)| count > 0 && !taken.contains(&t))
            .collect();
        let total: u64 = (0..store.tracks.len()).map(|t| store.situation_popularity(t, situation)).sum();
        popular.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| store.track_popularity(b.0).cmp(&store.track_popularity(a.0)))
                .then_with(|| store.tracks[a.0].cmp(&store.tracks[b.0]))
        });
        for (t, count) in popular.into_iter().take(n - tracks.len()) {
            tracks.push(SessionTrack {
                track_id: store.tracks[t].clone(),
                score: count as f64 / total as f64,
                filled: true,
            });
        }
    }
    Ok(GeneratedSession { tracks, cold_user })
}
