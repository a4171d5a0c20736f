use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sitgen::binfmt;
use sitgen::features::MelSpectrogram;
use sitgen::nn::UamatModel;
use sitgen::{Error, ProbabilityVector, Result, Situation, Stream, TaxonomySubset, TrackId, UserId};

pub const TAG_MAGIC: &[u8; 4] = b"TAG1";
pub const TAG_VERSION: u32 = 1;

/// Precomputed `P(c | track, user)` for a candidate set of pairs, plus
/// per-track, per-situation stream counts used for tie-breaks and fills.
#[derive(Debug, Clone, PartialEq)]
pub struct TagStore {
    pub taxonomy: TaxonomySubset,
    /// Hash of the autotagger that produced the distributions.
    pub model_hash: String,
    /// Sorted.
    pub tracks: Vec<TrackId>,
    /// Sorted.
    pub users: Vec<UserId>,
    /// Per user: (track index, distribution) by ascending track index.
    entries: Vec<Vec<(u32, ProbabilityVector)>>,
    /// `popularity[t][c]`: labeled streams of track t in situation c.
    popularity: Vec<Vec<u32>>,
    /// Candidate pairs dropped for lack of a mel-spectrogram or embedding.
    pub skipped: usize,
}

/// Per-track and per-user inputs of the autotagger.
#[derive(Debug, Clone, Copy)]
pub struct StoreInputs<'a> {
    pub mels: &'a HashMap<TrackId, MelSpectrogram>,
    pub embeddings: &'a HashMap<UserId, Vec<f32>>,
    /// Labeled streams for the popularity counts.
    pub streams: &'a [Stream],
}

/// Which (track, user) pairs to tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Candidates {
    Grid { tracks: Vec<TrackId>, users: Vec<UserId> },
    Pairs(Vec<(TrackId, UserId)>),
}

impl Candidates {
    /// Every track of the corpus against every user who streamed.
    pub fn corpus_default(tracks: impl IntoIterator<Item = TrackId>, streams: &[Stream]) -> Self {
        let tracks: BTreeSet<TrackId> = tracks.into_iter().collect();
        let users: BTreeSet<UserId> = streams.iter().map(|s| s.user.clone()).collect();
        Candidates::Grid {
            tracks: tracks.into_iter().collect(),
            users: users.into_iter().collect(),
        }
    }

    fn pairs(&self) -> BTreeSet<(TrackId, UserId)> {
        match self {
            Candidates::Grid { tracks, users } => tracks
                .iter()
                .flat_map(|t| users.iter().map(move |u| (t.clone(), u.clone())))
                .collect(),
            Candidates::Pairs(p) => p.iter().cloned().collect(),
        }
    }
}

/// Tags every candidate pair through the inference path of `model`.
/// Pairs whose mel-spectrogram or embedding is missing are skipped and
/// counted.
pub fn build_tag_store(model: &UamatModel, candidates: &Candidates, inputs: StoreInputs<'_>) -> Result<TagStore> {
    let taxonomy = TaxonomySubset::new(model.n_classes())?;
    let pairs = candidates.pairs();
    let mut skipped = 0;
    let mut kept = Vec::with_capacity(pairs.len());
    for (t, u) in pairs {
        if inputs.mels.contains_key(&t) && inputs.embeddings.contains_key(&u) {
            kept.push((t, u));
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        tracing::warn!(skipped, "candidate pairs without autotagger inputs");
    }

    let tracks: Vec<TrackId> = kept.iter().map(|(t, _)| t.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let users: Vec<UserId> = kept.iter().map(|(_, u)| u.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mels: Vec<&MelSpectrogram> = tracks.iter().map(|t| &inputs.mels[t]).collect();
    let embs: Vec<&[f32]> = users.iter().map(|u| inputs.embeddings[u].as_slice()).collect();
    let index: Vec<(usize, usize)> = kept
        .iter()
        .map(|(t, u)| (position(&tracks, t), position(&users, u)))
        .collect();
    let probs = model.predict_many(&mels, &embs, &index)?;

    let mut entries: Vec<Vec<(u32, ProbabilityVector)>> = vec![Vec::new(); users.len()];
    for ((t, u), p) in index.into_iter().zip(probs) {
        entries[u].push((t as u32, p));
    }
    for e in &mut entries {
        e.sort_by_key(|(t, _)| *t);
    }

    let mut popularity = vec![vec![0u32; taxonomy.size()]; tracks.len()];
    for s in inputs.streams {
        let Some(c) = s.situation else { continue };
        if !taxonomy.contains(c) {
            return Err(Error::TaxonomyMismatch {
                found: c.index() + 1,
                expected: taxonomy.size(),
            });
        }
        if let Ok(t) = tracks.binary_search(&s.track) {
            popularity[t][c.index()] += 1;
        }
    }

    Ok(TagStore {
        taxonomy,
        model_hash: model.hash(),
        tracks,
        users,
        entries,
        popularity,
        skipped,
    })
}

fn position<T: Ord>(sorted: &[T], x: &T) -> usize {
    sorted.binary_search(x).expect("id collected from the same pairs")
}

#[derive(Serialize, Deserialize)]
struct TagHeader {
    taxonomy: TaxonomySubset,
    model_hash: String,
    tracks: Vec<TrackId>,
    users: Vec<UserId>,
    skipped: usize,
}

impl TagStore {
    pub fn get(&self, track: &TrackId, user: &UserId) -> Option<&ProbabilityVector> {
        let entries = self.user_entries(user)?;
        let t = self.tracks.binary_search(track).ok()? as u32;
        entries.binary_search_by_key(&t, |(i, _)| *i).ok().map(|i| &entries[i].1)
    }

    /// The stored pairs of one user as (track index, distribution).
    pub fn user_entries(&self, user: &UserId) -> Option<&[(u32, ProbabilityVector)]> {
        let u = self.users.binary_search(user).ok()?;
        Some(&self.entries[u])
    }

    pub fn contains_user(&self, user: &UserId) -> bool {
        self.user_entries(user).is_some_and(|e| !e.is_empty())
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn track_popularity(&self, track: usize) -> u64 {
        self.popularity[track].iter().map(|&n| u64::from(n)).sum()
    }

    pub fn situation_popularity(&self, track: usize, situation: Situation) -> u64 {
        self.popularity[track].get(situation.index()).map_or(0, |&n| u64::from(n))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    /// Hex SHA-256 of the serialized store.
    pub fn hash(&self) -> String {
        binfmt::content_hash(&self.to_bytes())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TAG_MAGIC)?;
        binfmt::write_u32(w, TAG_VERSION)?;
        binfmt::write_json_header(
            w,
            &TagHeader {
                taxonomy: self.taxonomy,
                model_hash: self.model_hash.clone(),
                tracks: self.tracks.clone(),
                users: self.users.clone(),
                skipped: self.skipped,
            },
        )?;
        for row in &self.popularity {
            for &n in row {
                binfmt::write_u32(w, n)?;
            }
        }
        for user in &self.entries {
            binfmt::write_u32(w, user.len() as u32)?;
            for (t, p) in user {
                binfmt::write_u32(w, *t)?;
                for &v in p.as_slice() {
                    binfmt::write_f64(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::expect_magic(r, TAG_MAGIC)?;
        binfmt::expect_version(r, TAG_VERSION)?;
        let h: TagHeader = binfmt::read_json_header(r)?;
        if !h.tracks.windows(2).all(|w| w[0] < w[1]) || !h.users.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format("tag store ids must be sorted and unique".into()));
        }
        let c = h.taxonomy.size();
        let mut popularity = Vec::with_capacity(h.tracks.len());
        for _ in &h.tracks {
            popularity.push((0..c).map(|_| binfmt::read_u32(r, "popularity")).collect::<Result<Vec<_>>>()?);
        }
        let mut entries = Vec::with_capacity(h.users.len());
        for _ in &h.users {
            let n = binfmt::read_u32(r, "entry count")? as usize;
            if n > h.tracks.len() {
                return Err(Error::Format(format!("{n} entries for {} tracks", h.tracks.len())));
            }
            let mut row = Vec::with_capacity(n);
            for _ in 0..n {
                let t = binfmt::read_u32(r, "track index")?;
                if t as usize >= h.tracks.len() || row.last().is_some_and(|(prev, _)| *prev >= t) {
                    return Err(Error::Format(format!("bad track index {t}")));
                }
                let probs = (0..c).map(|_| binfmt::read_f64(r, "probability")).collect::<Result<Vec<_>>>()?;
                let p = ProbabilityVector::new(probs).map_err(|e| Error::Format(e.to_string()))?;
                row.push((t, p));
            }
            entries.push(row);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after tag store".into()));
        }
        Ok(TagStore {
            taxonomy: h.taxonomy,
            model_hash: h.model_hash,
            tracks: h.tracks,
            users: h.users,
            entries,
            popularity,
            skipped: h.skipped,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TagStore::read_from(&mut BufReader::new(File::open(path)?))
    }
}
