//! JSON-lines corpus files and the on-disk layout of a generated dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::playlists::Playlist;
use super::split::{DatasetSplit, SplitKind};
use super::synth::SynthCorpus;
use crate::domain::{Demographics, PlaylistId, Stream, TaxonomySubset, UserId};
use crate::error::{Error, Result};
use crate::features::{read_archive, write_archive, InteractionMatrix, Matrix, MelSpectrogram};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PLAYLISTS_FILE: &str = "playlists.jsonl";
pub const LOGS_FILE: &str = "logs.jsonl";
pub const DEMOGRAPHICS_FILE: &str = "demographics.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const MELS_FILE: &str = "mels.sgm";
pub const WORLD_FILE: &str = "world.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.sgm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub schema_version: u32,
    pub taxonomy: TaxonomySubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub playlist: PlaylistId,
    pub stream: Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsRecord {
    pub user: UserId,
    pub demographics: Demographics,
}

fn line_error(n: usize, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {n}: {e}"))
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Blank lines are skipped.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| line_error(i + 1, e))?);
    }
    Ok(out)
}

/// Header line, then one stream per line. Labels outside the taxonomy are
/// rejected.
pub fn write_corpus<W: Write>(mut w: W, taxonomy: TaxonomySubset, streams: &[Stream]) -> Result<()> {
    check_labels(taxonomy, streams)?;
    let header = CorpusHeader {
        schema_version: CORPUS_SCHEMA_VERSION,
        taxonomy,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    write_jsonl(w, streams)
}

pub fn read_corpus<R: BufRead>(mut r: R) -> Result<(TaxonomySubset, Vec<Stream>)> {
    let mut first = String::new();
    if r.read_line(&mut first)? == 0 {
        return Err(Error::Format("corpus file is empty (missing header line)".into()));
    }
    let header: CorpusHeader = serde_json::from_str(first.trim()).map_err(|e| line_error(1, e))?;
    if header.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::Version {
            found: header.schema_version,
            expected: CORPUS_SCHEMA_VERSION,
        });
    }
    let streams: Vec<Stream> = read_jsonl(r).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("corpus body {msg}")),
        other => other,
    })?;
    check_labels(header.taxonomy, &streams)?;
    Ok((header.taxonomy, streams))
}

fn check_labels(taxonomy: TaxonomySubset, streams: &[Stream]) -> Result<()> {
    for (i, s) in streams.iter().enumerate() {
        if let Some(sit) = s.situation {
            if !taxonomy.contains(sit) {
                return Err(Error::InvalidInput(format!(
                    "stream {i} is labeled {sit}, outside the C={} taxonomy",
                    taxonomy.size()
                )));
            }
        }
    }
    Ok(())
}

pub fn save_corpus(path: &Path, taxonomy: TaxonomySubset, streams: &[Stream]) -> Result<()> {
    write_corpus(BufWriter::new(File::create(path)?), taxonomy, streams)
}

pub fn load_corpus(path: &Path) -> Result<(TaxonomySubset, Vec<Stream>)> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), items)
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// A split as stored on disk: indices into the named corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub corpus: String,
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitFile {
    pub fn new(corpus: impl Into<String>, split: &DatasetSplit) -> Self {
        SplitFile {
            corpus: corpus.into(),
            kind: split.kind,
            seed: split.seed,
            train: split.train.clone(),
            test: split.test.clone(),
        }
    }

    pub fn split(&self) -> DatasetSplit {
        DatasetSplit {
            kind: self.kind,
            seed: self.seed,
            train: self.train.clone(),
            test: self.test.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Writes every part of a synthetic corpus into `dir` under the standard
/// file names.
pub fn save_synth_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_corpus(&dir.join(CORPUS_FILE), corpus.world.taxonomy(), &corpus.streams)?;
    save_jsonl(&dir.join(PLAYLISTS_FILE), &corpus.playlists)?;
    let logs: Vec<LogRecord> = corpus
        .logs
        .iter()
        .map(|(p, s)| LogRecord {
            playlist: p.clone(),
            stream: s.clone(),
        })
        .collect();
    save_jsonl(&dir.join(LOGS_FILE), &logs)?;
    save_demographics(&dir.join(DEMOGRAPHICS_FILE), &corpus.demographics)?;
    corpus
        .interactions
        .write_csv(BufWriter::new(File::create(dir.join(INTERACTIONS_FILE))?))?;
    save_mels(&dir.join(MELS_FILE), &corpus.mels)?;
    std::fs::write(dir.join(WORLD_FILE), serde_json::to_vec(&corpus.world)?)?;
    Ok(())
}

pub fn save_demographics(path: &Path, items: &[(UserId, Demographics)]) -> Result<()> {
    let recs: Vec<DemographicsRecord> = items
        .iter()
        .map(|(u, d)| DemographicsRecord {
            user: u.clone(),
            demographics: d.clone(),
        })
        .collect();
    save_jsonl(path, &recs)
}

pub fn load_demographics(path: &Path) -> Result<Vec<(UserId, Demographics)>> {
    let recs: Vec<DemographicsRecord> = load_jsonl(path)?;
    Ok(recs.into_iter().map(|r| (r.user, r.demographics)).collect())
}

pub fn load_playlists(path: &Path) -> Result<Vec<Playlist>> {
    load_jsonl(path)
}

pub fn load_logs(path: &Path) -> Result<Vec<(PlaylistId, Stream)>> {
    let recs: Vec<LogRecord> = load_jsonl(path)?;
    Ok(recs.into_iter().map(|r| (r.playlist, r.stream)).collect())
}

pub fn load_interactions(path: &Path) -> Result<InteractionMatrix> {
    InteractionMatrix::read_csv(BufReader::new(File::open(path)?))
}

pub fn save_mels(path: &Path, mels: &[(crate::domain::TrackId, MelSpectrogram)]) -> Result<()> {
    let matrices: Vec<(String, crate::features::Matrix)> =
        mels.iter().map(|(t, m)| (t.to_string(), m.to_matrix())).collect();
    write_archive(path, matrices.iter().map(|(t, m)| (t.as_str(), m)))?;
    Ok(())
}

pub fn load_mels(path: &Path) -> Result<Vec<(crate::domain::TrackId, MelSpectrogram)>> {
    read_archive(path)?
        .into_iter()
        .map(|(id, m)| Ok((crate::domain::TrackId::new(id)?, MelSpectrogram::from_matrix(m)?)))
        .collect()
}

/// User embeddings as an archive of 1×d matrices keyed by user id, sorted
/// by user.
pub fn save_embeddings(path: &Path, embeddings: &std::collections::HashMap<UserId, Vec<f32>>) -> Result<()> {
    let mut users: Vec<&UserId> = embeddings.keys().collect();
    users.sort();
    let matrices: Vec<(String, Matrix)> = users
        .into_iter()
        .map(|u| {
            let v = &embeddings[u];
            Ok((u.to_string(), Matrix::new(1, v.len(), v.clone())?))
        })
        .collect::<Result<_>>()?;
    write_archive(path, matrices.iter().map(|(u, m)| (u.as_str(), m)))?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<std::collections::HashMap<UserId, Vec<f32>>> {
    read_archive(path)?
        .into_iter()
        .map(|(id, m)| {
            if m.rows != 1 {
                return Err(Error::Format(format!("embedding {id} has {} rows", m.rows)));
            }
            Ok((UserId::new(id)?, m.data))
        })
        .collect()
}
