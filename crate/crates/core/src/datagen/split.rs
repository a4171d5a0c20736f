//! Cold-user, cold-track and warm train/test splits.
//!
//! Splits are index lists into the corpus they were made from. Streams that
//! would put both an unseen user and an unseen track into the test set are
//! dropped from both sides.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{Stream, TrackId, UserId};
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    ColdUser,
    ColdTrack,
    Warm,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::ColdUser, SplitKind::ColdTrack, SplitKind::Warm];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::ColdUser => "cold_user",
            SplitKind::ColdTrack => "cold_track",
            SplitKind::Warm => "warm",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cold_user" => Ok(SplitKind::ColdUser),
            "cold_track" => Ok(SplitKind::ColdTrack),
            "warm" => Ok(SplitKind::Warm),
            _ => Err(invalid(format!("unknown split kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn train_streams<'a>(&self, corpus: &'a [Stream]) -> Vec<&'a Stream> {
        self.train.iter().map(|&i| &corpus[i]).collect()
    }

    pub fn test_streams<'a>(&self, corpus: &'a [Stream]) -> Vec<&'a Stream> {
        self.test.iter().map(|&i| &corpus[i]).collect()
    }
}

/// Relative slack allowed around the requested test share.
pub const SPLIT_SLACK: f64 = 0.2;

fn infeasible(kind: SplitKind, reason: impl Into<String>) -> Error {
    Error::InfeasibleSplit {
        kind: kind.to_string(),
        reason: reason.into(),
    }
}

pub fn make_split(streams: &[Stream], kind: SplitKind, test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 0.5) {
        return Err(invalid(format!("test_fraction must be in (0, 0.5), got {test_fraction}")));
    }
    if streams.is_empty() {
        return Err(infeasible(kind, "corpus is empty"));
    }
    if streams.iter().any(|s| s.situation.is_none()) {
        return Err(invalid("every stream must be labeled before splitting"));
    }
    let n = streams.len();
    let target = test_fraction * n as f64;
    let (train, test) = match kind {
        SplitKind::ColdUser => cold_split(streams, kind, target, seed, |s| &s.user, |s| &s.track)?,
        SplitKind::ColdTrack => cold_split(streams, kind, target, seed, |s| &s.track, |s| &s.user)?,
        SplitKind::Warm => warm_split(streams, target, seed)?,
    };
    let share = test.len() as f64 / n as f64;
    if (share - test_fraction).abs() > SPLIT_SLACK * test_fraction {
        return Err(infeasible(
            kind,
            format!("achieved test share {share:.4} is outside ±20% of {test_fraction}"),
        ));
    }
    let split = DatasetSplit { kind, seed, train, test };
    validate_split(streams, &split)?;
    Ok(split)
}

/// Holds out whole groups (users or tracks) until the retained test streams
/// reach the target. A test stream is retained only if its other key occurs
/// in train.
fn cold_split<'a, K, O>(
    streams: &'a [Stream],
    kind: SplitKind,
    target: f64,
    seed: u64,
    group: impl Fn(&'a Stream) -> &'a K,
    other: impl Fn(&'a Stream) -> &'a O,
) -> Result<(Vec<usize>, Vec<usize>)>
where
    K: Ord + std::hash::Hash + Eq + 'a,
    O: Ord + std::hash::Hash + Eq + 'a,
{
    let mut members: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, s) in streams.iter().enumerate() {
        members.entry(group(s)).or_default().push(i);
    }
    let mut groups: Vec<&K> = members.keys().copied().collect();
    groups.shuffle(&mut rng::derived(seed, kind.as_str(), 0));

    let mut other_in_train: HashMap<&O, usize> = HashMap::new();
    for s in streams {
        *other_in_train.entry(other(s)).or_default() += 1;
    }
    let mut held: Vec<&K> = Vec::new();
    let mut retained = 0usize;
    for g in groups.iter().take(groups.len().saturating_sub(1)) {
        held.push(g);
        for &i in &members[g] {
            *other_in_train.get_mut(other(&streams[i])).expect("counted") -= 1;
        }
        retained = held
            .iter()
            .flat_map(|h| &members[h])
            .filter(|&&i| other_in_train[other(&streams[i])] > 0)
            .count();
        if retained as f64 >= target {
            break;
        }
    }
    if retained == 0 || (retained as f64) < (1.0 - SPLIT_SLACK) * target {
        let what = match kind {
            SplitKind::ColdUser => "every test track must appear in train",
            _ => "every test user must appear in train",
        };
        return Err(infeasible(
            kind,
            format!("{what}: only {retained} test streams satisfy it, need about {target:.0}"),
        ));
    }
    let held: HashSet<&K> = held.into_iter().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in streams.iter().enumerate() {
        if !held.contains(group(s)) {
            train.push(i);
        } else if other_in_train[other(s)] > 0 {
            test.push(i);
        }
    }
    Ok((train, test))
}

/// Moves whole (user, track) pairs to test as long as both the user and the
/// track keep at least one train stream.
fn warm_split(streams: &[Stream], target: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pairs: BTreeMap<(&UserId, &TrackId), Vec<usize>> = BTreeMap::new();
    let mut user_train: HashMap<&UserId, usize> = HashMap::new();
    let mut track_train: HashMap<&TrackId, usize> = HashMap::new();
    for (i, s) in streams.iter().enumerate() {
        pairs.entry((&s.user, &s.track)).or_default().push(i);
        *user_train.entry(&s.user).or_default() += 1;
        *track_train.entry(&s.track).or_default() += 1;
    }
    let mut keys: Vec<(&UserId, &TrackId)> = pairs.keys().copied().collect();
    keys.shuffle(&mut rng::derived(seed, "warm", 0));
    let mut held: BTreeSet<(&UserId, &TrackId)> = BTreeSet::new();
    let mut count = 0usize;
    for key in keys {
        if count as f64 >= target {
            break;
        }
        let k = pairs[&key].len();
        let (u, t) = key;
        if user_train[u] > k && track_train[t] > k {
            *user_train.get_mut(u).expect("present") -= k;
            *track_train.get_mut(t).expect("present") -= k;
            held.insert(key);
            count += k;
        }
    }
    if count == 0 || (count as f64) < (1.0 - SPLIT_SLACK) * target {
        return Err(infeasible(
            SplitKind::Warm,
            format!("test users and tracks must stay in train: only {count} streams can move, need about {target:.0}"),
        ));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in streams.iter().enumerate() {
        if held.contains(&(&s.user, &s.track)) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, test))
}

/// Re-checks the split invariants from scratch.
pub fn validate_split(streams: &[Stream], split: &DatasetSplit) -> Result<()> {
    let fail = |reason: String| Err(infeasible(split.kind, reason));
    if split.train.is_empty() || split.test.is_empty() {
        return fail("train and test must both be non-empty".into());
    }
    let mut seen = HashSet::new();
    for &i in split.train.iter().chain(&split.test) {
        if i >= streams.len() {
            return fail(format!("index {i} out of range"));
        }
        if !seen.insert(i) {
            return fail(format!("index {i} used twice"));
        }
    }
    let train_users: HashSet<&UserId> = split.train.iter().map(|&i| &streams[i].user).collect();
    let train_tracks: HashSet<&TrackId> = split.train.iter().map(|&i| &streams[i].track).collect();
    let train_pairs: HashSet<(&UserId, &TrackId)> =
        split.train.iter().map(|&i| (&streams[i].user, &streams[i].track)).collect();
    for &i in &split.test {
        let s = &streams[i];
        let user_seen = train_users.contains(&s.user);
        let track_seen = train_tracks.contains(&s.track);
        match split.kind {
            SplitKind::ColdUser if user_seen || !track_seen => {
                return fail(format!("test stream {i}: cold-user needs unseen user and seen track"))
            }
            SplitKind::ColdTrack if !user_seen || track_seen => {
                return fail(format!("test stream {i}: cold-track needs seen user and unseen track"))
            }
            SplitKind::Warm if !user_seen || !track_seen || train_pairs.contains(&(&s.user, &s.track)) => {
                return fail(format!("test stream {i}: warm needs seen user and track but a new pair"))
            }
            _ => {}
        }
    }
    Ok(())
}
