//! Labeling streams through the titles of the playlists they were played from.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::keywords::KeywordTable;
use crate::domain::{PlaylistId, Situation, Stream, TrackId};
use crate::error::{invalid, Result};

pub const MAX_PLAYLIST_TRACKS: usize = 100;
pub const MAX_ARTIST_OR_ALBUM_SHARE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Playlist {
    pub id: PlaylistId,
    pub title: String,
    pub tracks: Vec<TrackId>,
    pub track_artists: BTreeMap<TrackId, String>,
    pub track_albums: BTreeMap<TrackId, String>,
}

impl Playlist {
    pub fn validate(&self) -> Result<()> {
        if self.tracks.is_empty() {
            return Err(invalid(format!("playlist {} has no tracks", self.id)));
        }
        for t in &self.tracks {
            if !self.track_artists.contains_key(t) || !self.track_albums.contains_key(t) {
                return Err(invalid(format!("playlist {}: track {t} lacks artist or album", self.id)));
            }
        }
        Ok(())
    }
}

fn max_share<'a>(tracks: &[TrackId], key: impl Fn(&TrackId) -> Option<&'a String>) -> f64 {
    let mut counts: HashMap<Option<&String>, usize> = HashMap::new();
    for t in tracks {
        *counts.entry(key(t)).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / tracks.len().max(1) as f64
}

/// At most 100 tracks, and no artist or album above a 25% share.
pub fn filter_playlist(p: &Playlist) -> bool {
    p.tracks.len() <= MAX_PLAYLIST_TRACKS
        && max_share(&p.tracks, |t| p.track_artists.get(t)) <= MAX_ARTIST_OR_ALBUM_SHARE
        && max_share(&p.tracks, |t| p.track_albums.get(t)) <= MAX_ARTIST_OR_ALBUM_SHARE
}

/// Counts of dropped log records, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDiagnostics {
    pub labeled: usize,
    pub unknown_playlist: usize,
    pub filtered_playlist: usize,
    pub unmatched_title: usize,
    pub track_not_in_playlist: usize,
    pub per_situation: BTreeMap<Situation, usize>,
}

impl LabelDiagnostics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("reason,count\n");
        for (k, v) in [
            ("labeled", self.labeled),
            ("unknown_playlist", self.unknown_playlist),
            ("filtered_playlist", self.filtered_playlist),
            ("unmatched_title", self.unmatched_title),
            ("track_not_in_playlist", self.track_not_in_playlist),
        ] {
            out.push_str(&format!("{k},{v}\n"));
        }
        for (s, v) in &self.per_situation {
            out.push_str(&format!("label_{s},{v}\n"));
        }
        out
    }
}

/// Attaches the playlist's situation to each logged stream. Streams from
/// unknown, filtered or unmatched playlists are dropped and counted.
/// The labeled streams come out sorted by (timestamp, user, track) so the
/// result does not depend on log order.
pub fn label_streams(
    playlists: &[Playlist],
    logs: &[(PlaylistId, Stream)],
    keywords: &KeywordTable,
) -> (Vec<Stream>, LabelDiagnostics) {
    enum Verdict {
        Filtered,
        Unmatched,
        Label(Situation),
    }
    let verdicts: HashMap<&PlaylistId, (&Playlist, Verdict)> = playlists
        .iter()
        .map(|p| {
            let v = if p.validate().is_err() || !filter_playlist(p) {
                Verdict::Filtered
            } else {
                match keywords.match_situation(&p.title) {
                    Some(s) => Verdict::Label(s),
                    None => Verdict::Unmatched,
                }
            };
            (&p.id, (p, v))
        })
        .collect();

    let mut diag = LabelDiagnostics::default();
    let mut out = Vec::new();
    for (pid, stream) in logs {
        match verdicts.get(pid) {
            None => diag.unknown_playlist += 1,
            Some((_, Verdict::Filtered)) => diag.filtered_playlist += 1,
            Some((_, Verdict::Unmatched)) => diag.unmatched_title += 1,
            Some((p, Verdict::Label(s))) => {
                if !p.tracks.contains(&stream.track) {
                    diag.track_not_in_playlist += 1;
                    continue;
                }
                let mut labeled = stream.clone();
                labeled.situation = Some(*s);
                *diag.per_situation.entry(*s).or_default() += 1;
                diag.labeled += 1;
                out.push(labeled);
            }
        }
    }
    out.sort_by(|a, b| {
        a.device
            .local_timestamp
            .cmp(&b.device.local_timestamp)
            .then_with(|| a.user.cmp(&b.user))
            .then_with(|| a.track.cmp(&b.track))
            .then_with(|| a.situation.cmp(&b.situation))
    });
    (out, diag)
}
