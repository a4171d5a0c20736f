use std::collections::BTreeMap;

use crate::domain::{Session, Stream, UserId};

pub const DEFAULT_GAP_MINUTES: u32 = 20;

/// Splits each user's time-sorted streams wherever two consecutive streams
/// are more than `gap_minutes` apart. A gap of exactly `gap_minutes` does not
/// split. Sessions are ordered by user, then by start time.
pub fn segment_sessions(streams: &[Stream], gap_minutes: u32) -> Vec<Session> {
    let mut by_user: BTreeMap<&UserId, Vec<&Stream>> = BTreeMap::new();
    for s in streams {
        by_user.entry(&s.user).or_default().push(s);
    }
    let gap = i64::from(gap_minutes) * 60;
    let mut sessions = Vec::new();
    for (user, mut list) in by_user {
        // stable: equal timestamps keep input order
        list.sort_by_key(|s| s.device.local_timestamp);
        let mut current: Vec<Stream> = Vec::new();
        for s in list {
            if let Some(last) = current.last() {
                let delta = (s.device.local_timestamp - last.device.local_timestamp).num_seconds();
                if delta > gap {
                    sessions.push(Session {
                        user: user.clone(),
                        streams: std::mem::take(&mut current),
                    });
                }
            }
            current.push(s.clone());
        }
        if !current.is_empty() {
            sessions.push(Session {
                user: user.clone(),
                streams: current,
            });
        }
    }
    sessions
}
