//! Playlist-title matching against per-situation keyword sets.

use std::collections::{BTreeMap, BTreeSet};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::domain::{Situation, TaxonomySubset};
use crate::error::{invalid, Result};

/// Case- and diacritic-folds the title, splits on non-alphanumeric runs and
/// stems every token with the English Snowball (Porter2) stemmer.
pub fn stem_title(title: &str) -> Vec<String> {
    let stemmer = Stemmer::create(Algorithm::English);
    let folded: String = title
        .nfkd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .collect();
    folded
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| stemmer.stem(t).into_owned())
        .collect()
}

/// Stemmed keyword sets, pairwise disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordTable {
    stems: BTreeMap<Situation, BTreeSet<String>>,
}

/// On-disk form: raw (unstemmed) words per situation tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordConfig(pub BTreeMap<Situation, Vec<String>>);

const DEFAULT_KEYWORDS: [(Situation, &[&str]); 12] = [
    (Situation::Work, &["work", "working", "office", "focus", "productivity", "workday"]),
    (Situation::Gym, &["gym", "workout", "fitness", "crossfit", "bodybuilding", "gymtime"]),
    (Situation::Party, &["party", "partying", "fiesta", "celebration", "houseparty"]),
    (Situation::Sleep, &["sleep", "sleepy", "sleeping", "bedtime", "lullaby", "insomnia"]),
    (Situation::Morning, &["morning", "sunrise", "wakeup", "breakfast", "goodmorning"]),
    (Situation::Run, &["run", "running", "runner", "jogging", "jog", "marathon"]),
    (Situation::Night, &["night", "nighttime", "midnight", "latenight", "nocturnal"]),
    (Situation::Dance, &["dance", "dancing", "dancer", "choreography"]),
    (Situation::Car, &["car", "driving", "drive", "roadtrip"]),
    (Situation::Train, &["train", "commute", "subway", "metro", "railway"]),
    (Situation::Relax, &["relax", "relaxing", "chill", "calm", "chillout", "unwind"]),
    (Situation::Club, &["club", "clubbing", "nightclub", "rave"]),
];

impl KeywordConfig {
    pub fn defaults() -> Self {
        KeywordConfig(
            DEFAULT_KEYWORDS
                .iter()
                .map(|(s, words)| (*s, words.iter().map(|w| w.to_string()).collect()))
                .collect(),
        )
    }
}

impl KeywordTable {
    /// Restricts the configuration to the active subset and stems it.
    /// Fails when a situation has no keyword or two situations share a stem.
    pub fn new(config: &KeywordConfig, taxonomy: TaxonomySubset) -> Result<Self> {
        let mut stems: BTreeMap<Situation, BTreeSet<String>> = BTreeMap::new();
        let mut owner: BTreeMap<String, Situation> = BTreeMap::new();
        for &s in taxonomy.members() {
            let words = config.0.get(&s).map(Vec::as_slice).unwrap_or(&[]);
            let set: BTreeSet<String> = words.iter().flat_map(|w| stem_title(w)).collect();
            if set.is_empty() {
                return Err(invalid(format!("situation {s} has no keywords")));
            }
            for stem in &set {
                if let Some(prev) = owner.insert(stem.clone(), s) {
                    return Err(invalid(format!("stem {stem:?} is shared by {prev} and {s}")));
                }
            }
            stems.insert(s, set);
        }
        Ok(KeywordTable { stems })
    }

    pub fn defaults(taxonomy: TaxonomySubset) -> Self {
        KeywordTable::new(&KeywordConfig::defaults(), taxonomy).expect("default keyword table is valid")
    }

    pub fn stems(&self, s: Situation) -> Option<&BTreeSet<String>> {
        self.stems.get(&s)
    }

    /// The unique situation whose keywords occur in the title, if any.
    pub fn match_situation(&self, title: &str) -> Option<Situation> {
        let tokens: BTreeSet<String> = stem_title(title).into_iter().collect();
        let mut hits = self
            .stems
            .iter()
            .filter(|(_, kw)| !kw.is_disjoint(&tokens))
            .map(|(s, _)| *s);
        match (hits.next(), hits.next()) {
            (Some(s), None) => Some(s),
            _ => None,
        }
    }
}

pub fn match_situation(title: &str, table: &KeywordTable) -> Option<Situation> {
    table.match_situation(title)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_titles() {
        assert_eq!(stem_title("Running in the MORNING!!"), ["run", "in", "the", "morn"]);
        assert!(stem_title("").is_empty());
        assert_eq!(stem_title("gym gym gym"), ["gym", "gym", "gym"]);
        assert_eq!(stem_title("Soirée  DÉTENTE"), ["soire", "detent"]);
    }

    #[test]
    fn matches_titles() {
        let kw = KeywordTable::defaults(TaxonomySubset::C12);
        assert_eq!(kw.match_situation("my workout gym mix"), Some(Situation::Gym));
        assert_eq!(kw.match_situation("sleepy party tunes"), None);
        assert_eq!(kw.match_situation("best of 2019"), None);
        assert_eq!(kw.match_situation("#Running hits"), Some(Situation::Run));
        assert_eq!(kw.match_situation("CLUBBING"), Some(Situation::Club));
        assert_eq!(match_situation("Sunday Morning Chill", &kw), None);
    }

    #[test]
    fn inactive_situations_do_not_match() {
        let kw = KeywordTable::defaults(TaxonomySubset::C4);
        assert_eq!(kw.match_situation("sunday morning"), None);
        assert_eq!(kw.match_situation("sunday morning sleep"), Some(Situation::Sleep));
    }

    #[test]
    fn default_tables_are_disjoint_and_complete() {
        for t in TaxonomySubset::ALL {
            let kw = KeywordTable::defaults(t);
            for s in t.members() {
                assert!(!kw.stems(*s).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn overlapping_config_is_rejected() {
        let mut cfg = KeywordConfig::defaults();
        cfg.0.get_mut(&Situation::Gym).unwrap().push("runner".into());
        assert!(KeywordTable::new(&cfg, TaxonomySubset::C12).is_err());
        assert!(KeywordTable::new(&cfg, TaxonomySubset::C4).is_ok());
        cfg.0.insert(Situation::Work, vec![]);
        assert!(KeywordTable::new(&cfg, TaxonomySubset::C4).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let json = serde_json::to_string(&KeywordConfig::defaults()).unwrap();
        assert!(json.contains("\"gym\":[\"gym\""));
        let back: KeywordConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(KeywordTable::new(&back, TaxonomySubset::C12).unwrap(), KeywordTable::defaults(TaxonomySubset::C12));
    }
}
