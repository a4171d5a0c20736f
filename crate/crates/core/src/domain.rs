//! Shared vocabulary: situations, identifiers, device snapshots, demographics,
//! streams, sessions and probability vectors over the active taxonomy.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One of the twelve canonical listening situations, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Situation {
    Work,
    Gym,
    Party,
    Sleep,
    Morning,
    Run,
    Night,
    Dance,
    Car,
    Train,
    Relax,
    Club,
}

impl Situation {
    pub const ALL: [Situation; 12] = [
        Situation::Work,
        Situation::Gym,
        Situation::Party,
        Situation::Sleep,
        Situation::Morning,
        Situation::Run,
        Situation::Night,
        Situation::Dance,
        Situation::Car,
        Situation::Train,
        Situation::Relax,
        Situation::Club,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Situation> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Situation::Work => "work",
            Situation::Gym => "gym",
            Situation::Party => "party",
            Situation::Sleep => "sleep",
            Situation::Morning => "morning",
            Situation::Run => "run",
            Situation::Night => "night",
            Situation::Dance => "dance",
            Situation::Car => "car",
            Situation::Train => "train",
            Situation::Relax => "relax",
            Situation::Club => "club",
        }
    }
}

impl fmt::Display for Situation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Situation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Situation::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown situation tag {s:?}")))
    }
}

/// The first `C` canonical situations, `C ∈ {4, 8, 12}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct TaxonomySubset(usize);

impl TaxonomySubset {
    pub const C4: TaxonomySubset = TaxonomySubset(4);
    pub const C8: TaxonomySubset = TaxonomySubset(8);
    pub const C12: TaxonomySubset = TaxonomySubset(12);
    pub const ALL: [TaxonomySubset; 3] = [Self::C4, Self::C8, Self::C12];

    pub fn new(c: usize) -> Result<Self> {
        match c {
            4 | 8 | 12 => Ok(TaxonomySubset(c)),
            other => Err(invalid(format!("taxonomy size must be 4, 8 or 12, got {other}"))),
        }
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn members(self) -> &'static [Situation] {
        &Situation::ALL[..self.0]
    }

    pub fn contains(self, s: Situation) -> bool {
        s.index() < self.0
    }
}

impl TryFrom<usize> for TaxonomySubset {
    type Error = Error;

    fn try_from(c: usize) -> Result<Self> {
        TaxonomySubset::new(c)
    }
}

impl From<TaxonomySubset> for usize {
    fn from(t: TaxonomySubset) -> usize {
        t.0
    }
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self> {
                let id = id.into();
                if id.is_empty() {
                    return Err(invalid(concat!(stringify!($name), " must be non-empty")));
                }
                Ok($name(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;

            fn try_from(s: String) -> Result<Self> {
                $name::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(TrackId);
string_id!(UserId);
string_id!(PlaylistId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceType {
    Mobile,
    Desktop,
    Tablet,
}

impl DeviceType {
    pub const ALL: [DeviceType; 3] = [DeviceType::Mobile, DeviceType::Desktop, DeviceType::Tablet];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["mobile", "desktop", "tablet"][self.code()]
    }
}

impl fmt::Display for DeviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mobile" => Ok(DeviceType::Mobile),
            "desktop" => Ok(DeviceType::Desktop),
            "tablet" => Ok(DeviceType::Tablet),
            _ => Err(invalid(format!("unknown device type {s:?}"))),
        }
    }
}

/// `Plane` covers every offline stream, whatever the reason for being offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkType {
    Mobile,
    Wifi,
    Lan,
    Plane,
}

impl NetworkType {
    pub const ALL: [NetworkType; 4] = [
        NetworkType::Mobile,
        NetworkType::Wifi,
        NetworkType::Lan,
        NetworkType::Plane,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["mobile", "wifi", "lan", "plane"][self.code()]
    }
}

impl fmt::Display for NetworkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetworkType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mobile" => Ok(NetworkType::Mobile),
            "wifi" => Ok(NetworkType::Wifi),
            "lan" => Ok(NetworkType::Lan),
            "plane" => Ok(NetworkType::Plane),
            _ => Err(invalid(format!("unknown network type {s:?}"))),
        }
    }
}

/// Device context of one stream. The timestamp is already in local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSnapshot")]
pub struct DeviceSnapshot {
    pub local_timestamp: NaiveDateTime,
    /// 0 = Monday.
    pub day_of_week: u8,
    pub device_type: DeviceType,
    pub network_type: NetworkType,
}

#[derive(Deserialize)]
struct RawSnapshot {
    local_timestamp: NaiveDateTime,
    day_of_week: u8,
    device_type: DeviceType,
    network_type: NetworkType,
}

impl TryFrom<RawSnapshot> for DeviceSnapshot {
    type Error = Error;

    fn try_from(raw: RawSnapshot) -> Result<Self> {
        let expected = weekday_index(&raw.local_timestamp);
        if raw.day_of_week != expected {
            return Err(invalid(format!(
                "day_of_week {} inconsistent with {} (expected {expected})",
                raw.day_of_week, raw.local_timestamp
            )));
        }
        Ok(DeviceSnapshot {
            local_timestamp: raw.local_timestamp.with_nanosecond(0).unwrap_or(raw.local_timestamp),
            day_of_week: raw.day_of_week,
            device_type: raw.device_type,
            network_type: raw.network_type,
        })
    }
}

fn weekday_index(ts: &NaiveDateTime) -> u8 {
    ts.weekday().num_days_from_monday() as u8
}

impl DeviceSnapshot {
    /// Builds a snapshot, deriving the weekday from the timestamp and
    /// truncating to whole seconds.
    pub fn new(local_timestamp: NaiveDateTime, device_type: DeviceType, network_type: NetworkType) -> Self {
        let ts = local_timestamp.with_nanosecond(0).unwrap_or(local_timestamp);
        DeviceSnapshot {
            local_timestamp: ts,
            day_of_week: weekday_index(&ts),
            device_type,
            network_type,
        }
    }

    pub fn seconds_since_midnight(&self) -> u32 {
        self.local_timestamp.num_seconds_from_midnight()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    F,
    M,
    #[default]
    Unknown,
}

/// Registration data. `age == 0` and `country == "??"` mean unknown.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDemographics")]
pub struct Demographics {
    pub age: u8,
    pub country: String,
    pub gender: Gender,
}

pub const UNKNOWN_COUNTRY: &str = "??";

#[derive(Deserialize)]
struct RawDemographics {
    age: u8,
    country: String,
    gender: Gender,
}

impl TryFrom<RawDemographics> for Demographics {
    type Error = Error;

    fn try_from(raw: RawDemographics) -> Result<Self> {
        Demographics::new(raw.age, raw.country, raw.gender)
    }
}

impl Demographics {
    pub fn new(age: u8, country: impl Into<String>, gender: Gender) -> Result<Self> {
        if age > 120 {
            return Err(invalid(format!("age {age} outside [0, 120]")));
        }
        let country = country.into();
        Ok(Demographics {
            age,
            country: if country.is_empty() {
                UNKNOWN_COUNTRY.to_string()
            } else {
                country
            },
            gender,
        })
    }

    pub fn unknown() -> Self {
        Demographics {
            age: 0,
            country: UNKNOWN_COUNTRY.to_string(),
            gender: Gender::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub track: TrackId,
    pub user: UserId,
    pub device: DeviceSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub situation: Option<Situation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user: UserId,
    pub streams: Vec<Stream>,
}

/// A distribution over the members of the active taxonomy, canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

pub const PROB_SUM_TOL: f64 = 1e-6;

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        TaxonomySubset::new(probs.len())?;
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(invalid("probability entries must be finite and within [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbabilityVector(probs))
    }

    pub fn uniform(taxonomy: TaxonomySubset) -> Self {
        let c = taxonomy.size();
        ProbabilityVector(vec![1.0 / c as f64; c])
    }

    /// Numerically stable softmax over raw scores.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        TaxonomySubset::new(logits.len())?;
        Ok(ProbabilityVector(softmax(logits)))
    }

    pub fn taxonomy(&self) -> TaxonomySubset {
        TaxonomySubset(self.0.len())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, s: Situation) -> Option<f64> {
        self.0.get(s.index()).copied()
    }

    /// Situations by decreasing probability, ties broken by canonical index.
    pub fn ranked(&self) -> Vec<(Situation, f64)> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .map(|i| (Situation::ALL[i], self.0[i]))
            .collect()
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbabilityVector::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Vec<f64> {
        p.0
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_situation(p: &ProbabilityVector) -> Situation {
    Situation::ALL[argmax_index(p.as_slice())]
}
