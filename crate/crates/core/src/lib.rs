//! Situational music-session generation.
//!
//! Two prediction branches share one vocabulary of listening situations:
//!
//! * the user-aware autotagger ([`nn::uamat`]) maps a track's mel-spectrogram
//!   and a user's preference embedding to a distribution over situations, and
//!   runs offline to fill a tag store;
//! * the situation predictor ([`gbdt`]) maps device/time and demographic
//!   features to the same distribution in real time.
//!
//! A session for the situation picked by the listener is the list of tracks
//! whose stored distribution favours that situation. [`datagen`] builds
//! labeled corpora (playlist-title labeling or a seeded synthetic world),
//! [`features`] holds every input encoding, and [`eval`] implements the
//! metrics and the cold-user / cold-track / warm protocols.

pub mod binfmt;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod nn;
pub mod rng;

pub use domain::{
    argmax_situation, Demographics, DeviceSnapshot, DeviceType, Gender, NetworkType, PlaylistId,
    ProbabilityVector, Session, Situation, Stream, TaxonomySubset, TrackId, UserId,
};
pub use error::{Error, Result};
