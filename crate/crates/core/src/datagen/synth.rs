//! Seeded synthetic world for desk-scale experiments.
//!
//! Every stream is drawn as: user → situation (from the user's preference)
//! → device snapshot (from situation-specific hour/day/device/network
//! conditionals) → track (from the tracks affiliated with the situation,
//! weighted by the user's genre taste). Each conditional is a mixture
//! `s · specific + (1 − s) · uniform` where `s` is the signal strength, so
//! `s = 0` removes every dependency on the situation.
//!
//! The world keeps its latent parameters, which gives exact posteriors
//! `P(c | user, device)` and `P(c | user, track)` to score classifiers
//! against.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use chrono::{Duration, NaiveDate, Timelike};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::keywords::KeywordConfig;
use super::playlists::Playlist;
use crate::domain::{
    Demographics, DeviceSnapshot, DeviceType, Gender, NetworkType, PlaylistId, Situation, Stream,
    TaxonomySubset, TrackId, UserId,
};
use crate::error::{invalid, Result};
use crate::features::{InteractionMatrix, MelSpectrogram};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_tracks: usize,
    pub n_streams: usize,
    pub taxonomy: TaxonomySubset,
    pub signal_strength: f64,
    /// (name, weight); weights sum to 1.
    pub locations: Vec<(String, f64)>,
    /// Per-location shift of every situation's hour profile, in hours.
    pub location_hour_shifts: Vec<f64>,
    /// Unlabeled plays per user added to the interaction matrix.
    pub background_plays_per_user: usize,
    pub mel_bands: usize,
    pub mel_frames: usize,
    /// Audio noise standard deviation at zero signal strength.
    pub audio_noise: f64,
    pub playlists_per_situation: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_tracks: 1000,
            n_streams: 20_000,
            taxonomy: TaxonomySubset::C4,
            signal_strength: 0.9,
            locations: vec![("FR".into(), 0.5), ("BR".into(), 0.5)],
            location_hour_shifts: vec![0.0, 0.0],
            background_plays_per_user: 50,
            mel_bands: 32,
            mel_frames: 64,
            audio_noise: 2.0,
            playlists_per_situation: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_tracks == 0 || self.n_streams == 0 {
            return Err(invalid("user, track and stream counts must be positive"));
        }
        if self.n_tracks < self.taxonomy.size() {
            return Err(invalid("need at least one track per situation"));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(invalid("signal_strength must be within [0, 1]"));
        }
        if self.locations.is_empty() {
            return Err(invalid("at least one location is required"));
        }
        let total: f64 = self.locations.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 || self.locations.iter().any(|(_, w)| *w < 0.0) {
            return Err(invalid(format!("location weights must be nonnegative and sum to 1, got {total}")));
        }
        if !self.location_hour_shifts.is_empty() && self.location_hour_shifts.len() != self.locations.len() {
            return Err(invalid("location_hour_shifts must be empty or match locations"));
        }
        if self.mel_bands < 8 || self.mel_frames < 8 {
            return Err(invalid("mel proxies must be at least 8x8"));
        }
        Ok(())
    }

    fn hour_shift(&self, location: usize) -> f64 {
        self.location_hour_shifts.get(location).copied().unwrap_or(0.0)
    }
}

/// Situation-specific conditionals at full signal strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationProfile {
    /// Two wrapped-Gaussian hour components: (mean hour, std hours, weight).
    pub hours: [(f64, f64, f64); 2],
    pub weekday: [f64; 7],
    pub device: [f64; 3],
    pub network: [f64; 4],
}

const WEEKDAYS: [f64; 7] = [0.18, 0.18, 0.18, 0.18, 0.18, 0.05, 0.05];
const WEEKEND: [f64; 7] = [0.04, 0.04, 0.04, 0.04, 0.24, 0.34, 0.26];
const ANY_DAY: [f64; 7] = [1.0 / 7.0; 7];
const LEISURE: [f64; 7] = [0.1, 0.1, 0.1, 0.1, 0.15, 0.25, 0.2];

/// Default profiles, indexed by canonical situation. Device order is
/// (mobile, desktop, tablet); network order is (mobile, wifi, lan, plane).
pub fn default_profiles() -> [SituationProfile; 12] {
    let p = |hours, weekday, device, network| SituationProfile { hours, weekday, device, network };
    [
        p([(10.0, 1.3, 0.5), (15.0, 1.3, 0.5)], WEEKDAYS, [0.1, 0.8, 0.1], [0.04, 0.36, 0.58, 0.02]),
        p([(7.0, 0.8, 0.5), (18.5, 0.8, 0.5)], ANY_DAY, [0.9, 0.02, 0.08], [0.72, 0.25, 0.01, 0.02]),
        p([(22.0, 1.0, 0.6), (1.0, 1.0, 0.4)], WEEKEND, [0.85, 0.1, 0.05], [0.35, 0.6, 0.03, 0.02]),
        p([(23.5, 0.8, 0.6), (2.5, 1.0, 0.4)], ANY_DAY, [0.25, 0.03, 0.72], [0.03, 0.72, 0.03, 0.22]),
        p([(7.5, 0.7, 0.7), (9.0, 0.7, 0.3)], WEEKDAYS, [0.5, 0.2, 0.3], [0.3, 0.64, 0.04, 0.02]),
        p([(6.5, 0.8, 0.5), (19.5, 0.8, 0.5)], LEISURE, [0.96, 0.01, 0.03], [0.8, 0.08, 0.01, 0.11]),
        p([(0.5, 1.2, 0.5), (3.0, 1.2, 0.5)], ANY_DAY, [0.4, 0.4, 0.2], [0.1, 0.55, 0.33, 0.02]),
        p([(20.5, 1.2, 0.5), (23.0, 1.2, 0.5)], WEEKEND, [0.5, 0.3, 0.2], [0.4, 0.55, 0.03, 0.02]),
        p([(8.0, 0.8, 0.5), (18.0, 0.8, 0.5)], WEEKDAYS, [0.95, 0.01, 0.04], [0.9, 0.02, 0.01, 0.07]),
        p([(8.3, 0.6, 0.5), (17.7, 0.6, 0.5)], WEEKDAYS, [0.88, 0.02, 0.1], [0.55, 0.1, 0.01, 0.34]),
        p([(14.0, 2.0, 0.5), (21.0, 1.5, 0.5)], LEISURE, [0.3, 0.3, 0.4], [0.05, 0.65, 0.28, 0.02]),
        p([(0.0, 0.9, 0.5), (2.0, 0.9, 0.5)], WEEKEND, [0.95, 0.01, 0.04], [0.9, 0.06, 0.02, 0.02]),
    ]
}

/// Peak band of each situation's spectral template, as a fraction of the
/// band count. Interleaved so any prefix of the canonical order is spread
/// over the spectrum.
const TEMPLATE_CENTERS: [f64; 12] = [0.06, 0.56, 0.31, 0.81, 0.14, 0.64, 0.39, 0.89, 0.22, 0.72, 0.47, 0.97];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: UserId,
    pub demographics: Demographics,
    pub location: usize,
    /// Blended situation preference over the active taxonomy.
    pub preference: Vec<f64>,
    pub liked_genres: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackProfile {
    pub id: TrackId,
    /// Two distinct situation indices the track is used for.
    pub affiliations: [usize; 2],
    pub genre: usize,
    pub artist: String,
    pub album: String,
}

pub const N_GENRES: usize = 8;
const LIKED_GENRE_WEIGHT: f64 = 4.0;
const FAVORED_SITUATION_WEIGHT: f64 = 5.0;

/// The latent parameters of one synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub profiles: Vec<SituationProfile>,
    pub users: Vec<UserProfile>,
    pub tracks: Vec<TrackProfile>,
    /// `by_situation[c]` = track indices affiliated with situation c.
    pub by_situation: Vec<Vec<usize>>,
}

fn base_prior(c: usize) -> f64 {
    1.0 + 0.15 * (2.4 * c as f64).cos()
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn wrapped_normal_pdf(h: f64, mean: f64, std: f64) -> f64 {
    (-2..=2)
        .map(|k| {
            let z = (h - mean + 24.0 * k as f64) / std;
            (-0.5 * z * z).exp() / (std * TAU.sqrt())
        })
        .sum()
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let c = config.taxonomy.size();
        let s = config.signal_strength;
        let profiles: Vec<SituationProfile> = default_profiles()[..c].to_vec();

        let loc_weights: Vec<f64> = config.locations.iter().map(|(_, w)| *w).collect();
        let loc_dist = WeightedIndex::new(&loc_weights).map_err(|e| invalid(e.to_string()))?;
        let width = (config.n_users.to_string().len()).max(3);
        let users: Vec<UserProfile> = (0..config.n_users)
            .map(|u| {
                let mut r = rng::derived(config.seed, "user-profile", u as u64);
                let location = loc_dist.sample(&mut r);
                let age: u8 = if r.random_bool(0.05) { 0 } else { r.random_range(15..=70) };
                let gender = match r.random_range(0..100) {
                    0..=46 => Gender::F,
                    47..=93 => Gender::M,
                    _ => Gender::Unknown,
                };
                let mut favored: Vec<usize> = (0..c).collect();
                favored.shuffle(&mut r);
                let mut pref: Vec<f64> = (0..c)
                    .map(|k| {
                        let fav = if favored[..2].contains(&k) { FAVORED_SITUATION_WEIGHT } else { 1.0 };
                        base_prior(k) * fav * age_tilt(Situation::ALL[k], age)
                    })
                    .collect();
                normalize(&mut pref);
                let preference = pref.iter().map(|q| (1.0 - s) / c as f64 + s * q).collect();
                let g0 = r.random_range(0..N_GENRES);
                let g1 = (g0 + r.random_range(1..N_GENRES)) % N_GENRES;
                UserProfile {
                    id: UserId::new(format!("u{u:0width$}")).expect("non-empty"),
                    demographics: Demographics::new(age, config.locations[location].0.clone(), gender)
                        .expect("age within range"),
                    location,
                    preference,
                    liked_genres: [g0, g1],
                }
            })
            .collect();

        let twidth = (config.n_tracks.to_string().len()).max(4);
        let mut r = rng::derived(config.seed, "tracks", 0);
        let tracks: Vec<TrackProfile> = (0..config.n_tracks)
            .map(|t| {
                let a0 = t % c;
                let a1 = (a0 + r.random_range(1..c)) % c;
                let artist = t / 3;
                TrackProfile {
                    id: TrackId::new(format!("t{t:0twidth$}")).expect("non-empty"),
                    affiliations: [a0, a1],
                    genre: r.random_range(0..N_GENRES),
                    artist: format!("artist{artist}"),
                    album: format!("album{artist}-{}", t % 2),
                }
            })
            .collect();
        let mut by_situation = vec![Vec::new(); c];
        for (i, t) in tracks.iter().enumerate() {
            for a in t.affiliations {
                by_situation[a].push(i);
            }
        }
        Ok(SynthWorld {
            config: config.clone(),
            profiles,
            users,
            tracks,
            by_situation,
        })
    }

    pub fn taxonomy(&self) -> TaxonomySubset {
        self.config.taxonomy
    }

    fn signal(&self) -> f64 {
        self.config.signal_strength
    }

    /// Population class prior: the mean user preference.
    pub fn class_prior(&self) -> Vec<f64> {
        let c = self.taxonomy().size();
        let mut prior = vec![0.0; c];
        for u in &self.users {
            for (p, q) in prior.iter_mut().zip(&u.preference) {
                *p += q;
            }
        }
        prior.iter_mut().for_each(|p| *p /= self.users.len() as f64);
        prior
    }

    fn track_weight(&self, user: &UserProfile, track: &TrackProfile) -> f64 {
        if user.liked_genres.contains(&track.genre) {
            LIKED_GENRE_WEIGHT
        } else {
            1.0
        }
    }

    /// `P(track | user, situation)` for every track index, as a closure over
    /// the normalizers.
    fn track_normalizers(&self, user: &UserProfile) -> Vec<f64> {
        self.by_situation
            .iter()
            .map(|ts| ts.iter().map(|&t| self.track_weight(user, &self.tracks[t])).sum())
            .collect()
    }

    fn track_likelihood(&self, user: &UserProfile, norms: &[f64], track: usize, c: usize) -> f64 {
        let s = self.signal();
        let t = &self.tracks[track];
        let specific = if t.affiliations.contains(&c) {
            self.track_weight(user, t) / norms[c]
        } else {
            0.0
        };
        s * specific + (1.0 - s) / self.tracks.len() as f64
    }

    /// `P(device snapshot | situation)` for each active situation.
    pub fn device_likelihoods(&self, snap: &DeviceSnapshot, location: usize) -> Vec<f64> {
        let s = self.signal();
        let shift = self.config.hour_shift(location);
        let hour = snap.local_timestamp.num_seconds_from_midnight() as f64 / 3600.0;
        self.profiles
            .iter()
            .map(|p| {
                let h: f64 = p
                    .hours
                    .iter()
                    .map(|(m, sd, w)| w * wrapped_normal_pdf(hour, m + shift, *sd))
                    .sum();
                let h = s * h + (1.0 - s) / 24.0;
                let d = s * p.weekday[snap.day_of_week as usize] + (1.0 - s) / 7.0;
                let dev = s * p.device[snap.device_type.code()] + (1.0 - s) / 3.0;
                let net = s * p.network[snap.network_type.code()] + (1.0 - s) / 4.0;
                h * d * dev * net
            })
            .collect()
    }

    fn user_index(&self, user: &UserId) -> Option<usize> {
        self.users.binary_search_by(|u| u.id.cmp(user)).ok()
    }

    fn track_index(&self, track: &TrackId) -> Option<usize> {
        self.tracks.binary_search_by(|t| t.id.cmp(track)).ok()
    }

    fn location_of(&self, stream: &Stream) -> usize {
        stream
            .location
            .as_ref()
            .and_then(|l| self.config.locations.iter().position(|(n, _)| n == l))
            .unwrap_or(0)
    }

    fn posterior(weights: Vec<f64>) -> Vec<f64> {
        let mut w = weights;
        normalize(&mut w);
        w
    }

    /// `P(c | user, device snapshot)`: what a predictor that knows the user
    /// and sees only device data can reach at best.
    pub fn device_posterior(&self, stream: &Stream) -> Option<Vec<f64>> {
        let u = &self.users[self.user_index(&stream.user)?];
        let lik = self.device_likelihoods(&stream.device, self.location_of(stream));
        Some(Self::posterior(lik.iter().zip(&u.preference).map(|(l, p)| l * p).collect()))
    }

    /// `P(c | device snapshot)` under the population prior.
    pub fn device_only_posterior(&self, stream: &Stream) -> Vec<f64> {
        let lik = self.device_likelihoods(&stream.device, self.location_of(stream));
        Self::posterior(lik.iter().zip(self.class_prior()).map(|(l, p)| l * p).collect())
    }

    /// `P(c | demographics, device snapshot)`: what the situation predictor
    /// can reach at best, pooling every user with the stream user's exact
    /// demographics.
    pub fn sp_posterior(&self, stream: &Stream) -> Option<Vec<f64>> {
        let who = &self.users[self.user_index(&stream.user)?].demographics;
        let c = self.taxonomy().size();
        let mut pooled = vec![0.0; c];
        for u in self.users.iter().filter(|u| &u.demographics == who) {
            pooled.iter_mut().zip(&u.preference).for_each(|(a, p)| *a += p);
        }
        let lik = self.device_likelihoods(&stream.device, self.location_of(stream));
        Some(Self::posterior(lik.iter().zip(&pooled).map(|(l, p)| l * p).collect()))
    }

    /// `P(c | user, track)`: the best achievable from the (track, user) pair.
    pub fn audio_posterior(&self, stream: &Stream) -> Option<Vec<f64>> {
        let u = &self.users[self.user_index(&stream.user)?];
        let t = self.track_index(&stream.track)?;
        let norms = self.track_normalizers(u);
        let c = self.taxonomy().size();
        Some(Self::posterior(
            (0..c).map(|k| u.preference[k] * self.track_likelihood(u, &norms, t, k)).collect(),
        ))
    }

    /// Accuracy (fraction) of the argmax of `posterior` on labeled streams.
    pub fn bayes_accuracy<'a, I, F>(streams: I, posterior: F) -> f64
    where
        I: IntoIterator<Item = &'a Stream>,
        F: Fn(&Stream) -> Option<Vec<f64>>,
    {
        let (mut hit, mut n) = (0usize, 0usize);
        for s in streams {
            if let (Some(p), Some(label)) = (posterior(s), s.situation) {
                n += 1;
                hit += usize::from(crate::domain::argmax_index(&p) == label.index());
            }
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }

    fn sample_situation(&self, user: &UserProfile, r: &mut Rng) -> usize {
        WeightedIndex::new(&user.preference).expect("valid preference").sample(r)
    }

    fn sample_hour(&self, c: usize, location: usize, r: &mut Rng) -> f64 {
        if r.random_bool(self.signal()) {
            let p = &self.profiles[c];
            let (m, sd, _) = if r.random_bool(p.hours[0].2) { p.hours[0] } else { p.hours[1] };
            let h = Normal::new(m + self.config.hour_shift(location), sd).expect("valid normal").sample(r);
            h.rem_euclid(24.0)
        } else {
            r.random_range(0.0..24.0)
        }
    }

    fn sample_categorical(&self, specific: &[f64], r: &mut Rng) -> usize {
        if r.random_bool(self.signal()) {
            WeightedIndex::new(specific).expect("valid weights").sample(r)
        } else {
            r.random_range(0..specific.len())
        }
    }

    fn sample_track(&self, user: &UserProfile, c: usize, r: &mut Rng) -> usize {
        if r.random_bool(self.signal()) {
            let pool = &self.by_situation[c];
            let w: Vec<f64> = pool.iter().map(|&t| self.track_weight(user, &self.tracks[t])).collect();
            pool[WeightedIndex::new(&w).expect("non-empty pool").sample(r)]
        } else {
            r.random_range(0..self.tracks.len())
        }
    }

    fn sample_stream(&self, u: usize, r: &mut Rng) -> (Stream, usize) {
        let user = &self.users[u];
        let c = self.sample_situation(user, r);
        let p = &self.profiles[c];
        let hour = self.sample_hour(c, user.location, r);
        let dow = self.sample_categorical(&p.weekday, r);
        let device = DeviceType::ALL[self.sample_categorical(&p.device, r)];
        let network = NetworkType::ALL[self.sample_categorical(&p.network, r)];
        let week = r.random_range(0..8i64);
        let secs = ((hour * 3600.0) as i64).clamp(0, 86_399);
        let monday = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
        let ts = monday + Duration::days(week * 7 + dow as i64) + Duration::seconds(secs);
        let track = self.sample_track(user, c, r);
        let stream = Stream {
            track: self.tracks[track].id.clone(),
            user: user.id.clone(),
            device: DeviceSnapshot::new(ts, device, network),
            situation: Some(Situation::ALL[c]),
            location: Some(self.config.locations[user.location].0.clone()),
        };
        (stream, track)
    }

    /// Spectral template of a situation: a Gaussian bump over bands with a
    /// situation-specific temporal modulation.
    fn template(&self, c: usize) -> Vec<f64> {
        let (f, t) = (self.config.mel_bands, self.config.mel_frames);
        let center = TEMPLATE_CENTERS[c] * f as f64;
        let width = (f as f64 / 14.0).max(0.8);
        let cycles = 1.0 + (c % 4) as f64;
        let phase = c as f64 * 0.7;
        let mut out = vec![0.0; f * t];
        for b in 0..f {
            let bump = (-0.5 * ((b as f64 - center) / width).powi(2)).exp();
            for k in 0..t {
                let m = 1.0 + 0.5 * (TAU * cycles * k as f64 / t as f64 + phase).cos();
                out[b * t + k] = 3.0 * bump * m;
            }
        }
        out
    }

    /// Audio proxy per track: mean of its two situation templates over a
    /// falling baseline, plus noise scaled by `1 − s`.
    pub fn audio_proxies(&self) -> Vec<(TrackId, MelSpectrogram)> {
        let (f, t) = (self.config.mel_bands, self.config.mel_frames);
        let c = self.taxonomy().size();
        let templates: Vec<Vec<f64>> = (0..c).map(|k| self.template(k)).collect();
        let sd = self.config.audio_noise * (1.0 - self.signal());
        self.tracks
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                let mut r = rng::derived(self.config.seed, "audio", i as u64);
                let noise = Normal::new(0.0, sd.max(0.0)).expect("valid normal");
                let [a0, a1] = tr.affiliations;
                let data: Vec<f32> = (0..f * t)
                    .map(|j| {
                        let base = -4.0 * (j / t) as f64 / f as f64;
                        let v = base + 0.5 * (templates[a0][j] + templates[a1][j]);
                        let n = if sd > 0.0 { noise.sample(&mut r) } else { 0.0 };
                        (v + n) as f32
                    })
                    .collect();
                (tr.id.clone(), MelSpectrogram::new(f, t, data).expect("finite proxy"))
            })
            .collect()
    }
}

fn age_tilt(s: Situation, age: u8) -> f64 {
    use Situation::*;
    let young = matches!(s, Party | Club | Dance | Gym | Run | Night);
    let older = matches!(s, Work | Relax | Morning | Sleep | Car | Train);
    match age {
        0 => 1.0,
        a if a < 30 && young => 1.6,
        a if a >= 45 && older => 1.6,
        _ => 1.0,
    }
}

/// Everything a synthetic run produces.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub world: SynthWorld,
    pub streams: Vec<Stream>,
    pub playlists: Vec<Playlist>,
    /// Streams played from a playlist, unlabeled, for the ingestion path.
    pub logs: Vec<(PlaylistId, Stream)>,
    pub interactions: InteractionMatrix,
    pub mels: Vec<(TrackId, MelSpectrogram)>,
    pub demographics: Vec<(UserId, Demographics)>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let world = SynthWorld::new(cfg)?;
    let n_users = cfg.n_users;

    // Even allocation; the remainder goes to a seeded subset of users.
    let mut counts = vec![cfg.n_streams / n_users; n_users];
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut rng::derived(cfg.seed, "allocation", 0));
    for &u in order.iter().take(cfg.n_streams % n_users) {
        counts[u] += 1;
    }

    let per_user: Vec<(Vec<(Stream, usize)>, Vec<usize>)> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let mut r = rng::derived(cfg.seed, "user-streams", u as u64);
            let labeled: Vec<(Stream, usize)> = (0..counts[u]).map(|_| world.sample_stream(u, &mut r)).collect();
            let mut rb = rng::derived(cfg.seed, "user-background", u as u64);
            let background: Vec<usize> = (0..cfg.background_plays_per_user)
                .map(|_| world.sample_stream(u, &mut rb).1)
                .collect();
            (labeled, background)
        })
        .collect();

    let mut triples = Vec::new();
    let mut labeled: Vec<(Stream, usize)> = Vec::with_capacity(cfg.n_streams);
    for (u, (streams, background)) in per_user.into_iter().enumerate() {
        let uid = &world.users[u].id;
        for t in streams.iter().map(|(_, t)| *t).chain(background) {
            triples.push((uid.clone(), world.tracks[t].id.clone(), 1.0));
        }
        labeled.extend(streams);
    }
    labeled.sort_by(|(a, _), (b, _)| {
        a.device
            .local_timestamp
            .cmp(&b.device.local_timestamp)
            .then_with(|| a.user.cmp(&b.user))
            .then_with(|| a.track.cmp(&b.track))
    });
    let interactions = InteractionMatrix::from_triples(triples)?;
    let (playlists, logs) = build_playlists(&world, &labeled);
    let streams = labeled.into_iter().map(|(s, _)| s).collect();
    let mels = world.audio_proxies();
    let demographics = world.users.iter().map(|u| (u.id.clone(), u.demographics.clone())).collect();
    Ok(SynthCorpus {
        world,
        streams,
        playlists,
        logs,
        interactions,
        mels,
        demographics,
    })
}

/// A few situational playlists per situation, built from affiliated tracks
/// with one track per artist, plus one oversized and one ambiguous playlist
/// so the filters have something to reject.
fn build_playlists(world: &SynthWorld, labeled: &[(Stream, usize)]) -> (Vec<Playlist>, Vec<(PlaylistId, Stream)>) {
    let cfg = &world.config;
    let keywords = KeywordConfig::defaults();
    let mut r = rng::derived(cfg.seed, "playlists", 0);
    let mut playlists = Vec::new();
    let mut home: BTreeMap<(usize, usize), PlaylistId> = BTreeMap::new();
    let make = |id: String, title: String, tracks: &[usize]| {
        let ids: Vec<TrackId> = tracks.iter().map(|&t| world.tracks[t].id.clone()).collect();
        Playlist {
            id: PlaylistId::new(id).expect("non-empty"),
            title,
            track_artists: tracks.iter().map(|&t| (world.tracks[t].id.clone(), world.tracks[t].artist.clone())).collect(),
            track_albums: tracks.iter().map(|&t| (world.tracks[t].id.clone(), world.tracks[t].album.clone())).collect(),
            tracks: ids,
        }
    };
    for (c, pool) in world.by_situation.iter().enumerate() {
        let words = &keywords.0[&Situation::ALL[c]];
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut r);
        let mut used_artists = std::collections::HashSet::new();
        shuffled.retain(|&t| used_artists.insert(world.tracks[t].artist.clone()));
        for (k, chunk) in shuffled.chunks(40).take(cfg.playlists_per_situation).enumerate() {
            if chunk.len() < 4 {
                continue;
            }
            let word = words.choose(&mut r).expect("keywords present");
            let pl = make(format!("pl-{}-{k}", Situation::ALL[c]), format!("My {word} mix #{k}"), chunk);
            for &t in chunk {
                home.entry((c, t)).or_insert_with(|| pl.id.clone());
            }
            playlists.push(pl);
        }
    }
    let all: Vec<usize> = (0..world.tracks.len()).collect();
    playlists.push(make("pl-huge".into(), "gym workout megamix".into(), &all[..all.len().min(150)]));
    if cfg.taxonomy.size() >= 4 {
        playlists.push(make("pl-ambiguous".into(), "sleepy party tunes".into(), &all[..all.len().min(20)]));
    }

    let logs = labeled
        .iter()
        .filter_map(|(s, t)| {
            let c = s.situation.expect("generated streams are labeled").index();
            home.get(&(c, *t)).map(|pid| {
                let mut raw = s.clone();
                raw.situation = None;
                (pid.clone(), raw)
            })
        })
        .collect();
    (playlists, logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, s: f64) -> SynthConfig {
        SynthConfig {
            n_users: 40,
            n_tracks: 120,
            n_streams: 3000,
            signal_strength: s,
            mel_bands: 16,
            mel_frames: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_corpora() {
        let a = synth_generate(&small(5, 0.8)).unwrap();
        let b = synth_generate(&small(5, 0.8)).unwrap();
        assert_eq!(serde_json::to_string(&a.streams).unwrap(), serde_json::to_string(&b.streams).unwrap());
        assert_eq!(a.mels, b.mels);
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.playlists, b.playlists);
        let c = synth_generate(&small(6, 0.8)).unwrap();
        assert_ne!(a.streams, c.streams);
    }

    #[test]
    fn every_stream_is_labeled_and_located() {
        let corpus = synth_generate(&small(1, 0.5)).unwrap();
        assert_eq!(corpus.streams.len(), 3000);
        assert!(corpus.streams.iter().all(|s| s.situation.is_some() && s.location.is_some()));
        assert_eq!(corpus.mels.len(), 120);
        assert_eq!(corpus.demographics.len(), 40);
        assert!(!corpus.logs.is_empty());
    }

    #[test]
    fn zero_signal_is_uniform() {
        let world = SynthWorld::new(&small(2, 0.0)).unwrap();
        for u in &world.users {
            assert!(u.preference.iter().all(|p| (p - 0.25).abs() < 1e-12));
        }
        let corpus = synth_generate(&small(2, 0.0)).unwrap();
        for s in corpus.streams.iter().take(50) {
            let p = world.device_posterior(s).unwrap();
            assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-12), "{p:?}");
            let a = world.audio_posterior(s).unwrap();
            assert!(a.iter().all(|x| (x - 0.25).abs() < 1e-12), "{a:?}");
        }
    }

    #[test]
    fn posteriors_are_distributions() {
        let corpus = synth_generate(&small(3, 0.9)).unwrap();
        for s in corpus.streams.iter().take(200) {
            for p in [
                corpus.world.device_posterior(s).unwrap(),
                corpus.world.device_only_posterior(s),
                corpus.world.sp_posterior(s).unwrap(),
                corpus.world.audio_posterior(s).unwrap(),
            ] {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(0, 0.5);
        cfg.locations = vec![("FR".into(), 0.7), ("BR".into(), 0.7)];
        assert!(synth_generate(&cfg).is_err());
        let mut cfg = small(0, 0.5);
        cfg.signal_strength = 1.5;
        assert!(synth_generate(&cfg).is_err());
        let mut cfg = small(0, 0.5);
        cfg.n_users = 0;
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn full_signal_device_posterior_is_sharp() {
        let cfg = SynthConfig { n_streams: 6000, signal_strength: 1.0, ..small(7, 1.0) };
        let corpus = synth_generate(&cfg).unwrap();
        let w = &corpus.world;
        let acc = SynthWorld::bayes_accuracy(&corpus.streams, |s| Some(w.device_only_posterior(s)));
        assert!(acc > 0.9, "device-only Bayes accuracy {acc}");
    }

    #[test]
    fn class_prior_is_near_uniform_and_matched() {
        let cfg = SynthConfig { n_users: 200, n_streams: 10_000, ..small(8, 0.9) };
        let corpus = synth_generate(&cfg).unwrap();
        let prior = corpus.world.class_prior();
        let mut counts = vec![0.0; 4];
        for s in &corpus.streams {
            counts[s.situation.unwrap().index()] += 1.0 / corpus.streams.len() as f64;
        }
        for (p, e) in prior.iter().zip(&counts) {
            assert!((p - 0.25).abs() <= 0.2 * 0.25, "prior {prior:?}");
            assert!((p - e).abs() <= 0.05, "prior {prior:?} vs empirical {counts:?}");
        }
    }
}
