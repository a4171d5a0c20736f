//! Implicit-feedback alternating least squares.
//!
//! Preference is 1 where a count is present, confidence `1 + alpha * count`.
//! Each half-iteration solves one ridge system per row, independently, so
//! the result does not depend on how rows are spread over workers.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{TrackId, UserId};
use crate::error::{invalid, Result};
use crate::rng;

/// Sparse user × track play counts with their registries. Zero counts are
/// never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    users: Vec<UserId>,
    tracks: Vec<TrackId>,
    by_user: Vec<Vec<(u32, f64)>>,
    by_track: Vec<Vec<(u32, f64)>>,
}

impl InteractionMatrix {
    /// Duplicated (user, track) entries are summed. Users and tracks are
    /// indexed in sorted id order.
    pub fn from_triples<I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (UserId, TrackId, f64)>,
    {
        let mut cells: BTreeMap<(UserId, TrackId), f64> = BTreeMap::new();
        for (u, t, c) in triples {
            if !c.is_finite() || c < 0.0 {
                return Err(invalid(format!("count for ({u}, {t}) must be finite and nonnegative, got {c}")));
            }
            *cells.entry((u, t)).or_default() += c;
        }
        cells.retain(|_, c| *c > 0.0);
        let mut users: Vec<UserId> = cells.keys().map(|(u, _)| u.clone()).collect();
        users.dedup();
        let mut tracks: Vec<TrackId> = cells.keys().map(|(_, t)| t.clone()).collect();
        tracks.sort();
        tracks.dedup();
        let track_ix: BTreeMap<&TrackId, u32> =
            tracks.iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
        let user_ix: BTreeMap<&UserId, u32> = users.iter().enumerate().map(|(i, u)| (u, i as u32)).collect();
        let mut by_user = vec![Vec::new(); users.len()];
        let mut by_track = vec![Vec::new(); tracks.len()];
        for ((u, t), c) in &cells {
            let (ui, ti) = (user_ix[u], track_ix[t]);
            by_user[ui as usize].push((ti, *c));
            by_track[ti as usize].push((ui, *c));
        }
        Ok(InteractionMatrix {
            users,
            tracks,
            by_user,
            by_track,
        })
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn tracks(&self) -> &[TrackId] {
        &self.tracks
    }

    pub fn nnz(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nnz() == 0
    }

    /// Reads `user_id,track_id,count` CSV with a header row.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            user_id: String,
            track_id: String,
            count: f64,
        }
        let mut triples = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize::<Row>() {
            let row = row?;
            triples.push((UserId::new(row.user_id)?, TrackId::new(row.track_id)?, row.count));
        }
        InteractionMatrix::from_triples(triples)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["user_id", "track_id", "count"])?;
        for (u, row) in self.users.iter().zip(&self.by_user) {
            for (t, c) in row {
                out.write_record([u.as_str(), self.tracks[*t as usize].as_str(), &c.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsConfig {
    pub factors: usize,
    pub reg: f64,
    pub alpha: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            factors: 128,
            reg: 0.01,
            alpha: 40.0,
            iters: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlsFactors {
    pub users: Vec<UserId>,
    pub tracks: Vec<TrackId>,
    /// `users.len() × factors`, row-major.
    pub user_factors: Vec<f64>,
    /// `tracks.len() × factors`, row-major.
    pub track_factors: Vec<f64>,
    pub factors: usize,
    /// Objective after initialization, then after every full iteration.
    pub objective: Vec<f64>,
}

impl AlsFactors {
    pub fn user_vector(&self, i: usize) -> &[f64] {
        &self.user_factors[i * self.factors..(i + 1) * self.factors]
    }

    pub fn track_vector(&self, i: usize) -> &[f64] {
        &self.track_factors[i * self.factors..(i + 1) * self.factors]
    }

    pub fn predict(&self, user: usize, track: usize) -> f64 {
        dot(self.user_vector(user), self.track_vector(track))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram(factors: &[f64], k: usize) -> DMatrix<f64> {
    let n = factors.len() / k;
    let m = DMatrix::from_row_slice(n, k, factors);
    m.transpose() * &m
}

/// Solves every row of one side given the other side fixed.
fn solve_side(rows: &[Vec<(u32, f64)>], other: &[f64], k: usize, cfg: &AlsConfig) -> Vec<f64> {
    let g = gram(other, k);
    let solved: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|row| {
            let mut a = g.clone();
            let mut b = DVector::<f64>::zeros(k);
            for &(j, count) in row {
                let y = &other[j as usize * k..(j as usize + 1) * k];
                let conf = 1.0 + cfg.alpha * count;
                for p in 0..k {
                    b[p] += conf * y[p];
                    let wp = (conf - 1.0) * y[p];
                    for q in 0..k {
                        a[(p, q)] += wp * y[q];
                    }
                }
            }
            for p in 0..k {
                a[(p, p)] += cfg.reg;
            }
            // reg > 0 keeps the system positive definite
            let chol = a.cholesky().expect("ridge system is positive definite");
            chol.solve(&b).iter().copied().collect()
        })
        .collect();
    solved.concat()
}

fn objective(x: &InteractionMatrix, uf: &[f64], tf: &[f64], k: usize, cfg: &AlsConfig) -> f64 {
    let g = gram(tf, k);
    let mut total = 0.0;
    for (u, row) in x.by_user.iter().enumerate() {
        let xu = DVector::from_column_slice(&uf[u * k..(u + 1) * k]);
        total += (xu.transpose() * &g * &xu)[(0, 0)];
        for &(t, count) in row {
            let pred = dot(&uf[u * k..(u + 1) * k], &tf[t as usize * k..(t as usize + 1) * k]);
            let conf = 1.0 + cfg.alpha * count;
            total += conf * (1.0 - pred).powi(2) - pred * pred;
        }
    }
    let norms: f64 = uf.iter().chain(tf).map(|v| v * v).sum();
    total + cfg.reg * norms
}

/// Fits user and track factors. The weighted regularized objective is
/// checked after every iteration and must not increase.
pub fn train_user_embeddings(x: &InteractionMatrix, cfg: &AlsConfig) -> Result<AlsFactors> {
    if x.is_empty() {
        return Err(invalid("interaction matrix has no nonzero counts"));
    }
    let k = cfg.factors;
    let max_k = x.users.len().min(x.tracks.len());
    if k == 0 || k > max_k {
        return Err(invalid(format!("factor count {k} must be in 1..={max_k}")));
    }
    if !(cfg.reg > 0.0) || cfg.alpha < 0.0 {
        return Err(invalid("reg must be positive and alpha nonnegative"));
    }
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let init = |label: &str, n: usize| -> Vec<f64> {
        let mut r = rng::derived(cfg.seed, label, 0);
        (0..n * k).map(|_| normal.sample(&mut r)).collect()
    };
    let mut uf = init("als-users", x.users.len());
    let mut tf = init("als-tracks", x.tracks.len());
    let mut history = vec![objective(x, &uf, &tf, k, cfg)];
    for it in 0..cfg.iters {
        uf = solve_side(&x.by_user, &tf, k, cfg);
        tf = solve_side(&x.by_track, &uf, k, cfg);
        let obj = objective(x, &uf, &tf, k, cfg);
        let prev = *history.last().expect("non-empty");
        assert!(
            obj <= prev,
            "ALS objective increased at iteration {it}: {prev} -> {obj}"
        );
        history.push(obj);
    }
    Ok(AlsFactors {
        users: x.users.clone(),
        tracks: x.tracks.clone(),
        user_factors: uf,
        track_factors: tf,
        factors: k,
        objective: history,
    })
}
