use std::time::Instant;

use proptest::prelude::*;
use rand::Rng as _;
use sitgen::datagen::{synth_generate, SynthConfig};
use sitgen::features::{assemble_sp_features, CountryDictionary, SP_FEATURE_DIM};
use sitgen::gbdt::*;
use sitgen::{argmax_situation, rng, Demographics, Situation, TaxonomySubset};

fn brute_force(x: &[SpRow], g: &[f64], h: &[f64], rows: &[usize], cfg: &SpTrainConfig) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for f in 0..SP_FEATURE_DIM {
        let mut values: Vec<f64> = rows.iter().map(|&r| x[r][f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for pair in values.windows(2) {
            let Some(t) = threshold_between(pair[0], pair[1]) else { continue };
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for &r in rows {
                if x[r][f] < f64::from(t) {
                    gl += g[r];
                    hl += h[r];
                } else {
                    gr += g[r];
                    hr += h[r];
                }
            }
            if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
                continue;
            }
            let gain = split_gain(gl, hl, gr, hr, cfg);
            if gain > best.map_or(0.0, |b| b.gain) {
                best = Some(SplitCandidate { feature: f, threshold: t, gain });
            }
        }
    }
    best
}

fn random_instance(seed: u64, dyadic: bool) -> (Vec<SpRow>, Vec<f64>, Vec<f64>, Vec<usize>, SpTrainConfig) {
    let mut r = rng::seeded(seed);
    let n = r.random_range(2..=200);
    let x: Vec<SpRow> = (0..n)
        .map(|_| {
            let mut row = [0.0; SP_FEATURE_DIM];
            for v in row.iter_mut() {
                // a mix of tied small-integer columns and continuous ones
                *v = if r.random_bool(0.5) { r.random_range(0..4) as f64 } else { r.random_range(-3.0..3.0) };
            }
            row
        })
        .collect();
    let (g, h): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|_| {
            if dyadic {
                (r.random_range(-64..=64) as f64 / 64.0, r.random_range(1..=64) as f64 / 64.0)
            } else {
                (r.random_range(-1.0..1.0), r.random_range(0.0..0.25))
            }
        })
        .unzip();
    let rows: Vec<usize> = (0..n).filter(|_| r.random_bool(0.8)).collect();
    let cfg = SpTrainConfig {
        l2_reg: [0.0, 1.0, 3.5][r.random_range(0..3)],
        min_child_weight: [0.0, 1.0, 2.0][r.random_range(0..3)],
        ..Default::default()
    };
    (x, g, h, rows, cfg)
}

#[test]
fn exact_greedy_matches_brute_force_exactly() {
    for seed in 0..300 {
        let (x, g, h, rows, cfg) = random_instance(seed, true);
        assert_eq!(best_split(&x, &g, &h, &rows, &cfg), brute_force(&x, &g, &h, &rows, &cfg), "seed {seed}");
    }
}

#[test]
fn exact_greedy_matches_brute_force_on_real_gradients() {
    for seed in 1000..1300 {
        let (x, g, h, rows, cfg) = random_instance(seed, false);
        let fast = best_split(&x, &g, &h, &rows, &cfg);
        let slow = brute_force(&x, &g, &h, &rows, &cfg);
        match (fast, slow) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                assert!((a.gain - b.gain).abs() <= 1e-9 * b.gain.abs().max(1.0), "seed {seed}: {a:?} vs {b:?}");
                if (a.feature, a.threshold) != (b.feature, b.threshold) {
                    // only a rounding-level tie may pick a different cut
                    assert!((a.gain - b.gain).abs() <= 1e-12, "seed {seed}: {a:?} vs {b:?}");
                }
            }
            other => panic!("seed {seed}: {other:?}"),
        }
    }
}

fn synth_rows(seed: u64, n_streams: usize, taxonomy: TaxonomySubset) -> (Vec<SpRow>, Vec<Situation>) {
    let corpus = synth_generate(&SynthConfig {
        n_users: 30,
        n_tracks: 60,
        n_streams,
        taxonomy,
        signal_strength: 0.8,
        mel_bands: 8,
        mel_frames: 8,
        seed,
        ..Default::default()
    })
    .unwrap();
    let countries = CountryDictionary::from_countries(corpus.demographics.iter().map(|(_, d)| d.country.clone()));
    let demo: std::collections::HashMap<_, _> = corpus.demographics.iter().cloned().collect();
    corpus
        .streams
        .iter()
        .map(|s| {
            let d = demo.get(&s.user).cloned().unwrap_or_else(Demographics::unknown);
            (assemble_sp_features(&s.device, &d, &countries), s.situation.unwrap())
        })
        .unzip()
}

#[test]
fn training_loss_never_increases() {
    for seed in 0..20 {
        let tax = [TaxonomySubset::C4, TaxonomySubset::C8][seed as usize % 2];
        let (x, y) = synth_rows(seed, 600, tax);
        let forest = sp_train(&x, &y, tax, &SpTrainConfig::default()).unwrap();
        assert_eq!(forest.train_loss.len(), 101);
        for (r, w) in forest.train_loss.windows(2).enumerate() {
            assert!(w[1] <= w[0], "seed {seed}, round {r}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn monotone_transform_keeps_training_predictions() {
    let (x, y) = synth_rows(77, 1500, TaxonomySubset::C4);
    let cfg = SpTrainConfig {
        rounds: 20,
        ..Default::default()
    };
    let base = sp_train(&x, &y, TaxonomySubset::C4, &cfg).unwrap();
    for f in [0, 2, 8] {
        let moved: Vec<SpRow> = x
            .iter()
            .map(|r| {
                let mut r = *r;
                r[f] = (r[f] * 0.5).exp() * 3.0 + 1.0;
                r
            })
            .collect();
        let other = sp_train(&moved, &y, TaxonomySubset::C4, &cfg).unwrap();
        for (a, b) in x.iter().zip(&moved) {
            assert_eq!(
                argmax_situation(&sp_predict(&base, a).unwrap()),
                argmax_situation(&sp_predict(&other, b).unwrap())
            );
        }
    }
}

#[test]
fn ranking_contracts() {
    let uniform = SpForest::empty(TaxonomySubset::C4);
    let x = [0.0; SP_FEATURE_DIM];
    let p = sp_predict(&uniform, &x).unwrap();
    assert!(p.as_slice().iter().all(|v| *v == 0.25));
    let top: Vec<Situation> = sp_rank(&uniform, &x, 3).unwrap().into_iter().map(|(s, _)| s).collect();
    assert_eq!(top, [Situation::Work, Situation::Gym, Situation::Party]);
    assert!(sp_rank(&uniform, &x, 0).is_err());
    assert!(sp_rank(&uniform, &x, 5).is_err());
    assert!(sp_predict(&uniform, &x[..10]).is_err());

    let (rows, y) = synth_rows(5, 800, TaxonomySubset::C8);
    let forest = sp_train(&rows, &y, TaxonomySubset::C8, &SpTrainConfig { rounds: 10, ..Default::default() }).unwrap();
    for r in rows.iter().take(50) {
        let full = sp_rank(&forest, r, 8).unwrap();
        let mut tags: Vec<Situation> = full.iter().map(|(s, _)| *s).collect();
        tags.sort();
        assert_eq!(tags, TaxonomySubset::C8.members());
        assert!(full.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(sp_rank(&forest, r, 1).unwrap()[0].0, argmax_situation(&sp_predict(&forest, r).unwrap()));
        assert_eq!(sp_predict(&forest, r).unwrap(), sp_predict(&forest, r).unwrap());
        assert!((sp_predict(&forest, r).unwrap().as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn forest_file_round_trip() {
    let (rows, y) = synth_rows(8, 1000, TaxonomySubset::C4);
    let forest = sp_train(&rows, &y, TaxonomySubset::C4, &SpTrainConfig { rounds: 15, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sp.spf");
    forest.save(&path).unwrap();
    let back = SpForest::load_for(&path, TaxonomySubset::C4).unwrap();
    assert_eq!(back, forest);
    let mut r = rng::seeded(1);
    for _ in 0..100 {
        let mut x = [0.0; SP_FEATURE_DIM];
        x.iter_mut().for_each(|v| *v = r.random_range(-1.5..2.5));
        let (a, b) = (sp_predict(&forest, &x).unwrap(), sp_predict(&back, &x).unwrap());
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert!(matches!(
        SpForest::load_for(&path, TaxonomySubset::C8),
        Err(sitgen::Error::TaxonomyMismatch { found: 4, expected: 8 })
    ));

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(SpForest::read_from(&mut bad.as_slice()).is_err());
    let truncated = &bytes[..bytes.len() - 7];
    let err = SpForest::read_from(&mut &truncated[..]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(SpForest::read_from(&mut version.as_slice()), Err(sitgen::Error::Version { .. })));
}

#[test]
fn single_prediction_is_fast() {
    let (rows, y) = synth_rows(3, 3000, TaxonomySubset::C12);
    let forest = sp_train(&rows, &y, TaxonomySubset::C12, &SpTrainConfig::default()).unwrap();
    let mut times: Vec<f64> = rows
        .iter()
        .take(500)
        .map(|r| {
            let t = Instant::now();
            std::hint::black_box(sp_predict(&forest, r).unwrap());
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    assert!(times[250] < 1e-3, "median prediction took {:.3} ms", times[250] * 1e3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn predictions_are_distributions(seed in 0u64..1000, xs in proptest::collection::vec(-10.0f64..10.0, SP_FEATURE_DIM)) {
        let (rows, y) = synth_rows(seed % 4, 300, TaxonomySubset::C4);
        let forest = sp_train(&rows, &y, TaxonomySubset::C4, &SpTrainConfig { rounds: 3, ..Default::default() }).unwrap();
        let p = sp_predict(&forest, &xs).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
