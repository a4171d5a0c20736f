use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sitgen::features::MelSpectrogram;
use sitgen::nn::*;
use sitgen::datagen::{synth_generate, SynthConfig};
use sitgen::features::{train_user_embeddings, AlsConfig};
use sitgen::{rng, ProbabilityVector, Situation, TaxonomySubset};

fn random_mel(r: &mut rng::Rng, bands: usize, frames: usize, shift: f32) -> MelSpectrogram {
    let n = Normal::new(0.0f32, 1.0).unwrap();
    MelSpectrogram::new(bands, frames, (0..bands * frames).map(|_| n.sample(r) + shift).collect()).unwrap()
}

fn random_user(r: &mut rng::Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

fn reduced(taxonomy: TaxonomySubset) -> UamatConfig {
    UamatConfig {
        mel_bands: 32,
        mel_frames: 64,
        user_dim: 16,
        taxonomy,
        width: 0.25,
        dropout: 0.3,
    }
}

#[test]
fn gradients_match_central_differences() {
    let cfg = reduced(TaxonomySubset::C4);
    let model = UamatModel::new(cfg, 11).unwrap();
    let mut r = rng::seeded(3);
    let mels: Vec<MelSpectrogram> = (0..4).map(|i| random_mel(&mut r, 32, 64, i as f32 * 0.3)).collect();
    let users: Vec<Vec<f32>> = (0..4).map(|_| random_user(&mut r, 16)).collect();
    let examples: Vec<UamatExample<'_>> = (0..4)
        .map(|i| UamatExample {
            mel: &mels[i],
            user: &users[i],
            label: TaxonomySubset::C4.members()[i],
        })
        .collect();
    let t = Instant::now();
    let report = grad_check(&model, &examples, &GradCheckConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    for s in &report.samples {
        assert!(s.rel_error < 1e-4, "{s:?}");
    }
    assert!(report.samples.len() >= 2 + 20 + 20);
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_kind);
    assert!(secs < 60.0);
}

struct Inputs {
    mels: Vec<MelSpectrogram>,
    users: Vec<Vec<f32>>,
    labels: Vec<Situation>,
}

impl Inputs {
    fn examples(&self) -> Vec<UamatExample<'_>> {
        (0..self.labels.len())
            .map(|i| UamatExample {
                mel: &self.mels[i],
                user: &self.users[i],
                label: self.labels[i],
            })
            .collect()
    }
}

/// Each class lights up its own band block.
fn separable(n: usize, seed: u64) -> Inputs {
    let mut r = rng::seeded(seed);
    let tax = TaxonomySubset::C4;
    let mut out = Inputs {
        mels: Vec::new(),
        users: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0..n {
        let c = i % 4;
        let mut mel = random_mel(&mut r, 32, 64, 0.0);
        for band in c * 8..(c + 1) * 8 {
            for f in 0..64 {
                mel.data[band * 64 + f] = mel.data[band * 64 + f] * 0.2 + 2.0;
            }
        }
        out.mels.push(mel);
        out.users.push(random_user(&mut r, 16));
        out.labels.push(tax.members()[c]);
    }
    out
}

#[test]
fn outputs_are_distributions_and_deterministic() {
    let model = UamatModel::new(reduced(TaxonomySubset::C8), 1).unwrap();
    let data = separable(6, 2);
    for e in data.examples() {
        let p = model.forward(e.mel, e.user, false).unwrap();
        assert_eq!(p.as_slice().len(), 8);
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.as_slice().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(p, model.forward(e.mel, e.user, false).unwrap());
        let t = model.forward(e.mel, e.user, true).unwrap();
        assert!((t.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_ne!(t, p, "training mode should drop units");
    }
}

#[test]
fn inference_ignores_batch_composition() {
    let model = UamatModel::new(reduced(TaxonomySubset::C4), 4).unwrap();
    let data = separable(5, 9);
    let mels: Vec<&MelSpectrogram> = data.mels.iter().collect();
    let users: Vec<&[f32]> = data.users.iter().map(|u| u.as_slice()).collect();
    let all = model.predict_many(&mels, &users, &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (4, 0)]).unwrap();
    let one = model.predict_many(&mels[4..], &users[..1], &[(0, 0)]).unwrap();
    assert_eq!(all[5], one[0]);
    for i in 0..5 {
        let p = model.forward(&data.mels[i], &data.users[i], false).unwrap();
        assert!(p.as_slice().iter().zip(all[i].as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn shape_errors_name_both_sides() {
    let model = UamatModel::new(reduced(TaxonomySubset::C4), 0).unwrap();
    let mut r = rng::seeded(0);
    let mel = random_mel(&mut r, 16, 64, 0.0);
    let err = model.forward(&mel, &[0.0; 16], false).unwrap_err().to_string();
    assert!(err.contains("32x64") && err.contains("16x64"), "{err}");
    let mel = random_mel(&mut r, 32, 64, 0.0);
    let err = model.forward(&mel, &[0.0; 15], false).unwrap_err().to_string();
    assert!(err.contains("16") && err.contains("15"), "{err}");
}

#[test]
fn architecture_widths() {
    let full = UamatModel::new(UamatConfig::default(), 0).unwrap();
    let shapes: Vec<(&str, Vec<usize>)> = full.params.iter().map(|p| (p.name.as_str(), p.tensor.shape().to_vec())).collect();
    assert_eq!(shapes[2], ("conv1.weight", vec![32, 1, 3, 3]));
    assert_eq!(shapes[8], ("conv4.weight", vec![256, 128, 3, 3]));
    // 96×646 pools to 6×40 before flattening
    assert_eq!(shapes[10], ("audio.weight", vec![AUDIO_EMBEDDING_DIM, 256 * 6 * 40]));
    assert_eq!(shapes.last().unwrap().1, vec![4]);
    let c12 = UamatModel::new(UamatConfig { taxonomy: TaxonomySubset::C12, ..reduced(TaxonomySubset::C12) }, 0).unwrap();
    assert_eq!(c12.params.last().unwrap().tensor.shape(), &[12]);
}

#[test]
fn loss_examples() {
    let uniform = ProbabilityVector::uniform(TaxonomySubset::C4);
    assert!((loss(&uniform, Situation::Party).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((loss(&uniform, Situation::Party).unwrap() - 1.3863).abs() < 1e-4);
    let sure = ProbabilityVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(loss(&sure, Situation::Work).unwrap().abs() < 1e-12);
    assert!((loss(&sure, Situation::Gym).unwrap() + LOSS_CLIP.ln()).abs() < 1e-12);
    let tiny = ProbabilityVector::new(vec![1.0 - 1e-20, 1e-20, 0.0, 0.0]).unwrap();
    assert_eq!(loss(&tiny, Situation::Gym).unwrap(), -(1e-12f64).ln());
    assert!(loss(&uniform, TaxonomySubset::C8.members()[6]).is_err());
}

#[test]
fn staircase_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 0.1);
    assert_eq!(cfg.lr_at(999), 0.1);
    assert!((cfg.lr_at(2500) - 0.09216).abs() < 1e-15);
}

#[test]
fn zero_output_layer_gives_softmax_minus_onehot() {
    let mut model = UamatModel::new(reduced(TaxonomySubset::C4), 6).unwrap();
    let n = model.params.len();
    for p in &mut model.params[n - 2..] {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let data = separable(8, 3);
    let labels = [0usize, 1, 2, 3, 0, 0, 1, 2];
    let data = Inputs {
        labels: labels.iter().map(|&c| TaxonomySubset::C4.members()[c]).collect(),
        ..data
    };
    let examples = data.examples();
    let (loss0, grads) = batch_gradients(&model, &examples).unwrap();
    assert!((loss0 - 4f64.ln()).abs() < 1e-12);
    let eps = 1e-6;
    for c in 0..4 {
        let expected = labels.iter().map(|&l| 0.25 - f64::from(u8::from(l == c))).sum::<f64>() / 8.0;
        assert!((grads[n - 1][c] - expected).abs() < 1e-12);
        let mut probe = model.clone();
        probe.params[n - 1].tensor.data_mut()[c] = eps;
        let up = batch_gradients(&probe, &examples).unwrap().0;
        probe.params[n - 1].tensor.data_mut()[c] = -eps;
        let down = batch_gradients(&probe, &examples).unwrap().0;
        assert!(((up - down) / (2.0 * eps) - expected).abs() < 1e-8);
    }
}

fn adam_cfg(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        lr0: 1e-3,
        batch_size: batch,
        max_epochs: epochs,
        patience: epochs,
        validation_fraction: 0.0,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn first_adam_steps_reduce_loss() {
    let data = separable(32, 7);
    let model = UamatModel::new(UamatConfig { dropout: 0.0, ..reduced(TaxonomySubset::C4) }, 3).unwrap();
    // one full batch per epoch: each epoch's loss is measured just before its step
    let (_, history) = train(model, &data.examples(), &TrainConfig { lr0: 1e-4, ..adam_cfg(6, 32) }).unwrap();
    let losses: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn training_is_reproducible() {
    let data = separable(24, 8);
    let run = || {
        let model = UamatModel::new(reduced(TaxonomySubset::C4), 3).unwrap();
        train(model, &data.examples(), &TrainConfig { validation_fraction: 0.25, ..adam_cfg(3, 8) }).unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert_eq!(ha.n_validation, 8);
    assert!(train(UamatModel::new(reduced(TaxonomySubset::C4), 3).unwrap(), &[], &adam_cfg(1, 8)).is_err());
}

/// 64 streams with distinct (user, spectrogram) inputs from a full-signal
/// corpus. Noise-free proxies repeat across tracks with the same profile.
fn overfit_inputs() -> Inputs {
    let corpus = synth_generate(&SynthConfig {
        n_users: 20,
        n_tracks: 40,
        n_streams: 400,
        signal_strength: 1.0,
        mel_bands: 32,
        mel_frames: 64,
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let als = train_user_embeddings(
        &corpus.interactions,
        &AlsConfig {
            factors: 16,
            iters: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let mel_of: std::collections::HashMap<_, _> = corpus.mels.iter().map(|(t, m)| (t.clone(), m)).collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Inputs {
        mels: Vec::new(),
        users: Vec::new(),
        labels: Vec::new(),
    };
    for s in &corpus.streams {
        let mel_bits: Vec<u32> = mel_of[&s.track].data.iter().map(|v| v.to_bits()).collect();
        if out.labels.len() == 64 || !seen.insert((s.user.clone(), mel_bits)) {
            continue;
        }
        let u = als.users.iter().position(|x| *x == s.user).unwrap();
        out.mels.push((*mel_of[&s.track]).clone());
        out.users.push(als.user_vector(u).iter().map(|&v| v as f32).collect());
        out.labels.push(s.situation.unwrap());
    }
    assert_eq!(out.labels.len(), 64);
    out
}

#[test]
fn overfits_sixty_four_streams() {
    let data = overfit_inputs();
    let examples = data.examples();
    let model = UamatModel::new(UamatConfig { user_dim: 16, ..reduced(TaxonomySubset::C4) }, 21).unwrap();
    let (model, history) = train(model, &examples, &adam_cfg(200, 16)).unwrap();
    let (_, acc) = evaluate(&model, &examples).unwrap();
    assert_eq!(acc, 1.0, "after {} epochs", history.epochs.len());
}

#[test]
fn model_file_round_trip() {
    let data = separable(16, 4);
    let model = UamatModel::new(reduced(TaxonomySubset::C4), 2).unwrap();
    let (mut model, history) = train(model, &data.examples(), &adam_cfg(2, 8)).unwrap();
    model.meta.training = Some(history.config);
    model.meta.metrics.insert("train_accuracy".into(), 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.uam");
    model.save(&path).unwrap();
    let back = UamatModel::load_for(&path, TaxonomySubset::C4).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.hash(), model.hash());
    let mut r = rng::seeded(17);
    for _ in 0..100 {
        let shift = r.random_range(-1.0..1.0);
        let mel = random_mel(&mut r, 32, 64, shift);
        let user = random_user(&mut r, 16);
        let (a, b) = (model.forward(&mel, &user, false).unwrap(), back.forward(&mel, &user, false).unwrap());
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert!(matches!(
        UamatModel::load_for(&path, TaxonomySubset::C8),
        Err(sitgen::Error::TaxonomyMismatch { found: 4, expected: 8 })
    ));
    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(UamatModel::read_from(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));
    let err = UamatModel::read_from(&mut &bytes[..bytes.len() - 3]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(UamatModel::read_from(&mut version.as_slice()), Err(sitgen::Error::Version { found: 2, expected: 1 })));
}
