use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{
    col2im, dense_backward, dense_forward, gemm, im2col, maxpool, relu_backward, relu_in_place, Tensor,
};
use crate::domain::{softmax, ProbabilityVector, Situation, TaxonomySubset};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::rng;

pub const AUDIO_EMBEDDING_DIM: usize = 256;
pub const USER_HIDDEN: usize = 128;
pub const JOINT_HIDDEN: usize = 128;
pub const BASE_FILTERS: [usize; 4] = [32, 64, 128, 256];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LOSS_CLIP: f64 = 1e-12;

/// Examples per batch are split into this many contiguous chunks, each
/// processed independently and reduced in order, so results do not depend
/// on the worker count.
const CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UamatConfig {
    pub mel_bands: usize,
    pub mel_frames: usize,
    pub user_dim: usize,
    pub taxonomy: TaxonomySubset,
    /// Multiplier on the convolution filter counts.
    pub width: f64,
    pub dropout: f64,
}

impl Default for UamatConfig {
    fn default() -> Self {
        UamatConfig {
            mel_bands: 96,
            mel_frames: 646,
            user_dim: 128,
            taxonomy: TaxonomySubset::C4,
            width: 1.0,
            dropout: 0.3,
        }
    }
}

impl UamatConfig {
    pub fn filters(&self) -> [usize; 4] {
        BASE_FILTERS.map(|f| ((f as f64 * self.width).round() as usize).max(1))
    }

    /// Spatial size after the four pooling stages.
    pub fn pooled_shape(&self) -> (usize, usize) {
        (self.mel_bands >> 4, self.mel_frames >> 4)
    }

    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.pooled_shape();
        self.filters()[3] * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bands < 16 || self.mel_frames < 16 {
            return Err(Error::InvalidInput(format!(
                "mel input must be at least 16x16 to survive four 2x2 pools, got {}x{}",
                self.mel_bands, self.mel_frames
            )));
        }
        if self.user_dim == 0 {
            return Err(Error::InvalidInput("user embedding dimension must be positive".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidInput(format!("width multiplier must be positive, got {}", self.width)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout must be within [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

pub(crate) const BN_GAMMA: usize = 0;
pub(crate) const BN_BETA: usize = 1;
pub(crate) const fn conv_w(l: usize) -> usize {
    2 + 2 * l
}
pub(crate) const AUDIO_W: usize = 10;
pub(crate) const USER1_W: usize = 12;
pub(crate) const USER2_W: usize = 14;
pub(crate) const JOINT_W: usize = 16;
pub(crate) const OUT_W: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    BatchNorm,
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: LayerKind,
    pub tensor: Tensor,
}

/// Which batch-dependent behaviors are active in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Normalize the input with the batch's own statistics.
    pub batch_stats: bool,
    pub dropout: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        batch_stats: true,
        dropout: true,
    };
    pub const INFERENCE: Mode = Mode {
        batch_stats: false,
        dropout: false,
    };
    pub const GRAD_CHECK: Mode = Mode {
        batch_stats: true,
        dropout: false,
    };
}

/// The user-aware autotagger: a convolutional audio branch and a dense user
/// branch joined into a softmax over situations.
#[derive(Debug, Clone, PartialEq)]
pub struct UamatModel {
    pub config: UamatConfig,
    pub params: Vec<Param>,
    pub running_mean: f64,
    pub running_var: f64,
    pub meta: ModelMeta,
}

/// Provenance stored in the model file header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub training: Option<super::TrainConfig>,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

/// Rounds to the nearest f32 so the parameters survive a float32 file
/// round trip unchanged.
pub(crate) fn snap(v: f64) -> f64 {
    f64::from(v as f32)
}

impl UamatModel {
    /// He-uniform weights, zero biases, identity batch-norm.
    pub fn new(config: UamatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.filters();
        let c = config.taxonomy.size();
        let mut shapes: Vec<(String, LayerKind, Vec<usize>)> = vec![
            ("bn.gamma".into(), LayerKind::BatchNorm, vec![1]),
            ("bn.beta".into(), LayerKind::BatchNorm, vec![1]),
        ];
        let mut cin = 1;
        for (l, &cout) in f.iter().enumerate() {
            shapes.push((format!("conv{}.weight", l + 1), LayerKind::Conv, vec![cout, cin, 3, 3]));
            shapes.push((format!("conv{}.bias", l + 1), LayerKind::Conv, vec![cout]));
            cin = cout;
        }
        for (name, out, inp) in [
            ("audio", AUDIO_EMBEDDING_DIM, config.flat_dim()),
            ("user1", USER_HIDDEN, config.user_dim),
            ("user2", USER_HIDDEN, USER_HIDDEN),
            ("joint", JOINT_HIDDEN, AUDIO_EMBEDDING_DIM + USER_HIDDEN),
            ("out", c, JOINT_HIDDEN),
        ] {
            shapes.push((format!("{name}.weight"), LayerKind::Dense, vec![out, inp]));
            shapes.push((format!("{name}.bias"), LayerKind::Dense, vec![out]));
        }
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind, shape))| {
                let n: usize = shape.iter().product();
                let data = if name == "bn.gamma" {
                    vec![1.0; n]
                } else if name.ends_with(".bias") || name == "bn.beta" {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let mut r = rng::derived(seed, "uamat-init", i as u64);
                    (0..n).map(|_| snap(r.random_range(-limit..limit))).collect()
                };
                Param {
                    name,
                    kind,
                    tensor: Tensor::new(shape, data).expect("shape matches data"),
                }
            })
            .collect();
        Ok(UamatModel {
            config,
            params,
            running_mean: 0.0,
            running_var: 1.0,
            meta: ModelMeta::default(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.taxonomy.size()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub(crate) fn p(&self, i: usize) -> &[f64] {
        self.params[i].tensor.data()
    }

    pub fn check_mel(&self, mel: &MelSpectrogram) -> Result<()> {
        if (mel.bands, mel.frames) != (self.config.mel_bands, self.config.mel_frames) {
            return Err(Error::ShapeMismatch {
                context: "mel input",
                expected: format!("{}x{}", self.config.mel_bands, self.config.mel_frames),
                got: format!("{}x{}", mel.bands, mel.frames),
            });
        }
        Ok(())
    }

    pub fn check_user(&self, e_u: &[f32]) -> Result<()> {
        if e_u.len() != self.config.user_dim {
            return Err(Error::ShapeMismatch {
                context: "user embedding",
                expected: self.config.user_dim.to_string(),
                got: e_u.len().to_string(),
            });
        }
        if e_u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("user embedding must be finite".into()));
        }
        Ok(())
    }

    /// The 256-d audio embedding of one spectrogram, inference mode.
    pub fn audio_embedding(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        self.check_mel(mel)?;
        let y0 = self.normalize(&[mel.data.as_slice()], self.running_mean, self.running_var);
        Ok(self.audio_forward(&y0, 1).embedding)
    }

    /// Output of the user branch for one embedding.
    pub fn user_features(&self, e_u: &[f32]) -> Result<Vec<f64>> {
        self.check_user(e_u)?;
        let u: Vec<f64> = e_u.iter().map(|&v| f64::from(v)).collect();
        Ok(self.user_forward(&u, 1).1)
    }

    /// Situation distribution from precomputed branch outputs, inference
    /// mode.
    pub fn head(&self, audio: &[f64], user: &[f64]) -> Result<ProbabilityVector> {
        if audio.len() != AUDIO_EMBEDDING_DIM || user.len() != USER_HIDDEN {
            return Err(Error::ShapeMismatch {
                context: "joint head input",
                expected: format!("{AUDIO_EMBEDDING_DIM}+{USER_HIDDEN}"),
                got: format!("{}+{}", audio.len(), user.len()),
            });
        }
        let cat = [audio, user].concat();
        let (_, _, logits) = self.head_forward(&cat, 1, None);
        ProbabilityVector::new(softmax(&logits))
    }

    /// `P(c | mel, user)`. With `training`, dropout is active (seeded by
    /// `dropout_seed` = 0) and the input is normalized with its own
    /// statistics; otherwise running statistics are used.
    pub fn forward(&self, mel: &MelSpectrogram, e_u: &[f32], training: bool) -> Result<ProbabilityVector> {
        if !training {
            return self.head(&self.audio_embedding(mel)?, &self.user_features(e_u)?);
        }
        self.check_mel(mel)?;
        self.check_user(e_u)?;
        let batch = Batch {
            mels: vec![mel.data.as_slice()],
            users: vec![e_u],
            labels: vec![0],
            dropout_seed: 0,
        };
        let (mean, var) = batch_stats(&batch.mels);
        let y0 = self.normalize(&batch.mels, mean, var);
        let u: Vec<f64> = e_u.iter().map(|&v| f64::from(v)).collect();
        let fwd = self.forward_chunk(&y0, &u, 1, Some(&self.dropout_masks(&batch, 0, 1)));
        ProbabilityVector::new(fwd.probs)
    }

    /// Batch-norm output `γ·(x − mean)/√(var + ε) + β`.
    pub(crate) fn normalize(&self, mels: &[&[f32]], mean: f64, var: f64) -> Vec<f64> {
        let scale = 1.0 / (var + BN_EPS).sqrt();
        let (g, b) = (self.p(BN_GAMMA)[0], self.p(BN_BETA)[0]);
        mels.iter()
            .flat_map(|m| m.iter().map(move |&v| g * ((f64::from(v) - mean) * scale) + b))
            .collect()
    }

    fn audio_forward(&self, y0: &[f64], b: usize) -> AudioCache {
        let cfg = &self.config;
        let filters = cfg.filters();
        let (mut h, mut w) = (cfg.mel_bands, cfg.mel_frames);
        let mut cin = 1;
        let mut act = y0.to_vec();
        let mut convs = Vec::with_capacity(4);
        for (l, &cout) in filters.iter().enumerate() {
            let cols = im2col(&act, cin, b, h, w);
            let n = b * h * w;
            let mut z = vec![0.0; cout * n];
            gemm(cout, cin * 9, n, self.p(conv_w(l)), false, &cols, false, &mut z, false);
            let bias = self.p(conv_w(l) + 1);
            for (row, bb) in z.chunks_mut(n).zip(bias) {
                row.iter_mut().for_each(|v| *v += bb);
            }
            relu_in_place(&mut z);
            let (pooled, argmax) = maxpool(&z, cout * b, h, w);
            convs.push(ConvCache {
                cols,
                relu: z,
                argmax,
                cin,
                cout,
                h,
                w,
            });
            act = pooled;
            cin = cout;
            h /= 2;
            w /= 2;
        }
        // [C, B, h, w] → [B, C·h·w]
        let hw = h * w;
        let flat_dim = cin * hw;
        let mut flat = vec![0.0; b * flat_dim];
        for c in 0..cin {
            for bi in 0..b {
                flat[bi * flat_dim + c * hw..][..hw].copy_from_slice(&act[(c * b + bi) * hw..][..hw]);
            }
        }
        let mut embedding = dense_forward(&flat, b, flat_dim, self.p(AUDIO_W), self.p(AUDIO_W + 1));
        relu_in_place(&mut embedding);
        AudioCache { convs, flat, embedding }
    }

    fn user_forward(&self, u: &[f64], b: usize) -> (Vec<f64>, Vec<f64>) {
        let mut u1 = dense_forward(u, b, self.config.user_dim, self.p(USER1_W), self.p(USER1_W + 1));
        relu_in_place(&mut u1);
        let mut u2 = dense_forward(&u1, b, USER_HIDDEN, self.p(USER2_W), self.p(USER2_W + 1));
        relu_in_place(&mut u2);
        (u1, u2)
    }

    /// Returns (hidden after ReLU, hidden after dropout, logits).
    fn head_forward(&self, cat: &[f64], b: usize, masks: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut j = dense_forward(cat, b, AUDIO_EMBEDDING_DIM + USER_HIDDEN, self.p(JOINT_W), self.p(JOINT_W + 1));
        relu_in_place(&mut j);
        let jd = match masks {
            Some(m) => j.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => j.clone(),
        };
        let logits = dense_forward(&jd, b, JOINT_HIDDEN, self.p(OUT_W), self.p(OUT_W + 1));
        (j, jd, logits)
    }

    fn forward_chunk(&self, y0: &[f64], u: &[f64], b: usize, masks: Option<&[f64]>) -> ChunkForward {
        let audio = self.audio_forward(y0, b);
        let (u1, u2) = self.user_forward(u, b);
        let mut cat = Vec::with_capacity(b * (AUDIO_EMBEDDING_DIM + USER_HIDDEN));
        for bi in 0..b {
            cat.extend_from_slice(&audio.embedding[bi * AUDIO_EMBEDDING_DIM..][..AUDIO_EMBEDDING_DIM]);
            cat.extend_from_slice(&u2[bi * USER_HIDDEN..][..USER_HIDDEN]);
        }
        let (j, jd, logits) = self.head_forward(&cat, b, masks);
        let c = self.n_classes();
        let probs = logits.chunks(c).flat_map(softmax).collect();
        ChunkForward {
            audio,
            u1,
            u2,
            cat,
            j,
            jd,
            probs,
        }
    }

    /// Inverted-dropout multipliers for the joint hidden layer, one block
    /// per example, keyed by the example's position in the batch.
    pub(crate) fn dropout_masks(&self, batch: &Batch<'_>, start: usize, end: usize) -> Vec<f64> {
        let p = self.config.dropout;
        let keep = 1.0 / (1.0 - p);
        (start..end)
            .flat_map(|i| {
                let mut r = rng::derived(batch.dropout_seed, "dropout", i as u64);
                (0..JOINT_HIDDEN)
                    .map(|_| if r.random::<f64>() < p { 0.0 } else { keep })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Mean cross-entropy over the batch, its gradient with respect to every
    /// parameter, and the input statistics that were used.
    pub(crate) fn loss_and_grads(&self, batch: &Batch<'_>, mode: Mode) -> Result<BatchResult> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let (mean, var) = if mode.batch_stats {
            batch_stats(&batch.mels)
        } else {
            (self.running_mean, self.running_var)
        };
        let bounds: Vec<(usize, usize)> = (0..CHUNKS)
            .map(|k| (k * n / CHUNKS, (k + 1) * n / CHUNKS))
            .filter(|(s, e)| e > s)
            .collect();
        let parts: Vec<ChunkResult> = bounds
            .par_iter()
            .map(|&(s, e)| self.chunk_pass(batch, s, e, mean, var, mode, n))
            .collect();
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let (mut loss, mut correct, mut pattern) = (0.0, 0, 0u64);
        for part in parts {
            pattern = fnv(pattern, part.pattern);
            for (g, pg) in grads.iter_mut().zip(&part.grads) {
                g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
            }
            loss += part.loss;
            correct += part.correct;
        }
        Ok(BatchResult {
            loss: loss / n as f64,
            correct,
            grads,
            mean,
            var,
            pattern,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn chunk_pass(&self, batch: &Batch<'_>, s: usize, e: usize, mean: f64, var: f64, mode: Mode, n: usize) -> ChunkResult {
        let b = e - s;
        let cfg = &self.config;
        let hw = cfg.mel_bands * cfg.mel_frames;
        let scale = 1.0 / (var + BN_EPS).sqrt();
        let xhat: Vec<f64> = batch.mels[s..e]
            .iter()
            .flat_map(|m| m.iter().map(|&v| (f64::from(v) - mean) * scale))
            .collect();
        let (g0, b0) = (self.p(BN_GAMMA)[0], self.p(BN_BETA)[0]);
        let y0: Vec<f64> = xhat.iter().map(|x| g0 * x + b0).collect();
        let u: Vec<f64> = batch.users[s..e].iter().flat_map(|v| v.iter().map(|&x| f64::from(x))).collect();
        let masks = mode.dropout.then(|| self.dropout_masks(batch, s, e));
        let fwd = self.forward_chunk(&y0, &u, b, masks.as_deref());

        let c = self.n_classes();
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut dlogits = fwd.probs.clone();
        for (bi, &label) in batch.labels[s..e].iter().enumerate() {
            let p = &fwd.probs[bi * c..][..c];
            loss -= p[label].max(LOSS_CLIP).ln();
            correct += usize::from(crate::domain::argmax_index(p) == label);
            dlogits[bi * c + label] -= 1.0;
        }
        dlogits.iter_mut().for_each(|v| *v /= n as f64);

        let mut dj = {
            let (w, bb) = two_mut(&mut grads, OUT_W, OUT_W + 1);
            dense_backward(&dlogits, &fwd.jd, b, JOINT_HIDDEN, self.p(OUT_W), w, bb, true)
        };
        if let Some(m) = &masks {
            dj.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        relu_backward(&mut dj, &fwd.j);
        let cat_dim = AUDIO_EMBEDDING_DIM + USER_HIDDEN;
        let dcat = {
            let (w, bb) = two_mut(&mut grads, JOINT_W, JOINT_W + 1);
            dense_backward(&dj, &fwd.cat, b, cat_dim, self.p(JOINT_W), w, bb, true)
        };

        let mut dea = vec![0.0; b * AUDIO_EMBEDDING_DIM];
        let mut du2 = vec![0.0; b * USER_HIDDEN];
        for bi in 0..b {
            dea[bi * AUDIO_EMBEDDING_DIM..][..AUDIO_EMBEDDING_DIM]
                .copy_from_slice(&dcat[bi * cat_dim..][..AUDIO_EMBEDDING_DIM]);
            du2[bi * USER_HIDDEN..][..USER_HIDDEN]
                .copy_from_slice(&dcat[bi * cat_dim + AUDIO_EMBEDDING_DIM..][..USER_HIDDEN]);
        }

        relu_backward(&mut du2, &fwd.u2);
        let mut du1 = {
            let (w, bb) = two_mut(&mut grads, USER2_W, USER2_W + 1);
            dense_backward(&du2, &fwd.u1, b, USER_HIDDEN, self.p(USER2_W), w, bb, true)
        };
        relu_backward(&mut du1, &fwd.u1);
        {
            let (w, bb) = two_mut(&mut grads, USER1_W, USER1_W + 1);
            dense_backward(&du1, &u, b, cfg.user_dim, self.p(USER1_W), w, bb, false);
        }

        relu_backward(&mut dea, &fwd.audio.embedding);
        let flat_dim = cfg.flat_dim();
        let dflat = {
            let (w, bb) = two_mut(&mut grads, AUDIO_W, AUDIO_W + 1);
            dense_backward(&dea, &fwd.audio.flat, b, flat_dim, self.p(AUDIO_W), w, bb, true)
        };
        // [B, C·h·w] → [C, B, h, w]
        let last = &fwd.audio.convs[3];
        let (ph, pw) = (last.h / 2, last.w / 2);
        let phw = ph * pw;
        let mut dact = vec![0.0; last.cout * b * phw];
        for ch in 0..last.cout {
            for bi in 0..b {
                dact[(ch * b + bi) * phw..][..phw].copy_from_slice(&dflat[bi * flat_dim + ch * phw..][..phw]);
            }
        }
        for l in (0..4).rev() {
            let cc = &fwd.audio.convs[l];
            let npix = b * cc.h * cc.w;
            let mut dz = vec![0.0; cc.cout * npix];
            for (o, &i) in cc.argmax.iter().enumerate() {
                dz[i as usize] += dact[o];
            }
            relu_backward(&mut dz, &cc.relu);
            let k = cc.cin * 9;
            {
                let (w, bb) = two_mut(&mut grads, conv_w(l), conv_w(l) + 1);
                gemm(cc.cout, npix, k, &dz, false, &cc.cols, true, w, true);
                for (d, row) in bb.iter_mut().zip(dz.chunks(npix)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            let mut dcols = vec![0.0; k * npix];
            gemm(k, cc.cout, npix, self.p(conv_w(l)), true, &dz, false, &mut dcols, false);
            dact = col2im(&dcols, cc.cin, b, cc.h, cc.w);
        }
        debug_assert_eq!(dact.len(), b * hw);
        grads[BN_GAMMA][0] += dact.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>();
        grads[BN_BETA][0] += dact.iter().sum::<f64>();
        debug_assert!(grads.iter().flatten().all(|g| g.is_finite()));

        ChunkResult {
            grads,
            loss,
            correct,
            pattern: activation_pattern(&fwd),
        }
    }

    /// Predicted distributions for many (mel, user) inputs through the
    /// inference path, computing each branch once per distinct input.
    pub fn predict_many(&self, mels: &[&MelSpectrogram], users: &[&[f32]], pairs: &[(usize, usize)]) -> Result<Vec<ProbabilityVector>> {
        let audio: Vec<Vec<f64>> = mels.par_iter().map(|m| self.audio_embedding(m)).collect::<Result<_>>()?;
        let user: Vec<Vec<f64>> = users.par_iter().map(|u| self.user_features(u)).collect::<Result<_>>()?;
        pairs
            .par_iter()
            .map(|&(a, u)| {
                let (Some(ea), Some(eu)) = (audio.get(a), user.get(u)) else {
                    return Err(Error::InvalidInput(format!("pair ({a}, {u}) is out of range")));
                };
                self.head(ea, eu)
            })
            .collect()
    }

    pub fn predict_situation(&self, mel: &MelSpectrogram, e_u: &[f32]) -> Result<Situation> {
        Ok(crate::domain::argmax_situation(&self.forward(mel, e_u, false)?))
    }
}

fn two_mut(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

/// Mean and (biased) variance over every value of every spectrogram.
pub(crate) fn batch_stats(mels: &[&[f32]]) -> (f64, f64) {
    let n: usize = mels.iter().map(|m| m.len()).sum();
    let mean = mels.iter().flat_map(|m| m.iter()).map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let var = mels
        .iter()
        .flat_map(|m| m.iter())
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var)
}

pub(crate) struct Batch<'a> {
    pub mels: Vec<&'a [f32]>,
    pub users: Vec<&'a [f32]>,
    pub labels: Vec<usize>,
    pub dropout_seed: u64,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
}

pub(crate) struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Vec<f64>>,
    pub mean: f64,
    pub var: f64,
    /// Changes whenever a ReLU or pooling decision differs.
    pub pattern: u64,
}

struct ConvCache {
    cols: Vec<f64>,
    relu: Vec<f64>,
    argmax: Vec<u32>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

struct AudioCache {
    convs: Vec<ConvCache>,
    flat: Vec<f64>,
    embedding: Vec<f64>,
}

struct ChunkForward {
    audio: AudioCache,
    u1: Vec<f64>,
    u2: Vec<f64>,
    cat: Vec<f64>,
    j: Vec<f64>,
    jd: Vec<f64>,
    probs: Vec<f64>,
}

struct ChunkResult {
    grads: Vec<Vec<f64>>,
    loss: f64,
    correct: usize,
    pattern: u64,
}

fn fnv(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3)
}

/// Fingerprint of every ReLU on/off state and pooling choice in a pass.
fn activation_pattern(fwd: &ChunkForward) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for conv in &fwd.audio.convs {
        h = conv.relu.iter().fold(h, |h, v| fnv(h, u64::from(*v > 0.0)));
        h = conv.argmax.iter().fold(h, |h, a| fnv(h, u64::from(*a)));
    }
    for layer in [&fwd.audio.embedding, &fwd.u1, &fwd.u2, &fwd.j] {
        h = layer.iter().fold(h, |h, v| fnv(h, u64::from(*v > 0.0)));
    }
    h
}

/// `−ln p[label]` with `p` clipped at 1e-12.
pub fn loss(p: &ProbabilityVector, label: Situation) -> Result<f64> {
    let v = p
        .get(label)
        .ok_or_else(|| Error::InvalidInput(format!("label {label} is outside the C={} taxonomy", p.as_slice().len())))?;
    Ok(-v.max(LOSS_CLIP).ln())
}
