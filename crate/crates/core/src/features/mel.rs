//! Log-power mel spectrograms: centered STFT with reflect padding, periodic
//! Hann window, Slaney mel scale with area-normalized triangular filters.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams {
            n_fft: 2048,
            hop: 1024,
            n_mels: 96,
            log_floor: 1e-10,
        }
    }
}

/// `bands × frames`, row-major by band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub bands: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

pub const MIN_MEL_DIM: usize = 8;

impl MelSpectrogram {
    pub fn new(bands: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if bands < MIN_MEL_DIM || frames < MIN_MEL_DIM {
            return Err(invalid(format!(
                "mel spectrogram must be at least {MIN_MEL_DIM}x{MIN_MEL_DIM}, got {bands}x{frames}"
            )));
        }
        if data.len() != bands * frames {
            return Err(Error::ShapeMismatch {
                context: "mel spectrogram",
                expected: format!("{}", bands * frames),
                got: data.len().to_string(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mel spectrogram has non-finite entries"));
        }
        Ok(MelSpectrogram { bands, frames, data })
    }

    pub fn at(&self, band: usize, frame: usize) -> f32 {
        self.data[band * self.frames + frame]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.bands,
            cols: self.frames,
            data: self.data.clone(),
        }
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        MelSpectrogram::new(m.rows, m.cols, m.data)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// `n_mels × (n_fft/2 + 1)` filter weights spanning 0..sample_rate/2.
pub fn mel_filterbank(sample_rate: f64, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..n_bins).map(|k| k as f64 * sample_rate / n_fft as f64).collect();
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

pub fn mel_spectrogram(pcm: &[f32], sample_rate: f64, params: &MelParams) -> Result<MelSpectrogram> {
    if !(sample_rate > 0.0) {
        return Err(invalid("sample rate must be positive"));
    }
    if pcm.len() < params.n_fft {
        return Err(invalid(format!(
            "signal of {} samples is shorter than one {}-sample window",
            pcm.len(),
            params.n_fft
        )));
    }
    if pcm.iter().any(|x| !x.is_finite()) {
        return Err(invalid("signal has non-finite samples"));
    }
    let n_fft = params.n_fft;
    let pad = (n_fft / 2) as isize;
    let frames = 1 + pcm.len() / params.hop;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n_fft as f64).cos())
        .collect();
    let filters = mel_filterbank(sample_rate, n_fft, params.n_mels);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);

    let n_bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    let mut data = vec![0.0f32; params.n_mels * frames];
    for t in 0..frames {
        let start = (t * params.hop) as isize - pad;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = pcm[reflect_index(start + i as isize, pcm.len())] as f64;
            *slot = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
            *p = c.norm_sqr();
        }
        for (m, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data[m * frames + t] = (params.log_floor + e).ln() as f32;
        }
    }
    MelSpectrogram::new(params.n_mels, frames, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / sr).sin() as f32)
            .collect()
    }

    #[test]
    fn thirty_seconds_gives_646_frames() {
        // 1 + floor(661_500 / 1024) = 646 = ceil(661_500 / 1024)
        assert_eq!((30.0f64 * 22_050.0 / 1024.0).ceil() as usize, 646);
        let pcm = vec![0.0f32; 30 * 22_050];
        let mel = mel_spectrogram(&pcm, 22_050.0, &MelParams::default()).unwrap();
        assert_eq!((mel.bands, mel.frames), (96, 646));
        let floor = (1e-10f64).ln() as f32;
        assert!(mel.data.iter().all(|v| *v == floor));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(mel_spectrogram(&[0.0; 100], 22_050.0, &MelParams::default()).is_err());
        assert!(mel_spectrogram(&[0.0; 4096], 0.0, &MelParams::default()).is_err());
    }

    #[test]
    fn sine_peaks_in_the_band_covering_its_frequency() {
        let sr = 22_050.0;
        let mel = mel_spectrogram(&sine(1000.0, sr, 5 * 22_050), sr, &MelParams::default()).unwrap();
        // Oracle: filter edges recomputed from the mel scale directly.
        let mel_max = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..98).map(|i| mel_to_hz(mel_max * i as f64 / 97.0)).collect();
        let expected = (0..96)
            .max_by(|&a, &b| {
                let w = |m: usize| {
                    let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                    ((1000.0 - lo) / (mid - lo)).min((hi - 1000.0) / (hi - mid)).max(0.0) * 2.0 / (hi - lo)
                };
                w(a).total_cmp(&w(b))
            })
            .unwrap();
        let frame = mel.frames / 2;
        let got = (0..mel.bands).max_by(|&a, &b| mel.at(a, frame).total_cmp(&mel.at(b, frame))).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let sr = 16_000.0;
        let params = MelParams { n_fft: 512, hop: 256, n_mels: 32, log_floor: 1e-10 };
        let n = 8_000;
        let x: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                ((std::f64::consts::TAU * 440.0 * t).sin() + 0.3 * (std::f64::consts::TAU * 3100.0 * t * t).sin()) as f32
            })
            .collect();
        let mut shifted = vec![0.0f32; params.hop];
        shifted.extend_from_slice(&x);
        let a = mel_spectrogram(&x, sr, &params).unwrap();
        let b = mel_spectrogram(&shifted, sr, &params).unwrap();
        for k in 3..a.frames - 3 {
            for m in 0..a.bands {
                let pa = (a.at(m, k - 1) as f64).exp();
                let pb = (b.at(m, k) as f64).exp();
                assert!((pa - pb).abs() <= 1e-6 * pa.max(pb) + 1e-9, "band {m} frame {k}: {pa} vs {pb}");
            }
        }
    }

    #[test]
    fn slaney_scale_is_linear_below_1khz() {
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
        assert!((mel_to_hz(hz_to_mel(440.0)) - 440.0).abs() < 1e-9);
        assert!((mel_to_hz(hz_to_mel(8000.0)) - 8000.0).abs() < 1e-9);
    }
}
