//! Input encodings for both branches.

mod als;
mod demographics;
mod device;
mod matrix;
mod mel;

pub use als::{train_user_embeddings, AlsConfig, AlsFactors, InteractionMatrix};
pub use demographics::{encode_demographics, CountryDictionary, DemographicFeatures};
pub use device::{encode_device, DeviceFeatures};
pub use matrix::{read_archive, write_archive, ArchiveEntry, Matrix};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelParams, MelSpectrogram};

use crate::domain::{Demographics, DeviceSnapshot};

pub const SP_FEATURE_DIM: usize = 11;

pub const SP_FEATURE_NAMES: [&str; SP_FEATURE_DIM] = [
    "linear_time",
    "linear_day",
    "circ_time_x",
    "circ_time_y",
    "circ_day_x",
    "circ_day_y",
    "device_code",
    "network_code",
    "age_norm",
    "country_code",
    "gender_code",
];

/// Situation-predictor input: device features followed by demographics.
pub fn assemble_sp_features(
    snap: &DeviceSnapshot,
    demographics: &Demographics,
    countries: &CountryDictionary,
) -> [f64; SP_FEATURE_DIM] {
    let d = encode_device(snap).to_array();
    let g = encode_demographics(demographics, countries).to_array();
    let mut out = [0.0; SP_FEATURE_DIM];
    out[..8].copy_from_slice(&d);
    out[8..].copy_from_slice(&g);
    out
}

/// A user's preference vector, as produced by [`train_user_embeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding(pub Vec<f32>);

impl UserEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DeviceType, NetworkType};
    use chrono::NaiveDate;

    #[test]
    fn midnight_monday_unknown_user() {
        let ts = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let snap = DeviceSnapshot::new(ts, DeviceType::Mobile, NetworkType::Wifi);
        let dict = CountryDictionary::from_countries(["FR", "BR"]);
        let v = assemble_sp_features(&snap, &Demographics::unknown(), &dict);
        let expected = [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0];
        assert_eq!(v.len(), 11);
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
        assert_eq!(v, assemble_sp_features(&snap, &Demographics::unknown(), &dict));
    }
}
