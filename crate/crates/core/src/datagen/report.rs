use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::Timelike;
use serde::Serialize;

use crate::domain::{DeviceType, NetworkType, Situation, Stream};

/// Rows are situations, columns are categories; each row holds shares
/// summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShareTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<Situation, Vec<f64>>,
}

impl ShareTable {
    fn build(columns: Vec<String>, streams: &[Stream], cell: impl Fn(&Stream) -> usize) -> Self {
        let mut counts: BTreeMap<Situation, Vec<f64>> = BTreeMap::new();
        for s in streams {
            let Some(sit) = s.situation else { continue };
            counts.entry(sit).or_insert_with(|| vec![0.0; columns.len()])[cell(s)] += 1.0;
        }
        for row in counts.values_mut() {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
        ShareTable { columns, rows: counts }
    }

    pub fn row(&self, s: Situation) -> Option<&[f64]> {
        self.rows.get(&s).map(Vec::as_slice)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("situation,{}\n", self.columns.join(","));
        for (s, row) in &self.rows {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(out, "{s},{}", cells.join(","));
        }
        out
    }
}

/// Network and device shares per situation, and per-situation hour-of-day
/// histograms. Unlabeled streams are ignored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub network: ShareTable,
    pub device: ShareTable,
    pub hours: ShareTable,
}

pub fn distribution_report(streams: &[Stream]) -> DistributionReport {
    DistributionReport {
        network: ShareTable::build(
            NetworkType::ALL.iter().map(|n| n.to_string()).collect(),
            streams,
            |s| s.device.network_type.code(),
        ),
        device: ShareTable::build(
            DeviceType::ALL.iter().map(|d| d.to_string()).collect(),
            streams,
            |s| s.device.device_type.code(),
        ),
        hours: ShareTable::build((0..24).map(|h| format!("h{h:02}")).collect(), streams, |s| {
            s.device.local_timestamp.hour() as usize
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_generate, SynthConfig};
    use crate::domain::{DeviceSnapshot, TaxonomySubset, TrackId, UserId};
    use chrono::NaiveDate;

    #[test]
    fn empty_corpus_gives_empty_tables() {
        let r = distribution_report(&[]);
        assert!(r.network.rows.is_empty() && r.hours.rows.is_empty());
        assert_eq!(r.device.to_csv(), "situation,mobile,desktop,tablet\n");
    }

    #[test]
    fn single_situation_rows_sum_to_one() {
        let ts = NaiveDate::from_ymd_opt(2024, 1, 3).unwrap().and_hms_opt(7, 0, 0).unwrap();
        let streams: Vec<Stream> = NetworkType::ALL
            .iter()
            .enumerate()
            .map(|(i, n)| Stream {
                track: TrackId::new(format!("t{i}")).unwrap(),
                user: UserId::new("u").unwrap(),
                device: DeviceSnapshot::new(ts, DeviceType::Mobile, *n),
                situation: Some(Situation::Run),
                location: None,
            })
            .collect();
        let r = distribution_report(&streams);
        let row = r.network.row(Situation::Run).unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(row, &[0.25; 4]);
        assert_eq!(r.hours.row(Situation::Run).unwrap()[7], 1.0);
    }

    #[test]
    fn synthetic_sleep_peaks_late() {
        let cfg = SynthConfig {
            n_users: 50,
            n_tracks: 100,
            n_streams: 8000,
            taxonomy: TaxonomySubset::C4,
            signal_strength: 1.0,
            mel_bands: 8,
            mel_frames: 8,
            seed: 11,
            ..Default::default()
        };
        let corpus = synth_generate(&cfg).unwrap();
        let r = distribution_report(&corpus.streams);
        for table in [&r.network, &r.device, &r.hours] {
            for row in table.rows.values() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let sleep = r.hours.row(Situation::Sleep).unwrap();
        let mode = (0..24).max_by(|a, b| sleep[*a].total_cmp(&sleep[*b])).unwrap();
        assert!([22, 23, 0].contains(&mode), "sleep mode at {mode}h");
    }
}
