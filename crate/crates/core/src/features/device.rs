use std::f64::consts::TAU;

use crate::domain::DeviceSnapshot;

/// The eight device/time features. Categorical fields are integer codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceFeatures {
    pub linear_time: f64,
    pub linear_day: f64,
    pub circ_time_x: f64,
    pub circ_time_y: f64,
    pub circ_day_x: f64,
    pub circ_day_y: f64,
    pub device_code: f64,
    pub network_code: f64,
}

impl DeviceFeatures {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.linear_time,
            self.linear_day,
            self.circ_time_x,
            self.circ_time_y,
            self.circ_day_x,
            self.circ_day_y,
            self.device_code,
            self.network_code,
        ]
    }
}

pub fn encode_device(snap: &DeviceSnapshot) -> DeviceFeatures {
    let linear_time = snap.seconds_since_midnight() as f64 / 86_400.0;
    let linear_day = snap.day_of_week as f64 / 7.0;
    let (ty, tx) = (TAU * linear_time).sin_cos();
    let (dy, dx) = (TAU * linear_day).sin_cos();
    DeviceFeatures {
        linear_time,
        linear_day,
        circ_time_x: tx,
        circ_time_y: ty,
        circ_day_x: dx,
        circ_day_y: dy,
        device_code: snap.device_type.code() as f64,
        network_code: snap.network_type.code() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DeviceType, NetworkType};
    use chrono::{Duration, NaiveDate};
    use proptest::prelude::*;

    fn at(h: u32, m: u32, s: u32) -> DeviceSnapshot {
        let ts = NaiveDate::from_ymd_opt(2024, 3, 6).unwrap().and_hms_opt(h, m, s).unwrap();
        DeviceSnapshot::new(ts, DeviceType::Desktop, NetworkType::Lan)
    }

    #[test]
    fn quarter_turns() {
        let f = encode_device(&at(0, 0, 0));
        assert_eq!((f.circ_time_x, f.circ_time_y), (1.0, 0.0));
        let f = encode_device(&at(6, 0, 0));
        assert!(f.circ_time_x.abs() < 1e-12 && (f.circ_time_y - 1.0).abs() < 1e-12);
        let f = encode_device(&at(12, 0, 0));
        assert!((f.circ_time_x + 1.0).abs() < 1e-12 && f.circ_time_y.abs() < 1e-12);
        assert_eq!(f.linear_time, 0.5);
        assert_eq!(f.device_code, 1.0);
        assert_eq!(f.network_code, 2.0);
        // 2024-03-06 is a Wednesday.
        assert!((f.linear_day - 2.0 / 7.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn circular_norms_and_periodicity(secs in 0i64..(86_400 * 365 * 3)) {
            let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
            let ts = base + Duration::seconds(secs);
            let snap = DeviceSnapshot::new(ts, DeviceType::Mobile, NetworkType::Mobile);
            let f = encode_device(&snap);
            prop_assert!((f.circ_time_x.powi(2) + f.circ_time_y.powi(2) - 1.0).abs() < 1e-9);
            prop_assert!((f.circ_day_x.powi(2) + f.circ_day_y.powi(2) - 1.0).abs() < 1e-9);
            prop_assert!((0.0..1.0).contains(&f.linear_time));
            prop_assert!((0.0..1.0).contains(&f.linear_day));
            let next_week = DeviceSnapshot::new(ts + Duration::days(7), DeviceType::Mobile, NetworkType::Mobile);
            prop_assert_eq!(encode_device(&next_week), f);
            let next_day = encode_device(&DeviceSnapshot::new(ts + Duration::days(1), DeviceType::Mobile, NetworkType::Mobile));
            prop_assert_eq!((next_day.circ_time_x, next_day.circ_time_y), (f.circ_time_x, f.circ_time_y));
        }
    }
}
