use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Demographics, Gender, UNKNOWN_COUNTRY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemographicFeatures {
    pub age_norm: f64,
    pub country_code: f64,
    pub gender_code: f64,
}

impl DemographicFeatures {
    pub fn to_array(&self) -> [f64; 3] {
        [self.age_norm, self.country_code, self.gender_code]
    }
}

/// Country → code mapping built at ingestion. Code 0 is reserved for
/// unknown; known countries get 1.. in sorted order so the mapping depends
/// only on the set of countries, not on the order they were seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CountryDictionary {
    codes: BTreeMap<String, u32>,
}

impl CountryDictionary {
    pub fn from_countries<I, S>(countries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut names: Vec<String> = countries
            .into_iter()
            .map(|c| c.as_ref().to_string())
            .filter(|c| !c.is_empty() && c != UNKNOWN_COUNTRY)
            .collect();
        names.sort();
        names.dedup();
        let codes = names
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i as u32 + 1))
            .collect();
        CountryDictionary { codes }
    }

    pub fn code(&self, country: &str) -> u32 {
        self.codes.get(country).copied().unwrap_or(0)
    }

    /// Number of codes including the unknown code 0.
    pub fn cardinality(&self) -> usize {
        self.codes.len() + 1
    }
}

const AGE_LO: f64 = 10.0;
const AGE_HI: f64 = 90.0;

pub fn encode_demographics(g: &Demographics, countries: &CountryDictionary) -> DemographicFeatures {
    let age_norm = if g.age == 0 {
        0.5
    } else {
        (f64::from(g.age).clamp(AGE_LO, AGE_HI) - AGE_LO) / (AGE_HI - AGE_LO)
    };
    let gender_code = match g.gender {
        Gender::Unknown => 0.0,
        Gender::F => 1.0,
        Gender::M => 2.0,
    };
    DemographicFeatures {
        age_norm,
        country_code: countries.code(&g.country) as f64,
        gender_code,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(age: u8) -> f64 {
        let d = CountryDictionary::default();
        encode_demographics(&Demographics::new(age, "FR", Gender::F).unwrap(), &d).age_norm
    }

    #[test]
    fn age_clamps_and_midpoint() {
        assert_eq!(enc(10), 0.0);
        assert_eq!(enc(90), 1.0);
        assert_eq!(enc(50), 0.5);
        assert_eq!(enc(3), 0.0);
        assert_eq!(enc(110), 1.0);
        assert_eq!(enc(0), 0.5);
    }

    #[test]
    fn country_codes_are_order_independent() {
        let a = CountryDictionary::from_countries(["FR", "BR", "??", "DE"]);
        let b = CountryDictionary::from_countries(["DE", "FR", "BR", "BR"]);
        assert_eq!(a, b);
        assert_eq!(a.code("BR"), 1);
        assert_eq!(a.code("FR"), 3);
        assert_eq!(a.code("??"), 0);
        assert_eq!(a.code("JP"), 0);
        assert_eq!(a.cardinality(), 4);
    }

    #[test]
    fn gender_codes() {
        let d = CountryDictionary::default();
        let code = |g| encode_demographics(&Demographics::new(30, "??", g).unwrap(), &d).gender_code;
        assert_eq!(code(Gender::Unknown), 0.0);
        assert_eq!(code(Gender::F), 1.0);
        assert_eq!(code(Gender::M), 2.0);
    }
}
