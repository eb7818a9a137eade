//! Calibration constants loaded from TOML.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The checked-in constants, compiled into the binary.
pub const DEFAULT_CALIBRATION: &str = include_str!("../calibration.toml");

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("reading calibration: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate calibration constant {0:?}")]
    Duplicate(String),
    #[error("missing calibration constant {0:?}")]
    Missing(String),
    #[error("calibration constant {name:?} must be finite and non-negative, got {value}")]
    Negative { name: String, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Reported,
    Derived,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Reported => "reported",
            Provenance::Derived => "derived",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub provenance: Provenance,
    pub source: String,
}

#[derive(Deserialize)]
struct File {
    constant: Vec<Constant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    constants: BTreeMap<String, Constant>,
}

impl Calibration {
    pub fn builtin() -> Self {
        DEFAULT_CALIBRATION.parse().expect("checked-in calibration parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn get(&self, name: &str) -> Result<f64, CalibrationError> {
        self.constants
            .get(name)
            .map(|c| c.value)
            .ok_or_else(|| CalibrationError::Missing(name.to_string()))
    }

    pub fn constant(&self, name: &str) -> Option<&Constant> {
        self.constants.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Constant> {
        self.constants.values()
    }

    /// Constants whose name starts with `prefix.`.
    pub fn scoped<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Constant> + 'a {
        self.constants
            .range(format!("{prefix}.")..)
            .take_while(move |(k, _)| k.starts_with(&format!("{prefix}.")))
            .map(|(_, c)| c)
    }
}

impl FromStr for Calibration {
    type Err = CalibrationError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let file: File = toml::from_str(text)?;
        let mut constants = BTreeMap::new();
        for c in file.constant {
            if !(c.value.is_finite() && c.value >= 0.0) {
                return Err(CalibrationError::Negative {
                    name: c.name,
                    value: c.value,
                });
            }
            if constants.contains_key(&c.name) {
                return Err(CalibrationError::Duplicate(c.name));
            }
            constants.insert(c.name.clone(), c);
        }
        Ok(Self { constants })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_loads_with_provenance() {
        let cal = Calibration::builtin();
        assert_eq!(cal.get("exp1.AND_OF_OR.6.abe_enc_ms").unwrap(), 185.90);
        assert_eq!(cal.get("exp7.ck_update_ms").unwrap(), 58.8);
        assert_eq!(
            cal.constant("exp2.ck_update_ms").unwrap().provenance,
            Provenance::Derived
        );
        assert!(cal.iter().all(|c| !c.source.is_empty() && !c.unit.is_empty()));
        assert_eq!(cal.scoped("exp5").count(), 3);
        assert!(matches!(cal.get("nope"), Err(CalibrationError::Missing(_))));
    }

    #[test]
    fn derived_splits_reproduce_reported_totals() {
        // ck update: 6000 naive updates at 215.3 ms land within 1% of 1292 s,
        // and the 600 epoch updates within 1% of 129 s
        let cal = Calibration::builtin();
        let ck = cal.get("exp2.ck_update_ms").unwrap();
        assert!((6000.0 * ck / 1000.0 - 1292.0).abs() / 1292.0 < 0.01);
        assert!((600.0 * ck / 1000.0 - 129.0).abs() / 129.0 < 0.01);
        // gateway transform: relief at 4x is 46.0 / (g + 4 (finish + aes_1KiB))
        let g = cal.get("exp4.gateway_transform_ms").unwrap();
        let finish = cal.get("exp4.client_finish_ms").unwrap();
        let aes = cal.get("exp1.aes_open_ms_per_mib").unwrap() / 1024.0;
        let relief = 46.0 / (g + 4.0 * (finish + aes));
        assert!((relief - 4.17).abs() < 0.01, "{relief}");
    }

    #[test]
    fn rejects_duplicates_and_negatives() {
        let dup = r#"
            [[constant]]
            name = "a"
            value = 1.0
            unit = "ms"
            provenance = "reported"
            source = "x"
            [[constant]]
            name = "a"
            value = 2.0
            unit = "ms"
            provenance = "derived"
            source = "y"
        "#;
        assert!(matches!(dup.parse::<Calibration>(), Err(CalibrationError::Duplicate(_))));
        let neg = r#"
            [[constant]]
            name = "a"
            value = -1.0
            unit = "ms"
            provenance = "reported"
            source = "x"
        "#;
        assert!(matches!(neg.parse::<Calibration>(), Err(CalibrationError::Negative { .. })));
    }
}
