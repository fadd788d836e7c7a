use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RawVisit, FEATURE_NAMES, NUM_FEATURES};
use crate::error::{Error, Result};

/// Accepted ranges per feature, in canonical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlausibilityBounds {
    /// Celsius range.
    pub temperature_c: (f64, f64),
    /// Fahrenheit range, used for readings above `fahrenheit_above`.
    pub temperature_f: (f64, f64),
    pub fahrenheit_above: f64,
    pub heartrate: (f64, f64),
    pub resprate: (f64, f64),
    pub o2sat: (f64, f64),
    pub sbp: (f64, f64),
    pub dbp: (f64, f64),
    /// Values in this range are kept, then clamped to `pain_clamp`.
    pub pain: (f64, f64),
    pub pain_clamp: (f64, f64),
    pub acuity: (f64, f64),
}

impl Default for PlausibilityBounds {
    fn default() -> Self {
        Self {
            temperature_c: (25.0, 45.0),
            temperature_f: (77.0, 113.0),
            fahrenheit_above: 60.0,
            heartrate: (20.0, 300.0),
            resprate: (4.0, 80.0),
            o2sat: (50.0, 100.0),
            sbp: (40.0, 300.0),
            dbp: (20.0, 200.0),
            pain: (0.0, 10.0),
            pain_clamp: (1.0, 10.0),
            acuity: (1.0, 5.0),
        }
    }
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

impl PlausibilityBounds {
    /// Canonical value of a raw reading of feature `j`, or `None` when implausible.
    pub fn clean(&self, j: usize, v: f64) -> Option<f64> {
        if !v.is_finite() {
            return None;
        }
        match FEATURE_NAMES[j] {
            "temperature" => {
                if v > self.fahrenheit_above {
                    within(v, self.temperature_f).then(|| (v - 32.0) * 5.0 / 9.0)
                } else {
                    within(v, self.temperature_c).then_some(v)
                }
            }
            "heartrate" => within(v, self.heartrate).then_some(v),
            "resprate" => within(v, self.resprate).then_some(v),
            "o2sat" => within(v, self.o2sat).then_some(v),
            "sbp" => within(v, self.sbp).then_some(v),
            "dbp" => within(v, self.dbp).then_some(v),
            "pain" => within(v, self.pain).then(|| v.clamp(self.pain_clamp.0, self.pain_clamp.1)),
            "acuity" => within(v, self.acuity).then_some(v),
            _ => None,
        }
    }
}

/// Per-feature mean and population standard deviation of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub bounds: PlausibilityBounds,
}

impl VitalStats {
    pub fn fit(visits: &[RawVisit], bounds: PlausibilityBounds) -> Result<Self> {
        let mut mean = vec![0.0; NUM_FEATURES];
        let mut std = vec![0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            let values: Vec<f64> = visits.iter().filter_map(|v| v.vitals[j]).collect();
            if values.is_empty() {
                return Err(Error::Data(format!("no observed values for `{}`", FEATURE_NAMES[j])));
            }
            let n = values.len() as f64;
            let m = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            if var.sqrt() <= 0.0 {
                return Err(Error::Data(format!(
                    "`{}` is constant on the training split",
                    FEATURE_NAMES[j]
                )));
            }
            mean[j] = m;
            std[j] = var.sqrt();
        }
        Ok(Self { mean, std, bounds })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stats: Self = serde_json::from_str(text)?;
        if stats.mean.len() != NUM_FEATURES || stats.std.len() != NUM_FEATURES {
            return Err(Error::Data("vital stats must cover eight features".into()));
        }
        if stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data("vital stats contain a non-positive std".into()));
        }
        Ok(stats)
    }

    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }
}

/// z-scores observed vitals; missing ones become 0 with their flag set.
pub fn normalize_vitals(vitals: &[Option<f64>], stats: &VitalStats) -> (Vec<f64>, Vec<bool>) {
    vitals
        .iter()
        .enumerate()
        .map(|(j, v)| match v {
            Some(x) => ((x - stats.mean[j]) / stats.std[j], false),
            None => (0.0, true),
        })
        .unzip()
}
