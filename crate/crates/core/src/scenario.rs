//! Scenario configuration: parsing, validation, fingerprinting and the
//! unified two-band subcarrier grid.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Whether the water level is scaled by the per-subcarrier bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaterfillWeighting {
    Weighted,
    Unweighted,
}

/// All physical and algorithmic constants of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(rename = "f_L")]
    pub f_low: f64,
    #[serde(rename = "f_H")]
    pub f_high: f64,
    #[serde(rename = "M_L")]
    pub m_low: usize,
    #[serde(rename = "M_H")]
    pub m_high: usize,
    #[serde(rename = "B_L")]
    pub b_low: f64,
    #[serde(rename = "B_H")]
    pub b_high: f64,
    #[serde(rename = "sigma2_L")]
    pub sigma2_low: f64,
    #[serde(rename = "sigma2_H")]
    pub sigma2_high: f64,
    #[serde(rename = "P_T")]
    pub p_total: f64,
    #[serde(rename = "K")]
    pub users: usize,
    #[serde(rename = "N_t")]
    pub bs_antennas: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub element_spacing: f64,
    pub layer_spacing: f64,
    pub bs_sim_distance: f64,
    pub d_user: f64,
    pub gamma: f64,
    #[serde(rename = "R_a")]
    pub r_a: f64,
    #[serde(rename = "X_a")]
    pub x_a: f64,
    #[serde(rename = "X_c")]
    pub x_c: f64,
    #[serde(rename = "X_g")]
    pub x_g: f64,
    #[serde(rename = "kappa_T")]
    pub kappa_t: f64,
    pub waterfilling_weighting: WaterfillWeighting,
    pub master_seed: u64,
}

const FLOAT_KEYS: &[&str] = &[
    "f_L",
    "f_H",
    "B_L",
    "B_H",
    "sigma2_L",
    "sigma2_H",
    "P_T",
    "element_spacing",
    "layer_spacing",
    "bs_sim_distance",
    "d_user",
    "gamma",
    "R_a",
    "X_a",
    "X_c",
    "X_g",
    "kappa_T",
];
const COUNT_KEYS: &[&str] = &["M_L", "M_H", "K", "N_t", "L", "grid_rows", "grid_cols"];

impl ScenarioConfig {
    /// Reference two-band scenario: 3.5/17.5 GHz, 4+4 subcarriers,
    /// 10 W, two users, two BS antennas, two 7×7 layers.
    pub fn reference() -> Self {
        let lambda_low = SPEED_OF_LIGHT / 3.5e9;
        let sigma2_low = 1.0e-9;
        Self {
            f_low: 3.5e9,
            f_high: 17.5e9,
            m_low: 4,
            m_high: 4,
            b_low: 1.2e5,
            b_high: 4.8e5,
            sigma2_low,
            sigma2_high: sigma2_low * 4.8e5 / 1.2e5,
            p_total: 10.0,
            users: 2,
            bs_antennas: 2,
            layers: 2,
            grid_rows: 7,
            grid_cols: 7,
            element_spacing: lambda_low / 2.0,
            layer_spacing: lambda_low / 2.0,
            bs_sim_distance: 5.0 * lambda_low,
            d_user: 20.0,
            gamma: 2.0,
            r_a: 50.0,
            x_a: 0.0,
            x_c: 10.0,
            x_g: 40.0,
            kappa_t: 1.0,
            waterfilling_weighting: WaterfillWeighting::Weighted,
            master_seed: 2024,
        }
    }

    /// The reference scenario with a 3×3 grid per layer.
    pub fn desk() -> Self {
        Self {
            grid_rows: 3,
            grid_cols: 3,
            ..Self::reference()
        }
    }

    /// Meta-atoms per layer.
    #[inline]
    pub fn elements(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Total SIM ports, `2·L·M`.
    #[inline]
    pub fn ports(&self) -> usize {
        2 * self.layers * self.elements()
    }

    #[inline]
    pub fn subcarriers(&self) -> usize {
        self.m_low + self.m_high
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::InvalidValue(k.into(), why));
        for (k, v) in self.float_fields() {
            if !v.is_finite() {
                return bad(k, format!("{v} is not finite"));
            }
        }
        if self.m_low + self.m_high < 1 {
            return bad("M_L", "M_L + M_H must be at least 1".into());
        }
        for (k, v) in [
            ("K", self.users),
            ("N_t", self.bs_antennas),
            ("L", self.layers),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
        ] {
            if v < 1 {
                return bad(k, "must be at least 1".into());
            }
        }
        for (k, v) in [
            ("P_T", self.p_total),
            ("B_L", self.b_low),
            ("B_H", self.b_high),
            ("sigma2_L", self.sigma2_low),
            ("sigma2_H", self.sigma2_high),
            ("R_a", self.r_a),
            ("f_L", self.f_low),
        ] {
            if v <= 0.0 {
                return bad(k, format!("{v} must be positive"));
            }
        }
        if self.f_low >= self.f_high {
            return bad("f_H", format!("f_L={} must be below f_H={}", self.f_low, self.f_high));
        }
        Ok(())
    }

    fn float_fields(&self) -> [(&'static str, f64); 17] {
        [
            ("f_L", self.f_low),
            ("f_H", self.f_high),
            ("B_L", self.b_low),
            ("B_H", self.b_high),
            ("sigma2_L", self.sigma2_low),
            ("sigma2_H", self.sigma2_high),
            ("P_T", self.p_total),
            ("element_spacing", self.element_spacing),
            ("layer_spacing", self.layer_spacing),
            ("bs_sim_distance", self.bs_sim_distance),
            ("d_user", self.d_user),
            ("gamma", self.gamma),
            ("R_a", self.r_a),
            ("X_a", self.x_a),
            ("X_c", self.x_c),
            ("X_g", self.x_g),
            ("kappa_T", self.kappa_t),
        ]
    }

    /// Canonical serialization: sorted keys, shortest round-trip numbers.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let sorted: BTreeMap<String, Value> = match value {
            Value::Object(map) => map.into_iter().collect(),
            _ => unreachable!("config serializes to an object"),
        };
        serde_json::to_string(&sorted).expect("value serializes")
    }

    /// SHA-256 of the canonical serialization, lowercase hex.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Parses and validates a JSON config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::InvalidValue("document".into(), e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidValue("document".into(), "not a JSON object".into()))?;
        let known: Vec<&str> = FLOAT_KEYS
            .iter()
            .chain(COUNT_KEYS)
            .copied()
            .chain(["waterfilling_weighting", "master_seed"])
            .collect();
        if let Some(k) = obj.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::InvalidValue(k.clone(), "unknown key".into()));
        }
        let cfg = Self {
            f_low: float(obj, "f_L")?,
            f_high: float(obj, "f_H")?,
            m_low: count(obj, "M_L")?,
            m_high: count(obj, "M_H")?,
            b_low: float(obj, "B_L")?,
            b_high: float(obj, "B_H")?,
            sigma2_low: float(obj, "sigma2_L")?,
            sigma2_high: float(obj, "sigma2_H")?,
            p_total: float(obj, "P_T")?,
            users: count(obj, "K")?,
            bs_antennas: count(obj, "N_t")?,
            layers: count(obj, "L")?,
            grid_rows: count(obj, "grid_rows")?,
            grid_cols: count(obj, "grid_cols")?,
            element_spacing: float(obj, "element_spacing")?,
            layer_spacing: float(obj, "layer_spacing")?,
            bs_sim_distance: float(obj, "bs_sim_distance")?,
            d_user: float(obj, "d_user")?,
            gamma: float(obj, "gamma")?,
            r_a: float(obj, "R_a")?,
            x_a: float(obj, "X_a")?,
            x_c: float(obj, "X_c")?,
            x_g: float(obj, "X_g")?,
            kappa_t: float(obj, "kappa_T")?,
            waterfilling_weighting: {
                let v = field(obj, "waterfilling_weighting")?;
                serde_json::from_value(v.clone()).map_err(|_| {
                    Error::InvalidValue(
                        "waterfilling_weighting".into(),
                        format!("{v} is not one of \"weighted\", \"unweighted\""),
                    )
                })?
            },
            master_seed: {
                let v = field(obj, "master_seed")?;
                v.as_u64().ok_or_else(|| {
                    Error::InvalidValue("master_seed".into(), format!("{v} is not a u64"))
                })?
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes")
    }

    /// Unified subcarrier grid, low band first.
    pub fn subcarrier_grid(&self) -> Vec<SubcarrierSpec> {
        let mut out = Vec::with_capacity(self.subcarriers());
        let bands = [
            (Band::Low, self.f_low, self.m_low, self.b_low, self.sigma2_low),
            (Band::High, self.f_high, self.m_high, self.b_high, self.sigma2_high),
        ];
        for (band, center, count, bw, noise) in bands {
            let mid = (count as f64 - 1.0) / 2.0;
            for j in 0..count {
                out.push(SubcarrierSpec {
                    index: out.len(),
                    frequency: center + (j as f64 - mid) * bw,
                    bandwidth: bw,
                    noise_var: noise,
                    band,
                });
            }
        }
        out
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::MissingKey(key.into()))
}

fn float(obj: &Map<String, Value>, key: &str) -> Result<f64> {
    let v = field(obj, key)?;
    v.as_f64()
        .ok_or_else(|| Error::InvalidValue(key.into(), format!("{v} is not a number")))
}

fn count(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    let v = field(obj, key)?;
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::InvalidValue(key.into(), format!("{v} is not a non-negative integer")))
}

/// Frequency band tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    Low,
    High,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Low => "LOW",
            Band::High => "HIGH",
        })
    }
}

/// One subcarrier of the unified grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubcarrierSpec {
    pub index: usize,
    /// Center frequency (Hz).
    pub frequency: f64,
    /// Bandwidth (Hz).
    pub bandwidth: f64,
    /// Noise variance (W).
    pub noise_var: f64,
    pub band: Band,
}
