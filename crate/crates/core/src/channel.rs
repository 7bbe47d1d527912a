//! Seed-reproducible coupling matrices, effective channels and seed-only
//! datasets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, RMat};
use crate::rng::{expand_seeds, PinnedStream};
use crate::scalar::{cplx, Real, C};
use crate::scenario::{ScenarioConfig, SubcarrierSpec, SPEED_OF_LIGHT};
use crate::sim_device::{
    build_interconnect, build_loads, element_positions, solve_transfer, transimpedance,
    InterconnectMatrix, SimTransfer, DEFAULT_COND_CAP,
};

/// Coupling matrices of one subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcarrierChannel<T: Real> {
    pub spec: SubcarrierSpec,
    /// SIM last face → users, `K × M`.
    pub z_rs: CMat<T>,
    /// BS antennas → SIM first face, `M × N_t`.
    pub z_st: CMat<T>,
}

/// One channel draw across the whole subcarrier grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization<T: Real> {
    pub seed: u64,
    pub subcarriers: Vec<SubcarrierChannel<T>>,
}

/// Large-scale amplitude of the user-side transimpedance,
/// `c/(2π f d^{γ/2}) · R_a` (both resistive square roots taken as `√R_a`).
pub fn user_link_scale(cfg: &ScenarioConfig, f: f64) -> f64 {
    SPEED_OF_LIGHT / (2.0 * std::f64::consts::PI * f * cfg.d_user.powf(cfg.gamma / 2.0)) * cfg.r_a
}

/// Deterministic BS-to-SIM coupling: ULA along x at `z = 0`, first SIM face
/// at `z = bs_sim_distance`.
pub fn bs_coupling<T: Real>(cfg: &ScenarioConfig, f: f64) -> Result<CMat<T>> {
    if !(cfg.bs_sim_distance > 0.0) {
        return Err(Error::Geometry(format!(
            "bs_sim_distance must be positive, got {}",
            cfg.bs_sim_distance
        )));
    }
    let atoms = element_positions(cfg);
    let nt = cfg.bs_antennas;
    let mid = (nt as f64 - 1.0) / 2.0;
    let d2 = cfg.bs_sim_distance * cfg.bs_sim_distance;
    Ok(CMat::from_fn(atoms.len(), nt, |m, n| {
        let ax = (n as f64 - mid) * cfg.element_spacing;
        let (dx, dy) = (atoms[m].0 - ax, atoms[m].1);
        let d = (dx * dx + dy * dy + d2).sqrt();
        let z = transimpedance(cfg.kappa_t, f, d);
        cplx(T::lit(z.re), T::lit(z.im))
    }))
}

/// Draws the Rayleigh user-side matrices from the pinned stream of `seed`.
///
/// Fill order is subcarrier-major, then row-major within each `F_i`.
pub fn draw_realization<T: Real>(
    cfg: &ScenarioConfig,
    specs: &[SubcarrierSpec],
    seed: u64,
) -> Result<ChannelRealization<T>> {
    if !(cfg.d_user > 0.0) {
        return Err(Error::Geometry(format!("d_user must be positive, got {}", cfg.d_user)));
    }
    let mut stream = PinnedStream::new(seed);
    let (k, m) = (cfg.users, cfg.elements());
    let mut subcarriers = Vec::with_capacity(specs.len());
    for spec in specs {
        let scale = user_link_scale(cfg, spec.frequency);
        let mut f = Vec::with_capacity(k * m);
        for _ in 0..k * m {
            let (re, im) = stream.complex_normal();
            f.push(cplx(T::lit(re * scale), T::lit(im * scale)));
        }
        subcarriers.push(SubcarrierChannel {
            spec: *spec,
            z_rs: CMat::from_vec(k, m, f)?,
            z_st: bs_coupling(cfg, spec.frequency)?,
        });
    }
    Ok(ChannelRealization { seed, subcarriers })
}

/// Same as [`draw_realization`] but returns the raw unit-variance `F_i`.
pub fn draw_fading(cfg: &ScenarioConfig, specs: &[SubcarrierSpec], seed: u64) -> Vec<CMat<f64>> {
    let mut stream = PinnedStream::new(seed);
    let (k, m) = (cfg.users, cfg.elements());
    specs
        .iter()
        .map(|_| {
            CMat::from_fn(k, m, |_, _| {
                let (re, im) = stream.complex_normal();
                C::new(re, im)
            })
        })
        .collect()
}

/// `H_i = Z′_RS · G_{2L,1} · Z′_ST`, `K × N_t`.
pub fn effective_channel<T: Real>(
    channel: &SubcarrierChannel<T>,
    transfer: &SimTransfer<T>,
) -> Result<CMat<T>> {
    if transfer.frequency != channel.spec.frequency {
        return Err(Error::DimensionMismatch(format!(
            "transfer at {} Hz applied to subcarrier at {} Hz",
            transfer.frequency, channel.spec.frequency
        )));
    }
    channel.z_rs.matmul(&transfer.g21)?.matmul(&channel.z_st)
}

/// Everything needed to evaluate channels of one realization at any `Φ`:
/// the per-subcarrier interconnects are built once and reused.
#[derive(Debug, Clone)]
pub struct LinkModel<T: Real> {
    pub cfg: ScenarioConfig,
    pub interconnects: Vec<InterconnectMatrix<T>>,
    pub realization: ChannelRealization<T>,
    pub cond_cap: T,
}

impl<T: Real> LinkModel<T> {
    pub fn new(cfg: &ScenarioConfig, realization: ChannelRealization<T>) -> Result<Self> {
        let interconnects = realization
            .subcarriers
            .iter()
            .map(|s| build_interconnect(cfg, s.spec.frequency))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            interconnects,
            realization,
            cond_cap: T::lit(DEFAULT_COND_CAP),
        })
    }

    /// Draws the realization for `seed` on the config's own grid.
    pub fn from_seed(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        let specs = cfg.subcarrier_grid();
        Self::new(cfg, draw_realization(cfg, &specs, seed)?)
    }

    #[inline]
    pub fn channels(&self) -> &[SubcarrierChannel<T>] {
        &self.realization.subcarriers
    }

    pub fn specs(&self) -> Vec<SubcarrierSpec> {
        self.channels().iter().map(|c| c.spec).collect()
    }

    /// SIM transfers for every subcarrier at (possibly unwrapped) phases.
    pub fn transfers(&self, phases: &RMat<T>, keep_slices: bool) -> Result<Vec<SimTransfer<T>>> {
        let loads = build_loads(&self.cfg, phases)?;
        self.interconnects
            .iter()
            .map(|zss| solve_transfer(zss, &loads, keep_slices, self.cond_cap))
            .collect()
    }

    pub fn effective_channels_from(&self, transfers: &[SimTransfer<T>]) -> Result<Vec<CMat<T>>> {
        self.channels()
            .iter()
            .zip(transfers)
            .map(|(c, t)| effective_channel(c, t))
            .collect()
    }

    pub fn effective_channels(&self, phases: &RMat<T>) -> Result<Vec<CMat<T>>> {
        self.effective_channels_from(&self.transfers(phases, false)?)
    }
}

/// A seed-only dataset bound to a config fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub fingerprint: String,
    #[serde(with = "u64_string")]
    pub master_seed: u64,
    pub n: usize,
    #[serde(with = "u64_string_vec")]
    pub seeds: Vec<u64>,
}

pub fn make_dataset(cfg: &ScenarioConfig, n: usize, master_seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::InvalidValue("n".into(), "dataset needs at least one realization".into()));
    }
    Ok(Dataset {
        fingerprint: cfg.fingerprint(),
        master_seed,
        n,
        seeds: expand_seeds(master_seed, n),
    })
}

impl Dataset {
    pub fn check_fingerprint(&self, cfg: &ScenarioConfig) -> Result<()> {
        let found = cfg.fingerprint();
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn seed(&self, idx: usize) -> Result<u64> {
        self.seeds.get(idx).copied().ok_or(Error::IndexOutOfRange {
            index: idx,
            len: self.seeds.len(),
        })
    }

    /// Regenerates realization `idx` after checking the config fingerprint.
    pub fn materialize<T: Real>(&self, cfg: &ScenarioConfig, idx: usize) -> Result<ChannelRealization<T>> {
        self.check_fingerprint(cfg)?;
        self.materialize_unchecked(cfg, idx)
    }

    /// Regenerates realization `idx` on `cfg`'s grid without the fingerprint
    /// guard (used when the grid deliberately differs from training).
    pub fn materialize_unchecked<T: Real>(
        &self,
        cfg: &ScenarioConfig,
        idx: usize,
    ) -> Result<ChannelRealization<T>> {
        let seed = self.seed(idx)?;
        draw_realization(cfg, &cfg.subcarrier_grid(), seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        if ds.seeds.len() != ds.n {
            return Err(Error::InvalidValue(
                "seeds".into(),
                format!("{} seeds listed, n = {}", ds.seeds.len(), ds.n),
            ));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

mod u64_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod u64_string_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&x.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}
