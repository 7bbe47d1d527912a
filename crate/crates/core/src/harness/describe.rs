//! Human-readable scenario summary.

use std::fmt::Write as _;

use crate::phase_opt::Method;
use crate::scenario::ScenarioConfig;
use crate::sim_device::PortIndexMap;

/// Real floating-point operations of one AO run: every stage factors a
/// `2LM`-port system per subcarrier (≈ 8n³/3 real flops for complex LU)
/// and solves for `2M` inverse slices, plus one rate solve per block.
pub fn estimated_ao_flops(cfg: &ScenarioConfig, i_max: usize, t: usize) -> f64 {
    let n = PortIndexMap::from_config(cfg).ports() as f64;
    let m = cfg.elements() as f64;
    let per_solve = 8.0 * n.powi(3) / 3.0 + 8.0 * n * n * 2.0 * m;
    cfg.subcarriers() as f64 * (i_max * (t + 2)) as f64 * per_solve
}

/// Grid, port count, per-method parameter counts and AO cost at `(T, I_max)`.
pub fn describe(cfg: &ScenarioConfig, t: usize, i_max: usize) -> String {
    let map = PortIndexMap::from_config(cfg);
    let mut out = String::new();
    let _ = writeln!(out, "fingerprint      {}", cfg.fingerprint());
    let _ = writeln!(
        out,
        "SIM              L={} layers of {}x{} atoms ({} per layer)",
        cfg.layers,
        cfg.grid_rows,
        cfg.grid_cols,
        cfg.elements()
    );
    let _ = writeln!(out, "ports (2LM)      {}", map.ports());
    let _ = writeln!(out, "phases (LM)      {}", cfg.layers * cfg.elements());
    let _ = writeln!(
        out,
        "bands            low {} x {:.3e} Hz around {:.3e} Hz, high {} x {:.3e} Hz around {:.3e} Hz",
        cfg.m_low, cfg.b_low, cfg.f_low, cfg.m_high, cfg.b_high, cfg.f_high
    );
    let freqs: Vec<String> = cfg.subcarrier_grid().iter().map(|s| format!("{:.6e}", s.frequency)).collect();
    let _ = writeln!(out, "subcarriers (Hz) {}", freqs.join(" "));
    let _ = writeln!(out, "users/antennas   K={} N_t={}", cfg.users, cfg.bs_antennas);
    let _ = writeln!(out, "budget           P_T={} W", cfg.p_total);
    for m in Method::ALL {
        let _ = writeln!(
            out,
            "params {:<9} P={} (T={t}, I_max={i_max})",
            m.as_str(),
            m.param_count(i_max, t)
        );
    }
    let _ = writeln!(
        out,
        "AO cost          ~{:.2e} flops per realization",
        estimated_ao_flops(cfg, i_max, t)
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grid_has_196_ports() {
        let text = describe(&ScenarioConfig::reference(), 6, 5);
        assert!(text.contains("ports (2LM)      196"));
        assert!(text.contains("params mbdu      P=120"));
        assert!(text.contains("params du        P=30"));
        assert!(text.contains("params gd        P=1"));
        let line = text.lines().find(|l| l.starts_with("subcarriers")).unwrap();
        assert_eq!(line.split_whitespace().count(), 2 + 8);
    }

    #[test]
    fn single_atom_has_two_ports() {
        let cfg = ScenarioConfig {
            layers: 1,
            grid_rows: 1,
            grid_cols: 1,
            ..ScenarioConfig::desk()
        };
        assert!(describe(&cfg, 1, 1).contains("ports (2LM)      2\n"));
    }
}
