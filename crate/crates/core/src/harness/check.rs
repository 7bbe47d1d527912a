//! Self-check suite: independent oracles run against the library paths.

use std::fmt;
use std::str::FromStr;

use crate::channel::LinkModel;
use crate::error::{Error, Result};
use crate::linalg::{CMat, RMat};
use crate::phase_opt::{
    alternating_optimize, project_phases, AoOptions, GradientProvider, LinkGradient, UnfoldingParams,
};
use crate::precoding::{waterfill, PrecoderSet};
use crate::rates::{rate_via_determinant, sum_rate};
use crate::rng::PinnedStream;
use crate::scalar::C;
use crate::scenario::{ScenarioConfig, SubcarrierSpec};
use crate::sim_device::{build_loads, sim_transfer};

/// How many random instances each check draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLevel {
    Fast,
    Full,
}

impl FromStr for CheckLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fast" => Ok(Self::Fast),
            "full" => Ok(Self::Full),
            _ => Err(Error::InvalidValue("level".into(), s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Budget {
    gradient_states: usize,
    rate_states: usize,
    inverse_states: usize,
    waterfill_draws: usize,
    waterfill_grid: usize,
    projections: usize,
}

impl CheckLevel {
    fn budget(self) -> Budget {
        match self {
            CheckLevel::Fast => Budget {
                gradient_states: 4,
                rate_states: 20,
                inverse_states: 4,
                waterfill_draws: 4,
                waterfill_grid: 100_000,
                projections: 1_000,
            },
            CheckLevel::Full => Budget {
                gradient_states: 20,
                rate_states: 100,
                inverse_states: 20,
                waterfill_draws: 20,
                waterfill_grid: 1_000_000,
                projections: 10_000,
            },
        }
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    fn push(&mut self, name: &'static str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.entries.push(CheckEntry { name, passed, detail });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {}: {}", if e.passed { "PASS" } else { "FAIL" }, e.name, e.detail)?;
        }
        Ok(())
    }
}

/// Tolerances shared by the suite and the acceptance tests.
pub const GRADIENT_REL_TOL: f64 = 1e-6;
pub const GRADIENT_ABS_FLOOR: f64 = 1e-12;
pub const RATE_REL_TOL: f64 = 1e-10;
pub const INVERSE_REL_TOL: f64 = 1e-9;
pub const WATERFILL_ABS_TOL: f64 = 1e-6;
pub const KKT_REL_TOL: f64 = 1e-9;

/// Runs every oracle on `cfg` with instances drawn from `seed`.
pub fn check_oracles(cfg: &ScenarioConfig, seed: u64, level: CheckLevel) -> CheckReport {
    let b = level.budget();
    let mut report = CheckReport::default();
    report.push("gradient_vs_fd", gradient_suite(cfg, seed, b.gradient_states, analytic_gradient));
    report.push("inverse_oracle", inverse_suite(cfg, seed, b.inverse_states));
    report.push(
        "waterfill_kkt_grid",
        waterfill_suite(seed, b.waterfill_draws, b.waterfill_grid, cfg.p_total),
    );
    report.push("determinant_form", determinant_suite(cfg, seed, b.rate_states));
    report.push("periodicity_projection", periodicity_suite(cfg, seed, b.projections));
    report.push("degeneracy", degeneracy_suite(cfg, seed));
    report
}

/// A random `(link, Φ, W)` state with `Σ‖w‖² = P_T`.
pub struct RandomState {
    pub link: LinkModel<f64>,
    pub phases: RMat<f64>,
    pub precoders: PrecoderSet<f64>,
}

pub fn random_state(cfg: &ScenarioConfig, seed: u64) -> Result<RandomState> {
    let mut s = PinnedStream::new(seed);
    let link = LinkModel::from_seed(cfg, s.next_u64())?;
    let phases = RMat::from_fn(cfg.layers, cfg.elements(), |_, _| s.uniform() * std::f64::consts::TAU);
    let mut beams: Vec<CMat<f64>> = (0..cfg.subcarriers())
        .map(|_| {
            CMat::from_fn(cfg.bs_antennas, cfg.users, |_, _| {
                let (a, b) = s.complex_normal();
                C::new(a, b)
            })
        })
        .collect();
    let norm: f64 = beams.iter().map(|w| w.frobenius().powi(2)).sum();
    let scale = (cfg.p_total / norm).sqrt();
    for w in &mut beams {
        *w = w.scale(C::new(scale, 0.0));
    }
    let powers = beams
        .iter()
        .map(|w| (0..w.cols()).map(|k| w.column(k).iter().map(|z| z.norm_sqr()).sum()).collect())
        .collect();
    Ok(RandomState {
        link,
        phases,
        precoders: PrecoderSet { beams, powers },
    })
}

fn state_seed(seed: u64, idx: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64)
}

/// Library gradient `∇_Φ R` summed over both bands.
pub fn analytic_gradient(state: &RandomState) -> Result<RMat<f64>> {
    let mut provider = LinkGradient {
        link: &state.link,
        precoders: &state.precoders,
    };
    Ok(provider.gradient(&state.phases)?.total())
}

fn rate_at(state: &RandomState, phases: &RMat<f64>) -> Result<f64> {
    let h = state.link.effective_channels(phases)?;
    Ok(sum_rate(&h, &state.precoders, &state.link.specs())?.total)
}

/// Richardson-extrapolated central difference of the sum rate (error O(h⁴)).
pub fn fd_gradient(state: &RandomState, h: f64) -> Result<RMat<f64>> {
    let mut out = RMat::zeros(state.phases.rows(), state.phases.cols());
    for idx in 0..state.phases.as_slice().len() {
        let central = |step: f64| -> Result<f64> {
            let mut p = state.phases.clone();
            p.as_mut_slice()[idx] += step;
            let up = rate_at(state, &p)?;
            p.as_mut_slice()[idx] -= 2.0 * step;
            let down = rate_at(state, &p)?;
            Ok((up - down) / (2.0 * step))
        };
        let coarse = central(h)?;
        let fine = central(h / 2.0)?;
        out.as_mut_slice()[idx] = (4.0 * fine - coarse) / 3.0;
    }
    Ok(out)
}

/// Largest entry-wise `|a − f| / max(|f|, floor)`.
pub fn max_relative_error(analytic: &RMat<f64>, reference: &RMat<f64>) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, f)| (a - f).abs() / f.abs().max(GRADIENT_ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Gradient-vs-FD agreement over `n` random states; `grad` is the path
/// under test.
pub fn gradient_suite(
    cfg: &ScenarioConfig,
    seed: u64,
    n: usize,
    grad: impl Fn(&RandomState) -> Result<RMat<f64>>,
) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let state = random_state(cfg, state_seed(seed, i))?;
        let a = grad(&state)?;
        let f = fd_gradient(&state, 1e-3)?;
        worst = worst.max(max_relative_error(&a, &f));
    }
    Ok((worst <= GRADIENT_REL_TOL, format!("{n} states, max relative error {worst:.2e}")))
}

/// Dense Gauss–Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &CMat<f64>) -> Result<CMat<f64>> {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = CMat::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[(x, col)].norm().total_cmp(&m[(y, col)].norm()))
            .unwrap_or(col);
        if m[(pivot, col)].norm() == 0.0 {
            return Err(Error::SingularSystem(format!("zero pivot in column {col}")));
        }
        for c in 0..n {
            let (t1, t2) = (m[(col, c)], m[(pivot, c)]);
            m[(col, c)] = t2;
            m[(pivot, c)] = t1;
            let (t1, t2) = (inv[(col, c)], inv[(pivot, c)]);
            inv[(col, c)] = t2;
            inv[(pivot, c)] = t1;
        }
        let d = m[(col, col)];
        for c in 0..n {
            m[(col, c)] /= d;
            inv[(col, c)] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[(r, col)];
            if f.norm() == 0.0 {
                continue;
            }
            for c in 0..n {
                let (mc, ic) = (m[(col, c)], inv[(col, c)]);
                m[(r, c)] -= f * mc;
                inv[(r, c)] -= f * ic;
            }
        }
    }
    Ok(inv)
}

fn inverse_suite(cfg: &ScenarioConfig, seed: u64, n: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let state = random_state(cfg, state_seed(seed ^ 0x1, i))?;
        let loads = build_loads(cfg, &state.phases)?;
        for zss in &state.link.interconnects {
            let t = sim_transfer(zss, &loads)?;
            let inv = gauss_jordan_inverse(&zss.matrix.add(&loads.matrix)?)?;
            let m = cfg.elements();
            let last = t.map.block_start(t.map.last_block());
            let oracle = inv.block(last, 0, m, m);
            worst = worst.max(t.g21.max_abs_diff(&oracle) / oracle.max_abs());
        }
    }
    Ok((worst <= INVERSE_REL_TOL, format!("{n} states, max relative deviation {worst:.2e}")))
}

/// `Σ B_i log₂(1 + λ p)` for a flat stream list.
fn weighted_rate(gains: &[f64], weights: &[f64], powers: &[f64]) -> f64 {
    gains
        .iter()
        .zip(weights)
        .zip(powers)
        .map(|((l, b), p)| b * (l * p).ln_1p() / std::f64::consts::LN_2)
        .sum()
}

/// Best rate over the simplex lattice `p = P·(n₁, …, n_S)/N` with roughly
/// `points` lattice points.
pub fn grid_search_rate(gains: &[f64], weights: &[f64], p_total: f64, points: usize) -> f64 {
    let s = gains.len();
    // lattice size C(N+s−1, s−1) ≈ points
    let mut n = 1usize;
    while lattice_size(n + 1, s) <= points as f64 {
        n += 1;
    }
    let mut best = f64::NEG_INFINITY;
    let mut counts = vec![0usize; s];
    fn rec(idx: usize, left: usize, counts: &mut [usize], eval: &mut dyn FnMut(&[usize])) {
        if idx + 1 == counts.len() {
            counts[idx] = left;
            eval(counts);
            return;
        }
        for c in 0..=left {
            counts[idx] = c;
            rec(idx + 1, left - c, counts, eval);
        }
    }
    let mut eval = |c: &[usize]| {
        let p: Vec<f64> = c.iter().map(|&x| p_total * x as f64 / n as f64).collect();
        best = best.max(weighted_rate(gains, weights, &p));
    };
    rec(0, n, &mut counts, &mut eval);
    best
}

fn lattice_size(n: usize, s: usize) -> f64 {
    (1..s).map(|j| (n + j) as f64 / j as f64).product()
}

/// KKT residual of a water-filling solution: active streams share one
/// marginal utility `ν`, inactive ones sit at or below it.
pub fn kkt_violation(gains: &[f64], weights: &[f64], powers: &[f64]) -> f64 {
    let marginal = |i: usize| weights[i] * gains[i] / (1.0 + gains[i] * powers[i]);
    let active: Vec<usize> = (0..gains.len()).filter(|&i| powers[i] > 0.0).collect();
    let Some(&first) = active.first() else {
        return f64::INFINITY;
    };
    let nu = marginal(first);
    let spread = active.iter().map(|&i| (marginal(i) - nu).abs() / nu).fold(0.0, f64::max);
    let excess = (0..gains.len())
        .filter(|&i| powers[i] == 0.0)
        .map(|i| ((marginal(i) - nu) / nu).max(0.0))
        .fold(0.0, f64::max);
    spread.max(excess)
}

fn waterfill_suite(seed: u64, draws: usize, grid: usize, p_total: f64) -> Result<(bool, String)> {
    let mut s = PinnedStream::new(seed ^ 0x5746);
    let weights_table = [1.2e5, 4.8e5];
    let (mut gap, mut kkt, mut budget) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for _ in 0..draws {
        // 2 subcarriers × 2 users, exponential gains spread over two decades
        let gains: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| -(1.0 - s.uniform()).ln() * 10f64.powf(2.0 * s.uniform() - 1.0)).collect())
            .collect();
        let wf = waterfill(&gains, p_total, &weights_table)?;
        let flat_g: Vec<f64> = gains.iter().flatten().copied().collect();
        let flat_w: Vec<f64> = (0..2).flat_map(|i| [weights_table[i]; 2]).collect();
        let flat_p: Vec<f64> = wf.powers.iter().flatten().copied().collect();
        let r_wf = weighted_rate(&flat_g, &flat_w, &flat_p);
        let r_grid = grid_search_rate(&flat_g, &flat_w, p_total, grid);
        gap = gap.max(r_grid - r_wf);
        kkt = kkt.max(kkt_violation(&flat_g, &flat_w, &flat_p));
        budget = budget.max((flat_p.iter().sum::<f64>() - p_total).abs() / p_total);
    }
    let ok = gap <= WATERFILL_ABS_TOL && kkt <= KKT_REL_TOL && budget <= 1e-9;
    Ok((
        ok,
        format!("{draws} draws, grid excess {gap:.2e} bit/s, KKT {kkt:.2e}, budget {budget:.2e}"),
    ))
}

fn determinant_suite(cfg: &ScenarioConfig, seed: u64, n: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let state = random_state(cfg, state_seed(seed ^ 0x2, i))?;
        let h = state.link.effective_channels(&state.phases)?;
        let specs: Vec<SubcarrierSpec> = state.link.specs();
        let direct = sum_rate(&h, &state.precoders, &specs)?.total;
        let det = rate_via_determinant(&h, &state.precoders, &specs)?;
        worst = worst.max((direct - det).abs() / direct.abs());
    }
    Ok((worst <= RATE_REL_TOL, format!("{n} states, max relative deviation {worst:.2e}")))
}

fn periodicity_suite(cfg: &ScenarioConfig, seed: u64, projections: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..5 {
        let state = random_state(cfg, state_seed(seed ^ 0x3, i))?;
        let base = rate_at(&state, &state.phases)?;
        let shifted = state.phases.map(|x| x + std::f64::consts::TAU);
        let wrapped = project_phases(&shifted)?;
        for p in [&shifted, wrapped.as_mat()] {
            worst = worst.max((rate_at(&state, p)? - base).abs() / base.abs());
        }
    }
    let mut s = PinnedStream::new(seed ^ 0x4);
    let mut idempotent = true;
    for _ in 0..projections {
        let raw = RMat::from_fn(1, 1, |_, _| (s.uniform() - 0.5) * 200.0);
        let once = project_phases(&raw)?;
        let twice = project_phases(once.as_mat())?;
        idempotent &= once.as_mat().as_slice()[0].to_bits() == twice.as_mat().as_slice()[0].to_bits();
    }
    Ok((
        worst <= RATE_REL_TOL && idempotent,
        format!("rate deviation {worst:.2e}, {projections} projections idempotent: {idempotent}"),
    ))
}

fn degeneracy_suite(cfg: &ScenarioConfig, seed: u64) -> Result<(bool, String)> {
    let link = LinkModel::<f64>::from_seed(cfg, seed)?;
    let opts = AoOptions {
        record_stage_rates: true,
        ..AoOptions::default()
    };
    let (i_max, t) = (2, 3);
    let eta = {
        let mut probe = LinkGradient {
            link: &link,
            precoders: &crate::precoding::equal_power_mrt(
                &link.effective_channels(&RMat::zeros(cfg.layers, cfg.elements()))?,
                cfg.p_total,
            )?,
        };
        0.05 / probe.gradient(&RMat::zeros(cfg.layers, cfg.elements()))?.total().max_abs()
    };
    let runs = [
        UnfoldingParams::gd(i_max, t, eta),
        UnfoldingParams::du(i_max, t, eta),
        UnfoldingParams::mbdu(i_max, t, eta, 0.0, 0.0),
    ]
    .iter()
    .map(|p| alternating_optimize(&link, p, &opts))
    .collect::<Result<Vec<_>>>()?;
    let fingerprint = |tr: &crate::phase_opt::AoTrace<f64>| -> Vec<u64> {
        tr.outer
            .iter()
            .flat_map(|o| o.stage_rates.iter().map(|r| r.to_bits()))
            .chain(tr.phases.as_mat().as_slice().iter().map(|x| x.to_bits()))
            .collect()
    };
    let gd = fingerprint(&runs[0]);
    let same = runs[1..].iter().all(|r| fingerprint(r) == gd);
    Ok((same, format!("{} stage rates compared bitwise", i_max * t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            grid_rows: 2,
            grid_cols: 2,
            m_low: 1,
            m_high: 1,
            ..ScenarioConfig::desk()
        }
    }

    #[test]
    fn fast_suite_passes_on_a_tiny_config() {
        let report = check_oracles(&tiny(), 3, CheckLevel::Fast);
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn sign_error_in_band_accumulation_is_caught() {
        let broken = |s: &RandomState| -> Result<RMat<f64>> {
            let mut p = LinkGradient {
                link: &s.link,
                precoders: &s.precoders,
            };
            let g = p.gradient(&s.phases)?;
            Ok(g.low.zip_map(&g.high, |l, h| l - h))
        };
        let (passed, _) = gradient_suite(&tiny(), 1, 2, broken).unwrap();
        assert!(!passed);
    }

    #[test]
    fn gauss_jordan_inverts() {
        let a = CMat::from_fn(3, 3, |r, c| C::new((r * 3 + c) as f64 + if r == c { 5.0 } else { 0.0 }, 0.5));
        let inv = gauss_jordan_inverse(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&CMat::identity(3)) < 1e-13);
    }

    #[test]
    fn grid_oracle_matches_closed_form_on_two_streams() {
        // λ = [2, 0.5], P = 1, equal weights: p = [1, 0]
        let g = [2.0, 0.5];
        let w = [1.0, 1.0];
        let best = grid_search_rate(&g, &w, 1.0, 1_000);
        assert!((best - weighted_rate(&g, &w, &[1.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn kkt_flags_a_misallocation() {
        assert!(kkt_violation(&[2.0, 0.5], &[1.0, 1.0], &[1.0, 0.0]) < 1e-12);
        assert!(kkt_violation(&[2.0, 0.5], &[1.0, 1.0], &[0.5, 0.5]) > 0.1);
    }

    #[test]
    fn level_parses() {
        assert_eq!("FULL".parse::<CheckLevel>().unwrap(), CheckLevel::Full);
        assert!("medium".parse::<CheckLevel>().is_err());
    }
}
