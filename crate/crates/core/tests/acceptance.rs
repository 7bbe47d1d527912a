//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line
//! straight to stderr so it shows up even when output is captured.

use std::io::Write as _;
use std::time::Instant;

use mbdu::channel::{make_dataset, Dataset, LinkModel};
use mbdu::harness::check::{
    analytic_gradient, fd_gradient, gauss_jordan_inverse, grid_search_rate, kkt_violation, max_relative_error,
    random_state, GRADIENT_REL_TOL, RATE_REL_TOL,
};
use mbdu::harness::{gd_reference_step, run_sweep, SweepKind, SweepResult, SweepSpec};
use mbdu::linalg::RMat;
use mbdu::phase_opt::{alternating_optimize, project_phases, AoOptions, Method, UnfoldingParams};
use mbdu::precoding::waterfill;
use mbdu::rates::{rate_via_determinant, sum_rate};
use mbdu::rng::PinnedStream;
use mbdu::scenario::ScenarioConfig;
use mbdu::sim_device::{build_loads, sim_transfer};
use mbdu::training::{save_checkpoint, train_from, Estimator, TrainingHyper, TrainingState, WarmStart};

fn report(n: u32, passed: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if passed { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Relative tie band for trend comparisons.
const TIE: f64 = 0.005;

fn at_least(a: f64, b: f64) -> bool {
    a >= b * (1.0 - TIE)
}

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    let cfg = ScenarioConfig::desk();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let state = random_state(&cfg, 1000 + i).unwrap();
        let a = analytic_gradient(&state).unwrap();
        let f = fd_gradient(&state, 1e-3).unwrap();
        worst = worst.max(max_relative_error(&a, &f));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= GRADIENT_REL_TOL && secs <= 120.0;
    report(1, ok, &format!("20 states, max rel err {worst:.2e}, {secs:.1}s"));
    assert!(ok);
}

#[test]
fn criterion_2_whitened_rate_equals_sinr_rate() {
    let cfg = ScenarioConfig::desk();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let state = random_state(&cfg, 2000 + i).unwrap();
        let h = state.link.effective_channels(&state.phases).unwrap();
        let specs = state.link.specs();
        let direct = sum_rate(&h, &state.precoders, &specs).unwrap().total;
        let det = rate_via_determinant(&h, &state.precoders, &specs).unwrap();
        worst = worst.max((direct - det).abs() / direct);
    }
    let ok = worst <= RATE_REL_TOL;
    report(2, ok, &format!("100 states, max rel dev {worst:.2e}"));
    assert!(ok);
}

#[test]
fn criterion_3_waterfill_is_optimal() {
    let mut s = PinnedStream::new(3);
    let weights = [1.2e5, 4.8e5];
    let p_total = 10.0;
    let (mut excess, mut kkt, mut budget) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let gains: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| -(1.0 - s.uniform()).ln() * 10f64.powf(2.0 * s.uniform() - 1.0)).collect())
            .collect();
        let wf = waterfill(&gains, p_total, &weights).unwrap();
        let g: Vec<f64> = gains.iter().flatten().copied().collect();
        let w: Vec<f64> = (0..2).flat_map(|i| [weights[i]; 2]).collect();
        let p: Vec<f64> = wf.powers.iter().flatten().copied().collect();
        let rate: f64 = g.iter().zip(&w).zip(&p).map(|((l, b), x)| b * (1.0 + l * x).log2()).sum();
        excess = excess.max(grid_search_rate(&g, &w, p_total, 1_000_000) - rate);
        kkt = kkt.max(kkt_violation(&g, &w, &p));
        budget = budget.max((p.iter().sum::<f64>() - p_total).abs());
    }
    let ok = excess <= 1e-6 && kkt <= 1e-9 && budget <= 1e-9 * p_total;
    report(3, ok, &format!("grid excess {excess:.2e} bit/s, KKT {kkt:.2e}, budget err {budget:.2e} W"));
    assert!(ok);
}

#[test]
fn criterion_4_degenerate_mbdu_is_gd() {
    let cfg = ScenarioConfig::desk();
    let link = LinkModel::<f64>::from_seed(&cfg, 4).unwrap();
    let opts = AoOptions {
        record_stage_rates: true,
        ..AoOptions::default()
    };
    let eta = 2e-9;
    let gd = alternating_optimize(&link, &UnfoldingParams::gd(3, 6, eta), &opts).unwrap();
    let mb = alternating_optimize(&link, &UnfoldingParams::mbdu(3, 6, eta, 0.0, 0.0), &opts).unwrap();
    let bits = |t: &mbdu::AoTraceF64| -> Vec<u64> {
        t.outer.iter().flat_map(|o| o.stage_rates.iter().map(|r| r.to_bits())).collect()
    };
    let ok = bits(&gd) == bits(&mb) && gd.phases.as_mat() == mb.phases.as_mat();
    report(4, ok, &format!("{} stage rates bit-identical", bits(&gd).len()));
    assert!(ok);
}

#[test]
fn criterion_5_periodicity_and_projection() {
    let cfg = ScenarioConfig::desk();
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let st = random_state(&cfg, 5000 + i).unwrap();
        let rate = |p: &RMat<f64>| {
            sum_rate(&st.link.effective_channels(p).unwrap(), &st.precoders, &st.link.specs()).unwrap().total
        };
        let base = rate(&st.phases);
        let wrapped = project_phases(&st.phases.map(|x| x + std::f64::consts::TAU)).unwrap();
        worst = worst.max((rate(wrapped.as_mat()) - base).abs() / base);
    }
    let mut s = PinnedStream::new(5);
    let raw = RMat::from_fn(100, 100, |_, _| (s.uniform() - 0.5) * 1e3);
    let once = project_phases(&raw).unwrap();
    let twice = project_phases(once.as_mat()).unwrap();
    let idempotent = once.as_mat() == twice.as_mat();
    let ok = worst <= RATE_REL_TOL && idempotent;
    report(5, ok, &format!("rate dev {worst:.2e}, 10^4 projections idempotent: {idempotent}"));
    assert!(ok);
}

#[test]
fn inverse_oracle_on_desk_scale() {
    let cfg = ScenarioConfig::desk();
    let st = random_state(&cfg, 77).unwrap();
    let loads = build_loads(&cfg, &st.phases).unwrap();
    let zss = &st.link.interconnects[0];
    let t = sim_transfer(zss, &loads).unwrap();
    let inv = gauss_jordan_inverse(&zss.matrix.add(&loads.matrix).unwrap()).unwrap();
    let m = cfg.elements();
    let oracle = inv.block(inv.rows() - m, 0, m, m);
    assert!(t.g21.max_abs_diff(&oracle) <= 1e-10 * oracle.max_abs());
}

// ---- trend criteria -------------------------------------------------------

const N_TRAIN: usize = 16;
const N_VAL: usize = 32;
const N_EVAL: usize = 20;

fn trend_hyper() -> TrainingHyper {
    TrainingHyper {
        epochs: 30,
        batch_size: 4,
        estimator: Estimator::Spsa,
        spsa_c: 0.1,
        spsa_samples: 8,
        n_train: N_TRAIN,
        n_val: N_VAL,
        min_rel_improvement: 0.01,
        ..TrainingHyper::default()
    }
}

fn trend_dataset(cfg: &ScenarioConfig) -> Dataset {
    make_dataset(cfg, N_TRAIN + N_VAL + N_EVAL, cfg.master_seed).unwrap()
}

/// DU from the sweep's GD step, then MBDU from the trained DU.
fn train_pair(
    cfg: &ScenarioConfig,
    ds: &Dataset,
    eta: f64,
    i_max: usize,
    t: usize,
) -> [(Method, TrainingState); 2] {
    let opts = AoOptions::default();
    let hyper = trend_hyper();
    let warm = WarmStart {
        eta_ref: Some(eta),
        params: None,
    };
    let (du, du_state) = train_from(cfg, ds, &hyper, Method::Du, i_max, t, &opts, &warm).unwrap();
    let warm = WarmStart {
        eta_ref: Some(eta),
        params: Some(du),
    };
    let (_, mb_state) = train_from(cfg, ds, &hyper, Method::Mbdu, i_max, t, &opts, &warm).unwrap();
    [(Method::Du, du_state), (Method::Mbdu, mb_state)]
}

fn sweep_spec(kind: SweepKind, grid: Vec<usize>, i_max: usize, t: usize) -> SweepSpec {
    SweepSpec {
        kind,
        grid,
        methods: vec![Method::Gd, Method::Du, Method::Mbdu],
        n_eval: N_EVAL,
        t,
        i_max,
        checkpoints: Vec::new(),
        eval_offset: Some(N_TRAIN + N_VAL),
        allow_config_drift: kind == SweepKind::Subcarriers,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        opts: AoOptions::default(),
    }
}

/// Trains a DU/MBDU pair per grid point and evaluates the sweep.
fn trained_sweep(cfg: &ScenarioConfig, ds: &Dataset, mut spec: SweepSpec) -> SweepResult {
    let eta = gd_reference_step(cfg, ds, spec.tuning_shape(), &spec.opts).unwrap();
    for &v in &spec.grid.clone() {
        let (i, t) = match spec.kind {
            SweepKind::Inner => (spec.i_max, v),
            _ => (v, spec.t),
        };
        spec.checkpoints.extend(train_pair(cfg, ds, eta, i, t));
    }
    run_sweep(&spec, cfg, ds).unwrap()
}

fn ordering_lines(res: &SweepResult, kind: SweepKind, grid: &[usize], out: &mut Vec<String>) -> bool {
    let mut ok = true;
    for &v in grid {
        let m = |method| res.mean_rate(method, kind, v).unwrap();
        let (gd, du, mb) = (m(Method::Gd), m(Method::Du), m(Method::Mbdu));
        let good = at_least(mb, du) && at_least(du, gd);
        ok &= good;
        out.push(format!("{kind:?}={v}: gd {gd:.4e} du {du:.4e} mbdu {mb:.4e}{}", if good { "" } else { " <-" }));
    }
    ok
}

#[test]
fn criterion_6_iteration_trends() {
    let cfg = ScenarioConfig::desk();
    let ds = trend_dataset(&cfg);
    let start = Instant::now();
    let inner = trained_sweep(&cfg, &ds, sweep_spec(SweepKind::Inner, (1..=6).collect(), 1, 6));
    let outer = trained_sweep(&cfg, &ds, sweep_spec(SweepKind::Outer, (1..=5).collect(), 5, 6));
    let mut lines = Vec::new();
    let inner_ok = ordering_lines(&inner, SweepKind::Inner, &(1..=6).collect::<Vec<_>>(), &mut lines);
    let outer_ok = ordering_lines(&outer, SweepKind::Outer, &(1..=5).collect::<Vec<_>>(), &mut lines);
    let mb2 = outer.mean_rate(Method::Mbdu, SweepKind::Outer, 2).unwrap();
    let gd5 = outer.mean_rate(Method::Gd, SweepKind::Outer, 5).unwrap();
    let fast = at_least(mb2, gd5);
    let secs = start.elapsed().as_secs_f64();
    for l in &lines {
        let _ = std::io::stderr().write_all(format!("  {l}\n").as_bytes());
    }
    let ok = inner_ok && outer_ok && fast && secs <= 1800.0;
    report(
        6,
        ok,
        &format!(
            "inner ordering {inner_ok}, outer ordering {outer_ok}, MBDU@I=2 {mb2:.4e} vs GD@I=5 {gd5:.4e}, {secs:.0}s"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_subcarrier_generalization() {
    let cfg = ScenarioConfig::desk();
    let ds = trend_dataset(&cfg);
    let (i_max, t) = (5, 6);
    let mut spec = sweep_spec(SweepKind::Subcarriers, vec![2, 4, 6, 8], i_max, t);
    // models trained once at M_L = M_H = 4 with the M = 4 GD step
    let eta = gd_reference_step(&cfg, &ds, (i_max, t), &spec.opts).unwrap();
    spec.checkpoints.extend(train_pair(&cfg, &ds, eta, i_max, t));
    let res = run_sweep(&spec, &cfg, &ds).unwrap();
    let mut ok = true;
    for m in [2, 4, 6, 8] {
        let r = |method| res.mean_rate(method, SweepKind::Subcarriers, m).unwrap();
        let (gd, du, mb) = (r(Method::Gd), r(Method::Du), r(Method::Mbdu));
        let good = at_least(du, gd) && at_least(mb, gd);
        ok &= good;
        let _ = std::io::stderr()
            .write_all(format!("  M={m}: gd {gd:.4e} du {du:.4e} mbdu {mb:.4e}{}\n", if good { "" } else { " <-" }).as_bytes());
    }
    report(7, ok, "DU and MBDU at least GD at every subcarrier count");
    assert!(ok);
}

#[test]
fn criterion_8_bitwise_reproducibility() {
    let cfg = ScenarioConfig::desk();
    let ds = trend_dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, String) {
        let hyper = TrainingHyper {
            epochs: 3,
            ..trend_hyper()
        };
        let opts = AoOptions::default();
        let (du, du_state) = train_from(&cfg, &ds, &hyper, Method::Du, 1, 3, &opts, &WarmStart::default()).unwrap();
        let warm = WarmStart {
            eta_ref: Some(du_state.eta_ref),
            params: Some(du),
        };
        let (_, mb_state) = train_from(&cfg, &ds, &hyper, Method::Mbdu, 1, 3, &opts, &warm).unwrap();
        let (a, b) = (dir.path().join(format!("du{tag}.json")), dir.path().join(format!("mb{tag}.json")));
        save_checkpoint(&du_state, &a).unwrap();
        save_checkpoint(&mb_state, &b).unwrap();
        let mut spec = sweep_spec(SweepKind::Inner, vec![1, 3], 1, 3);
        spec.n_eval = 4;
        spec.checkpoints = vec![(Method::Du, du_state), (Method::Mbdu, mb_state)];
        let csv = run_sweep(&spec, &cfg, &ds).unwrap().to_csv();
        let stripped = csv
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                if f.len() == 11 && !l.starts_with("method") {
                    f[9] = "";
                }
                f.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n");
        (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), stripped)
    };
    let first = run("1");
    let second = run("2");
    let ok = first == second;
    report(8, ok, "two checkpoints and one sweep CSV compared byte for byte");
    assert!(ok);
}

#[test]
fn criterion_9_full_scale_smoke() {
    let cfg = ScenarioConfig::reference();
    let start = Instant::now();
    let link = LinkModel::<f64>::from_seed(&cfg, 9).unwrap();
    let params = UnfoldingParams::mbdu(5, 6, 2e-9, 0.5, 1.0);
    let trace = alternating_optimize(&link, &params, &AoOptions::default());
    let secs = start.elapsed().as_secs_f64();
    let ok = matches!(&trace, Ok(t) if t.final_rate().total.is_finite()) && secs <= 300.0;
    let rate = trace.map(|t| t.final_rate().total).unwrap_or(f64::NAN);
    report(9, ok, &format!("7x7, L=2, 8 subcarriers, T=6, I_max=5 MBDU: R={rate:.4e} in {secs:.1}s"));
    assert!(ok);
}
