use proptest::prelude::*;

use mbdu::channel::LinkModel;
use mbdu::linalg::RMat;
use mbdu::phase_opt::{
    alternating_optimize, gd_step, initial_phases, project_phases, AoOptions, GradientProvider, LinkGradient,
    UnfoldingParams,
};
use mbdu::precoding::{equal_power_mrt, waterfill};
use mbdu::rates::sum_rate;
use mbdu::scenario::ScenarioConfig;

fn small() -> ScenarioConfig {
    ScenarioConfig {
        grid_rows: 2,
        grid_cols: 2,
        m_low: 1,
        m_high: 1,
        ..ScenarioConfig::desk()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_is_idempotent_and_in_range(xs in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let raw = RMat::from_vec(1, xs.len(), xs).unwrap();
        let once = project_phases(&raw).unwrap();
        let twice = project_phases(once.as_mat()).unwrap();
        prop_assert_eq!(once.as_mat(), twice.as_mat());
        for &x in once.as_mat().as_slice() {
            prop_assert!((0.0..std::f64::consts::TAU).contains(&x));
        }
    }

    #[test]
    fn projection_preserves_angle(x in -1e3f64..1e3) {
        let p = project_phases(&RMat::from_vec(1, 1, vec![x]).unwrap()).unwrap().as_mat().as_slice()[0];
        prop_assert!((p.sin() - x.sin()).abs() < 1e-9 && (p.cos() - x.cos()).abs() < 1e-9);
    }

    #[test]
    fn waterfill_meets_budget_and_kkt(
        gains in prop::collection::vec(1e-3f64..1e3, 4),
        p_total in 0.1f64..100.0,
        w_high in 1.0f64..8.0,
    ) {
        let table = vec![gains[..2].to_vec(), gains[2..].to_vec()];
        let weights = [1.0, w_high];
        let wf = waterfill(&table, p_total, &weights).unwrap();
        let total: f64 = wf.powers.iter().flatten().sum();
        prop_assert!((total - p_total).abs() <= 1e-9 * p_total);
        // active streams share the marginal utility, inactive ones do not exceed it
        let mut nu: Option<f64> = None;
        for i in 0..2 {
            for k in 0..2 {
                let (l, p) = (table[i][k], wf.powers[i][k]);
                if p > 0.0 {
                    let m = weights[i] * l / (1.0 + l * p);
                    let n = *nu.get_or_insert(m);
                    prop_assert!((m - n).abs() <= 1e-9 * n);
                }
            }
        }
        let nu = nu.unwrap();
        for i in 0..2 {
            for k in 0..2 {
                if wf.powers[i][k] == 0.0 {
                    prop_assert!(weights[i] * table[i][k] <= nu * (1.0 + 1e-9));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rate_is_two_pi_periodic(seed in any::<u64>(), shift in -3i32..=3) {
        let cfg = small();
        let link = LinkModel::<f64>::from_seed(&cfg, seed).unwrap();
        let phi = initial_phases::<f64>(seed, cfg.layers, cfg.elements()).unwrap();
        let w = equal_power_mrt(&link.effective_channels(phi.as_mat()).unwrap(), cfg.p_total).unwrap();
        let specs = link.specs();
        let base = sum_rate(&link.effective_channels(phi.as_mat()).unwrap(), &w, &specs).unwrap().total;
        let moved = phi.as_mat().map(|x| x + f64::from(shift) * std::f64::consts::TAU);
        let r = sum_rate(&link.effective_channels(&moved).unwrap(), &w, &specs).unwrap().total;
        prop_assert!((r - base).abs() <= 1e-10 * base);
    }

    #[test]
    fn degenerate_momentum_is_bitwise_gd(seed in any::<u64>(), scale in 1e-3f64..1e-1) {
        let cfg = small();
        let link = LinkModel::<f64>::from_seed(&cfg, seed).unwrap();
        let phi = initial_phases::<f64>(seed, cfg.layers, cfg.elements()).unwrap();
        let w = equal_power_mrt(&link.effective_channels(phi.as_mat()).unwrap(), cfg.p_total).unwrap();
        let mut provider = LinkGradient { link: &link, precoders: &w };
        let eta = scale / provider.gradient(phi.as_mat()).unwrap().total().max_abs();
        let opts = AoOptions { record_stage_rates: true, ..AoOptions::default() };
        let gd = alternating_optimize(&link, &UnfoldingParams::gd(2, 3, eta), &opts).unwrap();
        let mb = alternating_optimize(&link, &UnfoldingParams::mbdu(2, 3, eta, 0.0, 0.0), &opts).unwrap();
        prop_assert_eq!(gd.phases.as_mat(), mb.phases.as_mat());
        for (a, b) in gd.outer.iter().zip(&mb.outer) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.stage_rates), bits(&b.stage_rates));
        }
    }
}

/// Along a ten-step trajectory, halving from a unit-radian step always
/// reaches a strict rate increase: the gradient is an ascent direction.
#[test]
fn backtracked_steps_ascend() {
    let cfg = small();
    for seed in 0..10u64 {
        let link = LinkModel::<f64>::from_seed(&cfg, seed).unwrap();
        let phi = initial_phases::<f64>(seed, cfg.layers, cfg.elements()).unwrap();
        let w = equal_power_mrt(&link.effective_channels(phi.as_mat()).unwrap(), cfg.p_total).unwrap();
        let mut provider = LinkGradient {
            link: &link,
            precoders: &w,
        };
        let rate = |p: &RMat<f64>| provider_rate(&link, &w, p);
        let mut cur = phi.as_mat().clone();
        let mut r = rate(&cur);
        for step in 0..10 {
            let g = provider.gradient(&cur).unwrap();
            let mut eta = 1.0 / g.total().max_abs();
            let mut halvings = 0;
            loop {
                let cand = gd_step(&cur, &g, eta).unwrap().into_mat();
                let next = rate(&cand);
                if next > r {
                    cur = cand;
                    r = next;
                    break;
                }
                halvings += 1;
                assert!(halvings < 60, "seed {seed} step {step}: no ascent");
                eta *= 0.5;
            }
        }
    }
}

fn provider_rate(link: &LinkModel<f64>, w: &mbdu::precoding::PrecoderSet<f64>, p: &RMat<f64>) -> f64 {
    sum_rate(&link.effective_channels(p).unwrap(), w, &link.specs()).unwrap().total
}
