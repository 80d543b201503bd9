mod common;

use feedsim::estimation::{self, Specification};
use feedsim::rng::{child_seed, substream, Stream};
use feedsim::simulator::*;
use feedsim::stats;
use proptest::prelude::*;
use rand::Rng;

fn config(n: usize, seed: u64) -> SimConfig {
    SimConfig::new(n, default_params(), seed)
}

fn baseline_record(id: u64, v: Option<f64>) -> PanelRecord {
    let mut r = PanelRecord::exited(id, Arm::Control, 0);
    r.v_t = v;
    r
}

#[test]
fn quantiles_match_rank_counting_oracle() {
    let mut rng = substream(5, Stream::Replication, 0);
    for _ in 0..1000 {
        let n = rng.random_range(5..60);
        let recs: Vec<PanelRecord> = (0..n)
            .map(|i| {
                let v = match rng.random_range(0..10) {
                    0 => None,
                    1..=3 => Some(f64::from(rng.random_range(0..4u8)) / 4.0),
                    _ => Some(rng.random::<f64>()),
                };
                baseline_record(rng.random_range(0..1000) * 64 + i, v)
            })
            .collect();
        let with_v: Vec<&PanelRecord> = recs.iter().filter(|r| r.v_t.is_some()).collect();
        let labels = match assign_quantiles(&recs) {
            Ok(l) => l,
            Err(_) => {
                assert!(with_v.len() < 5);
                continue;
            }
        };
        let m = with_v.len();
        for (r, label) in recs.iter().zip(&labels) {
            let Some(v) = r.v_t else {
                assert!(label.is_none());
                continue;
            };
            let below = with_v
                .iter()
                .filter(|o| o.v_t.unwrap() < v || (o.v_t.unwrap() == v && o.user_id < r.user_id))
                .count();
            assert_eq!(*label, Some(below * 5 / m));
        }
    }
}

#[test]
fn decomposition_identity_on_random_totals() {
    let mut rng = substream(6, Stream::Replication, 0);
    for _ in 0..1000 {
        let mut arm = || {
            let views = rng.random_range(10.0..1e6);
            let shares = views * rng.random_range(0.01..1.0);
            ArmTotals::new(views, views * rng.random_range(0.01..1.0), shares, shares * rng.random_range(0.01..1.0))
        };
        let (c, t) = (arm(), arm());
        let d = decompose_totals(c, t).unwrap();
        assert!(d.residual.abs() < 1e-12);
        for a in [c, t] {
            assert!((a.identity_product() / a.toxic_shares - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn recovery_small_monte_carlo() {
    let (mut ols_below, mut covered) = (0, 0);
    let reps = 12;
    for rep in 0..reps {
        let e = simulate_experiment(&config(50_000, child_seed(77, Stream::Replication, rep))).unwrap();
        let ols = estimation::estimate_theta_ols(&e.panel).unwrap();
        let (iv, diag) = estimation::estimate_theta_iv(&e.panel).unwrap();
        ols_below += usize::from(ols.theta_hat < 0.16);
        covered += usize::from(iv.covers(0.16));
        assert!(diag.first_stage_f > 10.0);
        let rel = estimation::estimate_theta_reliability(&e.panel).unwrap();
        assert!(rel.theta_hat > ols.theta_hat);
    }
    assert_eq!(ols_below, reps as usize);
    assert!(covered >= 10, "IV covered {covered}/{reps}");
}

#[test]
fn noise_free_control_slope_is_one() {
    let mut c = config(20_000, 3);
    c.posts_per_view_unit = 1e5;
    c.params = c.params.with_mu(0.0).unwrap();
    let e = simulate_experiment(&c).unwrap();
    let (v, s): (Vec<f64>, Vec<f64>) = e
        .panel
        .baseline
        .iter()
        .filter(|r| !r.arm.is_treated())
        .filter_map(|r| Some((r.v_t?, r.s_t?)))
        .unzip();
    let fit = stats::ols(&v, &s).unwrap();
    assert!((fit.slope - 1.0).abs() < 0.02, "{}", fit.slope);
    let ss = estimation::steady_state_check(&e.panel).unwrap();
    assert!((ss.delta - 1.0).abs() < 0.02);
}

#[test]
fn balance_p_values_are_uniform() {
    let p: Vec<f64> = (0..200)
        .map(|rep| {
            let e = simulate_experiment(&config(2_000, child_seed(8, Stream::Replication, rep))).unwrap();
            balance_check(&e.panel).unwrap().p_value
        })
        .collect();
    let (d, pv) = stats::ks_uniform(&p);
    assert!(pv > 0.01, "KS D {d} p {pv}");
}

#[test]
fn responsiveness_regimes() {
    // Top baseline-exposure quintile, where the treatment cuts exposure most.
    let run = |theta: f64| {
        let mut c = config(100_000, 21);
        c.params = c.params.with_theta(theta).unwrap();
        let panel = simulate_experiment(&c).unwrap().panel;
        let q = assign_quantiles(&panel.baseline).unwrap();
        responsiveness_in(&panel, |i| q[i] == Some(4)).unwrap()
    };
    let mech = run(0.0);
    assert!(mech.ratio.abs() < 3.0 * mech.se, "{mech:?}");
    let full = run(1.0);
    assert!((full.ratio - 1.0).abs() < 3.0 * full.se + 0.05, "{full:?}");
    let mid = run(0.16);
    assert!(mid.ratio < 1.0 && mid.p_value_vs_one < 0.05, "{mid:?}");
}

#[test]
fn homogeneous_tastes_give_equal_quantile_effects() {
    let mut c = config(50_000, 4);
    c.taste_dist = TasteDist::Point(0.07);
    let e = simulate_experiment(&c).unwrap();
    let cells: Vec<AteResult> = hte_by_quantile(&e.panel, Outcome::ViewShare).unwrap().into_iter().flatten().collect();
    assert_eq!(cells.len(), 5);
    let pooled = common::mean(&cells.iter().map(|c| c.effect).collect::<Vec<_>>());
    for c in &cells {
        assert!((c.effect - pooled).abs() < 4.0 * c.se, "{c:?} vs {pooled}");
    }
}

#[test]
fn lee_bounds_cover_the_uncensored_effect() {
    let floor = 225;
    let mut hits = [0usize; 2];
    let reps = 40;
    for rep in 0..reps {
        let e = simulate_experiment(&config(20_000, child_seed(31, Stream::Replication, rep))).unwrap();
        let censored = simulate_attrition(&e.panel, AttritionRule::ViewsBelow(floor));
        let (_, rt) = attrition_rates(&censored);
        assert!(rt > 0.05);
        for (k, outcome) in [Outcome::ToxicShares, Outcome::ShareShare].into_iter().enumerate() {
            let full = ate(&e.panel, outcome).unwrap().effect;
            let b = lee_bounds(&censored, outcome).unwrap();
            hits[k] += usize::from(b.lower <= full && full <= b.upper);
        }
    }
    assert!(hits.iter().all(|&h| h >= 38), "{hits:?} of {reps}");
}

#[test]
fn group_estimates_detect_heterogeneous_influence() {
    let homogeneous = simulate_experiment(&config(100_000, 12)).unwrap();
    let groups = estimation::exposure_groups(&homogeneous.panel, 2).unwrap();
    let g = estimation::estimate_theta_by_group(&homogeneous.panel, &groups).unwrap();
    assert!(g.p_value > 0.01, "{g:?}");

    let mut c = config(100_000, 12);
    c.theta_split = Some(ThetaSplit { taste_cutoff: 0.07, theta_high: 0.6 });
    let split = simulate_experiment(&c).unwrap();
    let groups = estimation::exposure_groups(&split.panel, 2).unwrap();
    let g = estimation::estimate_theta_by_group(&split.panel, &groups).unwrap();
    assert!(g.p_value < 0.01, "{g:?}");
}

#[test]
fn log_specification_also_recovers_theta() {
    let mut c = config(100_000, 14);
    c.posts_per_view_unit = 2_000.0;
    let e = simulate_experiment(&c).unwrap();
    let (est, _) = estimation::estimate_all(&e.panel, Specification::Log).unwrap();
    let iv = &est[1];
    assert!((iv.theta_hat - 0.16).abs() < 4.0 * iv.se + 0.01, "{iv:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn records_satisfy_the_contract(seed in any::<u64>(), theta in 0.0f64..=1.0) {
        let mut c = config(300, seed);
        c.params = c.params.with_theta(theta).unwrap();
        let e = simulate_experiment(&c).unwrap();
        prop_assert!(e.panel.validate().is_ok());
        for r in e.panel.baseline.iter().chain(&e.panel.intervention) {
            prop_assert!(r.shares <= r.views);
            prop_assert_eq!(r.exited, r.views == 0);
        }
    }

    #[test]
    fn simulation_is_seed_deterministic(seed in any::<u64>()) {
        let a = simulate_experiment(&config(200, seed)).unwrap();
        let b = simulate_experiment(&config(200, seed)).unwrap();
        prop_assert_eq!(a.panel, b.panel);
    }
}
