use feedsim::counterfactual::*;
use feedsim::simulator::*;

const GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

fn users(seed: u64) -> (Vec<UserState>, SimConfig) {
    let c = SimConfig::new(100_000, default_params(), seed);
    (draw_population(&c).unwrap(), c)
}

#[test]
fn frontier_shape_at_estimated_theta() {
    let (u, c) = users(4);
    let rows = policy_frontier(&u, &GRID, &TargetRule::AboveMean, RegimeSpec::Estimated(0.16), &c).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[1].toxic_shares <= w[0].toxic_shares));
    let share = |a: f64| rows.iter().find(|r| r.a == a).unwrap().decomposition.engagement_share();
    assert!(share(0.6) < 0.5 && share(0.8) > 0.5, "{} {}", share(0.6), share(0.8));
    assert!((share(1.0) - 0.55).abs() < 0.10);
    for r in &rows[1..] {
        assert!(r.decomposition.residual.abs() < 1e-12);
    }
}

#[test]
fn mechanical_regime_leaves_sharing_unchanged() {
    let (u, c) = users(5);
    let rows = policy_frontier(&u, &GRID, &TargetRule::All, RegimeSpec::Mechanical, &c).unwrap();
    for r in &rows {
        assert_eq!(r.decomposition.pct_change_s_t, 0.0);
        assert_eq!(r.decomposition.pct_change_toxic_shares, 0.0);
        assert_eq!(r.toxic_shares, rows[0].toxic_shares);
    }
}

#[test]
fn fully_malleable_users_respond_through_behavior() {
    let (u, c) = users(6);
    let rows = policy_frontier(&u, &GRID, &TargetRule::AboveMean, RegimeSpec::FullyMalleable, &c).unwrap();
    let last = rows.last().unwrap().decomposition;
    assert!(last.behavior.abs() > last.engagement.abs());
    assert!(last.engagement.abs() < 1e-12);
}

#[test]
fn quantile_targets_only_touch_their_users() {
    let (u, c) = users(7);
    let qb = q_bar(&u).unwrap();
    let mask = targeted(&u, &TargetRule::Quantiles(vec![4]), qb);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 20_000);
    let base = simulate_policy(&u, &PolicySpec::new(0.0, TargetRule::Quantiles(vec![4])).unwrap(), RegimeSpec::Estimated(0.16), &c).unwrap();
    let pol = simulate_policy(&u, &PolicySpec::new(1.0, TargetRule::Quantiles(vec![4])).unwrap(), RegimeSpec::Estimated(0.16), &c).unwrap();
    for ((b, p), m) in base.iter().zip(&pol).zip(&mask) {
        if !m {
            assert_eq!(b, p);
        }
    }
}
