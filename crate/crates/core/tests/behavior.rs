mod common;

use feedsim::behavior::{self, statics, Exposure, UserTaste, UtilityParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params_of(w: &[f64; 5]) -> UtilityParams {
    UtilityParams::new(w[0], w[1], w[2], w[3], w[4], 0.0).unwrap()
}

#[test]
fn closed_forms_match_numeric_maximizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (w, q, p) = common::draw_interior(&mut rng);
        let out = behavior::solve_user(&params_of(&w), Exposure::new(q).unwrap(), UserTaste::new(p).unwrap());
        let (s, shares, views) = common::numeric_maximizer(&w, q, p);
        assert!(!out.exited);
        assert!((out.share_frac_toxic - s).abs() < 1e-4, "s {} vs {s} {w:?} {q} {p}", out.share_frac_toxic);
        assert!((out.n_shares - shares).abs() < 1e-4, "S {w:?} {q} {p}");
        assert!((out.n_views - views).abs() < 1e-4, "N {w:?} {q} {p}");
    }
}

#[test]
fn quadratic_variant_matches_its_objective() {
    let params = UtilityParams::new(1.0, 2.0, 1.0, 16.0, 0.3, 0.0).unwrap();
    let (q, p) = (Exposure::new(0.2).unwrap(), UserTaste::new(0.4).unwrap());
    let out = behavior::solve_user_quadratic(&params, q, p);
    assert!((out.share_frac_toxic - 0.34).abs() < 1e-15);
    let u0 = behavior::utility_quadratic(&params, out.share_frac_toxic, out.n_shares, out.n_views, q, p);
    for (ds, dss, dn) in [(1e-3, 0.0, 0.0), (-1e-3, 0.0, 0.0), (0.0, 1e-3, 0.0), (0.0, 0.0, -1e-3), (0.0, 1e-3, 1e-3)] {
        let u = behavior::utility_quadratic(
            &params,
            out.share_frac_toxic + ds,
            out.n_shares + dss,
            out.n_views + dn,
            q,
            p,
        );
        assert!(u <= u0);
    }
}

fn fd_cross(f: impl Fn(f64, f64) -> f64, p: f64, qb: f64, h: f64) -> f64 {
    (f(p + h, qb + h) - f(p + h, qb - h) - f(p - h, qb + h) + f(p - h, qb - h)) / (4.0 * h * h)
}

#[test]
fn fd_statics_on_grid() {
    let params = feedsim::simulator::default_params();
    let views = |p: f64, qb: f64| {
        behavior::optimal_views(&params, Exposure::new(qb).unwrap(), UserTaste::new(p).unwrap()).raw
    };
    let share = |p: f64, qb: f64| {
        behavior::optimal_share_fraction(Exposure::new(qb).unwrap(), UserTaste::new(p).unwrap(), params.theta()).unwrap()
    };
    for i in 0..20 {
        for j in 0..20 {
            let qb = 0.02 + 0.01 * i as f64;
            let p = qb + 0.01 + 0.015 * j as f64;
            assert!(statics::exposure_effect(p, qb) < 0.0);
            assert!(statics::exposure_effect(p + 1e-3, qb) < statics::exposure_effect(p, qb));
            assert!(fd_cross(views, p, qb, 1e-4) >= 0.0);
            let c3 = fd_cross(share, p, qb, 1e-4);
            assert!((c3 - statics::share_cross_partial(params.theta(), p, qb)).abs() < 1e-4);
        }
    }
}

proptest! {
    #[test]
    fn share_fraction_between_taste_and_feed(q in 0.001f64..0.999, p in 0.001f64..0.999, theta in 0.0f64..=1.0) {
        let s = behavior::optimal_share_fraction(Exposure::new(q).unwrap(), UserTaste::new(p).unwrap(), theta).unwrap();
        prop_assert!(s >= q.min(p) * (1.0 - 1e-12) && s <= q.max(p) * (1.0 + 1e-12));
    }

    #[test]
    fn views_peak_at_own_taste(p in 0.01f64..0.9, q in 0.01f64..0.9, theta in 0.0f64..=1.0) {
        let params = feedsim::simulator::default_params().with_theta(theta).unwrap();
        let taste = UserTaste::new(p).unwrap();
        let at_own = behavior::optimal_views(&params, Exposure::new(p).unwrap(), taste).raw;
        let elsewhere = behavior::optimal_views(&params, Exposure::new(q).unwrap(), taste).raw;
        prop_assert!(elsewhere <= at_own + 1e-12);
    }

    #[test]
    fn exit_zeroes_everything(p in 0.005f64..0.02, q in 0.5f64..0.95) {
        let params = UtilityParams::new(1.0, 1.0, 1.0, 200.0, 0.5, 0.0).unwrap();
        let out = behavior::solve_user(&params, Exposure::new(q).unwrap(), UserTaste::new(p).unwrap());
        prop_assert!(out.exited);
        prop_assert_eq!(out.n_views, 0.0);
        prop_assert_eq!(out.n_shares, 0.0);
        prop_assert_eq!(out.toxic_shares, 0.0);
    }

    #[test]
    fn shares_never_exceed_views(p in 0.01f64..0.9, q in 0.01f64..0.9, theta in 0.0f64..=1.0) {
        let params = feedsim::simulator::default_params().with_theta(theta).unwrap();
        let out = behavior::solve_user(&params, Exposure::new(q).unwrap(), UserTaste::new(p).unwrap());
        prop_assert!(out.n_shares <= out.n_views);
        prop_assert!(out.n_shares >= 0.0);
    }
}
