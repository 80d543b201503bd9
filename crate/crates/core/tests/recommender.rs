mod common;

use feedsim::recommender::{
    assignment_probabilities, assignment_study, factorize, simulate_engagement_matrix, EngagementMatrix,
};
use proptest::prelude::*;

#[test]
fn randomized_feeds_pull_users_to_the_mean() {
    let st = assignment_study(1000, 1000, 200, 30, 5, 2024).unwrap();
    let (mc, mt) = (common::mean(&st.control_q), common::mean(&st.treated_q));
    let se = (common::var(&st.control_q) / 1000.0 + common::var(&st.treated_q) / 1000.0).sqrt();
    assert!((mt - mc).abs() < 3.0 * se, "treated {mt} control {mc} se {se}");
    assert!(common::var(&st.treated_q) < common::var(&st.control_q));

    let intensity: Vec<f64> = st.treated_q.iter().zip(&st.treated_baseline_q).map(|(t, b)| (t - b).abs()).collect();
    let extremity: Vec<f64> = st.treated_baseline_q.iter().map(|b| (b - mc).abs()).collect();
    let rho = common::spearman(&intensity, &extremity);
    assert!(rho > 0.9, "spearman {rho}");

    let se_pop = (common::var(&st.control_popularity) / 1000.0 + common::var(&st.treated_popularity) / 1000.0).sqrt();
    assert!(common::mean(&st.treated_popularity) <= common::mean(&st.control_popularity) + 3.0 * se_pop);
}

#[test]
fn reconstruction_error_shrinks_with_rank() {
    let m = simulate_engagement_matrix(60, 40, 30, 6, 9).unwrap();
    let err = |k: usize| {
        let r = factorize(&m, k).unwrap().reconstruct();
        (r - m.entries()).norm()
    };
    let errs: Vec<f64> = (1..=6).map(err).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errs:?}");
    assert!(factorize(&m, 40).map(|f| (f.reconstruct() - m.entries()).norm() < 1e-8).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_form_a_distribution(rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 6), 3..10), k in 1usize..4) {
        let m = EngagementMatrix::from_rows(&rows).unwrap();
        let f = factorize(&m, k.min(rows.len())).unwrap();
        for i in 0..rows.len() {
            let probs = assignment_probabilities(&f.user_embedding(i), &f).unwrap();
            prop_assert!(probs.iter().all(|&x| x >= 0.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
