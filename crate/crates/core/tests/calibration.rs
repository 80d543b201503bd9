use feedsim::calibration::*;
use feedsim::simulator::*;

fn low_noise_panel(seed: u64) -> Panel {
    let mut c = SimConfig::new(100_000, default_params().with_mu(0.0).unwrap(), seed);
    c.posts_per_view_unit = 2_000.0;
    simulate_experiment(&c).unwrap().panel
}

#[test]
fn fits_self_generated_moments() {
    let panel = low_noise_panel(3);
    let fit = calibrate(&panel, 0.16, 2_000.0, &CalibrationOptions::default()).unwrap();
    assert!(fit.converged);
    let err = fit.fitted.max_rel_error(&fit.empirical);
    assert!(err < 0.01, "max relative moment error {err}");
    // Only ratios are identified; compare them with the generating ones.
    let w = fit.weights;
    assert!((w.beta / w.alpha - 2.0).abs() < 0.05, "{w:?}");
    assert!((w.eta / w.alpha - 1.0).abs() < 0.05, "{w:?}");
    assert!(fit.iterations >= 80 && fit.iterations <= 8_000);
}

#[test]
fn quadrature_agrees_with_monte_carlo() {
    let panel = low_noise_panel(4);
    let setup = MomentSetup::from_panel(&panel, 0.16).unwrap();
    let w = Weights::of(&default_params());
    let quad = simulated_moments(&w, &setup).unwrap();
    let mc = simulated_moments_mc(&w, &setup, 2_000_000, 9).unwrap();
    let err = quad.max_rel_error(&mc);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn objective_is_flat_along_common_scaling() {
    let panel = low_noise_panel(5);
    let setup = MomentSetup::from_panel(&panel, 0.16).unwrap();
    let fit = calibrate(&panel, 0.16, 2_000.0, &CalibrationOptions::default()).unwrap();
    let profile = scale_profile(&fit, &setup, &[0.25, 1.0, 4.0]).unwrap();
    for (_, v) in &profile {
        assert!((v - profile[1].1).abs() <= 1e-9 * profile[1].1.max(1e-12));
    }
}

#[test]
fn report_lists_every_moment() {
    let panel = low_noise_panel(6);
    let fit = calibrate(&panel, 0.16, 2_000.0, &CalibrationOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &fit, &[]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(&REPORT_HEADER.join(",")));
    for name in MOMENT_NAMES {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn benchmark_functions() {
    let sphere = nelder_mead(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0, 0.5], NelderMeadOptions::default()).unwrap();
    assert!(sphere.x.iter().all(|v| v.abs() < 1e-6), "{:?}", sphere.x);
    let rosen = nelder_mead(
        |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
        &[-1.2, 1.0],
        NelderMeadOptions { tolerance: 1e-14, ..Default::default() },
    )
    .unwrap();
    assert!((rosen.x[0] - 1.0).abs() < 1e-4 && (rosen.x[1] - 1.0).abs() < 1e-4, "{:?}", rosen.x);
}
