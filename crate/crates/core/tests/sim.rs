use proptest::prelude::*;

use pdespline::freq::{ConstraintMode, FreqSettings};
use pdespline::sim::{
    diffusion_solution, relative_metrics, run_study, simulate_dataset, Estimator, MetricsTable,
    StudyConfig, StudySetup,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_solves_the_diffusion_equation(
        x1 in -3.0..3.0f64,
        x2 in 0.01..0.99f64,
        t1 in 0.2..2.0f64,
        t2 in -2.0..2.0f64,
    ) {
        let th = [t1, t2];
        let u = |a: f64, b: f64| diffusion_solution(a, b, &th).unwrap();
        let h = 1e-5;
        let ux1 = (u(x1 + h, x2) - u(x1 - h, x2)) / (2.0 * h);
        let ux2 = (u(x1, x2 + h) - u(x1, x2 - h)) / (2.0 * h);
        let r = ux1 + t1 * ux2 + t2 * u(x1, x2);
        prop_assert!(r.abs() < 1e-5, "residual {r:e}");
        prop_assert!((u(x1, 0.0) - 1.0 / (1.0 + x1 * x1)).abs() < 1e-15);
    }

    #[test]
    fn rmse_decomposes_into_bias_and_spread(
        est in prop::collection::vec(0.1..10.0f64, 2..50),
        truth in 0.5..5.0f64,
    ) {
        let (bias, rmse, std) = relative_metrics(&est, truth);
        prop_assert!((rmse * rmse - ((bias / 100.0).powi(2) + std * std)).abs() < 1e-10 * (1.0 + rmse * rmse));
    }
}

#[test]
fn zero_theta1_is_rejected() {
    assert!(diffusion_solution(0.0, 0.5, &[0.0, 1.0]).is_err());
}

#[test]
fn datasets_are_seeded_per_replicate() {
    let config = StudyConfig { noise_sds: vec![0.01, 0.1], ..StudyConfig::default() };
    let setup = StudySetup::new(&config).unwrap();
    assert_eq!(setup.points.len(), 2500);
    let a = simulate_dataset(&config, &setup, 0, 3).unwrap();
    assert_eq!(a, simulate_dataset(&config, &setup, 0, 3).unwrap());
    assert_ne!(a, simulate_dataset(&config, &setup, 0, 4).unwrap());
    let resid: Vec<f64> = a.iter().zip(&setup.truth).map(|(z, u)| z - u).collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd / 0.01 - 1.0).abs() < 0.05, "{sd}");
    assert!(simulate_dataset(&config, &setup, 2, 0).is_err());
}

fn quick_study(noise: Vec<f64>, replicates: usize) -> StudyConfig {
    StudyConfig {
        noise_sds: noise,
        grid: [30, 20],
        n_basis: [14, 8],
        replicates,
        estimators: vec![Estimator::Freq(ConstraintMode::LeastSquares { kappa: 1e6 })],
        freq: FreqSettings::default(),
        ..StudyConfig::default()
    }
}

#[test]
fn spread_grows_with_noise() {
    let table = run_study(&quick_study(vec![0.005, 0.05], 8)).unwrap();
    for name in ["theta1", "theta2"] {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.parameter == name).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].r_std > rows[0].r_std, "{name}: {:?}", rows);
        assert!(rows.iter().all(|r| r.mpsd.is_none() && r.cp80.is_none()));
    }
}

#[test]
fn study_is_reproducible_and_writes_its_table() {
    let config = quick_study(vec![0.01], 3);
    let a = run_study(&config).unwrap();
    let b = run_study(&config).unwrap();
    assert_eq!(a.rows, b.rows);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    a.write(&path, &["seed=1".into()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# seed=1\n"));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some(MetricsTable::HEADER));
    assert_eq!(lines.count(), 3);
}

#[test]
fn a_study_needs_two_replicates() {
    assert!(run_study(&quick_study(vec![0.01], 1)).is_err());
}
