mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pdespline::bayes::{
    gamma_conditional, hpd_interval, kappa_conditional, run_chain, run_gibbs, tau_conditional,
    ChainInit, ChainSettings, Hyperparams, MarginalModel, ThetaPrior,
};
use pdespline::freq::{solve_ridge, FreqProblem};

use common::{diffusion_problem, random_vec, THETA};

fn small() -> FreqProblem {
    diffusion_problem(6, 5, [15, 12], 0.01, 303)
}

fn spread(model: &MarginalModel, theta: &[f64], gamma: f64, tau: f64, seed: u64) -> f64 {
    let kappa = model.kappa();
    let mean = model.coefficient_mean(theta, gamma, tau, kappa).unwrap();
    let marginal = model.log_marginal_posterior(theta, gamma, tau, kappa);
    let d: Vec<f64> = (0..6)
        .map(|k| {
            let c: Vec<f64> = mean
                .iter()
                .zip(random_vec(mean.len(), 0.02, seed + k))
                .map(|(m, e)| m + e)
                .collect();
            model.log_joint(&c, theta, gamma, tau, kappa).unwrap()
                - model.log_conditional_coefficients(&c, theta, gamma, tau, kappa).unwrap()
                - marginal
        })
        .collect();
    d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn marginalization_identity(
        t1 in 0.3..0.8f64,
        t2 in 1.0..2.0f64,
        lg in 1.0..5.0f64,
        lt in 3.0..5.0f64,
        seed in 0u64..10_000,
    ) {
        let p = small();
        let free = MarginalModel::new(&p, None, Hyperparams::default()).unwrap();
        let soft = MarginalModel::new(&p, Some(1e4), Hyperparams::default()).unwrap();
        let (g, t) = (10f64.powf(lg), 10f64.powf(lt));
        prop_assert!(spread(&free, &[t1, t2], g, t, seed) < 1e-8);
        prop_assert!(spread(&soft, &[t1, t2], g, t, seed) < 1e-8);
    }

    #[test]
    fn hpd_matches_quantiles_for_normal_draws(mu in -5.0..5.0f64, sd in 0.1..3.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mu, sd).unwrap();
        let draws: Vec<f64> = (0..200_000).map(|_| normal.sample(&mut rng)).collect();
        let (lo, hi) = hpd_interval(&draws, 0.8).unwrap();
        // the 80% HPD of a normal is its 10%–90% quantile range, μ ± 1.2816 σ
        let z = 1.2815516;
        prop_assert!((lo - (mu - z * sd)).abs() < 0.05 * sd, "lo {lo} vs {}", mu - z * sd);
        prop_assert!((hi - (mu + z * sd)).abs() < 0.05 * sd, "hi {hi} vs {}", mu + z * sd);
    }

    #[test]
    fn hpd_is_the_shortest_window(xs in prop::collection::vec(-10.0..10.0f64, 100..300), level in 0.5..0.99f64) {
        let (lo, hi) = hpd_interval(&xs, level).unwrap();
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        let m = (level * s.len() as f64).ceil() as usize;
        prop_assert!(s.iter().filter(|&&x| lo <= x && x <= hi).count() >= m);
        for i in 0..=(s.len() - m) {
            prop_assert!(hi - lo <= s[i + m - 1] - s[i] + 1e-12);
        }
    }
}

#[test]
fn hpd_needs_enough_draws() {
    assert!(hpd_interval(&[0.0; 99], 0.9).is_err());
    assert!(hpd_interval(&[0.0; 100], 1.0).is_err());
}

#[test]
fn conditional_shapes() {
    let p = small();
    let hyper = Hyperparams::default();
    let q = p.assembler().assemble(&THETA).unwrap();
    let c = solve_ridge(p.design(), p.zeta(), &q, 1e4, 1e3).unwrap();
    let (st, rt) = tau_conditional(p.rss(&c), p.n_obs(), &hyper);
    assert_eq!(st, p.n_obs() as f64 / 2.0 + hyper.a_tau);
    assert!((rt - (p.rss(&c) / 2.0 + hyper.b_tau)).abs() < 1e-15);
    let (sg, rg) = gamma_conditional(&c, &q, &hyper).unwrap();
    assert_eq!(sg, q.n() as f64 / 2.0 + hyper.a_gamma);
    assert!((rg - (q.value(&c).unwrap() / 2.0 + hyper.b_gamma)).abs() < 1e-12 * rg);
    let cons = p.constraints().unwrap();
    let (sk, _) = kappa_conditional(&c, cons, &hyper);
    assert_eq!(sk, cons.len() as f64 / 2.0 + hyper.a_kappa);
}

/// Batch-means Monte Carlo standard error of the mean.
fn mcse(x: &[f64]) -> f64 {
    let batches = 25;
    let len = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| x[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let v = means.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (v / batches as f64).sqrt()
}

#[test]
fn marginal_sampler_agrees_with_full_gibbs_at_fixed_theta() {
    let p = small();
    let hyper = Hyperparams {
        theta_prior: vec![ThetaPrior::Fixed(THETA[0]), ThetaPrior::Fixed(THETA[1])],
        ..Hyperparams::default()
    };
    let model = MarginalModel::new(&p, None, hyper).unwrap();
    let (tau0, gamma0) = (1e4, 1e3);
    let gibbs = run_gibbs(&model, &THETA, 22_000, 2_000, (tau0, gamma0), 17).unwrap();
    let settings = ChainSettings {
        iterations: 22_000,
        burn_in: 2_000,
        init: ChainInit::Given { theta: THETA.to_vec(), gamma: gamma0, tau: tau0 },
        ..ChainSettings::default()
    };
    let chain = run_chain(&model, &p, &settings, &THETA, 18).unwrap();
    let ln_tau_g: Vec<f64> = gibbs.iter().map(|d| d.0.ln()).collect();
    let ln_tau_m: Vec<f64> = chain.column_by_name("tau").unwrap().iter().map(|t| t.ln()).collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let se = (mcse(&ln_tau_g).powi(2) + mcse(&ln_tau_m).powi(2)).sqrt();
    let diff = (mean(&ln_tau_g) - mean(&ln_tau_m)).abs();
    assert!(diff < 3.0 * se, "ln τ means differ by {diff:e}, 3·MCSE {:e}", 3.0 * se);
}

#[test]
fn chain_invariants_and_seeding() {
    let p = small();
    let model = MarginalModel::new(&p, Some(1e4), Hyperparams::default()).unwrap();
    let settings = ChainSettings { iterations: 1_500, burn_in: 500, ..ChainSettings::default() };
    let a = run_chain(&model, &p, &settings, &[1.0, 1.0], 3).unwrap();
    let b = run_chain(&model, &p, &settings, &[1.0, 1.0], 3).unwrap();
    let c = run_chain(&model, &p, &settings, &[1.0, 1.0], 4).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_ne!(a.draws, c.draws);
    assert_eq!(a.draws.len(), 1_000);
    for name in ["gamma", "tau"] {
        assert!(a.column_by_name(name).unwrap().iter().all(|&v| v > 0.0));
    }
    assert!(a.acceptance.iter().all(|(_, r)| (0.0..=1.0).contains(r)));
    let s = a.summary().unwrap();
    for k in 0..2 {
        assert!(s.hpd80[k].0 >= s.hpd95[k].0 && s.hpd80[k].1 <= s.hpd95[k].1);
    }
}

#[test]
fn fixed_theta_components_do_not_move() {
    let p = small();
    let hyper = Hyperparams {
        theta_prior: vec![ThetaPrior::Fixed(0.5), ThetaPrior::Normal { mean: 1.5, sd: 1.0 }],
        ..Hyperparams::default()
    };
    let model = MarginalModel::new(&p, Some(1e4), hyper).unwrap();
    let settings = ChainSettings { iterations: 800, burn_in: 300, ..ChainSettings::default() };
    let chain = run_chain(&model, &p, &settings, &[0.5, 1.0], 8).unwrap();
    assert!(chain.column(0).iter().all(|&v| v == 0.5));
}

#[test]
fn marginal_posterior_is_minus_infinity_off_support() {
    let p = small();
    let model = MarginalModel::new(&p, None, Hyperparams::default()).unwrap();
    assert_eq!(model.log_marginal_posterior(&THETA, -1.0, 1e4, None), f64::NEG_INFINITY);
    assert_eq!(model.log_marginal_posterior(&THETA, 1e3, 0.0, None), f64::NEG_INFINITY);
    assert!(model.log_marginal_posterior(&THETA, 1e3, 1e4, None).is_finite());
}
