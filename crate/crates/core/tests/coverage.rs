use crokit::coverage::{coverage_loss, fit_regressor, theoretical_cc_loss, CoverageConfig, FeatureMap};
use crokit::data::MixtureEnv;
use crokit::uncertainty::Ellipsoid;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MC: usize = 20_000;

fn probes(seed: u64, n: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn oracle_sets_have_zero_loss(env_seed in 0u64..1000, probe_seed in 0u64..1000) {
        let env = MixtureEnv::default_env().perturbed(env_seed);
        let psi = probes(probe_seed, 10);
        let loss = theoretical_cc_loss(|p| env.oracle_set(p, 0.1, MC, 7), Some(&env), &psi, 0.1, MC, 11).unwrap();
        prop_assert!(loss <= 1e-3, "loss {loss}");
    }

    #[test]
    fn a_miscalibrated_probe_is_detected(env_seed in 0u64..1000, probe_seed in 0u64..1000, level in prop_oneof![0.5f64..0.8, 0.995f64..0.999]) {
        let env = MixtureEnv::default_env().perturbed(env_seed);
        let psi = probes(probe_seed, 2);
        let bad = psi[0].clone();
        let family = |p: &DVector<f64>| -> crokit::Result<Ellipsoid> {
            let eps = if p == &bad { 1.0 - level } else { 0.1 };
            env.oracle_set(p, eps, MC, 7)
        };
        let cov = env.conditional_coverage_prob(&bad, &family(&bad).unwrap(), MC, 11).unwrap();
        prop_assume!((cov - 0.9).abs() >= 0.1);
        let loss = theoretical_cc_loss(family, Some(&env), &psi, 0.1, MC, 11).unwrap();
        prop_assert!(loss >= 0.005, "loss {loss} with deviating coverage {cov}");
    }
}

#[test]
fn loss_needs_the_generating_distribution() {
    let psi = probes(0, 3);
    assert!(theoretical_cc_loss(|_| Ok(Ellipsoid::unit_ball(2)), None, &psi, 0.1, 100, 0).is_err());
}

#[test]
fn regressor_recovers_calibrated_and_miscalibrated_labels() {
    // labels drawn with a covariate-dependent coverage probability
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = CoverageConfig { features: FeatureMap::Identity, ..Default::default() };
    let psi: Vec<DVector<f64>> = (0..4000).map(|_| DVector::from_fn(1, |_, _| rng.random_range(-2.0..2.0))).collect();
    let flat: Vec<f64> = psi.iter().map(|_| f64::from(rng.random_bool(0.9))).collect();
    let sloped: Vec<f64> = psi
        .iter()
        .map(|p| f64::from(rng.random_bool(1.0 / (1.0 + (-(1.0 + 1.5 * p[0])).exp()))))
        .collect();
    let r_flat = fit_regressor(&psi, &flat, &cfg, None).unwrap();
    let r_sloped = fit_regressor(&psi, &sloped, &cfg, None).unwrap();
    let l_flat = coverage_loss(&r_flat, &psi, 0.1).unwrap();
    let l_sloped = coverage_loss(&r_sloped, &psi, 0.1).unwrap();
    assert!(l_flat < 1e-3, "{l_flat}");
    assert!(l_sloped > 0.02, "{l_sloped}");
    let slope = r_sloped.phi.values()[0];
    assert!((slope - 1.5).abs() < 0.3, "slope {slope}");
}

#[test]
fn quadratic_features_capture_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let psi: Vec<DVector<f64>> = (0..4000).map(|_| DVector::from_fn(1, |_, _| rng.random_range(-2.0..2.0))).collect();
    // covered in the middle, missed at both ends
    let y: Vec<f64> = psi
        .iter()
        .map(|p| f64::from(rng.random_bool(1.0 / (1.0 + (-(2.0 - 1.5 * p[0] * p[0])).exp()))))
        .collect();
    let fit = |features: FeatureMap| {
        let cfg = CoverageConfig { features, ..Default::default() };
        let x: Vec<DVector<f64>> = psi.iter().map(|p| features.apply(p)).collect();
        let r = fit_regressor(&x, &y, &cfg, None).unwrap();
        let edge = r.predict(&features.apply(&DVector::from_element(1, 1.9))).unwrap();
        let mid = r.predict(&features.apply(&DVector::from_element(1, 0.0))).unwrap();
        mid - edge
    };
    assert!(fit(FeatureMap::Identity).abs() < 0.1);
    assert!(fit(FeatureMap::Quadratic) > 0.5);
}
