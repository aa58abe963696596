use crokit::baselines::{calibrate_conformal, conformal_set, fit_point_predictor, FitConfig, ShapeRule};
use crokit::data::{MixtureEnv, Split};

/// Split-conformal sets calibrated on 400 points cover about 90% of fresh
/// test points on average over resamples.
#[test]
fn global_conformal_sets_are_valid() {
    let env = MixtureEnv::default_env();
    let mut coverages = Vec::new();
    for k in 0..50u64 {
        let data = env.sample(2000, 1000 + k).unwrap();
        let (tr, cal, te) = (data.subset(Split::Train), data.subset(Split::Validation), data.subset(Split::Test));
        assert_eq!(cal.len(), 400);
        let cfg = FitConfig { seed: k, epochs: 50, ..Default::default() };
        let pred = fit_point_predictor(&tr, &cfg).unwrap();
        let c = calibrate_conformal(&pred, ShapeRule::Global, &tr, &cal, 0.1).unwrap();
        let hits = te
            .psi
            .iter()
            .zip(&te.xi)
            .filter(|(p, x)| conformal_set(&c, p).unwrap().contains(x).unwrap())
            .count();
        coverages.push(hits as f64 / te.len() as f64);
    }
    let mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
    println!("mean coverage {mean:.4}");
    assert!((0.88..=0.94).contains(&mean), "mean coverage {mean}");
}

#[test]
fn local_shapes_keep_marginal_validity() {
    let env = MixtureEnv::default_env();
    let mut total = 0.0;
    for k in 0..10u64 {
        let data = env.sample(2000, 2000 + k).unwrap();
        let (tr, cal, te) = (data.subset(Split::Train), data.subset(Split::Validation), data.subset(Split::Test));
        let pred = fit_point_predictor(&tr, &FitConfig { seed: k, epochs: 50, ..Default::default() }).unwrap();
        let c = calibrate_conformal(&pred, ShapeRule::default_local(tr.len()), &tr, &cal, 0.1).unwrap();
        let hits = te
            .psi
            .iter()
            .zip(&te.xi)
            .filter(|(p, x)| conformal_set(&c, p).unwrap().contains(x).unwrap())
            .count();
        total += hits as f64 / te.len() as f64;
    }
    let mean = total / 10.0;
    assert!((0.86..=0.95).contains(&mean), "mean coverage {mean}");
}
