//! Fit the coverage regressor to membership labels and compare the
//! empirical coverage loss with the oracle one for two set families.

use crokit::coverage::{coverage_loss, fit_regressor, theoretical_cc_loss, CoverageConfig, CoverageLabels, FeatureMap};
use crokit::data::{MixtureEnv, Split};
use crokit::evaluation::{OracleSets, SetFamily};
use crokit::uncertainty::Ellipsoid;
use nalgebra::DVector;

fn main() -> crokit::Result<()> {
    let env = MixtureEnv::default_env();
    let data = env.sample(1500, 3)?.subset(Split::Train);
    let eps = 0.1;
    let oracle = OracleSets { env: &env, epsilon: eps, n_mc: 2000, seed: 1 };
    // the same ellipsoid for every covariate
    let fixed = |_: &DVector<f64>| -> crokit::Result<Ellipsoid> {
        Ellipsoid::new(DVector::from_vec(vec![0.4, 0.2]), nalgebra::DMatrix::identity(2, 2) * 0.8, 2.0)
    };
    let cfg = CoverageConfig { features: FeatureMap::Quadratic, ..Default::default() };

    for (name, family) in [("oracle", &oracle as &dyn SetFamily), ("fixed", &fixed as &dyn SetFamily)] {
        let sets: Vec<Ellipsoid> = data.psi.iter().map(|p| family.set(p)).collect::<crokit::Result<_>>()?;
        let labels = CoverageLabels::compute(&sets, &data.xi, 50.0)?;
        let feats: Vec<DVector<f64>> = data.psi.iter().map(|p| cfg.features.apply(p)).collect();
        let reg = fit_regressor(&feats, &labels.soft, &cfg, None)?;
        let empirical = coverage_loss(&reg, &feats, eps)?;
        let probe: Vec<DVector<f64>> = data.psi.iter().take(40).cloned().collect();
        let oracle_loss = theoretical_cc_loss(|p| family.set(p), Some(&env), &probe, eps, 2000, 5)?;
        let covered = labels.hard.iter().filter(|&&b| b).count() as f64 / labels.hard.len() as f64;
        println!("{name:>6}: marginal {covered:.3}  regressor loss {empirical:.5}  oracle loss {oracle_loss:.5}");
    }
    Ok(())
}
