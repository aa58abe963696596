//! The three estimate-then-optimize baselines on one synthetic draw.

use crokit::baselines::{calibrate_conformal, fit_gaussian_eto, fit_point_predictor, FitConfig, ShapeRule};
use crokit::data::{MixtureEnv, Split};
use crokit::evaluation::{evaluate, EvalConfig, GaussianSets};

fn main() -> crokit::Result<()> {
    let env = MixtureEnv::default_env().perturbed(1);
    let data = env.sample(2000, 1)?;
    let (train, val, test) = (data.subset(Split::Train), data.subset(Split::Validation), data.subset(Split::Test));
    let fit = FitConfig::default();
    let eval = EvalConfig { conditional_points: 50, ..Default::default() };

    let gauss = fit_gaussian_eto(&train, &fit)?;
    let es = evaluate("eto-es", &GaussianSets { model: &gauss, epsilon: 0.1 }, &test, &eval, Some(&env))?;

    let point = fit_point_predictor(&train, &fit)?;
    let cs = calibrate_conformal(&point, ShapeRule::Global, &train, &val, 0.1)?;
    let cs = evaluate("eto-cs", &cs, &test, &eval, Some(&env))?;
    let ccs = calibrate_conformal(&point, ShapeRule::default_local(train.len()), &train, &val, 0.1)?;
    let ccs = evaluate("eto-ccs", &ccs, &test, &eval, Some(&env))?;

    for r in [es, cs, ccs] {
        println!("{:<8} cvar {:.4}  coverage {:.3}", r.method, r.cvar, r.marginal_coverage);
    }
    Ok(())
}
