//! Train the task-only and the dual-objective set predictors on one
//! synthetic draw and evaluate both on the test split.

use crokit::data::{MixtureEnv, Split};
use crokit::evaluation::{evaluate, EvalConfig, LearnedSets};
use crokit::experiment::default_train_config;
use crokit::nn::SetPredictor;
use crokit::training::{initial_theta, select_model, train, TrainMethod};

fn main() -> crokit::Result<()> {
    let env = MixtureEnv::default_env().perturbed(2);
    let data = env.sample(2000, 2)?;
    let (tr, va, te) = (data.subset(Split::Train), data.subset(Split::Validation), data.subset(Split::Test));
    let cfg = default_train_config();
    let eval = EvalConfig { conditional_points: 50, ..Default::default() };

    for (name, method, select_eps) in [("ecro", TrainMethod::Ecro, 1.0), ("dts", TrainMethod::Dual, cfg.epsilon)] {
        let predictor = SetPredictor::new(cfg.predictor_config(2, 2));
        let theta0 = initial_theta(&predictor, &tr, &cfg)?;
        let out = train(method, &predictor, theta0, &tr, &va, &cfg, None)?;
        let (best, flagged) = select_model(&out.history, select_eps)?;
        let theta = best.theta.clone().unwrap_or(out.theta);
        let r = evaluate(name, &LearnedSets { predictor: &predictor, theta: &theta }, &te, &eval, Some(&env))?;
        println!(
            "{name:<5} epochs {:>3} (kept {}{}) test cvar {:.4} coverage {:.3}",
            out.history.len(),
            best.epoch,
            if flagged { ", flagged" } else { "" },
            r.cvar,
            r.marginal_coverage
        );
    }
    Ok(())
}
