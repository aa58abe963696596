//! Task-loss training with five warm-started trust-region steps per solve
//! against solving every problem to convergence from scratch.

use std::time::Instant;

use crokit::data::{MixtureEnv, Split};
use crokit::experiment::default_train_config;
use crokit::nn::SetPredictor;
use crokit::training::{initial_theta, train, TrainConfig, TrainMethod};

fn run(cfg: &TrainConfig, tr: &crokit::data::Dataset, va: &crokit::data::Dataset) -> crokit::Result<(f64, f64)> {
    let predictor = SetPredictor::new(cfg.predictor_config(2, 2));
    let theta0 = initial_theta(&predictor, tr, cfg)?;
    let t0 = Instant::now();
    let out = train(TrainMethod::Ecro, &predictor, theta0, tr, va, cfg, None)?;
    Ok((out.history.last().map_or(f64::NAN, |c| c.loss), t0.elapsed().as_secs_f64()))
}

fn main() -> crokit::Result<()> {
    let data = MixtureEnv::default_env().sample(2000, 0)?;
    let (tr, va) = (data.subset(Split::Train), data.subset(Split::Validation));
    let base = TrainConfig { max_epochs: 10, patience: 100, validate: false, ..default_train_config() };
    let warm = TrainConfig { tro_steps: 5, warm_start: true, ..base.clone() };
    let full = TrainConfig { tro_steps: 200, warm_start: false, ..base };
    let (lw, tw) = run(&warm, &tr, &va)?;
    let (lf, tf) = run(&full, &tr, &va)?;
    println!("5 steps, warm: loss {lw:.5} in {tw:.2}s");
    println!("200 steps, cold: loss {lf:.5} in {tf:.2}s");
    println!("relative gap {:.2}%, time ratio {:.2}", 100.0 * (lw - lf).abs() / lf.abs(), tw / tf);
    Ok(())
}
