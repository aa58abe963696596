//! Forward and backward pass of the set predictor network.

use crokit::nn::{SetPredictor, SetPredictorConfig, SetPredictorGrad};
use crokit::uncertainty::build_ellipsoid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crokit::Result<()> {
    let predictor = SetPredictor::new(SetPredictorConfig::new(2, 3));
    let theta = predictor.init(&mut ChaCha8Rng::seed_from_u64(7));
    println!("{} parameters", theta.len());

    let psi = [0.4, -1.1];
    let (out, tape) = predictor.forward(&theta, &psi)?;
    let set = build_ellipsoid(&out)?;
    println!("center {:.4?}  radius {:.4}", set.mu().as_slice(), set.r());

    // gradient of the first center coordinate
    let mut seed = SetPredictorGrad::zeros(3);
    seed.mu[0] = 1.0;
    let mut grad = vec![0.0; theta.len()];
    predictor.backward_into(&tape, &seed, &mut grad)?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("|d mu_0 / d theta| = {norm:.4}");
    Ok(())
}
