//! CVaR of a cost sample and the subgradient weights that attain it.

use crokit::risk::{cvar, cvar_subgradient};

fn main() -> crokit::Result<()> {
    let costs = [0.3, -0.1, 1.2, 0.05, 0.8, -0.4, 2.0, 0.1, 0.0, 0.6];
    for alpha in [0.0, 0.5, 0.9] {
        let value = cvar(&costs, alpha)?;
        let w = cvar_subgradient(&costs, alpha)?;
        let dot: f64 = w.iter().zip(&costs).map(|(a, b)| a * b).sum();
        println!("alpha {alpha:.2}: cvar {value:.4}  weights {w:.3?}  w.c = {dot:.4}");
    }
    Ok(())
}
