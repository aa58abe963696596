//! Solve the worst-case portfolio problem for one ellipsoid and check the
//! closed-form worst case against sampled points of the set.

use crokit::solver::{solve_cro, worst_case_objective, RobustProblem};
use crokit::uncertainty::Ellipsoid;
use nalgebra::{DMatrix, DVector};

fn main() -> crokit::Result<()> {
    let mu = DVector::from_vec(vec![0.08, 0.12, 0.05]);
    let sigma = DMatrix::from_row_slice(3, 3, &[0.04, 0.01, 0.0, 0.01, 0.09, 0.02, 0.0, 0.02, 0.01]);
    let set = Ellipsoid::from_shape(mu, &sigma, 2.0)?;
    let problem = RobustProblem::portfolio(3);

    let sol = solve_cro(&problem, &set, &problem.uniform_point(), 50)?;
    println!("weights   {:.4?}", sol.x.as_slice());
    println!("objective {:.6} after {} steps (residual {:.1e})", sol.objective, sol.iterations, sol.residual);

    let (worst, xi) = worst_case_objective(&set, &sol.x)?;
    println!("worst-case cost {worst:.6} at return {:.4?}", xi.as_slice());

    // boundary points never beat the closed form
    let mut sampled = f64::NEG_INFINITY;
    for k in 0..2000 {
        let t = k as f64 * 0.01;
        let u = DVector::from_vec(vec![t.cos(), t.sin() * (0.3 * t).cos(), t.sin() * (0.3 * t).sin()]);
        sampled = sampled.max(-set.boundary_point(&u).dot(&sol.x));
    }
    println!("largest sampled cost {sampled:.6}");
    Ok(())
}
