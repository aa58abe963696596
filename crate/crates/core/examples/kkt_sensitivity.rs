//! Sensitivity of the robust decision to the set center, checked against
//! central differences of the solver.

use crokit::implicit::kkt_sensitivity;
use crokit::solver::{solve_cro, RobustProblem};
use crokit::uncertainty::Ellipsoid;
use nalgebra::{DMatrix, DVector};

fn solve(mu: &DVector<f64>, l: &DMatrix<f64>) -> crokit::Result<DVector<f64>> {
    let problem = RobustProblem::portfolio(mu.len());
    let set = Ellipsoid::new(mu.clone(), l.clone(), 1.0)?;
    Ok(solve_cro(&problem, &set, &problem.uniform_point(), 200)?.x)
}

fn main() -> crokit::Result<()> {
    let mu = DVector::from_vec(vec![0.10, 0.12, 0.09]);
    let l = DMatrix::from_row_slice(3, 3, &[0.20, 0.0, 0.0, 0.05, 0.25, 0.0, 0.02, 0.04, 0.18]);
    let problem = RobustProblem::portfolio(3);
    let set = Ellipsoid::new(mu.clone(), l.clone(), 1.0)?;
    let point = solve_cro(&problem, &set, &problem.uniform_point(), 200)?;
    let sens = kkt_sensitivity(&problem, &set, &point)?;

    let h = 1e-6;
    let mut fd = DMatrix::zeros(3, 3);
    for j in 0..3 {
        let (mut up, mut dn) = (mu.clone(), mu.clone());
        up[j] += h;
        dn[j] -= h;
        fd.set_column(j, &((solve(&up, &l)? - solve(&dn, &l)?) / (2.0 * h)));
    }
    println!("x* = {:.4?}", point.x.as_slice());
    println!("dx/dmu (implicit){:.5}", sens.dx_dmu);
    println!("dx/dmu (finite differences){fd:.5}");
    println!("max abs difference {:.2e}", (&sens.dx_dmu - &fd).amax());
    Ok(())
}
