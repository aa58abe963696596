//! Robust portfolio solver.
//!
//! With cost `c(x, ξ) = −ξᵀx` and an unbounded uncertainty domain the
//! min-max problem `min_{x∈X} max_{ξ∈U} c(x, ξ)` over the simplex collapses
//! to
//!
//! ```text
//!   min_{x ∈ Δ}  f(x) = −μᵀx + sqrt(xᵀ Σ x)
//! ```
//!
//! since the conjugate term forces the dual direction `v` to equal `x`.
//! [`solve_cro`] runs a trust-region method on this problem: each iteration
//! minimizes the exact second-order model over the simplex intersected with
//! an ∞-norm box, accepts or rejects by the usual reduction ratio, and
//! updates the radius. A rejected step is not wasted: `f` is convex, so the
//! best point on the segment is found by golden-section search and taken
//! if it improves. This matters for nearly singular `Σ`, where `f` has a
//! near-kink that quadratic models overshoot. Multipliers for `x ≥ 0` and `1ᵀx = 1` are recovered
//! from the stationarity equation at the returned point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::uncertainty::Ellipsoid;

/// Coordinates at or below this value count as active bounds.
pub const ACTIVE_TOL: f64 = 1e-8;
/// Tolerance on the warm start's distance from the simplex.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// A solve is reported as converged once the KKT residual is below this.
pub const CONVERGED_TOL: f64 = 1e-9;

const STOP_TOL: f64 = 1e-12;
const INITIAL_RADIUS: f64 = 1.0;
const SHRINK: f64 = 0.25;
const GROW: f64 = 2.0;
const ACCEPT_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibleSet {
    /// `{x : 1ᵀx = 1, x ≥ 0}`.
    Simplex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostModel {
    /// `c(x, ξ) = −ξᵀx`.
    NegativeReturn,
}

/// Robust decision problem over a contextual set.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustProblem {
    pub dim: usize,
    pub feasible: FeasibleSet,
    pub cost: CostModel,
    /// Radius of the ball containing the uncertainty domain.
    pub radius: f64,
}

impl RobustProblem {
    pub fn portfolio(dim: usize) -> Self {
        Self {
            dim,
            feasible: FeasibleSet::Simplex,
            cost: CostModel::NegativeReturn,
            radius: f64::INFINITY,
        }
    }

    fn check(&self, set: &Ellipsoid) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::input("problem dimension must be positive"));
        }
        if set.dim() != self.dim {
            return Err(Error::input(format!(
                "set has dimension {} but the problem has {}",
                set.dim(),
                self.dim
            )));
        }
        if self.radius.is_finite() {
            return Err(Error::input(
                "a bounded uncertainty domain is not supported for the negative-return cost",
            ));
        }
        Ok(())
    }

    /// Checks simplex feasibility and returns a cleaned copy (tiny negative
    /// entries clipped, renormalized).
    pub fn feasible_point(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "point has dimension {} but the problem has {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("point has non-finite entries"));
        }
        let sum: f64 = x.sum();
        let min = x.min();
        if (sum - 1.0).abs() > FEASIBILITY_TOL || min < -FEASIBILITY_TOL {
            return Err(Error::input(format!(
                "point is not on the simplex (sum {sum:.3e}, min {min:.3e})"
            )));
        }
        let mut y = x.map(|v| v.max(0.0));
        let s = y.sum();
        y /= s;
        Ok(y)
    }

    pub fn uniform_point(&self) -> DVector<f64> {
        DVector::from_element(self.dim, 1.0 / self.dim as f64)
    }
}

/// Center and shape matrix cached for repeated objective evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `sqrt(r)·L`, so that `Σ = factor·factorᵀ`.
    factor: DMatrix<f64>,
}

impl Geometry {
    pub fn new(set: &Ellipsoid) -> Result<Self> {
        if set.r() <= 0.0 {
            return Err(Error::numeric("shape matrix is singular (zero scale)"));
        }
        Ok(Self {
            mu: set.mu().clone(),
            sigma: set.sigma(),
            factor: set.l() * set.r().sqrt(),
        })
    }

    /// `(f, ∇f, ∇²f, Σx, s)` at `x`.
    pub fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>, DVector<f64>, f64)> {
        let sx = &self.sigma * x;
        let q = x.dot(&sx);
        if !(q > 0.0) {
            return Err(Error::numeric("xᵀΣx vanished; shape matrix is singular"));
        }
        let s = q.sqrt();
        let f = -self.mu.dot(x) + s;
        let g = &sx / s - &self.mu;
        Ok((f, g, self.hessian(x, s), sx, s))
    }

    /// `Σ/s − (Σx)(Σx)ᵀ/s³` assembled as `B·Bᵀ/s` with `B = factor·Q` and
    /// `Q` an orthonormal basis of the complement of `factorᵀx`, which
    /// keeps it positive semidefinite when `Σ` is badly scaled.
    fn hessian(&self, x: &DVector<f64>, s: f64) -> DMatrix<f64> {
        let m = x.len();
        let mut u = self.factor.tr_mul(x) / s;
        // Householder reflection sending u to ±e₁
        let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
        u[0] += sign;
        let norm_sq = u.norm_squared();
        let reflect = DMatrix::identity(m, m) - &u * u.transpose() * (2.0 / norm_sq);
        let b = &self.factor * reflect.columns(1, m - 1);
        &b * b.transpose() / s
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let q = x.dot(&(&self.sigma * x)).max(0.0);
        -self.mu.dot(x) + q.sqrt()
    }
}

/// `max_{ξ∈U} −ξᵀx = −μᵀx + sqrt(xᵀΣx)` and the attaining realization
/// `μ − Σx / sqrt(xᵀΣx)`.
pub fn worst_case_objective(set: &Ellipsoid, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if x.len() != set.dim() {
        return Err(Error::input("decision dimension does not match the set"));
    }
    let sx = set.sigma() * x;
    let s = x.dot(&sx).max(0.0).sqrt();
    let value = -set.mu().dot(x) + s;
    if s == 0.0 {
        return Ok((value, set.mu().clone()));
    }
    Ok((value, set.mu() - sx / s))
}

/// Primal-dual point of the reformulated robust problem.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub x: DVector<f64>,
    /// Dual direction; equals `x` for the negative-return cost.
    pub v: DVector<f64>,
    /// Multipliers of `−x ≤ 0`.
    pub lambda: DVector<f64>,
    /// Multiplier of `1ᵀx = 1`.
    pub nu: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

/// Least-squares multipliers at `x` given the objective gradient.
/// Minimizer of a convex `φ` on `[0, 1]` by golden-section search.
fn segment_minimum(phi: impl Fn(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (0.0, 1.0);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (phi(c), phi(d));
    while b - a > 1e-12 {
        if fc <= fd {
            (b, d, fd) = (d, c, fc);
            c = b - INV_PHI * (b - a);
            fc = phi(c);
        } else {
            (a, c, fc) = (c, d, fd);
            d = a + INV_PHI * (b - a);
            fd = phi(d);
        }
    }
    let t = 0.5 * (a + b);
    (t, phi(t))
}

fn recover_multipliers(x: &DVector<f64>, g: &DVector<f64>) -> (DVector<f64>, f64) {
    let m = x.len();
    let free: Vec<usize> = (0..m).filter(|&i| x[i] > ACTIVE_TOL).collect();
    let nu = if free.is_empty() {
        -g.mean()
    } else {
        -free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
    };
    let lambda = DVector::from_fn(m, |i, _| if x[i] > ACTIVE_TOL { 0.0 } else { (g[i] + nu).max(0.0) });
    (lambda, nu)
}

fn residual_at(x: &DVector<f64>, g: &DVector<f64>, lambda: &DVector<f64>, nu: f64) -> f64 {
    let mut r: f64 = (x.sum() - 1.0).abs();
    for i in 0..x.len() {
        r = r
            .max((g[i] - lambda[i] + nu).abs())
            .max((lambda[i] * x[i]).abs())
            .max((-x[i]).max(0.0))
            .max((-lambda[i]).max(0.0));
    }
    r
}

/// Max-norm of the stacked KKT system (stationarity, complementarity,
/// primal and dual feasibility) at `point`.
pub fn kkt_residual(problem: &RobustProblem, set: &Ellipsoid, point: &KktPoint) -> Result<f64> {
    problem.check(set)?;
    if point.x.len() != problem.dim || point.lambda.len() != problem.dim || point.nu.len() != 1 {
        return Err(Error::input("KKT point dimensions do not match the problem"));
    }
    let geo = Geometry::new(set)?;
    let (_, g, _, _, _) = geo.derivatives(&point.x)?;
    Ok(residual_at(&point.x, &g, &point.lambda, point.nu[0]))
}

/// Runs at most `max_steps` trust-region iterations from `warm_start`.
pub fn solve_cro(problem: &RobustProblem, set: &Ellipsoid, warm_start: &DVector<f64>, max_steps: usize) -> Result<KktPoint> {
    problem.check(set)?;
    if max_steps == 0 {
        return Err(Error::input("the trust-region budget must be at least one step"));
    }
    let mut x = problem.feasible_point(warm_start)?;
    let geo = Geometry::new(set)?;
    let mut radius = INITIAL_RADIUS;
    let mut iterations = 0;
    let (mut f, mut g, mut h, _, _) = geo.derivatives(&x)?;
    while iterations < max_steps {
        let (lambda, nu) = recover_multipliers(&x, &g);
        if residual_at(&x, &g, &lambda, nu) <= STOP_TOL {
            break;
        }
        iterations += 1;
        let lo = x.map(|v| (v - radius).max(0.0));
        let hi = x.map(|v| (v + radius).min(1.0));
        let y = match box_simplex_qp(&h, &g, &x, &lo, &hi) {
            Ok(y) => y,
            // degenerate working sets can cycle; a projected-gradient point
            // still gives the decrease the acceptance test needs
            Err(_) => projected_gradient_qp(&h, &g, &x, &lo, &hi),
        };
        let d = &y - &x;
        if d.amax() == 0.0 {
            if radius < 1e-14 {
                break;
            }
            radius *= SHRINK;
            continue;
        }
        let predicted = -(g.dot(&d) + 0.5 * d.dot(&(&h * &d)));
        if predicted.abs() <= 1e-13 * (1.0 + f.abs()) {
            // the model decrease is at rounding level, so neither its sign
            // nor the ratio means anything; judge the step by the
            // stationarity residual instead
            let (f_y, g_y, h_y, _, _) = geo.derivatives(&y)?;
            let (ly, nuy) = recover_multipliers(&y, &g_y);
            let (lx, nux) = recover_multipliers(&x, &g);
            if f_y <= f + 1e-12 * (1.0 + f.abs()) && residual_at(&y, &g_y, &ly, nuy) < residual_at(&x, &g, &lx, nux) {
                x = y;
                (f, g, h) = (f_y, g_y, h_y);
            } else if radius < 1e-14 {
                break;
            } else {
                radius *= SHRINK;
            }
            continue;
        }
        if !(predicted > 0.0) {
            // the model has no descent inside the region
            if radius < 1e-14 {
                break;
            }
            radius *= SHRINK;
            continue;
        }
        let f_new = geo.value(&y);
        let rho = (f - f_new) / predicted;
        if rho >= ACCEPT_RATIO {
            x = y;
            (f, g, h, _, _) = geo.derivatives(&x)?;
        } else {
            let (t, f_t) = segment_minimum(|t| geo.value(&(&x + &d * t)));
            if f_t < f {
                x += &d * t;
                (f, g, h, _, _) = geo.derivatives(&x)?;
                radius = (t * d.amax()).max(radius * SHRINK);
                continue;
            }
        }
        if rho < 0.25 {
            radius *= SHRINK;
        } else if rho > 0.75 && d.amax() >= 0.99 * radius {
            radius = (radius * GROW).min(1.0);
        }
    }
    let (lambda, nu) = recover_multipliers(&x, &g);
    let residual = residual_at(&x, &g, &lambda, nu);
    Ok(KktPoint {
        v: x.clone(),
        x,
        lambda,
        nu: DVector::from_element(1, nu),
        objective: f,
        iterations,
        converged: residual <= CONVERGED_TOL,
        residual,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Minimizes `gᵀ(y−x) + ½(y−x)ᵀH(y−x)` over `{lo ≤ y ≤ hi, 1ᵀy = 1}` by a
/// primal active-set method started at the feasible point `x`.
fn box_simplex_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    x: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = x.len();
    let mut y = x.clone();
    let mut state = vec![Bound::Free; m];
    let scale = 1.0 + h.amax();
    // set after a full unblocked step: y then minimizes over the working set
    // and recomputing the step would only chase rounding error
    let mut on_face_minimum = false;
    for _ in 0..(20 * m + 50) {
        let grad = h * (&y - x) + g;
        let free: Vec<usize> = (0..m).filter(|&i| state[i] == Bound::Free).collect();
        let (p, nu) = match free.len() {
            0 => return Ok(y),
            1 => (DVector::zeros(1), -grad[free[0]]),
            n => {
                let mut kkt = DMatrix::zeros(n + 1, n + 1);
                let mut rhs = DVector::zeros(n + 1);
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        kkt[(a, b)] = h[(i, j)];
                    }
                    kkt[(a, n)] = 1.0;
                    kkt[(n, a)] = 1.0;
                    rhs[a] = -grad[i];
                }
                let sol = match kkt.clone().lu().solve(&rhs) {
                    Some(s) if s.iter().all(|v| v.is_finite()) => s,
                    _ => {
                        for a in 0..n {
                            kkt[(a, a)] += 1e-12 * scale;
                        }
                        kkt.lu()
                            .solve(&rhs)
                            .ok_or_else(|| Error::numeric("trust-region subproblem is singular"))?
                    }
                };
                (sol.rows(0, n).into_owned(), sol[n])
            }
        };
        if on_face_minimum || p.amax() <= 1e-15 * (1.0 + y.amax()) {
            on_face_minimum = false;
            // optimal on the working set; release the worst bound if any
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..m {
                let kappa = match state[i] {
                    Bound::Free => continue,
                    Bound::Lower => grad[i] + nu,
                    Bound::Upper => -(grad[i] + nu),
                };
                if kappa < -1e-14 * scale && worst.is_none_or(|(_, k)| kappa < k) {
                    worst = Some((i, kappa));
                }
            }
            match worst {
                Some((i, _)) => state[i] = Bound::Free,
                None => return Ok(y),
            }
            continue;
        }
        let mut step = 1.0;
        let mut blocking: Option<(usize, Bound)> = None;
        for (a, &i) in free.iter().enumerate() {
            let pi = p[a];
            let (limit, which) = if pi < 0.0 {
                ((lo[i] - y[i]) / pi, Bound::Lower)
            } else if pi > 0.0 {
                ((hi[i] - y[i]) / pi, Bound::Upper)
            } else {
                continue;
            };
            if limit < step {
                step = limit.max(0.0);
                blocking = Some((i, which));
            }
        }
        for (a, &i) in free.iter().enumerate() {
            y[i] += step * p[a];
        }
        match blocking {
            Some((i, which)) => {
                state[i] = which;
                y[i] = if which == Bound::Lower { lo[i] } else { hi[i] };
            }
            None => on_face_minimum = true,
        }
    }
    Err(Error::numeric("trust-region subproblem did not terminate"))
}

fn projected_gradient_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    x: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    let lipschitz = h.symmetric_eigenvalues().amax().max(1e-12);
    let mut y = x.clone();
    for _ in 0..500 {
        let grad = h * (&y - x) + g;
        let next = project_box_simplex(&(&y - grad / lipschitz), lo, hi);
        let moved = (&next - &y).amax();
        y = next;
        if moved <= 1e-15 {
            break;
        }
    }
    y
}

/// Euclidean projection onto `{lo ≤ y ≤ hi, 1ᵀy = 1}`, assumed nonempty.
fn project_box_simplex(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let at = |tau: f64| DVector::from_fn(z.len(), |i, _| (z[i] - tau).clamp(lo[i], hi[i].max(lo[i])));
    let (mut a, mut b) = (
        (z - hi).min() - 1.0,
        (z - lo).max() + 1.0,
    );
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if at(mid).sum() > 1.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    at(0.5 * (a + b))
}

/// One stored feasible point per training example.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartBuffer {
    points: Vec<DVector<f64>>,
}

impl WarmStartBuffer {
    /// Every entry starts at the uniform allocation.
    pub fn uniform(problem: &RobustProblem, n: usize) -> Self {
        Self {
            points: vec![problem.uniform_point(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> &DVector<f64> {
        &self.points[i]
    }

    pub fn set(&mut self, problem: &RobustProblem, i: usize, x: &DVector<f64>) -> Result<()> {
        self.points[i] = problem.feasible_point(x)?;
        Ok(())
    }

    pub fn all_feasible(&self, problem: &RobustProblem) -> bool {
        self.points.iter().all(|p| problem.feasible_point(p).is_ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn set(mu: DVector<f64>, sigma: DMatrix<f64>) -> Ellipsoid {
        Ellipsoid::from_shape(mu, &sigma, 1.0).unwrap()
    }

    #[test]
    fn worst_case_unit_ball() {
        let e = Ellipsoid::unit_ball(2);
        let (v, xi) = worst_case_objective(&e, &dvector![1.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(xi, dvector![-1.0, 0.0]);
        let e = set(dvector![1.0, 1.0], DMatrix::identity(2, 2));
        let (v, _) = worst_case_objective(&e, &dvector![0.5, 0.5]).unwrap();
        assert!((v - (-1.0 + 0.5f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn symmetric_instance() {
        let p = RobustProblem::portfolio(2);
        let e = Ellipsoid::unit_ball(2);
        let k = solve_cro(&p, &e, &dvector![0.9, 0.1], 50).unwrap();
        assert!(k.converged);
        assert!((&k.x - dvector![0.5, 0.5]).amax() < 1e-9);
        assert!((k.objective - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(kkt_residual(&p, &e, &k).unwrap() <= 1e-8);
    }

    #[test]
    fn near_degenerate_shape_picks_best_mean() {
        let p = RobustProblem::portfolio(2);
        // best worst-case mean is asset 1 (−μ₁ = 1 is the smallest cost)
        let e = set(dvector![1.0, 0.0], DMatrix::identity(2, 2) * 1e-6);
        let k = solve_cro(&p, &e, &p.uniform_point(), 50).unwrap();
        assert!((k.x[0] - 1.0).abs() < 1e-9);
        assert!((k.objective - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn analytic_multipliers_of_symmetric_instance() {
        let p = RobustProblem::portfolio(2);
        let e = Ellipsoid::unit_ball(2);
        // ∇f = x/|x| = (1/√2)(1,1) at x = (½,½), so ν = −1/√2
        let pt = KktPoint {
            x: dvector![0.5, 0.5],
            v: dvector![0.5, 0.5],
            lambda: dvector![0.0, 0.0],
            nu: dvector![-(0.5f64.sqrt())],
            objective: 0.5f64.sqrt(),
            iterations: 0,
            converged: true,
            residual: 0.0,
        };
        assert!(kkt_residual(&p, &e, &pt).unwrap() <= 1e-10);
        let mut bad = pt.clone();
        bad.nu = dvector![0.0];
        assert!(kkt_residual(&p, &e, &bad).unwrap() > 0.1);
    }

    #[test]
    fn infeasible_warm_start_rejected() {
        let p = RobustProblem::portfolio(2);
        let e = Ellipsoid::unit_ball(2);
        assert!(matches!(solve_cro(&p, &e, &dvector![0.7, 0.7], 5), Err(Error::Input(_))));
        assert!(solve_cro(&p, &e, &dvector![1.2, -0.2], 5).is_err());
        assert!(solve_cro(&p, &e, &dvector![0.5, 0.5], 0).is_err());
    }

    #[test]
    fn zero_scale_is_numeric_error() {
        let p = RobustProblem::portfolio(2);
        let e = Ellipsoid::new(dvector![0.0, 0.0], DMatrix::identity(2, 2), 0.0).unwrap();
        assert!(matches!(solve_cro(&p, &e, &p.uniform_point(), 5), Err(Error::Numeric(_))));
    }

    #[test]
    fn budget_is_respected_and_objective_monotone() {
        let p = RobustProblem::portfolio(4);
        let l = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.0, 0.0, 0.0, 0.3, 0.8, 0.0, 0.0, -0.2, 0.1, 0.5, 0.0, 0.4, -0.3, 0.2, 0.9],
        );
        let e = Ellipsoid::new(dvector![0.3, -0.1, 0.2, 0.05], l, 0.7).unwrap();
        let mut x = dvector![1.0, 0.0, 0.0, 0.0];
        let mut prev = worst_case_objective(&e, &x).unwrap().0;
        for _ in 0..10 {
            let k = solve_cro(&p, &e, &x, 1).unwrap();
            assert!(k.iterations <= 1);
            // rounding-level rises are allowed when they cut the KKT residual
            assert!(k.objective <= prev + 1e-12 * (1.0 + prev.abs()));
            prev = k.objective;
            x = k.x;
        }
        let full = solve_cro(&p, &e, &x, 100).unwrap();
        assert!(full.converged && full.residual <= 1e-8);
    }

    #[test]
    fn bounded_domain_not_supported() {
        let mut p = RobustProblem::portfolio(2);
        p.radius = 3.0;
        assert!(solve_cro(&p, &Ellipsoid::unit_ball(2), &p.uniform_point(), 5).is_err());
    }

    #[test]
    fn warm_start_buffer_stays_feasible() {
        let p = RobustProblem::portfolio(3);
        let mut b = WarmStartBuffer::uniform(&p, 4);
        assert!(b.all_feasible(&p));
        b.set(&p, 2, &dvector![0.2, 0.3, 0.5]).unwrap();
        assert!(b.set(&p, 1, &dvector![0.2, 0.3, 0.6]).is_err());
        assert!(b.all_feasible(&p));
    }
}
