//! Sensitivities of solver outputs through their optimality conditions.
//!
//! At a KKT point of `min_{x∈Δ} f(x; μ, Σ)` the map
//!
//! ```text
//!   G(x, λ, ν; p) = ( ∇f(x; p) − λ + ν·1,  λ ∘ x,  1ᵀx − 1 ) = 0
//! ```
//!
//! is differentiated with respect to `p = (μ, Σ)`. Strongly active bounds
//! (`λ_i > 1e-6`) pin `dx_i = 0`; every other coordinate pins `dλ_i = 0`.
//! The coverage regressor is handled the same way through the stationarity
//! of its regularized log-likelihood.

use nalgebra::{DMatrix, DVector};

use crate::coverage::{nll_hessian, nll_parts, solve_spd};
use crate::error::{Error, Result};
use crate::nn::{LogisticNet, ParamVector};
use crate::solver::{Geometry, KktPoint, RobustProblem, ACTIVE_TOL};
use crate::uncertainty::Ellipsoid;

/// Multiplier above which a bound counts as strongly active.
pub const STRONG_ACTIVE: f64 = 1e-6;
/// Largest KKT residual accepted by [`kkt_sensitivity`].
pub const SENSITIVITY_RESIDUAL_TOL: f64 = 1e-6;

/// Jacobian of the optimal decision.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSensitivity {
    /// `dx_dmu[(k, j)] = ∂x_k/∂μ_j`.
    pub dx_dmu: DMatrix<f64>,
    /// `dx_dsigma[k][(a, b)] = ∂x_k/∂Σ_ab`, symmetric in `(a, b)`.
    pub dx_dsigma: Vec<DMatrix<f64>>,
    /// Set when the linear system was singular and a least-squares solve
    /// was used instead.
    pub degenerate: bool,
}

/// Pullback of a decision-space cotangent to the set parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterCotangent {
    pub mu: DVector<f64>,
    /// Symmetric.
    pub sigma: DMatrix<f64>,
    pub degenerate: bool,
}

struct KktSystem {
    matrix: DMatrix<f64>,
    x: DVector<f64>,
    sx: DVector<f64>,
    s: f64,
}

fn assemble(problem: &RobustProblem, set: &Ellipsoid, point: &KktPoint) -> Result<KktSystem> {
    let m = problem.dim;
    if set.dim() != m || point.x.len() != m || point.lambda.len() != m {
        return Err(Error::input("KKT point dimensions do not match the problem"));
    }
    let geo = Geometry::new(set)?;
    let (_, _, h, sx, s) = geo.derivatives(&point.x)?;
    let n = 2 * m + 1;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..m {
        for j in 0..m {
            k[(i, j)] = h[(i, j)];
        }
        k[(i, m + i)] = -1.0;
        k[(i, 2 * m)] = 1.0;
        if point.x[i] <= ACTIVE_TOL && point.lambda[i] > STRONG_ACTIVE {
            k[(m + i, i)] = 1.0;
        } else {
            k[(m + i, m + i)] = 1.0;
        }
        k[(2 * m, i)] = 1.0;
    }
    Ok(KktSystem {
        matrix: k,
        x: point.x.clone(),
        sx,
        s,
    })
}

/// Solves `A X = B`, falling back to an SVD least-squares solution with a
/// warning when `A` is numerically singular.
fn robust_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin > 1e-12 * smax {
        if let Some(x) = a.clone().lu().solve(b) {
            if x.iter().all(|v| v.is_finite()) {
                return Ok((x, false));
            }
        }
    }
    log::debug!("singular KKT Jacobian (σ_min/σ_max = {:.1e}); using least squares", smin / smax);
    let x = svd
        .solve(b, 1e-12 * smax)
        .map_err(|e| Error::numeric(format!("least-squares KKT solve failed: {e}")))?;
    Ok((x, true))
}

/// Full Jacobian of `x*` with respect to `(μ, Σ)`. Requires the point to
/// satisfy the KKT conditions to [`SENSITIVITY_RESIDUAL_TOL`].
pub fn kkt_sensitivity(problem: &RobustProblem, set: &Ellipsoid, point: &KktPoint) -> Result<SolutionSensitivity> {
    let res = crate::solver::kkt_residual(problem, set, point)?;
    if res > SENSITIVITY_RESIDUAL_TOL {
        return Err(Error::State(format!(
            "sensitivities need a KKT point (residual {res:.2e} > {SENSITIVITY_RESIDUAL_TOL:.0e})"
        )));
    }
    kkt_sensitivity_unchecked(problem, set, point)
}

/// As [`kkt_sensitivity`] without the residual precondition, for points from
/// truncated solves.
pub fn kkt_sensitivity_unchecked(problem: &RobustProblem, set: &Ellipsoid, point: &KktPoint) -> Result<SolutionSensitivity> {
    let sys = assemble(problem, set, point)?;
    let m = problem.dim;
    let n = 2 * m + 1;
    // columns: μ_j (m of them), then Σ_ab for a, b in 0..m row-major
    let mut rhs = DMatrix::zeros(n, m + m * m);
    for j in 0..m {
        rhs[(j, j)] = 1.0;
    }
    let s3 = sys.s * sys.s * sys.s;
    for a in 0..m {
        for b in 0..m {
            let col = m + a * m + b;
            for k in 0..m {
                let d = if k == a { sys.x[b] / sys.s } else { 0.0 } - sys.sx[k] * sys.x[a] * sys.x[b] / (2.0 * s3);
                rhs[(k, col)] = -d;
            }
        }
    }
    let (sol, degenerate) = robust_solve(&sys.matrix, &rhs)?;
    let dx_dmu = sol.view((0, 0), (m, m)).into_owned();
    let dx_dsigma = (0..m)
        .map(|k| {
            let g = DMatrix::from_fn(m, m, |a, b| sol[(k, m + a * m + b)]);
            (&g + g.transpose()) * 0.5
        })
        .collect();
    Ok(SolutionSensitivity {
        dx_dmu,
        dx_dsigma,
        degenerate,
    })
}

/// `gᵀ ∂x*/∂(μ, Σ)` for a cotangent `g` on the decision, through one
/// transposed solve. No residual precondition is applied.
pub fn kkt_vjp(problem: &RobustProblem, set: &Ellipsoid, point: &KktPoint, g: &DVector<f64>) -> Result<ParameterCotangent> {
    let sys = assemble(problem, set, point)?;
    let m = problem.dim;
    if g.len() != m {
        return Err(Error::input("cotangent has the wrong dimension"));
    }
    let mut rhs = DMatrix::zeros(2 * m + 1, 1);
    rhs.view_mut((0, 0), (m, 1)).copy_from(g);
    let (w, degenerate) = robust_solve(&sys.matrix.transpose(), &rhs)?;
    let w = w.view((0, 0), (m, 1)).into_owned().column(0).into_owned();
    let s3 = sys.s * sys.s * sys.s;
    let c = w.dot(&sys.sx) / (2.0 * s3);
    let raw = -(&w * sys.x.transpose() / sys.s) + &sys.x * sys.x.transpose() * c;
    Ok(ParameterCotangent {
        mu: w,
        sigma: (&raw + raw.transpose()) * 0.5,
        degenerate,
    })
}

/// `∂φ*/∂y` for the coverage regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorSensitivity {
    /// `|φ| × M`.
    pub dphi_dy: DMatrix<f64>,
}

fn check_stationary(net: &LogisticNet, phi: &ParamVector, psi: &[DVector<f64>], y: &[f64], ridge: f64) -> Result<()> {
    let (_, grad, _) = nll_parts(net, phi.values(), psi, y, ridge)?;
    if grad.amax() > 1e-6 {
        return Err(Error::State(format!(
            "regressor is not at a stationary point (gradient {:.2e})",
            grad.amax()
        )));
    }
    Ok(())
}

/// `dφ*/dy_j = H⁻¹ (1/M) ∇_φ t_j` from stationarity of the regularized NLL,
/// with `t_j` the score of sample `j`.
pub fn logistic_sensitivity(
    net: &LogisticNet,
    phi_star: &ParamVector,
    psi: &[DVector<f64>],
    y: &[f64],
    ridge: f64,
) -> Result<RegressorSensitivity> {
    check_stationary(net, phi_star, psi, y, ridge)?;
    let (_, _, scores) = nll_parts(net, phi_star.values(), psi, y, ridge)?;
    let h = nll_hessian(net, phi_star.values(), psi, y, ridge)?;
    let n = psi.len() as f64;
    let mut out = DMatrix::zeros(phi_star.len(), psi.len());
    for (j, (_, gt)) in scores.iter().enumerate() {
        out.set_column(j, &(solve_spd(&h, gt, ridge)? / n));
    }
    Ok(RegressorSensitivity { dphi_dy: out })
}

/// `aᵀ ∂φ*/∂y` for a cotangent `a` on the regressor parameters, using one
/// Hessian solve.
pub fn logistic_vjp(
    net: &LogisticNet,
    phi_star: &ParamVector,
    psi: &[DVector<f64>],
    y: &[f64],
    ridge: f64,
    a: &DVector<f64>,
) -> Result<Vec<f64>> {
    let (_, _, scores) = nll_parts(net, phi_star.values(), psi, y, ridge)?;
    let h = nll_hessian(net, phi_star.values(), psi, y, ridge)?;
    let u = solve_spd(&h, a, ridge)?;
    let n = psi.len() as f64;
    Ok(scores.iter().map(|(_, gt)| u.dot(gt) / n).collect())
}
