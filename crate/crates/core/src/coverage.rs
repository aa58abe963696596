//! Conditional-coverage regression.
//!
//! A logistic model `g_φ(ψ)` is fitted to membership labels `y_i = 1{ξ_i ∈
//! U(ψ_i)}` by minimizing the ridge-regularized negative log-likelihood
//!
//! ```text
//!   NLL(φ) = (1/M) Σ_i [softplus(t_i) − y_i t_i] + (ridge/2)|φ|²,  t_i = logit g_φ(ψ_i)
//! ```
//!
//! and the coverage loss is the mean squared gap between the fitted
//! probabilities and the target `1 − ε`. When `g_φ` is correctly specified
//! the loss vanishes exactly when the sets have conditional coverage `1 − ε`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MixtureEnv;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, LogisticNet, ParamVector};
use crate::uncertainty::Ellipsoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    /// Hidden widths of the regressor; empty means plain logistic regression.
    pub hidden: Vec<usize>,
    pub ridge: f64,
    pub fit_tolerance: f64,
    pub max_iter: usize,
    /// Seeds the initial weights of a regressor with hidden layers.
    pub seed: u64,
    /// Covariate expansion applied before the regressor sees `ψ`.
    pub features: FeatureMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    /// `ψ` followed by every product `ψ_a ψ_b` with `a ≤ b`. Keeps the fit
    /// convex with an exact Hessian while letting the regressor see
    /// coverage that bends in `ψ`.
    Quadratic,
}

impl FeatureMap {
    pub fn apply(&self, psi: &DVector<f64>) -> DVector<f64> {
        match self {
            FeatureMap::Identity => psi.clone(),
            FeatureMap::Quadratic => {
                let d = psi.len();
                let mut v = Vec::with_capacity(d + d * (d + 1) / 2);
                v.extend(psi.iter());
                for a in 0..d {
                    for b in a..d {
                        v.push(psi[a] * psi[b]);
                    }
                }
                DVector::from_vec(v)
            }
        }
    }
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            ridge: 1e-4,
            fit_tolerance: 1e-8,
            max_iter: 200,
            seed: 0,
            features: FeatureMap::Identity,
        }
    }
}

/// A fitted coverage model.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRegressor {
    pub net: LogisticNet,
    pub phi: ParamVector,
    pub ridge: f64,
    pub fit_tolerance: f64,
    /// ∞-norm of the NLL gradient at `phi`.
    pub grad_norm: f64,
    pub iterations: usize,
}

impl CoverageRegressor {
    /// Predicted coverage probability at `psi`.
    pub fn predict(&self, psi: &DVector<f64>) -> Result<f64> {
        Ok(sigmoid(self.net.logit(self.phi.values(), psi.as_slice())?))
    }
}

/// Hard and smoothed membership labels for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageLabels {
    pub hard: Vec<bool>,
    pub soft: Vec<f64>,
}

impl CoverageLabels {
    pub fn compute(sets: &[Ellipsoid], xi: &[DVector<f64>], beta: f64) -> Result<Self> {
        if sets.len() != xi.len() {
            return Err(Error::input("label batch has mismatched set and sample counts"));
        }
        let mut hard = Vec::with_capacity(xi.len());
        let mut soft = Vec::with_capacity(xi.len());
        for (s, x) in sets.iter().zip(xi) {
            hard.push(s.contains(x)?);
            soft.push(s.smooth_membership(x, beta)?);
        }
        Ok(Self { hard, soft })
    }

    pub fn hard_as_f64(&self) -> Vec<f64> {
        self.hard.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn check_batch(net: &LogisticNet, phi: &[f64], psi: &[DVector<f64>], labels: &[f64]) -> Result<()> {
    if psi.is_empty() {
        return Err(Error::input("coverage regression on an empty batch"));
    }
    if psi.len() != labels.len() {
        return Err(Error::input("coverage batch has mismatched covariate and label counts"));
    }
    if phi.len() != net.num_params() {
        return Err(Error::input("coverage parameters do not match the regressor"));
    }
    if labels.iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::input("coverage labels must lie in [0, 1]"));
    }
    Ok(())
}

/// Ridge-regularized NLL.
pub fn regularized_nll(net: &LogisticNet, phi: &[f64], psi: &[DVector<f64>], labels: &[f64], ridge: f64) -> Result<f64> {
    check_batch(net, phi, psi, labels)?;
    let mut total = 0.0;
    for (p, &y) in psi.iter().zip(labels) {
        let t = net.logit(phi, p.as_slice())?;
        total += softplus(t) - y * t;
    }
    let reg: f64 = phi.iter().map(|v| v * v).sum();
    Ok(total / psi.len() as f64 + 0.5 * ridge * reg)
}

/// NLL value, gradient and the per-sample score gradients `∇_φ t_i`.
pub(crate) fn nll_parts(
    net: &LogisticNet,
    phi: &[f64],
    psi: &[DVector<f64>],
    labels: &[f64],
    ridge: f64,
) -> Result<(f64, DVector<f64>, Vec<(f64, DVector<f64>)>)> {
    check_batch(net, phi, psi, labels)?;
    let n = psi.len() as f64;
    let mut value = 0.0;
    let mut grad = DVector::from_iterator(phi.len(), phi.iter().map(|v| ridge * v));
    let mut scores = Vec::with_capacity(psi.len());
    for (p, &y) in psi.iter().zip(labels) {
        let (t, gt) = net.logit_grad(phi, p.as_slice())?;
        let gt = DVector::from_vec(gt);
        value += softplus(t) - y * t;
        grad.axpy((sigmoid(t) - y) / n, &gt, 1.0);
        scores.push((t, gt));
    }
    let reg: f64 = phi.iter().map(|v| v * v).sum();
    Ok((value / n + 0.5 * ridge * reg, grad, scores))
}

pub fn nll_gradient(net: &LogisticNet, phi: &[f64], psi: &[DVector<f64>], labels: &[f64], ridge: f64) -> Result<DVector<f64>> {
    nll_parts(net, phi, psi, labels, ridge).map(|(_, g, _)| g)
}

/// NLL Hessian. Exact for a linear score; for hidden layers the columns are
/// central differences of the analytic gradient.
pub fn nll_hessian(net: &LogisticNet, phi: &[f64], psi: &[DVector<f64>], labels: &[f64], ridge: f64) -> Result<DMatrix<f64>> {
    let k = phi.len();
    if net.is_linear() {
        let (_, _, scores) = nll_parts(net, phi, psi, labels, ridge)?;
        let n = psi.len() as f64;
        let mut h = DMatrix::identity(k, k) * ridge;
        for (t, gt) in &scores {
            let p = sigmoid(*t);
            h.ger(p * (1.0 - p) / n, gt, gt, 1.0);
        }
        return Ok(h);
    }
    let mut h = DMatrix::zeros(k, k);
    let mut work = phi.to_vec();
    for j in 0..k {
        let step = 1e-5 * (1.0 + phi[j].abs());
        work[j] = phi[j] + step;
        let gp = nll_gradient(net, &work, psi, labels, ridge)?;
        work[j] = phi[j] - step;
        let gm = nll_gradient(net, &work, psi, labels, ridge)?;
        work[j] = phi[j];
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Solves `H p = b`, retrying once with a stronger diagonal if `H` is not
/// positive definite.
pub(crate) fn solve_spd(h: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if let Some(c) = h.clone().cholesky() {
        return Ok(c.solve(b));
    }
    let bump = (10.0 * ridge).max(1e-6) * (1.0 + h.diagonal().amax());
    let shifted = h + DMatrix::identity(h.nrows(), h.ncols()) * bump;
    match shifted.cholesky() {
        Some(c) => {
            log::warn!("regressor Hessian not positive definite; added {bump:.1e} to the diagonal");
            Ok(c.solve(b))
        }
        None => Err(Error::numeric("regressor Hessian is not positive definite")),
    }
}

/// A fit whose line search stalls is accepted below this gradient norm.
const STALL_TOLERANCE: f64 = 1e-7;

/// `−(H + δI)⁻¹ g` with the smallest tried `δ` that makes the matrix
/// positive definite.
fn damped_newton_step(h: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    let mut delta = 0.0;
    let base = 1e-8 * (1.0 + h.diagonal().amax());
    for _ in 0..30 {
        let shifted = h + DMatrix::identity(n, n) * delta;
        if let Some(c) = shifted.cholesky() {
            return Ok(-c.solve(grad));
        }
        delta = if delta == 0.0 { base } else { delta * 10.0 };
    }
    Err(Error::numeric("could not regularize the regressor Hessian"))
}

/// Damped Newton fit of the coverage regressor. `warm` seeds the
/// parameters; otherwise a linear model starts at zero.
pub fn fit_regressor(
    psi: &[DVector<f64>],
    labels: &[f64],
    config: &CoverageConfig,
    warm: Option<&ParamVector>,
) -> Result<CoverageRegressor> {
    let input_dim = psi.first().map(|p| p.len()).ok_or_else(|| Error::input("coverage regression on an empty batch"))?;
    let net = LogisticNet::new(input_dim, config.hidden.clone());
    let mut phi = match warm {
        Some(w) if w.len() == net.num_params() => w.clone(),
        Some(_) => return Err(Error::input("warm-start regressor has the wrong size")),
        None if net.is_linear() => net.zeros(),
        None => net.init(&mut ChaCha8Rng::seed_from_u64(config.seed)),
    };
    let ridge = config.ridge;
    let mut iterations = 0;
    loop {
        let (value, grad, _) = nll_parts(&net, phi.values(), psi, labels, ridge)?;
        let grad_norm = grad.amax();
        if !grad_norm.is_finite() {
            return Err(Error::numeric("coverage regression produced a non-finite gradient"));
        }
        if grad_norm <= config.fit_tolerance {
            return Ok(CoverageRegressor {
                net,
                phi,
                ridge,
                fit_tolerance: config.fit_tolerance,
                grad_norm,
                iterations,
            });
        }
        if iterations >= config.max_iter {
            return Err(Error::Convergence {
                what: "coverage regression".into(),
                grad_norm,
            });
        }
        iterations += 1;
        let h = nll_hessian(&net, phi.values(), psi, labels, ridge)?;
        let step = damped_newton_step(&h, &grad)?;
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let base = phi.values().to_vec();
        loop {
            for (k, v) in phi.values_mut().iter_mut().enumerate() {
                *v = base[k] + t * step[k];
            }
            let trial = regularized_nll(&net, phi.values(), psi, labels, ridge)?;
            // the slack absorbs rounding once the decrease is at machine precision
            if trial <= value + 1e-4 * t * slope + 1e-15 * value.abs() {
                break;
            }
            if t < 1e-10 {
                for (k, v) in phi.values_mut().iter_mut().enumerate() {
                    *v = base[k];
                }
                if grad_norm <= STALL_TOLERANCE {
                    return Ok(CoverageRegressor {
                        net,
                        phi,
                        ridge,
                        fit_tolerance: config.fit_tolerance,
                        grad_norm,
                        iterations,
                    });
                }
                return Err(Error::Convergence {
                    what: "coverage regression (line search)".into(),
                    grad_norm,
                });
            }
            t *= 0.5;
        }
    }
}

/// `mean_i (g(ψ_i) − (1−ε))²`.
pub fn coverage_loss(regressor: &CoverageRegressor, psi: &[DVector<f64>], epsilon: f64) -> Result<f64> {
    coverage_loss_grad(regressor, psi, epsilon).map(|(v, _)| v)
}

/// Coverage loss and its gradient with respect to the regressor parameters.
pub fn coverage_loss_grad(regressor: &CoverageRegressor, psi: &[DVector<f64>], epsilon: f64) -> Result<(f64, DVector<f64>)> {
    if psi.is_empty() {
        return Err(Error::input("coverage loss of an empty batch"));
    }
    let target = 1.0 - epsilon;
    let n = psi.len() as f64;
    let mut value = 0.0;
    let mut grad = DVector::zeros(regressor.phi.len());
    for p in psi {
        let (t, gt) = regressor.net.logit_grad(regressor.phi.values(), p.as_slice())?;
        let g = sigmoid(t);
        let gap = g - target;
        value += gap * gap;
        grad.axpy(2.0 * gap * g * (1.0 - g) / n, &DVector::from_vec(gt), 1.0);
    }
    Ok((value / n, grad))
}

/// Coverage loss computed from oracle conditional probabilities,
/// `mean_i (P(ξ ∈ U(ψ_i) | ψ_i) − (1−ε))²`, each probability estimated from
/// `n_mc` conditional draws.
pub fn theoretical_cc_loss<F>(
    set_for: F,
    env: Option<&MixtureEnv>,
    psi: &[DVector<f64>],
    epsilon: f64,
    n_mc: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<Ellipsoid>,
{
    let env = env.ok_or_else(|| Error::input("conditional coverage needs the generating distribution"))?;
    if psi.is_empty() {
        return Err(Error::input("coverage loss of an empty batch"));
    }
    let target = 1.0 - epsilon;
    let mut total = 0.0;
    for (i, p) in psi.iter().enumerate() {
        let set = set_for(p)?;
        let prob = env.conditional_coverage_prob(p, &set, n_mc, seed.wrapping_add(i as u64))?;
        total += (prob - target).powi(2);
    }
    Ok(total / psi.len() as f64)
}
