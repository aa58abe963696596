//! End-to-end training of the set predictor.
//!
//! Each step draws a batch, runs a truncated trust-region solve per sample
//! from its stored warm start, and differentiates
//!
//! ```text
//!   L(θ) = γ · CVaR_α(−ξ_iᵀ x*_i) + (1 − γ) · mean_i (g_φ*(ψ_i) − (1 − ε))²
//! ```
//!
//! through the KKT conditions of each solve and, for the coverage term,
//! through the stationarity of the coverage regressor refitted on the
//! batch's smoothed membership labels. With `method = Ecro` only the first
//! term is used and no regressor is fitted.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{coverage_loss_grad, fit_regressor, CoverageConfig, CoverageRegressor};
use crate::data::{chi_squared_quantile, Dataset};
use crate::error::{Error, Result};
use crate::implicit::kkt_vjp;
use crate::nn::{Activation, Optimizer, OptimizerKind, ParamVector, SetPredictor, SetPredictorConfig, SetPredictorGrad};
use crate::risk::cvar_subgradient;
use crate::solver::{solve_cro, KktPoint, RobustProblem, WarmStartBuffer};
use crate::uncertainty::{build_ellipsoid, sigma_grad_to_factor, Ellipsoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Task loss only.
    Ecro,
    /// Task loss mixed with the coverage loss.
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Trust-region steps per sample and batch.
    pub tro_steps: usize,
    pub batch_size: usize,
    pub cvar_alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Membership sharpness, annealed linearly over the epochs.
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    /// Reuse each sample's last solution as the next starting point.
    pub warm_start: bool,
    /// Compute validation metrics after every epoch.
    pub validate: bool,
    /// Solver budget for validation and evaluation solves.
    pub eval_steps: usize,
    /// Stop once the best epoch loss has not improved by a relative
    /// `min_rel_improvement` for this many epochs; 0 disables the test.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub psi_dependent_radius: bool,
    pub final_gain: f64,
    /// Start the output layer at the training moments: center at the mean
    /// return, shape at the return covariance, scale at the chi-squared
    /// quantile of the target coverage.
    pub init_from_data: bool,
    pub coverage: CoverageConfig,
    pub coverage_pool: PoolKind,
}

/// Where the coverage regressor draws its labels from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// The current minibatch.
    Batch,
    /// Every training sample, relabeled with the current sets at each step.
    /// The fitted regressor's sampling noise shrinks like `1/n`, and since
    /// that noise is smallest when every label is 1, a small pool biases
    /// the coverage loss toward over-coverage.
    TrainingSplit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            tro_steps: 5,
            batch_size: 64,
            cvar_alpha: 0.9,
            epsilon: 0.1,
            gamma: 0.5,
            lr: 1e-2,
            optimizer: OptimizerKind::Sgd,
            beta_start: 10.0,
            beta_end: 50.0,
            seed: 0,
            warm_start: true,
            validate: true,
            eval_steps: 200,
            patience: 10,
            min_rel_improvement: 1e-4,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            psi_dependent_radius: false,
            final_gain: 0.1,
            init_from_data: true,
            coverage: CoverageConfig::default(),
            coverage_pool: PoolKind::TrainingSplit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::input("gamma must lie in [0, 1]"));
        }
        if self.tro_steps == 0 || self.eval_steps == 0 {
            return Err(Error::input("trust-region budgets must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::input("step size must be nonnegative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::input("batch size and epoch budget must be positive"));
        }
        if !(0.0..1.0).contains(&self.cvar_alpha) {
            return Err(Error::input("CVaR level must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.epsilon) || self.epsilon == 0.0 {
            return Err(Error::input("miscoverage level must lie in (0, 1)"));
        }
        if !(self.beta_start > 0.0 && self.beta_end > 0.0) {
            return Err(Error::input("membership sharpness must be positive"));
        }
        Ok(())
    }

    pub fn predictor_config(&self, covariate_dim: usize, uncertainty_dim: usize) -> SetPredictorConfig {
        SetPredictorConfig {
            covariate_dim,
            uncertainty_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            psi_dependent_radius: self.psi_dependent_radius,
            final_gain: self.final_gain,
            init_log_radius: 0.0,
        }
    }

    /// Sharpness used in `epoch` out of `max_epochs`.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.max_epochs <= 1 {
            return self.beta_start;
        }
        let t = epoch as f64 / (self.max_epochs - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * t.min(1.0)
    }
}

/// Fixed inputs of a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub problem: RobustProblem,
    pub tro_steps: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub beta: f64,
    pub coverage: CoverageConfig,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig, m: usize, beta: f64) -> Self {
        Self {
            problem: RobustProblem::portfolio(m),
            tro_steps: cfg.tro_steps,
            alpha: cfg.cvar_alpha,
            epsilon: cfg.epsilon,
            gamma: cfg.gamma,
            beta,
            coverage: cfg.coverage.clone(),
        }
    }
}

/// Value, gradient and by-products of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub ecro: f64,
    /// Coverage-loss term; zero for the task-only loss.
    pub coverage: f64,
    pub grad: Vec<f64>,
    pub solutions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub hard: Vec<bool>,
    pub regressor: Option<CoverageRegressor>,
}

struct Solved {
    set: Ellipsoid,
    point: KktPoint,
    cost: f64,
}

fn solve_batch(
    predictor: &SetPredictor,
    theta: &ParamVector,
    psi: &[DVector<f64>],
    xi: &[DVector<f64>],
    warm: &[DVector<f64>],
    problem: &RobustProblem,
    steps: usize,
) -> Result<Vec<Solved>> {
    (0..psi.len())
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<Solved> {
                let (out, _) = predictor.forward(theta, psi[i].as_slice())?;
                let set = build_ellipsoid(&out)?;
                let point = solve_cro(problem, &set, &warm[i], steps)?;
                let cost = -xi[i].dot(&point.x);
                Ok(Solved { set, point, cost })
            };
            run().map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

const GRAD_CHUNK: usize = 16;

/// Task-only loss: `CVaR_α` of realized costs and its gradient.
pub fn ecro_loss(
    predictor: &SetPredictor,
    theta: &ParamVector,
    psi: &[DVector<f64>],
    xi: &[DVector<f64>],
    warm: &[DVector<f64>],
    settings: &LossSettings,
) -> Result<LossEval> {
    loss(TrainMethod::Ecro, predictor, theta, psi, xi, warm, settings, None, None)
}

/// Samples the coverage term is estimated on.
#[derive(Debug, Clone, Copy)]
pub struct CoveragePool<'a> {
    pub psi: &'a [DVector<f64>],
    pub xi: &'a [DVector<f64>],
}

/// `γ · task loss + (1 − γ) · coverage loss` and its gradient. The task
/// loss is taken over the batch; the coverage regressor is fitted on
/// `pool`, or on the batch itself when `pool` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn dual_loss(
    predictor: &SetPredictor,
    theta: &ParamVector,
    psi: &[DVector<f64>],
    xi: &[DVector<f64>],
    warm: &[DVector<f64>],
    settings: &LossSettings,
    regressor_warm: Option<&ParamVector>,
    pool: Option<CoveragePool<'_>>,
) -> Result<LossEval> {
    loss(TrainMethod::Dual, predictor, theta, psi, xi, warm, settings, regressor_warm, pool)
}

#[allow(clippy::too_many_arguments)]
fn loss(
    method: TrainMethod,
    predictor: &SetPredictor,
    theta: &ParamVector,
    psi: &[DVector<f64>],
    xi: &[DVector<f64>],
    warm: &[DVector<f64>],
    s: &LossSettings,
    regressor_warm: Option<&ParamVector>,
    pool: Option<CoveragePool<'_>>,
) -> Result<LossEval> {
    let n = psi.len();
    if n == 0 || xi.len() != n || warm.len() != n {
        return Err(Error::input("loss batch is empty or has mismatched lengths"));
    }
    let solved = solve_batch(predictor, theta, psi, xi, warm, &s.problem, s.tro_steps)?;
    let costs: Vec<f64> = solved.iter().map(|v| v.cost).collect();
    let ups = cvar_subgradient(&costs, s.alpha)?;
    let ecro: f64 = ups.iter().zip(&costs).map(|(u, c)| u * c).sum();
    let hard = solved
        .iter()
        .zip(xi)
        .map(|(v, x)| v.set.contains(x))
        .collect::<Result<Vec<bool>>>()?;

    let gamma = if method == TrainMethod::Ecro { 1.0 } else { s.gamma };
    let mut grad = vec![0.0; theta.len()];
    let mut cc_value = 0.0;
    let mut regressor = None;
    if method == TrainMethod::Dual {
        let batch_sets: Vec<Ellipsoid> = solved.iter().map(|v| v.set.clone()).collect();
        let (cp, cx, sets) = match pool {
            Some(p) => {
                if p.psi.is_empty() || p.xi.len() != p.psi.len() {
                    return Err(Error::input("coverage pool is empty or has mismatched lengths"));
                }
                let sets = predict_sets(predictor, theta, p.psi)?;
                (p.psi, p.xi, sets)
            }
            None => (psi, xi, batch_sets),
        };
        let (value, reg) = coverage_term(predictor, theta, cp, cx, &sets, s, regressor_warm, 1.0 - gamma, &mut grad)?;
        cc_value = value;
        regressor = Some(reg);
    }

    let value = gamma * ecro + (1.0 - gamma) * cc_value;
    if gamma != 0.0 {
        let idx: Vec<usize> = (0..n).filter(|&i| ups[i] != 0.0).collect();
        let partials = idx
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| -> Result<Vec<f64>> {
                let mut g = vec![0.0; theta.len()];
                for &i in chunk {
                    let sv = &solved[i];
                    let cot = &xi[i] * (-ups[i] * gamma);
                    let pull = kkt_vjp(&s.problem, &sv.set, &sv.point, &cot).map_err(|e| Error::Sample {
                        index: i,
                        source: Box::new(e),
                    })?;
                    let (gl, gr) = sigma_grad_to_factor(&pull.sigma, &sv.set);
                    let eg = crate::uncertainty::EllipsoidGrad {
                        mu: pull.mu,
                        l: gl,
                        r: gr,
                    };
                    let (_, tape) = predictor.forward(theta, psi[i].as_slice())?;
                    predictor.backward_into(&tape, &eg.to_raw(&sv.set), &mut g)?;
                }
                Ok(g)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        accumulate(&mut grad, partials);
    }
    Ok(LossEval {
        value,
        ecro,
        coverage: cc_value,
        grad,
        solutions: solved.iter().map(|v| v.point.x.clone()).collect(),
        costs,
        hard,
        regressor,
    })
}

fn predict_sets(predictor: &SetPredictor, theta: &ParamVector, psi: &[DVector<f64>]) -> Result<Vec<Ellipsoid>> {
    psi.par_iter()
        .map(|p| {
            let (out, _) = predictor.forward(theta, p.as_slice())?;
            build_ellipsoid(&out)
        })
        .collect()
}

/// Fits the regressor on smoothed labels and adds `scale · ∂L_CC/∂θ` to
/// `grad`. Returns the coverage loss and the fitted regressor.
#[allow(clippy::too_many_arguments)]
fn coverage_term(
    predictor: &SetPredictor,
    theta: &ParamVector,
    psi: &[DVector<f64>],
    xi: &[DVector<f64>],
    sets: &[Ellipsoid],
    s: &LossSettings,
    regressor_warm: Option<&ParamVector>,
    scale: f64,
    grad: &mut [f64],
) -> Result<(f64, CoverageRegressor)> {
    let soft = sets
        .iter()
        .zip(xi)
        .map(|(set, x)| set.smooth_membership(x, s.beta))
        .collect::<Result<Vec<f64>>>()?;
    let feats: Vec<DVector<f64>> = psi.iter().map(|p| s.coverage.features.apply(p)).collect();
    let reg = fit_regressor(&feats, &soft, &s.coverage, regressor_warm)?;
    let (value, a) = coverage_loss_grad(&reg, &feats, s.epsilon)?;
    if scale == 0.0 {
        return Ok((value, reg));
    }
    let dl_dy = crate::implicit::logistic_vjp(&reg.net, &reg.phi, &feats, &soft, reg.ridge, &a)?;
    let idx: Vec<usize> = (0..psi.len()).filter(|&j| dl_dy[j] != 0.0).collect();
    let partials = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut g = vec![0.0; theta.len()];
            for &j in chunk {
                let (_, eg) = sets[j].smooth_membership_grad(&xi[j], s.beta)?;
                let mut seed = eg.to_raw(&sets[j]);
                scale_raw(&mut seed, scale * dl_dy[j]);
                let (_, tape) = predictor.forward(theta, psi[j].as_slice())?;
                predictor.backward_into(&tape, &seed, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    accumulate(grad, partials);
    Ok((value, reg))
}

fn accumulate(grad: &mut [f64], partials: Vec<Vec<f64>>) {
    for p in partials {
        for (a, b) in grad.iter_mut().zip(p) {
            *a += b;
        }
    }
}

fn scale_raw(g: &mut SetPredictorGrad, c: f64) {
    g.mu.iter_mut().for_each(|v| *v *= c);
    g.l_raw.iter_mut().for_each(|v| *v *= c);
    g.r_raw *= c;
}

/// Per-epoch snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(skip)]
    pub theta: Option<ParamVector>,
    pub epoch: usize,
    pub loss: f64,
    pub train_cvar: f64,
    pub train_coverage: f64,
    pub val_cvar: f64,
    pub val_coverage: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Converged,
    /// A non-finite loss or gradient; the returned parameters are the last
    /// finite ones.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: ParamVector,
    pub history: Vec<Checkpoint>,
    pub stop: StopReason,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub loss: f64,
    pub cvar: f64,
    pub coverage: f64,
    pub val_cvar: f64,
    pub val_coverage: f64,
    pub wall_ms: f64,
}

/// Parameters whose output layer encodes the training moments.
pub fn initial_theta(predictor: &SetPredictor, train: &Dataset, cfg: &TrainConfig) -> Result<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = predictor.init(&mut rng);
    if !cfg.init_from_data {
        return Ok(theta);
    }
    let m = predictor.config.uncertainty_dim;
    let n = train.len() as f64;
    let mut mean = DVector::zeros(m);
    for x in &train.xi {
        mean += x;
    }
    mean /= n;
    let mut cov = nalgebra::DMatrix::identity(m, m) * 1e-6;
    for x in &train.xi {
        let z = x - &mean;
        cov += &z * z.transpose() / (n - 1.0).max(1.0);
    }
    let l = cov.cholesky().ok_or_else(|| Error::numeric("return covariance is singular"))?.l();
    let log_r = chi_squared_quantile(m, 1.0 - cfg.epsilon)?.ln();
    let layout = predictor.mlp().layout();
    let bias = layout.last().expect("at least one layer").range();
    let vals = theta.values_mut();
    let mut k = bias.start;
    for v in mean.iter() {
        vals[k] = *v;
        k += 1;
    }
    for i in 0..m {
        for j in 0..=i {
            vals[k] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            k += 1;
        }
    }
    if predictor.config.psi_dependent_radius {
        vals[k] = log_r;
    } else {
        vals[predictor.mlp().num_params()] = log_r;
    }
    Ok(theta)
}

/// Sets, converged solutions, costs and hard membership on a split.
pub fn evaluate_theta(
    predictor: &SetPredictor,
    theta: &ParamVector,
    data: &Dataset,
    warm: &mut WarmStartBuffer,
    steps: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let problem = RobustProblem::portfolio(data.uncertainty_dim());
    let starts: Vec<DVector<f64>> = (0..data.len()).map(|i| warm.get(i).clone()).collect();
    let solved = solve_batch(predictor, theta, &data.psi, &data.xi, &starts, &problem, steps)?;
    let mut costs = Vec::with_capacity(data.len());
    let mut hard = Vec::with_capacity(data.len());
    for (i, s) in solved.iter().enumerate() {
        warm.set(&problem, i, &s.point.x)?;
        costs.push(s.cost);
        hard.push(s.set.contains(&data.xi[i])?);
    }
    Ok((costs, hard))
}

fn fraction(b: &[bool]) -> f64 {
    b.iter().filter(|&&v| v).count() as f64 / b.len().max(1) as f64
}

/// Runs the training loop from `theta0` and records one checkpoint per
/// epoch. Log records go to `log` as JSON lines.
pub fn train(
    method: TrainMethod,
    predictor: &SetPredictor,
    theta0: ParamVector,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    if cfg.validate && val.is_empty() {
        return Err(Error::input("validation split is empty"));
    }
    let m = train.uncertainty_dim();
    if predictor.config.uncertainty_dim != m || predictor.config.covariate_dim != train.covariate_dim() {
        return Err(Error::input("set predictor dimensions do not match the data"));
    }
    let problem = RobustProblem::portfolio(m);
    let mut warm = WarmStartBuffer::uniform(&problem, train.len());
    let mut val_warm = WarmStartBuffer::uniform(&problem, val.len());
    let mut theta = theta0;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<Checkpoint> = Vec::new();
    let mut regressor_warm: Option<ParamVector> = None;
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let start = Instant::now();
    let mut stop = StopReason::MaxEpochs;

    let pool = match cfg.coverage_pool {
        PoolKind::Batch => None,
        PoolKind::TrainingSplit => Some(CoveragePool {
            psi: &train.psi,
            xi: &train.xi,
        }),
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let settings = LossSettings::from_config(cfg, m, cfg.beta_at(epoch));
        let mut costs = vec![0.0; train.len()];
        let mut hard = vec![false; train.len()];
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let psi: Vec<DVector<f64>> = chunk.iter().map(|&i| train.psi[i].clone()).collect();
            let xi: Vec<DVector<f64>> = chunk.iter().map(|&i| train.xi[i].clone()).collect();
            let starts: Vec<DVector<f64>> = chunk
                .iter()
                .map(|&i| if cfg.warm_start { warm.get(i).clone() } else { problem.uniform_point() })
                .collect();
            let eval = match method {
                TrainMethod::Ecro => ecro_loss(predictor, &theta, &psi, &xi, &starts, &settings),
                TrainMethod::Dual => {
                    let r = dual_loss(predictor, &theta, &psi, &xi, &starts, &settings, regressor_warm.as_ref(), pool);
                    // a failed warm-started fit gets one cold retry
                    match r {
                        Err(Error::Convergence { .. }) if regressor_warm.is_some() => {
                            regressor_warm = None;
                            dual_loss(predictor, &theta, &psi, &xi, &starts, &settings, None, pool)
                        }
                        other => other,
                    }
                }
            };
            let eval = match eval {
                Ok(e) => e,
                Err(Error::Sample { source, .. }) if matches!(*source, Error::Numeric(_)) && !history.is_empty() => {
                    log::warn!("numeric failure in epoch {epoch}; stopping at the last good checkpoint");
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
                if history.is_empty() {
                    return Err(Error::numeric("training loss is not finite in the first epoch"));
                }
                log::warn!("non-finite loss in epoch {epoch}; stopping at the last good checkpoint");
                stop = StopReason::Diverged;
                break 'epochs;
            }
            for (k, &i) in chunk.iter().enumerate() {
                if cfg.warm_start {
                    warm.set(&problem, i, &eval.solutions[k])?;
                }
                costs[i] = eval.costs[k];
                hard[i] = eval.hard[k];
            }
            if let Some(r) = &eval.regressor {
                regressor_warm = Some(r.phi.clone());
            }
            loss_sum += eval.value;
            batches += 1;
            opt.step(theta.values_mut(), &eval.grad);
        }
        if theta.values().iter().any(|v| !v.is_finite()) {
            stop = StopReason::Diverged;
            if let Some(last) = history.last().and_then(|c| c.theta.clone()) {
                theta = last;
            }
            break;
        }
        let loss = loss_sum / batches as f64;
        let (val_cvar, val_coverage) = if cfg.validate {
            let (vc, vh) = evaluate_theta(predictor, &theta, val, &mut val_warm, cfg.eval_steps)?;
            (crate::risk::cvar(&vc, cfg.cvar_alpha)?, fraction(&vh))
        } else {
            (f64::NAN, f64::NAN)
        };
        let cp = Checkpoint {
            theta: Some(theta.clone()),
            epoch,
            loss,
            train_cvar: crate::risk::cvar(&costs, cfg.cvar_alpha)?,
            train_coverage: fraction(&hard),
            val_cvar,
            val_coverage,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} cvar {:.4} cov {:.3} val cvar {:.4} val cov {:.3}",
            cp.loss,
            cp.train_cvar,
            cp.train_coverage,
            cp.val_cvar,
            cp.val_coverage
        );
        if let Some(w) = log.as_deref_mut() {
            let rec = LogRecord {
                epoch,
                loss: cp.loss,
                cvar: cp.train_cvar,
                coverage: cp.train_coverage,
                val_cvar: cp.val_cvar,
                val_coverage: cp.val_coverage,
                wall_ms: cp.wall_ms,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w).map_err(|e| Error::io("training log", e))?;
        }
        history.push(cp);
        if loss < best - cfg.min_rel_improvement * best.abs() {
            best = loss;
            best_epoch = epoch;
        } else if cfg.patience > 0 && epoch >= best_epoch + cfg.patience {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(TrainOutcome { theta, history, stop })
}

/// Among checkpoints with validation coverage at least `1 − ε`, the one
/// with the lowest validation CVaR. If none qualifies, the checkpoint with
/// the highest coverage is returned with the flag set.
pub fn select_model(history: &[Checkpoint], epsilon: f64) -> Result<(Checkpoint, bool)> {
    if history.is_empty() {
        return Err(Error::input("no checkpoints to select from"));
    }
    let target = 1.0 - epsilon;
    let best = history
        .iter()
        .filter(|c| c.val_coverage >= target)
        .min_by(|a, b| a.val_cvar.total_cmp(&b.val_cvar));
    if let Some(c) = best {
        return Ok((c.clone(), false));
    }
    let fallback = history
        .iter()
        .max_by(|a, b| a.val_coverage.total_cmp(&b.val_coverage).then(b.epoch.cmp(&a.epoch)))
        .expect("nonempty");
    Ok((fallback.clone(), true))
}
