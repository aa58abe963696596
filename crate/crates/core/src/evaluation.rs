//! Test-time metrics and comparison tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{conformal_set, eto_set, ConformalCalibration, GaussianConditionalModel};
use crate::data::{Dataset, MixtureEnv};
use crate::error::{Error, Result};
use crate::nn::{ParamVector, SetPredictor};
use crate::risk::cvar;
use crate::solver::{solve_cro, RobustProblem};
use crate::uncertainty::{build_ellipsoid, Ellipsoid};

/// A rule mapping covariates to an uncertainty set.
pub trait SetFamily: Sync {
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid>;
}

/// Sets emitted by a trained set predictor.
pub struct LearnedSets<'a> {
    pub predictor: &'a SetPredictor,
    pub theta: &'a ParamVector,
}

impl SetFamily for LearnedSets<'_> {
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid> {
        let (out, _) = self.predictor.forward(self.theta, psi.as_slice())?;
        build_ellipsoid(&out)
    }
}

pub struct GaussianSets<'a> {
    pub model: &'a GaussianConditionalModel,
    pub epsilon: f64,
}

impl SetFamily for GaussianSets<'_> {
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid> {
        eto_set(self.model, psi, self.epsilon)
    }
}

impl SetFamily for ConformalCalibration {
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid> {
        conformal_set(self, psi)
    }
}

/// Ellipsoids holding a `1 − ε` share of the true conditional law.
pub struct OracleSets<'a> {
    pub env: &'a MixtureEnv,
    pub epsilon: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl SetFamily for OracleSets<'_> {
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid> {
        self.env.oracle_set(psi, self.epsilon, self.n_mc, self.seed)
    }
}

impl<F> SetFamily for F
where
    F: Fn(&DVector<f64>) -> Result<Ellipsoid> + Sync,
{
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid> {
        self(psi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub epsilon: f64,
    /// Solver budget per test sample.
    pub steps: usize,
    /// Covariates drawn from the test split for conditional coverage.
    pub conditional_points: usize,
    /// Conditional draws per covariate.
    pub conditional_mc: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            epsilon: 0.1,
            steps: 200,
            conditional_points: 200,
            conditional_mc: 2000,
            seed: 0,
        }
    }
}

/// Test metrics of one method. Costs follow the `−ξᵀx` convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub cvar: f64,
    pub mean_cost: f64,
    pub marginal_coverage: f64,
    pub conditional_coverage: Vec<f64>,
    pub costs: Vec<f64>,
    pub covered: Vec<bool>,
    /// Samples dropped because the solver failed.
    pub failures: usize,
    pub wall_ms: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

/// Solves the robust problem for every test covariate (to convergence
/// within `cfg.steps`), realizes `−ξᵀx*`, and aggregates. With an oracle,
/// conditional coverage is estimated at covariates drawn uniformly from the
/// test split.
pub fn evaluate(
    method: &str,
    family: &dyn SetFamily,
    test: &Dataset,
    cfg: &EvalConfig,
    oracle: Option<&MixtureEnv>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::input("test split is empty"));
    }
    let problem = RobustProblem::portfolio(test.uncertainty_dim());
    let t0 = Instant::now();
    let per_sample: Vec<Result<(f64, bool)>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let set = family.set(&test.psi[i])?;
            let point = solve_cro(&problem, &set, &problem.uniform_point(), cfg.steps)?;
            Ok((-test.xi[i].dot(&point.x), set.contains(&test.xi[i])?))
        })
        .collect();
    let solve_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut costs = Vec::new();
    let mut covered = Vec::new();
    let mut failures = 0;
    for (i, r) in per_sample.into_iter().enumerate() {
        match r {
            Ok((c, h)) => {
                costs.push(c);
                covered.push(h);
            }
            Err(e) => {
                log::warn!("{method}: sample {i} excluded: {e}");
                failures += 1;
            }
        }
    }
    if costs.is_empty() {
        return Err(Error::numeric(format!("{method}: every test sample failed")));
    }
    let t1 = Instant::now();
    let conditional_coverage = match oracle {
        Some(env) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let picks: Vec<usize> = (0..cfg.conditional_points).map(|_| rng.random_range(0..test.len())).collect();
            picks
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let set = family.set(&test.psi[i])?;
                    env.conditional_coverage_prob(&test.psi[i], &set, cfg.conditional_mc, cfg.seed.wrapping_add(1 + k as u64))
                })
                .collect::<Result<Vec<f64>>>()?
        }
        None => Vec::new(),
    };
    let mut wall_ms = BTreeMap::new();
    wall_ms.insert("solve".to_string(), solve_ms);
    wall_ms.insert("conditional".to_string(), t1.elapsed().as_secs_f64() * 1e3);
    Ok(EvalReport {
        method: method.to_string(),
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        cvar: cvar(&costs, cfg.alpha)?,
        mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
        marginal_coverage: covered.iter().filter(|&&b| b).count() as f64 / covered.len() as f64,
        conditional_coverage,
        costs,
        covered,
        failures,
        wall_ms,
        config: serde_json::to_value(cfg)?,
    })
}

/// Empirical CDF as `(value, fraction ≤ value)` at each distinct value.
pub fn empirical_cdf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::input("CDF of an empty sample"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in s.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = f,
            _ => out.push((*v, f)),
        }
    }
    Ok(out)
}

/// CDF of the per-covariate conditional coverage in `report`.
pub fn coverage_cdf(report: &EvalReport) -> Result<Vec<(f64, f64)>> {
    empirical_cdf(&report.conditional_coverage)
}

/// Linear-interpolated quantile of `samples`.
pub fn quantile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Mean and Student-t half-width; the half-width is `None` for one value.
pub fn t_interval(values: &[f64], confidence: f64) -> Result<(f64, Option<f64>)> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if values.is_empty() {
        return Err(Error::input("interval of an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::input(e.to_string()))?
        .inverse_cdf(0.5 + confidence / 2.0);
    Ok((mean, Some(t * (var / n).sqrt())))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub cvar_mean: f64,
    pub cvar_half_width: Option<f64>,
    pub coverage_mean: f64,
    pub coverage_half_width: Option<f64>,
}

/// Groups reports by method (in first-appearance order) and summarizes
/// CVaR and marginal coverage with Student-t intervals.
pub fn compare(reports: &[EvalReport], confidence: f64) -> Result<Vec<SummaryRow>> {
    let first = reports.first().ok_or_else(|| Error::input("nothing to compare"))?;
    if reports.iter().any(|r| r.alpha != first.alpha || r.epsilon != first.epsilon) {
        return Err(Error::input("reports were produced with different risk or coverage levels"));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let group: Vec<&EvalReport> = reports.iter().filter(|r| r.method == m).collect();
            let cv: Vec<f64> = group.iter().map(|r| r.cvar).collect();
            let co: Vec<f64> = group.iter().map(|r| r.marginal_coverage).collect();
            let (cvar_mean, cvar_half_width) = t_interval(&cv, confidence)?;
            let (coverage_mean, coverage_half_width) = t_interval(&co, confidence)?;
            Ok(SummaryRow {
                method: m.to_string(),
                runs: group.len(),
                cvar_mean,
                cvar_half_width,
                coverage_mean,
                coverage_half_width,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn write_table_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "runs", "cvar_mean", "cvar_ci", "coverage_mean", "coverage_ci"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.runs.to_string(),
            format!("{:.6}", r.cvar_mean),
            fmt_opt(r.cvar_half_width),
            format!("{:.6}", r.coverage_mean),
            fmt_opt(r.coverage_half_width),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_cdf_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["conditional_coverage", "cumulative_fraction"])?;
    for (p, f) in coverage_cdf(report)? {
        w.write_record([p.to_string(), f.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-covariate ellipse parameters of each family together with draws
/// from the true conditional law, for plotting.
pub fn sets_snapshot(
    families: &[(&str, &dyn SetFamily)],
    psis: &[DVector<f64>],
    env: Option<&MixtureEnv>,
    draws: usize,
    seed: u64,
) -> Result<serde_json::Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for psi in psis {
        let mut sets = serde_json::Map::new();
        for (name, fam) in families {
            sets.insert(name.to_string(), serde_json::to_value(fam.set(psi)?.to_json())?);
        }
        let samples: Vec<Vec<f64>> = match env {
            Some(e) => {
                let c = e.conditional(psi)?;
                (0..draws).map(|_| c.sample(&mut rng).iter().copied().collect()).collect()
            }
            None => Vec::new(),
        };
        points.push(serde_json::json!({
            "psi": psi.iter().collect::<Vec<_>>(),
            "sets": sets,
            "oracle_samples": samples,
        }));
    }
    Ok(serde_json::Value::Array(points))
}
