//! Estimate-then-optimize set constructions.
//!
//! * Gaussian: a network predicts a conditional mean and the Cholesky factor
//!   of the conditional precision by maximum likelihood; the set is the
//!   chi-squared level set of that Gaussian.
//! * Conformal: a least-squares point predictor gives the center, residual
//!   covariance gives the shape (globally or from the `k` nearest covariate
//!   neighbors), and the size is an order statistic of held-out scores.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{chi_squared_quantile, Dataset};
use crate::error::{Error, Result};
use crate::nn::{backward_into, Mlp, Optimizer, OptimizerKind};
use crate::uncertainty::Ellipsoid;

/// Minibatch Adam settings shared by the baseline fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// L2 penalty on all network weights.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 200,
            batch: 64,
            lr: 5e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Runs `epochs` passes of shuffled minibatches; `batch_grad` fills the
/// gradient of the mean batch loss and returns that loss. Returns the mean
/// loss of the last epoch.
fn minibatch_adam<F>(params: &mut [f64], n: usize, cfg: &FitConfig, mut batch_grad: F) -> Result<f64>
where
    F: FnMut(&[f64], &[usize], &mut [f64]) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::input("cannot fit on an empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.len()];
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_grad(params, chunk, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric("baseline fit diverged"));
            }
            for (g, p) in grad.iter_mut().zip(params.iter()) {
                *g += cfg.weight_decay * p;
            }
            opt.step(params, &grad);
            total += loss * chunk.len() as f64;
        }
        last = total / n as f64;
    }
    Ok(last)
}

fn final_bias_range(mlp: &Mlp) -> std::ops::Range<usize> {
    mlp.layout().last().expect("at least one layer").range()
}

fn check_split(data: &Dataset) -> Result<(usize, usize)> {
    if data.is_empty() {
        return Err(Error::input("cannot fit on an empty split"));
    }
    data.validate()?;
    Ok((data.covariate_dim(), data.uncertainty_dim()))
}

fn sample_mean(xs: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(xs[0].len());
    for x in xs {
        m += x;
    }
    m / xs.len() as f64
}

fn sample_cov(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let mean = sample_mean(xs);
    let d = mean.len();
    let mut c = DMatrix::zeros(d, d);
    for x in xs {
        let z = x - &mean;
        c += &z * z.transpose();
    }
    c / (xs.len().max(2) - 1) as f64
}

/// Conditional Gaussian `ξ | ψ ~ N(ν(ψ), (L(ψ) L(ψ)ᵀ)⁻¹)` with `L` lower
/// triangular, positive diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianConditionalModel {
    pub mlp: Mlp,
    pub params: Vec<f64>,
    pub uncertainty_dim: usize,
    /// Mean per-sample negative log-likelihood on the training split
    /// (without the `log 2π` constant).
    pub train_nll: f64,
}

fn decode_lower(raw: &[f64], m: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            l[(i, j)] = if i == j { raw[k].exp() } else { raw[k] };
            k += 1;
        }
    }
    l
}

fn encode_lower(l: &DMatrix<f64>) -> Vec<f64> {
    let m = l.nrows();
    let mut raw = Vec::new();
    for i in 0..m {
        for j in 0..=i {
            raw.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    raw
}

/// `−Σ log L_jj + ½|Lᵀ(ξ − ν)|²` and its gradient with respect to the raw
/// outputs `(ν, L_raw)`.
fn gaussian_nll(out: &[f64], xi: &DVector<f64>, m: usize) -> (f64, Vec<f64>) {
    let nu = DVector::from_column_slice(&out[..m]);
    let l = decode_lower(&out[m..], m);
    let u = xi - nu;
    let w = l.transpose() * &u;
    let mut value = 0.5 * w.norm_squared();
    let mut g = vec![0.0; out.len()];
    let gnu = -(&l * &w);
    g[..m].copy_from_slice(gnu.as_slice());
    let mut k = m;
    for i in 0..m {
        value -= l[(i, i)].ln();
        for j in 0..=i {
            let gl = u[i] * w[j];
            g[k] = if i == j { (gl - 1.0 / l[(i, i)]) * l[(i, i)] } else { gl };
            k += 1;
        }
    }
    (value, g)
}

impl GaussianConditionalModel {
    /// `(μ̂(ψ), Σ̂(ψ))`.
    pub fn predict(&self, psi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let tape = self.mlp.forward(&self.params, psi.as_slice())?;
        let out = tape.output();
        let m = self.uncertainty_dim;
        let l = decode_lower(&out[m..], m);
        let precision = &l * l.transpose();
        let cov = precision
            .cholesky()
            .ok_or_else(|| Error::numeric("predicted precision is singular"))?
            .inverse();
        Ok((DVector::from_column_slice(&out[..m]), (&cov + cov.transpose()) * 0.5))
    }

    /// Mean negative log-likelihood (without `log 2π`) of `data` under the model.
    pub fn mean_nll(&self, data: &Dataset) -> Result<f64> {
        let m = self.uncertainty_dim;
        let mut total = 0.0;
        for (p, x) in data.psi.iter().zip(&data.xi) {
            let tape = self.mlp.forward(&self.params, p.as_slice())?;
            total += gaussian_nll(tape.output(), x, m).0;
        }
        Ok(total / data.len() as f64)
    }
}

/// Maximum-likelihood fit by minibatch Adam. The output bias starts at the
/// sample mean and the Cholesky factor of the sample precision.
pub fn fit_gaussian_eto(train: &Dataset, cfg: &FitConfig) -> Result<GaussianConditionalModel> {
    let (p, m) = check_split(train)?;
    let nl = m * (m + 1) / 2;
    let mlp = Mlp::new(p, cfg.hidden.clone(), m + nl);
    let mut params = vec![0.0; mlp.num_params()];
    mlp.init_into(&mut params, &mut ChaCha8Rng::seed_from_u64(cfg.seed), 0.1);
    let mean = sample_mean(&train.xi);
    let mut cov = sample_cov(&train.xi);
    let scale = 1e-6 * (1.0 + cov.diagonal().amax());
    for i in 0..m {
        cov[(i, i)] += scale;
    }
    let prec = cov
        .cholesky()
        .ok_or_else(|| Error::numeric("sample covariance is singular"))?
        .inverse();
    let lp = prec.cholesky().ok_or_else(|| Error::numeric("sample precision is singular"))?.l();
    let bias = final_bias_range(&mlp);
    params[bias.start..bias.start + m].copy_from_slice(mean.as_slice());
    params[bias.start + m..bias.end].copy_from_slice(&encode_lower(&lp));
    minibatch_adam(&mut params, train.len(), cfg, |theta, idx, grad| {
        let mut total = 0.0;
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            let tape = mlp.forward(theta, train.psi[i].as_slice())?;
            let (v, g) = gaussian_nll(tape.output(), &train.xi[i], m);
            total += v;
            let seed: Vec<f64> = g.iter().map(|x| x * w).collect();
            backward_into(&tape, &seed, grad)?;
        }
        Ok(total * w)
    })?;
    let mut model = GaussianConditionalModel {
        mlp,
        params,
        uncertainty_dim: m,
        train_nll: 0.0,
    };
    model.train_nll = model.mean_nll(train)?;
    if !model.train_nll.is_finite() {
        return Err(Error::numeric("Gaussian fit produced a non-finite likelihood"));
    }
    Ok(model)
}

/// `{ξ : (ξ − μ̂)ᵀ Σ̂⁻¹ (ξ − μ̂) ≤ χ²_{m, 1−ε}}`.
pub fn eto_set(model: &GaussianConditionalModel, psi: &DVector<f64>, epsilon: f64) -> Result<Ellipsoid> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::input("miscoverage level must lie in [0, 1]"));
    }
    let (mu, cov) = model.predict(psi)?;
    let q = if epsilon >= 1.0 {
        0.0
    } else {
        chi_squared_quantile(model.uncertainty_dim, 1.0 - epsilon)?
    };
    Ellipsoid::from_shape(mu, &cov, q)
}

/// Least-squares regression network `ψ ↦ ξ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPredictor {
    pub mlp: Mlp,
    pub params: Vec<f64>,
}

impl PointPredictor {
    pub fn predict(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        let tape = self.mlp.forward(&self.params, psi.as_slice())?;
        Ok(DVector::from_column_slice(tape.output()))
    }
}

pub fn fit_point_predictor(train: &Dataset, cfg: &FitConfig) -> Result<PointPredictor> {
    let (p, m) = check_split(train)?;
    let mlp = Mlp::new(p, cfg.hidden.clone(), m);
    let mut params = vec![0.0; mlp.num_params()];
    mlp.init_into(&mut params, &mut ChaCha8Rng::seed_from_u64(cfg.seed), 0.1);
    let bias = final_bias_range(&mlp);
    params[bias].copy_from_slice(sample_mean(&train.xi).as_slice());
    minibatch_adam(&mut params, train.len(), cfg, |theta, idx, grad| {
        let mut total = 0.0;
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            let tape = mlp.forward(theta, train.psi[i].as_slice())?;
            let r: Vec<f64> = tape.output().iter().zip(train.xi[i].iter()).map(|(a, b)| a - b).collect();
            total += 0.5 * r.iter().map(|v| v * v).sum::<f64>();
            let seed: Vec<f64> = r.iter().map(|v| v * w).collect();
            backward_into(&tape, &seed, grad)?;
        }
        Ok(total * w)
    })?;
    Ok(PointPredictor { mlp, params })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeRule {
    Global,
    LocalKnn { k: usize },
}

impl ShapeRule {
    /// `k = max(30, n/20)` neighbors for `n` reference points.
    pub fn default_local(n: usize) -> Self {
        ShapeRule::LocalKnn { k: 30.max(n / 20) }
    }
}

pub const SHAPE_JITTER: f64 = 1e-6;

/// Calibrated conformal set family.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalCalibration {
    pub predictor: PointPredictor,
    pub rule: ShapeRule,
    /// Calibrated squared radius.
    pub q: f64,
    /// Covariates and residuals the shape is estimated from.
    pub ref_psi: Vec<DVector<f64>>,
    pub ref_resid: Vec<DVector<f64>>,
    global_shape: DMatrix<f64>,
}

fn residual_cov(res: &[&DVector<f64>]) -> DMatrix<f64> {
    let d = res[0].len();
    let n = res.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in res {
        mean += *r;
    }
    mean /= n;
    let mut c = DMatrix::identity(d, d) * SHAPE_JITTER;
    for r in res {
        let z = *r - &mean;
        c += &z * z.transpose() / (n - 1.0).max(1.0);
    }
    c
}

impl ConformalCalibration {
    /// Rebuilds a calibration from stored parts.
    pub fn from_parts(
        predictor: PointPredictor,
        rule: ShapeRule,
        q: f64,
        ref_psi: Vec<DVector<f64>>,
        ref_resid: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if ref_resid.len() < 2 || ref_psi.len() != ref_resid.len() {
            return Err(Error::input("shape estimation needs at least 2 paired reference points"));
        }
        if !(q >= 0.0) {
            return Err(Error::input("calibrated radius must be nonnegative"));
        }
        let global_shape = residual_cov(&ref_resid.iter().collect::<Vec<_>>());
        Ok(Self {
            predictor,
            rule,
            q,
            ref_psi,
            ref_resid,
            global_shape,
        })
    }

    /// Residual shape at `psi`.
    pub fn shape(&self, psi: &DVector<f64>) -> DMatrix<f64> {
        match self.rule {
            ShapeRule::Global => self.global_shape.clone(),
            ShapeRule::LocalKnn { k } => {
                let mut d: Vec<(f64, usize)> = self
                    .ref_psi
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p - psi).norm_squared(), i))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let near: Vec<&DVector<f64>> = d.iter().take(k.max(2)).map(|&(_, i)| &self.ref_resid[i]).collect();
                residual_cov(&near)
            }
        }
    }

    pub fn score(&self, psi: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        let center = self.predictor.predict(psi)?;
        Ellipsoid::from_shape(center, &self.shape(psi), 1.0)?.mahalanobis_sq(xi)
    }
}

/// Split-conformal calibration. The shape is estimated from the residuals
/// on `reference` (the predictor's training split), scores come from the
/// disjoint `calibration` split, and `q` is the `⌈(1−ε)(n+1)⌉`-th smallest
/// score.
pub fn calibrate_conformal(
    predictor: &PointPredictor,
    rule: ShapeRule,
    reference: &Dataset,
    calibration: &Dataset,
    epsilon: f64,
) -> Result<ConformalCalibration> {
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(Error::input("miscoverage level must lie in (0, 1)"));
    }
    if reference.len() < 2 {
        return Err(Error::input("shape estimation needs at least 2 reference points"));
    }
    let ref_resid = reference
        .psi
        .iter()
        .zip(&reference.xi)
        .map(|(p, x)| Ok(x - predictor.predict(p)?))
        .collect::<Result<Vec<_>>>()?;
    let global_shape = residual_cov(&ref_resid.iter().collect::<Vec<_>>());
    let mut cal = ConformalCalibration {
        predictor: predictor.clone(),
        rule,
        q: f64::NAN,
        ref_psi: reference.psi.clone(),
        ref_resid,
        global_shape,
    };
    let n = calibration.len();
    let rank = ((1.0 - epsilon) * (n as f64 + 1.0)).ceil() as usize;
    if n == 0 || rank > n {
        return Err(Error::input(format!(
            "calibration set too small: {n} points for level {}",
            1.0 - epsilon
        )));
    }
    let mut scores = calibration
        .psi
        .iter()
        .zip(&calibration.xi)
        .map(|(p, x)| cal.score(p, x))
        .collect::<Result<Vec<f64>>>()?;
    scores.sort_by(f64::total_cmp);
    cal.q = scores[rank.max(1) - 1];
    Ok(cal)
}

/// Center `ξ̂(ψ)`, shape `Σ_res(ψ)`, squared radius `q`.
pub fn conformal_set(cal: &ConformalCalibration, psi: &DVector<f64>) -> Result<Ellipsoid> {
    let center = cal.predictor.predict(psi)?;
    Ellipsoid::from_shape(center, &cal.shape(psi), cal.q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MixtureEnv, Split};
    use nalgebra::dvector;

    fn quick() -> FitConfig {
        FitConfig {
            hidden: vec![8],
            epochs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn nll_gradient_matches_differences() {
        let out = [0.3, -0.2, 0.1, 0.4, -0.3];
        let xi = dvector![1.0, -0.5];
        let (_, g) = gaussian_nll(&out, &xi, 2);
        for k in 0..out.len() {
            let mut a = out;
            let mut b = out;
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (gaussian_nll(&a, &xi, 2).0 - gaussian_nll(&b, &xi, 2).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn chi_squared_scale_for_two_assets() {
        let data = MixtureEnv::default_env().sample(100, 1).unwrap().subset(Split::Train);
        let model = fit_gaussian_eto(&data, &quick()).unwrap();
        let psi = &data.psi[0];
        let unit = eto_set(&model, psi, (-0.5f64).exp()).unwrap();
        assert!((unit.r() - 1.0).abs() < 1e-12);
        let set = eto_set(&model, psi, 0.1).unwrap();
        assert!((set.r() - 4.605170185988091).abs() < 1e-12);
        let degenerate = eto_set(&model, psi, 1.0).unwrap();
        assert_eq!(degenerate.r(), 0.0);
    }

    #[test]
    fn order_statistic_rank() {
        let train = MixtureEnv::default_env().sample(200, 2).unwrap();
        let pred = fit_point_predictor(&train.subset(Split::Train), &quick()).unwrap();
        let cal = train.subset(Split::Test);
        let small = Dataset {
            psi: cal.psi[..9].to_vec(),
            xi: cal.xi[..9].to_vec(),
            split: vec![Split::Validation; 9],
            dates: vec![],
            provenance: String::new(),
        };
        let c = calibrate_conformal(&pred, ShapeRule::Global, &train.subset(Split::Train), &small, 0.1).unwrap();
        let max = (0..9).map(|i| c.score(&small.psi[i], &small.xi[i]).unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(c.q, max);
        let tiny = Dataset {
            psi: cal.psi[..5].to_vec(),
            xi: cal.xi[..5].to_vec(),
            split: vec![Split::Validation; 5],
            dates: vec![],
            provenance: String::new(),
        };
        assert!(calibrate_conformal(&pred, ShapeRule::Global, &train.subset(Split::Train), &tiny, 0.1).is_err());
    }
}
