//! Data sources: a Gaussian-mixture environment with an exact conditional
//! oracle, and daily stock panels turned into (covariate, return) samples.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::Ellipsoid;

/// One Gaussian component over the joint vector `(ψ, ξ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major joint covariance.
    pub cov: Vec<Vec<f64>>,
}

/// Mixture of joint Gaussians over covariates `ψ ∈ R^{covariate_dim}` and
/// returns `ξ ∈ R^{uncertainty_dim}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEnv {
    pub covariate_dim: usize,
    pub uncertainty_dim: usize,
    pub components: Vec<MixtureComponent>,
}

/// Conditional law of `ξ` given `ψ`: a Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
}

fn block_cov(psi_sd: [f64; 2], xi_sd: [f64; 2], corr: [[f64; 2]; 2]) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; 4]; 4];
    for i in 0..2 {
        s[i][i] = psi_sd[i] * psi_sd[i];
        s[2 + i][2 + i] = xi_sd[i] * xi_sd[i];
        for j in 0..2 {
            let c = corr[i][j] * psi_sd[i] * xi_sd[j];
            s[i][2 + j] = c;
            s[2 + j][i] = c;
        }
    }
    s
}

impl MixtureEnv {
    /// Three components over two covariates and two assets. The third
    /// component gives asset 1 a rare upside jump, so symmetric sets that
    /// cover it look pessimistic about that asset.
    pub fn default_env() -> Self {
        Self {
            covariate_dim: 2,
            uncertainty_dim: 2,
            components: vec![
                MixtureComponent {
                    weight: 0.60,
                    mean: vec![-0.5, 0.5, 0.10, 0.10],
                    cov: block_cov([1.0, 1.0], [0.15, 0.5], [[0.4, 0.0], [0.0, 0.3]]),
                },
                MixtureComponent {
                    weight: 0.25,
                    mean: vec![0.5, -1.0, 0.0, 0.6],
                    cov: block_cov([1.0, 1.0], [0.2, 0.5], [[0.3, 0.0], [0.0, 0.5]]),
                },
                MixtureComponent {
                    weight: 0.15,
                    mean: vec![1.0, 0.5, 2.5, 0.0],
                    cov: block_cov([1.0, 1.0], [0.8, 0.5], [[0.6, 0.0], [0.0, 0.3]]),
                },
            ],
        }
    }

    /// Single joint Gaussian.
    pub fn gaussian(covariate_dim: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariate_dim >= d || cov.shape() != (d, d) {
            return Err(Error::input("joint Gaussian has inconsistent dimensions"));
        }
        let env = Self {
            covariate_dim,
            uncertainty_dim: d - covariate_dim,
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: mean.iter().copied().collect(),
                cov: (0..d).map(|i| cov.row(i).iter().copied().collect()).collect(),
            }],
        };
        env.validate()?;
        Ok(env)
    }

    pub fn joint_dim(&self) -> usize {
        self.covariate_dim + self.uncertainty_dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.joint_dim();
        if self.covariate_dim == 0 || self.uncertainty_dim == 0 {
            return Err(Error::input("environment needs covariates and uncertain returns"));
        }
        if self.components.is_empty() {
            return Err(Error::input("environment has no components"));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::input("component weights must be nonnegative and sum to 1"));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return Err(Error::input(format!("component {k} has the wrong dimension")));
            }
            let m = self.cov_matrix(k);
            if (&m - m.transpose()).amax() > 1e-12 || m.cholesky().is_none() {
                return Err(Error::input(format!("component {k} covariance is not positive definite")));
            }
        }
        Ok(())
    }

    fn cov_matrix(&self, k: usize) -> DMatrix<f64> {
        let d = self.joint_dim();
        DMatrix::from_fn(d, d, |i, j| self.components[k].cov[i][j])
    }

    /// Copy with every component mean jittered by `N(0, 0.1²)`.
    pub fn perturbed(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = self.clone();
        for c in &mut env.components {
            for v in &mut c.mean {
                let z: f64 = rng.sample(StandardNormal);
                *v += 0.1 * z;
            }
        }
        env
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env: Self = serde_json::from_str(s)?;
        env.validate()?;
        Ok(env)
    }

    /// `n` i.i.d. draws, split into train/validation/test by [`standard_split`].
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::input("sample size must be positive"));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .map_err(|e| Error::input(format!("bad component weights: {e}")))?;
        let chols: Vec<DMatrix<f64>> = (0..self.components.len())
            .map(|k| self.cov_matrix(k).cholesky().expect("validated").l())
            .collect();
        let p = self.covariate_dim;
        let d = self.joint_dim();
        let mut psi = Vec::with_capacity(n);
        let mut xi = Vec::with_capacity(n);
        for _ in 0..n {
            let k = weights.sample(&mut rng);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = DVector::from_column_slice(&self.components[k].mean) + &chols[k] * z;
            psi.push(x.rows(0, p).into_owned());
            xi.push(x.rows(p, d - p).into_owned());
        }
        let split = standard_split(n);
        Ok(Dataset {
            psi,
            xi,
            split,
            dates: Vec::new(),
            provenance: format!("mixture seed {seed}"),
        })
    }

    /// Conditional mixture of `ξ | ψ`: per-component Gaussian conditioning,
    /// weights reweighted by each component's density of `ψ`.
    pub fn conditional(&self, psi: &DVector<f64>) -> Result<ConditionalMixture> {
        let p = self.covariate_dim;
        let m = self.uncertainty_dim;
        if psi.len() != p {
            return Err(Error::input(format!("covariate has dimension {} but the environment has {p}", psi.len())));
        }
        let mut logw = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for (k, c) in self.components.iter().enumerate() {
            let s = self.cov_matrix(k);
            let mu = DVector::from_column_slice(&c.mean);
            let spp = s.view((0, 0), (p, p)).into_owned();
            let sxp = s.view((p, 0), (m, p)).into_owned();
            let sxx = s.view((p, p), (m, m)).into_owned();
            let chol = spp.cholesky().ok_or_else(|| Error::numeric("covariate block is singular"))?;
            let diff = psi - mu.rows(0, p);
            let sol = chol.solve(&diff);
            let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            logw.push(if c.weight > 0.0 {
                c.weight.ln() - 0.5 * diff.dot(&sol) - 0.5 * logdet
            } else {
                f64::NEG_INFINITY
            });
            means.push(mu.rows(p, m) + &sxp * &sol);
            let a = chol.solve(&sxp.transpose());
            let cov = &sxx - &sxp * a;
            covs.push((&cov + cov.transpose()) * 0.5);
        }
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let chols = covs
            .iter()
            .map(|c| c.clone().cholesky().map(|ch| ch.l()).ok_or_else(|| Error::numeric("conditional covariance is singular")))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionalMixture {
            weights,
            means,
            covs,
            chols,
        })
    }

    /// Fraction of `n_mc` conditional draws of `ξ | ψ` inside `set`.
    pub fn conditional_coverage_prob(&self, psi: &DVector<f64>, set: &Ellipsoid, n_mc: usize, seed: u64) -> Result<f64> {
        if n_mc == 0 {
            return Err(Error::input("Monte Carlo size must be positive"));
        }
        let cond = self.conditional(psi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        for _ in 0..n_mc {
            if set.contains(&cond.sample(&mut rng))? {
                hits += 1;
            }
        }
        Ok(hits as f64 / n_mc as f64)
    }

    /// Ellipsoid centered at the conditional mean, shaped by the conditional
    /// covariance, with the radius set so it holds a `1 − ε` share of the
    /// conditional law: exactly via the chi-squared quantile for a single
    /// Gaussian, otherwise by the empirical quantile of `n_mc` draws.
    pub fn oracle_set(&self, psi: &DVector<f64>, epsilon: f64, n_mc: usize, seed: u64) -> Result<Ellipsoid> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::input("miscoverage level must lie in [0, 1)"));
        }
        let cond = self.conditional(psi)?;
        let mean = cond.mean();
        let cov = cond.covariance();
        let unit = Ellipsoid::from_shape(mean, &cov, 1.0)?;
        let active = cond.weights.iter().filter(|&&w| w > 1e-15).count();
        let r = if active == 1 {
            let k = cond.weights.iter().position(|&w| w > 1e-15).expect("one active component");
            let unit = Ellipsoid::from_shape(cond.means[k].clone(), &cond.covs[k], 1.0)?;
            return unit.with_scale(chi_squared_quantile(self.uncertainty_dim, 1.0 - epsilon)?);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d2 = (0..n_mc.max(1))
                .map(|_| unit.mahalanobis_sq(&cond.sample(&mut rng)))
                .collect::<Result<Vec<f64>>>()?;
            d2.sort_by(f64::total_cmp);
            let idx = (((1.0 - epsilon) * d2.len() as f64).ceil() as usize).clamp(1, d2.len()) - 1;
            d2[idx]
        };
        unit.with_scale(r)
    }
}

/// `χ²_m` quantile; closed form for two degrees of freedom.
pub fn chi_squared_quantile(dof: usize, p: f64) -> Result<f64> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if !(0.0..1.0).contains(&p) {
        return Err(Error::input("quantile level must lie in [0, 1)"));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if dof == 2 {
        return Ok(-2.0 * (1.0 - p).ln());
    }
    let d = ChiSquared::new(dof as f64).map_err(|e| Error::input(e.to_string()))?;
    Ok(d.inverse_cdf(p))
}

impl ConditionalMixture {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m.axpy(*w, mu, 1.0);
        }
        m
    }

    /// Mixture covariance `Σ_k w_k (S_k + (m_k − m)(m_k − m)ᵀ)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let d = mu - &mean;
            c += (s + &d * d.transpose()) * *w;
        }
        c
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.means[k] + &self.chols[k] * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::input(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Split tags for `n` samples in order: `⌊0.3n⌋` train, `⌊0.2n⌋` validation,
/// the remainder test.
pub fn standard_split(n: usize) -> Vec<Split> {
    let train = n * 3 / 10;
    let val = n / 5;
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Validation
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Samples `(ψ_i, ξ_i)` with split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub psi: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub split: Vec<Split>,
    /// Observation dates for time-series data; empty for synthetic draws.
    pub dates: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.psi.first().map_or(0, |p| p.len())
    }

    pub fn uncertainty_dim(&self) -> usize {
        self.xi.first().map_or(0, |x| x.len())
    }

    /// Rows tagged `split`, in order.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == split).collect();
        self.rows(&idx, split)
    }

    fn rows(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            psi: idx.iter().map(|&i| self.psi[i].clone()).collect(),
            xi: idx.iter().map(|&i| self.xi[i].clone()).collect(),
            split: vec![split; idx.len()],
            dates: if self.dates.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.dates[i].clone()).collect()
            },
            provenance: self.provenance.clone(),
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.split.iter().filter(|&&t| t == s).count();
        (count(Split::Train), count(Split::Validation), count(Split::Test))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.xi.len() != n || self.split.len() != n || !(self.dates.is_empty() || self.dates.len() == n) {
            return Err(Error::input("dataset columns have different lengths"));
        }
        let (p, m) = (self.covariate_dim(), self.uncertainty_dim());
        if self.psi.iter().any(|v| v.len() != p) || self.xi.iter().any(|v| v.len() != m) {
            return Err(Error::input("dataset rows have inconsistent dimensions"));
        }
        Ok(())
    }

    /// CSV with columns `[date,]split,psi_0..,xi_0..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::new();
        if !self.dates.is_empty() {
            header.push("date".to_string());
        }
        header.push("split".into());
        header.extend((0..self.covariate_dim()).map(|i| format!("psi_{i}")));
        header.extend((0..self.uncertainty_dim()).map(|i| format!("xi_{i}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = Vec::with_capacity(header.len());
            if !self.dates.is_empty() {
                row.push(self.dates[i].clone());
            }
            row.push(self.split[i].as_str().to_string());
            row.extend(self.psi[i].iter().map(|v| v.to_string()));
            row.extend(self.xi[i].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::input(format!("dataset not found: {}", path.display())));
        }
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let has_date = header.first().map(String::as_str) == Some("date");
        let split_col = usize::from(has_date);
        if header.get(split_col).map(String::as_str) != Some("split") {
            return Err(Error::input(format!("{}: missing split column", path.display())));
        }
        let psi_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("psi_")).collect();
        let xi_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("xi_")).collect();
        if psi_cols.is_empty() || xi_cols.is_empty() {
            return Err(Error::input(format!("{}: needs psi_* and xi_* columns", path.display())));
        }
        let mut ds = Dataset {
            psi: Vec::new(),
            xi: Vec::new(),
            split: Vec::new(),
            dates: Vec::new(),
            provenance: path.display().to_string(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::input(format!("{}: bad number on line {}", path.display(), line + 2)))
            };
            if has_date {
                ds.dates.push(rec.get(0).unwrap_or_default().to_string());
            }
            ds.split.push(Split::parse(rec.get(split_col).unwrap_or_default())?);
            ds.psi.push(DVector::from_vec(psi_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?));
            ds.xi.push(DVector::from_vec(xi_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?));
        }
        if ds.is_empty() {
            return Err(Error::input(format!("{}: no rows", path.display())));
        }
        Ok(ds)
    }
}

/// Daily prices and volumes for a set of assets plus market index levels.
#[derive(Debug, Clone, PartialEq)]
pub struct StockPanel {
    pub dates: Vec<String>,
    pub assets: Vec<String>,
    /// `closes[t][a]`.
    pub closes: Vec<Vec<f64>>,
    pub volumes: Vec<Vec<f64>>,
    pub indices: Vec<String>,
    pub index_levels: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StockConfig {
    /// Trailing window for the volume z-score.
    pub volume_window: usize,
}

impl Default for StockConfig {
    fn default() -> Self {
        Self { volume_window: 20 }
    }
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

/// Reads `date, <A>_close, <A>_volume, ..., <index>...` columns. Blank
/// cells are forward-filled; leading rows with gaps are dropped.
pub fn load_stock_panel(path: &Path) -> Result<StockPanel> {
    if !path.exists() {
        return Err(Error::input(format!("price file not found: {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("date") {
        return Err(Error::input(format!("{}: first column must be date", path.display())));
    }
    let mut assets = Vec::new();
    let mut close_cols = Vec::new();
    let mut indices = Vec::new();
    let mut index_cols = Vec::new();
    for (i, h) in header.iter().enumerate().skip(1) {
        if let Some(a) = h.strip_suffix("_close") {
            assets.push(a.to_string());
            close_cols.push(i);
        } else if !h.ends_with("_volume") {
            indices.push(h.clone());
            index_cols.push(i);
        }
    }
    let vol_cols: Vec<usize> = assets
        .iter()
        .map(|a| {
            let name = format!("{a}_volume");
            header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| Error::input(format!("{}: missing column {name}", path.display())))
        })
        .collect::<Result<_>>()?;
    if assets.is_empty() {
        return Err(Error::input(format!("{}: no *_close columns", path.display())));
    }
    let mut dates = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let cols: Vec<usize> = close_cols.iter().chain(&vol_cols).chain(&index_cols).copied().collect();
    for (line, rec) in r.records().enumerate() {
        let line = line + 2;
        let rec = rec?;
        let date = rec.get(0).unwrap_or_default().trim().to_string();
        if !is_iso_date(&date) {
            return Err(Error::input(format!("{}: bad date {date:?} on line {line}", path.display())));
        }
        if dates.last().is_some_and(|d: &String| *d >= date) {
            return Err(Error::input(format!("{}: dates not increasing on line {line}", path.display())));
        }
        let mut row = Vec::with_capacity(cols.len());
        for &c in &cols {
            let cell = rec.get(c).unwrap_or_default().trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::input(format!("{}: unparseable value {cell:?} on line {line}", path.display())))?;
                row.push(Some(v));
            }
        }
        dates.push(date);
        rows.push(row);
    }
    // forward fill, then drop leading rows that still have gaps
    for t in 1..rows.len() {
        for c in 0..cols.len() {
            if rows[t][c].is_none() {
                rows[t][c] = rows[t - 1][c];
            }
        }
    }
    let first = rows.iter().position(|r| r.iter().all(Option::is_some)).unwrap_or(rows.len());
    let dates = dates.split_off(first);
    let rows: Vec<Vec<f64>> = rows[first..].iter().map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect()).collect();
    if dates.len() < 2 {
        return Err(Error::input(format!("{}: fewer than 2 usable dates", path.display())));
    }
    let na = assets.len();
    let ni = indices.len();
    Ok(StockPanel {
        dates,
        assets,
        closes: rows.iter().map(|r| r[..na].to_vec()).collect(),
        volumes: rows.iter().map(|r| r[na..2 * na].to_vec()).collect(),
        indices,
        index_levels: rows.iter().map(|r| r[2 * na..2 * na + ni].to_vec()).collect(),
    })
}

impl StockPanel {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_string()];
        for a in &self.assets {
            header.push(format!("{a}_close"));
        }
        for a in &self.assets {
            header.push(format!("{a}_volume"));
        }
        header.extend(self.indices.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.dates.len() {
            let mut row = vec![self.dates[t].clone()];
            row.extend(self.closes[t].iter().map(|v| v.to_string()));
            row.extend(self.volumes[t].iter().map(|v| v.to_string()));
            row.extend(self.index_levels[t].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Panel restricted to the given asset columns.
    pub fn select_assets(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.assets.len()) {
            return Err(Error::input("asset selection out of range"));
        }
        Ok(Self {
            dates: self.dates.clone(),
            assets: idx.iter().map(|&i| self.assets[i].clone()).collect(),
            closes: self.closes.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
            volumes: self.volumes.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
            indices: self.indices.clone(),
            index_levels: self.index_levels.clone(),
        })
    }
}

/// Business-day-like synthetic panel: correlated log-normal price paths,
/// log-normal volumes and index levels driven by the same market factor.
pub fn synthetic_panel(n_assets: usize, n_indices: usize, n_days: usize, seed: u64) -> StockPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut closes = vec![(0..n_assets).map(|a| 50.0 + 10.0 * a as f64).collect::<Vec<_>>()];
    let mut volumes = Vec::new();
    let mut levels = vec![vec![1000.0; n_indices]];
    let mut dates = Vec::new();
    let mut day = 0usize;
    for t in 0..n_days {
        // skip weekends on a 7-day calendar starting on a Monday
        while day % 7 >= 5 {
            day += 1;
        }
        dates.push(calendar_date(day));
        day += 1;
        let market: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
        if t > 0 {
            let prev = closes[t - 1].clone();
            closes.push(
                prev.iter()
                    .enumerate()
                    .map(|(a, p)| {
                        let beta = 0.5 + 0.1 * (a % 5) as f64;
                        let eps: f64 = rng.sample(StandardNormal);
                        let ret = 0.0003 + beta * market + 0.012 * eps;
                        (p * (1.0 + ret)).max(0.01)
                    })
                    .collect(),
            );
            let prev = levels[t - 1].clone();
            levels.push(prev.iter().map(|l| l * (1.0 + market + 0.002 * rng.sample::<f64, _>(StandardNormal))).collect());
        }
        volumes.push(
            (0..n_assets)
                .map(|_| (13.0 + 0.3 * rng.sample::<f64, _>(StandardNormal) + 20.0 * market.abs()).exp().round())
                .collect(),
        );
    }
    StockPanel {
        dates,
        assets: (0..n_assets).map(|a| format!("S{a:02}")).collect(),
        closes,
        volumes,
        indices: (0..n_indices).map(|i| format!("IDX{i}")).collect(),
        index_levels: levels,
    }
}

fn calendar_date(day: usize) -> String {
    // days since 2015-01-05
    const DAYS: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let (mut y, mut m, mut d) = (2015u32, 0usize, 5u32 + day as u32);
    loop {
        let leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
        let len = if m == 1 && leap { 29 } else { DAYS[m] };
        if d <= len {
            break;
        }
        d -= len;
        m += 1;
        if m == 12 {
            m = 0;
            y += 1;
        }
    }
    format!("{y:04}-{:02}-{d:02}", m + 1)
}

fn pct(now: f64, prev: f64) -> f64 {
    (now - prev) / prev
}

/// Daily returns `ξ_t` with covariates built only from day `t−1`
/// information: previous-day asset returns, previous-day volume z-scores
/// over a trailing window, and previous-day index returns.
pub fn make_returns(panel: &StockPanel, config: &StockConfig) -> Result<Dataset> {
    let n = panel.dates.len();
    if n < 3 {
        return Err(Error::input("need at least 3 dates to form lagged covariates"));
    }
    if config.volume_window < 2 {
        return Err(Error::input("volume window must be at least 2"));
    }
    let na = panel.assets.len();
    let mut ds = Dataset {
        psi: Vec::new(),
        xi: Vec::new(),
        split: Vec::new(),
        dates: Vec::new(),
        provenance: "stock panel".into(),
    };
    for t in 2..n {
        let xi = DVector::from_fn(na, |a, _| pct(panel.closes[t][a], panel.closes[t - 1][a]));
        let mut psi = Vec::new();
        for a in 0..na {
            psi.push(pct(panel.closes[t - 1][a], panel.closes[t - 2][a]));
        }
        let lo = t.saturating_sub(config.volume_window);
        for a in 0..na {
            let win: Vec<f64> = (lo..t).map(|s| panel.volumes[s][a].max(1.0).ln()).collect();
            let mean = win.iter().sum::<f64>() / win.len() as f64;
            let var = win.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / win.len() as f64;
            let last = win[win.len() - 1];
            psi.push(if var > 0.0 { (last - mean) / var.sqrt() } else { 0.0 });
        }
        for i in 0..panel.indices.len() {
            psi.push(pct(panel.index_levels[t - 1][i], panel.index_levels[t - 2][i]));
        }
        if xi.iter().chain(&psi).any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite return on {}", panel.dates[t])));
        }
        ds.psi.push(DVector::from_vec(psi));
        ds.xi.push(xi);
        ds.split.push(Split::Train);
        ds.dates.push(panel.dates[t].clone());
    }
    Ok(ds)
}

/// One chronological train/validation/test window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub data: Dataset,
}

/// Consecutive non-overlapping train/validation/test blocks, advanced by
/// `stride` rows.
pub fn rolling_windows(dataset: &Dataset, train_len: usize, val_len: usize, test_len: usize, stride: usize) -> Result<Vec<Window>> {
    if train_len == 0 || val_len == 0 || test_len == 0 || stride == 0 {
        return Err(Error::input("window lengths and stride must be positive"));
    }
    let need = train_len + val_len + test_len;
    if dataset.len() < need {
        return Err(Error::input(format!(
            "rolling windows need {need} rows but only {} are available",
            dataset.len()
        )));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + need <= dataset.len() {
        let idx: Vec<usize> = (start..start + need).collect();
        let mut data = dataset.rows(&idx, Split::Train);
        for (k, s) in data.split.iter_mut().enumerate() {
            *s = if k < train_len {
                Split::Train
            } else if k < train_len + val_len {
                Split::Validation
            } else {
                Split::Test
            };
        }
        out.push(Window { start, data });
        start += stride;
    }
    Ok(out)
}

/// Sorted random subset of `k` of `n` asset indices.
pub fn sample_assets(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::input(format!("cannot pick {k} of {n} assets")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}
