//! Drivers behind the `crokit` subcommands: run configuration, model
//! checkpoints, and the generate / train / evaluate / compare / backtest
//! pipelines. Every JSON artifact embeds the resolved [`RunConfig`]; CSV and
//! JSONL artifacts get it through the `config.json` written next to them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    calibrate_conformal, fit_gaussian_eto, fit_point_predictor, ConformalCalibration, FitConfig,
    GaussianConditionalModel, PointPredictor, ShapeRule,
};
use crate::coverage::FeatureMap;
use crate::data::{
    load_stock_panel, make_returns, rolling_windows, sample_assets, synthetic_panel, Dataset, MixtureEnv, Split,
    StockConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare, evaluate, quantile, sets_snapshot, EvalConfig, EvalReport, GaussianSets, LearnedSets, SetFamily,
    SummaryRow,
};
use crate::nn::{OptimizerKind, ParamVector, SetPredictor, SetPredictorConfig};
use crate::training::{initial_theta, select_model, train, Checkpoint, StopReason, TrainConfig, TrainMethod};
use crate::uncertainty::Ellipsoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    EtoEs,
    EtoCs,
    EtoCcs,
    Ecro,
    Dts,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::EtoEs, Method::EtoCs, Method::EtoCcs, Method::Ecro, Method::Dts];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::EtoEs => "eto-es",
            Method::EtoCs => "eto-cs",
            Method::EtoCcs => "eto-ccs",
            Method::Ecro => "ecro",
            Method::Dts => "dts",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Ecro | Method::Dts)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown method '{s}' (expected eto-es, eto-cs, eto-ccs, ecro or dts)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Samples drawn by `generate` and per benchmark seed.
    pub n: usize,
    /// Mixture environment JSON; the built-in environment when absent.
    pub env: Option<PathBuf>,
    /// Jitter the component means with the run seed.
    pub perturb: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            env: None,
            perturb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Benchmark seeds `0..seeds` when `compare` runs without inputs.
    pub seeds: u64,
    pub methods: Vec<Method>,
    /// Miscoverage levels of the benchmark; empty means the run's `epsilon`.
    pub epsilons: Vec<f64>,
    /// Level of the Student-t intervals in the table.
    pub confidence: f64,
    /// Covariates in the `sets.json` snapshot and oracle draws at each.
    pub snapshot_points: usize,
    pub snapshot_draws: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            methods: Method::ALL.to_vec(),
            epsilons: Vec::new(),
            confidence: 0.95,
            snapshot_points: 6,
            snapshot_draws: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// Price CSV; a synthetic panel is generated (and written) when absent.
    pub prices: Option<PathBuf>,
    pub synthetic_assets: usize,
    pub synthetic_indices: usize,
    pub synthetic_days: usize,
    /// Assets drawn per repeat.
    pub assets: usize,
    pub repeats: u64,
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
    pub stride: usize,
    pub methods: Vec<Method>,
    /// Miscoverage levels; empty means the run's `epsilon`.
    pub epsilons: Vec<f64>,
    pub stock: StockConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            prices: None,
            synthetic_assets: 30,
            synthetic_indices: 3,
            synthetic_days: 1400,
            assets: 15,
            repeats: 10,
            train_days: 500,
            val_days: 125,
            test_days: 250,
            stride: 250,
            methods: Method::ALL.to_vec(),
            epsilons: vec![0.3, 0.2, 0.1],
            stock: StockConfig::default(),
        }
    }
}

/// Everything a command needs. Loaded from TOML, then overridden by flags,
/// then [`RunConfig::resolve`]d so that the shared seed and risk levels are
/// pushed into every section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub method: Method,
    /// CVaR level `α`.
    pub alpha: f64,
    /// Target miscoverage `ε`.
    pub epsilon: f64,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
    pub data: DataConfig,
    pub ecro: TrainConfig,
    pub dts: TrainConfig,
    pub baseline: FitConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
    pub backtest: BacktestConfig,
}

/// Training defaults used for both learned methods.
pub fn default_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        optimizer: OptimizerKind::adam(),
        gamma: 0.5,
        ..TrainConfig::default()
    };
    cfg.coverage.features = FeatureMap::Quadratic;
    cfg
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            method: Method::Dts,
            alpha: 0.9,
            epsilon: 0.1,
            jobs: None,
            data: DataConfig::default(),
            ecro: default_train_config(),
            dts: default_train_config(),
            baseline: FitConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub alpha: Option<f64>,
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
    pub tro_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::input(format!("invalid configuration: {e}")))
    }

    /// Reads `path` (defaults when `None`), applies `overrides`, resolves.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::input(format!("cannot read configuration {}: {e}", p.display())))?;
                let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::input(format!("{}: {e}", p.display())))?;
                // input files named in a config are relative to the config itself
                let base = p.parent().unwrap_or(Path::new(""));
                for f in [&mut cfg.data.env, &mut cfg.backtest.prices].into_iter().flatten() {
                    if f.is_relative() {
                        *f = base.join(&*f);
                    }
                }
                cfg
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.resolve()
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.method {
            self.method = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.epsilon {
            self.epsilon = v;
            self.compare.epsilons.clear();
            self.backtest.epsilons.clear();
        }
        if let Some(v) = o.gamma {
            self.dts.gamma = v;
        }
        for t in [&mut self.ecro, &mut self.dts] {
            if let Some(v) = o.tro_steps {
                t.tro_steps = v;
            }
            if let Some(v) = o.epochs {
                t.max_epochs = v;
            }
            if let Some(v) = o.batch {
                t.batch_size = v;
            }
        }
        if let Some(v) = o.jobs {
            self.jobs = Some(v);
        }
    }

    /// Pushes the shared seed and levels into every section and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::input("alpha must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::input("epsilon must lie in (0, 1)"));
        }
        for t in [&mut self.ecro, &mut self.dts] {
            t.seed = self.seed;
            t.coverage.seed = self.seed;
            t.cvar_alpha = self.alpha;
            t.epsilon = self.epsilon;
            t.validate()?;
        }
        self.baseline.seed = self.seed;
        self.eval.seed = self.seed;
        self.eval.alpha = self.alpha;
        self.eval.epsilon = self.epsilon;
        if self.data.n == 0 {
            return Err(Error::input("data.n must be positive"));
        }
        if self.jobs == Some(0) {
            return Err(Error::input("jobs must be positive"));
        }
        for eps in self.compare.epsilons.iter().chain(&self.backtest.epsilons) {
            if !(*eps > 0.0 && *eps < 1.0) {
                return Err(Error::input("every swept epsilon must lie in (0, 1)"));
            }
        }
        if self.compare.seeds == 0 || self.compare.methods.is_empty() {
            return Err(Error::input("compare needs at least one seed and one method"));
        }
        Ok(self)
    }

    /// Same configuration with another seed and miscoverage level.
    pub fn with_seed_and_epsilon(&self, seed: u64, epsilon: f64) -> Result<Self> {
        let mut c = self.clone();
        c.seed = seed;
        c.epsilon = epsilon;
        c.resolve()
    }

    pub fn train_config(&self, method: Method) -> Option<&TrainConfig> {
        match method {
            Method::Ecro => Some(&self.ecro),
            Method::Dts => Some(&self.dts),
            _ => None,
        }
    }

    fn compare_epsilons(&self) -> Vec<f64> {
        if self.compare.epsilons.is_empty() {
            vec![self.epsilon]
        } else {
            self.compare.epsilons.clone()
        }
    }

    fn backtest_epsilons(&self) -> Vec<f64> {
        if self.backtest.epsilons.is_empty() {
            vec![self.epsilon]
        } else {
            self.backtest.epsilons.clone()
        }
    }

    /// The environment named in the configuration, perturbed by the seed
    /// when requested.
    pub fn environment(&self) -> Result<MixtureEnv> {
        let base = match &self.data.env {
            Some(p) => load_env(p)?,
            None => MixtureEnv::default_env(),
        };
        Ok(if self.data.perturb { base.perturbed(self.seed) } else { base })
    }

    fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

pub fn load_env(path: &Path) -> Result<MixtureEnv> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read environment {}: {e}", path.display())))?;
    MixtureEnv::from_json(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join("config.json"), cfg)
}

/// Serialized set family of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoredModel {
    Gaussian {
        model: GaussianConditionalModel,
        epsilon: f64,
    },
    Conformal {
        predictor: PointPredictor,
        rule: ShapeRule,
        q: f64,
        ref_psi: Vec<Vec<f64>>,
        ref_resid: Vec<Vec<f64>>,
    },
    Learned {
        predictor: SetPredictorConfig,
        theta: Vec<f64>,
        selected_epoch: usize,
        /// No checkpoint met the validation coverage target.
        flagged: bool,
        stop: StopReason,
    },
}

/// A set family ready to evaluate.
pub enum FittedModel {
    Gaussian {
        model: GaussianConditionalModel,
        epsilon: f64,
    },
    Conformal(ConformalCalibration),
    Learned {
        predictor: SetPredictor,
        theta: ParamVector,
    },
}

impl SetFamily for FittedModel {
    fn set(&self, psi: &DVector<f64>) -> Result<Ellipsoid> {
        match self {
            FittedModel::Gaussian { model, epsilon } => GaussianSets {
                model,
                epsilon: *epsilon,
            }
            .set(psi),
            FittedModel::Conformal(c) => c.set(psi),
            FittedModel::Learned { predictor, theta } => LearnedSets { predictor, theta }.set(psi),
        }
    }
}

fn to_rows(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn from_rows(v: &[Vec<f64>]) -> Vec<DVector<f64>> {
    v.iter().map(|x| DVector::from_column_slice(x)).collect()
}

impl StoredModel {
    pub fn fitted(&self) -> Result<FittedModel> {
        Ok(match self {
            StoredModel::Gaussian { model, epsilon } => FittedModel::Gaussian {
                model: model.clone(),
                epsilon: *epsilon,
            },
            StoredModel::Conformal {
                predictor,
                rule,
                q,
                ref_psi,
                ref_resid,
            } => FittedModel::Conformal(ConformalCalibration::from_parts(
                predictor.clone(),
                *rule,
                *q,
                from_rows(ref_psi),
                from_rows(ref_resid),
            )?),
            StoredModel::Learned { predictor, theta, .. } => {
                let predictor = SetPredictor::new(predictor.clone());
                let theta = ParamVector::from_values(predictor.layout(), theta.clone())?;
                FittedModel::Learned { predictor, theta }
            }
        })
    }

    fn dims(&self) -> Option<(usize, usize)> {
        match self {
            StoredModel::Learned { predictor, .. } => Some((predictor.covariate_dim, predictor.uncertainty_dim)),
            StoredModel::Gaussian { model, .. } => Some((model.mlp.input_dim, model.uncertainty_dim)),
            StoredModel::Conformal { ref_psi, ref_resid, .. } => {
                Some((ref_psi.first()?.len(), ref_resid.first()?.len()))
            }
        }
    }
}

/// On-disk checkpoint of one trained method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub method: Method,
    pub seed: u64,
    pub model: StoredModel,
    pub config: serde_json::Value,
}

impl CheckpointFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read checkpoint {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
    }
}

/// Outcome of fitting one method on one dataset.
pub struct Trained {
    pub method: Method,
    pub model: StoredModel,
    /// Per-epoch checkpoints of the learned methods; empty for baselines.
    pub history: Vec<Checkpoint>,
    pub wall_ms: f64,
}

fn splits(data: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = (
        data.subset(Split::Train),
        data.subset(Split::Validation),
        data.subset(Split::Test),
    );
    if tr.is_empty() || va.is_empty() {
        return Err(Error::input("dataset needs non-empty train and validation splits"));
    }
    Ok((tr, va, te))
}

/// Fits `method` on the train split (validation split for calibration and
/// model selection). `log` receives the per-epoch JSONL records.
pub fn fit_method(method: Method, cfg: &RunConfig, data: &Dataset, log: Option<&mut dyn Write>) -> Result<Trained> {
    let (tr, va, _) = splits(data)?;
    let t0 = Instant::now();
    let mut history = Vec::new();
    let model = match method {
        Method::EtoEs => StoredModel::Gaussian {
            model: fit_gaussian_eto(&tr, &cfg.baseline)?,
            epsilon: cfg.epsilon,
        },
        Method::EtoCs | Method::EtoCcs => {
            let predictor = fit_point_predictor(&tr, &cfg.baseline)?;
            let rule = if method == Method::EtoCs {
                ShapeRule::Global
            } else {
                ShapeRule::default_local(tr.len())
            };
            let cal = calibrate_conformal(&predictor, rule, &tr, &va, cfg.epsilon)?;
            StoredModel::Conformal {
                predictor,
                rule,
                q: cal.q,
                ref_psi: to_rows(&cal.ref_psi),
                ref_resid: to_rows(&cal.ref_resid),
            }
        }
        Method::Ecro | Method::Dts => {
            let tc = cfg.train_config(method).expect("learned method");
            let pc = tc.predictor_config(tr.covariate_dim(), tr.uncertainty_dim());
            let predictor = SetPredictor::new(pc.clone());
            let theta0 = initial_theta(&predictor, &tr, tc)?;
            let kind = if method == Method::Ecro { TrainMethod::Ecro } else { TrainMethod::Dual };
            let out = train(kind, &predictor, theta0, &tr, &va, tc, log)?;
            // the task-only method is selected on validation CVaR alone
            let select_eps = if method == Method::Ecro { 1.0 } else { tc.epsilon };
            let (best, flagged) = select_model(&out.history, select_eps)?;
            if flagged {
                log::warn!("{method}: no epoch reached the validation coverage target; kept the best-covering one");
            }
            let theta = best.theta.clone().unwrap_or(out.theta);
            history = out.history;
            StoredModel::Learned {
                predictor: pc,
                theta: theta.values().to_vec(),
                selected_epoch: best.epoch,
                flagged,
                stop: out.stop,
            }
        }
    };
    Ok(Trained {
        method,
        model,
        history,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Test-split metrics of a stored model; the report's `config` is the
/// resolved run configuration.
pub fn evaluate_model(
    method: Method,
    model: &StoredModel,
    data: &Dataset,
    cfg: &RunConfig,
    oracle: Option<&MixtureEnv>,
) -> Result<EvalReport> {
    if let Some((p, m)) = model.dims() {
        if p != data.covariate_dim() || m != data.uncertainty_dim() {
            return Err(Error::input(format!(
                "checkpoint expects {p} covariates and {m} assets but the dataset has {} and {}",
                data.covariate_dim(),
                data.uncertainty_dim()
            )));
        }
    }
    let test = data.subset(Split::Test);
    let fitted = model.fitted()?;
    let mut report = evaluate(method.as_str(), &fitted, &test, &cfg.eval, oracle)?;
    report.config = cfg.to_value()?;
    Ok(report)
}

/// Paths written by [`cmd_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutput {
    pub dataset: PathBuf,
    pub env: PathBuf,
}

/// Draws `data.n` samples from the configured environment and writes
/// `dataset.csv`, `env.json` and `config.json` under `out`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateOutput> {
    let env = cfg.environment()?;
    let mut ds = env.sample(cfg.data.n, cfg.seed)?;
    ds.provenance = format!("mixture seed={}", cfg.seed);
    create_dir(&cfg.out)?;
    let dataset = cfg.out.join("dataset.csv");
    let env_path = cfg.out.join("env.json");
    ds.write_csv(&dataset)?;
    write_text(&env_path, &(env.to_json()? + "\n"))?;
    write_config(&cfg.out, cfg)?;
    Ok(GenerateOutput { dataset, env: env_path })
}

fn check_env_dims(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if let Some(p) = &cfg.data.env {
        let env = load_env(p)?;
        if env.covariate_dim != data.covariate_dim() || env.uncertainty_dim != data.uncertainty_dim() {
            return Err(Error::input(format!(
                "environment {} has {}+{} dimensions but the dataset has {}+{}",
                p.display(),
                env.covariate_dim,
                env.uncertainty_dim,
                data.covariate_dim(),
                data.uncertainty_dim()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BaselineLogRecord<'a> {
    fit: &'a str,
    wall_ms: f64,
}

/// Fits `cfg.method` on `dataset` and writes `checkpoint.json`,
/// `train_log.jsonl` and `config.json` under `out`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path) -> Result<CheckpointFile> {
    let data = Dataset::read_csv(dataset)?;
    check_env_dims(cfg, &data)?;
    create_dir(&cfg.out)?;
    let log_path = cfg.out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let trained = fit_method(cfg.method, cfg, &data, Some(&mut log))?;
    if !cfg.method.is_learned() {
        let fit = if cfg.method == Method::EtoEs { "gaussian_mle" } else { "least_squares_and_calibration" };
        serde_json::to_writer(&mut log, &BaselineLogRecord { fit, wall_ms: trained.wall_ms })?;
        writeln!(log).map_err(|e| Error::io(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ck = CheckpointFile {
        method: cfg.method,
        seed: cfg.seed,
        model: trained.model,
        config: cfg.to_value()?,
    };
    write_json(&cfg.out.join("checkpoint.json"), &ck)?;
    write_config(&cfg.out, cfg)?;
    Ok(ck)
}

fn env_for(cfg: &RunConfig, dataset: &Path) -> Result<Option<MixtureEnv>> {
    if let Some(p) = &cfg.data.env {
        return load_env(p).map(Some);
    }
    let sibling = dataset.with_file_name("env.json");
    if sibling.exists() {
        return load_env(&sibling).map(Some);
    }
    Ok(None)
}

/// Evaluates a checkpoint on the test split of `dataset`. Writes
/// `report.json`, `sets.json` and, when the generating environment is known
/// (`data.env` or an `env.json` next to the dataset), the conditional
/// coverage CDF in `cdf.csv`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<EvalReport> {
    let ck = CheckpointFile::read(checkpoint)?;
    let data = Dataset::read_csv(dataset)?;
    let env = env_for(cfg, dataset)?;
    let report = evaluate_model(ck.method, &ck.model, &data, cfg, env.as_ref())?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    if !report.conditional_coverage.is_empty() {
        crate::evaluation::write_cdf_csv(&report, &cfg.out.join("cdf.csv"))?;
    }
    let test = data.subset(Split::Test);
    let psis: Vec<DVector<f64>> = test.psi.iter().take(cfg.compare.snapshot_points).cloned().collect();
    let fitted = ck.model.fitted()?;
    let snap = sets_snapshot(&[(ck.method.as_str(), &fitted)], &psis, env.as_ref(), cfg.compare.snapshot_draws, cfg.seed)?;
    write_json(&cfg.out.join("sets.json"), &serde_json::json!({ "config": cfg, "points": snap }))?;
    write_config(&cfg.out, cfg)?;
    Ok(report)
}

/// Result of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// One table per miscoverage level, in sweep order.
    pub tables: Vec<(f64, Vec<SummaryRow>)>,
    pub reports: Vec<EvalReport>,
}

impl Comparison {
    pub fn reports_for(&self, method: Method, epsilon: f64) -> Vec<&EvalReport> {
        self.reports
            .iter()
            .filter(|r| r.method == method.as_str() && r.epsilon == epsilon)
            .collect()
    }
}

/// Runs every configured method on `compare.seeds` perturbed environments
/// and each swept `ε`, returning all reports. Per-run reports go to
/// `out/runs/seed<k>/eps<ε>/<method>.json` when `write` is set.
pub fn run_synthetic_benchmark(cfg: &RunConfig, write: bool) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for seed in 0..cfg.compare.seeds {
        for eps in cfg.compare_epsilons() {
            let run = cfg.with_seed_and_epsilon(seed, eps)?;
            let env = run.environment()?;
            let data = env.sample(run.data.n, seed)?;
            let dir = cfg.out.join("runs").join(format!("seed{seed}")).join(format!("eps{eps}"));
            if write {
                create_dir(&dir)?;
            }
            for &method in &cfg.compare.methods {
                let mut log_buf: Vec<u8> = Vec::new();
                let trained = fit_method(method, &run, &data, Some(&mut log_buf))?;
                let mut report = evaluate_model(method, &trained.model, &data, &run, Some(&env))?;
                report.wall_ms.insert("train".to_string(), trained.wall_ms);
                log::info!(
                    "seed {seed} eps {eps} {method}: cvar {:.4} coverage {:.3}",
                    report.cvar,
                    report.marginal_coverage
                );
                if write {
                    write_json(&dir.join(format!("{method}.json")), &report)?;
                    if method.is_learned() {
                        let p = dir.join(format!("{method}_log.jsonl"));
                        fs::write(&p, &log_buf).map_err(|e| Error::io(&p, e))?;
                    }
                }
                reports.push(report);
            }
        }
    }
    Ok(reports)
}

/// Groups reports by `ε` and summarizes each group.
pub fn summarize(reports: Vec<EvalReport>, confidence: f64) -> Result<Comparison> {
    let mut levels: Vec<f64> = Vec::new();
    for r in &reports {
        if !levels.contains(&r.epsilon) {
            levels.push(r.epsilon);
        }
    }
    let mut tables = Vec::new();
    for eps in levels {
        let group: Vec<EvalReport> = reports.iter().filter(|r| r.epsilon == eps).cloned().collect();
        tables.push((eps, compare(&group, confidence)?));
    }
    Ok(Comparison { tables, reports })
}

fn collect_report_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut stack = vec![p.clone()];
            while let Some(dir) = stack.pop() {
                let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .collect();
                entries.sort();
                for e in entries {
                    if e.is_dir() {
                        stack.push(e);
                    } else if e.extension().is_some_and(|x| x == "json") {
                        out.push(e);
                    }
                }
            }
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(Error::input(format!("report not found: {}", p.display())));
        }
    }
    Ok(out)
}

fn read_reports(inputs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for p in collect_report_paths(inputs)? {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        // directories may hold other JSON artifacts; keep only reports
        if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
            reports.push(r);
        }
    }
    if reports.is_empty() {
        return Err(Error::input("no evaluation reports found in the given inputs"));
    }
    Ok(reports)
}

/// Aggregates reports into comparison tables. With no `inputs` the
/// synthetic benchmark is run first.
///
/// Writes `table.csv` (first `ε`), `coverage.csv` (marginal coverage per
/// method and target level), `cdf.csv` (pooled conditional coverage per
/// method), `report.json`, and for a benchmark run `sets.json`.
pub fn cmd_compare(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Comparison> {
    create_dir(&cfg.out)?;
    let ran = inputs.is_empty();
    let reports = if ran { run_synthetic_benchmark(cfg, true)? } else { read_reports(inputs)? };
    let cmp = summarize(reports, cfg.compare.confidence)?;
    write_comparison(cfg, &cmp)?;
    if ran {
        write_benchmark_snapshot(cfg)?;
    }
    Ok(cmp)
}

fn write_comparison(cfg: &RunConfig, cmp: &Comparison) -> Result<()> {
    let (_, first) = cmp.tables.first().ok_or_else(|| Error::input("nothing to compare"))?;
    crate::evaluation::write_table_csv(first, &cfg.out.join("table.csv"))?;
    write_coverage_block(&cmp.tables, &cfg.out.join("coverage.csv"))?;
    write_pooled_cdf(&cmp.reports, &cfg.out.join("cdf.csv"))?;
    let summary: Vec<serde_json::Value> = cmp
        .tables
        .iter()
        .map(|(eps, rows)| serde_json::json!({ "epsilon": eps, "rows": rows }))
        .collect();
    let runs: Vec<serde_json::Value> = cmp
        .reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "method": r.method,
                "seed": r.config.get("seed"),
                "epsilon": r.epsilon,
                "cvar": r.cvar,
                "marginal_coverage": r.marginal_coverage,
                "conditional_coverage_median": (!r.conditional_coverage.is_empty())
                    .then(|| quantile(&r.conditional_coverage, 0.5)),
                "failures": r.failures,
            })
        })
        .collect();
    write_json(
        &cfg.out.join("report.json"),
        &serde_json::json!({ "config": cfg, "summary": summary, "runs": runs }),
    )?;
    write_config(&cfg.out, cfg)
}

/// Marginal coverage per method (rows) and target level `1 − ε` (columns).
fn write_coverage_block(tables: &[(f64, Vec<SummaryRow>)], path: &Path) -> Result<()> {
    let mut methods: Vec<String> = Vec::new();
    for (_, rows) in tables {
        for r in rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(tables.iter().map(|(eps, _)| format!("target_{}", 1.0 - eps)));
    w.write_record(&header)?;
    for m in &methods {
        let mut rec = vec![m.clone()];
        for (_, rows) in tables {
            rec.push(
                rows.iter()
                    .find(|r| &r.method == m)
                    .map_or_else(|| "n/a".to_string(), |r| format!("{:.6}", r.coverage_mean)),
            );
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Empirical CDF of the conditional coverages pooled over runs, per method
/// and level.
fn write_pooled_cdf(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut pooled: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        if !r.conditional_coverage.is_empty() {
            pooled
                .entry((r.method.clone(), r.epsilon.to_string()))
                .or_default()
                .extend(&r.conditional_coverage);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "epsilon", "conditional_coverage", "cumulative_fraction"])?;
    for ((m, e), v) in &pooled {
        for (p, f) in crate::evaluation::empirical_cdf(v)? {
            w.write_record([m.clone(), e.clone(), p.to_string(), f.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Sets of every method at a few test covariates of seed 0, with oracle
/// draws, for plotting.
fn write_benchmark_snapshot(cfg: &RunConfig) -> Result<()> {
    let run = cfg.with_seed_and_epsilon(0, cfg.compare_epsilons()[0])?;
    let env = run.environment()?;
    let data = env.sample(run.data.n, 0)?;
    let mut fitted = Vec::new();
    for &method in &cfg.compare.methods {
        fitted.push((method, fit_method(method, &run, &data, None)?.model.fitted()?));
    }
    let families: Vec<(&str, &dyn SetFamily)> = fitted.iter().map(|(m, f)| (m.as_str(), f as &dyn SetFamily)).collect();
    let test = data.subset(Split::Test);
    let psis: Vec<DVector<f64>> = test.psi.iter().take(cfg.compare.snapshot_points).cloned().collect();
    let snap = sets_snapshot(&families, &psis, Some(&env), cfg.compare.snapshot_draws, 0)?;
    write_json(&cfg.out.join("sets.json"), &serde_json::json!({ "config": cfg, "points": snap }))
}

/// One backtest run: a repeat's asset draw on one window at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRun {
    pub repeat: u64,
    pub window_start: usize,
    pub first_test_date: String,
    pub assets: Vec<String>,
    pub report: EvalReport,
}

/// Rolling-window backtest on daily prices. For each repeat a random asset
/// subset is drawn; returns and covariates are built from the subset, every
/// window is fitted from scratch, and each method is evaluated on the
/// window's test block.
///
/// Writes `runs.json`, `table.csv`, `coverage.csv`, `report.json` and, if
/// no price file was configured, the generated `prices.csv`.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<Vec<BacktestRun>> {
    let b = &cfg.backtest;
    create_dir(&cfg.out)?;
    let panel = match &b.prices {
        Some(p) => load_stock_panel(p)?,
        None => {
            let panel = synthetic_panel(b.synthetic_assets, b.synthetic_indices, b.synthetic_days, cfg.seed);
            let p = cfg.out.join("prices.csv");
            panel.write_csv(&p)?;
            // read back so the run exercises the same path as user data
            load_stock_panel(&p)?
        }
    };
    let mut runs = Vec::new();
    for repeat in 0..b.repeats {
        let idx = sample_assets(panel.assets.len(), b.assets.min(panel.assets.len()), cfg.seed.wrapping_add(repeat))?;
        let sub = panel.select_assets(&idx)?;
        let returns = make_returns(&sub, &b.stock)?;
        let windows = rolling_windows(&returns, b.train_days, b.val_days, b.test_days, b.stride)?;
        for w in &windows {
            for eps in cfg.backtest_epsilons() {
                let run = cfg.with_seed_and_epsilon(cfg.seed.wrapping_add(repeat), eps)?;
                for &method in &b.methods {
                    let trained = fit_method(method, &run, &w.data, None)?;
                    let mut report = evaluate_model(method, &trained.model, &w.data, &run, None)?;
                    report.wall_ms.insert("train".to_string(), trained.wall_ms);
                    let test = w.data.subset(Split::Test);
                    log::info!(
                        "repeat {repeat} window {} eps {eps} {method}: cvar {:.4} coverage {:.3}",
                        w.start,
                        report.cvar,
                        report.marginal_coverage
                    );
                    runs.push(BacktestRun {
                        repeat,
                        window_start: w.start,
                        first_test_date: test.dates.first().cloned().unwrap_or_default(),
                        assets: sub.assets.clone(),
                        report,
                    });
                }
            }
        }
    }
    write_json(&cfg.out.join("runs.json"), &serde_json::json!({ "config": cfg, "runs": runs }))?;
    let cmp = summarize(runs.iter().map(|r| r.report.clone()).collect(), cfg.compare.confidence)?;
    write_comparison(cfg, &cmp)?;
    Ok(runs)
}
