//! Experiment pipelines: configuration, per-cell seeding, model fitting and
//! the CSV/JSON artifacts written by the command-line tool.
//!
//! Every pipeline writes into its own directory below `out`, next to a
//! `config.resolved.toml` snapshot and a `metrics.json` array with one
//! object per fitted model.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, HmcConfig, PosteriorEnsemble, PriorSpec};
use crate::dataset::{self, BiasSpec, ClassBalance, LabeledDataset};
use crate::error::{Error, Result};
use crate::mlp::{self, Activation, Architecture, MlpParams, TrainConfig};
use crate::ncycle::KCBS_N;
use crate::stats;
use crate::uncertainty::{self, CalibrationCurve, PredictiveOutput, UncertaintyMeasure};

pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Threshold below which a normalised uncertainty counts as "confident".
pub const LOW_UNCERTAINTY: f64 = 0.1;

/// How uncertainties are normalised in every calibration artifact.
pub const NORMALIZATION_NOTE: &str = "U = H / ln C (entropy in nats divided by its maximum)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Kcbs,
    Rhombus,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Kcbs => dataset::TASK_KCBS,
            Task::Rhombus => dataset::TASK_RHOMBUS,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            Task::Kcbs => 2 * KCBS_N,
            Task::Rhombus => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nn,
    Bnn,
    #[default]
    Both,
}

impl ModelKind {
    fn wants_nn(self) -> bool {
        self != ModelKind::Bnn
    }

    fn wants_bnn(self) -> bool {
        self != ModelKind::Nn
    }
}

/// Gradient-descent settings; the seed comes from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_scale: f64,
    pub min_steps: usize,
    /// Independent initialisations; the one with the lowest final training
    /// loss is kept.
    pub restarts: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            init_scale: d.init_scale,
            min_steps: 2000,
            restarts: 3,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            init_scale: self.init_scale,
            seed,
            min_steps: self.min_steps,
        }
    }
}

/// HMC settings; the seed comes from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSection {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub samples: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub adapt: bool,
}

impl Default for HmcSection {
    fn default() -> Self {
        let d = HmcConfig::default();
        Self {
            step_size: d.step_size,
            leapfrog_steps: d.leapfrog_steps,
            samples: d.samples,
            burn_in: d.burn_in,
            thinning: d.thinning,
            adapt: d.adapt,
        }
    }
}

impl HmcSection {
    pub fn with_seed(&self, seed: u64) -> HmcConfig {
        HmcConfig {
            step_size: self.step_size,
            leapfrog_steps: self.leapfrog_steps,
            samples: self.samples,
            burn_in: self.burn_in,
            thinning: self.thinning,
            seed,
            adapt: self.adapt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Base seed; replicate `r` uses `seed + r`.
    pub seed: u64,
    /// Number of replicates.
    pub seeds: usize,
    pub out: PathBuf,
    pub model: ModelKind,
    /// Class composition of behaviour datasets.
    pub balance: ClassBalance,
    pub activation: Activation,
    /// Architecture of `train-nn`, `train-bnn`, `histograms` and
    /// `calibration` on the behaviour task.
    pub architecture: Vec<usize>,
    pub sweep_architectures: Vec<Vec<usize>>,
    pub train_sizes: Vec<usize>,
    pub n_train: usize,
    pub test_size: usize,
    pub rhombus_architecture: Vec<usize>,
    pub rhombus_train: usize,
    pub grid_resolution: usize,
    pub bias: BiasSpec,
    pub histogram_bins: usize,
    pub alpha_points: usize,
    /// Start every chain at the gradient-descent solution.
    pub warm_start: bool,
    pub train: TrainSection,
    pub hmc: HmcSection,
    pub prior: PriorSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Kcbs,
            seed: 0,
            seeds: 3,
            out: PathBuf::from("out"),
            model: ModelKind::Both,
            balance: ClassBalance::Balanced,
            activation: Activation::Relu,
            architecture: vec![64, 32, 8, 2],
            sweep_architectures: vec![
                vec![128, 64, 32, 16, 2],
                vec![64, 32, 16, 2],
                vec![32, 16, 2],
            ],
            train_sizes: vec![50, 200, 1000, 5000],
            n_train: 500,
            test_size: 4000,
            rhombus_architecture: vec![8, 4, 2],
            rhombus_train: 2000,
            grid_resolution: 50,
            bias: BiasSpec::lower_left_sparse(),
            histogram_bins: 20,
            alpha_points: 21,
            warm_start: true,
            train: TrainSection::default(),
            hmc: HmcSection::default(),
            prior: PriorSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with a TOML document. Tables merge key by key, so a
    /// file only needs the settings it changes; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base =
            toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, user, "")?;
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.train_sizes.is_empty() || self.train_sizes.contains(&0) {
            return bad("train_sizes must be non-empty and positive".into());
        }
        for (name, v) in [
            ("n_train", self.n_train),
            ("test_size", self.test_size),
            ("rhombus_train", self.rhombus_train),
            ("grid_resolution", self.grid_resolution),
            ("histogram_bins", self.histogram_bins),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.train.restarts == 0 {
            return bad("train.restarts must be at least 1".into());
        }
        if self.alpha_points < 2 {
            return bad("alpha_points must be at least 2".into());
        }
        if self.sweep_architectures.is_empty() {
            return bad("sweep_architectures must not be empty".into());
        }
        for layers in self
            .sweep_architectures
            .iter()
            .chain([&self.architecture, &self.rhombus_architecture])
        {
            self.arch_for(layers, 1)
                .map_err(|e| Error::Config(format!("architecture {layers:?}: {e}")))?;
        }
        if self.seed.checked_add(self.seeds as u64).is_none() || self.seed > i64::MAX as u64 {
            return bad("seed out of range".into());
        }
        self.train.clone().with_seed(0).validate()?;
        self.hmc.with_seed(0).validate()?;
        self.prior.validate()?;
        self.bias.validate()?;
        Ok(())
    }

    fn arch_for(&self, layers: &[usize], input_dim: usize) -> Result<Architecture> {
        Ok(Architecture::new(input_dim, layers.to_vec())?.with_activation(self.activation))
    }

    /// Architecture and training size of the single-model pipelines.
    pub fn task_model(&self) -> Result<(Architecture, usize)> {
        match self.task {
            Task::Kcbs => Ok((self.arch_for(&self.architecture, 10)?, self.n_train)),
            Task::Rhombus => Ok((
                self.arch_for(&self.rhombus_architecture, 2)?,
                self.rhombus_train,
            )),
        }
    }

    /// Base seed of replicate `r`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        self.seed + r as u64
    }
}

fn merge_tables(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge_tables(b, u, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Independent seed for one stream of one experiment cell: a SplitMix64
/// finalisation of the base seed and an FNV-1a hash of the stream key.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base.wrapping_add(h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train_data_seed(base: u64, n: usize) -> u64 {
    derive_seed(base, &format!("train n={n}"))
}

pub fn biased_data_seed(base: u64, n: usize) -> u64 {
    derive_seed(base, &format!("train-biased n={n}"))
}

pub fn test_data_seed(base: u64, n: usize) -> u64 {
    derive_seed(base, &format!("test n={n}"))
}

fn model_seed(base: u64, stream: &str, n: usize, arch: &Architecture, tag: &str) -> u64 {
    derive_seed(base, &format!("{stream} n={n} arch={} {tag}", arch.label()))
}

/// Training set of `n` rows for `task`; rhombus data is uniform unless
/// `bias` is given.
pub fn task_dataset(
    cfg: &ExperimentConfig,
    task: Task,
    n: usize,
    seed: u64,
    bias: Option<&BiasSpec>,
) -> Result<LabeledDataset> {
    match task {
        Task::Kcbs => dataset::sample_behaviours(n, seed, cfg.balance),
        Task::Rhombus => dataset::sample_rhombus_dataset(n, bias, seed),
    }
}

/// One row of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: String,
    pub arch: String,
    pub n_train: usize,
    pub model: String,
    pub accuracy: f64,
    /// Post-burn-in acceptance of the chain; absent for gradient descent.
    pub acceptance_rate: Option<f64>,
    /// Wall-clock fitting time. The only non-reproducible field.
    pub wall_ms: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
}

/// NN and (optionally) BNN fitted on one training set.
pub struct Fitted {
    pub nn: MlpParams,
    pub nn_seed: u64,
    pub nn_ms: u64,
    pub bnn: Option<PosteriorEnsemble>,
    pub bnn_ms: u64,
}

/// Gradient descent from `cfg.train.restarts` seeded initialisations,
/// keeping the lowest training loss. The first restart uses `seed` itself.
pub fn train_best_of(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    train: &LabeledDataset,
    seed: u64,
) -> Result<(MlpParams, u64)> {
    let mut best: Option<(f64, MlpParams, u64)> = None;
    for r in 0..cfg.train.restarts.max(1) {
        let s = if r == 0 {
            seed
        } else {
            derive_seed(seed, &format!("restart {r}"))
        };
        let p = mlp::train(arch, train, &cfg.train.with_seed(s))?;
        let loss = mlp::cross_entropy_loss(&p, train);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, p, s));
        }
    }
    let (_, p, s) = best.expect("at least one restart");
    Ok((p, s))
}

pub fn fit_models(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    train: &LabeledDataset,
    base: u64,
    tag: &str,
    with_bnn: bool,
) -> Result<Fitted> {
    let n = train.len();
    let start = Instant::now();
    let (nn, nn_seed) = train_best_of(cfg, arch, train, model_seed(base, "nn", n, arch, tag))?;
    let nn_ms = start.elapsed().as_millis() as u64;
    log::info!("nn {} n={n} {tag}: {nn_ms} ms", arch.label());
    if !with_bnn {
        return Ok(Fitted {
            nn,
            nn_seed,
            nn_ms,
            bnn: None,
            bnn_ms: 0,
        });
    }
    let hmc = cfg.hmc.with_seed(model_seed(base, "hmc", n, arch, tag));
    let start = Instant::now();
    let ens = if cfg.warm_start {
        bayes::hmc_sample_from(&nn, train, &cfg.prior, &hmc)?
    } else {
        bayes::hmc_sample(arch, train, &cfg.prior, &hmc)?
    };
    let bnn_ms = start.elapsed().as_millis() as u64;
    for w in &ens.warnings {
        log::warn!("bnn {} n={n} {tag}: {w}", arch.label());
    }
    log::info!(
        "bnn {} n={n} {tag}: {bnn_ms} ms, acceptance {:.3}, step {:.3e}",
        arch.label(),
        ens.acceptance_rate,
        ens.step_size
    );
    Ok(Fitted {
        nn,
        nn_seed,
        nn_ms,
        bnn: Some(ens),
        bnn_ms,
    })
}

pub fn outputs_accuracy(outputs: &[PredictiveOutput], labels: &[usize]) -> f64 {
    let right = outputs
        .iter()
        .zip(labels)
        .filter(|(o, &y)| o.predicted == y)
        .count();
    right as f64 / labels.len() as f64
}

fn evaluate(
    fitted: &Fitted,
    x: &Array2<f64>,
) -> Result<(Vec<PredictiveOutput>, Option<Vec<PredictiveOutput>>)> {
    let nn = uncertainty::nn_uncertainty_batch(&fitted.nn, x.view())?;
    let bnn = match &fitted.bnn {
        Some(ens) => Some(uncertainty::decompose_batch(ens, x.view())?),
        None => None,
    };
    Ok((nn, bnn))
}

// ---------------------------------------------------------------------------
// Output helpers

fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_SNAPSHOT);
    fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RunMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{kind:?}"),
        },
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header and rows of a CSV file, with 1-based line numbers per row.
fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn expect_header(path: &Path, got: &[String], want: &[&str]) -> Result<()> {
    if got.iter().map(String::as_str).ne(want.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!(
                "expected header {}, found {}",
                want.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse field `{raw}`"),
    })
}

const NA: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| v.to_string())
}

fn parse_opt(path: &Path, line: usize, raw: &str) -> Result<Option<f64>> {
    if raw == NA {
        Ok(None)
    } else {
        field(path, line, raw).map(Some)
    }
}

// ---------------------------------------------------------------------------
// generate

/// Writes `train.csv`, `test.csv` (and `train_biased.csv` for the rhombus
/// task) with their metadata sidecars.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.join("generate");
    prepare_dir(&dir, cfg)?;
    let base = cfg.replicate_seed(0);
    let (_, n) = cfg.task_model()?;
    let mut sets = vec![
        (
            "train",
            task_dataset(cfg, cfg.task, n, train_data_seed(base, n), None)?,
        ),
        (
            "test",
            task_dataset(
                cfg,
                cfg.task,
                cfg.test_size,
                test_data_seed(base, cfg.test_size),
                None,
            )?,
        ),
    ];
    if cfg.task == Task::Rhombus {
        let biased = task_dataset(cfg, cfg.task, n, biased_data_seed(base, n), Some(&cfg.bias))?;
        sets.push(("train_biased", biased));
    }
    for (name, ds) in &sets {
        dataset::write_dataset(ds, dir.join(format!("{name}.csv")))?;
        dataset::write_meta_json(ds, dir.join(format!("{name}.meta.json")))?;
    }
    Ok(dir)
}

// ---------------------------------------------------------------------------
// train-nn / train-bnn

/// Fits the task model on every replicate and writes checkpoints
/// (`nn_*.ckpt`) or posterior ensembles (`bnn_*.ens`).
pub fn run_train(cfg: &ExperimentConfig, bnn: bool) -> Result<PathBuf> {
    let dir = cfg.out.join(if bnn { "train-bnn" } else { "train-nn" });
    prepare_dir(&dir, cfg)?;
    let (arch, n) = cfg.task_model()?;
    let mut metrics = Vec::new();
    for r in 0..cfg.seeds {
        let base = cfg.replicate_seed(r);
        let train = task_dataset(cfg, cfg.task, n, train_data_seed(base, n), None)?;
        let test = task_dataset(
            cfg,
            cfg.task,
            cfg.test_size,
            test_data_seed(base, cfg.test_size),
            None,
        )?;
        let fitted = fit_models(cfg, &arch, &train, base, "", bnn)?;
        let x = mlp::feature_matrix(&test);
        let (nn_out, bnn_out) = evaluate(&fitted, &x)?;
        let stem = format!("{}_n{n}_s{base}", arch.label());
        let row = |model: &str, outs: &[PredictiveOutput], rate, ms| RunMetrics {
            task: cfg.task.name().into(),
            arch: arch.label(),
            n_train: n,
            model: model.into(),
            accuracy: outputs_accuracy(outs, test.labels()),
            acceptance_rate: rate,
            wall_ms: ms,
            seed: base,
            run: None,
        };
        match (bnn, &fitted.bnn, &bnn_out) {
            (true, Some(ens), Some(outs)) => {
                bayes::write_ensemble(ens, dir.join(format!("bnn_{stem}.ens")))?;
                metrics.push(row("bnn", outs, Some(ens.acceptance_rate), fitted.bnn_ms));
            }
            _ => {
                mlp::write_checkpoint(
                    &fitted.nn,
                    fitted.nn_seed,
                    dir.join(format!("nn_{stem}.ckpt")),
                )?;
                metrics.push(row("nn", &nn_out, None, fitted.nn_ms));
            }
        }
    }
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// accuracy sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub size: usize,
    pub arch: String,
    pub model: String,
    pub accuracy: f64,
    pub seed: u64,
}

pub const ACCURACY_HEADER: [&str; 5] = ["size", "arch", "model", "accuracy", "seed"];

pub fn write_accuracy_csv(path: &Path, rows: &[AccuracyRow]) -> Result<()> {
    let header: Vec<String> = ACCURACY_HEADER.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.size.to_string(),
                r.arch.clone(),
                r.model.clone(),
                r.accuracy.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &body)
}

pub fn read_accuracy_csv(path: impl AsRef<Path>) -> Result<Vec<AccuracyRow>> {
    let path = path.as_ref();
    let (header, rows) = read_rows(path)?;
    expect_header(path, &header, &ACCURACY_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(AccuracyRow {
                size: field(path, line, &f[0])?,
                arch: f[1].clone(),
                model: f[2].clone(),
                accuracy: field(path, line, &f[3])?,
                seed: field(path, line, &f[4])?,
            })
        })
        .collect()
}

/// Per-architecture trend and NN/BNN gap of an accuracy sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Spearman correlation of size vs accuracy over all seeds, per
    /// `(arch, model)`.
    pub spearman: Vec<(String, String, f64)>,
    /// `|mean acc_NN - mean acc_BNN|` over seeds, per `(size, arch)`.
    pub gaps: Vec<(usize, String, f64)>,
}

pub fn summarize_sweep(rows: &[AccuracyRow]) -> SweepSummary {
    let mut keys: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.arch.clone(), r.model.clone()))
        .collect();
    keys.dedup();
    keys.sort();
    keys.dedup();
    let spearman = keys
        .into_iter()
        .map(|(arch, model)| {
            let sel: Vec<&AccuracyRow> = rows
                .iter()
                .filter(|r| r.arch == arch && r.model == model)
                .collect();
            let sizes: Vec<f64> = sel.iter().map(|r| r.size as f64).collect();
            let acc: Vec<f64> = sel.iter().map(|r| r.accuracy).collect();
            let rho = stats::spearman(&sizes, &acc);
            (arch, model, rho)
        })
        .collect();
    let mut cells: Vec<(usize, String)> = rows.iter().map(|r| (r.size, r.arch.clone())).collect();
    cells.sort();
    cells.dedup();
    let gaps = cells
        .into_iter()
        .filter_map(|(size, arch)| {
            let mean_of = |model: &str| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.size == size && r.arch == arch && r.model == model)
                    .map(|r| r.accuracy)
                    .collect();
                (!v.is_empty()).then(|| stats::mean(&v))
            };
            let gap = (mean_of("nn")? - mean_of("bnn")?).abs();
            Some((size, arch, gap))
        })
        .collect();
    SweepSummary { spearman, gaps }
}

/// Trains every `(size, architecture)` cell on every replicate and writes
/// `accuracy.csv` and `summary.json`.
pub fn run_accuracy_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.join("accuracy-sweep");
    prepare_dir(&dir, cfg)?;
    let dim = cfg.task.input_dim();
    let archs = cfg
        .sweep_architectures
        .iter()
        .map(|l| cfg.arch_for(l, dim))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for r in 0..cfg.seeds {
        let base = cfg.replicate_seed(r);
        let test = task_dataset(
            cfg,
            cfg.task,
            cfg.test_size,
            test_data_seed(base, cfg.test_size),
            None,
        )?;
        let x = mlp::feature_matrix(&test);
        for &size in &cfg.train_sizes {
            let train = task_dataset(cfg, cfg.task, size, train_data_seed(base, size), None)?;
            for arch in &archs {
                let fitted = fit_models(cfg, arch, &train, base, "", cfg.model.wants_bnn())?;
                let (nn_out, bnn_out) = evaluate(&fitted, &x)?;
                let mut push = |model: &str, outs: &[PredictiveOutput], rate, ms| {
                    let accuracy = outputs_accuracy(outs, test.labels());
                    rows.push(AccuracyRow {
                        size,
                        arch: arch.label(),
                        model: model.into(),
                        accuracy,
                        seed: base,
                    });
                    metrics.push(RunMetrics {
                        task: cfg.task.name().into(),
                        arch: arch.label(),
                        n_train: size,
                        model: model.into(),
                        accuracy,
                        acceptance_rate: rate,
                        wall_ms: ms,
                        seed: base,
                        run: None,
                    });
                };
                if cfg.model.wants_nn() {
                    push("nn", &nn_out, None, fitted.nn_ms);
                }
                if let (Some(ens), Some(outs)) = (&fitted.bnn, &bnn_out) {
                    push("bnn", outs, Some(ens.acceptance_rate), fitted.bnn_ms);
                }
            }
        }
    }
    write_accuracy_csv(&dir.join("accuracy.csv"), &rows)?;
    write_json(&dir.join(SUMMARY_FILE), &summarize_sweep(&rows))?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// histograms and calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count_all: usize,
    pub count_wrong: usize,
}

pub const HISTOGRAM_HEADER: [&str; 4] = ["bin_lo", "bin_hi", "count_all", "count_wrong"];

pub fn histogram_rows(
    outputs: &[PredictiveOutput],
    labels: &[usize],
    bins: usize,
) -> Vec<HistogramRow> {
    let classes = outputs.first().map_or(2, PredictiveOutput::classes);
    let all = uncertainty::uncertainty_histogram(outputs, classes, bins, |_, _| true);
    let wrong =
        uncertainty::uncertainty_histogram(outputs, classes, bins, |i, o| o.predicted != labels[i]);
    (0..bins)
        .map(|k| HistogramRow {
            bin_lo: all.edges[k],
            bin_hi: all.edges[k + 1],
            count_all: all.counts[k],
            count_wrong: wrong.counts[k],
        })
        .collect()
}

pub fn write_histogram_csv(path: &Path, rows: &[HistogramRow]) -> Result<()> {
    let header: Vec<String> = HISTOGRAM_HEADER.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bin_lo.to_string(),
                r.bin_hi.to_string(),
                r.count_all.to_string(),
                r.count_wrong.to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &body)
}

pub fn read_histogram_csv(path: impl AsRef<Path>) -> Result<Vec<HistogramRow>> {
    let path = path.as_ref();
    let (header, rows) = read_rows(path)?;
    expect_header(path, &header, &HISTOGRAM_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(HistogramRow {
                bin_lo: field(path, line, &f[0])?,
                bin_hi: field(path, line, &f[1])?,
                count_all: field(path, line, &f[2])?,
                count_wrong: field(path, line, &f[3])?,
            })
        })
        .collect()
}

/// One test point: label, prediction, class probabilities and uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: usize,
    pub label: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

pub fn prediction_rows(outputs: &[PredictiveOutput], labels: &[usize]) -> Vec<PredictionRow> {
    outputs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(id, (o, &label))| PredictionRow {
            id,
            label,
            pred: o.predicted,
            probs: o.probs.clone(),
            total: o.total,
            aleatoric: o.aleatoric,
            epistemic: o.epistemic,
        })
        .collect()
}

fn prediction_header(classes: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "label".into(), "pred".into()];
    h.extend((0..classes).map(|c| format!("p{c}")));
    h.extend(["total".into(), "aleatoric".into(), "epistemic".into()]);
    h
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let classes = rows.first().map_or(2, |r| r.probs.len());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.id.to_string(), r.label.to_string(), r.pred.to_string()];
            v.extend(r.probs.iter().map(f64::to_string));
            v.extend([
                r.total.to_string(),
                r.aleatoric.to_string(),
                r.epistemic.to_string(),
            ]);
            v
        })
        .collect();
    write_rows(path, &prediction_header(classes), &body)
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let (header, rows) = read_rows(path)?;
    let classes = header.len().saturating_sub(6);
    let want = prediction_header(classes);
    expect_header(
        path,
        &header,
        &want.iter().map(String::as_str).collect::<Vec<_>>(),
    )?;
    rows.into_iter()
        .map(|(line, f)| {
            let probs = f[3..3 + classes]
                .iter()
                .map(|v| field(path, line, v))
                .collect::<Result<Vec<f64>>>()?;
            Ok(PredictionRow {
                id: field(path, line, &f[0])?,
                label: field(path, line, &f[1])?,
                pred: field(path, line, &f[2])?,
                probs,
                total: field(path, line, &f[3 + classes])?,
                aleatoric: field(path, line, &f[4 + classes])?,
                epistemic: field(path, line, &f[5 + classes])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub alpha: f64,
    pub p_mis_high: Option<f64>,
    pub n_high: usize,
    pub p_mis_low: Option<f64>,
    pub n_low: usize,
}

pub const CALIBRATION_HEADER: [&str; 5] = ["alpha", "p_mis_high", "n_high", "p_mis_low", "n_low"];

pub fn calibration_rows(curve: &CalibrationCurve) -> Vec<CalibrationRow> {
    (0..curve.alphas.len())
        .map(|k| CalibrationRow {
            alpha: curve.alphas[k],
            p_mis_high: curve.p_mis_high[k],
            n_high: curve.n_high[k],
            p_mis_low: curve.p_mis_low[k],
            n_low: curve.n_low[k],
        })
        .collect()
}

/// Undefined conditional frequencies are written as `NA`.
pub fn write_calibration_csv(path: &Path, rows: &[CalibrationRow]) -> Result<()> {
    let header: Vec<String> = CALIBRATION_HEADER.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.alpha.to_string(),
                fmt_opt(r.p_mis_high),
                r.n_high.to_string(),
                fmt_opt(r.p_mis_low),
                r.n_low.to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &body)
}

pub fn read_calibration_csv(path: impl AsRef<Path>) -> Result<Vec<CalibrationRow>> {
    let path = path.as_ref();
    let (header, rows) = read_rows(path)?;
    expect_header(path, &header, &CALIBRATION_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(CalibrationRow {
                alpha: field(path, line, &f[0])?,
                p_mis_high: parse_opt(path, line, &f[1])?,
                n_high: field(path, line, &f[2])?,
                p_mis_low: parse_opt(path, line, &f[3])?,
                n_low: field(path, line, &f[4])?,
            })
        })
        .collect()
}

/// Uncertainty statistics of one model on one test set, normalised by
/// `ln C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub seed: u64,
    pub model: String,
    pub accuracy: f64,
    pub n_wrong: usize,
    pub median_u_wrong: Option<f64>,
    pub median_u_correct: Option<f64>,
    /// Fraction of wrong predictions with `U < 0.1`.
    pub wrong_low_fraction: Option<f64>,
    /// Empirical `P(M | U < 0.1)`.
    pub p_mis_below_low: Option<f64>,
}

pub fn uncertainty_summary(
    seed: u64,
    model: &str,
    outputs: &[PredictiveOutput],
    labels: &[usize],
) -> UncertaintySummary {
    let mut wrong = Vec::new();
    let mut right = Vec::new();
    for (o, &y) in outputs.iter().zip(labels) {
        let u = o.normalized(UncertaintyMeasure::Total);
        if o.predicted == y {
            right.push(u);
        } else {
            wrong.push(u);
        }
    }
    let median = |v: &[f64]| (!v.is_empty()).then(|| stats::median(v));
    let low_wrong = wrong.iter().filter(|&&u| u < LOW_UNCERTAINTY).count();
    let low_right = right.iter().filter(|&&u| u < LOW_UNCERTAINTY).count();
    let low = low_wrong + low_right;
    UncertaintySummary {
        seed,
        model: model.into(),
        accuracy: outputs_accuracy(outputs, labels),
        n_wrong: wrong.len(),
        median_u_wrong: median(&wrong),
        median_u_correct: median(&right),
        wrong_low_fraction: (!wrong.is_empty()).then(|| low_wrong as f64 / wrong.len() as f64),
        p_mis_below_low: (low > 0).then(|| low_wrong as f64 / low as f64),
    }
}

/// Calibration-curve statistics of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub seed: u64,
    pub curve: String,
    /// `P(M|U>a) >= P(M|U<a)` wherever both sides are defined.
    pub separated: bool,
    /// Thresholds where the separation fails.
    pub violations: Vec<f64>,
    pub p_mis_below_low: Option<f64>,
}

pub fn calibration_summary(
    seed: u64,
    name: &str,
    curve: &CalibrationCurve,
    p_low: Option<f64>,
) -> CalibrationSummary {
    let violations: Vec<f64> = curve
        .alphas
        .iter()
        .zip(curve.p_mis_high.iter().zip(&curve.p_mis_low))
        .filter_map(|(&a, pair)| match pair {
            (Some(h), Some(l)) if h < l => Some(a),
            _ => None,
        })
        .collect();
    CalibrationSummary {
        seed,
        curve: name.into(),
        separated: violations.is_empty(),
        violations,
        p_mis_below_low: p_low,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub normalization: String,
    pub test_size: usize,
    pub models: Vec<UncertaintySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub normalization: String,
    pub alphas: Vec<f64>,
    pub curves: Vec<CalibrationSummary>,
}

/// The NN/BNN pair behind the histogram and calibration artifacts, fitted
/// once per replicate.
struct Replicate {
    base: u64,
    labels: Vec<usize>,
    nn: Vec<PredictiveOutput>,
    bnn: Vec<PredictiveOutput>,
    metrics: Vec<RunMetrics>,
}

fn fit_replicates(cfg: &ExperimentConfig) -> Result<Vec<Replicate>> {
    let (arch, n) = cfg.task_model()?;
    (0..cfg.seeds)
        .map(|r| {
            let base = cfg.replicate_seed(r);
            let train = task_dataset(cfg, cfg.task, n, train_data_seed(base, n), None)?;
            let test = task_dataset(
                cfg,
                cfg.task,
                cfg.test_size,
                test_data_seed(base, cfg.test_size),
                None,
            )?;
            let fitted = fit_models(cfg, &arch, &train, base, "", true)?;
            let (nn, bnn) = evaluate(&fitted, &mlp::feature_matrix(&test))?;
            let bnn = bnn.expect("bnn requested");
            let ens = fitted.bnn.as_ref().expect("bnn requested");
            let metric = |model: &str, outs: &[PredictiveOutput], rate, ms| RunMetrics {
                task: cfg.task.name().into(),
                arch: arch.label(),
                n_train: n,
                model: model.into(),
                accuracy: outputs_accuracy(outs, test.labels()),
                acceptance_rate: rate,
                wall_ms: ms,
                seed: base,
                run: None,
            };
            let metrics = vec![
                metric("nn", &nn, None, fitted.nn_ms),
                metric("bnn", &bnn, Some(ens.acceptance_rate), fitted.bnn_ms),
            ];
            Ok(Replicate {
                base,
                labels: test.labels().to_vec(),
                nn,
                bnn,
                metrics,
            })
        })
        .collect()
}

fn write_histograms(cfg: &ExperimentConfig, reps: &[Replicate]) -> Result<PathBuf> {
    let dir = cfg.out.join("histograms");
    prepare_dir(&dir, cfg)?;
    let mut models = Vec::new();
    for rep in reps {
        for (name, outs) in [("nn", &rep.nn), ("bnn", &rep.bnn)] {
            let stem = format!("{name}_s{}", rep.base);
            write_histogram_csv(
                &dir.join(format!("hist_{stem}.csv")),
                &histogram_rows(outs, &rep.labels, cfg.histogram_bins),
            )?;
            write_predictions_csv(
                &dir.join(format!("predictions_{stem}.csv")),
                &prediction_rows(outs, &rep.labels),
            )?;
            models.push(uncertainty_summary(rep.base, name, outs, &rep.labels));
        }
    }
    let report = HistogramReport {
        normalization: NORMALIZATION_NOTE.into(),
        test_size: cfg.test_size,
        models,
    };
    write_json(&dir.join(SUMMARY_FILE), &report)?;
    let metrics: Vec<&RunMetrics> = reps.iter().flat_map(|r| &r.metrics).collect();
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(dir)
}

fn write_calibration(cfg: &ExperimentConfig, reps: &[Replicate]) -> Result<PathBuf> {
    let dir = cfg.out.join("calibration");
    prepare_dir(&dir, cfg)?;
    let alphas = uncertainty::alpha_grid(cfg.alpha_points);
    let mut curves = Vec::new();
    for rep in reps {
        let sets = [
            ("nn_total", &rep.nn, UncertaintyMeasure::Total),
            ("bnn_total", &rep.bnn, UncertaintyMeasure::Total),
            ("bnn_epistemic", &rep.bnn, UncertaintyMeasure::Epistemic),
        ];
        for (name, outs, measure) in sets {
            let curve = uncertainty::misclassification_curve(outs, &rep.labels, &alphas, measure)?;
            let low = uncertainty::misclassification_curve(
                outs,
                &rep.labels,
                &[LOW_UNCERTAINTY],
                measure,
            )?;
            write_calibration_csv(
                &dir.join(format!("calibration_{name}_s{}.csv", rep.base)),
                &calibration_rows(&curve),
            )?;
            curves.push(calibration_summary(
                rep.base,
                name,
                &curve,
                low.p_mis_low[0],
            ));
        }
    }
    let report = CalibrationReport {
        normalization: NORMALIZATION_NOTE.into(),
        alphas,
        curves,
    };
    write_json(&dir.join(SUMMARY_FILE), &report)?;
    let metrics: Vec<&RunMetrics> = reps.iter().flat_map(|r| &r.metrics).collect();
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(dir)
}

pub fn run_histograms(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_histograms(cfg, &fit_replicates(cfg)?)
}

pub fn run_calibration(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_calibration(cfg, &fit_replicates(cfg)?)
}

/// Both artifacts from a single fit per replicate.
pub fn run_histograms_and_calibration(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    let reps = fit_replicates(cfg)?;
    Ok((
        write_histograms(cfg, &reps)?,
        write_calibration(cfg, &reps)?,
    ))
}

// ---------------------------------------------------------------------------
// rhombus

/// Cell centres of a `res x res` grid over `[-1, 1]^2`, row-major from the
/// lower-left corner.
pub fn rhombus_grid(res: usize) -> Array2<f64> {
    let step = 2.0 / res as f64;
    Array2::from_shape_fn((res * res, 2), |(k, c)| {
        let idx = if c == 0 { k % res } else { k / res };
        -1.0 + (idx as f64 + 0.5) * step
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub nn_pred: usize,
    pub nn_p0: f64,
    pub nn_total: f64,
    pub bnn_pred: usize,
    pub bnn_p0: f64,
    pub bnn_total: f64,
    pub bnn_aleatoric: f64,
    pub bnn_epistemic: f64,
}

pub const GRID_HEADER: [&str; 11] = [
    "x",
    "y",
    "label",
    "nn_pred",
    "nn_p0",
    "nn_total",
    "bnn_pred",
    "bnn_p0",
    "bnn_total",
    "bnn_aleatoric",
    "bnn_epistemic",
];

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let header: Vec<String> = GRID_HEADER.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.x.to_string(),
                r.y.to_string(),
                r.label.to_string(),
                r.nn_pred.to_string(),
                r.nn_p0.to_string(),
                r.nn_total.to_string(),
                r.bnn_pred.to_string(),
                r.bnn_p0.to_string(),
                r.bnn_total.to_string(),
                r.bnn_aleatoric.to_string(),
                r.bnn_epistemic.to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &body)
}

pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<Vec<GridRow>> {
    let path = path.as_ref();
    let (header, rows) = read_rows(path)?;
    expect_header(path, &header, &GRID_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(GridRow {
                x: field(path, line, &f[0])?,
                y: field(path, line, &f[1])?,
                label: field(path, line, &f[2])?,
                nn_pred: field(path, line, &f[3])?,
                nn_p0: field(path, line, &f[4])?,
                nn_total: field(path, line, &f[5])?,
                bnn_pred: field(path, line, &f[6])?,
                bnn_p0: field(path, line, &f[7])?,
                bnn_total: field(path, line, &f[8])?,
                bnn_aleatoric: field(path, line, &f[9])?,
                bnn_epistemic: field(path, line, &f[10])?,
            })
        })
        .collect()
}

/// Grid accuracy and mean normalised uncertainty inside the bias box for
/// one rhombus run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhombusSummary {
    pub seed: u64,
    pub run: String,
    pub nn_grid_accuracy: f64,
    pub bnn_grid_accuracy: f64,
    pub nn_mean_u_box: f64,
    pub bnn_mean_u_box: f64,
    pub box_points: usize,
}

pub fn rhombus_summary(seed: u64, run: &str, rows: &[GridRow], bias: &BiasSpec) -> RhombusSummary {
    let n = rows.len() as f64;
    let ln2 = std::f64::consts::LN_2;
    let boxed: Vec<&GridRow> = rows.iter().filter(|r| bias.contains(&[r.x, r.y])).collect();
    let m = boxed.len() as f64;
    RhombusSummary {
        seed,
        run: run.into(),
        nn_grid_accuracy: rows.iter().filter(|r| r.nn_pred == r.label).count() as f64 / n,
        bnn_grid_accuracy: rows.iter().filter(|r| r.bnn_pred == r.label).count() as f64 / n,
        nn_mean_u_box: boxed.iter().map(|r| r.nn_total / ln2).sum::<f64>() / m,
        bnn_mean_u_box: boxed.iter().map(|r| r.bnn_total / ln2).sum::<f64>() / m,
        box_points: boxed.len(),
    }
}

/// Trains NN and BNN on uniform and on biased rhombus data and evaluates
/// both on the grid: `grid_{uniform,biased}_s<seed>.csv`.
pub fn run_rhombus(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.join("rhombus");
    prepare_dir(&dir, cfg)?;
    let arch = cfg.arch_for(&cfg.rhombus_architecture, 2)?;
    let n = cfg.rhombus_train;
    let grid = rhombus_grid(cfg.grid_resolution);
    let labels: Vec<usize> = grid
        .rows()
        .into_iter()
        .map(|p| dataset::rhombus_label(&[p[0], p[1]]))
        .collect();
    let mut summaries = Vec::new();
    let mut metrics = Vec::new();
    for r in 0..cfg.seeds {
        let base = cfg.replicate_seed(r);
        for run in ["uniform", "biased"] {
            let train = if run == "biased" {
                dataset::sample_rhombus_dataset(n, Some(&cfg.bias), biased_data_seed(base, n))?
            } else {
                dataset::sample_rhombus_dataset(n, None, train_data_seed(base, n))?
            };
            let fitted = fit_models(cfg, &arch, &train, base, run, true)?;
            let (nn, bnn) = evaluate(&fitted, &grid)?;
            let bnn = bnn.expect("bnn requested");
            let rows: Vec<GridRow> = (0..labels.len())
                .map(|k| GridRow {
                    x: grid[[k, 0]],
                    y: grid[[k, 1]],
                    label: labels[k],
                    nn_pred: nn[k].predicted,
                    nn_p0: nn[k].probs[0],
                    nn_total: nn[k].total,
                    bnn_pred: bnn[k].predicted,
                    bnn_p0: bnn[k].probs[0],
                    bnn_total: bnn[k].total,
                    bnn_aleatoric: bnn[k].aleatoric,
                    bnn_epistemic: bnn[k].epistemic,
                })
                .collect();
            write_grid_csv(&dir.join(format!("grid_{run}_s{base}.csv")), &rows)?;
            summaries.push(rhombus_summary(base, run, &rows, &cfg.bias));
            let ens = fitted.bnn.as_ref().expect("bnn requested");
            for (model, outs, rate, ms) in [
                ("nn", &nn, None, fitted.nn_ms),
                ("bnn", &bnn, Some(ens.acceptance_rate), fitted.bnn_ms),
            ] {
                metrics.push(RunMetrics {
                    task: Task::Rhombus.name().into(),
                    arch: arch.label(),
                    n_train: n,
                    model: model.into(),
                    accuracy: outputs_accuracy(outs, &labels),
                    acceptance_rate: rate,
                    wall_ms: ms,
                    seed: base,
                    run: Some(run.into()),
                });
            }
        }
    }
    write_json(&dir.join(SUMMARY_FILE), &summaries)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// run-all

/// The full suite on the behaviour task plus the rhombus study. The NN/BNN
/// pairs of the histogram and calibration stages are fitted once.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    let mut kcbs = cfg.clone();
    kcbs.task = Task::Kcbs;
    let mut dirs = vec![run_generate(&kcbs)?];
    log::info!("generate done after {:.0} s", start.elapsed().as_secs_f64());
    dirs.push(run_accuracy_sweep(&kcbs)?);
    log::info!(
        "accuracy sweep done after {:.0} s",
        start.elapsed().as_secs_f64()
    );
    let (hist, cal) = run_histograms_and_calibration(&kcbs)?;
    dirs.extend([hist, cal]);
    log::info!(
        "histograms and calibration done after {:.0} s",
        start.elapsed().as_secs_f64()
    );
    dirs.push(run_rhombus(cfg)?);
    log::info!("run-all finished in {:.0} s", start.elapsed().as_secs_f64());
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            out: out.to_path_buf(),
            seeds: 1,
            architecture: vec![4, 2],
            sweep_architectures: vec![vec![4, 2]],
            train_sizes: vec![10, 20],
            n_train: 20,
            test_size: 30,
            rhombus_architecture: vec![4, 2],
            rhombus_train: 40,
            grid_resolution: 4,
            ..ExperimentConfig::default()
        };
        cfg.train.min_steps = 0;
        cfg.train.epochs = 5;
        cfg.hmc.samples = 3;
        cfg.hmc.burn_in = 4;
        cfg.hmc.thinning = 1;
        cfg.hmc.leapfrog_steps = 2;
        cfg
    }

    #[test]
    fn toml_overlay_merges_sections() {
        let cfg = ExperimentConfig::from_toml_str("seeds = 5\n[hmc]\nburn_in = 7\n").unwrap();
        assert_eq!(cfg.seeds, 5);
        assert_eq!(cfg.hmc.burn_in, 7);
        assert_eq!(cfg.hmc.samples, HmcSection::default().samples);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("sede = 1"),
            Err(Error::Config(m)) if m.contains("sede")
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[hmc]\nsamples_ = 1"),
            Err(Error::Config(m)) if m.contains("hmc.samples_")
        ));
        assert!(ExperimentConfig::from_toml_str("train_sizes = [0, 50]").is_err());
        assert!(ExperimentConfig::from_toml_str("architecture = [8, 1]").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(train_data_seed(0, 50), test_data_seed(0, 50));
        assert_ne!(train_data_seed(0, 50), train_data_seed(1, 50));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }

    #[test]
    fn grid_covers_square() {
        let g = rhombus_grid(4);
        assert_eq!(g.nrows(), 16);
        assert_eq!((g[[0, 0]], g[[0, 1]]), (-0.75, -0.75));
        assert_eq!((g[[1, 0]], g[[1, 1]]), (-0.25, -0.75));
        assert_eq!((g[[15, 0]], g[[15, 1]]), (0.75, 0.75));
    }

    #[test]
    fn sweep_summary_counts_gaps() {
        let row = |size, model: &str, accuracy| AccuracyRow {
            size,
            arch: "4-2".into(),
            model: model.into(),
            accuracy,
            seed: 0,
        };
        let rows = vec![
            row(10, "nn", 0.6),
            row(10, "bnn", 0.7),
            row(20, "nn", 0.8),
            row(20, "bnn", 0.8),
        ];
        let s = summarize_sweep(&rows);
        assert_eq!(s.spearman.len(), 2);
        assert!(s.spearman.iter().all(|(_, _, rho)| *rho > 0.0));
        assert!((s.gaps[0].2 - 0.1).abs() < 1e-12);
        assert_eq!(s.gaps[1].2, 0.0);
    }

    #[test]
    fn tiny_pipelines_write_readable_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let dir = run_accuracy_sweep(&cfg).unwrap();
        let rows = read_accuracy_csv(dir.join("accuracy.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(read_metrics(dir.join(METRICS_FILE)).unwrap().len(), 4);

        let reps = fit_replicates(&cfg).unwrap();
        let dir = write_histograms(&cfg, &reps).unwrap();
        let hist = read_histogram_csv(dir.join("hist_bnn_s0.csv")).unwrap();
        assert_eq!(hist.iter().map(|h| h.count_all).sum::<usize>(), 30);
        assert_eq!(
            read_predictions_csv(dir.join("predictions_nn_s0.csv"))
                .unwrap()
                .len(),
            30
        );
        let dir = write_calibration(&cfg, &reps).unwrap();
        let cal = read_calibration_csv(dir.join("calibration_bnn_total_s0.csv")).unwrap();
        assert_eq!(cal.len(), 21);
        assert_eq!(cal[0].p_mis_low, None);

        let dir = run_rhombus(&cfg).unwrap();
        assert_eq!(
            read_grid_csv(dir.join("grid_biased_s0.csv")).unwrap().len(),
            16
        );
    }
}
