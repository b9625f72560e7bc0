//! Sequential experiment runner: trains over a task stream with a chosen
//! method, evaluates after every task and persists metrics and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::curvature::{estimate, CurvatureMethod, CurvatureSet, LabelSampling};
use crate::dataset::{
    make_disjoint_tasks, make_permuted_tasks, resolve_data_dir, LabeledSet, Splits, Task, TaskStream,
    DEFAULT_VALIDATION_SIZE,
};
use crate::error::{Error, Result};
use crate::network::{accuracy, Activation, MlpParams};
use crate::numerics::Rng;
use crate::posterior::{init_posterior, PosteriorState, Variant};
use crate::trainer::{train_task, DecayUnit, OptimizerConfig, OptimizerKind, StepDecay};

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "KFLAPLACE_DATA_DIR";

// Random stream ids; permutations use streams 1..=T of the same seed.
const INIT_STREAM: u64 = 1 << 40;
const TRAIN_STREAM: u64 = 2 << 40;
const CURVATURE_STREAM: u64 = 3 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Permuted,
    Disjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Online,
    PerTask,
    Approximate,
    /// Retrain from scratch on the union of all tasks seen so far.
    JointBaseline,
    /// Plain sequential fine-tuning with no penalty.
    NoneBaseline,
}

impl Method {
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Online => Some(Variant::Online),
            Method::PerTask => Some(Variant::PerTask),
            Method::Approximate => Some(Variant::Approximate),
            Method::JointBaseline | Method::NoneBaseline => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Method::Online => "online",
            Method::PerTask => "per-task",
            Method::Approximate => "approximate",
            Method::JointBaseline => "joint-baseline",
            Method::NoneBaseline => "none-baseline",
        }
    }
}

/// Parses a kebab-case enum value the same way config files do.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown value `{s}`")))
}

/// Flat experiment description; every key may appear in a TOML or JSON file.
/// Optimizer fields left unset take the preset for the chosen optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub num_tasks: usize,
    pub method: Method,
    pub curvature: CurvatureMethod,
    pub lambda: f64,
    /// Grid used by `sweep`.
    pub lambdas: Vec<f64>,
    /// τ, precision of the initial isotropic prior.
    pub prior_precision: f64,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub min_epochs: Option<usize>,
    pub task_decay: Option<f64>,
    pub step_decay_factor: Option<f64>,
    pub step_decay_every: Option<usize>,
    pub step_decay_unit: Option<DecayUnit>,
    /// Divide the initial learning rate of tasks after the first by
    /// `max(1, λ/10)` (Kronecker) or `max(1, λ/1000)` (diagonal).
    /// Defaults to on for the disjoint experiment.
    pub lambda_lr_divisor: Option<bool>,
    /// Extra multiplier on that divisor; sweeps raise it after a divergence.
    pub lr_divisor_factor: f64,
    /// Sweep retries of a diverged grid point, each with a 10× larger divisor.
    pub divergence_retries: usize,
    pub fisher_samples: usize,
    pub exact_label_expectation: bool,
    pub seed: u64,
    pub identity_first_task: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub validation_size: usize,
    /// Training examples kept from the base training split (before the
    /// digit split in the disjoint experiment); 0 keeps the whole split.
    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub test_size: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Permuted,
            num_tasks: 5,
            method: Method::Online,
            curvature: CurvatureMethod::KfFisher,
            lambda: 1.0,
            lambdas: Vec::new(),
            prior_precision: 0.0,
            optimizer: None,
            learning_rate: None,
            momentum: None,
            epochs: None,
            batch_size: None,
            early_stop_patience: None,
            min_epochs: None,
            task_decay: None,
            step_decay_factor: None,
            step_decay_every: None,
            step_decay_unit: None,
            lambda_lr_divisor: None,
            lr_divisor_factor: 1.0,
            divergence_retries: 2,
            fisher_samples: 1,
            exact_label_expectation: false,
            seed: 0,
            identity_first_task: false,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            validation_size: DEFAULT_VALIDATION_SIZE,
            train_size: Some(10_000),
            val_size: None,
            test_size: None,
            hidden: vec![100, 100],
            activation: Activation::Relu,
            checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file; `.json` files (or content starting with `{`) are
    /// JSON, anything else TOML.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        let cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return bad(format!("grid values must be > 0, got {l}"));
        }
        if !(self.prior_precision.is_finite() && self.prior_precision >= 0.0) {
            return bad(format!("prior_precision must be ≥ 0, got {}", self.prior_precision));
        }
        if !(self.lr_divisor_factor.is_finite() && self.lr_divisor_factor > 0.0) {
            return bad(format!("lr_divisor_factor must be > 0, got {}", self.lr_divisor_factor));
        }
        if self.fisher_samples == 0 {
            return bad("fisher_samples must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        self.optimizer_config().validate()
    }

    /// Number of tasks actually run; the disjoint stream has only two.
    pub fn effective_tasks(&self) -> usize {
        match self.experiment {
            ExperimentKind::Permuted => self.num_tasks,
            ExperimentKind::Disjoint => self.num_tasks.min(2),
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.experiment {
            ExperimentKind::Permuted => OptimizerKind::Adam,
            ExperimentKind::Disjoint => OptimizerKind::Nesterov,
        })
    }

    /// Preset for the optimizer and experiment, overridden by set fields.
    pub fn optimizer_config(&self) -> OptimizerConfig {
        let kind = self.optimizer_kind();
        let mut o = match (self.experiment, kind) {
            (ExperimentKind::Disjoint, OptimizerKind::Nesterov) => OptimizerConfig::nesterov_disjoint(),
            _ => OptimizerConfig::for_kind(kind),
        };
        if let Some(v) = self.learning_rate {
            o.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            o.momentum = v;
        }
        if let Some(v) = self.epochs {
            o.epochs = v;
        }
        if let Some(v) = self.batch_size {
            o.batch_size = v;
        }
        if let Some(v) = self.early_stop_patience {
            o.early_stop_patience = (v > 0).then_some(v);
        }
        if let Some(v) = self.min_epochs {
            o.min_epochs = v;
        }
        if let Some(v) = self.task_decay {
            o.task_decay = v;
        }
        if self.step_decay_factor.is_some() || self.step_decay_every.is_some() || self.step_decay_unit.is_some() {
            let base = o.step_decay.unwrap_or(StepDecay {
                factor: 0.1,
                every: 5,
                unit: DecayUnit::Epochs,
            });
            o.step_decay = Some(StepDecay {
                factor: self.step_decay_factor.unwrap_or(base.factor),
                every: self.step_decay_every.unwrap_or(base.every),
                unit: self.step_decay_unit.unwrap_or(base.unit),
            });
        }
        o
    }

    pub fn label_sampling(&self) -> LabelSampling {
        if self.exact_label_expectation {
            LabelSampling::Exact
        } else {
            LabelSampling::MonteCarlo {
                samples: self.fisher_samples,
            }
        }
    }

    /// Learning-rate divisor for task `t` (1-based).
    pub fn lr_divisor(&self, t: usize) -> f64 {
        let enabled = self
            .lambda_lr_divisor
            .unwrap_or(self.experiment == ExperimentKind::Disjoint);
        if !enabled || t < 2 || self.method.variant().is_none() {
            return 1.0;
        }
        let scale = if self.curvature.is_kronecker() { 10.0 } else { 1000.0 };
        (self.lambda / scale).max(1.0) * self.lr_divisor_factor
    }

    pub fn layer_sizes(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden);
        s.push(output_dim);
        s
    }

    /// Short hex digest of the canonical JSON form, ignoring paths.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("data_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Accuracies after training task `after_task`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub after_task: usize,
    /// Test accuracy on tasks 1..=after_task.
    pub test_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub first: f64,
    pub last: f64,
    pub val_mean: Option<f64>,
    pub epochs_run: usize,
    pub config_hash: String,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricsRecord {
    pub fn new(after_task: usize, test_accuracy: Vec<f64>, val_accuracy: Vec<f64>, epochs_run: usize, config_hash: String) -> Self {
        MetricsRecord {
            after_task,
            mean: mean(&test_accuracy),
            min: test_accuracy.iter().copied().fold(f64::INFINITY, f64::min),
            max: test_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            first: test_accuracy[0],
            last: *test_accuracy.last().expect("at least one task"),
            val_mean: (!val_accuracy.is_empty()).then(|| mean(&val_accuracy)),
            test_accuracy,
            val_accuracy,
            epochs_run,
            config_hash,
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub curvature: CurvatureMethod,
    pub lambda: f64,
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
}

impl RunMetrics {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("runs have at least one task")
    }
}

pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub params: MlpParams,
    pub posterior: PosteriorState,
    /// Wall-clock seconds per task; kept out of the metrics files so those
    /// stay byte-identical across reruns.
    pub task_seconds: Vec<f64>,
}

/// Loads MNIST and builds the configured task stream.
pub fn load_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    let dir = resolve_data_dir(config.data_dir.as_deref()).ok_or_else(|| {
        Error::Config(format!("no MNIST directory: set `data_dir` or the {DATA_DIR_ENV} environment variable"))
    })?;
    let base = Splits::load_mnist_dir(&dir, config.validation_size)?.truncated(
        config.train_size.filter(|&n| n > 0),
        config.val_size,
        config.test_size,
    );
    match config.experiment {
        ExperimentKind::Permuted => make_permuted_tasks(&base, config.num_tasks, config.seed, config.identity_first_task),
        ExperimentKind::Disjoint => make_disjoint_tasks(&base),
    }
}

fn curvature_for(config: &ExperimentConfig, params: &MlpParams, task: &Task) -> Result<CurvatureSet> {
    let mut rng = Rng::with_stream(config.seed, CURVATURE_STREAM + task.id as u64);
    estimate(config.curvature, params, &task.train, config.label_sampling(), &mut rng)
}

fn union_task(tasks: &[Task]) -> Result<Task> {
    let trains: Vec<&LabeledSet> = tasks.iter().map(|t| &t.train).collect();
    let vals: Vec<&LabeledSet> = tasks.iter().filter(|t| !t.val.is_empty()).map(|t| &t.val).collect();
    let last = tasks.last().expect("nonempty");
    Ok(Task {
        id: last.id,
        train: LabeledSet::concat(&trains)?,
        val: if vals.is_empty() { last.val.clone() } else { LabeledSet::concat(&vals)? },
        test: last.test.clone(),
    })
}

/// Runs the method over `stream` without touching the filesystem unless
/// `out` is given, in which case per-task parameter checkpoints go there.
pub fn execute(config: &ExperimentConfig, stream: &TaskStream, out: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let wanted = config.effective_tasks();
    if stream.len() < wanted {
        return Err(Error::Config(format!("stream has {} tasks, config asks for {wanted}", stream.len())));
    }
    let tasks = &stream.tasks[..wanted];
    let input_dim = tasks[0].train.input_dim();
    let sizes = config.layer_sizes(input_dim, crate::dataset::NUM_CLASSES);
    let hash = config.hash();
    let mut init_rng = Rng::with_stream(config.seed, INIT_STREAM);
    let init = MlpParams::init(&sizes, config.activation, &mut init_rng)?;
    let variant = config.method.variant().unwrap_or(Variant::Online);
    let mut posterior = init_posterior(variant, config.prior_precision, &init.shapes())?;
    let base_opt = config.optimizer_config();
    let mut params = init.clone();
    let mut records = Vec::with_capacity(tasks.len());
    let mut task_seconds = Vec::with_capacity(tasks.len());

    for (k, task) in tasks.iter().enumerate() {
        let started = Instant::now();
        let mut opt = base_opt.clone();
        opt.learning_rate /= config.lr_divisor(task.id);
        let mut rng = Rng::with_stream(config.seed, TRAIN_STREAM + task.id as u64);
        let report = if config.method == Method::JointBaseline {
            let joint = union_task(&tasks[..=k])?;
            train_task(&init, &posterior, &joint, &opt, &mut rng)?
        } else {
            train_task(&params, &posterior, task, &opt, &mut rng)?
        };
        params = report.params;

        let seen = &tasks[..=k];
        let test_acc = seen.iter().map(|t| accuracy(&params, &t.test)).collect::<Result<Vec<_>>>()?;
        let val_acc = seen
            .iter()
            .filter(|t| !t.val.is_empty())
            .map(|t| accuracy(&params, &t.val))
            .collect::<Result<Vec<_>>>()?;

        if let Some(v) = config.method.variant() {
            let curvatures = if v == Variant::Approximate {
                seen.iter().map(|t| curvature_for(config, &params, t)).collect::<Result<Vec<_>>>()?
            } else {
                vec![curvature_for(config, &params, task)?]
            };
            posterior = posterior.update(&params.layers, curvatures, config.lambda)?;
        }

        let record = MetricsRecord::new(task.id, test_acc, val_acc, report.epochs_run, hash.clone());
        info!(
            "{} {} λ={} after task {}: mean {:.4} first {:.4} last {:.4} ({} epochs)",
            config.method.tag(),
            config.curvature.tag(),
            config.lambda,
            task.id,
            record.mean,
            record.first,
            record.last,
            report.epochs_run
        );
        records.push(record);
        if let Some(dir) = out {
            checkpoint::save_params(&params, &dir.join(format!("params-task{}.kflc", task.id)))?;
        }
        task_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok(RunOutcome {
        metrics: RunMetrics {
            method: config.method,
            curvature: config.curvature,
            lambda: config.lambda,
            config_hash: hash,
            records,
        },
        params,
        posterior,
        task_seconds,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `config.json`, then trains and writes `metrics.json`,
/// `metrics.csv`, `timings.json` and `checkpoints/` under `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let stream = load_stream(config)?;
    run_on_stream(config, &stream)
}

/// [`run_experiment`] over an already built stream.
pub fn run_on_stream(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunOutcome> {
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    let ckpt = out.join("checkpoints");
    if config.checkpoints {
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    }
    let outcome = execute(config, stream, config.checkpoints.then_some(ckpt.as_path()))?;
    if config.checkpoints {
        checkpoint::save_posterior(&outcome.posterior, &ckpt.join("posterior-final.kflc"))?;
    }
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&outcome.metrics)? + "\n")?;
    write(&out.join("metrics.csv"), emit_plot_data(std::slice::from_ref(&outcome.metrics))?)?;
    let timings = serde_json::json!({ "task_seconds": outcome.task_seconds });
    write(&out.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
    Ok(outcome)
}

/// One row of the tidy accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: Method,
    pub curvature: CurvatureMethod,
    pub lambda: f64,
    pub after_task: usize,
    pub eval_task: usize,
    pub accuracy: f64,
}

/// Header of the tidy CSV.
pub const PLOT_COLUMNS: [&str; 6] = ["method", "curvature", "lambda", "after_task", "eval_task", "accuracy"];

pub fn plot_rows(runs: &[RunMetrics]) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for run in runs {
        for rec in &run.records {
            for (i, &acc) in rec.test_accuracy.iter().enumerate() {
                rows.push(PlotRow {
                    method: run.method,
                    curvature: run.curvature,
                    lambda: run.lambda,
                    after_task: rec.after_task,
                    eval_task: i + 1,
                    accuracy: acc,
                });
            }
        }
    }
    rows
}

/// Tidy CSV with one row per (after_task, eval_task) pair of every run.
pub fn emit_plot_data(runs: &[RunMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in plot_rows(runs) {
        w.serialize(row)?;
    }
    if runs.iter().all(|r| r.records.is_empty()) {
        w.write_record(PLOT_COLUMNS)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_plot_data(text: &str) -> Result<Vec<PlotRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != PLOT_COLUMNS {
        return Err(Error::Config(format!("unexpected plot-data columns {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<PlotRow>, _>>()?)
}

/// Rebuilds the test-accuracy part of each run's records from tidy rows,
/// grouping by (method, curvature, lambda) in order of first appearance.
/// Validation accuracies and hashes are not part of the table and are left
/// empty.
pub fn runs_from_plot_rows(rows: &[PlotRow]) -> Result<Vec<RunMetrics>> {
    let mut runs: Vec<RunMetrics> = Vec::new();
    for row in rows {
        let pos = runs
            .iter()
            .position(|r| r.method == row.method && r.curvature == row.curvature && r.lambda.to_bits() == row.lambda.to_bits());
        let run = match pos {
            Some(p) => &mut runs[p],
            None => {
                runs.push(RunMetrics {
                    method: row.method,
                    curvature: row.curvature,
                    lambda: row.lambda,
                    config_hash: String::new(),
                    records: Vec::new(),
                });
                runs.last_mut().expect("just pushed")
            }
        };
        if run.records.last().is_none_or(|r| r.after_task != row.after_task) {
            run.records.push(MetricsRecord::new(row.after_task, vec![row.accuracy], Vec::new(), 0, String::new()));
        } else {
            let rec = run.records.last_mut().expect("checked");
            let mut acc = std::mem::take(&mut rec.test_accuracy);
            acc.push(row.accuracy);
            *rec = MetricsRecord::new(row.after_task, acc, Vec::new(), 0, String::new());
        }
        let rec = run.records.last().expect("pushed");
        if rec.test_accuracy.len() != row.eval_task || row.eval_task > row.after_task {
            return Err(Error::Config(format!(
                "row after_task={} eval_task={} out of order",
                row.after_task, row.eval_task
            )));
        }
    }
    Ok(runs)
}

/// Collects `metrics.json` from `dir` itself or, failing that, from its
/// immediate subdirectories in name order.
pub fn collect_metrics(dir: &Path) -> Result<Vec<RunMetrics>> {
    let read = |p: &Path| -> Result<RunMetrics> {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(serde_json::from_str(&text)?)
    };
    let own = dir.join("metrics.json");
    if own.is_file() {
        return Ok(vec![read(&own)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Config(format!("no metrics.json under {}", dir.display())));
    }
    subdirs.iter().map(|p| read(&p.join("metrics.json"))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub out_dir: PathBuf,
    /// Divisor multiplier of the attempt that finished (see `lr_divisor_factor`).
    pub lr_divisor_factor: f64,
    /// Every attempt diverged; the accuracy fields are then empty.
    pub diverged: bool,
    pub final_val_mean: Option<f64>,
    pub final_test_mean: Option<f64>,
    pub final_first: Option<f64>,
    pub final_last: Option<f64>,
    /// Mean test accuracy after each task.
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: Method,
    pub curvature: CurvatureMethod,
    pub best_lambda: f64,
    pub entries: Vec<SweepEntry>,
}

impl SweepSummary {
    pub fn best(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.lambda == self.best_lambda)
            .expect("winner is one of the entries")
    }
}

/// Directory name for one grid point.
pub fn lambda_dir(lambda: f64) -> String {
    format!("lambda-{lambda}")
}

/// Index of the highest score; the earliest wins ties. NaN never wins.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_nan() && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// One run per grid value on a shared stream; the winner has the highest
/// final mean validation accuracy.
pub fn sweep_on_stream(config: &ExperimentConfig, lambdas: &[f64], stream: &TaskStream) -> Result<SweepSummary> {
    if lambdas.is_empty() {
        return Err(Error::Config("the lambda grid is empty".into()));
    }
    let mut entries = Vec::with_capacity(lambdas.len());
    let mut last_divergence = None;
    for &lambda in lambdas {
        let mut c = config.clone();
        c.lambda = lambda;
        c.out_dir = config.out_dir.join(lambda_dir(lambda));
        let mut entry = SweepEntry {
            lambda,
            out_dir: c.out_dir.clone(),
            lr_divisor_factor: c.lr_divisor_factor,
            diverged: true,
            final_val_mean: None,
            final_test_mean: None,
            final_first: None,
            final_last: None,
            curve: Vec::new(),
        };
        for attempt in 0..=config.divergence_retries {
            if attempt > 0 {
                c.lr_divisor_factor *= 10.0;
                log::warn!("λ={lambda} diverged; retrying with lr divisor factor {}", c.lr_divisor_factor);
            }
            match run_on_stream(&c, stream) {
                Ok(outcome) => {
                    let last = outcome.metrics.last();
                    entry.lr_divisor_factor = c.lr_divisor_factor;
                    entry.diverged = false;
                    entry.final_val_mean = last.val_mean;
                    entry.final_test_mean = Some(last.mean);
                    entry.final_first = Some(last.first);
                    entry.final_last = Some(last.last);
                    entry.curve = outcome.metrics.records.iter().map(|r| r.mean).collect();
                    break;
                }
                Err(e @ Error::Divergence { .. }) => last_divergence = Some(e),
                Err(e) => return Err(e),
            }
        }
        entries.push(entry);
    }
    if entries.iter().all(|e| e.diverged) {
        return Err(last_divergence.expect("a diverged entry recorded its error"));
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.final_val_mean.unwrap_or(f64::NAN)).collect();
    // Without validation data, fall back to the first grid point that finished.
    let best = select_best(&scores).unwrap_or_else(|| entries.iter().position(|e| !e.diverged).unwrap_or(0));
    let summary = SweepSummary {
        method: config.method,
        curvature: config.curvature,
        best_lambda: entries[best].lambda,
        entries,
    };
    write(&config.out_dir.join("sweep.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Grid sweep over `lambdas` (or the config's own grid when empty).
pub fn grid_sweep(config: &ExperimentConfig, lambdas: &[f64]) -> Result<SweepSummary> {
    let grid = if lambdas.is_empty() { config.lambdas.as_slice() } else { lambdas };
    let mut c = config.clone();
    c.lambdas = grid.to_vec();
    c.validate()?;
    let stream = load_stream(&c)?;
    fs::create_dir_all(&c.out_dir).map_err(|e| Error::io(&c.out_dir, e))?;
    sweep_on_stream(&c, grid, &stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PIXELS;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!(c.num_tasks, 5);
        assert_eq!(c.layer_sizes(PIXELS, 10), vec![784, 100, 100, 10]);
        let o = c.optimizer_config();
        assert_eq!(o.kind, OptimizerKind::Adam);
        assert_eq!(o.learning_rate, 1e-3);
        assert_eq!(o.epochs, 20);
        c.validate().unwrap();
    }

    #[test]
    fn config_parses_toml_and_json_alike() {
        let toml_text = "method = \"per-task\"\ncurvature = \"diag\"\nlambda = 3.0\nhidden = [20]\nlearning_rate = 0.01\n";
        let json_text = r#"{"method": "per-task", "curvature": "diag", "lambda": 3.0, "hidden": [20], "learning_rate": 0.01}"#;
        let a: ExperimentConfig = toml::from_str(toml_text).unwrap();
        let b: ExperimentConfig = serde_json::from_str(json_text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, Method::PerTask);
        assert_eq!(a.curvature, CurvatureMethod::DiagFisher);
        assert_eq!(a.optimizer_config().learning_rate, 0.01);
        assert!(toml::from_str::<ExperimentConfig>("lamda = 3.0").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ExperimentConfig::default();
        c.num_tasks = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.lambdas = vec![1.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.experiment = ExperimentKind::Disjoint;
        c.validate().unwrap();
        assert_eq!(c.effective_tasks(), 2);
        assert_eq!(c.optimizer_config().batch_size, 250);
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        b.data_dir = Some(PathBuf::from("/data"));
        assert_eq!(a.hash(), b.hash());
        b.lambda = 3.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn lr_divisor_rule() {
        let mut c = ExperimentConfig {
            experiment: ExperimentKind::Disjoint,
            num_tasks: 2,
            lambda: 1e4,
            ..ExperimentConfig::default()
        };
        assert_eq!(c.lr_divisor(1), 1.0);
        assert_eq!(c.lr_divisor(2), 1e3);
        c.curvature = CurvatureMethod::DiagFisher;
        assert_eq!(c.lr_divisor(2), 10.0);
        c.lr_divisor_factor = 10.0;
        assert_eq!(c.lr_divisor(2), 100.0);
        c.lr_divisor_factor = 1.0;
        c.lambda = 3.0;
        assert_eq!(c.lr_divisor(2), 1.0);
        c.lambda = 1e4;
        c.method = Method::NoneBaseline;
        assert_eq!(c.lr_divisor(2), 1.0);
        c.method = Method::Online;
        c.lambda_lr_divisor = Some(false);
        assert_eq!(c.lr_divisor(2), 1.0);
    }

    #[test]
    fn record_summary_fields() {
        let r = MetricsRecord::new(3, vec![0.5, 0.9, 0.7], vec![0.4, 0.8, 0.6], 20, "h".into());
        assert_eq!((r.min, r.max, r.first, r.last), (0.5, 0.9, 0.5, 0.7));
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((r.val_mean.unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn best_selection_prefers_first_of_ties() {
        assert_eq!(select_best(&[0.5, 0.9, 0.9, 0.1]), Some(1));
        assert_eq!(select_best(&[f64::NAN, 0.2]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn enum_parsing() {
        assert_eq!(parse_enum::<Method>("joint-baseline").unwrap(), Method::JointBaseline);
        assert_eq!(parse_enum::<CurvatureMethod>("kf").unwrap(), CurvatureMethod::KfFisher);
        assert!(parse_enum::<Method>("ewc").is_err());
    }
}
