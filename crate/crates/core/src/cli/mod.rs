//! Command-line driver: reproducible experiments over training, traversal,
//! attacks, confidence geometry, and analytic verification.
//!
//! Every command resolves its parameters from built-in defaults, then an
//! optional `key = value` config file, then explicit flags, and echoes the
//! resolved set into a `manifest.txt` next to its outputs. Identical
//! parameters and seed produce byte-identical outputs regardless of `--jobs`.

mod compare;
mod reports;
mod sweep;
mod theory;
mod train;
mod traverse;

use crate::analytic::AnalyticError;
use crate::attacks::AttackError;
use crate::data::{DataError, Dataset};
use crate::lst::{LstConfig, LstError};
use crate::metrics::MetricError;
use crate::models::ModelError;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

/// Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::UnknownLayer(_) => CliError::Usage(e.to_string()),
            ModelError::Diverged { .. } | ModelError::Tensor(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LstError> for CliError {
    fn from(e: LstError) -> Self {
        match e {
            LstError::Config(_) | LstError::Shape { .. } | LstError::ClassOutOfRange { .. } => {
                CliError::Usage(e.to_string())
            }
            LstError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            LstError::Csv(inner) => inner.into(),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Config(_) | AttackError::Shape { .. }
            | AttackError::ClassOutOfRange { .. } => CliError::Usage(e.to_string()),
            AttackError::Model(inner) => inner.into(),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Model(inner) => inner.into(),
            MetricError::Spec(_) | MetricError::LambdaOutOfRange(_) => {
                CliError::Usage(e.to_string())
            }
            MetricError::ShapeMismatch(..) => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalyticError> for CliError {
    fn from(e: AnalyticError) -> Self {
        match e {
            AnalyticError::RankDeficient => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "levelset",
    version,
    about = "Probe the under-sensitivity of differentiable classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and write a checkpoint plus a training log.
    Train(train::TrainArgs),
    /// Run level set traversals between source/target pairs.
    Traverse(traverse::TraverseArgs),
    /// Triangle-hull confidence reports over stored traversal outputs.
    Triangle(reports::TriangleArgs),
    /// Path confidence profiles over stored traversal outputs.
    Path(reports::PathArgs),
    /// Extremality probes past stored traversal outputs.
    Extremality(reports::ExtremalityArgs),
    /// Median path confidence: targeted attacks vs feature attacks vs LST.
    AttackCompare(compare::AttackCompareArgs),
    /// Hyperparameter ablation sweeps.
    Sweep(sweep::SweepArgs),
    /// Analytic verification of closed-form model families.
    Theory(theory::TheoryArgs),
}

/// Parses arguments and runs the selected command; returns the process exit
/// code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => train::run(&args),
        Command::Traverse(args) => traverse::run(&args),
        Command::Triangle(args) => reports::run_triangle(&args),
        Command::Path(args) => reports::run_path(&args),
        Command::Extremality(args) => reports::run_extremality(&args),
        Command::AttackCompare(args) => compare::run(&args),
        Command::Sweep(args) => sweep::run(&args),
        Command::Theory(args) => theory::run(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("levelset: {e}");
            ExitCode::from(e.code())
        }
    }
}

// ── resolved parameters and manifests ───────────────────────────────

/// Ordered key=value parameter set; everything lands in the manifest.
/// Resolution order everywhere: built-in defaults, then the config file,
/// then explicit flags.
#[derive(Debug, Clone, Default)]
pub(crate) struct Params {
    values: BTreeMap<String, String>,
    allowed: std::collections::BTreeSet<String>,
}

impl Params {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.allowed.insert(key.to_string());
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.set(key, v.to_string());
        }
    }

    /// Declares a config-file key without giving it a value yet.
    pub fn allow(&mut self, key: &str) {
        self.allowed.insert(key.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self
            .get(key)
            .ok_or_else(|| CliError::Usage(format!("missing parameter {key}")))?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("parameter {key} has invalid value {raw:?}")))
    }

    pub fn parsed_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("parameter {key} has invalid value {raw:?}"))
            }),
        }
    }

    /// Loads `key = value` lines, rejecting keys the command never declared.
    pub fn merge_config_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
        for (number, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {} is not `key = value`: {line:?}",
                    number + 1
                )));
            };
            let key = key.trim();
            if !self.allowed.contains(key) {
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key {key:?}",
                    number + 1
                )));
            }
            self.values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    /// Writes the manifest: toolkit version plus every resolved parameter.
    pub fn write_manifest(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let mut out = String::new();
        out.push_str(&format!("command={command}\n"));
        out.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(dir.join("manifest.txt"), out)?;
        Ok(())
    }
}

pub(crate) fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("output dir {}: {e}", path.display())))
}

// ── dataset plumbing shared by commands ─────────────────────────────

/// Dataset selection flags shared by every command that needs data. Each
/// flag is also a config-file key with the same name.
#[derive(Args, Debug, Clone)]
pub(crate) struct DatasetArgs {
    /// Dataset: blobs | blobs2 | blobs-line | blobs-multi | blobs-scatter |
    /// blobs-hd | cifar | synth-cifar [default: blobs].
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding CIFAR-10 binary batches (dataset = cifar).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Per-class sample count for generated datasets.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Cap on the training split size (CIFAR subset selection).
    #[arg(long)]
    pub subset: Option<usize>,
    /// Seed for generated datasets (defaults to the command seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl DatasetArgs {
    pub fn declare(params: &mut Params) {
        params.set("dataset", "blobs");
        for key in ["data_dir", "per_class", "subset", "data_seed"] {
            params.allow(key);
        }
    }

    pub fn apply(&self, params: &mut Params) {
        params.set_opt("dataset", &self.dataset);
        if let Some(dir) = &self.data_dir {
            params.set("data_dir", dir.display());
        }
        params.set_opt("per_class", &self.per_class);
        params.set_opt("subset", &self.subset);
        params.set_opt("data_seed", &self.data_seed);
    }

    /// The effective dataset name after declare/config/apply.
    pub fn name(params: &Params) -> String {
        params.get("dataset").unwrap_or("blobs").to_string()
    }
}

/// Loads the dataset described by the resolved parameters; `fallback_seed`
/// covers data_seed when absent (and is echoed into the manifest).
pub(crate) fn load_dataset(params: &mut Params, fallback_seed: u64) -> Result<Dataset, CliError> {
    let seed = match params.parsed_opt::<u64>("data_seed")? {
        Some(s) => s,
        None => {
            params.set("data_seed", fallback_seed);
            fallback_seed
        }
    };
    let subset = params.parsed_opt::<usize>("subset")?;
    match DatasetArgs::name(params).as_str() {
        "blobs" => Ok(crate::data::generate_blobs(
            &crate::data::BlobDatasetSpec::four_corner_classes(seed),
        )?),
        "blobs2" => Ok(crate::data::generate_blobs(
            &crate::data::BlobDatasetSpec::two_separated_classes(seed),
        )?),
        "blobs-line" => Ok(crate::data::generate_blobs(
            &crate::data::BlobDatasetSpec::collinear_classes(seed),
        )?),
        "blobs-multi" => Ok(crate::data::generate_blobs(
            &crate::data::BlobDatasetSpec::interleaved_multimodal(seed),
        )?),
        "blobs-hd" => Ok(crate::data::generate_blobs(
            &crate::data::BlobDatasetSpec::high_dimensional_classes(seed),
        )?),
        "blobs-scatter" => Ok(crate::data::generate_blobs(
            &crate::data::BlobDatasetSpec::scattered_multimodal(seed),
        )?),
        "synth-cifar" => {
            let per_class = params.parsed_opt::<usize>("per_class")?.unwrap_or(250);
            let images = crate::data::synthetic_cifar(per_class, seed);
            Ok(split_dataset(images, "synth-cifar", subset))
        }
        "cifar" => {
            let dir = PathBuf::from(
                params
                    .get("data_dir")
                    .ok_or_else(|| CliError::Usage("dataset cifar requires --data-dir".into()))?,
            );
            let mut images = Vec::new();
            let mut found = false;
            for name in [
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ] {
                let path = dir.join(name);
                if path.exists() {
                    images.extend(crate::data::read_cifar10_binary(&path)?);
                    found = true;
                }
            }
            if !found {
                return Err(CliError::Data(format!(
                    "no data_batch_*.bin under {}",
                    dir.display()
                )));
            }
            Ok(split_dataset(images, "cifar10", subset))
        }
        other => Err(CliError::Usage(format!(
            "unknown dataset {other:?} (expected blobs, blobs2, blobs-line, blobs-multi, \
             blobs-scatter, blobs-hd, cifar, synth-cifar)"
        ))),
    }
}

/// 80/20 split by index with an optional cap on the training side.
fn split_dataset(
    images: Vec<crate::data::LabeledImage>,
    id: &str,
    subset: Option<usize>,
) -> Dataset {
    let input_shape = images
        .first()
        .map(|s| s.pixels.shape().to_vec())
        .unwrap_or_default();
    let classes = images.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let split = (images.len() * 4) / 5;
    let mut train: Vec<_> = images[..split].to_vec();
    let test: Vec<_> = images[split..].to_vec();
    if let Some(cap) = subset {
        train.truncate(cap);
    }
    Dataset {
        train,
        test,
        classes,
        input_shape,
        id: id.to_string(),
    }
}

// ── traversal hyperparameter flags ──────────────────────────────────

/// LST hyperparameters with preset + override resolution. Each flag is also
/// a config-file key with the same name.
#[derive(Args, Debug, Clone)]
pub(crate) struct LstArgs {
    /// Preset: desk | cifar | imagenet [default: desk].
    #[arg(long)]
    pub preset: Option<String>,
    /// Max iterations (overrides the preset).
    #[arg(long)]
    pub m: Option<usize>,
    /// Scale factor for the step perpendicular to the gradient.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Step size along the negative gradient.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Confidence-drop threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// EMA coefficient for the parallel step.
    #[arg(long)]
    pub beta: Option<f64>,
}

impl LstArgs {
    pub fn declare(params: &mut Params) {
        params.set("preset", "desk");
        for key in ["m", "eta", "eps", "delta", "beta"] {
            params.allow(key);
        }
    }

    pub fn apply(&self, params: &mut Params) {
        params.set_opt("preset", &self.preset);
        params.set_opt("m", &self.m);
        params.set_opt("eta", &self.eta);
        params.set_opt("eps", &self.eps);
        params.set_opt("delta", &self.delta);
        params.set_opt("beta", &self.beta);
    }

    /// Builds the effective config and echoes the resolved values back for
    /// the manifest.
    pub fn resolve(params: &mut Params) -> Result<LstConfig, CliError> {
        let mut config = match params.get("preset").unwrap_or("desk") {
            // desk runs allow early exit; the named presets reproduce
            // fixed-iteration runs
            "desk" => LstConfig {
                early_exit: true,
                ..LstConfig::cifar_style()
            },
            "cifar" => LstConfig {
                early_exit: false,
                ..LstConfig::cifar_style()
            },
            "imagenet" => LstConfig {
                early_exit: false,
                ..LstConfig::imagenet_style()
            },
            other => {
                return Err(CliError::Usage(format!(
                    "unknown preset {other:?} (expected desk, cifar, imagenet)"
                )))
            }
        };
        if let Some(m) = params.parsed_opt("m")? {
            config.max_iterations = m;
        }
        if let Some(eta) = params.parsed_opt("eta")? {
            config.eta = eta;
        }
        if let Some(eps) = params.parsed_opt("eps")? {
            config.epsilon = eps;
        }
        if let Some(delta) = params.parsed_opt("delta")? {
            config.delta = delta;
        }
        if let Some(beta) = params.parsed_opt("beta")? {
            config.beta = beta;
        }
        config.validate()?;
        params.set("m", config.max_iterations);
        params.set("eta", config.eta);
        params.set("eps", config.epsilon);
        params.set("delta", config.delta);
        params.set("beta", config.beta);
        params.set("early_exit", config.early_exit);
        Ok(config)
    }
}

// ── deterministic worker pool ───────────────────────────────────────

/// Maps `f` over `0..n` with up to `jobs` worker threads. Results are
/// collected by index, so the output is independent of scheduling.
pub(crate) fn par_map<T, F>(jobs: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                if tx.send((i, f(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, value) in rx {
            results[i] = Some(value);
        }
    });
    results
        .into_iter()
        .map(|v| v.expect("worker filled every slot"))
        .collect()
}
