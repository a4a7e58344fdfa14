//! The `andkit` command line: `generate`, `train`, `eval`, `inspect`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (bad flags or invalid configuration values).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataio::{generate_blobs, load_any, save_bin, save_csv, BlobSpec, Dataset};
use crate::encoder::{Activation, EncoderConfig, EncoderParams};
use crate::evaluation::{
    knn_accuracy, linear_probe, neighbourhood_consistency, EvalReport, LabelMonitor, ProbeConfig,
    DEFAULT_EVAL_TAU, DEFAULT_KNN_K,
};
use crate::memory_bank::FeatureBank;
use crate::pipeline::{
    plan_round, train_with, Checkpoint, Curriculum, MetricsRecord, NoMonitor, RoundPlan, TrainConfig,
    TrainMonitor, WarmStart,
};
use crate::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "andkit", version, about = "Anchor neighbourhood discovery for unsupervised feature learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-blob dataset.
    Generate(GenerateArgs),
    /// Train an encoder on a dataset (labels, if present, are not used for training).
    Train(TrainArgs),
    /// Evaluate a checkpoint with weighted kNN and an optional linear probe.
    Eval(EvalArgs),
    /// Dump per-anchor neighbourhoods, entropies and curriculum selection as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Bin,
    Csv,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub classes: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub per_class: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub dim: u32,
    /// Norm of each class centre.
    #[arg(long, default_value_t = 5.0)]
    pub scale: f64,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DataFormat::Bin)]
    pub format: DataFormat,
    #[arg(long)]
    pub out: PathBuf,
    /// Split samples alternately: even rows to --out, odd rows here.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Seeded random encoder followed by the instance-learning warm-up.
    Random,
    /// Skip the instance-learning warm-up.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LrScheduleMode {
    Global,
    PerRound,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset path (.csv, or the binary format otherwise). Required unless --from-manifest.
    #[arg(long, required_unless_present = "from_manifest")]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint.andc, metrics.jsonl and manifest.json.
    #[arg(long, required_unless_present = "from_manifest")]
    pub out: Option<PathBuf>,
    /// Re-run exactly the configuration recorded in a manifest.
    #[arg(long, conflicts_with_all = ["rounds", "epochs", "init_epochs", "batch_size", "lr", "momentum", "tau", "eta", "k", "seed", "hidden", "feature_dim", "activation", "lr_schedule", "one_off", "instance_only", "init", "resume"])]
    pub from_manifest: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub rounds: Option<u32>,
    /// Epochs per curriculum round.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Epochs of instance-learning warm-up (defaults to --epochs).
    #[arg(long)]
    pub init_epochs: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    pub lr_schedule: Option<LrScheduleMode>,
    /// Select every anchor in round 1 and never re-plan.
    #[arg(long, conflicts_with = "instance_only")]
    pub one_off: bool,
    /// Never select anchors: instance learning in every round.
    #[arg(long)]
    pub instance_only: bool,
    #[arg(long, value_enum)]
    pub init: Option<InitMode>,
    /// Start from a checkpoint's encoder and memory bank.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The labelled training split the checkpoint was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Labelled held-out split. Without it the training split is scored leave-one-out.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_KNN_K as u32, value_parser = clap::value_parser!(u32).range(1..))]
    pub knn_k: u32,
    #[arg(long, default_value_t = DEFAULT_EVAL_TAU)]
    pub tau: f64,
    /// Also fit a linear softmax probe (needs --test-data).
    #[arg(long, requires = "test_data")]
    pub probe: bool,
    #[arg(long, default_value_t = 200)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled dataset for the `consistent` column; left empty without labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Curriculum round to plan (defaults to the checkpoint's last round).
    #[arg(long)]
    pub round: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to reproduce a `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub seed: u64,
    pub data: PathBuf,
    pub resume: Option<PathBuf>,
    pub init: InitMode,
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub config: TrainConfig,
    pub outputs: ManifestOutputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub consistency: Option<PathBuf>,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(&a).map(|_| ()),
    }
}

fn save_dataset(d: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Bin => save_bin(d, path),
        DataFormat::Csv => save_csv(d, path),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> std::result::Result<(), CliError> {
    let spec = BlobSpec {
        num_classes: a.classes as usize,
        per_class: a.per_class as usize,
        dim: a.dim as usize,
        center_scale: a.scale,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let data = generate_blobs(&spec)?;
    match &a.test_out {
        Some(test_path) => {
            let (train, test) = data.split_alternating()?;
            save_dataset(&train, &a.out, a.format)?;
            save_dataset(&test, test_path, a.format)?;
        }
        None => save_dataset(&data, &a.out, a.format)?,
    }
    Ok(())
}

fn resolve_manifest(a: &TrainArgs, data: &Dataset) -> std::result::Result<RunManifest, CliError> {
    let defaults = TrainConfig::default();
    let epochs = a.epochs.map_or(defaults.epochs_per_round, |e| e as usize);
    let config = TrainConfig {
        rounds: a.rounds.map_or(defaults.rounds, |v| v as usize),
        epochs_per_round: epochs,
        init_epochs: match a.init {
            Some(InitMode::None) => 0,
            _ => a.init_epochs.map_or(epochs, |v| v as usize),
        },
        batch_size: a.batch_size.map_or(defaults.batch_size, |v| v as usize),
        base_lr: a.lr.unwrap_or(defaults.base_lr),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        tau: a.tau.unwrap_or(defaults.tau),
        eta: a.eta.unwrap_or(defaults.eta),
        k: a.k.map_or(defaults.k, |v| v as usize),
        seed: a.seed.unwrap_or(defaults.seed),
        lr_reset_per_round: match a.lr_schedule {
            Some(LrScheduleMode::Global) => false,
            Some(LrScheduleMode::PerRound) => true,
            None => defaults.lr_reset_per_round,
        },
        curriculum: if a.one_off {
            Curriculum::OneOff
        } else if a.instance_only {
            Curriculum::InstanceOnly
        } else {
            Curriculum::Progressive
        },
        neighbourhoods: defaults.neighbourhoods,
    };
    config.validate()?;
    if a.init == Some(InitMode::None) && a.init_epochs.is_some_and(|e| e > 0) {
        return Err(CliError::Usage("--init none conflicts with a positive --init-epochs".into()));
    }
    if config.k >= data.len() {
        return Err(CliError::Usage(format!(
            "--k {} needs more than {} samples",
            config.k,
            data.len()
        )));
    }
    let mut layer_sizes = vec![data.dim()];
    layer_sizes.extend(a.hidden.clone().unwrap_or_else(|| vec![64]));
    layer_sizes.push(a.feature_dim.unwrap_or(16));
    let activation: Activation = a.activation.map(Into::into).unwrap_or_default();
    EncoderConfig {
        layer_sizes: layer_sizes.clone(),
        activation,
        seed: config.seed,
    }
    .validate()?;

    let out = a.out.clone().expect("clap requires --out");
    let outputs = ManifestOutputs {
        checkpoint: out.join("checkpoint.andc"),
        metrics: out.join("metrics.jsonl"),
        manifest: out.join("manifest.json"),
        consistency: data.labels().map(|_| out.join("consistency.csv")),
    };
    Ok(RunManifest {
        artifact_version: ARTIFACT_VERSION.to_owned(),
        seed: config.seed,
        data: a.data.clone().expect("clap requires --data"),
        resume: a.resume.clone(),
        init: a.init.unwrap_or(InitMode::Random),
        layer_sizes,
        activation: activation.name().to_owned(),
        config,
        outputs,
    })
}

/// Streams each metrics record to a JSONL file, then forwards to `inner`.
struct JsonlMonitor<'a, M: TrainMonitor> {
    out: BufWriter<fs::File>,
    inner: &'a mut M,
}

impl<M: TrainMonitor> TrainMonitor for JsonlMonitor<'_, M> {
    fn on_round(&mut self, plan: &RoundPlan) -> Result<()> {
        self.inner.on_round(plan)
    }

    fn on_epoch(&mut self, record: &mut MetricsRecord, params: &EncoderParams, bank: &FeatureBank) -> Result<()> {
        self.inner.on_epoch(record, params, bank)?;
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::format(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> std::result::Result<RunManifest, CliError> {
    let manifest = match &a.from_manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(Error::from)?;
            let mut m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
            if let Some(out) = &a.out {
                m.outputs = ManifestOutputs {
                    checkpoint: out.join("checkpoint.andc"),
                    metrics: out.join("metrics.jsonl"),
                    manifest: out.join("manifest.json"),
                    consistency: m.outputs.consistency.as_ref().map(|_| out.join("consistency.csv")),
                };
            }
            if let Some(data) = &a.data {
                m.data = data.clone();
            }
            m
        }
        None => {
            let data = load_any(a.data.as_ref().expect("clap requires --data"))?;
            resolve_manifest(a, &data)?
        }
    };
    run_manifest(&manifest)?;
    Ok(manifest)
}

/// Executes a resolved manifest, writing all of its outputs.
pub fn run_manifest(m: &RunManifest) -> std::result::Result<(), CliError> {
    let data = load_any(&m.data)?;
    let encoder = EncoderConfig {
        layer_sizes: m.layer_sizes.clone(),
        activation: m.activation.parse()?,
        seed: m.seed,
    };
    if encoder.input_dim() != data.dim() {
        return Err(CliError::Usage(format!(
            "manifest expects {}-dim inputs, dataset has {}",
            encoder.input_dim(),
            data.dim()
        )));
    }
    let start = match &m.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_layer_sizes(&encoder.layer_sizes)?;
            WarmStart::From {
                params: ck.params,
                bank: ck.bank,
            }
        }
        None => WarmStart::Fresh,
    };
    if let Some(dir) = m.outputs.checkpoint.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
    }
    let file = fs::File::create(&m.outputs.metrics).map_err(Error::from)?;
    let out = BufWriter::new(file);

    let output = match data.labels() {
        Some(labels) => {
            let mut inner = LabelMonitor::new(labels);
            let mut mon = JsonlMonitor { out, inner: &mut inner };
            let res = train_with(data.inputs(), &encoder, &m.config, start, &mut mon);
            mon.out.flush().map_err(Error::from)?;
            let res = res?;
            if let Some(path) = &m.outputs.consistency {
                inner.write_curve_csv(path)?;
            }
            res
        }
        None => {
            let mut inner = NoMonitor;
            let mut mon = JsonlMonitor { out, inner: &mut inner };
            let res = train_with(data.inputs(), &encoder, &m.config, start, &mut mon);
            mon.out.flush().map_err(Error::from)?;
            res?
        }
    };
    let ck = Checkpoint {
        config: m.config.clone(),
        completed_rounds: m.config.rounds,
        params: output.params,
        bank: output.bank,
    };
    ck.save(&m.outputs.checkpoint)?;
    write_json(m, &m.outputs.manifest)?;
    Ok(())
}

fn require_labels<'a>(d: &'a Dataset, path: &Path) -> std::result::Result<&'a [usize], CliError> {
    d.labels().ok_or_else(|| {
        CliError::Runtime(Error::contract(format!(
            "dataset {} has no labels; evaluation needs ground truth",
            path.display()
        )))
    })
}

pub fn cmd_eval(a: &EvalArgs) -> std::result::Result<EvalReport, CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let train = load_any(&a.data)?;
    let train_labels = require_labels(&train, &a.data)?;
    if train.len() != ck.bank.n() {
        return Err(CliError::Runtime(Error::contract(format!(
            "checkpoint bank has {} rows, training split has {}",
            ck.bank.n(),
            train.len()
        ))));
    }
    let test = match &a.test_data {
        Some(p) => {
            let d = load_any(p)?;
            require_labels(&d, p)?;
            Some(d)
        }
        None => None,
    };

    let (split, knn) = match &test {
        Some(t) => (
            "test",
            knn_accuracy(t.inputs(), t.labels().unwrap(), &ck.params, &ck.bank, train_labels, a.knn_k as usize, a.tau, false)?,
        ),
        None => (
            "train-loo",
            knn_accuracy(train.inputs(), train_labels, &ck.params, &ck.bank, train_labels, a.knn_k as usize, a.tau, true)?,
        ),
    };
    let linear_accuracy = match (&test, a.probe) {
        (Some(t), true) => Some(linear_probe(
            (train.inputs(), train_labels),
            (t.inputs(), t.labels().unwrap()),
            &ck.params,
            &ProbeConfig {
                epochs: a.probe_epochs,
                lr: a.probe_lr,
                seed: a.seed,
                ..ProbeConfig::default()
            },
        )?),
        _ => None,
    };
    let nbs = crate::affinity::build_neighbourhoods(&ck.bank, ck.config.k.min(ck.bank.n() - 1))?;
    let (consistent, inconsistent) = neighbourhood_consistency(&nbs, train_labels)?;
    let report = EvalReport {
        split: split.to_owned(),
        knn_k: a.knn_k as usize,
        tau: a.tau,
        knn_accuracy: knn.accuracy,
        per_class_accuracy: knn.per_class_accuracy,
        linear_accuracy,
        consistent_count: consistent,
        inconsistent_count: inconsistent,
    };
    match &a.out {
        Some(p) => write_json(&report, p)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?
        ),
    }
    Ok(report)
}

/// One CSV row of `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectRow {
    pub anchor: usize,
    /// Space-separated member indices, anchor first.
    pub members: String,
    pub entropy: f64,
    pub selected: bool,
    pub consistent: Option<bool>,
}

pub fn inspect_rows(ck: &Checkpoint, labels: Option<&[usize]>, round: usize) -> Result<Vec<InspectRow>> {
    if round == 0 || round > ck.config.rounds {
        return Err(Error::config(format!(
            "round must be in 1..={}, got {round}",
            ck.config.rounds
        )));
    }
    let plan = plan_round(&ck.bank, &ck.config, round)?;
    plan.neighbourhoods
        .iter()
        .map(|nb| {
            let consistent = labels
                .map(|l| neighbourhood_consistency(std::iter::once(nb), l).map(|(c, _)| c == 1))
                .transpose()?;
            Ok(InspectRow {
                anchor: nb.anchor,
                members: nb
                    .members
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                entropy: plan.entropies[nb.anchor],
                selected: plan.selected[nb.anchor],
                consistent,
            })
        })
        .collect()
}

pub fn cmd_inspect(a: &InspectArgs) -> std::result::Result<Vec<InspectRow>, CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = a.data.as_ref().map(load_any).transpose()?;
    if let Some(d) = &data {
        if d.len() != ck.bank.n() {
            return Err(CliError::Runtime(Error::contract(format!(
                "checkpoint bank has {} rows, dataset has {}",
                ck.bank.n(),
                d.len()
            ))));
        }
    }
    let labels = data.as_ref().and_then(Dataset::labels);
    let rows = inspect_rows(&ck, labels, a.round.unwrap_or(ck.completed_rounds.max(1)))?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).map_err(Error::from)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row).map_err(|e| Error::format(e.to_string()))?;
    }
    w.flush().map_err(Error::from)?;
    Ok(rows)
}
