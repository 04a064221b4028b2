//! Command-line front end: train, evaluate, predict, dump-intermediates and
//! a Friedman test helper.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{load_dataset, normalize_text, stratified_split, DataError, Example, Split};
use crate::embedding::EmbeddingStore;
use crate::eval::{friedman, EvaluationReport};
use crate::fusion::{argmax, LabelSet};
use crate::model::{check_store, Model, ModelConfig, ModelError, Provider};
use crate::train::{evaluate, train, Sample, TrainError};

#[derive(Debug, Parser)]
#[command(name = "stance", version, about = "Stance classification for source/reply text pairs")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Stratified 70/15/15 split of the training file when it has no split fields.
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON Lines log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify one source/reply pair.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        reply: String,
        /// Record id in the embedding file (file provider only).
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write per-example feature vectors as JSON Lines.
    DumpIntermediates {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Friedman test on a JSON matrix of scores.
    Friedman {
        /// JSON array of rows; rows are blocks unless --transpose.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        transpose: bool,
    },
}

/// Error classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage-error",
            Self::Config(_) => "config-error",
            Self::Data(_) => "data-error",
            Self::Divergence(_) => "divergence-error",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Divergence(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Config(m) | Self::Data(m) | Self::Divergence(m) => m,
        }
    }

    /// Single line: `<class>: <message>`.
    pub fn line(&self) -> String {
        format!("{}: {}", self.class(), self.message().replace('\n', " "))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::Divergence(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Invalid(m) => Self::Usage(m),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn open_store(config: &ModelConfig) -> Result<Option<EmbeddingStore>, CliError> {
    match &config.provider {
        Provider::Toy { .. } => Ok(None),
        Provider::File { path } => {
            let store = EmbeddingStore::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            check_store(&store, config)?;
            Ok(Some(store))
        }
    }
}

fn samples(model: &Model, examples: &[Example], store: Option<&EmbeddingStore>) -> Result<Vec<Sample>, CliError> {
    let lexicon = model.config.load_lexicon()?;
    examples
        .iter()
        .map(|e| {
            let target = model
                .labels
                .index(&e.label)
                .ok_or_else(|| CliError::Data(format!("record {}: label {:?} not in model", e.id, e.label)))?;
            let pair = model.prepare(&e.id, &e.source_text, &e.reply_text, &lexicon, store)?;
            Ok(Sample { pair, target })
        })
        .collect()
}

/// Parses `args` and runs the command, writing human output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}").ok();
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let mut say = |line: String| -> Result<(), CliError> {
        if !cli.quiet {
            writeln!(out, "{line}").map_err(|e| CliError::Data(e.to_string()))?;
        }
        Ok(())
    };
    match &cli.command {
        Command::Train {
            train: train_path,
            val,
            split_seed,
            out: model_path,
            log,
        } => {
            let config = run_config(&cli)?;
            config.validate().map_err(CliError::Config)?;
            let model_config = config.model();
            model_config.validate()?;
            let labels = LabelSet::new(model_config.labels.clone()).map_err(|e| CliError::Config(e.to_string()))?;
            let mut examples = load_dataset(train_path, &labels, config.flatten_threads)?;
            let (train_ex, val_ex): (Vec<Example>, Vec<Example>) = if let Some(v) = val {
                (examples, load_dataset(v, &labels, config.flatten_threads)?)
            } else {
                if examples.iter().all(|e| e.split.is_none()) {
                    let seed = split_seed.ok_or_else(|| {
                        CliError::Usage("no --val file, no split fields and no --split-seed".into())
                    })?;
                    stratified_split(&mut examples, seed);
                }
                let pick = |s| examples.iter().filter(|e| e.split == Some(s)).cloned().collect::<Vec<_>>();
                (pick(Split::Train), pick(Split::Val))
            };
            if train_ex.is_empty() {
                return Err(CliError::Data(format!("{}: no training examples", train_path.display())));
            }
            let store = open_store(&model_config)?;
            let mut model = Model::new(model_config, store.as_ref(), config.seed)?;
            let train_set = samples(&model, &train_ex, store.as_ref())?;
            let val_set = samples(&model, &val_ex, store.as_ref())?;
            let mut log_file = match log {
                Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
                None => None,
            };
            let mut lines = Vec::new();
            let summary = train(&mut model, &train_set, &val_set, &config.training(), |e| {
                lines.push(format!(
                    "epoch {} train_loss {:.6} val_loss {:.6} val_accuracy {:.4} val_macro_f1 {:.4}",
                    e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.val_macro_f1
                ));
                if let Some(f) = log_file.as_mut() {
                    let _ = writeln!(f, "{}", serde_json::to_string(e).unwrap_or_default());
                }
            })?;
            for l in lines {
                say(l)?;
            }
            if let Some(mut f) = log_file {
                f.flush().map_err(|e| CliError::Data(e.to_string()))?;
            }
            model.save(model_path)?;
            say(format!(
                "saved {} (best epoch {}{})",
                model_path.display(),
                summary.best_epoch,
                if summary.stopped_early { ", stopped early" } else { "" }
            ))?;
        }
        Command::Evaluate { model, data, report } => {
            let model = load_model(&cli, model)?;
            let store = open_store(&model.config)?;
            let examples = load_dataset(data, &model.labels, flatten(&cli)?)?;
            if examples.is_empty() {
                return Err(CliError::Data(format!("{}: no examples to evaluate", data.display())));
            }
            let set = samples(&model, &examples, store.as_ref())?;
            let (_, rep, _) = evaluate(&model, &set)?;
            if let Some(p) = report {
                write_report(p, &rep)?;
            }
            say(format!(
                "n {} accuracy {:.4} macro_precision {:.4} macro_recall {:.4} macro_f1 {:.4}",
                rep.n, rep.accuracy, rep.macro_avg.precision, rep.macro_avg.recall, rep.macro_avg.f1
            ))?;
            say(format!("confusion {}", serde_json::to_string(&rep.confusion).unwrap_or_default()))?;
        }
        Command::Predict {
            model,
            source,
            reply,
            id,
            json,
        } => {
            let model = load_model(&cli, model)?;
            let store = open_store(&model.config)?;
            let (s, r) = (normalize_text(source), normalize_text(reply));
            if s.is_empty() || r.is_empty() {
                return Err(CliError::Usage("source and reply must be non-empty after normalization".into()));
            }
            let id = match (&store, id) {
                (Some(_), None) => return Err(CliError::Usage("file provider needs --id".into())),
                (_, Some(id)) => id.as_str(),
                (None, None) => "input",
            };
            let lexicon = model.config.load_lexicon()?;
            let pair = model.prepare(id, &s, &r, &lexicon, store.as_ref())?;
            let probs = model.predict(std::slice::from_ref(&pair))?.remove(0);
            let label = model.labels.name(argmax(&probs)).to_string();
            let emotions = |p: &crate::affect::EmotionProfile| {
                p.entries.iter().map(|(e, s)| json!([e.name(), s])).collect::<Vec<_>>()
            };
            if *json {
                let doc = json!({
                    "label": label,
                    "probabilities": model.labels.names().iter().zip(&probs)
                        .map(|(n, p)| (n.clone(), json!(p))).collect::<serde_json::Map<_, _>>(),
                    "source_emotions": emotions(&pair.source.emotions),
                    "reply_emotions": emotions(&pair.reply.emotions),
                });
                writeln!(out, "{doc}").map_err(|e| CliError::Data(e.to_string()))?;
            } else {
                let fmt_profile = |p: &crate::affect::EmotionProfile| {
                    if p.is_empty() {
                        "-".to_string()
                    } else {
                        p.entries.iter().map(|(e, s)| format!("{e} {s:.3}")).collect::<Vec<_>>().join(", ")
                    }
                };
                let probs_line = model
                    .labels
                    .names()
                    .iter()
                    .zip(&probs)
                    .map(|(n, p)| format!("{n} {p:.6}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                writeln!(out, "label: {label}").ok();
                writeln!(out, "probabilities: {probs_line}").ok();
                writeln!(out, "source emotions: {}", fmt_profile(&pair.source.emotions)).ok();
                writeln!(out, "reply emotions: {}", fmt_profile(&pair.reply.emotions)).ok();
            }
        }
        Command::DumpIntermediates { model, data, out: path } => {
            let model = load_model(&cli, model)?;
            let store = open_store(&model.config)?;
            let examples = load_dataset(data, &model.labels, flatten(&cli)?)?;
            if examples.is_empty() {
                return Err(CliError::Data(format!("{}: no examples", data.display())));
            }
            let set = samples(&model, &examples, store.as_ref())?;
            let pairs: Vec<_> = set.into_iter().map(|s| s.pair).collect();
            let vectors = model.intermediates(&pairs)?;
            let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
            for (e, [vs, vr, de, dh, fused]) in examples.iter().zip(vectors) {
                let line = json!({
                    "id": e.id,
                    "label": e.label,
                    "source_pooled": vs,
                    "reply_pooled": vr,
                    "emotion_divergence": de,
                    "closeness": dh,
                    "fused": fused,
                });
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
            w.flush().map_err(io_err(path))?;
            say(format!("wrote {} records to {}", examples.len(), path.display()))?;
        }
        Command::Friedman { scores, transpose } => {
            let text = std::fs::read_to_string(scores).map_err(io_err(scores))?;
            let mut m: Vec<Vec<f64>> =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", scores.display())))?;
            if *transpose {
                let k = m.first().map_or(0, Vec::len);
                if m.iter().any(|r| r.len() != k) {
                    return Err(CliError::Data("ragged score matrix".into()));
                }
                m = (0..k).map(|j| m.iter().map(|r| r[j]).collect()).collect();
            }
            let r = friedman(&m).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(out, "statistic {} p_value {:e} df {}", r.statistic, r.p_value, r.df)
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    Ok(())
}

fn flatten(cli: &Cli) -> Result<bool, CliError> {
    Ok(match &cli.config {
        Some(_) => run_config(cli)?.flatten_threads,
        None => false,
    })
}

/// Loads a checkpoint; a `--config` file may replace the lexicon path.
fn load_model(cli: &Cli, path: &Path) -> Result<Model, CliError> {
    let mut model = Model::load(path).map_err(|e| match e {
        ModelError::Config(m) => CliError::Data(m),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })?;
    if let Some(p) = &cli.config {
        let c = RunConfig::load(p).map_err(CliError::Config)?;
        if c.lexicon.is_some() {
            model.config.lexicon = c.lexicon;
        }
    }
    Ok(model)
}

fn write_report(path: &Path, report: &EvaluationReport) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}
