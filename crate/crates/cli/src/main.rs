mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zsl_core::analysis::{AffinityOp, CorrelationNorm};
use zsl_core::evaluation::{Embedding, Metric};
use zsl_core::inference::Matcher;
use zsl_core::ErrorKind;

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "zsl", version, about = "Transductive zero-shot classification experiments")]
struct Cli {
    /// Worker threads for split-level parallelism; 0 uses every core.
    #[arg(long, global = true, env = "ZSL_THREADS", default_value_t = 0)]
    threads: usize,

    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the split-averaged experiment described by a config.
    Eval(RunArgs),
    /// Run a grid of hyperparameters, skipping cells that already finished.
    Sweep(SweepArgs),
    /// Write a synthetic dataset and a config that runs on it.
    GenSynthetic(GenArgs),
    /// Transferability analysis of a report with retained predictions.
    Analyze(AnalyzeArgs),
    /// Write the instance and prototype embeddings of one split.
    ExportProjections(SplitArgs),
    /// Fit and save the embedding model of one split.
    Fit(SplitArgs),
    /// Classify the test instances of a split with a saved model.
    Predict(PredictArgs),
}

/// Settings shared by every command that runs the pipeline. Flags override
/// the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = kebab::<Embedding>)]
    pub embedding: Option<Embedding>,
    #[arg(long, value_parser = kebab::<Matcher>)]
    pub matcher: Option<Matcher>,
    #[arg(long, overrides_with = "no_self_train")]
    pub self_train: bool,
    #[arg(long)]
    pub no_self_train: bool,
    #[arg(long, value_parser = kebab::<Metric>)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ridge weight.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Manifold weight.
    #[arg(long)]
    pub manifold: Option<f64>,
    #[arg(long)]
    pub graph_k: Option<usize>,
    #[arg(long)]
    pub st_k: Option<usize>,
    /// Training instances per class held out as AUC negatives.
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Keep per-instance predictions in the report.
    #[arg(long)]
    pub retain_predictions: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Ridge weights to try (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub ridges: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub manifolds: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub graph_ks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub st_ks: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, clap::ValueEnum)]
pub enum GenKind {
    #[default]
    Planted,
    Clustered,
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub kind: GenKind,
    #[arg(long)]
    pub train_classes: Option<usize>,
    #[arg(long)]
    pub test_classes: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub classes_per_cluster: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub test_noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// report.json written by `eval --retain-predictions`.
    #[arg(long)]
    pub report: PathBuf,
    /// Run config for the report; defaults to config.toml beside it.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_parser = kebab::<CorrelationNorm>, default_value = "pearson")]
    pub norm: CorrelationNorm,
    #[arg(long, value_parser = kebab::<AffinityOp>, default_value = "max")]
    pub op: AffinityOp,
    /// Related-subset sizes, in percent of the training classes.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0])]
    pub percents: Vec<f64>,
    /// Splits used for the subset curve; 0 skips it.
    #[arg(long, default_value_t = 10)]
    pub curve_splits: usize,
}

#[derive(Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Split index, as numbered in reports.
    #[arg(long, default_value_t = 0)]
    pub split: usize,
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    /// Saved model; defaults to the one `fit` wrote for this split.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// Parses a flag value by the enum's serialized (kebab-case) name.
fn kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl RunArgs {
    /// Config file (if any) with flag overrides applied.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cwd = std::env::current_dir()?;
        let abs = |p: &PathBuf| cwd.join(p);
        let d = &mut cfg.data;
        if let Some(p) = &self.features {
            d.features = Some(abs(p));
        }
        if let Some(p) = &self.labels {
            d.labels = Some(abs(p));
        }
        if let Some(p) = &self.word_vectors {
            d.word_vectors = Some(abs(p));
        }
        if let Some(p) = &self.attributes {
            d.attributes = Some(abs(p));
        }
        if let Some(p) = &self.out {
            cfg.output.dir = Some(abs(p));
        }
        let e = &mut cfg.experiment;
        if let Some(v) = self.embedding {
            e.embedding = v;
        }
        if let Some(v) = self.matcher {
            e.matcher = v;
        }
        if self.self_train {
            e.self_train = true;
        }
        if self.no_self_train {
            e.self_train = false;
        }
        if let Some(v) = self.metric {
            e.metric = v;
        }
        if let Some(v) = self.splits {
            e.n_splits = v;
        }
        if let Some(v) = self.seed {
            e.seed = v;
        }
        if let Some(v) = self.distractors {
            e.distractors_per_class = v;
        }
        let h = &mut cfg.hyper;
        if let Some(v) = self.ridge {
            h.ridge = v;
        }
        if let Some(v) = self.manifold {
            h.manifold = v;
        }
        if let Some(v) = self.graph_k {
            h.graph_k = v;
        }
        if let Some(v) = self.st_k {
            h.self_train_k = v;
        }
        if self.retain_predictions {
            cfg.output.retain_predictions = true;
        }
        Ok(cfg)
    }
}

fn classify(err: &anyhow::Error) -> ErrorKind {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return ErrorKind::Config;
        }
        if let Some(e) = cause.downcast_ref::<zsl_core::ZslError>() {
            return e.kind();
        }
    }
    ErrorKind::Data
}

/// Cause chain joined with ": ", dropping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let threads = cli.threads;
    let result = match &cli.command {
        Command::Eval(a) => commands::eval(a, threads),
        Command::Sweep(a) => commands::sweep(a, threads),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Analyze(a) => commands::analyze(a, threads),
        Command::ExportProjections(a) => commands::export_projections(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            let code = exit_code(kind);
            let record = serde_json::json!({
                "error": format!("{kind:?}").to_lowercase(),
                "exit_code": code,
                "message": message(&err),
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
