//! The `medseg` command line: data generation, training, evaluation, the
//! annotation pipeline, dataset validation and the chat service.

pub mod server;

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use medseg_core::checkpoint;
use medseg_core::dataset::{load_record, read_manifest, write_dataset};
use medseg_core::metrics::evaluate_dataset;
use medseg_core::model::{MedSegModel, ModelConfig};
use medseg_core::pipeline::{pipeline_status, resume_pipeline, run_pipeline, PipelineConfig, PipelineSummary};
use medseg_core::protocol::validate_sample;
use medseg_core::session::{session_issues, SessionExport};
use medseg_core::synth::{generate_dataset, SynthConfig, TemplateMix};
use medseg_core::training::{check_slot_counts, dataset_vocab, train, LossWeights, TrainConfig};
use medseg_core::Error as CoreError;
use serde::Serialize;

use crate::server::{AppState, ModelInfo, DEFAULT_MAX_NEW_TOKENS, DEFAULT_PORT, DEFAULT_QUEUE_DEPTH};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Environment variable that takes precedence over `serve --ckpt`.
pub const CKPT_ENV: &str = "MEDSEG_CKPT";

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format medseg-ckpt-v1)");

#[derive(Debug, Parser)]
#[command(name = "medseg", version = VERSION, about = "Reasoning segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    GenData(GenDataArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; prints a JSON report
    Eval(EvalArgs),
    /// Run the chat service
    Serve(ServeArgs),
    /// Drive the annotation pipeline
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Check a dataset directory or a session export file
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "explicit=0.4,reasoning=0.4,negative=0.2")]
    pub mix: String,
    /// Comma-separated lesion classes
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, default_value_t = 2)]
    pub max_lesions: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "lambda-t", default_value_t = 1.0)]
    pub lambda_t: f64,
    #[arg(long = "lambda-m", default_value_t = 1.0)]
    pub lambda_m: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Checkpoint and log training-set DSC every this many steps (0: only at the end)
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = DEFAULT_QUEUE_DEPTH)]
    pub queue_depth: usize,
    /// Origin allowed by CORS; `*` allows any
    #[arg(long, default_value = "*")]
    pub cors_origin: String,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Start (or restart) a run over a manifest directory
    Run {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue a run from its state directory
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run
    Status {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Dataset directory, or a JSON session export
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFiniteLoss { .. }
            | CoreError::LayoutInfeasible { .. }
            | CoreError::AnnotatorUnavailable(_)
            | CoreError::ReviewerUnavailable(_)
            | CoreError::GenerationBudgetExceeded(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Usage errors, including unknown subcommands, exit with 1.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Pipeline(p) => pipeline_cmd(&p),
        Command::Validate(a) => validate_cmd(&a),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| CliError::Internal(e.to_string()))
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let mut cfg = SynthConfig {
        num_samples: a.n,
        image_size: a.size,
        seed: a.seed,
        template_mix: TemplateMix::parse(&a.mix)?,
        max_lesions_per_image: a.max_lesions,
        ..SynthConfig::default()
    };
    if let Some(classes) = &a.classes {
        cfg.lesion_classes = classes.clone();
    }
    cfg.validate(ModelConfig::new(0).gcu.patch_size)?;
    let samples = generate_dataset(&cfg)?;
    write_dataset(&a.out, &samples)?;
    log::info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Default architecture sized to the dataset's images.
fn model_config(vocab_size: usize, image_size: usize) -> ModelConfig {
    ModelConfig {
        image_size,
        ..ModelConfig::new(vocab_size)
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    final_dsc: Option<f64>,
    checkpoint: PathBuf,
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let samples = medseg_core::dataset::load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(CliError::User(format!("{} has no samples", a.data.display())));
    }
    check_slot_counts(&samples)?;
    let size = samples
        .iter()
        .map(|s| s.image.height().max(s.image.width()))
        .max()
        .unwrap_or(0);
    let vocab = dataset_vocab(&samples);
    let cfg = model_config(vocab.size(), size);
    cfg.validate()?;
    let mut model = MedSegModel::new(cfg, vocab, a.seed)?;
    let train_cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        eval_every: a.eval_every,
        checkpoint_dir: Some(a.out.clone()),
        weights: LossWeights {
            lambda_t: a.lambda_t,
            lambda_m: a.lambda_m,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let report = train(&mut model, &samples, &train_cfg)?;
    print_json(&TrainSummary {
        steps: a.steps,
        final_loss: report.history.last().map(|r| r.loss_total),
        final_dsc: report.final_dsc,
        checkpoint: a.out.join("model.ckpt"),
    })
}

/// The flat report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub nsd_mean: Option<f64>,
    pub nsd_std: Option<f64>,
    pub tau: f64,
    pub closed_accuracy: Option<f64>,
    pub open_recall: Option<f64>,
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let samples = medseg_core::dataset::load_dataset(&a.data)?;
    let r = evaluate_dataset(&model, &samples, a.tau, a.max_new_tokens)?;
    print_json(&EvalSummary {
        dsc_mean: r.seg.dsc_mean,
        dsc_std: r.seg.dsc_std,
        nsd_mean: r.seg.nsd_mean,
        nsd_std: r.seg.nsd_std,
        tau: r.seg.tau,
        closed_accuracy: r.vqa.closed_accuracy,
        open_recall: r.vqa.open_recall,
    })
}

/// Loads a checkpoint and describes it for the service.
pub fn load_for_serving(path: &Path) -> Result<(MedSegModel, ModelInfo), CoreError> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (model, _) = checkpoint::from_bytes(&bytes)?;
    let info = ModelInfo {
        version: checkpoint::model_version(&bytes),
        image_size: model.config().image_size,
        patch_size: model.config().gcu.patch_size,
    };
    Ok((model, info))
}

fn serve_cmd(a: &ServeArgs) -> CliResult<()> {
    let ckpt = std::env::var_os(CKPT_ENV).map(PathBuf::from).or_else(|| a.ckpt.clone());
    let state = match ckpt {
        Some(path) => {
            let (model, info) = load_for_serving(&path)?;
            log::info!("loaded {} ({})", path.display(), info.version);
            AppState::with_model(model, info, a.queue_depth)
        }
        None => {
            log::warn!("no checkpoint given (--ckpt or {CKPT_ENV}); serving 503 until restarted");
            AppState::unloaded()
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let addr = SocketAddr::new(a.host, a.port);
    rt.block_on(server::serve(addr, state, Some(a.cors_origin.clone())))
        .map_err(|e| CliError::User(format!("cannot serve on {addr}: {e}")))
}

fn pipeline_cmd(p: &PipelineCommand) -> CliResult<()> {
    let summary: PipelineSummary = match p {
        PipelineCommand::Run { input, out, config } => {
            let cfg = PipelineConfig::load(config)?;
            run_pipeline(input, out, &cfg)?
        }
        PipelineCommand::Resume { out } => resume_pipeline(out)?,
        PipelineCommand::Status { out } => pipeline_status(out)?,
    };
    print_json(&summary)
}

/// Problems found in a dataset directory, one line each.
pub fn dataset_issues(dir: &Path) -> Result<(usize, Vec<String>), CoreError> {
    let records = read_manifest(dir)?;
    let mut issues = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in &records {
        if !seen.insert(rec.image_id.as_str()) {
            issues.push(format!("{}: duplicate image_id", rec.image_id));
        }
        match load_record(dir, rec) {
            Ok(sample) => {
                for v in validate_sample(&sample) {
                    issues.push(format!("{}: {v}", rec.image_id));
                }
            }
            Err(e) => issues.push(format!("{}: {e}", rec.image_id)),
        }
    }
    Ok((records.len(), issues))
}

fn validate_cmd(a: &ValidateArgs) -> CliResult<()> {
    let (what, issues) = if a.data.is_dir() {
        let (n, issues) = dataset_issues(&a.data)?;
        (format!("{n} records"), issues)
    } else {
        let text = std::fs::read_to_string(&a.data)
            .map_err(|e| CliError::User(format!("{}: {e}", a.data.display())))?;
        let session: SessionExport =
            serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", a.data.display())))?;
        (format!("session with {} turns", session.turns.len()), session_issues(&session))
    };
    if issues.is_empty() {
        println!("ok: {what}");
        return Ok(());
    }
    for i in &issues {
        println!("{i}");
    }
    Err(CliError::User(format!("{} violation(s) in {what}", issues.len())))
}

#[cfg(test)]
mod tests {
    #[test]
    fn version_mentions_checkpoint_format() {
        assert!(super::VERSION.contains(medseg_core::checkpoint::FORMAT_TAG));
    }
}
