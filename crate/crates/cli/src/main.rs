mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "hahog", version, about = "Overhead depth pedestrian detection: synthesis, training, detection, evaluation and review")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report errors on stderr as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train a window classifier from a corpus or a sample store.
    Train(TrainArgs),
    /// Detect pedestrians in frames.
    Detect(DetectArgs),
    /// Score detections against annotations per density bin.
    Eval(EvalArgs),
    /// Measure detection throughput.
    Bench(BenchArgs),
    /// Start the review service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Hahog,
    Hog,
    Cluster,
}

impl Method {
    pub fn features(self) -> Option<hahog::FeatureMethod> {
        match self {
            Method::Hahog => Some(hahog::FeatureMethod::Hahog),
            Method::Hog => Some(hahog::FeatureMethod::Hog),
            Method::Cluster => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub frames: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory with `frames/` and `annotations.jsonl`.
    #[arg(long, required_unless_present = "from_store")]
    pub corpus: Option<PathBuf>,
    /// Sample store; every extracted and mined sample is recorded in it.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Train on the samples already in `--store` instead of a corpus.
    #[arg(long, requires = "store")]
    pub from_store: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mining_rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// A `.pgm` frame or a directory of them.
    #[arg(long)]
    pub frames: PathBuf,
    /// Required for the window classifier methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Detections as JSON lines, one frame per line.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "hahog")]
    pub method: Method,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub nms_radius_px: Option<f64>,
    /// Write the descriptor of one window per frame as JSON lines.
    #[arg(long)]
    pub dump_features: Option<PathBuf>,
    /// Window origin in cells for `--dump-features`.
    #[arg(long, value_parser = parse_pair, default_value = "0,0")]
    pub dump_window: (usize, usize),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Detections to score, as `name=path` or `path`; repeatable.
    #[arg(long, required = true)]
    pub detections: Vec<String>,
    /// Frames whose sidecars supply calibration; defaults to the configured one.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub csv: PathBuf,
    /// Plot data JSON; defaults to the CSV path with a `.plot.json` suffix.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub match_radius_mm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Frame to time; a synthetic scene is generated when absent.
    #[arg(long)]
    pub frame: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: std::net::SocketAddr,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected X,Y")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<hahog::Error> for CliError {
    fn from(e: hahog::Error) -> Self {
        match e {
            hahog::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<hahog_service::ServiceError> for CliError {
    fn from(e: hahog_service::ServiceError) -> Self {
        use hahog_service::ServiceError as S;
        match e {
            S::Core(e) => e.into(),
            S::Bind { .. } | S::Corpus(_) => CliError::Data(e.to_string()),
            S::Server(_) => CliError::Internal(e.to_string()),
        }
    }
}

fn report(err: &CliError, json_errors: bool) -> ExitCode {
    if json_errors {
        eprintln!("{}", json!({"error": err.kind(), "message": err.message(), "exit_code": err.code()}));
    } else {
        eprintln!("error: {}", err.message());
    }
    ExitCode::from(err.code())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Detect(a) => commands::detect(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Bench(a) => commands::bench(cfg, a),
        Command::Serve(a) => commands::serve(cfg, a),
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if json_errors {
                return report(&CliError::Usage(e.kind().to_string() + ": " + e.to_string().trim()), true);
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => report(&e, json_errors),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            report(&CliError::Internal(msg), json_errors)
        }
    }
}
