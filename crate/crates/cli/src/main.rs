use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsgan_cli::{cmd_experiment, cmd_ingest, cmd_report, cmd_rig, cmd_synthesize, cmd_train_gan, error_line, Outcome};
use fsgan_core::config::{IngestConfig, ReportConfig, RunConfig};
use fsgan_core::spectral::CaseStudy;
use fsgan_core::Result;

#[derive(Parser)]
#[command(name = "fsgan", version, about = "Fault-signature GAN for cross-domain fault diagnosis")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (defaults to `out` from the config, then `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Spectrum archive to read instead of the config's `dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bundles trained concurrently by `experiment`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw recordings into a spectrum archive.
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        case: Option<CaseStudy>,
    },
    /// Generate the synthetic rig dataset.
    Rig,
    /// Train one generator bundle.
    TrainGan,
    /// Synthesize target-domain faults from a trained bundle.
    Synthesize,
    /// Run the baseline and proposed pipelines over every seed.
    Experiment,
    /// Render the tables of a finished experiment directory.
    Report {
        run_dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Rig => "rig",
            Command::TrainGan => "train-gan",
            Command::Synthesize => "synthesize",
            Command::Experiment => "experiment",
            Command::Report { .. } => "report",
        }
    }
}

fn init_logging(cfg: &RunConfig) {
    let default = cfg.log.clone().unwrap_or_else(|| "info".into());
    let env = env_logger::Env::new().filter_or("FSGAN_LOG", default);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.dataset.is_some() {
        cfg.dataset = cli.dataset.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Ingest { manifest, case } => {
            if manifest.is_some() || case.is_some() {
                let current = cfg.ingest.take();
                let manifest = manifest.clone().or(current.as_ref().map(|c| c.manifest.clone()));
                let case = case.or(current.as_ref().map(|c| c.case));
                if let (Some(manifest), Some(case)) = (manifest, case) {
                    cfg.ingest = Some(IngestConfig { manifest, case });
                }
            }
        }
        Command::Report { run_dir: Some(dir) } => cfg.report = Some(ReportConfig { run_dir: dir.clone() }),
        _ => {}
    }
    init_logging(&cfg);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let cfg = cfg.resolved();
    match cli.command {
        Command::Ingest { .. } => cmd_ingest(&cfg, &out),
        Command::Rig => cmd_rig(&cfg, &out),
        Command::TrainGan => cmd_train_gan(&cfg, &out),
        Command::Synthesize => cmd_synthesize(&cfg, &out),
        Command::Experiment => cmd_experiment(&cfg, &out),
        Command::Report { .. } => cmd_report(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error: USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("outputs in {}", outcome.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
