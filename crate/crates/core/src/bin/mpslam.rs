use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpslam::experiment::{run_batch, worker_count, ExperimentConfig, Setup, CONFIG_SCHEMA, WORKERS_ENV};
use mpslam::gmf::GmfRepository;
use mpslam::output::{dump_repository, summarize, write_results};
use mpslam::synthetic::Scenario;

/// Multipath SLAM experiments on synthetic scenarios.
#[derive(Parser)]
#[command(name = "mpslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured setups over seeds and SNRs.
    Run(RunArgs),
    /// Aggregate result directories into summary tables.
    Summarize {
        /// Result directories (searched recursively for run manifests).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "summary")]
        out: PathBuf,
    },
    /// Repository inspection.
    Gmf {
        #[command(subcommand)]
        command: GmfCommand,
    },
    /// Scenario file checks.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Subcommand)]
enum GmfCommand {
    /// Print every coverage point of a repository file as CSV.
    Dump {
        file: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Parse and validate a scenario file.
    Validate { file: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config; without it the built-in fig2-default study is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run (repeatable); overrides the config.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    particles: Option<usize>,
    /// SNR at 1 m in dB (repeatable).
    #[arg(long = "snr")]
    snrs: Vec<f64>,
    /// proprioception, slam or slam+gmf (repeatable).
    #[arg(long = "setup")]
    setups: Vec<Setup>,
    #[arg(long)]
    laps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// 50 seeds and 10^6 particles, applied before the other overrides.
    #[arg(long)]
    paper_scale: bool,
}

const BUILTIN_SCENARIO: &str = "fig2-default";

fn load_scenario(path: &Path) -> Result<Scenario, String> {
    if !path.exists() && path.file_stem().and_then(|s| s.to_str()) == Some(BUILTIN_SCENARIO) {
        return Ok(Scenario::fig2_default());
    }
    Scenario::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(args: RunArgs) -> Result<(), String> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::from_toml_str(&format!("schema = {CONFIG_SCHEMA}\nscenario = \"{BUILTIN_SCENARIO}\"\n"))
            .map_err(|e| e.to_string())?,
    };
    if args.paper_scale {
        cfg.paper_scale();
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds;
    }
    if let Some(n) = args.particles {
        cfg.particles = n;
    }
    if !args.snrs.is_empty() {
        cfg.snr_db = args.snrs;
    }
    if !args.setups.is_empty() {
        cfg.setups = args.setups;
    }
    if let Some(l) = args.laps {
        cfg.laps = l;
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    let scenario = load_scenario(&cfg.scenario)?;
    let specs = cfg.runs();
    let workers = worker_count();
    eprintln!("{} runs on {workers} workers (set {WORKERS_ENV} to change)", specs.len());
    let results = run_batch(&scenario, &cfg.filter, &cfg.ospa, &specs, workers).map_err(|e| e.to_string())?;
    let dirs = write_results(&cfg.out, &cfg, &scenario, &results).map_err(|e| e.to_string())?;
    eprintln!("wrote {} run directories under {}", dirs.len(), cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Summarize { dirs, out } => summarize(&dirs, &out).map_err(|e| e.to_string()).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Gmf { command: GmfCommand::Dump { file, out } } => GmfRepository::load(&file)
            .map_err(|e| format!("{}: {e}", file.display()))
            .and_then(|repo| match out {
                Some(p) => std::fs::File::create(&p)
                    .map_err(|e| format!("{}: {e}", p.display()))
                    .and_then(|f| dump_repository(&repo, std::io::BufWriter::new(f)).map_err(|e| e.to_string())),
                None => dump_repository(&repo, std::io::stdout().lock()).map_err(|e| e.to_string()),
            }),
        Command::Scenario { command: ScenarioCommand::Validate { file } } => load_scenario(&file).map(|s| {
            println!("{}: ok ({} features, {} cells)", s.name, s.features.len(), s.cell_count());
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
