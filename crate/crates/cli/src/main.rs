use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dprobe_cli::error::exit_code;
use dprobe_cli::{emit_report, run_experiment, CliError, ProbeKind, RunOptions, StageFilter, StageKind};

#[derive(Parser)]
#[command(name = "dprobe", version, about = "Distillation property-transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: runs/<config stem>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run stages that are already up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, then write the consolidated report.
    Run(Common),
    /// Run the synth-data stages.
    SynthData(Common),
    /// Run the train stages.
    Train(Common),
    /// Run the distill stages.
    Distill(Common),
    /// Run the probe stages of one kind, or all of them with `all`.
    Probe {
        #[arg(value_parser = parse_probe)]
        kind: Option<ProbeKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Consolidate the probe reports of a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_probe(s: &str) -> Result<Option<ProbeKind>, String> {
    if s == "all" {
        return Ok(None);
    }
    ProbeKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .map(Some)
        .ok_or_else(|| {
            let names: Vec<&str> = ProbeKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown probe `{s}`; expected all, {}", names.join(", "))
        })
}

fn run(cmd: Command) -> Result<(), CliError> {
    let (common, filter) = match cmd {
        Command::Report { out } => {
            print!("{}", emit_report(&out)?.markdown);
            return Ok(());
        }
        Command::Run(c) => (c, StageFilter::All),
        Command::SynthData(c) => (c, StageFilter::Kind(StageKind::SynthData)),
        Command::Train(c) => (c, StageFilter::Kind(StageKind::Train)),
        Command::Distill(c) => (c, StageFilter::Kind(StageKind::Distill)),
        Command::Probe { kind, common } => (common, StageFilter::Probe(kind)),
    };
    let opts = RunOptions {
        config: common.config,
        out: common.out,
        seed: common.seed,
        filter,
        force: common.force,
    };
    let summary = run_experiment(&opts)?;
    log::info!(
        "{}: ran {:?}, up to date {:?} (config {})",
        summary.out_dir.display(),
        summary.executed,
        summary.skipped,
        &summary.config_hash[..12]
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit_code::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
