use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustlip::harness::{run_experiment, ExperimentConfig};
use robustlip::Error;

#[derive(Parser)]
#[command(
    name = "robustlip",
    version,
    about = "Local Lipschitz robustness experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train networks and write checkpoints, loss and sigma logs
    Train(RunArgs),
    /// Accuracy under additive noise across SNR levels
    NoiseSweep(RunArgs),
    /// Output projections along a segment between two examples
    Interpolate(RunArgs),
    /// Per-layer local Lipschitz estimates around one example
    LayerHist(RunArgs),
    /// Estimated alpha as a function of radius
    AlphaCurve(RunArgs),
    /// Margins, incompatible-pair fractions and lower bounds of a dataset
    DatasetAudit(RunArgs),
    /// Layerwise product against the end-to-end estimate
    CompositionCheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with this single seed instead of the configured list
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Train(a) => ("train", a),
            Command::NoiseSweep(a) => ("noise-sweep", a),
            Command::Interpolate(a) => ("interpolate", a),
            Command::LayerHist(a) => ("layer-hist", a),
            Command::AlphaCurve(a) => ("alpha-curve", a),
            Command::DatasetAudit(a) => ("dataset-audit", a),
            Command::CompositionCheck(a) => ("composition-check", a),
        }
    }
}

fn run(cmd: &Command) -> Result<(), Error> {
    let (kind, args) = cmd.split();
    let cfg = ExperimentConfig::load(&args.config)?;
    if cfg.kind.name() != kind {
        return Err(Error::Config {
            field: "kind".into(),
            reason: format!(
                "config is `{}` but the `{kind}` subcommand was used",
                cfg.kind.name()
            ),
        });
    }
    let summary = run_experiment(&args.config, args.out.as_deref(), args.seed)?;
    println!("{} files in {}", summary.files.len(), summary.dir.display());
    for (name, digest) in &summary.files {
        println!("  {digest}  {name}");
    }
    println!("manifest: {}", summary.manifest_path().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
