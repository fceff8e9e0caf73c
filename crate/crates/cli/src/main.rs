//! Command line driver for the benchmark pipeline. Each subcommand runs
//! one stage against the run directory; `pipeline` chains them. Exit
//! codes: 0 success, 2 config problem, 3 data problem, 4 training
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loopfuse::harness::{
    parse_stages, run_pipeline, run_stage, Modality, PipelineConfig, PipelineError, Stage,
};

#[derive(Parser)]
#[command(name = "loopfuse", version, about = "camera/lidar loop-closure descriptor benchmark")]
struct Cli {
    /// Flat key = value config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Descriptor modality (camera, lidar, fused), overrides the config file.
    #[arg(long, global = true, value_parser = modality_from_arg)]
    modality: Option<Modality>,

    /// Run directory for all artifacts, overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic world: GPS tracks, camera frames, lidar scans.
    Synth,
    /// Interpolate a pose for every sample from its run's GPS track.
    Ingest,
    /// Discretize places, assign samples, build both triplet databases.
    Mine,
    /// Train the descriptor network, hard fine-tune after a plateau.
    Train,
    /// Compute a descriptor for every ingested sample.
    Extract,
    /// Score retrieval for every ordered run pair.
    Eval,
    /// Aggregate run pairs into weather accuracy and count matrices.
    Report,
    /// Run all stages in order, or a subset.
    Pipeline {
        /// Comma-separated stage subset, e.g. "synth,ingest,mine".
        #[arg(long)]
        stages: Option<String>,
    },
}

fn modality_from_arg(s: &str) -> Result<Modality, String> {
    Modality::from_str(s).map_err(|e| e.to_string())
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.modality, cli.out.clone());
    cfg.validate()?;
    match cli.command {
        Command::Synth => run_stage(&cfg, Stage::Synth),
        Command::Ingest => run_stage(&cfg, Stage::Ingest),
        Command::Mine => run_stage(&cfg, Stage::Mine),
        Command::Train => run_stage(&cfg, Stage::Train),
        Command::Extract => run_stage(&cfg, Stage::Extract),
        Command::Eval => run_stage(&cfg, Stage::Eval),
        Command::Report => run_stage(&cfg, Stage::Report),
        Command::Pipeline { stages } => {
            let list = match stages {
                Some(s) => parse_stages(&s)?,
                None => Vec::new(),
            };
            run_pipeline(&cfg, &list)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
