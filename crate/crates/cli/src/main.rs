use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

mod commands;
mod config;

use commands::{Ctx, ExperimentName};
use config::RunConfig;

/// Low-spread MAP-Elites, trajectory datasets and behavior-conditioned
/// transformers, one pipeline stage per subcommand.
#[derive(Debug, Parser)]
#[command(name = "qdlab", version, max_term_width = 100)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the configured run seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output root for artifacts, manifests and the resolved config
    #[arg(long, global = true, value_name = "DIR", env = "QDLAB_RUN_DIR", default_value = "runs")]
    run_dir: PathBuf,

    /// Worker threads for parallel rollouts and evaluations [default: all cores]
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,

    /// Print per-iteration progress to stderr
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    /// Print nothing but errors
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the centroidal Voronoi tessellation of the descriptor space
    Cvt {
        /// Centroid file [default: RUN_DIR/centroids.json]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run one MAP-Elites variant and save its repertoire
    Evolve {
        /// Centroid file [default: RUN_DIR/centroids.json]
        #[arg(long, value_name = "FILE")]
        centroids: Option<PathBuf>,
        /// Repertoire file [default: RUN_DIR/repertoire_<variant>_s<seed>.json]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Re-evaluate every elite and report initial versus recalculated statistics
    Reassess {
        /// Repertoire to reassess
        #[arg(long, value_name = "FILE")]
        repertoire: PathBuf,
        /// CSV table [default: next to the repertoire]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Select policies from a repertoire and roll out a trajectory dataset
    DatasetMake {
        /// Source repertoire
        #[arg(long, value_name = "FILE")]
        repertoire: PathBuf,
        /// Dataset file [default: RUN_DIR/dataset_<variant>_s<seed>.qdt1]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Remove trajectories with the configured dataset.prune scheme
    DatasetPrune {
        /// Dataset to prune
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Pruned dataset [default: next to the input, suffixed with the scheme]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Print a dataset's header and descriptor histogram as CSV
    DatasetInspect {
        /// Dataset to inspect
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Histogram bins per axis
        #[arg(long, value_name = "N", default_value_t = 20, value_parser = clap::value_parser!(u16).range(1..))]
        bins: u16,
        /// Write to a file instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train a transformer on a dataset, keeping the best evaluated epoch
    Train {
        /// Training dataset
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Checkpoint [default: RUN_DIR/checkpoints/qdt_<dataset>.qdtw]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the goal grid
    Eval {
        /// Checkpoint to evaluate
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Per-goal CSV [default: next to the checkpoint]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run an experiment over the artifacts named in the [experiment] section
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        /// Report directory [default: RUN_DIR/<name>]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Summarize every manifest and summary table of the run directory
    Report {
        /// Markdown report [default: RUN_DIR/report.md]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    };
    let config = config.map_err(|problems| {
        let lines: Vec<String> = problems.iter().map(|p| format!("  {p}")).collect();
        commands::invalid(format!("invalid configuration:\n{}", lines.join("\n")))
    })?;
    let config = config.with_seed(cli.seed);
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.into()).build_global()?;
    }
    let verbosity = if cli.quiet { 0 } else { 1 + cli.verbose };
    let ctx = Ctx::new(cli.run_dir, config, verbosity)?;
    match cli.command {
        Command::Cvt { out } => commands::cvt(&ctx, out),
        Command::Evolve { centroids, out } => commands::evolve(&ctx, centroids, out),
        Command::Reassess { repertoire, out } => commands::reassess(&ctx, repertoire, out),
        Command::DatasetMake { repertoire, out } => commands::dataset_make(&ctx, repertoire, out),
        Command::DatasetPrune { dataset, out } => commands::dataset_prune(&ctx, dataset, out),
        Command::DatasetInspect { dataset, bins, out } => commands::dataset_inspect(&ctx, dataset, bins.into(), out),
        Command::Train { dataset, out } => commands::train(&ctx, dataset, out),
        Command::Eval { checkpoint, out } => commands::eval(&ctx, checkpoint, out),
        Command::Experiment { name, out } => commands::experiment(&ctx, name, out),
        Command::Report { out } => commands::report(&ctx, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_validation(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
