//! `lpr`: synthetic LiDAR place-recognition experiments.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! error, 3 training divergence.

mod commands;
mod config;
mod dataset;
mod svg;

use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use lpr_core::retrieval::default_yaw_angles;

use commands::{parse_range, Globals, InputError, DB_FILE};

#[derive(Parser)]
#[command(name = "lpr", version, about = "Yaw-invariant LiDAR place recognition on a synthetic world")]
struct Cli {
    /// key=value run configuration; defaults to the data directory's run.cfg.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates a trajectory: scans/, poses.txt, manifest.csv, run.cfg.
    Generate,
    /// Builds the overlap table and trains a model: model.lprw, loss.csv, overlap.csv.
    Train {
        /// Directory written by `generate`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Writes one descriptor per scan to a database file.
    Extract {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Scan indices START..END; all scans by default.
        #[arg(long, value_name = "START..END", value_parser = parse_range)]
        range: Option<Range<usize>>,
        /// Database file name inside the output directory.
        #[arg(long, value_name = "NAME", default_value = DB_FILE)]
        db: String,
    },
    /// Loop-closing evaluation of a database, or place recognition of a
    /// separate query database: pr_curve.csv, recall_at.csv, metrics.csv.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        db: PathBuf,
        /// Query database; without it every database row queries older rows.
        #[arg(long, value_name = "PATH")]
        queries: Option<PathBuf>,
        /// Overlap table CSV; built from --data when absent.
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also write recall_at.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Recall@1 of yaw-rotated query scans against a database: yaw_sweep.csv.
    SweepYaw {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        db: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Query scan indices START..END; scans missing from the database by default.
        #[arg(long, value_name = "START..END", value_parser = parse_range)]
        queries: Option<Range<usize>>,
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
        /// Angles in degrees; 0, 30, ..., 330 by default.
        #[arg(long, value_name = "DEG", value_delimiter = ',')]
        angles: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()?;
    }
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Generate => commands::generate(&g),
        Command::Train { data } => commands::train(&g, &data),
        Command::Extract {
            checkpoint,
            data,
            range,
            db,
        } => commands::extract(&g, &checkpoint, &data, range, &db),
        Command::Evaluate {
            db,
            queries,
            table,
            data,
            svg,
        } => commands::evaluate(&g, &db, queries.as_deref(), table.as_deref(), data.as_deref(), svg),
        Command::SweepYaw {
            checkpoint,
            db,
            data,
            queries,
            table,
            angles,
        } => {
            let angles = if angles.is_empty() { default_yaw_angles() } else { angles };
            commands::sweep_yaw(&g, &checkpoint, &db, &data, queries, table.as_deref(), &angles)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use lpr_core::Error as E;
    let core = e.chain().find_map(|c| c.downcast_ref::<E>());
    if matches!(core, Some(E::Divergence { .. })) {
        return 3;
    }
    if e.downcast_ref::<InputError>().is_some()
        || matches!(core, Some(E::Config(_) | E::UnknownPattern(_) | E::InvalidArgument { .. }))
    {
        return 1;
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LPR_LOG", "warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
