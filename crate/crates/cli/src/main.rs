use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mink_cli::error::{CliError, Result};
use mink_cli::model::Model;
use mink_cli::scene::{generate, read_sequence, write_sequence};
use mink_cli::{bench, eval, inspect, train, RunConfig};

#[derive(Parser)]
#[command(name = "mink", version, about = "Sparse convolutional networks on synthetic 4D point-cloud videos")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic point-cloud video.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmentation network; writes checkpoint.spgw and train_log.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report per-class IoU, mIoU and mAcc for a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for per-frame SPG1 prediction dumps.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Metrics CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time 3D, 4D and 4D-CRF inference over voxel sizes and window lengths.
    Bench {
        /// Sequence directory; a generated scene when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistics for a point file or sequence; the resolved config and network without a path.
    Inspect {
        path: Option<PathBuf>,
        #[arg(long)]
        voxel_size: Option<f64>,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Synth { out } => {
            let seq = generate(&cfg.synth, cfg.run.seed);
            write_sequence(&out, &seq, cfg.run.seed)?;
            println!("wrote {} frames to {}", seq.frames.len(), out.display());
        }
        Command::Train { data, out } => {
            let seq = read_sequence(&data)?;
            let outcome = train::train(&cfg, &seq)?;
            create_dir(&out)?;
            outcome.model.save(&out.join("checkpoint.spgw"))?;
            train::write_log(&out.join("train_log.csv"), &outcome.log)?;
            let every = (outcome.log.len() / 10).max(1);
            train::print_progress(&mut stdout, &outcome.log, every).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        }
        Command::Eval { data, checkpoint, dump, out } => {
            let seq = read_sequence(&data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
            let mut model = Model::build(&cfg, cfg.dimension(), seq.classes, &mut rng)?;
            model.load(&checkpoint)?;
            let (rows, preds) = eval::evaluate(&cfg, &mut model, &seq)?;
            eval::write_report(&mut stdout, &rows).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            if let Some(dir) = dump {
                create_dir(&dir)?;
                eval::dump_predictions(&dir, &seq, &preds)?;
            }
            if let Some(path) = out {
                eval::write_report_csv(&path, &rows)?;
            }
        }
        Command::Bench { data, out } => {
            let seq = match data {
                Some(dir) => read_sequence(&dir)?,
                None => bench::bench_scene(&cfg),
            };
            let rows = bench::run(&cfg, &seq)?;
            print!("{}", bench::format_table(&rows));
            for v in bench::monotonicity_violations(&rows) {
                eprintln!("monotonicity: {v}");
            }
            if let Some(path) = out {
                bench::write_csv(&path, &rows)?;
            }
        }
        Command::Inspect { path: Some(path), voxel_size } => {
            print!("{}", inspect::inspect_path(&path, voxel_size)?);
        }
        Command::Inspect { path: None, .. } => {
            print!("{}", cfg.to_toml());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
            let model = Model::build(&cfg, cfg.dimension(), cfg.synth.classes, &mut rng)?;
            writeln!(stdout, "\n{}", model.net.summary()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
