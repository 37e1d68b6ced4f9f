//! Command-line front end for the lesion detection pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lesiondet::cli::{self, RunConfig};
use lesiondet::error::{Error, Result};
use lesiondet::par;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "lesiondet", version, about = "Small lesion detection in volumetric scans")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Phantom {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Tune candidate-selection parameters.
    Tune {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Train the crop classifier.
    Train {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        scale_space: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Patient-level k-fold cross-validation.
    Cv {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Detect lesions in one volume.
    Detect {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        scale_space: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FROC curve from detection dumps.
    Froc {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn run(args: Cli) -> Result<()> {
    let g = args.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.out, g.out);
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(Error::InvalidParams("--threads must be >= 1".into()));
        }
        par::set_threads(t).map_err(Error::InvalidParams)?;
    }
    match args.command {
        Command::Phantom { patients } => {
            set(&mut cfg.n_patients, patients);
            cli::cmd_phantom(&cfg)?;
            println!("wrote {} patients to {}", cfg.n_patients, cfg.out.display());
        }
        Command::Tune { cohort, theta } => {
            set_path(&mut cfg.cohort, cohort);
            set(&mut cfg.theta, theta);
            let t = cli::cmd_tune(&cfg)?;
            println!("{}", serde_json::to_string(&t.params).expect("serializable"));
        }
        Command::Train { cohort, scale_space, iterations } => {
            set_path(&mut cfg.cohort, cohort);
            set_path(&mut cfg.scale_space, scale_space);
            set(&mut cfg.train.max_iterations, iterations);
            let s = cli::cmd_train(&cfg)?;
            println!("best iteration {}", s.best_iteration);
        }
        Command::Cv { cohort, k, iterations } => {
            set_path(&mut cfg.cohort, cohort);
            set(&mut cfg.k, k);
            set(&mut cfg.train.max_iterations, iterations);
            let cv = cli::cmd_cv(&cfg)?;
            print!("{}", cli::format_summary(&cli::summary_rows(&cv)));
        }
        Command::Detect { volume, scale_space, checkpoint } => {
            set_path(&mut cfg.volume, volume);
            set_path(&mut cfg.scale_space, scale_space);
            set_path(&mut cfg.checkpoint, checkpoint);
            let n = cli::cmd_detect(&cfg)?;
            println!("{n} detections");
        }
        Command::Froc { cohort, detections } => {
            set_path(&mut cfg.cohort, cohort);
            set_path(&mut cfg.detections, detections);
            let curve = cli::cmd_froc(&cfg)?;
            println!("{} operating points", curve.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
