//! `rbmc`: generate data, train machines and analyze training runs.

mod analyze;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbm_cascade::config::ExperimentConfig;
use rbm_cascade::dataio::{load_dataset, save_dataset, DatasetFormat};
use rbm_cascade::run::RunDir;
use rbm_cascade::train::initial_model;
use rbm_cascade::Error;

#[derive(Parser)]
#[command(name = "rbmc", version, about = "RBM training dynamics and phase-transition analysis")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GlobalArgs {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "RBMC_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration with all defaults.
    PrintConfig,
    /// Generate a synthetic dataset.
    GenData,
    /// Train a machine into a run directory.
    Train {
        /// Train on this dataset (.csv or packed) instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue the run in --out from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many updates (the run can be resumed later).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Analyses of run directories and theory predictions.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
}

/// Exit status: 2 for configuration errors, 3 for numerical aborts, 4 for I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        Error::Dimension(_) | Error::Invalid(_) | Error::TooLarge { .. } | Error::Phase(_) => 2,
    }
}

pub fn load_config(global: &GlobalArgs) -> rbm_cascade::Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = global.workers {
        cfg.run.workers = w;
    }
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs, fallback: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> rbm_cascade::Result<()> {
    std::fs::create_dir_all(out)?;
    let (ds, teacher) = cfg.generate_data()?;
    save_dataset(&out.join("data.dset"), &ds, DatasetFormat::Packed)?;
    let manifest = serde_json::json!({
        "dataset": ds.manifest(&format!("{:?} data, seed {}", cfg.data.source, cfg.run.seed)),
        "teacher": teacher,
    });
    output::write_json(&out.join("data.json"), &manifest)?;
    println!("wrote {} samples x {} units to {}", ds.n_samples(), ds.n_visible(), out.display());
    Ok(())
}

fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    data: Option<&Path>,
    resume: bool,
    stop_after: Option<u64>,
) -> rbm_cascade::Result<()> {
    let mut run = if resume {
        RunDir::open(out)?
    } else {
        let (ds, teacher, provenance) = match data {
            Some(p) => {
                let ds = load_dataset(p, DatasetFormat::from_path(p))?;
                (ds, None, p.display().to_string())
            }
            None => {
                let (ds, teacher) = cfg.generate_data()?;
                (ds, Some(teacher), format!("{:?} data, seed {}", cfg.data.source, cfg.run.seed))
            }
        };
        if ds.is_empty() {
            return Err(Error::Invalid("dataset has no samples".into()));
        }
        let nv = ds.n_visible();
        let m0 = initial_model(nv, cfg.model.n_hidden, cfg.model.convention, cfg.model.hidden_kind(nv), &cfg.train)?;
        RunDir::create(out, &ds, &provenance, &m0, cfg.train.clone(), teacher)?
    };
    let total = run.manifest.total_updates;
    let mut last_report = 0u64;
    let result = run.train_until(stop_after.unwrap_or(u64::MAX), |r| {
        if r.update >= last_report + total.div_ceil(20).max(1) || r.update == total {
            eprintln!("update {}/{} epoch {:.2} |grad| {:.4e}", r.update, total, r.epoch, r.grad_norm);
            last_report = r.update;
        }
    });
    result?;
    println!("run in {} has {} checkpoints", out.display(), run.n_checkpoints());
    Ok(())
}

fn dispatch(cli: Cli) -> rbm_cascade::Result<()> {
    let cfg = load_config(&cli.global)?;
    if cfg.run.workers > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build_global();
    }
    match cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::GenData => gen_data(&cfg, &out_dir(&cli.global, "data")),
        Command::Train { data, resume, stop_after } => {
            train(&cfg, &out_dir(&cli.global, "run"), data.as_deref(), resume, stop_after)
        }
        Command::Analyze(cmd) => analyze::run(cmd, &cfg, cli.global.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
