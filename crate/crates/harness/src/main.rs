//! CLI for the illusion testbed.
//!
//! Subcommands map to the experiment protocols; `gen-data` and `fit`
//! export the underlying artifacts. The process exits non-zero unless
//! every requested artifact was written.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use illusion_harness::config::{load_config, ExperimentConfig, ExperimentKind};
use illusion_harness::{artifacts, execute, recompute_report, workbench};

#[derive(Parser)]
#[command(name = "illusionlab", version, about = "Embedding-space illusion attacks and consensus defenses on a synthetic testbed")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory (also: ILLUSION_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for batch work; 0 keeps the library default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and serialize it under <out-dir>/dataset/.
    GenData,
    /// Fit encoders, decoder, PCA, and calibration; serialize models.
    Fit,
    /// Method x input-kind metric grid (generative sanitizers).
    Grid,
    /// Same grid over the pixel-transform baseline roster.
    Baselines,
    /// Consensus metrics versus the number of sanitized draws.
    Sweep,
    /// Attack-cost protocol: pixel-space and through-sanitizer arms.
    AttackCost,
    /// Cross-encoder transfer of attacks, defended and undefended.
    Transfer,
    /// Recompute grid summaries from per-sample records on disk.
    Report,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    // precedence: flag > environment > config
    if let Ok(dir) = std::env::var("ILLUSION_OUT_DIR") {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::GenData => {
            let ds = illusion_core::synthdata::generate_dataset(&cfg.data_config())
                .map_err(|e| anyhow::anyhow!("dataset: {e}"))?;
            let mut written = artifacts::write_dataset(&cfg.out_dir, cfg, &ds)?;
            written.extend(illusion_harness::report::emit(
                &cfg.out_dir,
                &[("config_echo.toml", cfg.canonical_toml()?)],
            )?);
            Ok(written)
        }
        Command::Fit => {
            let wb = workbench::prepare(cfg)?;
            let mut written = artifacts::write_models(&cfg.out_dir, &wb)?;
            let mut files = vec![("config_echo.toml", cfg.canonical_toml()?)];
            if let Some(cal) = &wb.calibration {
                files.push((
                    "calibration.csv",
                    illusion_harness::report::calibration_csv(cal),
                ));
            }
            written.extend(illusion_harness::report::emit(&cfg.out_dir, &files)?);
            Ok(written)
        }
        Command::Grid => execute(cfg, ExperimentKind::Grid),
        Command::Baselines => execute(cfg, ExperimentKind::Baselines),
        Command::Sweep => execute(cfg, ExperimentKind::Sweep),
        Command::AttackCost => execute(cfg, ExperimentKind::AttackCost),
        Command::Transfer => execute(cfg, ExperimentKind::Transfer),
        Command::Report => recompute_report(cfg),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = effective_config(&cli)?;

    let written = {
        #[cfg(feature = "parallel")]
        {
            use anyhow::Context as _;
            if cfg.threads > 0 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .context("building thread pool")?;
                pool.install(|| run(&cli, &cfg))?
            } else {
                run(&cli, &cfg)?
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            if cfg.threads > 1 {
                eprintln!("note: built without the parallel feature; running sequentially");
            }
            run(&cli, &cfg)?
        }
    };

    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
