use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dsc_core::harness::{run_experiment, write_outputs, ExperimentConfig};
use dsc_core::spectral::SpectralBasis;

#[derive(Parser)]
#[command(name = "control-bench", version, about = "Online control benchmark: DSC vs GRC vs LQG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write `<out>/<name>.csv` plus `manifest.json`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Use the direct convolution path instead of the FFT engine.
        #[arg(long)]
        naive_conv: bool,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compute a spectral filter bank and write it as a binary cache file.
    Filters {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            trials,
            seed,
            horizon,
            naive_conv,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            cfg.naive_conv |= naive_conv;
            cfg.validate()?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir in the config")?;
            if threads == Some(0) {
                anyhow::bail!("--threads must be at least 1");
            }

            let start = Instant::now();
            let result = run_experiment(&cfg, threads)?;
            let csv = write_outputs(&cfg, &result, &out)?;
            eprintln!(
                "{}: {} trials x {} steps in {:.1}s -> {}",
                cfg.name,
                cfg.trials,
                cfg.horizon,
                start.elapsed().as_secs_f64(),
                csv.display()
            );
            for f in &result.failures {
                eprintln!("  trial {} aborted: {} diverged at step {}", f.trial, f.controller, f.step);
            }
            for name in &result.aggregate.controllers {
                if let Some((mean, lo, hi)) = result.aggregate.final_window(name) {
                    eprintln!("  {name:>4}  final-window mean {mean:.6}  95% CI [{lo:.6}, {hi:.6}]");
                }
            }
        }
        Command::Filters {
            gamma,
            size,
            count,
            out,
        } => {
            let basis = SpectralBasis::compute(size, count, gamma)?;
            basis.write_cache(&out)?;
            eprintln!("wrote {count} filters of length {size} (gamma = {gamma}) to {}", out.display());
        }
    }
    Ok(())
}
