use std::path::PathBuf;

use clap::Parser;

use glassflow::config::{ExperimentConfig, Mode};
use glassflow::harness::{run_mode, RunOptions};

/// Spin-glass dynamics and mean-field flow experiments driven by a TOML
/// config; writes CSV tables plus a JSON manifest per run.
#[derive(Parser)]
#[command(name = "glassflow", version)]
struct Cli {
    /// One of: simulate, flow-particle, flow-pde, compare, bifurcation,
    /// gaussian-check. Must match the config's `mode`.
    mode: String,
    /// Path to the experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Offset added to every replicate seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = Cli::parse();
    let Some(mode) = Mode::parse(&cli.mode) else {
        eprintln!(
            "unknown mode `{}`; expected simulate, flow-particle, flow-pde, compare, \
             bifurcation, or gaussian-check",
            cli.mode
        );
        return 2;
    };
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    if cfg.mode != mode {
        eprintln!(
            "requested mode {mode} but the config sets mode {}",
            cfg.mode
        );
        return 2;
    }
    let opts = RunOptions {
        seed_offset: cli.seed_offset,
        out_dir: cli.out,
        threads: cli.threads,
    };
    match run_mode(&cfg, &opts) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            println!("wrote {}", report.manifest.display());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
