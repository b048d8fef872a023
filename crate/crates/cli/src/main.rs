use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use obstacle_ldp::harness::{
    compare_baseline, read_baseline, read_report, run, Baseline, ExperimentConfig,
    EXPERIMENT_KINDS,
};

#[derive(Parser)]
#[command(name = "oblab", version, about = "Obstacle-problem and large-deviation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's, then `$OBLAB_OUT_DIR/<name>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, env = "OBLAB_OUT_DIR", default_value = "out", hide_env_values = true)]
        out_root: PathBuf,
    },
    /// Compare a report against a baseline.
    Compare { report: PathBuf, baseline: PathBuf },
    /// Write a baseline accepting small deviations from a report.
    Baseline {
        report: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        rel_tol: f64,
        #[arg(long, default_value_t = 1e-9)]
        abs_tol: f64,
    },
    /// List the experiment kinds.
    ListExperiments,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            out_root,
        } => run_config(&config, seed, out_dir, &out_root),
        Command::Compare { report, baseline } => {
            let r = read_report(&report).with_context(|| format!("reading {}", report.display()))?;
            let b = read_baseline(&baseline)
                .with_context(|| format!("reading {}", baseline.display()))?;
            let cmp = compare_baseline(&r, &b)?;
            for m in &cmp.mismatches {
                match m.actual {
                    Some(a) => println!(
                        "MISMATCH {}: expected {} ± {}, got {a}",
                        m.field, m.expected, m.tol
                    ),
                    None => println!("MISSING {}: expected {}", m.field, m.expected),
                }
            }
            println!(
                "{}: {} fields checked, {} mismatches",
                if cmp.passed { "PASS" } else { "FAIL" },
                cmp.checked,
                cmp.mismatches.len()
            );
            Ok(cmp.passed)
        }
        Command::Baseline {
            report,
            output,
            rel_tol,
            abs_tol,
        } => {
            let r = read_report(&report).with_context(|| format!("reading {}", report.display()))?;
            let b = Baseline::from_report(&r, rel_tol, abs_tol);
            std::fs::write(&output, serde_json::to_string_pretty(&b)? + "\n")?;
            println!("wrote {} fields to {}", b.fields.len(), output.display());
            Ok(true)
        }
        Command::ListExperiments => {
            for (kind, about) in EXPERIMENT_KINDS {
                println!("{kind:<20} {about}");
            }
            Ok(true)
        }
    }
}

fn run_config(path: &Path, seed: Option<u64>, out_dir: Option<PathBuf>, out_root: &Path) -> Result<bool> {
    let mut config =
        ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        config.seeds.base = s;
    }
    let dir = out_dir
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| out_root.join(&config.name));
    let outcome = run(&config, &dir).with_context(|| format!("running {}", config.name))?;
    for c in &outcome.report.checks {
        println!(
            "{} {}{}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            if c.detail.is_empty() {
                String::new()
            } else {
                format!(": {}", c.detail)
            }
        );
    }
    println!(
        "{} {} ({:.2} s) -> {}",
        outcome.report.kind,
        if outcome.report.passed { "passed" } else { "failed" },
        outcome.manifest.wall_time_s,
        dir.display()
    );
    Ok(outcome.report.passed)
}
