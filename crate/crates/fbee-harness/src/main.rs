//! Command-line entry point. Environment overrides: `FBEE_OUT_DIR` replaces
//! the output directory, `FBEE_THREADS` caps the sweep thread pool.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fbee_harness::{checkpoint, config::RunConfig, diagnostics, run, sweep};

#[derive(Parser)]
#[command(
    name = "fbee",
    about = "Forward-backward representation learning with ensemble-based exploration on finite MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training configuration to completion.
    Train {
        /// TOML configuration file (defaults apply for omitted keys).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one or more configurations across seeds and aggregate.
    Sweep {
        /// TOML configuration files, one per arm.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Seeds per configuration (seed k uses config.seed + k).
        #[arg(long)]
        seeds: u64,
        /// Output root; per-run directories are created beneath it.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its environment's task suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation episodes per task (defaults to the config's value).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare a checkpoint's factorization against exact tabular oracles.
    OracleCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of sampled reward embeddings.
        #[arg(long, default_value_t = 16)]
        n_z: usize,
    },
    /// Flatten a metrics stream into plot-ready two-column files.
    ExportPlots {
        /// Directory containing metrics.jsonl (or a direct file path).
        #[arg(long)]
        metrics_dir: PathBuf,
        /// Output directory for the .tsv files (default: <metrics_dir>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir_override() -> Option<PathBuf> {
    std::env::var_os("FBEE_OUT_DIR").map(PathBuf::from)
}

fn main() -> Result<()> {
    if let Ok(threads) = std::env::var("FBEE_THREADS") {
        let n: usize = threads.parse().context("FBEE_THREADS must be an integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to size the thread pool")?;
    }

    match Cli::parse().command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out.or_else(out_dir_override) {
                cfg.out_dir = out;
            }
            let artifacts = run::run(&cfg)?;
            let e = &artifacts.final_eval;
            println!(
                "run `{}` finished at step {}: avg optimality ratio {:.4}, coverage {:.4}",
                cfg.name, e.global_step, e.avg_ratio, e.coverage
            );
            println!("metrics:    {}", artifacts.metrics_path.display());
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
        }
        Command::Sweep { configs, seeds, out } => {
            let mut parsed = Vec::new();
            for path in &configs {
                let mut cfg = RunConfig::from_path(path)?;
                if cfg.name == "run" {
                    // Fall back to the file stem so arms stay distinguishable.
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        cfg.name = stem.to_string();
                    }
                }
                parsed.push(cfg);
            }
            let out = out_dir_override().unwrap_or(out);
            let report = sweep::sweep(&parsed, seeds, &out)?;
            for agg in &report.aggregates {
                println!(
                    "{}: median final ratio {:.4}, median final coverage {:.4} ({} seeds)",
                    agg.name,
                    agg.median_final_ratio(),
                    agg.median_final_coverage(),
                    agg.finals.len()
                );
            }
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!("FAILED {} seed {}: {}", f.config, f.seed, f.error);
                }
                bail!("{} run(s) failed; see report.json", report.failures.len());
            }
            println!("report: {}", out.join("report.json").display());
        }
        Command::Eval { checkpoint: ckpt_path, episodes } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let env = ckpt.config.environment.build()?;
            let oracle = run::TaskOracle::prepare(&env)?;
            let n_episodes = episodes.unwrap_or(ckpt.config.n_eval_episodes);
            let mut rng = fbee_core::seeding::derive_rng(ckpt.config.seed, "eval-cli");
            println!("{:<28} {:>12} {:>10} {:>8}", "task", "mean_return", "std", "ratio");
            let mut ratios = Vec::new();
            for (task, optimal) in &oracle.tasks {
                let res = fbee_core::zeroshot::evaluate_zero_shot(
                    &env,
                    &ckpt.trainer.ensemble,
                    task,
                    &ckpt.buffer,
                    n_episodes,
                    ckpt.config.n_reward_samples,
                    Some(*optimal),
                    &mut rng,
                )?;
                println!(
                    "{:<28} {:>12.4} {:>10.4} {:>8.4}",
                    res.task, res.mean_return, res.std_return, res.optimality_ratio
                );
                ratios.push(res.optimality_ratio);
            }
            let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
            println!("average optimality ratio: {avg:.4}");
        }
        Command::OracleCheck { checkpoint: ckpt_path, n_z } => {
            let ckpt = checkpoint::load(&ckpt_path)?;
            let report = diagnostics::oracle_check(&ckpt, n_z)?;
            println!("sampled reward embeddings: {}", report.n_z);
            println!("mean Q relative L2 error:       {:.4}", report.mean_q_rel_l2);
            println!("mean Q rank correlation:        {:.4}", report.mean_q_rank_corr);
            println!("mean measure relative L2 error: {:.4}", report.mean_measure_rel_l2);
            println!(
                "F-vs-Q uncertainty R²:          {:.4}{}",
                report.f_q_r_squared,
                if report.f_q_degenerate { " (degenerate)" } else { "" }
            );
            let json_path = ckpt_path.with_extension("oracle-check.json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
            println!("full report: {}", json_path.display());
        }
        Command::ExportPlots { metrics_dir, out } => {
            let metrics_path = if metrics_dir.is_file() {
                metrics_dir.clone()
            } else {
                metrics_dir.join("metrics.jsonl")
            };
            let out = out
                .or_else(out_dir_override)
                .unwrap_or_else(|| metrics_path.parent().unwrap().join("plots"));
            let files = diagnostics::export_plots(&metrics_path, &out)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
