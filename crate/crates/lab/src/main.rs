use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use icq_core::envs::routing::RoutingEnv;
use icq_core::envs::synthetic::SyntheticEnv;
use icq_core::envs::table::TableEnv;
use icq_lab::config::{preset, EnvSpec, ExperimentConfig, ExperimentId};
use icq_lab::summary::Summary;
use icq_lab::{formats, plotdata, pool, run_to_dir, summarize_dir};

#[derive(Parser)]
#[command(name = "icq", version, about = "Interface-constrained Q-learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the sweep described by a config file.
    Run {
        config: PathBuf,
        /// Worker threads; defaults to $ICQ_WORKERS, then the core count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute summaries from the CSVs in an output directory.
    Summarize { dir: PathBuf },
    /// Write x, y, y_se plot data for one figure (an experiment id).
    Plotdata { dir: PathBuf, figure: String },
    /// Run an oracle-check config and fail unless every instance is within tolerance.
    OracleCheck {
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write the reference config of an experiment.
    Init {
        experiment: String,
        path: PathBuf,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Write the graph of a routing config (first family, first seed) as an edge list.
    ExportGraph { config: PathBuf, out: PathBuf },
    /// Write the exact latent tables of a table or synthetic config as a binary table file.
    ExportModel { config: PathBuf, out: PathBuf },
}

fn print_summary(s: &Summary) {
    println!("{} ({} runs, {} diverged, config {})", s.experiment, s.runs, s.diverged, s.config_hash);
    for (k, v) in &s.stats {
        println!("  {} = {:.6}", k, v);
    }
    for c in &s.checks {
        println!("  check {}: {:.6} {} -> {}", c.name, c.value, c.threshold, if c.pass { "PASS" } else { "FAIL" });
    }
}

fn workers(flag: Option<usize>) -> Result<usize> {
    match flag {
        Some(n) if n >= 1 => Ok(n),
        Some(_) => bail!("--workers must be at least 1"),
        None => pool::worker_count(),
    }
}

fn main_inner() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run { config, workers: w } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_to_dir(&cfg, workers(w)?)?;
            print_summary(&out.summary);
            Ok(out.summary.diverged == 0)
        }
        Cmd::Summarize { dir } => {
            let mut ok = true;
            for s in summarize_dir(&dir)? {
                print_summary(&s);
                ok &= s.diverged == 0;
            }
            Ok(ok)
        }
        Cmd::Plotdata { dir, figure } => {
            println!("{}", plotdata(&dir, &figure)?.display());
            Ok(true)
        }
        Cmd::OracleCheck { config, workers: w } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.experiment != ExperimentId::OracleCheck {
                bail!("{} is a {} config", config.display(), cfg.experiment);
            }
            let out = run_to_dir(&cfg, workers(w)?)?;
            print_summary(&out.summary);
            Ok(out.summary.passed())
        }
        Cmd::Init { experiment, path, output_dir } => {
            let cfg = preset(ExperimentId::parse(&experiment)?, &output_dir);
            std::fs::write(&path, cfg.to_toml()?)?;
            Ok(true)
        }
        Cmd::ExportGraph { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let EnvSpec::Routing(spec) = &cfg.env else { bail!("{} is not a routing config", config.display()) };
            let spec = icq_core::envs::routing::RoutingSpec {
                family: cfg.sweep.grid[0].family()?,
                seed: spec.seed.wrapping_add(cfg.seeds[0]),
                ..spec.clone()
            };
            std::fs::write(&out, formats::edge_list(&RoutingEnv::new(&spec)?.graph))?;
            Ok(true)
        }
        Cmd::ExportModel { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let lat = match &cfg.env {
                EnvSpec::Table(spec) => TableEnv::random(spec)?.exact_latent(),
                EnvSpec::Synthetic(spec) => SyntheticEnv::new(spec)?.exact_model().to_latent(),
                other => bail!("no exact model for {} environments", other.kind()),
            };
            std::fs::write(&out, formats::encode_latent(&lat)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
