use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use erft::cli_harness::{
    export_occupancy, gen_data, load_run_config, parse_config, parse_override, run_report,
    run_rollout, run_train, Dominance, RunConfig, TrainMode,
};
use erft::error_recycling::ErrorChannel;

#[derive(Parser)]
#[command(
    name = "erft",
    version,
    about = "Error-recycled flow matching on synthetic rotating clips"
)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump synthetic clips as CSV.
    GenData {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its run directory.
    Train {
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Error-recycled training with some error channels switched off.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        drop: Vec<ErrorChannel>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Autoregressive rollouts of a checkpoint into a metrics CSV.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clips: usize,
        /// Comma-separated seeds; `a..b` expands to the inclusive range.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize metrics CSVs and optionally check method dominance.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// `A>B`: A must end lower and grow no faster than B. Repeatable.
        #[arg(long = "assert-dominance", value_name = "A>B")]
        dominance: Vec<Dominance>,
        #[arg(long)]
        comparison_out: Option<PathBuf>,
        /// Bank snapshot whose occupancy is exported to `--occupancy-out`.
        #[arg(long, requires = "occupancy_out")]
        bank: Option<PathBuf>,
        #[arg(long, requires = "bank")]
        occupancy_out: Option<PathBuf>,
    },
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
            if a > b {
                bail!("empty seed range `{part}`");
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    Ok(parse_config(config, overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    match cli.command {
        Command::GenData { count, out } => {
            let config = resolve(cli.config.as_deref(), &overrides)?;
            gen_data(&config, count, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { mode, run_id } => {
            let mut config = resolve(cli.config.as_deref(), &overrides)?;
            if let Some(mode) = mode {
                config.mode = mode;
                config.validate()?;
            }
            let art = run_train(&config, run_id.as_deref())?;
            println!(
                "trained {} steps, final loss {}",
                art.losses.len(),
                art.losses
                    .last()
                    .map_or("n/a".into(), |l| format!("{l:.6}"))
            );
            println!("{}", art.checkpoint.display());
        }
        Command::Ablate { drop, run_id } => {
            let mut config = resolve(cli.config.as_deref(), &overrides)?;
            config.mode = TrainMode::Erft;
            config.drop_errors = drop;
            config.validate()?;
            let art = run_train(&config, run_id.as_deref())?;
            println!("{}", art.checkpoint.display());
        }
        Command::Rollout {
            checkpoint,
            clips,
            seeds,
            out,
        } => {
            let mut config = match &cli.config {
                Some(path) => resolve(Some(path), &[])?,
                None => load_run_config(&checkpoint)?,
            };
            for (k, v) in &overrides {
                config.set(k, v)?;
            }
            config.validate()?;
            let rows = run_rollout(&config, &checkpoint, clips, &parse_seeds(&seeds)?, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Report {
            csv,
            dominance,
            comparison_out,
            bank,
            occupancy_out,
        } => {
            if let (Some(bank), Some(out)) = (&bank, &occupancy_out) {
                export_occupancy(bank, out)?;
            }
            let report = run_report(&csv, &dominance, comparison_out.as_deref())?;
            print!("{}", report.summary_text());
            if !report.dominance_holds() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
