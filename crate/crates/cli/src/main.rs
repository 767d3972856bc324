//! `mixadapt`: generate data, pretrain, adapt, train the oracle, evaluate and
//! sweep, all driven by one TOML config plus `--set key=value` overrides.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mixadapt_core::detector::load_checkpoint;
use mixadapt_core::synth::{Benchmark, SPLITS};
use mixadapt_core::train::{
    evaluate_to_dir, load_benchmark, run_adapt, run_oracle, run_pretrain, run_sweep, RunConfig, RunOutcome,
    SweepAxis, OUTPUT_ROOT_ENV,
};

#[derive(Debug, Parser)]
#[command(name = "mixadapt", version, about = "Region-mixing domain adaptation on synthetic detection data")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set adapt.alpha=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output root; replaces `output_dir` from the config.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the four benchmark splits to disk.
    GenData {
        /// Target directory; defaults to `<output>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on labelled source data from random weights.
    Pretrain,
    /// Train on labelled target data (upper bound).
    Oracle,
    /// Adapt a source checkpoint to the target domain.
    Adapt {
        /// Defaults to `<output>/pretrain/checkpoint.txt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of source_train, source_test, target_train, target_test.
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// One adaptation run per value of one parameter.
    Sweep {
        /// strategy, schedule, gamma, alpha, conf_thresh or gamma_thresh.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; every option of the axis when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Defaults to `<output>/pretrain/checkpoint.txt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides)?,
        None => RunConfig::from_toml_str("", &cli.overrides)?,
    };
    if let Some(root) = &cli.output_root {
        cfg.output_dir = root.clone();
    }
    Ok(cfg)
}

fn report(name: &str, out: &RunOutcome, dir: &Path) {
    eprintln!(
        "{name}: source mAP {:.4}, target mAP {:.4} -> {}",
        out.source_report.map,
        out.target_report.map,
        dir.display()
    );
}

fn default_checkpoint(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("pretrain").join("checkpoint.txt"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let root = cfg.output_dir.clone();
    match &cli.command {
        Command::GenData { out } => {
            let dir = out.clone().unwrap_or_else(|| root.join("data"));
            let bench = Benchmark::generate(&cfg.data.benchmark)?;
            bench.write(&dir)?;
            eprintln!("wrote benchmark to {}", dir.display());
        }
        Command::Pretrain => {
            let bench = load_benchmark(&cfg)?;
            let out = run_pretrain(&cfg, &bench)?;
            let dir = root.join("pretrain");
            out.write(&dir, &cfg)?;
            report("pretrain", &out, &dir);
        }
        Command::Oracle => {
            let bench = load_benchmark(&cfg)?;
            let out = run_oracle(&cfg, &bench)?;
            let dir = root.join("oracle");
            out.write(&dir, &cfg)?;
            report("oracle", &out, &dir);
        }
        Command::Adapt { checkpoint } => {
            let ckpt = default_checkpoint(&cfg, checkpoint);
            let init = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let bench = load_benchmark(&cfg)?;
            let out = run_adapt(&cfg, &bench, &init)?;
            let dir = root.join("adapt");
            out.write(&dir, &cfg)?;
            report("adapt", &out, &dir);
        }
        Command::Eval { checkpoint, split } => {
            let Some(idx) = SPLITS.iter().position(|s| s == split) else {
                bail!("unknown split `{split}`, expected one of {}", SPLITS.join(", "));
            };
            let params = load_checkpoint(checkpoint)?;
            let bench = load_benchmark(&cfg)?;
            let data = bench.splits()[idx].1;
            let dir = root.join("eval").join(split);
            let rep = evaluate_to_dir(&params, data, &cfg.eval, &dir)?;
            print!("{}", rep.to_table());
            eprintln!("{split}: mAP {:.4} -> {}", rep.map, dir.display());
        }
        Command::Sweep { axis, values, checkpoint } => {
            let ckpt = default_checkpoint(&cfg, checkpoint);
            let init = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let values = if values.is_empty() { axis.default_values() } else { values.clone() };
            let bench = load_benchmark(&cfg)?;
            let table = run_sweep(&cfg, &bench, &init, *axis, &values)?;
            let dir = root.join(format!("sweep_{}", axis.name()));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("table.csv"), table.to_csv())?;
            std::fs::write(dir.join("table.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
