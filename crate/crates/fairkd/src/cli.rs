//! Command-line interface.
//!
//! ```text
//! fairkd pretrain-teacher --config exp.toml
//! fairkd run --config exp.toml [--strategy tinybert]... [--format md]
//! fairkd finetune --config exp.toml --strategy minilm
//! fairkd budget --config exp.toml --flop-budget 1000000000000
//! fairkd report --config exp.toml --format tsv
//! ```
//!
//! Flags given on the command line override the matching config entries.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Mode, Seeds};
use crate::formats;
use crate::report::Format;
use crate::runner::{self, Until};

#[derive(Debug, Parser)]
#[command(
    name = "fairkd",
    version,
    about = "Compute-matched pretraining versus distillation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (or load) the teacher only.
    PretrainTeacher(Common),
    /// Run the full experiment and print the report.
    Run(Common),
    /// Grid-search the probe tasks for the selected strategies' checkpoints,
    /// pretraining them first if needed.
    Finetune(Common),
    /// Print per-token costs and token allowances under the FLOP budget.
    Budget(Common),
    /// Re-render the report from the logs of a finished run.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Use this seed for every random stream.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Restrict to these strategies (repeatable).
    #[arg(long = "strategy", value_name = "NAME")]
    pub strategies: Vec<String>,
    #[arg(long, value_name = "unlimited|limited")]
    pub data_mode: Option<String>,
    #[arg(long, value_name = "N")]
    pub flop_budget: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "tsv|md", default_value = "md")]
    pub format: String,
}

impl Common {
    /// The config file with command-line overrides applied and re-validated.
    pub fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::all(s);
        }
        if !self.strategies.is_empty() {
            cfg.experiment.strategies = self.strategies.clone();
        }
        if let Some(m) = &self.data_mode {
            cfg.data.mode = m.parse::<Mode>()?;
        }
        if let Some(b) = self.flop_budget {
            cfg.budget.flop_budget = b;
        }
        if let Some(o) = &self.out {
            cfg.experiment.out_dir = o.clone();
        }
        cfg.validate().context("after applying command-line overrides")?;
        Ok(cfg)
    }

    fn format(&self) -> anyhow::Result<Format> {
        self.format.parse()
    }
}

/// Runs a parsed command and returns what it prints.
pub fn execute(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::PretrainTeacher(c) => {
            let cfg = c.load()?;
            let summary = runner::run_experiment(&cfg, Until::Teacher)?;
            let mut out = format!(
                "teacher stages run: {:?}, reused: {:?}\n",
                summary.executed, summary.reused
            );
            for (name, h) in &summary.heldout {
                out.push_str(&format!(
                    "{name}: held-out {} {:.4} -> {:.4}\n",
                    h.metric, h.initial, h.r#final
                ));
            }
            Ok(out)
        }
        Command::Run(c) => {
            let format = c.format()?;
            let cfg = c.load()?;
            runner::run_experiment(&cfg, Until::Report)?;
            runner::render_report(&cfg, format)
        }
        Command::Finetune(c) => {
            let cfg = c.load()?;
            runner::run_experiment(&cfg, Until::Probes)?;
            let mut out = String::new();
            for s in cfg.strategies()? {
                let path = cfg.experiment.out_dir.join(format!("{s}/probes.tsv"));
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                for (task, r) in formats::parse_probe_results(&text)? {
                    out.push_str(&format!(
                        "{s}\t{task}\t{:.4}\tbatch_size={}\tlr={:e}\n",
                        r.best.metric, r.best.batch_size, r.best.lr
                    ));
                }
            }
            Ok(out)
        }
        Command::Budget(c) => {
            let format = c.format()?;
            runner::budget_table(&c.load()?, format)
        }
        Command::Report(c) => {
            let format = c.format()?;
            runner::render_report(&c.load()?, format)
        }
    }
}
