//! The `optima` command line: data generation, training, evaluation,
//! theory verification and report rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "optima",
    version,
    about = "Learned augmentation distributions via the augmented ELBO"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Run configuration (JSON); for `report`, the report file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing (default `out`; `verify` writes
    /// `verify.json` only when given).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and test CSV files.
    GenData(Common),
    /// Train every arm: checkpoint, trace CSV and resolved config.
    Train(Common),
    /// Evaluate trained checkpoints into `report.json`.
    Eval(Common),
    /// Run theory checks; exits 4 if any fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Print the available checks without running them.
        #[arg(long)]
        list: bool,
        /// Run only the named checks (repeatable).
        #[arg(long = "check")]
        checks: Vec<String>,
    },
    /// Render SVG figures and a markdown summary from a report.
    Report(Common),
}

impl Common {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn resolved(common: &Common) -> CliResult<RunConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    load_config(path)?.resolve(common.seed)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&resolved(&c)?, &c.out_dir()),
        Command::Train(c) => commands::train(&resolved(&c)?, &c.out_dir()),
        Command::Eval(c) => commands::eval(&resolved(&c)?, &c.out_dir()),
        Command::Report(c) => {
            let path = c
                .config
                .clone()
                .unwrap_or_else(|| c.out_dir().join("report.json"));
            report::report(&path, &c.out_dir())
        }
        Command::Verify {
            common,
            list,
            checks,
        } => run_verify(&common, list, checks),
    }
}

fn run_verify(common: &Common, list: bool, checks: Vec<String>) -> CliResult<()> {
    if list {
        for (name, about) in verify::CHECKS {
            println!("{name:<18} {about}");
        }
        return Ok(());
    }
    let selected: Vec<String> = if checks.is_empty() {
        verify::default_suite()
            .into_iter()
            .map(String::from)
            .collect()
    } else {
        checks
    };
    if let Some(bad) = selected
        .iter()
        .find(|c| !verify::CHECKS.iter().any(|k| k.0 == c.as_str()))
    {
        return Err(CliError::Config(format!(
            "unknown check `{bad}`; see `optima verify --list`"
        )));
    }
    let seed = common.seed.unwrap_or(0);
    let mut all = Vec::new();
    let mut failed = Vec::new();
    for name in &selected {
        for r in verify::run_check(name, seed)? {
            use optima_core::theory::Status;
            let tag = match r.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Inconclusive => "INCONCLUSIVE",
                Status::Diagnostic => "DIAG",
            };
            println!("{tag:<5} {:<20} {}", r.name, r.detail);
            if r.name == "shrinkage" {
                verify::shrinkage_table(&r)
                    .iter()
                    .for_each(|l| println!("{l}"));
            }
            if matches!(r.status, Status::Fail | Status::Inconclusive) {
                failed.push(r.name.clone());
            }
            all.push(r);
        }
    }
    if let Some(out) = &common.out {
        commands::write_file(&out.join("verify.json"), &commands::to_json(&all))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
