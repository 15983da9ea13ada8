use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fabric::bench::plan::ExperimentPlan;
use fabric::bench::run::run_plan;

/// Drives experiments against a local fabric deployment.
#[derive(Parser)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs one experiment plan and writes CSV reports.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the plan's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[tokio::main]
async fn main() {
    fabric::init_tracing();
    let Cmd::Run { plan, out, seed } = Args::parse().cmd;
    let p = match ExperimentPlan::load(&plan) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("bench: {e}");
            std::process::exit(2);
        }
    };
    let seed = seed.or(p.seed).unwrap_or(0);
    let outcome = match run_plan(&p, &out, seed).await {
        Ok(o) => o,
        Err(e) => {
            eprintln!("bench: {e}");
            std::process::exit(3);
        }
    };
    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !outcome.passed() {
        std::process::exit(1);
    }
}
