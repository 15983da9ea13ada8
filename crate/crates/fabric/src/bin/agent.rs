use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use fabric::agent::Agent;
use fabric::config::{self, AgentConfig};

/// Runs or stops an endpoint agent.
#[derive(Parser)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Starts the agent in the foreground.
    Start {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stops the agent started with this config.
    Stop {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path) -> AgentConfig {
    match config::load::<AgentConfig>(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("agent: {e}");
            std::process::exit(2);
        }
    }
}

fn state_dir(cfg: &AgentConfig) -> PathBuf {
    cfg.state_dir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("fabric-agent-{}", cfg.endpoint_id)))
}

fn stop(cfg: &AgentConfig) {
    let pid_file = state_dir(cfg).join("agent.pid");
    let Ok(text) = std::fs::read_to_string(&pid_file) else {
        eprintln!("agent: not running (no {})", pid_file.display());
        std::process::exit(1);
    };
    let Ok(pid) = text.trim().parse::<i32>() else {
        eprintln!("agent: corrupt pid file {}", pid_file.display());
        std::process::exit(1);
    };
    // SAFETY: plain kill(2) calls.
    if unsafe { libc::kill(pid, libc::SIGTERM) } != 0 {
        eprintln!("agent: process {pid} is gone");
        let _ = std::fs::remove_file(&pid_file);
        std::process::exit(1);
    }
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        if unsafe { libc::kill(pid, 0) } != 0 {
            println!("agent {pid} stopped");
            return;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    eprintln!("agent: {pid} did not exit");
    std::process::exit(1);
}

#[tokio::main]
async fn main() {
    fabric::init_tracing();
    let args = Args::parse();
    let cfg = match &args.cmd {
        Cmd::Start { config } | Cmd::Stop { config } => load(config),
    };
    if let Cmd::Stop { .. } = args.cmd {
        stop(&cfg);
        return;
    }
    let agent = match Agent::bind(cfg).await {
        Ok(a) => a,
        Err(e) => {
            eprintln!("agent: {e}");
            std::process::exit(2);
        }
    };
    let pid_file = agent.state_dir().join("agent.pid");
    if let Err(e) = std::fs::write(&pid_file, format!("{}\n", std::process::id())) {
        eprintln!("agent: {}: {e}", pid_file.display());
        std::process::exit(1);
    }
    println!("agent listening on {}", agent.manager_addr());
    let result = agent.run(fabric::shutdown_signal()).await;
    let _ = std::fs::remove_file(&pid_file);
    if let Err(e) = result {
        eprintln!("agent: {e}");
        std::process::exit(3);
    }
}
