use std::path::PathBuf;

use clap::Parser;
use fabric::config::{self, ManagerConfig};
use fabric::manager::{Manager, ManagerOptions};

/// Runs a node manager that connects to an endpoint agent.
#[derive(Parser)]
struct Args {
    /// Agent address, host:port.
    #[arg(long)]
    agent: String,
    #[arg(long)]
    node_id: Option<String>,
    #[arg(long, default_value_t = 8)]
    workers: u32,
    /// Comma-separated tags to deploy workers for at start.
    #[arg(long, value_delimiter = ',')]
    tags: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    block_id: Option<u64>,
}

#[tokio::main]
async fn main() {
    fabric::init_tracing();
    let args = Args::parse();
    let config = match &args.config {
        Some(p) => match config::load::<ManagerConfig>(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("manager: {e}");
                std::process::exit(2);
            }
        },
        None => ManagerConfig::default(),
    };
    let node_id = args
        .node_id
        .unwrap_or_else(|| format!("node-{}", std::process::id()));
    let manager = Manager::new(ManagerOptions {
        agent: args.agent,
        node_id,
        workers: args.workers.max(1),
        tags: args.tags.into_iter().filter(|t| !t.is_empty()).collect(),
        block_id: args.block_id,
        config,
    });
    tokio::select! {
        r = manager.run() => {
            if let Err(e) = r {
                eprintln!("manager: {e}");
                std::process::exit(1);
            }
        }
        _ = fabric::shutdown_signal() => {}
    }
}
