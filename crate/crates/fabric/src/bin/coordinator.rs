use std::path::PathBuf;

use clap::Parser;
use fabric::config::{self, CoordinatorConfig};
use fabric::service::{http, Coordinator};

/// Runs the coordinator: HTTP API plus one forwarder per endpoint.
#[derive(Parser)]
struct Args {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured listen address.
    #[arg(long)]
    listen: Option<String>,
}

#[tokio::main]
async fn main() {
    fabric::init_tracing();
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(p) => match config::load::<CoordinatorConfig>(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("coordinator: {e}");
                std::process::exit(2);
            }
        },
        None => CoordinatorConfig::default(),
    };
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("coordinator: {e}");
        std::process::exit(2);
    }
    let coord = match Coordinator::open(cfg) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("coordinator: {e}");
            std::process::exit(1);
        }
    };
    let (listener, addr) = match http::bind(&coord).await {
        Ok(b) => b,
        Err(e) => {
            eprintln!("coordinator: bind: {e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = coord.start() {
        eprintln!("coordinator: forwarders: {e}");
        std::process::exit(1);
    }
    println!("coordinator listening on http://{addr}");
    tokio::select! {
        r = http::serve(coord.clone(), listener) => {
            if let Err(e) = r {
                eprintln!("coordinator: {e}");
                std::process::exit(1);
            }
        }
        _ = fabric::shutdown_signal() => {}
    }
    coord.shutdown();
}
