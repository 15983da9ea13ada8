//! Processes of the fabric task execution service.
//!
//! * [`service`]: the coordinator (HTTP API, durable queues, one forwarder per endpoint)
//! * [`agent`]: the endpoint agent (manager provisioning, scheduling, watchdog, scaling)
//! * [`manager`]: the per-node manager (worker pool, capacity adverts)
//! * [`worker`]: the sandboxed single-task executor
//! * [`bench`]: the experiment harness
//!
//! Shared plumbing lives in [`net`], [`store`], [`config`] and [`client`].

pub mod agent;
pub mod bench;
pub mod client;
pub mod config;
pub mod manager;
pub mod net;
pub mod sandbox;
pub mod service;
pub mod store;
pub mod worker;

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

/// Microseconds since the unix epoch. All processes of one deployment share a
/// host clock, so these timestamps are comparable across them.
pub fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// Installs a stderr tracing subscriber. `RUST_LOG` holds a level such as
/// `info`; the default is `warn`.
pub fn init_tracing() {
    let level = std::env::var("RUST_LOG")
        .ok()
        .and_then(|v| v.parse::<tracing_subscriber::filter::LevelFilter>().ok())
        .unwrap_or(tracing_subscriber::filter::LevelFilter::WARN);
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Locates a sibling executable of the running binary.
///
/// `FABRIC_BIN_DIR` wins when set. Test executables live one level below
/// the binaries (`target/<profile>/deps`), so the parent is tried as well.
pub fn sibling_binary(name: &str) -> PathBuf {
    if let Some(dir) = std::env::var_os("FABRIC_BIN_DIR") {
        return PathBuf::from(dir).join(name);
    }
    if let Ok(exe) = std::env::current_exe() {
        if let Some(dir) = exe.parent() {
            let here = dir.join(name);
            if here.exists() {
                return here;
            }
            if let Some(up) = dir.parent() {
                let there = up.join(name);
                if there.exists() {
                    return there;
                }
            }
        }
    }
    PathBuf::from(name)
}

/// Resolves on SIGTERM or ctrl-c.
pub async fn shutdown_signal() {
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    tokio::select! {
        _ = term => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}
