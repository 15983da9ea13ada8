//! Starts and tears down local deployments: an in-process coordinator plus
//! agent and manager processes.

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fabric_core::{EndpointId, FunctionId, Runtime};
use tokio::task::JoinHandle;

use crate::client::{Client, ClientError};
use crate::config::{AgentConfig, CoordinatorConfig};
use crate::service::api::{RegisterEndpointRequest, RegisterFunctionRequest};
use crate::service::{http, Coordinator};

pub const TOKEN: &str = "bench-token";
pub const PRINCIPAL: &str = "bench";

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("api: {0}")]
    Client(#[from] ClientError),
    #[error("{0}")]
    Startup(String),
}

/// A coordinator on an ephemeral port, in this process or a child process.
pub struct Cluster {
    /// Set when the coordinator runs in this process.
    pub coord: Option<Arc<Coordinator>>,
    pub client: Client,
    pub base: String,
    server: Option<JoinHandle<()>>,
    proc: Option<Proc>,
}

impl Cluster {
    /// Starts a coordinator. `cfg.listen` is replaced by an ephemeral port
    /// and the bench token is added.
    pub async fn start(mut cfg: CoordinatorConfig) -> Result<Cluster, ClusterError> {
        cfg.listen = "127.0.0.1:0".into();
        cfg.tokens.insert(TOKEN.into(), PRINCIPAL.into());
        let coord = Coordinator::open(cfg)?;
        let (listener, addr) = http::bind(&coord).await?;
        coord.start()?;
        let c = coord.clone();
        let server = tokio::spawn(async move {
            let _ = http::serve(c, listener).await;
        });
        let base = format!("http://{addr}");
        Ok(Cluster {
            client: Client::new(&base, TOKEN),
            base,
            coord: Some(coord),
            server: Some(server),
            proc: None,
        })
    }

    /// Starts the coordinator binary with `cfg` written to `dir`.
    pub async fn spawn(mut cfg: CoordinatorConfig, dir: &Path) -> Result<Cluster, ClusterError> {
        cfg.listen = "127.0.0.1:0".into();
        cfg.tokens.insert(TOKEN.into(), PRINCIPAL.into());
        std::fs::create_dir_all(dir)?;
        let path = dir.join("coordinator.toml");
        crate::config::save(&path, &cfg)?;
        let mut child = Command::new(binary("coordinator"))
            .arg("--config")
            .arg(&path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let proc = Proc { child };
        let line = first_line(stdout).await?;
        let base = line
            .trim()
            .strip_prefix("coordinator listening on ")
            .ok_or_else(|| ClusterError::Startup(format!("coordinator did not start: {line:?}")))?
            .to_string();
        Ok(Cluster {
            client: Client::new(&base, TOKEN),
            base,
            coord: None,
            server: None,
            proc: Some(proc),
        })
    }

    pub async fn register_endpoint(&self, name: &str) -> Result<EndpointId, ClusterError> {
        let req = RegisterEndpointRequest {
            name: name.into(),
            ..Default::default()
        };
        Ok(self.client.register_endpoint(&req).await?.endpoint_id)
    }

    pub async fn register_function(
        &self,
        body: &str,
        runtime: Runtime,
        tag: &str,
        memoize: bool,
    ) -> Result<FunctionId, ClusterError> {
        let req = RegisterFunctionRequest {
            name: body.into(),
            body: body.as_bytes().to_vec(),
            runtime,
            container_tag: tag.into(),
            memoize,
            allowed_principals: Vec::new(),
            function_id: None,
        };
        Ok(self.client.register_function(&req).await?.function_id)
    }

    /// Agent config pointing at this coordinator.
    pub fn agent_config(&self, endpoint: EndpointId, state_dir: &Path) -> AgentConfig {
        let mut cfg = AgentConfig::new(endpoint, self.base.clone(), TOKEN);
        cfg.listen = format!("127.0.0.1:{}", free_port().unwrap_or(0));
        cfg.state_dir = Some(state_dir.to_path_buf());
        cfg
    }

    /// Waits until the endpoint reports `n` registered managers.
    pub async fn wait_managers(&self, endpoint: EndpointId, n: usize, timeout: Duration) -> Result<(), ClusterError> {
        let deadline = Instant::now() + timeout;
        loop {
            let ep = self.client.get_endpoint(endpoint).await?;
            let have = ep.agent.as_ref().map_or(0, |a| a.managers.len());
            if have >= n {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(ClusterError::Startup(format!("{have} of {n} managers registered")));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        if let Some(c) = &self.coord {
            c.shutdown();
        }
        if let Some(s) = &self.server {
            s.abort();
        }
        if let Some(p) = self.proc.as_mut() {
            p.terminate(Duration::from_secs(5));
        }
    }
}

/// A port that was free a moment ago.
pub fn free_port() -> std::io::Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Reads the startup line a child prints before serving.
async fn first_line(stdout: std::process::ChildStdout) -> Result<String, ClusterError> {
    tokio::task::spawn_blocking(move || {
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).map(|_| line)
    })
    .await
    .map_err(|e| ClusterError::Startup(e.to_string()))?
    .map_err(ClusterError::Io)
}

fn binary(name: &str) -> PathBuf {
    crate::sibling_binary(name)
}

/// A child process killed when dropped.
pub struct Proc {
    child: Child,
}

impl Proc {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    /// SIGTERM, then SIGKILL after `grace`.
    pub fn terminate(&mut self, grace: Duration) {
        // SAFETY: plain kill(2).
        unsafe {
            libc::kill(self.child.id() as i32, libc::SIGTERM);
        }
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        self.kill();
    }

    pub fn try_wait(&mut self) -> Option<std::process::ExitStatus> {
        self.child.try_wait().ok().flatten()
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        self.kill();
    }
}

/// An agent process started with `agent start`.
pub struct AgentProc {
    pub proc: Proc,
    pub addr: SocketAddr,
    pub config_path: PathBuf,
}

impl AgentProc {
    /// Writes `cfg` next to its state dir and starts the agent binary.
    pub async fn spawn(cfg: &AgentConfig) -> Result<AgentProc, ClusterError> {
        let dir = cfg
            .state_dir
            .clone()
            .ok_or_else(|| ClusterError::Startup("agent config needs a state_dir".into()))?;
        std::fs::create_dir_all(&dir)?;
        let config_path = dir.join("agent.toml");
        crate::config::save(&config_path, cfg)?;
        let mut child = Command::new(binary("agent"))
            .arg("start")
            .arg("--config")
            .arg(&config_path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped stdout");
        let proc = Proc { child };
        let line = first_line(stdout).await?;
        let addr = line
            .trim()
            .strip_prefix("agent listening on ")
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| ClusterError::Startup(format!("agent did not start: {line:?}")))?;
        Ok(AgentProc {
            proc,
            addr,
            config_path,
        })
    }
}

/// Starts a manager process connected to `agent`.
pub fn spawn_manager(agent: SocketAddr, node_id: &str, workers: u32, tags: &[&str]) -> Result<Proc, ClusterError> {
    let mut cmd = Command::new(binary("manager"));
    cmd.arg("--agent")
        .arg(agent.to_string())
        .arg("--node-id")
        .arg(node_id)
        .arg("--workers")
        .arg(workers.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::inherit());
    if !tags.is_empty() {
        cmd.arg("--tags").arg(tags.join(","));
    }
    Ok(Proc { child: cmd.spawn()? })
}
