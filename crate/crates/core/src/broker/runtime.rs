//! Liveness bookkeeping for personal services, inetd style: local services
//! are spawned on first use with a Broker-allocated loopback port appended to
//! their command line, and respawned when found dead.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::Path;
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::process::{Child, Command};
use url::Url;

use crate::net;
use crate::registry::{Launcher, ServiceDescriptor};

pub const DEFAULT_LAUNCH_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(3);
const READY_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("no free loopback port")]
    PortExhaustion,
    #[error("cannot spawn `{cmd}`: {source}")]
    Spawn {
        cmd: String,
        #[source]
        source: std::io::Error,
    },
    #[error("service exited during startup ({0})")]
    ExitedEarly(std::process::ExitStatus),
    #[error("service did not accept connections on port {port} within {timeout:?}")]
    NotReady { port: u16, timeout: Duration },
    #[error("remote service {url} unreachable: {reason}")]
    Unreachable { url: Url, reason: String },
}

/// Where a live service can be reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Local(SocketAddr),
    Remote(Url),
}

impl Endpoint {
    /// Base URL requests to the service are built on.
    pub fn base_url(&self) -> Url {
        match self {
            Self::Local(addr) => Url::parse(&format!("http://{addr}/")).expect("socket address forms a URL"),
            Self::Remote(url) => url.clone(),
        }
    }

    /// Parses the `PSvc-Service` text of a resolve reply: `host:port` or a URL.
    pub fn parse(text: &str) -> Option<Self> {
        let text = text.trim();
        if text.contains("://") {
            Url::parse(text).ok().map(Self::Remote)
        } else {
            text.parse().ok().map(Self::Local)
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Local(addr) => write!(f, "{addr}"),
            Self::Remote(url) => write!(f, "{url}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceState {
    Dormant,
    Running { endpoint: SocketAddr, pid: Option<u32> },
    Remote(Url),
}

/// Snapshot of one service's runtime state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeRecord {
    pub descriptor_id: String,
    pub state: ServiceState,
    pub launch_count: u32,
}

struct Slot {
    record: RuntimeRecord,
    child: Option<Child>,
}

/// Hands out free loopback ports, never repeating one of the recent
/// allocations.
#[derive(Debug, Default)]
pub struct PortAllocator {
    recent: Mutex<VecDeque<u16>>,
}

const RECENT_PORTS: usize = 64;
const ALLOCATION_ATTEMPTS: usize = 64;

impl PortAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds an ephemeral loopback port and releases it for the child to take.
    pub fn allocate(&self) -> Result<u16, LaunchError> {
        let mut recent = self.recent.lock().expect("port allocator poisoned");
        for _ in 0..ALLOCATION_ATTEMPTS {
            let Ok(probe) = std::net::TcpListener::bind(SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0)) else {
                continue;
            };
            let Ok(addr) = probe.local_addr() else { continue };
            let port = addr.port();
            if recent.contains(&port) {
                continue;
            }
            if recent.len() == RECENT_PORTS {
                recent.pop_front();
            }
            recent.push_back(port);
            return Ok(port);
        }
        Err(LaunchError::PortExhaustion)
    }
}

/// Runtime state of every service the Broker has touched. Check-then-spawn is
/// atomic per service; different services never wait on each other.
pub struct RuntimeTable {
    slots: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Slot>>>>,
    ports: PortAllocator,
    pub launch_timeout: Duration,
    pub probe_timeout: Duration,
}

impl Default for RuntimeTable {
    fn default() -> Self {
        Self::new()
    }
}

impl RuntimeTable {
    pub fn new() -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
            ports: PortAllocator::new(),
            launch_timeout: DEFAULT_LAUNCH_TIMEOUT,
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
        }
    }

    fn slot(&self, id: &str) -> Arc<tokio::sync::Mutex<Slot>> {
        let mut slots = self.slots.lock().expect("runtime table poisoned");
        slots
            .entry(id.to_owned())
            .or_insert_with(|| {
                Arc::new(tokio::sync::Mutex::new(Slot {
                    record: RuntimeRecord {
                        descriptor_id: id.to_owned(),
                        state: ServiceState::Dormant,
                        launch_count: 0,
                    },
                    child: None,
                }))
            })
            .clone()
    }

    pub async fn record(&self, id: &str) -> Option<RuntimeRecord> {
        let slot = self.slots.lock().expect("runtime table poisoned").get(id).cloned()?;
        let guard = slot.lock().await;
        Some(guard.record.clone())
    }

    /// Returns a live endpoint for the service, launching (or relaunching) a
    /// local one or probing a remote one as needed.
    pub async fn ensure_live(&self, desc: &ServiceDescriptor) -> Result<Endpoint, LaunchError> {
        let slot = self.slot(&desc.id);
        let mut slot = slot.lock().await;
        match &desc.launcher {
            Launcher::Remote { url } => {
                probe_remote(url, self.probe_timeout).await?;
                slot.record.state = ServiceState::Remote(url.clone());
                Ok(Endpoint::Remote(url.clone()))
            }
            Launcher::Local { dir, cmd } => {
                if let Some(endpoint) = live_endpoint(&mut slot).await {
                    return Ok(Endpoint::Local(endpoint));
                }
                if let Some(mut old) = slot.child.take() {
                    let _ = old.start_kill();
                    let _ = old.wait().await;
                }
                slot.record.state = ServiceState::Dormant;
                let port = self.ports.allocate()?;
                let mut child = spawn(dir, cmd, port)?;
                slot.record.launch_count += 1;
                let endpoint = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
                tracing::info!(service = %desc.id, %endpoint, pid = ?child.id(), "launched personal service");
                if let Err(e) = wait_ready(&mut child, endpoint, self.launch_timeout).await {
                    let _ = child.start_kill();
                    let _ = child.wait().await;
                    return Err(e);
                }
                slot.record.state = ServiceState::Running {
                    endpoint,
                    pid: child.id(),
                };
                slot.child = Some(child);
                Ok(Endpoint::Local(endpoint))
            }
        }
    }

    /// Kills every child this table spawned.
    pub async fn shutdown(&self) {
        let slots: Vec<_> = self.slots.lock().expect("runtime table poisoned").values().cloned().collect();
        for slot in slots {
            let mut slot = slot.lock().await;
            if let Some(mut child) = slot.child.take() {
                let _ = child.start_kill();
                let _ = child.wait().await;
            }
            slot.record.state = ServiceState::Dormant;
        }
    }
}

async fn live_endpoint(slot: &mut Slot) -> Option<SocketAddr> {
    let ServiceState::Running { endpoint, .. } = slot.record.state else {
        return None;
    };
    let child = slot.child.as_mut()?;
    if !matches!(child.try_wait(), Ok(None)) {
        return None;
    }
    TcpStream::connect(endpoint).await.ok().map(|_| endpoint)
}

fn spawn(dir: &Path, cmd: &[String], port: u16) -> Result<Child, LaunchError> {
    let (program, args) = cmd.split_first().ok_or_else(|| LaunchError::Spawn {
        cmd: String::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
    })?;
    Command::new(program)
        .args(args)
        .arg(port.to_string())
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .map_err(|source| LaunchError::Spawn {
            cmd: cmd.join(" "),
            source,
        })
}

async fn wait_ready(child: &mut Child, endpoint: SocketAddr, timeout: Duration) -> Result<(), LaunchError> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Ok(Some(status)) = child.try_wait() {
            return Err(LaunchError::ExitedEarly(status));
        }
        if TcpStream::connect(endpoint).await.is_ok() {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(LaunchError::NotReady {
                port: endpoint.port(),
                timeout,
            });
        }
        tokio::time::sleep(READY_POLL).await;
    }
}

/// Any HTTP answer to a `HEAD` counts as alive.
async fn probe_remote(url: &Url, timeout: Duration) -> Result<(), LaunchError> {
    let req = http::Request::head(url.as_str()).body(Bytes::new()).expect("valid HEAD request");
    net::send_to_url(url, req, timeout)
        .await
        .map(|_| ())
        .map_err(|e| LaunchError::Unreachable {
            url: url.clone(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ServiceName;

    #[test]
    fn consecutive_allocations_differ() {
        let ports = PortAllocator::new();
        let a = ports.allocate().unwrap();
        let b = ports.allocate().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn occupied_port_is_skipped() {
        let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let taken = held.local_addr().unwrap().port();
        let ports = PortAllocator::new();
        for _ in 0..200 {
            assert_ne!(ports.allocate().unwrap(), taken);
        }
    }

    #[test]
    fn endpoint_text() {
        let local = Endpoint::parse("127.0.0.1:10005").unwrap();
        assert_eq!(local.to_string(), "127.0.0.1:10005");
        assert_eq!(local.base_url().as_str(), "http://127.0.0.1:10005/");
        let remote = Endpoint::parse("http://10.1.2.3:9000/svc/").unwrap();
        assert_eq!(remote, Endpoint::Remote(Url::parse("http://10.1.2.3:9000/svc/").unwrap()));
        assert!(Endpoint::parse("nonsense").is_none());
    }

    fn local(id: &str, cmd: &[&str]) -> ServiceDescriptor {
        ServiceDescriptor {
            id: id.into(),
            launcher: Launcher::Local {
                dir: std::env::temp_dir(),
                cmd: cmd.iter().map(|s| s.to_string()).collect(),
            },
            presentation: ServiceName::new().with("a", 1),
        }
    }

    #[tokio::test]
    async fn spawn_failure_is_reported() {
        let table = RuntimeTable::new();
        let err = table.ensure_live(&local("x", &["/nonexistent/psvc-binary"])).await.unwrap_err();
        assert!(matches!(err, LaunchError::Spawn { .. }), "{err}");
    }

    #[tokio::test]
    async fn early_exit_is_reported() {
        let table = RuntimeTable::new();
        let err = table.ensure_live(&local("x", &["false"])).await.unwrap_err();
        assert!(matches!(err, LaunchError::ExitedEarly(_)), "{err}");
        assert_eq!(table.record("x").await.unwrap().state, ServiceState::Dormant);
    }

    #[tokio::test]
    async fn never_ready_times_out() {
        let mut table = RuntimeTable::new();
        table.launch_timeout = Duration::from_millis(200);
        // `sleep 5 <port>` runs but never binds.
        let err = table.ensure_live(&local("x", &["sleep", "5"])).await.unwrap_err();
        assert!(matches!(err, LaunchError::NotReady { .. }), "{err}");
    }

    #[tokio::test]
    async fn remote_probe() {
        let server = net::serve(net::bind_loopback(0).await.unwrap(), |_, _| async {
            net::response(http::StatusCode::NOT_FOUND, "")
        });
        let url = Url::parse(&format!("http://{}/svc", server.local_addr())).unwrap();
        let desc = ServiceDescriptor {
            id: "remote".into(),
            launcher: Launcher::Remote { url: url.clone() },
            presentation: ServiceName::new().with("a", 1),
        };
        let table = RuntimeTable::new();
        assert_eq!(table.ensure_live(&desc).await.unwrap(), Endpoint::Remote(url));
        drop(server);
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert!(matches!(
            table.ensure_live(&desc).await,
            Err(LaunchError::Unreachable { .. })
        ));
    }
}
