//! Scenario harness: a throwaway `.PS` directory, an in-process Broker,
//! proxy and SP, and the demo service launched on demand as a separate
//! `psvc demo service` process.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use http::{Method, StatusCode};
use serde_json::json;
use tempfile::TempDir;
use thiserror::Error;
use url::Url;

use super::{Browser, BrowserError, CallbackObservation, DemoSp, Page, SpMode, DEMO_IDENTITY, SESSION_COOKIE};
use crate::broker::{Broker, RunningBroker, RuntimeRecord};
use crate::net::{self, Server};
use crate::protocol::BrokerResult;
use crate::proxy::{BrokerLocator, Proxy, ProxyConfig};
use crate::registry::PS_DIR_NAME;
use crate::transcript::{check_phases, parse_phases, Actor, Direction, Event, Transcript};

pub const CC_SERVICE_ID: &str = "CCPersonalService";
pub const HAPPY_PHASES: &str = include_str!("../../scenarios/eid-auth-happy.phases");
pub const SCENARIOS: [&str; 9] = [
    "eid-auth-happy",
    "rerun",
    "broker-down",
    "error-parameters",
    "error-ambiguous",
    "error-handle",
    "error-service",
    "malicious-313",
    "yellow-pages",
];
const SCENARIO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Browser(#[from] BrowserError),
    #[error("scenario timed out after {0:?}")]
    Timeout(Duration),
}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        Self::Setup(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogVariant {
    Standard,
    /// A second service matching the demo SP's query.
    Ambiguous,
    /// The authentication service's command does not exist.
    Unlaunchable,
}

#[derive(Debug, Clone)]
pub struct DeploymentSpec {
    /// The `psvc` executable, used to launch the demo service.
    pub psvc_exe: PathBuf,
    pub sp_mode: SpMode,
    pub broker: bool,
    pub catalog: CatalogVariant,
}

impl DeploymentSpec {
    pub fn new(psvc_exe: impl Into<PathBuf>) -> Self {
        Self {
            psvc_exe: psvc_exe.into(),
            sp_mode: SpMode::Normal,
            broker: true,
            catalog: CatalogVariant::Standard,
        }
    }
}

fn descriptor(dir: &Path, cmd: &[String], device_name: &str) -> String {
    let d = json!({
        "configuration": { "dir": dir, "cmd": cmd },
        "presentation": {
            "Purpose": "authentication",
            "Credentials": "digital signature",
            "Protocol": "certificate + digital signature",
            "Device": "Portuguese eID",
            "Device name": device_name,
        }
    });
    serde_json::to_string_pretty(&d).expect("descriptor serializes")
}

pub struct Deployment {
    home: TempDir,
    ps_dir: PathBuf,
    broker: Option<RunningBroker>,
    proxy: Arc<Proxy>,
    proxy_server: Server,
    pub sp: DemoSp,
    pub transcript: Arc<Transcript>,
}

impl Deployment {
    pub async fn start(spec: DeploymentSpec) -> Result<Self, ScenarioError> {
        let home = tempfile::Builder::new().prefix("psvc-demo-").tempdir()?;
        let ps_dir = home.path().join(PS_DIR_NAME);
        std::fs::create_dir_all(&ps_dir)?;

        let service_cmd = match spec.catalog {
            CatalogVariant::Unlaunchable => vec![home.path().join("no-such-service").display().to_string()],
            _ => vec![spec.psvc_exe.display().to_string(), "demo".into(), "service".into()],
        };
        std::fs::write(
            ps_dir.join(format!("{CC_SERVICE_ID}.psd")),
            descriptor(home.path(), &service_cmd, "Cartão de Cidadão"),
        )?;
        if spec.catalog == CatalogVariant::Ambiguous {
            std::fs::write(
                ps_dir.join("CCBackupService.psd"),
                descriptor(home.path(), &service_cmd, "Cartão de Cidadão (backup reader)"),
            )?;
        }

        let broker = if spec.broker {
            let (broker, diagnostics) = Broker::open(&ps_dir).map_err(|e| ScenarioError::Setup(e.to_string()))?;
            if let Some(d) = diagnostics.first() {
                return Err(ScenarioError::Setup(d.to_string()));
            }
            let running = Arc::new(broker)
                .listen(0, true)
                .await
                .map_err(|e| ScenarioError::Setup(e.to_string()))?;
            Some(running)
        } else {
            None
        };

        let transcript = Arc::new(Transcript::new());
        let config = ProxyConfig::new(BrokerLocator::EndpointFile {
            ps_dir: ps_dir.clone(),
            autolaunch: false,
        });
        let proxy = Arc::new(Proxy::new(config).with_transcript(transcript.clone()));
        let proxy_server = proxy.clone().listen(SocketAddr::from(([127, 0, 0, 1], 0))).await?;
        let sp = DemoSp::start(0, spec.sp_mode).await?;
        Ok(Self {
            home,
            ps_dir,
            broker,
            proxy,
            proxy_server,
            sp,
            transcript,
        })
    }

    pub fn home(&self) -> &Path {
        self.home.path()
    }

    pub fn ps_dir(&self) -> &Path {
        &self.ps_dir
    }

    pub fn proxy_addr(&self) -> SocketAddr {
        self.proxy_server.local_addr()
    }

    pub fn proxy(&self) -> &Arc<Proxy> {
        &self.proxy
    }

    pub fn broker(&self) -> Option<&Arc<Broker>> {
        self.broker.as_ref().map(|b| b.broker())
    }

    pub fn broker_addr(&self) -> Option<SocketAddr> {
        self.broker.as_ref().map(|b| b.local_addr())
    }

    pub fn browser(&self) -> Browser {
        Browser::new(self.proxy_addr())
    }

    pub async fn service_record(&self) -> Option<RuntimeRecord> {
        self.broker()?.runtime().record(CC_SERVICE_ID).await
    }

    /// Browses to the SP's protected resource and clicks through every form
    /// on the way, the way a user confirming the dialog would.
    pub async fn authenticate(&self, browser: &mut Browser) -> Result<Page, BrowserError> {
        let mut page = browser.get(&self.sp.url("/resource")).await?;
        for _ in 0..4 {
            let Some(form) = page.forms().into_iter().next() else {
                break;
            };
            page = browser.submit(&form).await?;
        }
        Ok(page)
    }

    pub async fn shutdown(mut self) {
        if let Some(b) = self.broker.take() {
            b.shutdown().await;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub checks: Vec<Check>,
    pub transcript: String,
}

impl ScenarioReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            checks: Vec::new(),
            transcript: String::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_owned(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn count(events: &[Event], actor: Actor, method: &str, path: &str) -> usize {
    events
        .iter()
        .filter(|e| e.actor == actor && e.direction == Direction::Request && e.method == method)
        .filter(|e| e.path.split('?').next() == Some(path))
        .count()
}

fn position(events: &[Event], actor: Actor, method: &str, path: &str) -> Option<usize> {
    events.iter().position(|e| {
        e.actor == actor && e.direction == Direction::Request && e.method == method && e.path.split('?').next() == Some(path)
    })
}

/// Statuses of 313 responses from anyone other than the Broker.
fn foreign_313(events: &[Event]) -> Vec<Actor> {
    events
        .iter()
        .filter(|e| e.direction == Direction::Response && e.status == Some(313) && e.actor != Actor::Broker)
        .map(|e| e.actor)
        .collect()
}

fn authenticated(page: &Page) -> bool {
    page.status == StatusCode::OK && page.text().contains(&format!("Welcome, {DEMO_IDENTITY}"))
}

fn last_error(obs: &[CallbackObservation]) -> Option<String> {
    obs.iter().rev().find_map(|o| o.psvc_error.clone())
}

pub async fn run_scenario(name: &str, psvc_exe: &Path) -> Result<ScenarioReport, ScenarioError> {
    if !SCENARIOS.contains(&name) {
        return Err(ScenarioError::Unknown(name.to_owned()));
    }
    tokio::time::timeout(SCENARIO_TIMEOUT, run(name, psvc_exe))
        .await
        .map_err(|_| ScenarioError::Timeout(SCENARIO_TIMEOUT))?
}

async fn run(name: &str, exe: &Path) -> Result<ScenarioReport, ScenarioError> {
    let mut report = ScenarioReport::new(name);
    let mut spec = DeploymentSpec::new(exe);
    let victim = Victim::start().await?;
    match name {
        "broker-down" => spec.broker = false,
        "error-parameters" => spec.sp_mode = SpMode::Malformed,
        "error-ambiguous" => spec.catalog = CatalogVariant::Ambiguous,
        "error-handle" => spec.sp_mode = SpMode::Tampered,
        "error-service" => spec.catalog = CatalogVariant::Unlaunchable,
        "malicious-313" => spec.sp_mode = SpMode::Malicious313(victim.url()),
        "yellow-pages" => spec.sp_mode = SpMode::Yellow,
        _ => {}
    }
    let d = Deployment::start(spec).await?;
    let mut browser = d.browser();
    let page = d.authenticate(&mut browser).await?;
    let obs = d.sp.observations();

    match name {
        "eid-auth-happy" => {
            report.check("resource served after authentication", authenticated(&page), page.text());
            let cookie = browser
                .cookies_for(d.sp.base_url())
                .is_some_and(|c| c.contains_key(SESSION_COOKIE));
            report.check("session cookie set", cookie, "");
            let events = d.transcript.events();
            let phases = parse_phases(HAPPY_PHASES).expect("golden phases parse");
            let order = check_phases(&events, &phases);
            report.check("phase order", order.is_ok(), order.err().map(|e| e.to_string()).unwrap_or_default());
            let white = count(&events, Actor::Broker, "HEAD", "/white");
            let resolve = count(&events, Actor::Broker, "HEAD", "/resolve");
            report.check("one white-pages call", white == 1, format!("{white} calls"));
            report.check("one resolve call", resolve == 1, format!("{resolve} calls"));
            let resolve_at = position(&events, Actor::Broker, "HEAD", "/resolve");
            let ordered = position(&events, Actor::Broker, "HEAD", "/white") < resolve_at
                && events
                    .iter()
                    .skip(resolve_at.unwrap_or(usize::MAX))
                    .any(|e| e.actor == Actor::Service && e.direction == Direction::Request);
            report.check("white, then resolve, then service", ordered, "");
            let foreign = foreign_313(&events);
            report.check("313 only from the Broker", foreign.is_empty(), format!("{foreign:?}"));
            let launches = d.service_record().await.map(|r| r.launch_count);
            report.check("service spawned once", launches == Some(1), format!("{launches:?}"));

            let mark = d.transcript.events().len();
            let again = browser.get(&d.sp.url("/resource")).await?;
            let events = d.transcript.events();
            let quiet = events[mark..]
                .iter()
                .all(|e| e.actor != Actor::Broker && e.actor != Actor::Service);
            report.check("cookie short-circuits authentication", authenticated(&again) && quiet, again.text());
        }
        "rerun" => {
            report.check("first run authenticated", authenticated(&page), page.text());
            let first = d.service_record().await;
            let mut second_browser = d.browser();
            let page = d.authenticate(&mut second_browser).await?;
            report.check("second run authenticated", authenticated(&page), page.text());
            let second = d.service_record().await;
            let launches = second.as_ref().map(|r| r.launch_count);
            report.check("no respawn", launches == Some(1), format!("{launches:?}"));
            let same = first.map(|r| r.state) == second.map(|r| r.state);
            report.check("endpoint reused", same, "");
        }
        "broker-down" => {
            let empty = obs.iter().any(|o| {
                matches!(o.result(), Some(BrokerResult::WhitePages { response: None, .. })) && o.psvc_error.is_none()
            });
            report.check("SP received an empty white-pages result", empty, format!("{obs:?}"));
            report.check("user sees a diagnostic", !page.diagnostics().is_empty(), format!("{:?}", page.headers));
            let broker_events = d.transcript.events().iter().filter(|e| e.actor == Actor::Broker).count();
            report.check("no Broker traffic", broker_events == 0, format!("{broker_events} events"));
        }
        "error-parameters" | "error-ambiguous" | "error-handle" | "error-service" => {
            let expected = name.trim_start_matches("error-");
            let got = last_error(&obs);
            report.check(
                &format!("SP callback received PSvc-Error: {expected}"),
                got.as_deref() == Some(expected),
                format!("{obs:?}"),
            );
            report.check("not authenticated", !authenticated(&page), "");
        }
        "malicious-313" => {
            report.check("browser got a gateway error", page.status == StatusCode::BAD_GATEWAY, page.status.to_string());
            let hits = victim.hits();
            report.check("no request reached the 313 target", hits == 0, format!("{hits} requests"));
            let events = d.transcript.events();
            let after = events
                .iter()
                .skip_while(|e| e.status != Some(313))
                .skip(1)
                .any(|e| e.direction == Direction::Request && e.actor != Actor::Proxy);
            report.check("proxy stopped at the 313", !after, "");
        }
        "yellow-pages" => {
            let listed = obs.iter().find_map(|o| match o.result() {
                Some(BrokerResult::YellowPages { response, .. }) => Some(response),
                _ => None,
            });
            let ok = listed.as_ref().is_some_and(|l| {
                l.len() == 1 && l[0].get("Device name") == Some(&json!("Cartão de Cidadão"))
            });
            report.check("SP received the listing", ok, format!("{listed:?}"));
            let resolve = count(&d.transcript.events(), Actor::Broker, "HEAD", "/resolve");
            report.check("no handle resolution", resolve == 0, "");
        }
        _ => unreachable!("scenario names are checked up front"),
    }
    report.transcript = d.transcript.render();
    d.shutdown().await;
    Ok(report)
}

/// A server that must never be contacted; counts requests.
struct Victim {
    server: Server,
    hits: Arc<AtomicUsize>,
}

impl Victim {
    async fn start() -> std::io::Result<Self> {
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        let server = net::serve(net::bind_loopback(0).await?, move |req, _| {
            h.fetch_add(1, Ordering::SeqCst);
            let method = req.method().clone();
            async move {
                let status = if method == Method::GET { StatusCode::OK } else { StatusCode::NO_CONTENT };
                net::text_response(status, "victim\n")
            }
        });
        Ok(Self { server, hits })
    }

    fn url(&self) -> Url {
        Url::parse(&format!("http://{}/transfer?amount=1000", self.server.local_addr())).expect("valid URL")
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}
