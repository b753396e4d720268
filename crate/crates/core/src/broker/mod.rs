//! The per-user Broker: yellow/white-pages naming over the descriptor
//! catalog, handle minting and resolution, and on-demand service launching.
//!
//! Every answer to a naming or resolve call is a 313 redirection. Listing
//! and resolution results go back to the SP callback in `Location`; a
//! resolved handle yields `Location: :<ref>` with the service endpoint in
//! `PSvc-Service`, resuming the proxy's on-hold call.

mod endpoint;
mod handle;
mod policy;
mod runtime;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use http::{HeaderValue, Method, Request, Response, StatusCode};
use thiserror::Error;
use url::Url;

pub use endpoint::{
    endpoint_path, read_endpoint_file, remove_endpoint_file, write_endpoint_file, EndpointFileError, ENDPOINT_FILE,
};
pub use handle::{HandleError, HandleKey, HandlePlaintext};
pub use policy::{AccessPolicy, BrokerSettings, PolicyError, PolicyMode, POLICY_FILE};
pub use runtime::{
    Endpoint, LaunchError, PortAllocator, RuntimeRecord, RuntimeTable, ServiceState, DEFAULT_LAUNCH_TIMEOUT,
    DEFAULT_PROBE_TIMEOUT,
};

use crate::net::{self, Server};
use crate::protocol::{
    header_text, BrokerResult, PsvcError, PsvcStatus, ServiceHandle, WhiteQuery, WhiteResolution, YellowQuery,
    PSVC_CALLBACK, PSVC_ERROR, PSVC_SERVICE,
};
use crate::registry::{self, Catalog, Diagnostic, RegistryError, ResolveError, ServiceDescriptor};

pub const PATH_YELLOW: &str = "/yellow";
pub const PATH_WHITE: &str = "/white";
pub const PATH_RESOLVE: &str = "/resolve";
pub const PATH_RELOAD: &str = "/reload";
/// Query parameter carrying the proxy's pending-call reference.
pub const REF_PARAM: &str = "ref";

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Endpoint(#[from] EndpointFileError),
    #[error("cannot listen: {0}")]
    Listen(#[from] std::io::Error),
}

/// A 313 redirection produced by the Broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerReply {
    pub location: String,
    pub service: Option<String>,
    pub error: Option<PsvcError>,
}

impl BrokerReply {
    fn ok(location: impl Into<String>, service: String) -> Self {
        Self {
            location: location.into(),
            service: Some(service),
            error: None,
        }
    }

    fn err(location: impl Into<String>, error: PsvcError) -> Self {
        Self {
            location: location.into(),
            service: None,
            error: Some(error),
        }
    }

    pub fn into_response(self) -> Response<Bytes> {
        let mut r = net::response(PsvcStatus::BrokerResult.status(), Bytes::new());
        net::set_reason(&mut r, PsvcStatus::BrokerResult.reason());
        let headers = r.headers_mut();
        if let Ok(v) = HeaderValue::from_str(&self.location) {
            headers.insert(http::header::LOCATION, v);
        }
        if let Some(v) = self.service.and_then(|s| HeaderValue::from_str(&s).ok()) {
            headers.insert(PSVC_SERVICE, v);
        }
        if let Some(e) = self.error {
            headers.insert(PSVC_ERROR, HeaderValue::from_static(e.as_str()));
        }
        r
    }
}

/// Authority of the SP named by a `Referer` value. A bare `host:port` is
/// accepted as is.
pub fn sp_host_from_referer(referer: Option<&str>) -> String {
    let Some(referer) = referer.map(str::trim) else {
        return String::new();
    };
    Url::parse(referer)
        .ok()
        .and_then(|u| net::authority_of(&u))
        .unwrap_or_else(|| referer.to_owned())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct Broker {
    ps_dir: PathBuf,
    catalog: RwLock<Arc<Catalog>>,
    settings: RwLock<Arc<BrokerSettings>>,
    key: HandleKey,
    runtime: RuntimeTable,
}

impl Broker {
    pub fn new(catalog: Catalog, settings: BrokerSettings) -> Self {
        Self::with_runtime(catalog, settings, RuntimeTable::new())
    }

    pub fn with_runtime(catalog: Catalog, settings: BrokerSettings, runtime: RuntimeTable) -> Self {
        Self {
            ps_dir: catalog.source_dir().to_owned(),
            catalog: RwLock::new(Arc::new(catalog)),
            settings: RwLock::new(Arc::new(settings)),
            key: HandleKey::generate(),
            runtime,
        }
    }

    /// Loads the catalog and `policy.json` from a `.PS` directory.
    pub fn open(ps_dir: &Path) -> Result<(Self, Vec<Diagnostic>), BrokerError> {
        let (catalog, diagnostics) = registry::load_catalog(ps_dir)?;
        let settings = BrokerSettings::load(ps_dir)?;
        Ok((Self::new(catalog, settings), diagnostics))
    }

    /// Re-reads the directory and swaps in the new catalog and settings.
    pub fn reload(&self) -> Result<Vec<Diagnostic>, BrokerError> {
        let (catalog, diagnostics) = registry::load_catalog(&self.ps_dir)?;
        let settings = BrokerSettings::load(&self.ps_dir)?;
        *self.catalog.write().expect("catalog lock poisoned") = Arc::new(catalog);
        *self.settings.write().expect("settings lock poisoned") = Arc::new(settings);
        Ok(diagnostics)
    }

    pub fn ps_dir(&self) -> &Path {
        &self.ps_dir
    }

    pub fn catalog(&self) -> Arc<Catalog> {
        self.catalog.read().expect("catalog lock poisoned").clone()
    }

    pub fn settings(&self) -> Arc<BrokerSettings> {
        self.settings.read().expect("settings lock poisoned").clone()
    }

    pub fn runtime(&self) -> &RuntimeTable {
        &self.runtime
    }

    /// Presentation attributes of every policy-permitted match, id-sorted.
    pub fn yellow_pages(&self, query: &YellowQuery, sp_host: &str) -> BrokerResult {
        let catalog = self.catalog();
        let settings = self.settings();
        let response = catalog
            .list_matching_where(query, |d| settings.policy.allows(sp_host, &d.id))
            .into_iter()
            .map(|d| d.presentation.clone())
            .collect();
        BrokerResult::YellowPages {
            request: query.clone(),
            response,
        }
    }

    pub fn white_pages(&self, query: &WhiteQuery, sp_host: &str) -> Result<BrokerResult, PsvcError> {
        let catalog = self.catalog();
        let settings = self.settings();
        let found = catalog
            .resolve_unique_where(query, |d| settings.policy.allows(sp_host, &d.id))
            .map_err(|e| match e {
                ResolveError::NoMatch => PsvcError::Service,
                ResolveError::Ambiguous(_) => PsvcError::Ambiguous,
            })?;
        Ok(BrokerResult::WhitePages {
            request: query.clone(),
            response: Some(WhiteResolution {
                service: found.presentation.clone(),
                handle: self.mint_handle(sp_host, &found.id),
            }),
        })
    }

    pub fn mint_handle(&self, sp_host: &str, descriptor_id: &str) -> ServiceHandle {
        self.key.mint(&HandlePlaintext {
            requester_host: sp_host.to_owned(),
            descriptor_id: descriptor_id.to_owned(),
            mint_time_ms: now_ms(),
        })
    }

    /// Opens a handle and checks it may be used by `caller_host` now. Every
    /// failure is `handle`.
    pub fn open_handle(&self, handle: &ServiceHandle, caller_host: &str) -> Result<ServiceDescriptor, PsvcError> {
        let plain = self.key.open(handle).map_err(|_| PsvcError::Handle)?;
        let settings = self.settings();
        if settings.bind_handles_to_requester && plain.requester_host != caller_host {
            return Err(PsvcError::Handle);
        }
        if let Some(ttl) = settings.handle_ttl {
            if now_ms().saturating_sub(plain.mint_time_ms) > ttl.as_millis() as u64 {
                return Err(PsvcError::Handle);
            }
        }
        if !settings.policy.allows(caller_host, &plain.descriptor_id) {
            return Err(PsvcError::Handle);
        }
        self.catalog()
            .get(&plain.descriptor_id)
            .cloned()
            .ok_or(PsvcError::Handle)
    }

    pub async fn resolve(&self, handle: &ServiceHandle, caller_host: &str) -> Result<Endpoint, PsvcError> {
        let desc = self.open_handle(handle, caller_host)?;
        self.runtime.ensure_live(&desc).await.map_err(|e| {
            tracing::warn!(service = %desc.id, error = %e, "service not available");
            PsvcError::Service
        })
    }

    pub fn serve_yellow(&self, query: &YellowQuery, sp_host: &str, callback: &Url) -> BrokerReply {
        let result = self.yellow_pages(query, sp_host);
        BrokerReply::ok(callback.as_str(), crate::protocol::encode_broker_result(&result))
    }

    pub fn serve_white(&self, query: &WhiteQuery, sp_host: &str, callback: &Url) -> BrokerReply {
        match self.white_pages(query, sp_host) {
            Ok(result) => BrokerReply::ok(callback.as_str(), crate::protocol::encode_broker_result(&result)),
            Err(e) => BrokerReply::err(callback.as_str(), e),
        }
    }

    pub async fn resolve_handle(&self, handle: &ServiceHandle, caller_host: &str, pending_ref: &str) -> BrokerReply {
        let location = format!(":{pending_ref}");
        match self.resolve(handle, caller_host).await {
            Ok(endpoint) => BrokerReply::ok(location, endpoint.to_string()),
            Err(e) => BrokerReply::err(location, e),
        }
    }

    /// HTTP front end: `HEAD /yellow`, `HEAD /white`, `HEAD /resolve?ref=..`
    /// and `POST /reload`.
    pub async fn handle_request(&self, req: Request<Bytes>) -> Response<Bytes> {
        let path = req.uri().path();
        let naming = matches!(*req.method(), Method::HEAD | Method::GET);
        match (path, naming) {
            (PATH_YELLOW | PATH_WHITE, true) => self.handle_naming(&req),
            (PATH_RESOLVE, true) => self.handle_resolve(&req).await,
            (PATH_RELOAD, false) if req.method() == Method::POST => match self.reload() {
                Ok(diags) => net::text_response(
                    StatusCode::OK,
                    format!("{} services, {} skipped\n", self.catalog().len(), diags.len()),
                ),
                Err(e) => net::text_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            },
            (PATH_YELLOW | PATH_WHITE | PATH_RESOLVE | PATH_RELOAD, _) => {
                net::text_response(StatusCode::METHOD_NOT_ALLOWED, "method not allowed\n")
            }
            _ => net::text_response(StatusCode::NOT_FOUND, "unknown Broker operation\n"),
        }
    }

    fn handle_naming(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let headers = req.headers();
        let Some(callback) = header_text(headers, PSVC_CALLBACK).and_then(|c| Url::parse(c.trim()).ok()) else {
            return bad_call("missing or invalid PSvc-Callback");
        };
        let sp_host = sp_host_from_referer(header_text(headers, http::header::REFERER.as_str()).as_deref());
        let payload = header_text(headers, PSVC_SERVICE).unwrap_or_default();
        let reply = if req.uri().path() == PATH_YELLOW {
            match YellowQuery::parse(&payload) {
                Ok(q) => self.serve_yellow(&q, &sp_host, &callback),
                Err(_) => BrokerReply::err(callback.as_str(), PsvcError::Parameters),
            }
        } else {
            match WhiteQuery::parse(&payload) {
                Ok(q) => self.serve_white(&q, &sp_host, &callback),
                Err(_) => BrokerReply::err(callback.as_str(), PsvcError::Parameters),
            }
        };
        tracing::debug!(path = req.uri().path(), %sp_host, error = ?reply.error, "naming call");
        reply.into_response()
    }

    async fn handle_resolve(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let Some(pending_ref) = net::query_param(req.uri(), REF_PARAM).filter(|r| valid_ref(r)) else {
            return bad_call("missing or invalid ref");
        };
        let headers = req.headers();
        let caller = sp_host_from_referer(header_text(headers, http::header::REFERER.as_str()).as_deref());
        let reply = match header_text(headers, PSVC_SERVICE).map(|h| h.trim().to_owned()) {
            Some(text) if !text.is_empty() => {
                self.resolve_handle(&ServiceHandle::from_text(text), &caller, &pending_ref)
                    .await
            }
            _ => BrokerReply::err(format!(":{pending_ref}"), PsvcError::Parameters),
        };
        tracing::debug!(%caller, error = ?reply.error, "resolve call");
        reply.into_response()
    }

    /// Serves on 127.0.0.1:`port` (0 picks one) and, when asked, advertises
    /// the port in `broker.ept`.
    pub async fn listen(self: Arc<Self>, port: u16, advertise: bool) -> Result<RunningBroker, BrokerError> {
        let listener = net::bind_loopback(port).await?;
        let broker = self.clone();
        let server = net::serve(listener, move |req, _peer| {
            let broker = broker.clone();
            async move { broker.handle_request(req).await }
        });
        let ept = if advertise {
            let path = endpoint_path(&self.ps_dir);
            write_endpoint_file(&path, server.port())?;
            Some(path)
        } else {
            None
        };
        tracing::info!(addr = %server.local_addr(), services = self.catalog().len(), "broker listening");
        Ok(RunningBroker {
            broker: self,
            server: Some(server),
            ept,
        })
    }
}

fn valid_ref(r: &str) -> bool {
    !r.is_empty() && r.len() <= 128 && r.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn bad_call(reason: &str) -> Response<Bytes> {
    let mut r = net::text_response(StatusCode::BAD_REQUEST, format!("{reason}\n"));
    r.headers_mut()
        .insert(PSVC_ERROR, HeaderValue::from_static(PsvcError::Parameters.as_str()));
    r
}

/// A Broker serving HTTP. Dropping it stops the server, withdraws
/// `broker.ept` and kills launched services.
pub struct RunningBroker {
    broker: Arc<Broker>,
    server: Option<Server>,
    ept: Option<PathBuf>,
}

impl RunningBroker {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.as_ref().expect("server present until drop").local_addr()
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub async fn shutdown(mut self) {
        self.withdraw();
        self.broker.runtime.shutdown().await;
    }

    /// Serves until the process is interrupted.
    pub async fn run_until_ctrl_c(mut self) {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("broker shutting down");
        self.withdraw();
        self.broker.runtime.shutdown().await;
    }

    fn withdraw(&mut self) {
        let port = self.server.take().map(|s| s.port());
        if let (Some(path), Some(port)) = (self.ept.take(), port) {
            remove_endpoint_file(&path, port);
        }
    }
}

impl Drop for RunningBroker {
    fn drop(&mut self) {
        self.withdraw();
    }
}
