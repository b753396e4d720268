//! The browser stand-in: a plain HTTP/1.1 forward proxy that advertises
//! PSvc support, turns 310/311/312 responses into Broker calls and
//! personal-service requests, and refuses 313 from anyone but the Broker.
//!
//! A single browser transaction may chain several PSvc operations (a
//! white-pages lookup whose callback answers with a 312, say). The proxy
//! follows the chain up to `max_chain` operations and relays the first
//! ordinary response to the browser.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderName, HeaderValue};
use http::{Method, Request, Response, StatusCode};
use tokio::net::TcpStream;
use tokio::process::{Child, Command};
use url::Url;

use crate::broker::{endpoint_path, read_endpoint_file, Endpoint, PATH_RESOLVE, PATH_WHITE, PATH_YELLOW, REF_PARAM};
use crate::net::{self, NetError, Server};
use crate::protocol::{
    encode_broker_result, header_text, parse_directive, BrokerResult, DirectiveKind, PsvcDirective, PsvcError,
    PsvcStatus, ServiceHandle, PSVC_CALLBACK, PSVC_ERROR, PSVC_INVOCATION, PSVC_SERVICE, PSVC_VERSION, VERSION,
};
use crate::registry::{load_broker_descriptor, Launcher};
use crate::transcript::{salient_headers, Actor, Direction, Event, Transcript};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:3128";
pub const DEFAULT_MAX_CHAIN: usize = 8;
/// Added to browser-visible responses when something went wrong on the way.
pub const DIAGNOSTIC_HEADER: &str = "x-psvc-diagnostic";

/// How the proxy finds the Broker.
#[derive(Debug, Clone)]
pub enum BrokerLocator {
    Fixed(SocketAddr),
    /// Read `broker.ept` from a `.PS` directory; optionally start the Broker
    /// from `broker.psd` when the file is missing or stale.
    EndpointFile { ps_dir: PathBuf, autolaunch: bool },
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub broker: BrokerLocator,
    pub max_chain: usize,
    pub upstream_timeout: Duration,
    /// Covers a resolve that launches the service.
    pub broker_timeout: Duration,
    pub broker_launch_timeout: Duration,
}

impl ProxyConfig {
    pub fn new(broker: BrokerLocator) -> Self {
        Self {
            broker,
            max_chain: DEFAULT_MAX_CHAIN,
            upstream_timeout: Duration::from_secs(30),
            broker_timeout: Duration::from_secs(15),
            broker_launch_timeout: Duration::from_secs(5),
        }
    }
}

/// A 312 waiting for the Broker to resolve its handle.
#[derive(Debug, Clone)]
struct PendingCall {
    sp_url: Url,
}

/// Per-transaction state.
struct Txn {
    origin: Option<String>,
    cookie: Option<HeaderValue>,
    set_cookies: Vec<HeaderValue>,
    diagnostics: Vec<String>,
}

impl Txn {
    fn diagnose(&mut self, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!("{message}");
        self.diagnostics.push(message);
    }
}

type Step = Result<(Url, Response<Bytes>), Response<Bytes>>;

pub struct Proxy {
    config: ProxyConfig,
    pending: Mutex<HashMap<String, PendingCall>>,
    service_hosts: Mutex<HashSet<String>>,
    transcript: Option<Arc<Transcript>>,
    broker_child: tokio::sync::Mutex<Option<Child>>,
}

struct PendingGuard<'a> {
    table: &'a Mutex<HashMap<String, PendingCall>>,
    key: String,
}

impl Drop for PendingGuard<'_> {
    fn drop(&mut self) {
        self.table.lock().expect("pending lock poisoned").remove(&self.key);
    }
}

fn new_ref() -> String {
    URL_SAFE_NO_PAD.encode(rand::random::<[u8; 16]>())
}

fn path_of(url: &Url) -> String {
    match url.query() {
        Some(q) => format!("{}?{q}", url.path()),
        None => url.path().to_owned(),
    }
}

fn diagnostic(status: StatusCode, message: &str) -> Response<Bytes> {
    let mut r = net::text_response(status, format!("{message}\n"));
    if let Ok(v) = HeaderValue::from_str(message) {
        r.headers_mut().insert(DIAGNOSTIC_HEADER, v);
    }
    r
}

fn header_value(text: &str) -> Option<HeaderValue> {
    HeaderValue::from_str(text).ok()
}

/// Request URL for a resolved service: its endpoint followed by the SP's
/// path and query.
pub fn service_url(endpoint: &Endpoint, parameters: Option<&str>) -> Option<Url> {
    let base = endpoint.base_url();
    Url::parse(&format!("{}{}", base.as_str().trim_end_matches('/'), parameters.unwrap_or("/"))).ok()
}

/// The request a 312 becomes: every end-to-end header of the SP response
/// and its body, plus `Referer` naming the SP and the invocation marker.
pub fn service_request(directive: &PsvcDirective, url: &Url, sp_url: &Url) -> Request<Bytes> {
    let mut headers = HeaderMap::new();
    for (n, v) in &directive.carried_headers {
        headers.append(n.clone(), v.clone());
    }
    net::strip_hop_by_hop(&mut headers);
    for name in [header::HOST, header::REFERER, header::CONTENT_LENGTH] {
        headers.remove(name);
    }
    if let Some(v) = header_value(sp_url.as_str()) {
        headers.insert(header::REFERER, v);
    }
    headers.insert(PSVC_INVOCATION, HeaderValue::from_static("1"));
    headers.insert(PSVC_VERSION, HeaderValue::from_static(VERSION));
    let mut req = Request::new(directive.carried_body.clone());
    *req.method_mut() = directive.method.clone();
    *req.uri_mut() = net::origin_form(url);
    *req.headers_mut() = headers;
    req
}

impl Proxy {
    pub fn new(config: ProxyConfig) -> Self {
        Self {
            config,
            pending: Mutex::new(HashMap::new()),
            service_hosts: Mutex::new(HashSet::new()),
            transcript: None,
            broker_child: tokio::sync::Mutex::new(None),
        }
    }

    pub fn with_transcript(mut self, transcript: Arc<Transcript>) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn pending_calls(&self) -> usize {
        self.pending.lock().expect("pending lock poisoned").len()
    }

    pub async fn listen(self: Arc<Self>, addr: SocketAddr) -> std::io::Result<Server> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let proxy = self.clone();
        let server = net::serve(listener, move |req, _peer| {
            let proxy = proxy.clone();
            async move { proxy.handle(req).await }
        });
        tracing::info!(addr = %server.local_addr(), "proxy listening");
        Ok(server)
    }

    fn record(&self, actor: Actor, direction: Direction, method: &Method, path: String, status: Option<u16>, headers: &HeaderMap) {
        if let Some(t) = &self.transcript {
            t.record(Event {
                actor,
                direction,
                method: method.to_string(),
                path,
                status,
                headers: salient_headers(headers),
            });
        }
    }

    /// Handles one browser request.
    pub async fn handle(&self, req: Request<Bytes>) -> Response<Bytes> {
        let method = req.method().clone();
        let path = req.uri().to_string();
        self.record(Actor::Proxy, Direction::Request, &method, path.clone(), None, req.headers());
        let response = self.transact(req).await;
        self.record(Actor::Proxy, Direction::Response, &method, path, Some(response.status().as_u16()), response.headers());
        response
    }

    async fn transact(&self, req: Request<Bytes>) -> Response<Bytes> {
        if req.method() == Method::CONNECT {
            return diagnostic(StatusCode::NOT_IMPLEMENTED, "CONNECT tunnels are not supported");
        }
        let Some(url) = req.uri().scheme().and(Url::parse(&req.uri().to_string()).ok()) else {
            return diagnostic(StatusCode::BAD_REQUEST, "proxy requests need an absolute URI");
        };
        if url.scheme() != "http" {
            return diagnostic(StatusCode::NOT_IMPLEMENTED, "only http URLs are proxied");
        }
        let psvc = matches!(*req.method(), Method::GET | Method::POST);
        let (parts, body) = req.into_parts();
        let mut txn = Txn {
            origin: net::authority_of(&url),
            cookie: parts.headers.get(header::COOKIE).cloned(),
            set_cookies: Vec::new(),
            diagnostics: Vec::new(),
        };

        let mut headers = parts.headers;
        net::strip_hop_by_hop(&mut headers);
        headers.remove(header::HOST);
        headers.remove(PSVC_VERSION);
        if psvc {
            headers.insert(PSVC_VERSION, HeaderValue::from_static(VERSION));
        }
        let mut upstream = Request::new(body);
        *upstream.method_mut() = parts.method;
        *upstream.headers_mut() = headers;

        let mut current = url;
        let mut response = match self.exchange(&current, upstream).await {
            Ok(r) => r,
            Err(e) => return diagnostic(StatusCode::BAD_GATEWAY, &format!("upstream failed: {e}")),
        };
        let mut operations = 0;
        loop {
            match PsvcStatus::from_code(response.status().as_u16()) {
                Some(PsvcStatus::BrokerResult) => {
                    let from = net::authority_of(&current).unwrap_or_default();
                    tracing::warn!(%from, "refusing 313 from a party other than the Broker");
                    return diagnostic(
                        StatusCode::BAD_GATEWAY,
                        &format!("313 from {from} rejected: only the Broker may redirect with 313"),
                    );
                }
                Some(_) if psvc => {
                    operations += 1;
                    if operations > self.config.max_chain {
                        return diagnostic(
                            StatusCode::LOOP_DETECTED,
                            &format!("more than {} chained PSvc operations", self.config.max_chain),
                        );
                    }
                    txn.set_cookies
                        .extend(response.headers().get_all(header::SET_COOKIE).iter().cloned());
                    match self.intercept(response, &current, &mut txn).await {
                        Ok((next_url, next)) => {
                            current = next_url;
                            response = next;
                        }
                        Err(r) => return finish(r, txn),
                    }
                }
                _ => return finish(response, txn),
            }
        }
    }

    /// Sends a request to an SP or service and records it.
    async fn exchange(&self, url: &Url, req: Request<Bytes>) -> Result<Response<Bytes>, NetError> {
        let actor = match net::authority_of(url) {
            Some(a) if self.service_hosts.lock().expect("hosts lock poisoned").contains(&a) => Actor::Service,
            _ => Actor::Sp,
        };
        let method = req.method().clone();
        self.record(actor, Direction::Request, &method, path_of(url), None, req.headers());
        let result = net::send_to_url(url, req, self.config.upstream_timeout).await;
        match &result {
            Ok(r) => self.record(actor, Direction::Response, &method, path_of(url), Some(r.status().as_u16()), r.headers()),
            Err(e) => tracing::debug!(%url, error = %e, "upstream exchange failed"),
        }
        result
    }

    async fn call_broker(
        &self,
        addr: SocketAddr,
        path: &str,
        headers: &[(&'static str, &str)],
    ) -> Result<Response<Bytes>, NetError> {
        let mut req = Request::head(path).body(Bytes::new()).expect("static request parts");
        let h = req.headers_mut();
        h.insert(PSVC_VERSION, HeaderValue::from_static(VERSION));
        for (name, value) in headers {
            if let Some(v) = header_value(value) {
                h.insert(*name, v);
            }
        }
        let method = Method::HEAD;
        self.record(Actor::Broker, Direction::Request, &method, path.to_owned(), None, req.headers());
        let result = net::send(&addr.to_string(), req, self.config.broker_timeout).await;
        if let Ok(r) = &result {
            self.record(Actor::Broker, Direction::Response, &method, path.to_owned(), Some(r.status().as_u16()), r.headers());
        }
        result
    }

    async fn intercept(&self, response: Response<Bytes>, sp_url: &Url, txn: &mut Txn) -> Step {
        let status = response.status().as_u16();
        let (parts, body) = response.into_parts();
        let callback = header_text(&parts.headers, PSVC_CALLBACK)
            .and_then(|c| Url::parse(c.trim()).ok())
            .filter(|u| u.scheme() == "http");
        match parse_directive(status, &net::header_list(&parts.headers), body) {
            Err(e) => {
                txn.diagnose(format!("malformed {status} from {sp_url}: {e}"));
                match callback {
                    Some(cb) => self.report_error(&cb, PsvcError::Parameters, txn).await,
                    None => Err(diagnostic(StatusCode::BAD_GATEWAY, &format!("malformed {status} response: {e}"))),
                }
            }
            Ok(d) => match &d.kind {
                DirectiveKind::Invoke(handle) => self.handle_invoke(&d, handle, sp_url, txn).await,
                _ => self.handle_listing(&d, sp_url, txn).await,
            },
        }
    }

    /// 310/311: ask the Broker, then POST its result to the SP callback.
    async fn handle_listing(&self, d: &PsvcDirective, sp_url: &Url, txn: &mut Txn) -> Step {
        let callback = d.callback.clone().expect("listing directives carry a callback");
        let (path, payload, empty) = match &d.kind {
            DirectiveKind::YellowPages(q) => (
                PATH_YELLOW,
                q.to_name().to_header_json(),
                BrokerResult::YellowPages {
                    request: q.clone(),
                    response: Vec::new(),
                },
            ),
            DirectiveKind::WhitePages(q) => (
                PATH_WHITE,
                q.attributes().to_header_json(),
                BrokerResult::WhitePages {
                    request: q.clone(),
                    response: None,
                },
            ),
            DirectiveKind::Invoke(_) => unreachable!("invoke handled separately"),
        };
        let reply = match self.broker_addr().await {
            Some(addr) => {
                let headers = [
                    (PSVC_SERVICE, payload.as_str()),
                    (PSVC_CALLBACK, callback.as_str()),
                    ("referer", sp_url.as_str()),
                ];
                self.call_broker(addr, path, &headers).await.ok()
            }
            None => None,
        };
        let Some(reply) = reply.filter(|r| r.status().as_u16() == PsvcStatus::BrokerResult.code()) else {
            txn.diagnose("Broker unavailable; sending an empty result to the SP");
            let empty = encode_broker_result(&empty);
            return self.post_callback(&callback, &[(PSVC_SERVICE, empty.as_str())], txn).await;
        };
        let target = header_text(reply.headers(), header::LOCATION.as_str())
            .and_then(|l| Url::parse(l.trim()).ok())
            .filter(|u| u.scheme() == "http");
        let Some(target) = target else {
            return Err(diagnostic(StatusCode::BAD_GATEWAY, "Broker result without a usable callback location"));
        };
        let service = header_text(reply.headers(), PSVC_SERVICE);
        let error = header_text(reply.headers(), PSVC_ERROR);
        let mut fields = Vec::new();
        if let Some(s) = &service {
            fields.push((PSVC_SERVICE, s.as_str()));
        }
        if let Some(e) = &error {
            fields.push((PSVC_ERROR, e.as_str()));
        }
        self.post_callback(&target, &fields, txn).await
    }

    /// 312: resolve the handle through the Broker, then send the SP's
    /// request to the service.
    async fn handle_invoke(&self, d: &PsvcDirective, handle: &ServiceHandle, sp_url: &Url, txn: &mut Txn) -> Step {
        let Some(addr) = self.broker_addr().await else {
            return self.fail_invoke(d, PsvcError::Service, "Broker unavailable", txn).await;
        };
        let pending_ref = new_ref();
        self.pending
            .lock()
            .expect("pending lock poisoned")
            .insert(pending_ref.clone(), PendingCall { sp_url: sp_url.clone() });
        let _guard = PendingGuard {
            table: &self.pending,
            key: pending_ref.clone(),
        };

        let path = format!("{PATH_RESOLVE}?{REF_PARAM}={pending_ref}");
        let headers = [(PSVC_SERVICE, handle.as_str()), ("referer", sp_url.as_str())];
        let reply = match self.call_broker(addr, &path, &headers).await {
            Ok(r) if r.status().as_u16() == PsvcStatus::BrokerResult.code() => r,
            Ok(r) => {
                let msg = format!("Broker answered resolve with {}", r.status());
                return self.fail_invoke(d, PsvcError::Service, &msg, txn).await;
            }
            Err(e) => return self.fail_invoke(d, PsvcError::Service, &format!("Broker unavailable: {e}"), txn).await,
        };

        let location = header_text(reply.headers(), header::LOCATION.as_str()).unwrap_or_default();
        let Some(returned) = location.trim().strip_prefix(':') else {
            return Err(diagnostic(StatusCode::BAD_GATEWAY, "Broker resolve reply lacks a :ref location"));
        };
        let call = if returned == pending_ref {
            self.pending.lock().expect("pending lock poisoned").remove(returned)
        } else {
            None
        };
        let Some(call) = call else {
            let msg = format!("discarding Broker result for unknown call reference `{returned}`");
            txn.diagnose(msg.clone());
            return Err(diagnostic(StatusCode::BAD_GATEWAY, &msg));
        };

        if let Some(code) = header_text(reply.headers(), PSVC_ERROR) {
            let code = code.trim().parse().unwrap_or(PsvcError::Service);
            return self.fail_invoke(d, code, &format!("Broker could not resolve the handle: {code}"), txn).await;
        }
        let endpoint = header_text(reply.headers(), PSVC_SERVICE).and_then(|t| Endpoint::parse(&t));
        let Some(url) = endpoint.as_ref().and_then(|e| service_url(e, d.parameters.as_deref())) else {
            return self.fail_invoke(d, PsvcError::Service, "Broker returned no usable endpoint", txn).await;
        };
        if url.scheme() != "http" {
            return self.fail_invoke(d, PsvcError::Service, "only http personal services are reachable", txn).await;
        }
        if let Some(a) = net::authority_of(&url) {
            self.service_hosts.lock().expect("hosts lock poisoned").insert(a);
        }
        let req = service_request(d, &url, &call.sp_url);
        match self.exchange(&url, req).await {
            Ok(r) => Ok((url, r)),
            Err(e) => self.fail_invoke(d, PsvcError::Service, &format!("personal service unreachable: {e}"), txn).await,
        }
    }

    async fn fail_invoke(&self, d: &PsvcDirective, code: PsvcError, message: &str, txn: &mut Txn) -> Step {
        txn.diagnose(message);
        match &d.callback {
            Some(cb) => self.report_error(cb, code, txn).await,
            None => Err(diagnostic(StatusCode::BAD_GATEWAY, message)),
        }
    }

    /// POSTs `PSvc-Error: <code>` to an SP callback.
    async fn report_error(&self, callback: &Url, code: PsvcError, txn: &mut Txn) -> Step {
        self.post_callback(callback, &[(PSVC_ERROR, code.as_str())], txn).await
    }

    async fn post_callback(&self, callback: &Url, fields: &[(&'static str, &str)], txn: &mut Txn) -> Step {
        let mut req = Request::post(callback.as_str()).body(Bytes::new()).expect("static request parts");
        let h = req.headers_mut();
        h.insert(PSVC_VERSION, HeaderValue::from_static(VERSION));
        for (name, value) in fields {
            if let Some(v) = header_value(value) {
                h.insert(*name, v);
            }
        }
        if let Some(cookie) = txn.cookie.as_ref().filter(|_| net::authority_of(callback) == txn.origin) {
            h.insert(header::COOKIE, cookie.clone());
        }
        match self.exchange(callback, req).await {
            Ok(r) => Ok((callback.clone(), r)),
            Err(e) => {
                txn.diagnose(format!("SP callback {callback} unreachable: {e}"));
                Err(diagnostic(StatusCode::BAD_GATEWAY, &format!("SP callback unreachable: {e}")))
            }
        }
    }

    async fn broker_addr(&self) -> Option<SocketAddr> {
        match &self.config.broker {
            BrokerLocator::Fixed(addr) => Some(*addr),
            BrokerLocator::EndpointFile { ps_dir, autolaunch } => {
                if let Some(addr) = live_endpoint(ps_dir).await {
                    return Some(addr);
                }
                if *autolaunch {
                    self.launch_broker(ps_dir).await
                } else {
                    None
                }
            }
        }
    }

    /// Starts the Broker described by `broker.psd` and waits for it to
    /// advertise a live endpoint.
    async fn launch_broker(&self, ps_dir: &std::path::Path) -> Option<SocketAddr> {
        let mut slot = self.broker_child.lock().await;
        if let Some(addr) = live_endpoint(ps_dir).await {
            return Some(addr);
        }
        let desc = match load_broker_descriptor(ps_dir) {
            Ok(Some(d)) => d,
            Ok(None) => return None,
            Err(e) => {
                tracing::warn!(error = %e, "cannot use broker.psd");
                return None;
            }
        };
        let Launcher::Local { dir, cmd } = &desc.launcher else {
            tracing::warn!("broker.psd must describe a local command");
            return None;
        };
        let _ = std::fs::remove_file(endpoint_path(ps_dir));
        let mut child = match Command::new(&cmd[0])
            .args(&cmd[1..])
            .current_dir(dir)
            .stdin(std::process::Stdio::null())
            .kill_on_drop(true)
            .spawn()
        {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(error = %e, cmd = ?cmd, "cannot launch Broker");
                return None;
            }
        };
        tracing::info!(pid = child.id(), "launched Broker");
        let deadline = Instant::now() + self.config.broker_launch_timeout;
        while Instant::now() < deadline {
            if let Some(addr) = live_endpoint(ps_dir).await {
                *slot = Some(child);
                return Some(addr);
            }
            if let Ok(Some(status)) = child.try_wait() {
                tracing::warn!(%status, "Broker exited during startup");
                return None;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        tracing::warn!("Broker did not advertise an endpoint in time");
        None
    }
}

async fn live_endpoint(ps_dir: &std::path::Path) -> Option<SocketAddr> {
    let addr = read_endpoint_file(&endpoint_path(ps_dir)).ok()?;
    let connect = tokio::time::timeout(Duration::from_millis(500), TcpStream::connect(addr)).await;
    matches!(connect, Ok(Ok(_))).then_some(addr)
}

fn finish(mut response: Response<Bytes>, txn: Txn) -> Response<Bytes> {
    let headers = response.headers_mut();
    net::strip_hop_by_hop(headers);
    for cookie in txn.set_cookies {
        headers.append(header::SET_COOKIE, cookie);
    }
    for d in txn.diagnostics {
        if let Some(v) = header_value(&d) {
            headers.append(HeaderName::from_static(DIAGNOSTIC_HEADER), v);
        }
    }
    response
}
