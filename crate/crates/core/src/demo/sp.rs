//! Demo service provider. `/resource` needs a session cookie; without one
//! the browser is sent to `/auth`, which finds an authentication service
//! through the white pages, invokes it with a 312 and accepts the posted
//! result at `/auth/result`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use http::header::{self, HeaderValue};
use http::{Method, Request, Response, StatusCode};
use serde::Serialize;
use url::Url;

use super::{field, form_fields, mock_proof, random_token, AUTH_QUERY};
use crate::net::{self, Server};
use crate::protocol::{
    decode_broker_result, header_text, supports_version, BrokerResult, PsvcStatus, PSVC_CALLBACK, PSVC_ERROR,
    PSVC_METHOD, PSVC_PARAMETERS, PSVC_SERVICE, PSVC_VERSION, VERSION,
};
use crate::service_kit::html_escape;

pub const SESSION_COOKIE: &str = "psvc_session";

/// How `/auth` behaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpMode {
    Normal,
    /// Lists authentication services with a 310 instead of resolving one.
    Yellow,
    /// Sends a 311 whose query is not valid JSON.
    Malformed,
    /// Corrupts the handle before invoking the service.
    Tampered,
    /// Answers with a 313 pointing at another server.
    Malicious313(Url),
}

/// What arrived at `/auth/callback`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallbackObservation {
    pub flow: String,
    pub psvc_service: Option<String>,
    pub psvc_error: Option<String>,
}

impl CallbackObservation {
    pub fn result(&self) -> Option<BrokerResult> {
        self.psvc_service.as_deref().and_then(|s| decode_broker_result(s).ok())
    }
}

#[derive(Debug, Default)]
struct Flow {
    return_to: String,
    nonce: Option<String>,
}

struct SpState {
    mode: SpMode,
    base: Url,
    flows: Mutex<HashMap<String, Flow>>,
    sessions: Mutex<HashMap<String, String>>,
    observed: Mutex<Vec<CallbackObservation>>,
}

pub struct DemoSp {
    state: Arc<SpState>,
    server: Server,
}

impl DemoSp {
    /// Serves on 127.0.0.1:`port` (0 picks one).
    pub async fn start(port: u16, mode: SpMode) -> std::io::Result<Self> {
        let listener = net::bind_loopback(port).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(SpState {
            mode,
            base: Url::parse(&format!("http://{addr}/")).expect("socket address forms a URL"),
            flows: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            observed: Mutex::new(Vec::new()),
        });
        let s = state.clone();
        let server = net::serve(listener, move |req, _| {
            let s = s.clone();
            async move { s.handle(req) }
        });
        Ok(Self { state, server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn base_url(&self) -> &Url {
        &self.state.base
    }

    pub fn url(&self, path: &str) -> Url {
        self.state.base.join(path).expect("relative path joins")
    }

    pub fn observations(&self) -> Vec<CallbackObservation> {
        self.state.observed.lock().expect("sp lock poisoned").clone()
    }

    pub fn sessions(&self) -> usize {
        self.state.sessions.lock().expect("sp lock poisoned").len()
    }

    pub async fn wait(self) {
        self.server.wait().await
    }
}

fn page(status: StatusCode, title: &str, body: &str) -> Response<Bytes> {
    net::html_response(
        status,
        format!(
            "<!DOCTYPE html><html><head><title>{t}</title></head><body><h1>{t}</h1><p>{b}</p></body></html>",
            t = html_escape(title),
            b = html_escape(body)
        ),
    )
}

fn redirect(status: StatusCode, location: &str) -> Response<Bytes> {
    let mut r = net::response(status, Bytes::new());
    if let Ok(v) = HeaderValue::from_str(location) {
        r.headers_mut().insert(header::LOCATION, v);
    }
    r
}

fn psvc_response(status: PsvcStatus, fields: &[(&'static str, &str)]) -> Response<Bytes> {
    let mut r = net::response(status.status(), Bytes::new());
    net::set_reason(&mut r, status.reason());
    for (n, v) in fields {
        if let Ok(v) = HeaderValue::from_str(v) {
            r.headers_mut().insert(*n, v);
        }
    }
    r
}

fn cookie_value(req: &Request<Bytes>, name: &str) -> Option<String> {
    req.headers()
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v.to_owned())
}

/// Changes the first character, which always carries six significant bits.
fn corrupt(handle: &str) -> String {
    let mut chars: Vec<char> = handle.chars().collect();
    if let Some(c) = chars.first_mut() {
        *c = if *c == 'A' { 'B' } else { 'A' };
    }
    chars.into_iter().collect()
}

impl SpState {
    fn handle(&self, req: Request<Bytes>) -> Response<Bytes> {
        let path = req.uri().path().to_owned();
        match (req.method().clone(), path.as_str()) {
            (Method::GET, "/resource") => self.resource(&req),
            (Method::GET, "/auth") => self.auth(&req),
            (Method::POST, "/auth/callback") => self.callback(&req),
            (Method::POST, "/auth/result") => self.result(&req),
            (Method::GET, "/observed") => {
                let body = serde_json::to_string(&*self.observed.lock().expect("sp lock poisoned"))
                    .expect("observations serialize");
                let mut r = net::response(StatusCode::OK, body);
                r.headers_mut()
                    .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
                r
            }
            _ => page(StatusCode::NOT_FOUND, "Not found", &path),
        }
    }

    fn resource(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let identity = cookie_value(req, SESSION_COOKIE)
            .and_then(|t| self.sessions.lock().expect("sp lock poisoned").get(&t).cloned());
        match identity {
            Some(id) => page(StatusCode::OK, "Protected resource", &format!("Welcome, {id}")),
            None => redirect(StatusCode::FOUND, "/auth?return=/resource"),
        }
    }

    fn auth(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let capable = header_text(req.headers(), PSVC_VERSION).is_some_and(|v| supports_version(&v, VERSION));
        if !capable {
            return page(
                StatusCode::OK,
                "Authentication unavailable",
                "This browser cannot invoke personal services.",
            );
        }
        let return_to = net::query_param(req.uri(), "return")
            .filter(|r| r.starts_with('/'))
            .unwrap_or_else(|| "/resource".into());
        let flow = random_token();
        self.flows.lock().expect("sp lock poisoned").insert(
            flow.clone(),
            Flow {
                return_to,
                nonce: None,
            },
        );
        let callback = self.callback_url(&flow);
        match &self.mode {
            SpMode::Normal | SpMode::Tampered => psvc_response(
                PsvcStatus::WhitePages,
                &[(PSVC_SERVICE, AUTH_QUERY), (PSVC_CALLBACK, callback.as_str())],
            ),
            SpMode::Yellow => psvc_response(
                PsvcStatus::YellowPages,
                &[(PSVC_SERVICE, r#"{"Purpose":"authentication"}"#), (PSVC_CALLBACK, callback.as_str())],
            ),
            SpMode::Malformed => psvc_response(
                PsvcStatus::WhitePages,
                &[(PSVC_SERVICE, r#"{"Purpose": "authentication","#), (PSVC_CALLBACK, callback.as_str())],
            ),
            SpMode::Malicious313(victim) => {
                let mut r = psvc_response(PsvcStatus::BrokerResult, &[(PSVC_SERVICE, "{}")]);
                if let Ok(v) = HeaderValue::from_str(victim.as_str()) {
                    r.headers_mut().insert(header::LOCATION, v);
                }
                r
            }
        }
    }

    fn callback_url(&self, flow: &str) -> Url {
        let mut u = self.base.join("/auth/callback").expect("static path");
        u.query_pairs_mut().append_pair("flow", flow);
        u
    }

    fn callback(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let flow = net::query_param(req.uri(), "flow").unwrap_or_default();
        let observation = CallbackObservation {
            flow: flow.clone(),
            psvc_service: header_text(req.headers(), PSVC_SERVICE),
            psvc_error: header_text(req.headers(), PSVC_ERROR),
        };
        tracing::info!(?observation, "SP callback");
        self.observed.lock().expect("sp lock poisoned").push(observation.clone());

        if !self.flows.lock().expect("sp lock poisoned").contains_key(&flow) {
            return page(StatusCode::BAD_REQUEST, "Unknown flow", &flow);
        }
        if let Some(code) = observation.psvc_error {
            return page(StatusCode::OK, "Authentication failed", &format!("Personal service error: {code}"));
        }
        match observation.result() {
            Some(BrokerResult::WhitePages {
                response: Some(found), ..
            }) => {
                let nonce = random_token();
                let mut return_url = self.base.join("/auth/result").expect("static path");
                return_url.query_pairs_mut().append_pair("flow", &flow);
                let params = format!(
                    "/authenticate?{}",
                    url::form_urlencoded::Serializer::new(String::new())
                        .append_pair("nonce", &nonce)
                        .append_pair("return", return_url.as_str())
                        .finish()
                );
                if let Some(f) = self.flows.lock().expect("sp lock poisoned").get_mut(&flow) {
                    f.nonce = Some(nonce);
                }
                let handle = match self.mode {
                    SpMode::Tampered => corrupt(found.handle.as_str()),
                    _ => found.handle.as_str().to_owned(),
                };
                let callback = self.callback_url(&flow);
                psvc_response(
                    PsvcStatus::ServiceCall,
                    &[
                        (PSVC_SERVICE, handle.as_str()),
                        (PSVC_METHOD, "GET"),
                        (PSVC_PARAMETERS, params.as_str()),
                        (PSVC_CALLBACK, callback.as_str()),
                        ("x-demo-flow", flow.as_str()),
                    ],
                )
            }
            Some(BrokerResult::WhitePages { response: None, .. }) => page(
                StatusCode::OK,
                "Authentication unavailable",
                "No personal authentication service was found.",
            ),
            Some(BrokerResult::YellowPages { response, .. }) => {
                let names: Vec<String> = response.iter().map(|n| n.to_string()).collect();
                page(
                    StatusCode::OK,
                    "Available authentication services",
                    &format!("{} service(s): {}", names.len(), names.join("; ")),
                )
            }
            None => page(StatusCode::BAD_REQUEST, "Bad callback", "missing or invalid PSvc-Service"),
        }
    }

    fn result(&self, req: &Request<Bytes>) -> Response<Bytes> {
        let flow_id = net::query_param(req.uri(), "flow").unwrap_or_default();
        let fields = form_fields(req.body());
        let (Some(nonce), Some(identity), Some(proof)) =
            (field(&fields, "nonce"), field(&fields, "identity"), field(&fields, "proof"))
        else {
            return page(StatusCode::FORBIDDEN, "Authentication rejected", "incomplete result");
        };
        let flow = {
            let mut flows = self.flows.lock().expect("sp lock poisoned");
            match flows.get(&flow_id) {
                Some(f) if f.nonce.as_deref() == Some(nonce) && mock_proof(nonce, identity) == proof => {
                    flows.remove(&flow_id)
                }
                _ => None,
            }
        };
        let Some(flow) = flow else {
            return page(StatusCode::FORBIDDEN, "Authentication rejected", "invalid proof");
        };
        let token = random_token();
        self.sessions
            .lock()
            .expect("sp lock poisoned")
            .insert(token.clone(), identity.to_owned());
        let mut r = redirect(StatusCode::FOUND, &flow.return_to);
        let cookie = format!("{SESSION_COOKIE}={token}; Path=/; HttpOnly");
        r.headers_mut()
            .insert(header::SET_COOKIE, HeaderValue::from_str(&cookie).expect("token is header-safe"));
        r
    }
}
