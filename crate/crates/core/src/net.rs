//! Small HTTP/1.1 plumbing over hyper shared by every party: a one-shot
//! client, a buffered server loop and header helpers.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderName, HeaderValue};
use http::{Request, Response, StatusCode, Uri};
use http_body_util::{BodyExt, Full};
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::{JoinHandle, JoinSet};
use url::Url;

pub const LOOPBACK: &str = "127.0.0.1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("HTTP exchange with {addr} failed: {source}")]
    Http {
        addr: String,
        #[source]
        source: hyper::Error,
    },
    #[error("{0} timed out")]
    Timeout(String),
    #[error("invalid URL `{0}`")]
    BadUrl(String),
}

/// `host:port` of a URL, with the scheme's default port filled in.
pub fn authority_of(url: &Url) -> Option<String> {
    let host = url.host_str()?;
    let port = url.port_or_known_default()?;
    Some(match url.host() {
        Some(url::Host::Ipv6(_)) => format!("[{host}]:{port}"),
        _ => format!("{host}:{port}"),
    })
}

/// Path plus query of a URL, as used in an origin-form request target.
pub fn origin_form(url: &Url) -> Uri {
    let mut target = url.path().to_owned();
    if let Some(q) = url.query() {
        target.push('?');
        target.push_str(q);
    }
    target.parse().unwrap_or_else(|_| Uri::from_static("/"))
}

/// Sends one request over a fresh connection to `connect_to` and buffers the
/// whole response. The request target is sent exactly as given, so an
/// absolute URI produces an absolute-form (proxy) request.
pub async fn send(connect_to: &str, mut req: Request<Bytes>, timeout: Duration) -> Result<Response<Bytes>, NetError> {
    if !req.headers().contains_key(header::HOST) {
        let host = req
            .uri()
            .authority()
            .map(|a| a.as_str().to_owned())
            .unwrap_or_else(|| connect_to.to_owned());
        if let Ok(v) = HeaderValue::from_str(&host) {
            req.headers_mut().insert(header::HOST, v);
        }
    }
    let exchange = async {
        let stream = TcpStream::connect(connect_to).await.map_err(|source| NetError::Connect {
            addr: connect_to.to_owned(),
            source,
        })?;
        let http_err = |source| NetError::Http {
            addr: connect_to.to_owned(),
            source,
        };
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(http_err)?;
        tokio::spawn(async move {
            let _ = conn.await;
        });
        let response = sender.send_request(req.map(Full::new)).await.map_err(http_err)?;
        let (parts, body) = response.into_parts();
        let body = body.collect().await.map_err(http_err)?.to_bytes();
        Ok(Response::from_parts(parts, body))
    };
    tokio::time::timeout(timeout, exchange)
        .await
        .map_err(|_| NetError::Timeout(format!("request to {connect_to}")))?
}

/// Builds a request for `url` with an origin-form target and sends it to the
/// URL's own authority.
pub async fn send_to_url(
    url: &Url,
    mut req: Request<Bytes>,
    timeout: Duration,
) -> Result<Response<Bytes>, NetError> {
    let authority = authority_of(url).ok_or_else(|| NetError::BadUrl(url.to_string()))?;
    *req.uri_mut() = origin_form(url);
    if let Ok(v) = HeaderValue::from_str(&authority) {
        req.headers_mut().insert(header::HOST, v);
    }
    send(&authority, req, timeout).await
}

/// A running HTTP server. Dropping it stops accepting and aborts open
/// connections.
pub struct Server {
    addr: SocketAddr,
    task: Option<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Runs until the accept loop ends.
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(task) = &self.task {
            task.abort();
        }
    }
}

/// Serves buffered requests from `listener` with `handler`, which also
/// receives the peer address.
pub fn serve<F, Fut>(listener: TcpListener, handler: F) -> Server
where
    F: Fn(Request<Bytes>, SocketAddr) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Response<Bytes>> + Send + 'static,
{
    let addr = listener.local_addr().expect("bound listener has an address");
    let handler = Arc::new(handler);
    let task = tokio::spawn(async move {
        let mut connections = JoinSet::new();
        loop {
            let (stream, peer) = match listener.accept().await {
                Ok(conn) => conn,
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                    continue;
                }
            };
            while connections.try_join_next().is_some() {}
            let handler = handler.clone();
            connections.spawn(async move {
                let service = service_fn(move |req: Request<hyper::body::Incoming>| {
                    let handler = handler.clone();
                    async move {
                        let (parts, body) = req.into_parts();
                        let body = match body.collect().await {
                            Ok(b) => b.to_bytes(),
                            Err(e) => return Err(e),
                        };
                        let response = handler(Request::from_parts(parts, body), peer).await;
                        Ok::<_, hyper::Error>(response.map(Full::new))
                    }
                });
                if let Err(e) = hyper::server::conn::http1::Builder::new()
                    .serve_connection(TokioIo::new(stream), service)
                    .await
                {
                    tracing::debug!(error = %e, %peer, "connection closed with error");
                }
            });
        }
    });
    Server { addr, task: Some(task) }
}

pub async fn bind_loopback(port: u16) -> std::io::Result<TcpListener> {
    TcpListener::bind((LOOPBACK, port)).await
}

/// Headers that describe a single connection and must not be forwarded.
pub const HOP_BY_HOP: [&str; 9] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

pub fn is_hop_by_hop(name: &HeaderName) -> bool {
    HOP_BY_HOP.contains(&name.as_str())
}

/// Removes hop-by-hop headers, including any listed in `Connection`.
pub fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let listed: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|t| HeaderName::from_bytes(t.trim().as_bytes()).ok())
        .collect();
    for name in listed {
        headers.remove(name);
    }
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
}

/// Header list in wire order as far as `HeaderMap` keeps it.
pub fn header_list(headers: &HeaderMap) -> Vec<(HeaderName, HeaderValue)> {
    headers.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
}

pub fn response(status: StatusCode, body: impl Into<Bytes>) -> Response<Bytes> {
    let mut r = Response::new(body.into());
    *r.status_mut() = status;
    r
}

pub fn text_response(status: StatusCode, text: impl Into<String>) -> Response<Bytes> {
    let mut r = response(status, text.into());
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8"));
    r
}

pub fn html_response(status: StatusCode, html: impl Into<String>) -> Response<Bytes> {
    let mut r = response(status, html.into());
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("text/html; charset=utf-8"));
    r
}

/// Attaches a reason phrase, for status codes hyper has no name for.
pub fn set_reason(response: &mut Response<Bytes>, phrase: &'static str) {
    response
        .extensions_mut()
        .insert(hyper::ext::ReasonPhrase::from_static(phrase.as_bytes()));
}

/// Query parameter lookup on a request URI.
pub fn query_param(uri: &Uri, key: &str) -> Option<String> {
    url::form_urlencoded::parse(uri.query()?.as_bytes())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn authority_defaults_port() {
        let u = Url::parse("http://sp.example/x?y=1").unwrap();
        assert_eq!(authority_of(&u).unwrap(), "sp.example:80");
        assert_eq!(origin_form(&u), "/x?y=1");
        let u = Url::parse("http://127.0.0.1:8080").unwrap();
        assert_eq!(authority_of(&u).unwrap(), "127.0.0.1:8080");
        assert_eq!(origin_form(&u), "/");
    }

    #[test]
    fn strips_connection_listed_headers() {
        let mut h = HeaderMap::new();
        h.insert("connection", HeaderValue::from_static("close, x-private"));
        h.insert("x-private", HeaderValue::from_static("1"));
        h.insert("transfer-encoding", HeaderValue::from_static("chunked"));
        h.insert("x-kept", HeaderValue::from_static("1"));
        strip_hop_by_hop(&mut h);
        assert_eq!(h.len(), 1);
        assert!(h.contains_key("x-kept"));
    }

    #[tokio::test]
    async fn round_trip_with_custom_status() {
        let server = serve(bind_loopback(0).await.unwrap(), |req, _| async move {
            let mut r = response(StatusCode::from_u16(313).unwrap(), req.into_body());
            set_reason(&mut r, "Broker Result");
            r
        });
        let req = Request::post(format!("http://{}/echo", server.local_addr()))
            .body(Bytes::from_static(b"ping"))
            .unwrap();
        let resp = send(&server.local_addr().to_string(), req, Duration::from_secs(5)).await.unwrap();
        assert_eq!(resp.status().as_u16(), 313);
        assert_eq!(&resp.body()[..], b"ping");
    }

    #[tokio::test]
    async fn connect_failure_is_reported() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let req = Request::get("/").body(Bytes::new()).unwrap();
        assert!(matches!(
            send(&addr, req, Duration::from_secs(2)).await,
            Err(NetError::Connect { .. })
        ));
    }
}
