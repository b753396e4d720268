//! Helpers for writing personal services: take the port from the command
//! line, listen on loopback only, recognise proxy-made invocations and hand
//! control back to the SP.

use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderValue};
use http::{Request, Response, StatusCode};
use thiserror::Error;
use url::Url;

use crate::net::{self, Server};
use crate::protocol::{header_text, PSVC_INVOCATION};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("missing TCP port argument")]
    MissingPort,
    #[error("invalid TCP port argument `{0}`")]
    InvalidPort(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceContext {
    pub port: u16,
    pub bind_address: IpAddr,
}

/// Reads the port the Broker appended as the last argument.
pub fn bootstrap<I, S>(argv: I) -> Result<ServiceContext, BootstrapError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let last = argv.into_iter().last().ok_or(BootstrapError::MissingPort)?;
    let text = last.as_ref();
    match text.parse::<u16>() {
        Ok(port) if port != 0 => Ok(ServiceContext {
            port,
            bind_address: IpAddr::V4(Ipv4Addr::LOCALHOST),
        }),
        _ => Err(BootstrapError::InvalidPort(text.to_owned())),
    }
}

impl ServiceContext {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind_address, self.port)
    }

    /// `http://127.0.0.1:<port>/`
    pub fn base_url(&self) -> Url {
        Url::parse(&format!("http://{}/", self.addr())).expect("socket address forms a URL")
    }

    pub async fn serve<F, Fut>(&self, handler: F) -> std::io::Result<Server>
    where
        F: Fn(Request<Bytes>, SocketAddr) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = Response<Bytes>> + Send + 'static,
    {
        debug_assert!(self.bind_address.is_loopback());
        let listener = tokio::net::TcpListener::bind(self.addr()).await?;
        Ok(net::serve(listener, handler))
    }
}

/// True when the request came through a proxy handling a 312: it names the
/// SP in `Referer` and carries `PSvc-Invocation: 1`.
pub fn detect_psvc_invocation(headers: &HeaderMap) -> bool {
    let referer = header_text(headers, header::REFERER.as_str()).is_some_and(|r| !r.trim().is_empty());
    let marker = header_text(headers, PSVC_INVOCATION).is_some_and(|m| m.trim() == "1");
    referer && marker
}

/// The SP named by an invocation's `Referer`.
pub fn invoking_sp(headers: &HeaderMap) -> Option<Url> {
    header_text(headers, header::REFERER.as_str()).and_then(|r| Url::parse(r.trim()).ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnStyle {
    /// A page that POSTs the fields to the SP by itself.
    AutoPost,
    /// A 3xx whose `Location` is the SP callback with the fields in the query.
    Redirect(StatusCode),
}

pub fn html_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Returns control (and `fields`) to the SP. Without a callback the
/// dialog ends here with a plain page.
pub fn respond_with_sp_return(fields: &[(&str, &str)], callback: Option<&Url>, style: ReturnStyle) -> Response<Bytes> {
    let Some(callback) = callback else {
        let items: String = fields
            .iter()
            .map(|(k, v)| format!("<li>{}: {}</li>", html_escape(k), html_escape(v)))
            .collect();
        return net::html_response(
            StatusCode::OK,
            format!("<!DOCTYPE html><html><body><h1>Done</h1><ul>{items}</ul></body></html>"),
        );
    };
    match style {
        ReturnStyle::AutoPost => {
            let inputs: String = fields
                .iter()
                .map(|(k, v)| {
                    format!(
                        "<input type=\"hidden\" name=\"{}\" value=\"{}\">",
                        html_escape(k),
                        html_escape(v)
                    )
                })
                .collect();
            net::html_response(
                StatusCode::OK,
                format!(
                    "<!DOCTYPE html><html><body onload=\"document.forms[0].submit()\">\
                     <form method=\"post\" action=\"{}\">{inputs}\
                     <noscript><button type=\"submit\">Continue</button></noscript></form></body></html>",
                    html_escape(callback.as_str())
                ),
            )
        }
        ReturnStyle::Redirect(status) => {
            let mut target = callback.clone();
            if !fields.is_empty() {
                target.query_pairs_mut().extend_pairs(fields.iter().copied());
            }
            let mut r = net::response(status, Bytes::new());
            if let Ok(v) = HeaderValue::from_str(target.as_str()) {
                r.headers_mut().insert(header::LOCATION, v);
            }
            r
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn port_from_last_argument() {
        assert_eq!(bootstrap(["svc", "--flag", "10005"]).unwrap().port, 10005);
        assert_eq!(bootstrap(Vec::<String>::new()), Err(BootstrapError::MissingPort));
        assert_eq!(bootstrap(["svc"]), Err(BootstrapError::InvalidPort("svc".into())));
        assert!(bootstrap(["svc", "0"]).is_err());
        assert!(bootstrap(["svc", "65536"]).is_err());
        assert!(bootstrap(["svc", "10005"]).unwrap().bind_address.is_loopback());
    }

    #[test]
    fn marker_subsets() {
        let markers = [("referer", "http://sp:8080/auth"), (PSVC_INVOCATION, "1")];
        for mask in 0..4u8 {
            let mut h = HeaderMap::new();
            for (i, (n, v)) in markers.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    h.insert(*n, HeaderValue::from_static(v));
                }
            }
            assert_eq!(detect_psvc_invocation(&h), mask == 3, "mask {mask}");
        }
        let mut h = HeaderMap::new();
        h.insert("referer", HeaderValue::from_static("http://sp/"));
        h.insert(PSVC_INVOCATION, HeaderValue::from_static("yes"));
        assert!(!detect_psvc_invocation(&h));
    }

    #[test]
    fn auto_post_page() {
        let cb = Url::parse("http://sp:8080/auth/result?flow=1&x=2").unwrap();
        let r = respond_with_sp_return(&[("proof", "a\"b")], Some(&cb), ReturnStyle::AutoPost);
        let body = std::str::from_utf8(r.body()).unwrap();
        assert!(body.contains("action=\"http://sp:8080/auth/result?flow=1&amp;x=2\""));
        assert!(body.contains("value=\"a&quot;b\""));
        assert!(body.contains("submit()"));
    }

    #[test]
    fn redirect_and_terminal_variants() {
        let cb = Url::parse("http://sp:8080/done").unwrap();
        let r = respond_with_sp_return(&[("k", "v w")], Some(&cb), ReturnStyle::Redirect(StatusCode::SEE_OTHER));
        assert_eq!(r.status(), StatusCode::SEE_OTHER);
        assert_eq!(r.headers()["location"], "http://sp:8080/done?k=v+w");
        let r = respond_with_sp_return(&[("k", "<v>")], None, ReturnStyle::AutoPost);
        assert_eq!(r.status(), StatusCode::OK);
        let body = std::str::from_utf8(r.body()).unwrap();
        assert!(body.contains("&lt;v&gt;") && !body.contains("<form"));
    }

    #[tokio::test]
    async fn listens_on_loopback_only() {
        let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = probe.local_addr().unwrap().port();
        drop(probe);
        let ctx = bootstrap(["svc".to_owned(), port.to_string()]).unwrap();
        let _server = ctx
            .serve(|_, _| async { net::text_response(StatusCode::OK, "ok") })
            .await
            .unwrap();
        assert!(tokio::net::TcpStream::connect(("127.0.0.1", port)).await.is_ok());
        // Another address of this host must not reach the service.
        let mut others = vec![IpAddr::V4(Ipv4Addr::new(127, 0, 0, 2))];
        if let Some(ip) = external_address() {
            others.push(ip);
        }
        for ip in others {
            assert!(
                tokio::net::TcpStream::connect((ip, port)).await.is_err(),
                "{ip} reached a loopback-only service"
            );
        }
    }

    fn external_address() -> Option<IpAddr> {
        let s = std::net::UdpSocket::bind("0.0.0.0:0").ok()?;
        s.connect("192.0.2.1:9").ok()?;
        let ip = s.local_addr().ok()?.ip();
        (!ip.is_loopback() && !ip.is_unspecified()).then_some(ip)
    }
}
