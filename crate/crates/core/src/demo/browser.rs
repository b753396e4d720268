//! A scriptable browser that talks through the proxy: it follows classic
//! redirections, keeps cookies per host and submits HTML forms.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::LazyLock;
use std::time::Duration;

use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderValue};
use http::{Method, Request, StatusCode};
use regex::Regex;
use thiserror::Error;
use url::Url;

use crate::net::{self, NetError};

#[derive(Debug, Error)]
pub enum BrowserError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("too many redirections (last {0})")]
    TooManyRedirects(Url),
    #[error("bad redirection target `{0}`")]
    BadLocation(String),
}

#[derive(Debug, Clone)]
pub struct Page {
    pub url: Url,
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Form {
    pub action: Url,
    pub method: Method,
    pub fields: Vec<(String, String)>,
}

static FORM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)<form\b([^>]*)>(.*?)</form>").unwrap());
static INPUT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)<input\b([^>]*)>").unwrap());
static ATTR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"(?is)([a-z-]+)\s*=\s*"([^"]*)""#).unwrap());

fn unescape(text: &str) -> String {
    text.replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&amp;", "&")
}

fn attrs(text: &str) -> HashMap<String, String> {
    ATTR.captures_iter(text)
        .map(|c| (c[1].to_ascii_lowercase(), unescape(&c[2])))
        .collect()
}

impl Page {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn forms(&self) -> Vec<Form> {
        let html = self.text();
        FORM.captures_iter(&html)
            .filter_map(|c| {
                let a = attrs(&c[1]);
                let action = self.url.join(a.get("action").map_or("", String::as_str)).ok()?;
                let method = match a.get("method").map(|m| m.to_ascii_uppercase()) {
                    Some(m) if m == "POST" => Method::POST,
                    _ => Method::GET,
                };
                let fields = INPUT
                    .captures_iter(&c[2])
                    .filter_map(|i| {
                        let a = attrs(&i[1]);
                        Some((a.get("name")?.clone(), a.get("value").cloned().unwrap_or_default()))
                    })
                    .collect();
                Some(Form { action, method, fields })
            })
            .collect()
    }

    pub fn diagnostics(&self) -> Vec<String> {
        self.headers
            .get_all(crate::proxy::DIAGNOSTIC_HEADER)
            .iter()
            .map(|v| String::from_utf8_lossy(v.as_bytes()).into_owned())
            .collect()
    }
}

pub struct Browser {
    proxy: SocketAddr,
    jar: HashMap<String, BTreeMap<String, String>>,
    pub max_redirects: usize,
    pub timeout: Duration,
}

impl Browser {
    pub fn new(proxy: SocketAddr) -> Self {
        Self {
            proxy,
            jar: HashMap::new(),
            max_redirects: 10,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn cookies_for(&self, url: &Url) -> Option<&BTreeMap<String, String>> {
        net::authority_of(url).and_then(|a| self.jar.get(&a))
    }

    pub async fn get(&mut self, url: &Url) -> Result<Page, BrowserError> {
        self.navigate(Method::GET, url.clone(), Bytes::new()).await
    }

    pub async fn submit(&mut self, form: &Form) -> Result<Page, BrowserError> {
        let encoded = url::form_urlencoded::Serializer::new(String::new())
            .extend_pairs(form.fields.iter())
            .finish();
        if form.method == Method::POST {
            self.navigate(Method::POST, form.action.clone(), Bytes::from(encoded)).await
        } else {
            let mut target = form.action.clone();
            target.set_query(Some(&encoded));
            self.navigate(Method::GET, target, Bytes::new()).await
        }
    }

    async fn navigate(&mut self, mut method: Method, mut url: Url, mut body: Bytes) -> Result<Page, BrowserError> {
        for _ in 0..=self.max_redirects {
            let page = self.fetch(&method, &url, body.clone()).await?;
            let follow = matches!(page.status.as_u16(), 301 | 302 | 303 | 307 | 308);
            let location = page.headers.get(header::LOCATION).and_then(|l| l.to_str().ok());
            let (true, Some(location)) = (follow, location) else {
                return Ok(page);
            };
            url = url.join(location).map_err(|_| BrowserError::BadLocation(location.to_owned()))?;
            if !matches!(page.status.as_u16(), 307 | 308) {
                method = Method::GET;
                body = Bytes::new();
            }
        }
        Err(BrowserError::TooManyRedirects(url))
    }

    /// One request through the proxy, in absolute form.
    async fn fetch(&mut self, method: &Method, url: &Url, body: Bytes) -> Result<Page, BrowserError> {
        let mut req = Request::new(body.clone());
        *req.method_mut() = method.clone();
        *req.uri_mut() = url.as_str().parse().map_err(|_| BrowserError::BadLocation(url.to_string()))?;
        let authority = net::authority_of(url).unwrap_or_default();
        let h = req.headers_mut();
        if let Ok(v) = HeaderValue::from_str(&authority) {
            h.insert(header::HOST, v);
        }
        if method == Method::POST {
            h.insert(
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/x-www-form-urlencoded"),
            );
        }
        if let Some(cookies) = self.jar.get(&authority).filter(|c| !c.is_empty()) {
            let line = cookies.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; ");
            if let Ok(v) = HeaderValue::from_str(&line) {
                h.insert(header::COOKIE, v);
            }
        }
        let resp = net::send(&self.proxy.to_string(), req, self.timeout).await?;
        for sc in resp.headers().get_all(header::SET_COOKIE) {
            let Some((name, value)) = sc
                .to_str()
                .ok()
                .and_then(|s| s.split(';').next())
                .and_then(|kv| kv.split_once('='))
            else {
                continue;
            };
            self.jar
                .entry(authority.clone())
                .or_default()
                .insert(name.trim().to_owned(), value.trim().to_owned());
        }
        let (parts, body) = resp.into_parts();
        Ok(Page {
            url: url.clone(),
            status: parts.status,
            headers: parts.headers,
            body,
        })
    }
}
