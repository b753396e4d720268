//! Wire vocabulary shared by service providers, the proxy, the Broker and
//! personal services: the 31x status codes, the `PSvc-*` header family, name
//! and query payloads, handles and error codes.

mod directive;
mod name;
mod result;

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use http::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use directive::{parse_directive, DirectiveKind, PsvcDirective};
pub use name::{white_match, yellow_match, ServiceName, WhiteQuery, YellowQuery};
pub use result::{decode_broker_result, encode_broker_result, BrokerResult, WhiteResolution};

pub const PSVC_SERVICE: &str = "psvc-service";
pub const PSVC_METHOD: &str = "psvc-method";
pub const PSVC_PARAMETERS: &str = "psvc-parameters";
pub const PSVC_CALLBACK: &str = "psvc-callback";
pub const PSVC_VERSION: &str = "psvc-version";
pub const PSVC_ERROR: &str = "psvc-error";
/// Marker the proxy adds to handle-based invocations of personal services.
pub const PSVC_INVOCATION: &str = "psvc-invocation";

/// Protocol version this implementation speaks and advertises.
pub const VERSION: &str = "1";

pub const YELLOW_PAGES: u16 = 310;
pub const WHITE_PAGES: u16 = 311;
pub const SERVICE_CALL: u16 = 312;
pub const BROKER_RESULT: u16 = 313;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("missing {0} header")]
    MissingHeader(&'static str),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("status {0} is not a personal-service directive")]
    NotADirective(u16),
    #[error("invalid {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

impl ProtocolError {
    /// Every malformed directive is reported to the SP as `parameters`.
    pub fn code(&self) -> PsvcError {
        PsvcError::Parameters
    }
}

/// The personal-service flavour of a 31x status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PsvcStatus {
    YellowPages,
    WhitePages,
    ServiceCall,
    BrokerResult,
}

impl PsvcStatus {
    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            YELLOW_PAGES => Some(Self::YellowPages),
            WHITE_PAGES => Some(Self::WhitePages),
            SERVICE_CALL => Some(Self::ServiceCall),
            BROKER_RESULT => Some(Self::BrokerResult),
            _ => None,
        }
    }

    pub fn code(self) -> u16 {
        match self {
            Self::YellowPages => YELLOW_PAGES,
            Self::WhitePages => WHITE_PAGES,
            Self::ServiceCall => SERVICE_CALL,
            Self::BrokerResult => BROKER_RESULT,
        }
    }

    pub fn status(self) -> StatusCode {
        StatusCode::from_u16(self.code()).expect("31x is a valid status code")
    }

    pub fn reason(self) -> &'static str {
        match self {
            Self::YellowPages => "Yellow Pages",
            Self::WhitePages => "White Pages",
            Self::ServiceCall => "Personal Service Call",
            Self::BrokerResult => "Broker Result",
        }
    }
}

/// The four error codes carried in `PSvc-Error`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsvcError {
    /// The SP request is malformed.
    Parameters,
    /// More than one service matches a white-pages query.
    Ambiguous,
    /// The handle is not (or no longer) valid.
    Handle,
    /// The service cannot be found or activated.
    Service,
}

impl PsvcError {
    pub const ALL: [PsvcError; 4] = [Self::Parameters, Self::Ambiguous, Self::Handle, Self::Service];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parameters => "parameters",
            Self::Ambiguous => "ambiguous",
            Self::Handle => "handle",
            Self::Service => "service",
        }
    }
}

impl fmt::Display for PsvcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PsvcError {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| ProtocolError::InvalidField {
                field: "PSvc-Error",
                reason: format!("unknown code `{s}`"),
            })
    }
}

impl std::error::Error for PsvcError {}

/// Opaque service handle, kept in its URL-safe text form.
///
/// Nothing outside the Broker looks inside; [`ServiceHandle::to_bytes`] exists
/// for the Broker's own use.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceHandle(String);

impl ServiceHandle {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(URL_SAFE_NO_PAD.encode(bytes))
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_bytes(&self) -> Option<Vec<u8>> {
        URL_SAFE_NO_PAD.decode(self.0.as_bytes()).ok()
    }
}

impl fmt::Display for ServiceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Splits a `PSvc-Version` value into its version tokens.
pub fn parse_versions(value: &str) -> Vec<&str> {
    value
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn supports_version(value: &str, version: &str) -> bool {
    parse_versions(value).contains(&version)
}

/// Serializes to single-line JSON with every non-ASCII character escaped, so
/// the text is a valid visible-ASCII header value.
pub(crate) fn header_json<T: Serialize + ?Sized>(value: &T) -> String {
    let raw = serde_json::to_string(value).expect("JSON values always serialize");
    escape_non_ascii(&raw)
}

fn escape_non_ascii(json: &str) -> String {
    let mut out = String::with_capacity(json.len());
    for c in json.chars() {
        if c.is_ascii() {
            out.push(c);
        } else {
            let mut units = [0u16; 2];
            for unit in c.encode_utf16(&mut units) {
                out.push_str(&format!("\\u{unit:04x}"));
            }
        }
    }
    out
}

/// Reads a header as text, accepting raw UTF-8 as well as plain ASCII.
pub fn header_text(headers: &http::HeaderMap, name: &str) -> Option<String> {
    headers
        .get(name)
        .and_then(|v| std::str::from_utf8(v.as_bytes()).ok())
        .map(str::to_owned)
}
