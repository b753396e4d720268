use bytes::Bytes;
use http::{HeaderName, HeaderValue, Method};
use url::Url;

use super::{
    ProtocolError, PsvcStatus, ServiceHandle, WhiteQuery, YellowQuery, PSVC_CALLBACK, PSVC_METHOD,
    PSVC_PARAMETERS, PSVC_SERVICE,
};

#[derive(Debug, Clone, PartialEq)]
pub enum DirectiveKind {
    YellowPages(YellowQuery),
    WhitePages(WhiteQuery),
    Invoke(ServiceHandle),
}

/// A parsed 310/311/312 response from a service provider.
#[derive(Debug, Clone)]
pub struct PsvcDirective {
    pub kind: DirectiveKind,
    pub method: Method,
    pub parameters: Option<String>,
    pub callback: Option<Url>,
    /// Every response header, in wire order.
    pub carried_headers: Vec<(HeaderName, HeaderValue)>,
    pub carried_body: Bytes,
}

impl PsvcDirective {
    pub fn status(&self) -> PsvcStatus {
        match self.kind {
            DirectiveKind::YellowPages(_) => PsvcStatus::YellowPages,
            DirectiveKind::WhitePages(_) => PsvcStatus::WhitePages,
            DirectiveKind::Invoke(_) => PsvcStatus::ServiceCall,
        }
    }
}

fn field<'a>(headers: &'a [(HeaderName, HeaderValue)], name: &str) -> Option<&'a HeaderValue> {
    headers.iter().find(|(n, _)| n.as_str() == name).map(|(_, v)| v)
}

fn field_text(
    headers: &[(HeaderName, HeaderValue)],
    name: &'static str,
) -> Result<Option<String>, ProtocolError> {
    match field(headers, name) {
        None => Ok(None),
        Some(v) => std::str::from_utf8(v.as_bytes())
            .map(|s| Some(s.trim().to_owned()))
            .map_err(|_| ProtocolError::InvalidField {
                field: name,
                reason: "not UTF-8".into(),
            }),
    }
}

fn parse_handle(text: &str) -> Result<ServiceHandle, ProtocolError> {
    // The handle may arrive bare or as the JSON string copied from a
    // white-pages result.
    let token = if text.starts_with('"') {
        serde_json::from_str::<String>(text).map_err(|e| ProtocolError::Payload(e.to_string()))?
    } else {
        text.to_owned()
    };
    if token.is_empty() {
        return Err(ProtocolError::Payload("empty service handle".into()));
    }
    Ok(ServiceHandle::from_text(token))
}

/// Parses a personal-service directive out of an SP response.
///
/// All headers (PSvc-* included) and the body are carried verbatim so a 312
/// can forward them to the personal service.
pub fn parse_directive(
    status: u16,
    headers: &[(HeaderName, HeaderValue)],
    body: Bytes,
) -> Result<PsvcDirective, ProtocolError> {
    let status = match PsvcStatus::from_code(status) {
        Some(s @ (PsvcStatus::YellowPages | PsvcStatus::WhitePages | PsvcStatus::ServiceCall)) => s,
        _ => return Err(ProtocolError::NotADirective(status)),
    };

    let callback = field_text(headers, PSVC_CALLBACK)?
        .map(|text| {
            Url::parse(&text).map_err(|e| ProtocolError::InvalidField {
                field: "PSvc-Callback",
                reason: e.to_string(),
            })
        })
        .transpose()?;

    let method = match field_text(headers, PSVC_METHOD)? {
        None => Method::GET,
        Some(m) => Method::from_bytes(m.as_bytes()).map_err(|e| ProtocolError::InvalidField {
            field: "PSvc-Method",
            reason: e.to_string(),
        })?,
    };

    let parameters = field_text(headers, PSVC_PARAMETERS)?;
    if let Some(p) = &parameters {
        if !p.starts_with('/') {
            return Err(ProtocolError::InvalidField {
                field: "PSvc-Parameters",
                reason: "expected a path plus query starting with `/`".into(),
            });
        }
    }

    let service = field_text(headers, PSVC_SERVICE)?.ok_or(ProtocolError::MissingHeader("PSvc-Service"))?;
    let kind = match status {
        PsvcStatus::YellowPages => DirectiveKind::YellowPages(YellowQuery::parse(&service)?),
        PsvcStatus::WhitePages => DirectiveKind::WhitePages(WhiteQuery::parse(&service)?),
        _ => DirectiveKind::Invoke(parse_handle(&service)?),
    };
    if !matches!(kind, DirectiveKind::Invoke(_)) && callback.is_none() {
        return Err(ProtocolError::MissingHeader("PSvc-Callback"));
    }

    Ok(PsvcDirective {
        kind,
        method,
        parameters,
        callback,
        carried_headers: headers.to_vec(),
        carried_body: body,
    })
}
