//! HTTP-level message log kept by the proxy, and ordered phase matching
//! against a golden list.
//!
//! Golden files hold one phase per line:
//!
//! ```text
//! # actor   kind      method|status  [path]
//! SP        request   GET            /resource
//! SP        response  302
//! Broker    request   HEAD           /white
//! ```
//!
//! A transcript passes when the phases occur in it as an ordered
//! subsequence.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use http::HeaderMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Actor {
    Sp,
    Proxy,
    Broker,
    Service,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sp => "SP",
            Self::Proxy => "Proxy",
            Self::Broker => "Broker",
            Self::Service => "Service",
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SP" => Ok(Self::Sp),
            "Proxy" => Ok(Self::Proxy),
            "Broker" => Ok(Self::Broker),
            "Service" => Ok(Self::Service),
            other => Err(format!("unknown actor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Request => "request",
            Self::Response => "response",
        }
    }
}

/// One message seen by the proxy. `actor` is the party on the far side:
/// requests go to it, responses come from it. Browser-side messages use
/// [`Actor::Proxy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub actor: Actor,
    pub direction: Direction,
    pub method: String,
    pub path: String,
    pub status: Option<u16>,
    pub headers: Vec<(String, String)>,
}

impl Event {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8} {:<9}", self.actor.as_str(), self.direction.as_str())?;
        match self.status {
            Some(s) => write!(f, " {s:<7} {} {}", self.method, self.path)?,
            None => write!(f, " {:<7} {}", self.method, self.path)?,
        }
        for (n, v) in &self.headers {
            let v = if v.chars().count() > 60 {
                format!("{}..", v.chars().take(60).collect::<String>())
            } else {
                v.clone()
            };
            write!(f, " [{n}: {v}]")?;
        }
        Ok(())
    }
}

fn salient(name: &str) -> bool {
    name.starts_with("psvc-") || matches!(name, "location" | "set-cookie" | "cookie" | "referer")
}

pub fn salient_headers(headers: &HeaderMap) -> Vec<(String, String)> {
    headers
        .iter()
        .filter(|(n, _)| salient(n.as_str()))
        .map(|(n, v)| (n.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect()
}

#[derive(Debug, Default)]
pub struct Transcript {
    events: Mutex<Vec<Event>>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event: Event) {
        tracing::trace!(%event, "transcript");
        self.events.lock().expect("transcript lock poisoned").push(event);
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().expect("transcript lock poisoned").clone()
    }

    pub fn clear(&self) {
        self.events.lock().expect("transcript lock poisoned").clear();
    }

    pub fn render(&self) -> String {
        self.events().iter().map(|e| format!("{e}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    pub actor: Actor,
    pub direction: Direction,
    /// Method for requests, status code for responses.
    pub token: String,
    pub path: Option<String>,
}

impl Phase {
    pub fn matches(&self, e: &Event) -> bool {
        if e.actor != self.actor || e.direction != self.direction {
            return false;
        }
        let token_ok = match self.direction {
            Direction::Request => e.method == self.token,
            Direction::Response => e.status.is_some_and(|s| s.to_string() == self.token),
        };
        token_ok && self.path.as_ref().is_none_or(|p| e.path.split('?').next() == Some(p.as_str()))
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.actor.as_str(), self.direction.as_str(), self.token)?;
        if let Some(p) = &self.path {
            write!(f, " {p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PhaseError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("phase {index} `{phase}` not found after the previous phases\n--- transcript ---\n{transcript}")]
    Missing {
        index: usize,
        phase: String,
        transcript: String,
    },
}

pub fn parse_phases(text: &str) -> Result<Vec<Phase>, PhaseError> {
    let mut phases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |reason: String| PhaseError::Syntax { line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(syntax(format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let actor = fields[0].parse().map_err(syntax)?;
        let direction = match fields[1] {
            "request" => Direction::Request,
            "response" => Direction::Response,
            other => return Err(syntax(format!("unknown kind `{other}`"))),
        };
        phases.push(Phase {
            actor,
            direction,
            token: fields[2].to_owned(),
            path: fields.get(3).map(|p| p.to_string()),
        });
    }
    Ok(phases)
}

/// Checks that `phases` appear in `events` in order, possibly with other
/// events between them.
pub fn check_phases(events: &[Event], phases: &[Phase]) -> Result<(), PhaseError> {
    let mut rest = events.iter();
    for (index, phase) in phases.iter().enumerate() {
        if !rest.any(|e| phase.matches(e)) {
            return Err(PhaseError::Missing {
                index,
                phase: phase.to_string(),
                transcript: events.iter().map(|e| format!("{e}\n")).collect(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(actor: Actor, direction: Direction, method: &str, path: &str, status: Option<u16>) -> Event {
        Event {
            actor,
            direction,
            method: method.into(),
            path: path.into(),
            status,
            headers: vec![],
        }
    }

    #[test]
    fn ordered_subsequence() {
        let events = vec![
            ev(Actor::Sp, Direction::Request, "GET", "/auth", None),
            ev(Actor::Sp, Direction::Response, "GET", "/auth", Some(311)),
            ev(Actor::Broker, Direction::Request, "HEAD", "/white", None),
            ev(Actor::Broker, Direction::Response, "HEAD", "/white", Some(313)),
        ];
        let ok = parse_phases("SP request GET /auth\n# comment\nBroker response 313\n").unwrap();
        assert!(check_phases(&events, &ok).is_ok());
        let reversed = parse_phases("Broker request HEAD /white\nSP response 311").unwrap();
        assert!(matches!(check_phases(&events, &reversed), Err(PhaseError::Missing { index: 1, .. })));
    }

    #[test]
    fn path_ignores_query() {
        let e = ev(Actor::Broker, Direction::Request, "HEAD", "/resolve?ref=abc", None);
        assert!(parse_phases("Broker request HEAD /resolve").unwrap()[0].matches(&e));
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse_phases("SP request"), Err(PhaseError::Syntax { line: 1, .. })));
        assert!(matches!(parse_phases("\nBrowser request GET"), Err(PhaseError::Syntax { line: 2, .. })));
        assert!(matches!(parse_phases("SP sideways GET"), Err(PhaseError::Syntax { .. })));
    }
}
