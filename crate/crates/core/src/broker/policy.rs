//! Which service providers may list, resolve and use which services.
//!
//! Settings live in `policy.json` in the `.PS` directory:
//!
//! ```json
//! {
//!   "mode": "blacklist",
//!   "hosts": ["*.tracker.example"],
//!   "services": { "CCPersonalService": { "mode": "whitelist", "hosts": ["127.0.0.1", "*.gov.pt"] } },
//!   "bind_handles_to_requester": true,
//!   "handle_ttl_secs": 3600
//! }
//! ```
//!
//! A host pattern without a port matches the SP host on any port; `*`
//! matches any run of characters. Matching ignores case.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

pub const POLICY_FILE: &str = "policy.json";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid policy file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Deserialize)]
#[serde(try_from = "ModeSpec")]
pub enum PolicyMode {
    #[default]
    AllowAll,
    Whitelist(Vec<String>),
    Blacklist(Vec<String>),
}

impl PolicyMode {
    pub fn allows(&self, sp_host: &str) -> bool {
        match self {
            Self::AllowAll => true,
            Self::Whitelist(patterns) => patterns.iter().any(|p| host_matches(p, sp_host)),
            Self::Blacklist(patterns) => !patterns.iter().any(|p| host_matches(p, sp_host)),
        }
    }
}

/// Global mode plus per-service overrides.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessPolicy {
    pub default: PolicyMode,
    pub per_service: HashMap<String, PolicyMode>,
}

impl AccessPolicy {
    pub fn allow_all() -> Self {
        Self::default()
    }

    pub fn allows(&self, sp_host: &str, descriptor_id: &str) -> bool {
        self.per_service
            .get(descriptor_id)
            .unwrap_or(&self.default)
            .allows(sp_host)
    }
}

/// Everything `policy.json` configures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerSettings {
    pub policy: AccessPolicy,
    /// Reject a handle presented by an SP other than the one it was minted for.
    pub bind_handles_to_requester: bool,
    pub handle_ttl: Option<Duration>,
}

impl Default for BrokerSettings {
    fn default() -> Self {
        Self {
            policy: AccessPolicy::allow_all(),
            bind_handles_to_requester: true,
            handle_ttl: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeName {
    AllowAll,
    Whitelist,
    Blacklist,
}

#[derive(Deserialize)]
struct ModeSpec {
    mode: ModeName,
    #[serde(default)]
    hosts: Vec<String>,
}

impl TryFrom<ModeSpec> for PolicyMode {
    type Error = &'static str;

    fn try_from(spec: ModeSpec) -> Result<Self, Self::Error> {
        match spec.mode {
            ModeName::AllowAll if spec.hosts.is_empty() => Ok(Self::AllowAll),
            ModeName::AllowAll => Err("allow_all takes no hosts"),
            ModeName::Whitelist => Ok(Self::Whitelist(spec.hosts)),
            ModeName::Blacklist => Ok(Self::Blacklist(spec.hosts)),
        }
    }
}

#[derive(Deserialize)]
struct SettingsFile {
    mode: Option<ModeName>,
    #[serde(default)]
    hosts: Vec<String>,
    #[serde(default)]
    services: HashMap<String, PolicyMode>,
    #[serde(default = "yes")]
    bind_handles_to_requester: bool,
    handle_ttl_secs: Option<u64>,
}

fn yes() -> bool {
    true
}

impl BrokerSettings {
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let file: SettingsFile = serde_json::from_str(text)?;
        let default = match file.mode {
            None => PolicyMode::default(),
            Some(mode) => PolicyMode::try_from(ModeSpec { mode, hosts: file.hosts })
                .map_err(<serde_json::Error as serde::de::Error>::custom)?,
        };
        Ok(Self {
            policy: AccessPolicy {
                default,
                per_service: file.services,
            },
            bind_handles_to_requester: file.bind_handles_to_requester,
            handle_ttl: file.handle_ttl_secs.map(Duration::from_secs),
        })
    }

    /// Reads `policy.json` from `ps_dir`; a missing file means defaults.
    pub fn load(ps_dir: &Path) -> Result<Self, PolicyError> {
        match std::fs::read_to_string(ps_dir.join(POLICY_FILE)) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }
}

fn host_matches(pattern: &str, sp_host: &str) -> bool {
    let pattern = pattern.to_ascii_lowercase();
    let sp_host = sp_host.to_ascii_lowercase();
    let subject = if pattern.contains(':') {
        sp_host.as_str()
    } else {
        strip_port(&sp_host)
    };
    glob(pattern.as_bytes(), subject.as_bytes())
}

fn strip_port(authority: &str) -> &str {
    if authority.starts_with('[') {
        return authority.split_once(']').map_or(authority, |(h, _)| &h[1..]);
    }
    match authority.rsplit_once(':') {
        Some((host, port)) if port.bytes().all(|b| b.is_ascii_digit()) => host,
        _ => authority,
    }
}

fn glob(pattern: &[u8], text: &[u8]) -> bool {
    match pattern.split_first() {
        None => text.is_empty(),
        Some((b'*', rest)) => (0..=text.len()).any(|i| glob(rest, &text[i..])),
        Some((c, rest)) => text.first() == Some(c) && glob(rest, &text[1..]),
    }
}
