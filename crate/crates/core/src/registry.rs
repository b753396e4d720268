//! Personal-service descriptors (`*.psd` files in the user's `.PS`
//! directory) and the catalog the Broker answers queries from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;
use url::Url;

use crate::protocol::{ServiceName, WhiteQuery, YellowQuery};

pub const DESCRIPTOR_EXT: &str = "psd";
pub const BROKER_DESCRIPTOR: &str = "broker.psd";
pub const PS_DIR_NAME: &str = ".PS";
/// Overrides the home directory under which `.PS` lives.
pub const HOME_ENV: &str = "PSVC_HOME";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read {}: {source}", path.display())]
    DirUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Parse(String),
    #[error("configuration has neither `cmd` nor `url`")]
    MissingLauncher,
    #[error("configuration has both `cmd` and `url`")]
    ConflictingLauncher,
    #[error("missing `{0}` object")]
    MissingSection(&'static str),
    #[error("presentation has no attributes")]
    EmptyPresentation,
    #[error("invalid `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

/// How the Broker reaches a service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launcher {
    /// Spawned on demand; the allocated port is appended to `cmd`.
    Local { dir: PathBuf, cmd: Vec<String> },
    /// Not under the Broker's control; only probed for liveness.
    Remote { url: Url },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceDescriptor {
    /// File stem of the `.psd` file.
    pub id: String,
    pub launcher: Launcher,
    pub presentation: ServiceName,
}

impl ServiceDescriptor {
    pub fn is_remote(&self) -> bool {
        matches!(self.launcher, Launcher::Remote { .. })
    }
}

/// A skipped descriptor file and the reason it was skipped.
#[derive(Debug)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub error: RegistryError,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.error)
    }
}

/// The outcome of a white-pages resolution that did not find exactly one
/// service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("no service matches")]
    NoMatch,
    #[error("{0} services match")]
    Ambiguous(usize),
}

/// Immutable snapshot of the descriptors in one `.PS` directory, keyed and
/// ordered by id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: BTreeMap<String, ServiceDescriptor>,
    source_dir: PathBuf,
}

impl Catalog {
    pub fn new(source_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries: BTreeMap::new(),
            source_dir: source_dir.into(),
        }
    }

    /// Adds a descriptor, replacing any entry with the same id.
    pub fn insert(&mut self, descriptor: ServiceDescriptor) {
        self.entries.insert(descriptor.id.clone(), descriptor);
    }

    pub fn get(&self, id: &str) -> Option<&ServiceDescriptor> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_dir(&self) -> &Path {
        &self.source_dir
    }

    pub fn iter(&self) -> impl Iterator<Item = &ServiceDescriptor> {
        self.entries.values()
    }

    pub fn list_matching(&self, query: &YellowQuery) -> Vec<&ServiceDescriptor> {
        self.list_matching_where(query, |_| true)
    }

    /// Yellow-pages listing restricted to entries accepted by `allow`.
    pub fn list_matching_where(
        &self,
        query: &YellowQuery,
        allow: impl Fn(&ServiceDescriptor) -> bool,
    ) -> Vec<&ServiceDescriptor> {
        self.iter()
            .filter(|d| allow(d) && query.matches(&d.presentation))
            .collect()
    }

    pub fn resolve_unique(&self, query: &WhiteQuery) -> Result<&ServiceDescriptor, ResolveError> {
        self.resolve_unique_where(query, |_| true)
    }

    pub fn resolve_unique_where(
        &self,
        query: &WhiteQuery,
        allow: impl Fn(&ServiceDescriptor) -> bool,
    ) -> Result<&ServiceDescriptor, ResolveError> {
        let mut hits = self.iter().filter(|d| allow(d) && query.matches(&d.presentation));
        let first = hits.next().ok_or(ResolveError::NoMatch)?;
        match hits.count() {
            0 => Ok(first),
            more => Err(ResolveError::Ambiguous(more + 1)),
        }
    }
}

/// `$PSVC_HOME/.PS`, falling back to the user's home directory.
pub fn default_ps_dir() -> PathBuf {
    let home = std::env::var_os(HOME_ENV)
        .map(PathBuf::from)
        .or_else(dirs::home_dir)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(PS_DIR_NAME)
}

/// Loads every `*.psd` file in `dir` except `broker.psd`. Files that fail
/// validation are skipped and reported in the returned diagnostics.
pub fn load_catalog(dir: &Path) -> Result<(Catalog, Vec<Diagnostic>), RegistryError> {
    let unreadable = |source| RegistryError::DirUnreadable {
        path: dir.to_owned(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(unreadable)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == DESCRIPTOR_EXT)
                && p.file_name().is_some_and(|n| n != BROKER_DESCRIPTOR)
                && p.is_file()
        })
        .collect();
    paths.sort();

    let mut catalog = Catalog::new(dir);
    let mut diagnostics = Vec::new();
    for path in paths {
        let id = descriptor_id(&path);
        let loaded = fs::read(&path)
            .map_err(|source| RegistryError::DirUnreadable {
                path: path.clone(),
                source,
            })
            .and_then(|text| validate_descriptor(&id, &text, dir));
        match loaded {
            Ok(d) => catalog.insert(d),
            Err(error) => {
                tracing::warn!(path = %path.display(), %error, "skipping personal service descriptor");
                diagnostics.push(Diagnostic { path, error });
            }
        }
    }
    Ok((catalog, diagnostics))
}

/// Reads `broker.psd`, which describes how to launch the Broker itself.
pub fn load_broker_descriptor(dir: &Path) -> Result<Option<ServiceDescriptor>, RegistryError> {
    let path = dir.join(BROKER_DESCRIPTOR);
    let text = match fs::read(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => return Err(RegistryError::DirUnreadable { path, source }),
    };
    let value = parse_json(&text)?;
    let launcher = parse_launcher(&value, dir)?;
    let presentation = parse_presentation(&text)?.unwrap_or_default();
    Ok(Some(ServiceDescriptor {
        id: "broker".into(),
        launcher,
        presentation,
    }))
}

pub fn descriptor_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses and validates one descriptor. A missing `dir` defaults to
/// `ps_dir`; a relative one is taken relative to it.
pub fn validate_descriptor(id: &str, text: &[u8], ps_dir: &Path) -> Result<ServiceDescriptor, RegistryError> {
    let value = parse_json(text)?;
    let presentation = parse_presentation(text)?.ok_or(RegistryError::MissingSection("presentation"))?;
    if presentation.is_empty() {
        return Err(RegistryError::EmptyPresentation);
    }
    let launcher = parse_launcher(&value, ps_dir)?;
    Ok(ServiceDescriptor {
        id: id.to_owned(),
        launcher,
        presentation,
    })
}

/// Every problem in a descriptor, rather than only the first.
pub fn check_descriptor(text: &[u8], ps_dir: &Path) -> Vec<RegistryError> {
    let value = match parse_json(text) {
        Ok(v) => v,
        Err(e) => return vec![e],
    };
    let mut problems = Vec::new();
    if let Err(e) = parse_launcher(&value, ps_dir) {
        problems.push(e);
    }
    match parse_presentation(text) {
        Ok(None) => problems.push(RegistryError::MissingSection("presentation")),
        Ok(Some(name)) if name.is_empty() => problems.push(RegistryError::EmptyPresentation),
        Ok(Some(_)) => {}
        Err(e) => problems.push(e),
    }
    problems
}

fn parse_json(text: &[u8]) -> Result<Value, RegistryError> {
    let value: Value = serde_json::from_slice(text).map_err(|e| RegistryError::Parse(e.to_string()))?;
    if !value.is_object() {
        return Err(RegistryError::Parse("top level is not an object".into()));
    }
    Ok(value)
}

/// Reads the `presentation` member straight from the descriptor text, so a
/// repeated attribute name is reported instead of collapsed.
fn parse_presentation(text: &[u8]) -> Result<Option<ServiceName>, RegistryError> {
    #[derive(serde::Deserialize)]
    struct Section {
        presentation: Option<Value>,
    }
    #[derive(serde::Deserialize)]
    struct Strict {
        presentation: Option<ServiceName>,
    }

    let loose: Section = serde_json::from_slice(text).map_err(|e| RegistryError::Parse(e.to_string()))?;
    match loose.presentation {
        None => Ok(None),
        Some(v) if !v.is_object() => Err(RegistryError::InvalidField {
            field: "presentation",
            reason: "not an object".into(),
        }),
        Some(_) => serde_json::from_slice::<Strict>(text)
            .map(|s| s.presentation)
            .map_err(|e| RegistryError::InvalidField {
                field: "presentation",
                reason: e.to_string(),
            }),
    }
}

fn parse_launcher(value: &Value, ps_dir: &Path) -> Result<Launcher, RegistryError> {
    let config = value
        .get("configuration")
        .ok_or(RegistryError::MissingSection("configuration"))?
        .as_object()
        .ok_or_else(|| RegistryError::InvalidField {
            field: "configuration",
            reason: "not an object".into(),
        })?;

    match (config.get("cmd"), config.get("url")) {
        (None, None) => Err(RegistryError::MissingLauncher),
        (Some(_), Some(_)) => Err(RegistryError::ConflictingLauncher),
        (Some(cmd), None) => {
            let cmd: Vec<String> = cmd
                .as_array()
                .and_then(|items| items.iter().map(|v| v.as_str().map(str::to_owned)).collect())
                .ok_or_else(|| RegistryError::InvalidField {
                    field: "cmd",
                    reason: "expected an array of strings".into(),
                })?;
            if cmd.is_empty() {
                return Err(RegistryError::InvalidField {
                    field: "cmd",
                    reason: "empty command".into(),
                });
            }
            let dir = match config.get("dir") {
                None => ps_dir.to_owned(),
                Some(Value::String(d)) => ps_dir.join(d),
                Some(_) => {
                    return Err(RegistryError::InvalidField {
                        field: "dir",
                        reason: "expected a string".into(),
                    })
                }
            };
            Ok(Launcher::Local { dir, cmd })
        }
        (None, Some(url)) => {
            let url = url
                .as_str()
                .ok_or_else(|| RegistryError::InvalidField {
                    field: "url",
                    reason: "expected a string".into(),
                })
                .and_then(|u| {
                    Url::parse(u).map_err(|e| RegistryError::InvalidField {
                        field: "url",
                        reason: e.to_string(),
                    })
                })?;
            if !matches!(url.scheme(), "http" | "https") {
                return Err(RegistryError::InvalidField {
                    field: "url",
                    reason: format!("unsupported scheme `{}`", url.scheme()),
                });
            }
            Ok(Launcher::Remote { url })
        }
    }
}
