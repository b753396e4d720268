//! `broker.ept`: the Broker's TCP port as decimal text. The address is
//! always 127.0.0.1.

use std::fs;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const ENDPOINT_FILE: &str = "broker.ept";

#[derive(Debug, Error)]
pub enum EndpointFileError {
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{} does not hold a TCP port: {content:?}", path.display())]
    Unparsable { path: PathBuf, content: String },
}

impl EndpointFileError {
    pub fn is_missing(&self) -> bool {
        matches!(self, Self::Io { source, .. } if source.kind() == io::ErrorKind::NotFound)
    }
}

pub fn endpoint_path(ps_dir: &Path) -> PathBuf {
    ps_dir.join(ENDPOINT_FILE)
}

/// Writes the port through a temporary file and a rename, so readers never
/// see a partial value.
pub fn write_endpoint_file(path: &Path, port: u16) -> Result<(), EndpointFileError> {
    let io_err = |source| EndpointFileError::Io {
        path: path.to_owned(),
        source,
    };
    let tmp = path.with_extension("ept.tmp");
    fs::write(&tmp, port.to_string()).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn read_endpoint_file(path: &Path) -> Result<SocketAddr, EndpointFileError> {
    let content = fs::read_to_string(path).map_err(|source| EndpointFileError::Io {
        path: path.to_owned(),
        source,
    })?;
    match content.trim().parse::<u16>() {
        Ok(port) if port != 0 => Ok(SocketAddr::from((Ipv4Addr::LOCALHOST, port))),
        _ => Err(EndpointFileError::Unparsable {
            path: path.to_owned(),
            content,
        }),
    }
}

/// Removes the file only if it still names `port`.
pub fn remove_endpoint_file(path: &Path, port: u16) {
    if read_endpoint_file(path).is_ok_and(|a| a.port() == port) {
        let _ = fs::remove_file(path);
    }
}
