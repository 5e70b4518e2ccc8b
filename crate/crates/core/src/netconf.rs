//! Network directory: which nodes exist and where their servers listen.
//!
//! The file format is one node per line, `name host backend_port cqc_port`,
//! with `#` comments and blank lines ignored.

use std::collections::HashSet;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, ToSocketAddrs};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot resolve host '{0}'")]
    Resolve(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeEntry {
    pub name: String,
    pub host: String,
    pub backend_port: u16,
    pub cqc_port: u16,
}

impl NodeEntry {
    pub fn backend_addr(&self) -> Result<SocketAddr, ConfigError> {
        resolve(&self.host, self.backend_port)
    }

    pub fn cqc_addr(&self) -> Result<SocketAddr, ConfigError> {
        resolve(&self.host, self.cqc_port)
    }

    /// IPv4 address used for this node in CQC headers.
    pub fn ipv4(&self) -> Result<Ipv4Addr, ConfigError> {
        match self.cqc_addr()? {
            SocketAddr::V4(a) => Ok(*a.ip()),
            SocketAddr::V6(_) => Err(ConfigError::Resolve(self.host.clone())),
        }
    }
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr, ConfigError> {
    if let Ok(ip) = host.parse::<Ipv4Addr>() {
        return Ok(SocketAddr::from((ip, port)));
    }
    (host, port)
        .to_socket_addrs()
        .map_err(|_| ConfigError::Resolve(host.to_string()))?
        .find(|a| a.is_ipv4())
        .ok_or_else(|| ConfigError::Resolve(host.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeDirectory {
    entries: Vec<NodeEntry>,
}

impl NodeDirectory {
    pub fn new(entries: Vec<NodeEntry>) -> Result<Self, ConfigError> {
        let mut dir = NodeDirectory::default();
        for (i, e) in entries.into_iter().enumerate() {
            dir.push(e, i + 1)?;
        }
        Ok(dir)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut dir = NodeDirectory::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let err = |message: String| ConfigError::Line { line, message };
            if fields.len() != 4 {
                return Err(err(format!("expected 'name host backend_port cqc_port', got {} fields", fields.len())));
            }
            let port = |s: &str, what: &str| -> Result<u16, ConfigError> {
                match s.parse::<u16>() {
                    Ok(0) | Err(_) => Err(err(format!("{what} '{s}' is not in 1..=65535"))),
                    Ok(p) => Ok(p),
                }
            };
            let entry = NodeEntry {
                name: fields[0].to_string(),
                host: fields[1].to_string(),
                backend_port: port(fields[2], "backend port")?,
                cqc_port: port(fields[3], "cqc port")?,
            };
            dir.push(entry, line)?;
        }
        Ok(dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    fn push(&mut self, entry: NodeEntry, line: usize) -> Result<(), ConfigError> {
        let err = |message: String| ConfigError::Line { line, message };
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(err(format!("duplicate node name '{}'", entry.name)));
        }
        if entry.backend_port == entry.cqc_port {
            return Err(err(format!("port {} used twice on {}", entry.cqc_port, entry.host)));
        }
        let taken: HashSet<(&str, u16)> = self
            .entries
            .iter()
            .flat_map(|e| [(e.host.as_str(), e.backend_port), (e.host.as_str(), e.cqc_port)])
            .collect();
        for port in [entry.backend_port, entry.cqc_port] {
            if taken.contains(&(entry.host.as_str(), port)) {
                return Err(err(format!("port {port} on {} already in use by another node", entry.host)));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    pub fn entries(&self) -> &[NodeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&NodeEntry, ConfigError> {
        self.entries.iter().find(|e| e.name == name).ok_or_else(|| ConfigError::UnknownNode(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn name_at(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.name.as_str())
    }

    /// Finds the node whose CQC server is at `ip:port`.
    pub fn by_cqc_addr(&self, ip: Ipv4Addr, port: u16) -> Option<&NodeEntry> {
        self.entries.iter().find(|e| e.cqc_port == port && e.ipv4().map(|a| a == ip).unwrap_or(false))
    }
}

impl fmt::Display for NodeDirectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {} {} {}", e.name, e.host, e.backend_port, e.cqc_port)?;
        }
        Ok(())
    }
}
