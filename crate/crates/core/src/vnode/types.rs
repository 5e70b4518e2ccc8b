use std::fmt;

use thiserror::Error;

use crate::engine::EngineError;

/// Application-visible qubit handle, unique among the live qubits of one node.
pub type QubitId = u16;
/// Application id taken from the CQC header.
pub type AppId = u16;
/// Cluster-wide id of a simulated qubit. It never changes when the qubit's
/// register moves to another node.
pub type SimId = u64;

/// Bits reserved for the per-node counter inside a [`SimId`].
pub const SIM_COUNTER_BITS: u32 = 40;

pub fn sim_id(node_index: usize, counter: u64) -> SimId {
    ((node_index as u64 + 1) << SIM_COUNTER_BITS) | (counter & ((1 << SIM_COUNTER_BITS) - 1))
}

/// Metadata attached to both halves of an EPR pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EntanglementId {
    pub node_a: String,
    pub node_b: String,
    pub sequence: u32,
    /// Creation time, milliseconds since the Unix epoch.
    pub created_at: u64,
}

impl fmt::Display for EntanglementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}#{}@{}", self.node_a, self.node_b, self.sequence, self.created_at)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeError {
    #[error("no qubit available")]
    NoQubit,
    #[error("unknown qubit {0}")]
    UnknownQubit(QubitId),
    #[error("qubit {0} has been released")]
    Expired(QubitId),
    #[error("qubit {0} belongs to another application")]
    Denied(QubitId),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("unknown simulated qubit {0:#x}")]
    UnknownSim(SimId),
    #[error("register would exceed {max} qubits")]
    Capacity { max: usize },
    #[error("invalid operation: {0}")]
    Invalid(String),
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer link: {0}")]
    Link(String),
}

impl From<EngineError> for NodeError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Capacity { max, .. } => NodeError::Capacity { max },
            other => NodeError::Invalid(other.to_string()),
        }
    }
}

impl NodeError {
    /// Wire form: a code, one numeric argument and a message.
    pub fn to_wire(&self) -> (u8, u64, String) {
        let msg = self.to_string();
        match self {
            NodeError::NoQubit => (1, 0, msg),
            NodeError::UnknownQubit(q) => (2, *q as u64, msg),
            NodeError::Expired(q) => (3, *q as u64, msg),
            NodeError::Denied(q) => (4, *q as u64, msg),
            NodeError::Unavailable(m) => (5, 0, m.clone()),
            NodeError::Timeout(m) => (6, 0, m.clone()),
            NodeError::UnknownSim(s) => (7, *s, msg),
            NodeError::Capacity { max } => (8, *max as u64, msg),
            NodeError::Invalid(m) => (9, 0, m.clone()),
            NodeError::UnknownNode(n) => (10, 0, n.clone()),
            NodeError::Protocol(m) => (11, 0, m.clone()),
            NodeError::Link(m) => (12, 0, m.clone()),
        }
    }

    pub fn from_wire(code: u8, arg: u64, message: String) -> Self {
        match code {
            1 => NodeError::NoQubit,
            2 => NodeError::UnknownQubit(arg as QubitId),
            3 => NodeError::Expired(arg as QubitId),
            4 => NodeError::Denied(arg as QubitId),
            5 => NodeError::Unavailable(message),
            6 => NodeError::Timeout(message),
            7 => NodeError::UnknownSim(arg),
            8 => NodeError::Capacity { max: arg as usize },
            9 => NodeError::Invalid(message),
            10 => NodeError::UnknownNode(message),
            12 => NodeError::Link(message),
            _ => NodeError::Protocol(message),
        }
    }
}
