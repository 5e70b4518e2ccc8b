//! Virtual node: the application-facing qubit table of one node, backed by
//! simulated qubits that may live on any node of the network.
//!
//! Applications hold [`QubitId`]s. Each maps to a simulated qubit somewhere
//! in the cluster. Two-qubit gates between qubits on different nodes merge
//! the two registers onto the control qubit's host.

mod node;
pub mod types;

pub use node::{Node, NodeConfig, NodeSnapshot, SimInfo, VirtualInfo};
pub use types::{AppId, EntanglementId, NodeError, QubitId, SimId};
