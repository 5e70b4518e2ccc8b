//! Distributed simulation of a quantum network.
//!
//! Every node runs one backend that hosts part of the global quantum state and
//! a CQC server that applications talk to over TCP. Backends form a full mesh
//! and move registers between each other when entangling gates require it.

pub mod bench;
pub mod classical;
pub mod cluster;
pub mod cqc;
pub mod dlock;
pub mod engine;
pub mod netconf;
pub mod peerlink;
pub mod vnode;
