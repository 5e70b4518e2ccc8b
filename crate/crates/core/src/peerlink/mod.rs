//! Node-to-node messaging: frame codec and TCP transport.

pub mod codec;
pub mod transport;

pub use codec::{PeerOp, PeerRequest, PeerResponse, RegisterPayload, ShippedQubit};
pub use transport::{query, Handler, LinkError, PeerLink};
