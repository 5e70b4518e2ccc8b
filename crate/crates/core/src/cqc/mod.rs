//! Classical-Quantum Combiner (CQC): the binary protocol applications use to
//! drive a node.

pub mod client;
pub mod codec;
pub mod server;

pub use client::{BlockingCqcClient, ClientError, CqcClient};
pub use codec::{Command, CqcReply, CqcRequest, EntInfo, ExtraHeader, Instruction, MsgType, ReplyBody};
