//! Frame layout for node-to-node traffic.
//!
//! ```text
//! u32 length (bytes after this field) | u64 request_id | u8 kind | u8 op | body
//! ```
//!
//! All integers and floats are big-endian. Amplitudes travel as interleaved
//! `(re, im)` f64 pairs.

use bytes::{Buf, BufMut};
use thiserror::Error;

use crate::engine::C64;
use crate::vnode::types::{AppId, EntanglementId, NodeError, QubitId, SimId};

/// Length prefix plus fixed header: a frame with an empty body is this long.
pub const FRAME_HEADER_LEN: usize = 14;
/// Largest accepted value of the length prefix.
pub const MAX_FRAME_LEN: u32 = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeerCodecError {
    #[error("frame truncated")]
    Truncated,
    #[error("length prefix says {declared} bytes, frame carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("unknown op {0}")]
    UnknownOp(u8),
    #[error("malformed body: {0}")]
    Body(&'static str),
}

impl From<bytes::TryGetError> for PeerCodecError {
    fn from(_: bytes::TryGetError) -> Self {
        PeerCodecError::Truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Request = 0,
    Response = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PeerOp {
    Hello = 0,
    ApplyGate = 1,
    ApplyTwo = 2,
    Measure = 3,
    Remove = 4,
    MergePull = 5,
    XferQubit = 6,
    EprOffer = 7,
    LockAcq = 8,
    LockRel = 9,
    GetTime = 10,
    NodeStateDump = 11,
    Remap = 12,
    BindVirtual = 13,
    Reset = 14,
}

impl PeerOp {
    pub const ALL: [PeerOp; 15] = [
        PeerOp::Hello,
        PeerOp::ApplyGate,
        PeerOp::ApplyTwo,
        PeerOp::Measure,
        PeerOp::Remove,
        PeerOp::MergePull,
        PeerOp::XferQubit,
        PeerOp::EprOffer,
        PeerOp::LockAcq,
        PeerOp::LockRel,
        PeerOp::GetTime,
        PeerOp::NodeStateDump,
        PeerOp::Remap,
        PeerOp::BindVirtual,
        PeerOp::Reset,
    ];

    pub fn from_u8(op: u8) -> Result<Self, PeerCodecError> {
        Self::ALL.get(op as usize).copied().ok_or(PeerCodecError::UnknownOp(op))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerFrame {
    pub request_id: u64,
    pub kind: FrameKind,
    pub op: PeerOp,
    pub body: Vec<u8>,
}

pub fn encode_frame(frame: &PeerFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.body.len());
    out.put_u32((FRAME_HEADER_LEN - 4 + frame.body.len()) as u32);
    out.put_u64(frame.request_id);
    out.put_u8(frame.kind as u8);
    out.put_u8(frame.op as u8);
    out.extend_from_slice(&frame.body);
    out
}

/// Decodes one complete frame, length prefix included.
pub fn decode_frame(bytes: &[u8]) -> Result<PeerFrame, PeerCodecError> {
    if bytes.len() < 4 {
        return Err(PeerCodecError::Truncated);
    }
    let declared = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if declared > MAX_FRAME_LEN {
        return Err(PeerCodecError::TooLarge(declared));
    }
    let actual = bytes.len() - 4;
    if declared as usize != actual {
        return Err(PeerCodecError::LengthMismatch { declared: declared as usize, actual });
    }
    decode_frame_body(&bytes[4..])
}

/// Decodes the part of a frame that follows the length prefix.
pub fn decode_frame_body(mut rest: &[u8]) -> Result<PeerFrame, PeerCodecError> {
    if rest.len() < FRAME_HEADER_LEN - 4 {
        return Err(PeerCodecError::Truncated);
    }
    let request_id = rest.get_u64();
    let kind = match rest.get_u8() {
        0 => FrameKind::Request,
        1 => FrameKind::Response,
        k => return Err(PeerCodecError::UnknownKind(k)),
    };
    let op = PeerOp::from_u8(rest.get_u8())?;
    Ok(PeerFrame { request_id, kind, op, body: rest.to_vec() })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.put_u16(s.len() as u16);
    out.extend_from_slice(s.as_bytes());
}

fn get_str(buf: &mut &[u8]) -> Result<String, PeerCodecError> {
    let len = buf.try_get_u16()? as usize;
    if buf.remaining() < len {
        return Err(PeerCodecError::Truncated);
    }
    let s = std::str::from_utf8(&buf[..len]).map_err(|_| PeerCodecError::Body("string is not UTF-8"))?.to_string();
    buf.advance(len);
    Ok(s)
}

fn get_bool(buf: &mut &[u8]) -> Result<bool, PeerCodecError> {
    match buf.try_get_u8()? {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(PeerCodecError::Body("flag is not 0 or 1")),
    }
}

fn finish<T>(buf: &[u8], value: T) -> Result<T, PeerCodecError> {
    if buf.is_empty() {
        Ok(value)
    } else {
        Err(PeerCodecError::Body("trailing bytes"))
    }
}

fn put_ent(out: &mut Vec<u8>, ent: &EntanglementId) {
    put_str(out, &ent.node_a);
    put_str(out, &ent.node_b);
    out.put_u32(ent.sequence);
    out.put_u64(ent.created_at);
}

fn get_ent(buf: &mut &[u8]) -> Result<EntanglementId, PeerCodecError> {
    Ok(EntanglementId {
        node_a: get_str(buf)?,
        node_b: get_str(buf)?,
        sequence: buf.try_get_u32()?,
        created_at: buf.try_get_u64()?,
    })
}

/// A qubit that travels with a shipped register.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShippedQubit {
    pub sim: SimId,
    pub position: u8,
    pub created_at: u64,
    /// Node holding the virtual qubit that refers to this one.
    pub virt_node: String,
    pub virt: QubitId,
}

/// A whole register on the wire: its amplitudes and the qubits living in it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterPayload {
    pub amplitudes: Vec<C64>,
    pub qubits: Vec<ShippedQubit>,
}

impl RegisterPayload {
    pub fn num_qubits(&self) -> usize {
        self.amplitudes.len().trailing_zeros() as usize
    }

    fn put(&self, out: &mut Vec<u8>) {
        out.put_u8(self.num_qubits() as u8);
        for a in &self.amplitudes {
            out.put_f64(a.re);
            out.put_f64(a.im);
        }
        out.put_u8(self.qubits.len() as u8);
        for q in &self.qubits {
            out.put_u64(q.sim);
            out.put_u8(q.position);
            out.put_u64(q.created_at);
            put_str(out, &q.virt_node);
            out.put_u16(q.virt);
        }
    }

    fn get(buf: &mut &[u8]) -> Result<Self, PeerCodecError> {
        let n = buf.try_get_u8()? as u32;
        if n > 30 {
            return Err(PeerCodecError::Body("register too large"));
        }
        let count = 1usize << n;
        if buf.remaining() < count * 16 {
            return Err(PeerCodecError::Truncated);
        }
        let amplitudes = (0..count).map(|_| C64::new(buf.get_f64(), buf.get_f64())).collect();
        let m = buf.try_get_u8()?;
        let mut qubits = Vec::with_capacity(m as usize);
        for _ in 0..m {
            qubits.push(ShippedQubit {
                sim: buf.try_get_u64()?,
                position: buf.try_get_u8()?,
                created_at: buf.try_get_u64()?,
                virt_node: get_str(buf)?,
                virt: buf.try_get_u16()?,
            });
        }
        Ok(RegisterPayload { amplitudes, qubits })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerRequest {
    /// First message on a connection. An empty name marks a tooling client.
    Hello {
        node: String,
    },
    ApplyGate {
        sim: SimId,
        code: u8,
        step: u8,
    },
    /// Sent to the host of `control`, which coordinates the merge if needed.
    ApplyTwo {
        control: SimId,
        target_host: String,
        target: SimId,
        code: u8,
    },
    Measure {
        sim: SimId,
        inplace: bool,
    },
    Remove {
        sim: SimId,
    },
    MergePull {
        txn: u64,
        register: u64,
    },
    XferQubit {
        to_app: AppId,
        host: String,
        sim: SimId,
    },
    EprOffer {
        to_app: AppId,
        host: String,
        sim: SimId,
        ent: EntanglementId,
    },
    LockAcq {
        txn: u64,
        sim: SimId,
    },
    LockRel {
        txn: u64,
        commit: bool,
    },
    GetTime {
        sim: SimId,
    },
    NodeStateDump,
    Remap {
        virt: QubitId,
        sim: SimId,
        host: String,
    },
    BindVirtual {
        sim: SimId,
        node: String,
        virt: QubitId,
    },
    Reset {
        sim: SimId,
    },
}

impl PeerRequest {
    pub fn op(&self) -> PeerOp {
        match self {
            PeerRequest::Hello { .. } => PeerOp::Hello,
            PeerRequest::ApplyGate { .. } => PeerOp::ApplyGate,
            PeerRequest::ApplyTwo { .. } => PeerOp::ApplyTwo,
            PeerRequest::Measure { .. } => PeerOp::Measure,
            PeerRequest::Remove { .. } => PeerOp::Remove,
            PeerRequest::MergePull { .. } => PeerOp::MergePull,
            PeerRequest::XferQubit { .. } => PeerOp::XferQubit,
            PeerRequest::EprOffer { .. } => PeerOp::EprOffer,
            PeerRequest::LockAcq { .. } => PeerOp::LockAcq,
            PeerRequest::LockRel { .. } => PeerOp::LockRel,
            PeerRequest::GetTime { .. } => PeerOp::GetTime,
            PeerRequest::NodeStateDump => PeerOp::NodeStateDump,
            PeerRequest::Remap { .. } => PeerOp::Remap,
            PeerRequest::BindVirtual { .. } => PeerOp::BindVirtual,
            PeerRequest::Reset { .. } => PeerOp::Reset,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            PeerRequest::Hello { node } => put_str(&mut out, node),
            PeerRequest::ApplyGate { sim, code, step } => {
                out.put_u64(*sim);
                out.put_u8(*code);
                out.put_u8(*step);
            }
            PeerRequest::ApplyTwo { control, target_host, target, code } => {
                out.put_u64(*control);
                put_str(&mut out, target_host);
                out.put_u64(*target);
                out.put_u8(*code);
            }
            PeerRequest::Measure { sim, inplace } => {
                out.put_u64(*sim);
                out.put_u8(*inplace as u8);
            }
            PeerRequest::Remove { sim } | PeerRequest::GetTime { sim } | PeerRequest::Reset { sim } => {
                out.put_u64(*sim)
            }
            PeerRequest::MergePull { txn, register } => {
                out.put_u64(*txn);
                out.put_u64(*register);
            }
            PeerRequest::XferQubit { to_app, host, sim } => {
                out.put_u16(*to_app);
                put_str(&mut out, host);
                out.put_u64(*sim);
            }
            PeerRequest::EprOffer { to_app, host, sim, ent } => {
                out.put_u16(*to_app);
                put_str(&mut out, host);
                out.put_u64(*sim);
                put_ent(&mut out, ent);
            }
            PeerRequest::LockAcq { txn, sim } => {
                out.put_u64(*txn);
                out.put_u64(*sim);
            }
            PeerRequest::LockRel { txn, commit } => {
                out.put_u64(*txn);
                out.put_u8(*commit as u8);
            }
            PeerRequest::NodeStateDump => {}
            PeerRequest::Remap { virt, sim, host } => {
                out.put_u16(*virt);
                out.put_u64(*sim);
                put_str(&mut out, host);
            }
            PeerRequest::BindVirtual { sim, node, virt } => {
                out.put_u64(*sim);
                put_str(&mut out, node);
                out.put_u16(*virt);
            }
        }
        out
    }

    pub fn decode(op: PeerOp, body: &[u8]) -> Result<Self, PeerCodecError> {
        let mut b = body;
        let buf = &mut b;
        let req = match op {
            PeerOp::Hello => PeerRequest::Hello { node: get_str(buf)? },
            PeerOp::ApplyGate => {
                PeerRequest::ApplyGate { sim: buf.try_get_u64()?, code: buf.try_get_u8()?, step: buf.try_get_u8()? }
            }
            PeerOp::ApplyTwo => PeerRequest::ApplyTwo {
                control: buf.try_get_u64()?,
                target_host: get_str(buf)?,
                target: buf.try_get_u64()?,
                code: buf.try_get_u8()?,
            },
            PeerOp::Measure => PeerRequest::Measure { sim: buf.try_get_u64()?, inplace: get_bool(buf)? },
            PeerOp::Remove => PeerRequest::Remove { sim: buf.try_get_u64()? },
            PeerOp::GetTime => PeerRequest::GetTime { sim: buf.try_get_u64()? },
            PeerOp::Reset => PeerRequest::Reset { sim: buf.try_get_u64()? },
            PeerOp::MergePull => PeerRequest::MergePull { txn: buf.try_get_u64()?, register: buf.try_get_u64()? },
            PeerOp::XferQubit => {
                PeerRequest::XferQubit { to_app: buf.try_get_u16()?, host: get_str(buf)?, sim: buf.try_get_u64()? }
            }
            PeerOp::EprOffer => PeerRequest::EprOffer {
                to_app: buf.try_get_u16()?,
                host: get_str(buf)?,
                sim: buf.try_get_u64()?,
                ent: get_ent(buf)?,
            },
            PeerOp::LockAcq => PeerRequest::LockAcq { txn: buf.try_get_u64()?, sim: buf.try_get_u64()? },
            PeerOp::LockRel => PeerRequest::LockRel { txn: buf.try_get_u64()?, commit: get_bool(buf)? },
            PeerOp::NodeStateDump => PeerRequest::NodeStateDump,
            PeerOp::Remap => {
                PeerRequest::Remap { virt: buf.try_get_u16()?, sim: buf.try_get_u64()?, host: get_str(buf)? }
            }
            PeerOp::BindVirtual => {
                PeerRequest::BindVirtual { sim: buf.try_get_u64()?, node: get_str(buf)?, virt: buf.try_get_u16()? }
            }
        };
        finish(buf, req)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeerResponse {
    Ok,
    Outcome(u8),
    Time(u64),
    /// The qubit has moved; ask this node instead.
    Moved(String),
    Granted {
        register: u64,
        num_qubits: u8,
    },
    Conflict,
    Register(RegisterPayload),
    Dump(String),
    Error(NodeError),
}

impl PeerResponse {
    pub fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            PeerResponse::Ok => out.put_u8(0),
            PeerResponse::Outcome(b) => {
                out.put_u8(1);
                out.put_u8(*b);
            }
            PeerResponse::Time(t) => {
                out.put_u8(2);
                out.put_u64(*t);
            }
            PeerResponse::Moved(h) => {
                out.put_u8(3);
                put_str(&mut out, h);
            }
            PeerResponse::Granted { register, num_qubits } => {
                out.put_u8(4);
                out.put_u64(*register);
                out.put_u8(*num_qubits);
            }
            PeerResponse::Conflict => out.put_u8(5),
            PeerResponse::Register(p) => {
                out.put_u8(6);
                p.put(&mut out);
            }
            PeerResponse::Dump(text) => {
                out.put_u8(7);
                out.put_u32(text.len() as u32);
                out.extend_from_slice(text.as_bytes());
            }
            PeerResponse::Error(e) => {
                let (code, arg, msg) = e.to_wire();
                out.put_u8(8);
                out.put_u8(code);
                out.put_u64(arg);
                put_str(&mut out, &msg);
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, PeerCodecError> {
        let mut b = body;
        let buf = &mut b;
        let resp = match buf.try_get_u8()? {
            0 => PeerResponse::Ok,
            1 => PeerResponse::Outcome(buf.try_get_u8()?),
            2 => PeerResponse::Time(buf.try_get_u64()?),
            3 => PeerResponse::Moved(get_str(buf)?),
            4 => PeerResponse::Granted { register: buf.try_get_u64()?, num_qubits: buf.try_get_u8()? },
            5 => PeerResponse::Conflict,
            6 => PeerResponse::Register(RegisterPayload::get(buf)?),
            7 => {
                let len = buf.try_get_u32()? as usize;
                if buf.remaining() < len {
                    return Err(PeerCodecError::Truncated);
                }
                let text =
                    String::from_utf8(buf[..len].to_vec()).map_err(|_| PeerCodecError::Body("dump is not UTF-8"))?;
                buf.advance(len);
                PeerResponse::Dump(text)
            }
            8 => {
                let code = buf.try_get_u8()?;
                let arg = buf.try_get_u64()?;
                PeerResponse::Error(NodeError::from_wire(code, arg, get_str(buf)?))
            }
            _ => return Err(PeerCodecError::Body("unknown response tag")),
        };
        finish(buf, resp)
    }
}
