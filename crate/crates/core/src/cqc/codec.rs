//! CQC wire format.
//!
//! Every message starts with an 8-byte header:
//!
//! ```text
//! u8 version | u8 type | u16 app_id | u32 length (payload bytes)
//! ```
//!
//! A `COMMAND` or `FACTORY` payload is a list of 4-byte command headers
//! (`u16 qubit_id | u8 instruction | u8 options`). Commands that name a second
//! qubit, a remote party, an angle or a count, every `FACTORY` command, and
//! every command carrying a conditional block are followed by a 16-byte extra
//! header:
//!
//! ```text
//! u16 extra_qubit_id | u16 remote_app_id | u32 remote_node (IPv4)
//! u16 remote_port | u32 action_length | u8 step | u8 pad
//! ```
//!
//! `action_length` bytes of nested commands follow when it is non-zero.
//! All integers are big-endian.

use bytes::{Buf, BufMut};
use thiserror::Error;

use crate::engine::GateCode;

pub const CQC_VERSION: u8 = 1;
pub const CQC_HEADER_LEN: usize = 8;
pub const COMMAND_HEADER_LEN: usize = 4;
pub const EXTRA_HEADER_LEN: usize = 16;
pub const ENT_INFO_LEN: usize = 20;
/// Nesting limit for conditional blocks.
pub const MAX_BLOCK_DEPTH: usize = 16;

pub const OPT_NOTIFY: u8 = 0x01;
pub const OPT_ACTION: u8 = 0x02;
pub const OPT_BLOCK: u8 = 0x04;
pub const OPT_IFTHEN: u8 = 0x08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Command = 1,
    Factory = 2,
    Expire = 3,
    Done = 4,
    Recv = 5,
    EprOk = 6,
    MeasOut = 7,
    GetTime = 8,
    InfTime = 9,
    NewOk = 10,
    ErrGeneral = 20,
    ErrNoQubit = 21,
    ErrUnsupp = 22,
    ErrTimeout = 23,
    ErrUnknown = 25,
    ErrDenied = 26,
    ErrVersion = 27,
    ErrUnavailable = 28,
}

impl MsgType {
    pub const ALL: [MsgType; 19] = [
        MsgType::Hello,
        MsgType::Command,
        MsgType::Factory,
        MsgType::Expire,
        MsgType::Done,
        MsgType::Recv,
        MsgType::EprOk,
        MsgType::MeasOut,
        MsgType::GetTime,
        MsgType::InfTime,
        MsgType::NewOk,
        MsgType::ErrGeneral,
        MsgType::ErrNoQubit,
        MsgType::ErrUnsupp,
        MsgType::ErrTimeout,
        MsgType::ErrUnknown,
        MsgType::ErrDenied,
        MsgType::ErrVersion,
        MsgType::ErrUnavailable,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| *t as u8 == v)
    }

    pub fn is_error(self) -> bool {
        self as u8 >= 20
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Instruction {
    I = 0,
    New = 1,
    Measure = 2,
    MeasureInplace = 3,
    Reset = 4,
    Send = 5,
    Recv = 6,
    Epr = 7,
    RecvEpr = 8,
    Swap = 9,
    X = 10,
    Z = 11,
    Y = 12,
    T = 13,
    RotX = 14,
    RotY = 15,
    RotZ = 16,
    H = 17,
    K = 18,
    Cnot = 20,
    Cphase = 21,
    Allocate = 22,
    Release = 23,
}

impl Instruction {
    pub const ALL: [Instruction; 23] = [
        Instruction::I,
        Instruction::New,
        Instruction::Measure,
        Instruction::MeasureInplace,
        Instruction::Reset,
        Instruction::Send,
        Instruction::Recv,
        Instruction::Epr,
        Instruction::RecvEpr,
        Instruction::Swap,
        Instruction::X,
        Instruction::Z,
        Instruction::Y,
        Instruction::T,
        Instruction::RotX,
        Instruction::RotY,
        Instruction::RotZ,
        Instruction::H,
        Instruction::K,
        Instruction::Cnot,
        Instruction::Cphase,
        Instruction::Allocate,
        Instruction::Release,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|i| *i as u8 == v)
    }

    /// The engine gate for gate instructions.
    pub fn gate(self) -> Option<GateCode> {
        GateCode::from_u8(self as u8).ok()
    }

    /// Whether the extra header is always present for this instruction.
    pub fn has_extra(self) -> bool {
        matches!(
            self,
            Instruction::Send
                | Instruction::Recv
                | Instruction::Epr
                | Instruction::Swap
                | Instruction::RotX
                | Instruction::RotY
                | Instruction::RotZ
                | Instruction::Cnot
                | Instruction::Cphase
                | Instruction::Allocate
        )
    }

    pub fn is_measurement(self) -> bool {
        matches!(self, Instruction::Measure | Instruction::MeasureInplace)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CqcError {
    #[error("message truncated")]
    Truncated,
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown instruction {0}")]
    UnknownInstruction(u8),
    #[error("message type {0:?} is not a request")]
    NotARequest(MsgType),
    #[error("header declares {declared} payload bytes, found {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("action block length does not match its options")]
    ActionLength,
    #[error("conditional blocks nested too deeply")]
    TooDeep,
}

impl CqcError {
    /// Reply type reporting this decode failure to the client.
    pub fn reply_type(&self) -> MsgType {
        match self {
            CqcError::Version(_) => MsgType::ErrVersion,
            CqcError::UnknownType(_) | CqcError::UnknownInstruction(_) | CqcError::NotARequest(_) => MsgType::ErrUnsupp,
            _ => MsgType::ErrGeneral,
        }
    }

    /// Framing errors leave the stream unusable.
    pub fn closes_connection(&self) -> bool {
        matches!(
            self,
            CqcError::Truncated | CqcError::LengthMismatch { .. } | CqcError::ActionLength | CqcError::TooDeep
        )
    }
}

impl From<bytes::TryGetError> for CqcError {
    fn from(_: bytes::TryGetError) -> Self {
        CqcError::Truncated
    }
}

/// Header as read off the wire. The version and type are kept raw so the
/// server can answer unsupported values with the matching error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CqcHeader {
    pub version: u8,
    pub msg_type: u8,
    pub app_id: u16,
    pub length: u32,
}

impl CqcHeader {
    pub fn encode(&self) -> [u8; CQC_HEADER_LEN] {
        let mut out = [0u8; CQC_HEADER_LEN];
        out[0] = self.version;
        out[1] = self.msg_type;
        out[2..4].copy_from_slice(&self.app_id.to_be_bytes());
        out[4..8].copy_from_slice(&self.length.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8; CQC_HEADER_LEN]) -> Self {
        CqcHeader {
            version: bytes[0],
            msg_type: bytes[1],
            app_id: u16::from_be_bytes([bytes[2], bytes[3]]),
            length: u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandHeader {
    pub qubit_id: u16,
    pub instruction: Instruction,
    pub options: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtraHeader {
    pub extra_qubit_id: u16,
    pub remote_app_id: u16,
    pub remote_node: u32,
    pub remote_port: u16,
    /// Rotation angle in units of 2π/256, or a repeat/allocation count.
    pub step: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub header: CommandHeader,
    pub extra: Option<ExtraHeader>,
    /// Commands run after this one when `OPT_ACTION` or `OPT_IFTHEN` is set.
    pub block: Vec<Command>,
}

impl Command {
    pub fn new(qubit_id: u16, instruction: Instruction, options: u8) -> Self {
        let extra = instruction.has_extra().then(ExtraHeader::default);
        Command { header: CommandHeader { qubit_id, instruction, options }, extra, block: Vec::new() }
    }

    pub fn with_extra(mut self, extra: ExtraHeader) -> Self {
        self.extra = Some(extra);
        self
    }

    /// Attaches a block run unconditionally (`ACTION`) or when this
    /// measurement yields 1 (`IFTHEN`).
    pub fn with_block(mut self, conditional: bool, block: Vec<Command>) -> Self {
        self.header.options |= if conditional { OPT_IFTHEN } else { OPT_ACTION };
        self.extra.get_or_insert_with(ExtraHeader::default);
        self.block = block;
        self
    }

    pub fn extra(&self) -> ExtraHeader {
        self.extra.unwrap_or_default()
    }

    fn needs_extra(instruction: Instruction, options: u8, factory: bool) -> bool {
        factory || instruction.has_extra() || options & (OPT_ACTION | OPT_IFTHEN) != 0
    }

    fn put(&self, out: &mut Vec<u8>, factory: bool) {
        out.put_u16(self.header.qubit_id);
        out.put_u8(self.header.instruction as u8);
        out.put_u8(self.header.options);
        if Self::needs_extra(self.header.instruction, self.header.options, factory) {
            let block = encode_commands(&self.block, false);
            let e = self.extra();
            out.put_u16(e.extra_qubit_id);
            out.put_u16(e.remote_app_id);
            out.put_u32(e.remote_node);
            out.put_u16(e.remote_port);
            out.put_u32(block.len() as u32);
            out.put_u8(e.step);
            out.put_u8(0);
            out.extend_from_slice(&block);
        }
    }

    fn get(buf: &mut &[u8], factory: bool, depth: usize) -> Result<Self, CqcError> {
        if depth > MAX_BLOCK_DEPTH {
            return Err(CqcError::TooDeep);
        }
        let qubit_id = buf.try_get_u16()?;
        let raw = buf.try_get_u8()?;
        let instruction = Instruction::from_u8(raw).ok_or(CqcError::UnknownInstruction(raw))?;
        let options = buf.try_get_u8()?;
        let header = CommandHeader { qubit_id, instruction, options };
        if !Self::needs_extra(instruction, options, factory) {
            return Ok(Command { header, extra: None, block: Vec::new() });
        }
        let extra_qubit_id = buf.try_get_u16()?;
        let remote_app_id = buf.try_get_u16()?;
        let remote_node = buf.try_get_u32()?;
        let remote_port = buf.try_get_u16()?;
        let action_length = buf.try_get_u32()? as usize;
        let step = buf.try_get_u8()?;
        let _pad = buf.try_get_u8()?;
        let conditional = options & (OPT_ACTION | OPT_IFTHEN) != 0;
        if action_length > 0 && !conditional {
            return Err(CqcError::ActionLength);
        }
        if buf.remaining() < action_length {
            return Err(CqcError::ActionLength);
        }
        let mut block_bytes = &buf[..action_length];
        buf.advance(action_length);
        let mut block = Vec::new();
        while !block_bytes.is_empty() {
            block.push(Command::get(&mut block_bytes, false, depth + 1).map_err(|e| match e {
                CqcError::Truncated => CqcError::ActionLength,
                other => other,
            })?);
        }
        let extra = ExtraHeader { extra_qubit_id, remote_app_id, remote_node, remote_port, step };
        Ok(Command { header, extra: Some(extra), block })
    }
}

pub fn encode_commands(commands: &[Command], factory: bool) -> Vec<u8> {
    let mut out = Vec::new();
    for c in commands {
        c.put(&mut out, factory);
    }
    out
}

/// A decoded client request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CqcRequest {
    Hello {
        app_id: u16,
    },
    Command {
        app_id: u16,
        commands: Vec<Command>,
    },
    /// Runs `command` `extra.step` times.
    Factory {
        app_id: u16,
        command: Command,
    },
    GetTime {
        app_id: u16,
        qubit_id: u16,
    },
}

impl CqcRequest {
    pub fn app_id(&self) -> u16 {
        match self {
            CqcRequest::Hello { app_id }
            | CqcRequest::Command { app_id, .. }
            | CqcRequest::Factory { app_id, .. }
            | CqcRequest::GetTime { app_id, .. } => *app_id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (msg_type, payload) = match self {
            CqcRequest::Hello { .. } => (MsgType::Hello, Vec::new()),
            CqcRequest::Command { commands, .. } => (MsgType::Command, encode_commands(commands, false)),
            CqcRequest::Factory { command, .. } => {
                (MsgType::Factory, encode_commands(std::slice::from_ref(command), true))
            }
            CqcRequest::GetTime { qubit_id, .. } => {
                let mut p = Vec::new();
                p.put_u16(*qubit_id);
                p.put_u8(Instruction::I as u8);
                p.put_u8(0);
                (MsgType::GetTime, p)
            }
        };
        let header = CqcHeader {
            version: CQC_VERSION,
            msg_type: msg_type as u8,
            app_id: self.app_id(),
            length: payload.len() as u32,
        };
        let mut out = header.encode().to_vec();
        out.extend_from_slice(&payload);
        out
    }

    /// Decodes the payload that follows `header`.
    pub fn decode_payload(header: &CqcHeader, payload: &[u8]) -> Result<Self, CqcError> {
        if header.version != CQC_VERSION {
            return Err(CqcError::Version(header.version));
        }
        let msg_type = MsgType::from_u8(header.msg_type).ok_or(CqcError::UnknownType(header.msg_type))?;
        if payload.len() != header.length as usize {
            return Err(CqcError::LengthMismatch { declared: header.length as usize, actual: payload.len() });
        }
        let app_id = header.app_id;
        let mut buf = payload;
        let req = match msg_type {
            MsgType::Hello => CqcRequest::Hello { app_id },
            MsgType::Command => {
                let mut commands = Vec::new();
                while !buf.is_empty() {
                    commands.push(Command::get(&mut buf, false, 0)?);
                }
                CqcRequest::Command { app_id, commands }
            }
            MsgType::Factory => CqcRequest::Factory { app_id, command: Command::get(&mut buf, true, 0)? },
            MsgType::GetTime => {
                let qubit_id = buf.try_get_u16()?;
                buf.try_get_u16()?;
                CqcRequest::GetTime { app_id, qubit_id }
            }
            other => return Err(CqcError::NotARequest(other)),
        };
        if !buf.is_empty() {
            return Err(CqcError::LengthMismatch {
                declared: header.length as usize,
                actual: payload.len() - buf.len(),
            });
        }
        Ok(req)
    }

    /// Decodes one whole message, header included.
    pub fn decode(bytes: &[u8]) -> Result<Self, CqcError> {
        if bytes.len() < CQC_HEADER_LEN {
            return Err(CqcError::Truncated);
        }
        let header = CqcHeader::decode(bytes[..CQC_HEADER_LEN].try_into().unwrap());
        Self::decode_payload(&header, &bytes[CQC_HEADER_LEN..])
    }
}

/// Entanglement metadata as carried in `EPR_OK` replies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntInfo {
    /// Directory index of the creating node.
    pub node_a: u32,
    /// Directory index of the receiving node.
    pub node_b: u32,
    pub sequence: u32,
    /// Creation time, milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyBody {
    Empty,
    QubitId(u16),
    Outcome(u8),
    Epr { qubit_id: u16, ent: EntInfo },
    Time(u64),
    Hello { max_qubits: u16, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CqcReply {
    pub msg_type: MsgType,
    pub app_id: u16,
    pub body: ReplyBody,
}

impl CqcReply {
    pub fn new(msg_type: MsgType, app_id: u16, body: ReplyBody) -> Self {
        CqcReply { msg_type, app_id, body }
    }

    pub fn error(msg_type: MsgType, app_id: u16) -> Self {
        CqcReply { msg_type, app_id, body: ReplyBody::Empty }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match &self.body {
            ReplyBody::Empty => {}
            ReplyBody::QubitId(q) => body.put_u16(*q),
            ReplyBody::Outcome(b) => body.put_u8(*b),
            ReplyBody::Epr { qubit_id, ent } => {
                body.put_u16(*qubit_id);
                body.put_u32(ent.node_a);
                body.put_u32(ent.node_b);
                body.put_u32(ent.sequence);
                body.put_u64(ent.created_at);
            }
            ReplyBody::Time(t) => body.put_u64(*t),
            ReplyBody::Hello { max_qubits, name } => {
                body.put_u16(*max_qubits);
                body.put_u8(name.len() as u8);
                body.extend_from_slice(&name.as_bytes()[..name.len().min(255)]);
            }
        }
        let header = CqcHeader {
            version: CQC_VERSION,
            msg_type: self.msg_type as u8,
            app_id: self.app_id,
            length: body.len() as u32,
        };
        let mut out = header.encode().to_vec();
        out.extend_from_slice(&body);
        out
    }

    pub fn decode_payload(header: &CqcHeader, payload: &[u8]) -> Result<Self, CqcError> {
        if header.version != CQC_VERSION {
            return Err(CqcError::Version(header.version));
        }
        let msg_type = MsgType::from_u8(header.msg_type).ok_or(CqcError::UnknownType(header.msg_type))?;
        if payload.len() != header.length as usize {
            return Err(CqcError::LengthMismatch { declared: header.length as usize, actual: payload.len() });
        }
        let mut buf = payload;
        let body = match msg_type {
            MsgType::NewOk | MsgType::Recv | MsgType::Expire => ReplyBody::QubitId(buf.try_get_u16()?),
            MsgType::MeasOut => ReplyBody::Outcome(buf.try_get_u8()?),
            MsgType::EprOk => ReplyBody::Epr {
                qubit_id: buf.try_get_u16()?,
                ent: EntInfo {
                    node_a: buf.try_get_u32()?,
                    node_b: buf.try_get_u32()?,
                    sequence: buf.try_get_u32()?,
                    created_at: buf.try_get_u64()?,
                },
            },
            MsgType::InfTime => ReplyBody::Time(buf.try_get_u64()?),
            MsgType::Hello => {
                let max_qubits = buf.try_get_u16()?;
                let len = buf.try_get_u8()? as usize;
                if buf.remaining() < len {
                    return Err(CqcError::Truncated);
                }
                let name = String::from_utf8_lossy(&buf[..len]).into_owned();
                buf.advance(len);
                ReplyBody::Hello { max_qubits, name }
            }
            _ => ReplyBody::Empty,
        };
        if !buf.is_empty() {
            return Err(CqcError::LengthMismatch {
                declared: header.length as usize,
                actual: payload.len() - buf.len(),
            });
        }
        Ok(CqcReply { msg_type, app_id: header.app_id, body })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CqcError> {
        if bytes.len() < CQC_HEADER_LEN {
            return Err(CqcError::Truncated);
        }
        let header = CqcHeader::decode(bytes[..CQC_HEADER_LEN].try_into().unwrap());
        Self::decode_payload(&header, &bytes[CQC_HEADER_LEN..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = CqcRequest::Hello { app_id: 0x0102 }.encode();
        assert_eq!(bytes, vec![1, 0, 1, 2, 0, 0, 0, 0]);
    }

    #[test]
    fn cnot_carries_extra_header() {
        let cmd = Command::new(3, Instruction::Cnot, OPT_NOTIFY | OPT_BLOCK)
            .with_extra(ExtraHeader { extra_qubit_id: 4, ..Default::default() });
        let bytes = CqcRequest::Command { app_id: 7, commands: vec![cmd] }.encode();
        assert_eq!(bytes.len(), CQC_HEADER_LEN + COMMAND_HEADER_LEN + EXTRA_HEADER_LEN);
        assert_eq!(&bytes[8..12], &[0, 3, 20, 5]);
        assert_eq!(&bytes[12..14], &[0, 4]);
    }

    #[test]
    fn plain_gate_has_no_extra_header() {
        let bytes = CqcRequest::Command { app_id: 1, commands: vec![Command::new(0, Instruction::H, 0)] }.encode();
        assert_eq!(bytes.len(), 12);
    }

    #[test]
    fn nested_block_length_is_written() {
        let inner = Command::new(1, Instruction::X, 0);
        let cmd = Command::new(0, Instruction::Measure, 0).with_block(true, vec![inner]);
        let bytes = CqcRequest::Command { app_id: 1, commands: vec![cmd.clone()] }.encode();
        assert_eq!(&bytes[22..26], &4u32.to_be_bytes());
        assert_eq!(CqcRequest::decode(&bytes).unwrap(), CqcRequest::Command { app_id: 1, commands: vec![cmd] });
    }

    #[test]
    fn bad_version_and_type() {
        let mut bytes = CqcRequest::Hello { app_id: 1 }.encode();
        bytes[0] = 2;
        assert_eq!(CqcRequest::decode(&bytes), Err(CqcError::Version(2)));
        assert_eq!(CqcError::Version(2).reply_type(), MsgType::ErrVersion);
        bytes[0] = 1;
        bytes[1] = 99;
        assert_eq!(CqcRequest::decode(&bytes), Err(CqcError::UnknownType(99)));
        bytes[1] = MsgType::Done as u8;
        assert_eq!(CqcRequest::decode(&bytes), Err(CqcError::NotARequest(MsgType::Done)));
    }

    #[test]
    fn length_mismatch_is_detected() {
        let mut bytes = CqcRequest::Command { app_id: 1, commands: vec![Command::new(0, Instruction::H, 0)] }.encode();
        bytes.push(0);
        let err = CqcRequest::decode(&bytes).unwrap_err();
        assert!(matches!(err, CqcError::LengthMismatch { .. }));
        assert!(err.closes_connection());
        // declared length 6 cuts a command header in half
        let mut short =
            CqcRequest::Command { app_id: 1, commands: vec![Command::new(0, Instruction::H, 0); 2] }.encode();
        short[7] = 6;
        short.truncate(14);
        assert!(CqcRequest::decode(&short).is_err());
    }

    #[test]
    fn unknown_instruction() {
        let mut bytes = CqcRequest::Command { app_id: 1, commands: vec![Command::new(0, Instruction::H, 0)] }.encode();
        bytes[10] = 19;
        assert_eq!(CqcRequest::decode(&bytes), Err(CqcError::UnknownInstruction(19)));
    }

    #[test]
    fn action_length_without_flag_is_rejected() {
        let cmd =
            Command::new(0, Instruction::Cnot, 0).with_extra(ExtraHeader { extra_qubit_id: 1, ..Default::default() });
        let mut bytes = CqcRequest::Command { app_id: 1, commands: vec![cmd] }.encode();
        bytes.extend_from_slice(&[0, 1, 17, 0]);
        bytes[7] += 4;
        bytes[8 + 4 + 10..8 + 4 + 14].copy_from_slice(&4u32.to_be_bytes());
        assert_eq!(CqcRequest::decode(&bytes), Err(CqcError::ActionLength));
    }

    #[test]
    fn reply_bodies() {
        let epr = CqcReply::new(
            MsgType::EprOk,
            3,
            ReplyBody::Epr { qubit_id: 9, ent: EntInfo { node_a: 0, node_b: 1, sequence: 2, created_at: 3 } },
        );
        let bytes = epr.encode();
        assert_eq!(bytes.len(), 8 + 2 + ENT_INFO_LEN);
        assert_eq!(CqcReply::decode(&bytes).unwrap(), epr);
        let done = CqcReply::error(MsgType::Done, 3).encode();
        assert_eq!(done, vec![1, 4, 0, 3, 0, 0, 0, 0]);
    }

    fn simple_command(factory: bool) -> impl Strategy<Value = Command> {
        (any::<u16>(), prop::sample::select(Instruction::ALL.to_vec()), 0u8..16, any::<(u16, u16, u32, u16, u8)>())
            .prop_map(move |(q, instr, opts, (eq, app, node, port, step))| {
                let opts = opts & !(OPT_ACTION | OPT_IFTHEN);
                let mut c = Command::new(q, instr, opts);
                if Command::needs_extra(instr, opts, factory) {
                    c.extra = Some(ExtraHeader {
                        extra_qubit_id: eq,
                        remote_app_id: app,
                        remote_node: node,
                        remote_port: port,
                        step,
                    });
                }
                c
            })
    }

    fn command(factory: bool) -> impl Strategy<Value = Command> {
        (simple_command(factory), prop::collection::vec(simple_command(false), 0..3), any::<bool>(), any::<bool>())
            .prop_map(|(c, block, attach, conditional)| if attach { c.with_block(conditional, block) } else { c })
    }

    fn request() -> impl Strategy<Value = CqcRequest> {
        prop_oneof![
            any::<u16>().prop_map(|app_id| CqcRequest::Hello { app_id }),
            (any::<u16>(), prop::collection::vec(command(false), 0..6))
                .prop_map(|(app_id, commands)| CqcRequest::Command { app_id, commands }),
            (any::<u16>(), command(true)).prop_map(|(app_id, command)| CqcRequest::Factory { app_id, command }),
            (any::<u16>(), any::<u16>()).prop_map(|(app_id, qubit_id)| CqcRequest::GetTime { app_id, qubit_id }),
        ]
    }

    proptest! {
        #[test]
        fn requests_round_trip(req in request()) {
            let bytes = req.encode();
            prop_assert_eq!(bytes.len() - CQC_HEADER_LEN, u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize);
            prop_assert_eq!(CqcRequest::decode(&bytes).unwrap(), req);
        }

        #[test]
        fn replies_round_trip(t in prop::sample::select(MsgType::ALL.to_vec()), app in any::<u16>(), v in any::<u64>(), name in "[a-z]{0,12}") {
            let body = match t {
                MsgType::NewOk | MsgType::Recv | MsgType::Expire => ReplyBody::QubitId(v as u16),
                MsgType::MeasOut => ReplyBody::Outcome((v & 1) as u8),
                MsgType::EprOk => ReplyBody::Epr { qubit_id: v as u16, ent: EntInfo { node_a: 1, node_b: 2, sequence: v as u32, created_at: v } },
                MsgType::InfTime => ReplyBody::Time(v),
                MsgType::Hello => ReplyBody::Hello { max_qubits: v as u16, name },
                _ => ReplyBody::Empty,
            };
            let reply = CqcReply::new(t, app, body);
            prop_assert_eq!(CqcReply::decode(&reply.encode()).unwrap(), reply);
        }

        #[test]
        fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
            let _ = CqcRequest::decode(&bytes);
            let _ = CqcReply::decode(&bytes);
        }

        #[test]
        fn mutated_messages_never_panic(req in request(), idx in any::<prop::sample::Index>(), byte in any::<u8>()) {
            let mut bytes = req.encode();
            let i = idx.index(bytes.len());
            bytes[i] = byte;
            let _ = CqcRequest::decode(&bytes);
        }
    }
}
