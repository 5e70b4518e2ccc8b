//! CQC server: one session per client connection, commands executed
//! against the local node.

use std::future::Future;
use std::net::Ipv4Addr;
use std::pin::Pin;
use std::sync::Arc;

use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::AbortHandle;

use super::codec::{
    Command, CqcHeader, CqcReply, CqcRequest, EntInfo, Instruction, MsgType, ReplyBody, CQC_HEADER_LEN, OPT_ACTION,
    OPT_IFTHEN, OPT_NOTIFY,
};
use crate::engine::GateCode;
use crate::vnode::{AppId, EntanglementId, Node, NodeError};

/// Largest payload a client may send in one message.
pub const MAX_PAYLOAD: u32 = 1 << 24;

enum Failure {
    Node(NodeError),
    Reply(MsgType),
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        Failure::Node(e)
    }
}

/// CQC reply type for a node error.
pub fn error_type(e: &NodeError) -> MsgType {
    match e {
        NodeError::NoQubit | NodeError::Capacity { .. } => MsgType::ErrNoQubit,
        NodeError::UnknownQubit(_) => MsgType::ErrUnknown,
        NodeError::Expired(_) => MsgType::Expire,
        NodeError::Denied(_) => MsgType::ErrDenied,
        NodeError::Unavailable(_) => MsgType::ErrUnavailable,
        NodeError::Timeout(_) => MsgType::ErrTimeout,
        NodeError::UnknownSim(_)
        | NodeError::Invalid(_)
        | NodeError::UnknownNode(_)
        | NodeError::Protocol(_)
        | NodeError::Link(_) => MsgType::ErrGeneral,
    }
}

fn failure_reply(f: Failure, app: AppId) -> CqcReply {
    match f {
        Failure::Node(NodeError::Expired(q)) => CqcReply::new(MsgType::Expire, app, ReplyBody::QubitId(q)),
        Failure::Node(e) => {
            tracing::debug!(app, "command failed: {e}");
            CqcReply::error(error_type(&e), app)
        }
        Failure::Reply(t) => CqcReply::error(t, app),
    }
}

fn ent_info(node: &Node, ent: &EntanglementId) -> EntInfo {
    let index = |name: &str| node.directory().index_of(name).map(|i| i as u32).unwrap_or(u32::MAX);
    EntInfo {
        node_a: index(&ent.node_a),
        node_b: index(&ent.node_b),
        sequence: ent.sequence,
        created_at: ent.created_at,
    }
}

fn remote_name(node: &Node, cmd: &Command) -> Result<String, Failure> {
    let e = cmd.extra();
    node.directory()
        .by_cqc_addr(Ipv4Addr::from(e.remote_node), e.remote_port)
        .map(|entry| entry.name.clone())
        .ok_or(Failure::Reply(MsgType::ErrGeneral))
}

type CommandFuture<'a> = Pin<Box<dyn Future<Output = Result<(), Failure>> + Send + 'a>>;

fn run_command<'a>(node: &'a Arc<Node>, app: AppId, cmd: &'a Command, out: &'a mut Vec<CqcReply>) -> CommandFuture<'a> {
    Box::pin(async move {
        let h = cmd.header;
        let e = cmd.extra();
        let q = h.qubit_id;
        if h.options & OPT_IFTHEN != 0 && !h.instruction.is_measurement() {
            return Err(Failure::Reply(MsgType::ErrUnsupp));
        }
        let mut outcome = None;
        match h.instruction {
            Instruction::New => {
                out.push(CqcReply::new(MsgType::NewOk, app, ReplyBody::QubitId(node.create_qubit(app)?)))
            }
            Instruction::Allocate => {
                if e.step == 0 {
                    return Err(Failure::Reply(MsgType::ErrGeneral));
                }
                for _ in 0..e.step {
                    out.push(CqcReply::new(MsgType::NewOk, app, ReplyBody::QubitId(node.create_qubit(app)?)));
                }
            }
            Instruction::Release => node.release(app, q).await?,
            Instruction::Reset => node.reset(app, q).await?,
            Instruction::Measure | Instruction::MeasureInplace => {
                let b = node.measure(app, q, h.instruction == Instruction::MeasureInplace).await?;
                out.push(CqcReply::new(MsgType::MeasOut, app, ReplyBody::Outcome(b)));
                outcome = Some(b);
            }
            Instruction::Send => {
                let dest = remote_name(node, cmd)?;
                node.send_qubit(app, q, &dest, e.remote_app_id).await?;
            }
            Instruction::Recv => {
                let id = node.recv_qubit(app).await?;
                out.push(CqcReply::new(MsgType::Recv, app, ReplyBody::QubitId(id)));
            }
            Instruction::Epr => {
                let dest = remote_name(node, cmd)?;
                let (id, ent) = node.create_epr(app, &dest, e.remote_app_id).await?;
                out.push(CqcReply::new(
                    MsgType::EprOk,
                    app,
                    ReplyBody::Epr { qubit_id: id, ent: ent_info(node, &ent) },
                ));
            }
            Instruction::RecvEpr => {
                let (id, ent) = node.recv_epr(app).await?;
                out.push(CqcReply::new(
                    MsgType::EprOk,
                    app,
                    ReplyBody::Epr { qubit_id: id, ent: ent_info(node, &ent) },
                ));
            }
            Instruction::Swap => {
                let other = e.extra_qubit_id;
                node.apply_two(app, q, other, GateCode::Cnot).await?;
                node.apply_gate(app, q, GateCode::H, 0).await?;
                let b1 = node.measure(app, q, false).await?;
                let b2 = node.measure(app, other, false).await?;
                out.push(CqcReply::new(MsgType::MeasOut, app, ReplyBody::Outcome(b1)));
                out.push(CqcReply::new(MsgType::MeasOut, app, ReplyBody::Outcome(b2)));
            }
            Instruction::Cnot | Instruction::Cphase => {
                let code = h.instruction.gate().expect("two-qubit gate instruction");
                node.apply_two(app, q, e.extra_qubit_id, code).await?;
            }
            gate => {
                let code = gate.gate().ok_or(Failure::Reply(MsgType::ErrUnsupp))?;
                let step = if code.is_rotation() { e.step } else { 0 };
                node.apply_gate(app, q, code, step).await?;
            }
        }
        let run_block = h.options & OPT_ACTION != 0 || (h.options & OPT_IFTHEN != 0 && outcome == Some(1));
        if run_block {
            for inner in &cmd.block {
                run_command(node, app, inner, out).await?;
            }
        }
        Ok(())
    })
}

/// Executes one request and returns every reply it produces, in order.
pub async fn execute(node: &Arc<Node>, req: &CqcRequest) -> Vec<CqcReply> {
    let app = req.app_id();
    let mut out = Vec::new();
    match req {
        CqcRequest::Hello { .. } => {
            let max_qubits = node.config().max_virtual_qubits.min(u16::MAX as usize) as u16;
            out.push(CqcReply::new(
                MsgType::Hello,
                app,
                ReplyBody::Hello { max_qubits, name: node.name().to_string() },
            ));
        }
        CqcRequest::GetTime { qubit_id, .. } => match node.get_time(app, *qubit_id).await {
            Ok(t) => out.push(CqcReply::new(MsgType::InfTime, app, ReplyBody::Time(t))),
            Err(e) => out.push(failure_reply(Failure::Node(e), app)),
        },
        CqcRequest::Command { commands, .. } => {
            let notify = commands.iter().any(|c| c.header.options & OPT_NOTIFY != 0);
            for c in commands {
                if let Err(f) = run_command(node, app, c, &mut out).await {
                    out.push(failure_reply(f, app));
                    return out;
                }
            }
            if notify {
                out.push(CqcReply::error(MsgType::Done, app));
            }
        }
        CqcRequest::Factory { command, .. } => {
            let count = command.extra().step;
            if count == 0 {
                out.push(CqcReply::error(MsgType::ErrGeneral, app));
                return out;
            }
            for _ in 0..count {
                if let Err(f) = run_command(node, app, command, &mut out).await {
                    out.push(failure_reply(f, app));
                    return out;
                }
            }
            if command.header.options & OPT_NOTIFY != 0 {
                out.push(CqcReply::error(MsgType::Done, app));
            }
        }
    }
    out
}

async fn session(node: Arc<Node>, stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let (mut reader, mut writer) = stream.into_split();
    loop {
        let mut head = [0u8; CQC_HEADER_LEN];
        match reader.read_exact(&mut head).await {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        let header = CqcHeader::decode(&head);
        if header.length > MAX_PAYLOAD {
            writer.write_all(&CqcReply::error(MsgType::ErrGeneral, header.app_id).encode()).await?;
            return Ok(());
        }
        let mut payload = vec![0u8; header.length as usize];
        reader.read_exact(&mut payload).await?;
        match CqcRequest::decode_payload(&header, &payload) {
            Ok(req) => {
                let mut bytes = Vec::new();
                for reply in execute(&node, &req).await {
                    bytes.extend_from_slice(&reply.encode());
                }
                writer.write_all(&bytes).await?;
            }
            Err(e) => {
                tracing::debug!(node = %node.name(), "bad CQC message: {e}");
                writer.write_all(&CqcReply::error(e.reply_type(), header.app_id).encode()).await?;
                if e.closes_connection() {
                    return Ok(());
                }
            }
        }
    }
}

/// Accept loop for a node's CQC port.
pub struct CqcServer {
    tasks: Arc<Mutex<Vec<AbortHandle>>>,
}

impl CqcServer {
    pub fn spawn(node: Arc<Node>, listener: TcpListener) -> Self {
        let tasks: Arc<Mutex<Vec<AbortHandle>>> = Arc::default();
        let tasks2 = tasks.clone();
        let accept = tokio::spawn(async move {
            while let Ok((stream, _)) = listener.accept().await {
                let node = node.clone();
                let h = tokio::spawn(async move {
                    if let Err(e) = session(node, stream).await {
                        tracing::debug!("CQC session ended: {e}");
                    }
                });
                let mut t = tasks2.lock();
                t.retain(|h| !h.is_finished());
                t.push(h.abort_handle());
            }
        });
        tasks.lock().push(accept.abort_handle());
        CqcServer { tasks }
    }

    pub fn shutdown(&self) {
        for h in self.tasks.lock().drain(..) {
            h.abort();
        }
    }
}
