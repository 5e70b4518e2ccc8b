//! CQC client used by the benchmarks, tests and the C interface.

use std::net::SocketAddr;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use super::codec::{
    Command, CqcError, CqcHeader, CqcReply, CqcRequest, EntInfo, ExtraHeader, Instruction, MsgType, ReplyBody,
    CQC_HEADER_LEN, OPT_BLOCK, OPT_NOTIFY,
};
use crate::netconf::NodeDirectory;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Codec(#[from] CqcError),
    #[error("server replied {0:?}")]
    Server(MsgType),
    #[error("qubit {0} has expired")]
    Expired(u16),
    #[error("unexpected reply {0:?}")]
    Unexpected(MsgType),
    #[error("unknown node '{0}'")]
    UnknownNode(String),
}

impl From<std::io::Error> for ClientError {
    fn from(e: std::io::Error) -> Self {
        ClientError::Io(e.to_string())
    }
}

impl ClientError {
    /// The CQC reply type behind this error, if the server sent one.
    pub fn reply_type(&self) -> Option<MsgType> {
        match self {
            ClientError::Server(t) | ClientError::Unexpected(t) => Some(*t),
            ClientError::Expired(_) => Some(MsgType::Expire),
            _ => None,
        }
    }
}

pub struct CqcClient {
    reader: OwnedReadHalf,
    writer: OwnedWriteHalf,
    app_id: u16,
    directory: NodeDirectory,
}

impl CqcClient {
    /// Connects as application `app_id`. The directory resolves node names
    /// for `send` and `create_epr`.
    pub async fn connect(addr: SocketAddr, app_id: u16, directory: NodeDirectory) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (reader, writer) = stream.into_split();
        Ok(CqcClient { reader, writer, app_id, directory })
    }

    pub fn app_id(&self) -> u16 {
        self.app_id
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.writer.write_all(bytes).await?;
        Ok(())
    }

    pub async fn read_reply(&mut self) -> Result<CqcReply, ClientError> {
        let mut head = [0u8; CQC_HEADER_LEN];
        self.reader.read_exact(&mut head).await?;
        let header = CqcHeader::decode(&head);
        let mut payload = vec![0u8; header.length as usize];
        self.reader.read_exact(&mut payload).await?;
        Ok(CqcReply::decode_payload(&header, &payload)?)
    }

    /// Sends a request and collects replies up to the terminating one:
    /// `DONE`, an error, or the single reply of `HELLO`/`GET_TIME`.
    pub async fn request(&mut self, req: &CqcRequest) -> Result<Vec<CqcReply>, ClientError> {
        self.send_raw(&req.encode()).await?;
        let single = matches!(req, CqcRequest::Hello { .. } | CqcRequest::GetTime { .. });
        let mut replies = Vec::new();
        loop {
            let r = self.read_reply().await?;
            let t = r.msg_type;
            if t.is_error() {
                return Err(ClientError::Server(t));
            }
            if t == MsgType::Expire {
                let q = match r.body {
                    ReplyBody::QubitId(q) => q,
                    _ => 0,
                };
                return Err(ClientError::Expired(q));
            }
            if t == MsgType::Done {
                return Ok(replies);
            }
            replies.push(r);
            if single {
                return Ok(replies);
            }
        }
    }

    /// Runs a batch of commands as one message and returns the replies.
    pub async fn run(&mut self, mut commands: Vec<Command>) -> Result<Vec<CqcReply>, ClientError> {
        if let Some(last) = commands.last_mut() {
            last.header.options |= OPT_NOTIFY | OPT_BLOCK;
        }
        self.request(&CqcRequest::Command { app_id: self.app_id, commands }).await
    }

    /// Runs `command` `count` times in one `FACTORY` message.
    pub async fn factory(&mut self, mut command: Command, count: u8) -> Result<Vec<CqcReply>, ClientError> {
        command.header.options |= OPT_NOTIFY | OPT_BLOCK;
        command.extra.get_or_insert_with(ExtraHeader::default).step = count;
        self.request(&CqcRequest::Factory { app_id: self.app_id, command }).await
    }

    async fn one(&mut self, cmd: Command) -> Result<Vec<CqcReply>, ClientError> {
        self.run(vec![cmd]).await
    }

    fn expect_one(replies: Vec<CqcReply>, want: MsgType) -> Result<ReplyBody, ClientError> {
        match replies.into_iter().next() {
            Some(r) if r.msg_type == want => Ok(r.body),
            Some(r) => Err(ClientError::Unexpected(r.msg_type)),
            None => Err(ClientError::Unexpected(MsgType::Done)),
        }
    }

    fn remote(&self, node: &str, remote_app: u16) -> Result<ExtraHeader, ClientError> {
        let entry = self.directory.get(node).map_err(|_| ClientError::UnknownNode(node.to_string()))?;
        let ip = entry.ipv4().map_err(|_| ClientError::UnknownNode(node.to_string()))?;
        Ok(ExtraHeader {
            remote_app_id: remote_app,
            remote_node: u32::from(ip),
            remote_port: entry.cqc_port,
            ..Default::default()
        })
    }

    /// Returns the server's node name and qubit capacity.
    pub async fn hello(&mut self) -> Result<(String, u16), ClientError> {
        match Self::expect_one(self.request(&CqcRequest::Hello { app_id: self.app_id }).await?, MsgType::Hello)? {
            ReplyBody::Hello { max_qubits, name } => Ok((name, max_qubits)),
            _ => Err(ClientError::Unexpected(MsgType::Hello)),
        }
    }

    pub async fn new_qubit(&mut self) -> Result<u16, ClientError> {
        match Self::expect_one(self.one(Command::new(0, Instruction::New, 0)).await?, MsgType::NewOk)? {
            ReplyBody::QubitId(q) => Ok(q),
            _ => Err(ClientError::Unexpected(MsgType::NewOk)),
        }
    }

    pub async fn allocate(&mut self, count: u8) -> Result<Vec<u16>, ClientError> {
        let cmd =
            Command::new(0, Instruction::Allocate, 0).with_extra(ExtraHeader { step: count, ..Default::default() });
        self.one(cmd)
            .await?
            .into_iter()
            .map(|r| match r.body {
                ReplyBody::QubitId(q) if r.msg_type == MsgType::NewOk => Ok(q),
                _ => Err(ClientError::Unexpected(r.msg_type)),
            })
            .collect()
    }

    /// Applies a single-qubit gate. `step` is only used by rotations.
    pub async fn gate(&mut self, q: u16, gate: Instruction, step: u8) -> Result<(), ClientError> {
        let mut cmd = Command::new(q, gate, 0);
        if let Some(e) = cmd.extra.as_mut() {
            e.step = step;
        }
        self.one(cmd).await.map(drop)
    }

    pub async fn two(&mut self, gate: Instruction, control: u16, target: u16) -> Result<(), ClientError> {
        let cmd =
            Command::new(control, gate, 0).with_extra(ExtraHeader { extra_qubit_id: target, ..Default::default() });
        self.one(cmd).await.map(drop)
    }

    pub async fn cnot(&mut self, control: u16, target: u16) -> Result<(), ClientError> {
        self.two(Instruction::Cnot, control, target).await
    }

    pub async fn cphase(&mut self, control: u16, target: u16) -> Result<(), ClientError> {
        self.two(Instruction::Cphase, control, target).await
    }

    async fn measure_with(&mut self, q: u16, instr: Instruction) -> Result<u8, ClientError> {
        match Self::expect_one(self.one(Command::new(q, instr, 0)).await?, MsgType::MeasOut)? {
            ReplyBody::Outcome(b) => Ok(b),
            _ => Err(ClientError::Unexpected(MsgType::MeasOut)),
        }
    }

    /// Destructive measurement; the qubit is gone afterwards.
    pub async fn measure(&mut self, q: u16) -> Result<u8, ClientError> {
        self.measure_with(q, Instruction::Measure).await
    }

    pub async fn measure_inplace(&mut self, q: u16) -> Result<u8, ClientError> {
        self.measure_with(q, Instruction::MeasureInplace).await
    }

    pub async fn reset(&mut self, q: u16) -> Result<(), ClientError> {
        self.one(Command::new(q, Instruction::Reset, 0)).await.map(drop)
    }

    pub async fn release(&mut self, q: u16) -> Result<(), ClientError> {
        self.one(Command::new(q, Instruction::Release, 0)).await.map(drop)
    }

    pub async fn send(&mut self, q: u16, node: &str, remote_app: u16) -> Result<(), ClientError> {
        let extra = self.remote(node, remote_app)?;
        self.one(Command::new(q, Instruction::Send, 0).with_extra(extra)).await.map(drop)
    }

    pub async fn recv(&mut self) -> Result<u16, ClientError> {
        match Self::expect_one(self.one(Command::new(0, Instruction::Recv, 0)).await?, MsgType::Recv)? {
            ReplyBody::QubitId(q) => Ok(q),
            _ => Err(ClientError::Unexpected(MsgType::Recv)),
        }
    }

    pub async fn create_epr(&mut self, node: &str, remote_app: u16) -> Result<(u16, EntInfo), ClientError> {
        let extra = self.remote(node, remote_app)?;
        match Self::expect_one(self.one(Command::new(0, Instruction::Epr, 0).with_extra(extra)).await?, MsgType::EprOk)?
        {
            ReplyBody::Epr { qubit_id, ent } => Ok((qubit_id, ent)),
            _ => Err(ClientError::Unexpected(MsgType::EprOk)),
        }
    }

    pub async fn recv_epr(&mut self) -> Result<(u16, EntInfo), ClientError> {
        match Self::expect_one(self.one(Command::new(0, Instruction::RecvEpr, 0)).await?, MsgType::EprOk)? {
            ReplyBody::Epr { qubit_id, ent } => Ok((qubit_id, ent)),
            _ => Err(ClientError::Unexpected(MsgType::EprOk)),
        }
    }

    /// Creation time of a qubit, milliseconds since the Unix epoch.
    pub async fn get_time(&mut self, q: u16) -> Result<u64, ClientError> {
        let req = CqcRequest::GetTime { app_id: self.app_id, qubit_id: q };
        match Self::expect_one(self.request(&req).await?, MsgType::InfTime)? {
            ReplyBody::Time(t) => Ok(t),
            _ => Err(ClientError::Unexpected(MsgType::InfTime)),
        }
    }
}

/// Blocking wrapper that owns a single-threaded runtime.
pub struct BlockingCqcClient {
    runtime: tokio::runtime::Runtime,
    inner: CqcClient,
}

impl BlockingCqcClient {
    pub fn connect(addr: SocketAddr, app_id: u16, directory: NodeDirectory) -> Result<Self, ClientError> {
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let inner = runtime.block_on(CqcClient::connect(addr, app_id, directory))?;
        Ok(BlockingCqcClient { runtime, inner })
    }

    /// Runs any async client call to completion.
    pub fn call<'a, T, F, Fut>(&'a mut self, f: F) -> T
    where
        F: FnOnce(&'a mut CqcClient) -> Fut,
        Fut: std::future::Future<Output = T> + 'a,
    {
        self.runtime.block_on(f(&mut self.inner))
    }
}
