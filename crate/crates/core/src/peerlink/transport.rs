//! Multiplexed request/response connections between nodes.
//!
//! Every connection starts with a `HELLO` request naming the dialing node.
//! Requests carry a connection-unique id; responses echo it. Responses are
//! cached per connection, so a retransmitted request is answered from the
//! cache instead of running twice.

use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, Notify};
use tokio::task::AbortHandle;

use super::codec::{
    decode_frame_body, encode_frame, FrameKind, PeerCodecError, PeerFrame, PeerOp, PeerRequest, PeerResponse,
    MAX_FRAME_LEN,
};

pub type HandlerFuture = Pin<Box<dyn Future<Output = PeerResponse> + Send>>;
/// Serves one incoming request. The first argument names the sending peer.
pub type Handler = Arc<dyn Fn(String, PeerRequest) -> HandlerFuture + Send + Sync>;

const RESPONSE_CACHE_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("no connection to '{0}'")]
    UnknownPeer(String),
    #[error("connection to '{0}' closed")]
    Disconnected(String),
    #[error("request {op:?} to '{peer}' timed out")]
    Timeout { peer: String, op: PeerOp },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Codec(#[from] PeerCodecError),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for LinkError {
    fn from(e: std::io::Error) -> Self {
        LinkError::Io(e.to_string())
    }
}

enum Cached {
    InProgress,
    Done(Vec<u8>),
}

#[derive(Default)]
struct ResponseCache {
    entries: HashMap<u64, Cached>,
    order: VecDeque<u64>,
}

impl ResponseCache {
    fn insert(&mut self, id: u64, value: Cached) {
        if self.entries.insert(id, value).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > RESPONSE_CACHE_SIZE {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }
}

struct Connection {
    peer: String,
    tx: mpsc::UnboundedSender<Vec<u8>>,
    pending: Mutex<HashMap<u64, oneshot::Sender<PeerResponse>>>,
    cache: Mutex<ResponseCache>,
}

pub struct PeerLink {
    name: String,
    timeout: Duration,
    peers: Mutex<HashMap<String, Arc<Connection>>>,
    peers_changed: Notify,
    next_id: AtomicU64,
    next_client: AtomicU64,
    handler: OnceLock<Handler>,
    tasks: Mutex<Vec<AbortHandle>>,
    handled: AtomicU64,
}

async fn read_frame(reader: &mut OwnedReadHalf) -> Result<PeerFrame, LinkError> {
    let len = reader.read_u32().await?;
    if len > MAX_FRAME_LEN {
        return Err(PeerCodecError::TooLarge(len).into());
    }
    let mut rest = vec![0u8; len as usize];
    reader.read_exact(&mut rest).await?;
    Ok(decode_frame_body(&rest)?)
}

async fn write_frame(writer: &mut OwnedWriteHalf, frame: &PeerFrame) -> Result<(), LinkError> {
    writer.write_all(&encode_frame(frame)).await?;
    Ok(())
}

fn hello_frame(name: &str) -> PeerFrame {
    let req = PeerRequest::Hello { node: name.to_string() };
    PeerFrame { request_id: 0, kind: FrameKind::Request, op: PeerOp::Hello, body: req.encode_body() }
}

fn ok_frame(request_id: u64, op: PeerOp) -> PeerFrame {
    PeerFrame { request_id, kind: FrameKind::Response, op, body: PeerResponse::Ok.encode_body() }
}

impl PeerLink {
    pub fn new(name: &str, timeout: Duration) -> Arc<Self> {
        Arc::new(PeerLink {
            name: name.to_string(),
            timeout,
            peers: Mutex::new(HashMap::new()),
            peers_changed: Notify::new(),
            next_id: AtomicU64::new(1),
            next_client: AtomicU64::new(1),
            handler: OnceLock::new(),
            tasks: Mutex::new(Vec::new()),
            handled: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Installs the request handler. Only the first call has an effect.
    pub fn set_handler(&self, handler: Handler) {
        let _ = self.handler.set(handler);
    }

    /// Number of requests handed to the handler so far.
    pub fn handled_requests(&self) -> u64 {
        self.handled.load(Ordering::Relaxed)
    }

    /// Names of connected nodes, tooling clients excluded.
    pub fn peers(&self) -> Vec<String> {
        let mut names: Vec<String> = self.peers.lock().keys().filter(|n| !n.starts_with('~')).cloned().collect();
        names.sort();
        names
    }

    pub fn is_connected(&self, peer: &str) -> bool {
        self.peers.lock().contains_key(peer)
    }

    fn track(&self, handle: AbortHandle) {
        let mut tasks = self.tasks.lock();
        tasks.retain(|h| !h.is_finished());
        tasks.push(handle);
    }

    /// Aborts the accept loop and every connection.
    pub fn shutdown(&self) {
        for h in self.tasks.lock().drain(..) {
            h.abort();
        }
        self.peers.lock().clear();
        self.peers_changed.notify_waiters();
    }

    /// Waits until every name in `expected` has a live connection.
    pub async fn wait_for_peers(&self, expected: &[String], timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.peers_changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if expected.iter().all(|p| self.is_connected(p)) {
                return true;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return expected.iter().all(|p| self.is_connected(p));
            }
        }
    }

    pub fn serve(self: &Arc<Self>, listener: TcpListener) {
        let link = self.clone();
        let handle = tokio::spawn(async move {
            while let Ok((stream, _)) = listener.accept().await {
                let link2 = link.clone();
                let h = tokio::spawn(async move {
                    if let Err(e) = link2.accept_one(stream).await {
                        tracing::debug!(node = %link2.name, "rejected connection: {e}");
                    }
                });
                link.track(h.abort_handle());
            }
        });
        self.track(handle.abort_handle());
    }

    async fn accept_one(self: &Arc<Self>, stream: TcpStream) -> Result<(), LinkError> {
        stream.set_nodelay(true)?;
        let (mut reader, mut writer) = stream.into_split();
        let hello = tokio::time::timeout(self.timeout, read_frame(&mut reader))
            .await
            .map_err(|_| LinkError::Handshake("no HELLO received".into()))??;
        if hello.kind != FrameKind::Request || hello.op != PeerOp::Hello {
            return Err(LinkError::Handshake(format!("expected HELLO, got {:?}", hello.op)));
        }
        let PeerRequest::Hello { node } = PeerRequest::decode(PeerOp::Hello, &hello.body)? else { unreachable!() };
        let peer =
            if node.is_empty() { format!("~client{}", self.next_client.fetch_add(1, Ordering::Relaxed)) } else { node };
        write_frame(&mut writer, &ok_frame(hello.request_id, PeerOp::Hello)).await?;
        self.attach(peer, reader, writer);
        Ok(())
    }

    /// Dials `addr`, retrying every `interval` until `window` has passed.
    pub async fn dial(
        self: &Arc<Self>,
        peer: &str,
        addr: SocketAddr,
        window: Duration,
        interval: Duration,
    ) -> Result<(), LinkError> {
        let deadline = tokio::time::Instant::now() + window;
        loop {
            match self.dial_once(peer, addr).await {
                Ok(()) => return Ok(()),
                Err(e) if tokio::time::Instant::now() + interval < deadline => {
                    tracing::debug!(node = %self.name, %peer, "dial failed, retrying: {e}");
                    tokio::time::sleep(interval).await;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn dial_once(self: &Arc<Self>, peer: &str, addr: SocketAddr) -> Result<(), LinkError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (mut reader, mut writer) = stream.into_split();
        write_frame(&mut writer, &hello_frame(&self.name)).await?;
        let reply = tokio::time::timeout(self.timeout, read_frame(&mut reader))
            .await
            .map_err(|_| LinkError::Handshake("no HELLO reply".into()))??;
        if reply.kind != FrameKind::Response || PeerResponse::decode(&reply.body)? != PeerResponse::Ok {
            return Err(LinkError::Handshake("HELLO refused".into()));
        }
        self.attach(peer.to_string(), reader, writer);
        Ok(())
    }

    fn attach(self: &Arc<Self>, peer: String, reader: OwnedReadHalf, mut writer: OwnedWriteHalf) {
        let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
        let conn = Arc::new(Connection {
            peer: peer.clone(),
            tx,
            pending: Mutex::new(HashMap::new()),
            cache: Mutex::new(ResponseCache::default()),
        });
        let writer_task = tokio::spawn(async move {
            while let Some(bytes) = rx.recv().await {
                if writer.write_all(&bytes).await.is_err() {
                    break;
                }
            }
        });
        self.track(writer_task.abort_handle());
        let link = self.clone();
        let conn2 = conn.clone();
        let reader_task = tokio::spawn(async move {
            link.read_loop(conn2.clone(), reader).await;
            let mut peers = link.peers.lock();
            if peers.get(&conn2.peer).is_some_and(|c| Arc::ptr_eq(c, &conn2)) {
                peers.remove(&conn2.peer);
            }
            drop(peers);
            conn2.pending.lock().clear();
            link.peers_changed.notify_waiters();
        });
        self.track(reader_task.abort_handle());
        self.peers.lock().insert(peer, conn);
        self.peers_changed.notify_waiters();
    }

    async fn read_loop(self: &Arc<Self>, conn: Arc<Connection>, mut reader: OwnedReadHalf) {
        loop {
            let frame = match read_frame(&mut reader).await {
                Ok(f) => f,
                Err(e) => {
                    tracing::debug!(node = %self.name, peer = %conn.peer, "connection closed: {e}");
                    return;
                }
            };
            match frame.kind {
                FrameKind::Response => {
                    let waiter = conn.pending.lock().remove(&frame.request_id);
                    if let Some(tx) = waiter {
                        match PeerResponse::decode(&frame.body) {
                            Ok(resp) => {
                                let _ = tx.send(resp);
                            }
                            Err(e) => tracing::warn!(node = %self.name, "bad response body: {e}"),
                        }
                    }
                }
                FrameKind::Request => self.dispatch(&conn, frame),
            }
        }
    }

    fn dispatch(self: &Arc<Self>, conn: &Arc<Connection>, frame: PeerFrame) {
        {
            let mut cache = conn.cache.lock();
            match cache.entries.get(&frame.request_id) {
                Some(Cached::Done(bytes)) => {
                    let _ = conn.tx.send(bytes.clone());
                    return;
                }
                Some(Cached::InProgress) => return,
                None => cache.insert(frame.request_id, Cached::InProgress),
            }
        }
        let link = self.clone();
        let conn = conn.clone();
        tokio::spawn(async move {
            let resp = match PeerRequest::decode(frame.op, &frame.body) {
                Ok(req) => match link.handler.get() {
                    Some(h) => {
                        link.handled.fetch_add(1, Ordering::Relaxed);
                        h(conn.peer.clone(), req).await
                    }
                    None => PeerResponse::Error(crate::vnode::types::NodeError::Unavailable("node starting".into())),
                },
                Err(e) => PeerResponse::Error(crate::vnode::types::NodeError::Protocol(e.to_string())),
            };
            let bytes = encode_frame(&PeerFrame {
                request_id: frame.request_id,
                kind: FrameKind::Response,
                op: frame.op,
                body: resp.encode_body(),
            });
            conn.cache.lock().insert(frame.request_id, Cached::Done(bytes.clone()));
            let _ = conn.tx.send(bytes);
        });
    }

    /// Sends `req` to `peer` and waits for the matching response.
    pub async fn request(&self, peer: &str, req: PeerRequest) -> Result<PeerResponse, LinkError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.request_with_id(peer, id, req).await
    }

    /// Like [`PeerLink::request`] with a caller-chosen id. Reusing an id
    /// replays a request.
    pub async fn request_with_id(&self, peer: &str, id: u64, req: PeerRequest) -> Result<PeerResponse, LinkError> {
        let conn = self.peers.lock().get(peer).cloned().ok_or_else(|| LinkError::UnknownPeer(peer.to_string()))?;
        let op = req.op();
        let (tx, rx) = oneshot::channel();
        conn.pending.lock().insert(id, tx);
        let bytes = encode_frame(&PeerFrame { request_id: id, kind: FrameKind::Request, op, body: req.encode_body() });
        if conn.tx.send(bytes).is_err() {
            conn.pending.lock().remove(&id);
            return Err(LinkError::Disconnected(peer.to_string()));
        }
        match tokio::time::timeout(self.timeout, rx).await {
            Ok(Ok(resp)) => Ok(resp),
            Ok(Err(_)) => Err(LinkError::Disconnected(peer.to_string())),
            Err(_) => {
                conn.pending.lock().remove(&id);
                Err(LinkError::Timeout { peer: peer.to_string(), op })
            }
        }
    }
}

/// One-shot tooling query: connects anonymously, sends `req`, returns the reply.
pub async fn query(addr: SocketAddr, req: PeerRequest, timeout: Duration) -> Result<PeerResponse, LinkError> {
    let work = async {
        let stream = TcpStream::connect(addr).await?;
        let (mut reader, mut writer) = stream.into_split();
        write_frame(&mut writer, &hello_frame("")).await?;
        let hello = read_frame(&mut reader).await?;
        if PeerResponse::decode(&hello.body)? != PeerResponse::Ok {
            return Err(LinkError::Handshake("HELLO refused".into()));
        }
        let op = req.op();
        write_frame(&mut writer, &PeerFrame { request_id: 1, kind: FrameKind::Request, op, body: req.encode_body() })
            .await?;
        loop {
            let frame = read_frame(&mut reader).await?;
            if frame.kind == FrameKind::Response && frame.request_id == 1 {
                return Ok(PeerResponse::decode(&frame.body)?);
            }
        }
    };
    tokio::time::timeout(timeout, work)
        .await
        .map_err(|_| LinkError::Timeout { peer: addr.to_string(), op: PeerOp::Hello })?
}
