use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::TcpListener;
use tokio::sync::Notify;

use super::types::{sim_id, AppId, EntanglementId, NodeError, QubitId, SimId};
use crate::dlock::{with_backoff, Acquire, Attempt, BackoffError, BackoffPolicy, LockId, LockTable, MetricsSnapshot};
use crate::engine::{gate_from_command, Gate, GateCode, QuantumRegister, StateRegister, DEFAULT_MAX_REGISTER_QUBITS};
use crate::netconf::NodeDirectory;
use crate::peerlink::transport::HandlerFuture;
use crate::peerlink::{LinkError, PeerLink, PeerRequest, PeerResponse, RegisterPayload, ShippedQubit};

/// Redirects followed before an operation gives up.
const MAX_HOPS: usize = 64;

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub max_register_qubits: usize,
    /// Live application qubits a node will hold at once.
    pub max_virtual_qubits: usize,
    pub seed: Option<u64>,
    pub request_timeout: Duration,
    pub recv_timeout: Duration,
    /// How long a host operation waits for a locked register.
    pub lock_wait: Duration,
    pub backoff: BackoffPolicy,
    /// Per-application bound on qubits waiting to be received.
    pub queue_capacity: usize,
    pub dial_window: Duration,
    pub dial_interval: Duration,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            max_register_qubits: DEFAULT_MAX_REGISTER_QUBITS,
            max_virtual_qubits: 1024,
            seed: None,
            request_timeout: Duration::from_secs(30),
            recv_timeout: Duration::from_secs(10),
            lock_wait: Duration::from_secs(20),
            backoff: BackoffPolicy::default(),
            queue_capacity: 64,
            dial_window: Duration::from_secs(10),
            dial_interval: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone)]
struct SimQubit {
    register: u64,
    position: usize,
    created_at: u64,
    virt_node: String,
    virt: QubitId,
}

#[derive(Debug, Clone)]
struct VirtEntry {
    owner: AppId,
    host: String,
    sim: SimId,
    in_transit: bool,
}

#[derive(Default)]
struct Inbox {
    qubits: VecDeque<QubitId>,
    eprs: VecDeque<(QubitId, EntanglementId)>,
    pending: usize,
}

impl Inbox {
    fn len(&self) -> usize {
        self.qubits.len() + self.eprs.len() + self.pending
    }
}

struct State {
    registers: HashMap<u64, StateRegister>,
    sims: HashMap<SimId, SimQubit>,
    /// Simulated qubits that left this node, and where they went.
    tombstones: HashMap<SimId, String>,
    /// Registers shipped under a transaction that has not committed yet.
    pulled: HashMap<u64, Vec<u64>>,
    virtuals: HashMap<QubitId, VirtEntry>,
    /// Ids released by an application, until reused.
    released: HashMap<QubitId, AppId>,
    inboxes: HashMap<AppId, Inbox>,
    next_virt: QubitId,
    next_sim: u64,
    next_register: u64,
    epr_seq: HashMap<String, u32>,
    rng: ChaCha8Rng,
    peak_register: usize,
    remaps_received: u64,
}

/// Inspection copy of a simulated qubit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimInfo {
    pub sim: SimId,
    pub register: u64,
    pub position: usize,
    pub created_at: u64,
    pub virt_node: String,
    pub virt: QubitId,
}

/// Inspection copy of a virtual qubit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualInfo {
    pub id: QubitId,
    pub owner: AppId,
    pub host: String,
    pub sim: SimId,
    pub in_transit: bool,
}

#[derive(Debug, Clone)]
pub struct NodeSnapshot {
    pub name: String,
    pub peers: Vec<String>,
    pub registers: Vec<StateRegister>,
    pub sims: Vec<SimInfo>,
    pub virtuals: Vec<VirtualInfo>,
    pub tombstones: Vec<(SimId, String)>,
    pub locks_held: bool,
    pub lock_metrics: MetricsSnapshot,
    pub remaps_received: u64,
    pub peak_register_qubits: usize,
}

impl NodeSnapshot {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("node", self.name.clone());
        kv("peers", self.peers.join(","));
        kv("peer_count", self.peers.len().to_string());
        kv("virtual_qubits", self.virtuals.len().to_string());
        kv("simulated_qubits", self.sims.len().to_string());
        kv("registers", self.registers.len().to_string());
        kv("lock_acquisitions", self.lock_metrics.acquisitions.to_string());
        kv("lock_conflicts", self.lock_metrics.conflicts.to_string());
        kv("lock_backoffs", self.lock_metrics.backoffs.to_string());
        kv("remaps_received", self.remaps_received.to_string());
        kv("peak_register_qubits", self.peak_register_qubits.to_string());
        for r in &self.registers {
            out.push_str(&r.debug_dump());
            out.push('\n');
        }
        for s in &self.sims {
            out.push_str(&format!(
                "sim id={:#x} register={} position={} virt={}:{}\n",
                s.sim, s.register, s.position, s.virt_node, s.virt
            ));
        }
        for v in &self.virtuals {
            out.push_str(&format!("virt id={} app={} host={} sim={:#x}\n", v.id, v.owner, v.host, v.sim));
        }
        for (sim, host) in &self.tombstones {
            out.push_str(&format!("moved sim={sim:#x} host={host}\n"));
        }
        out
    }
}

enum Access<T> {
    Here(T),
    Moved(String),
}

enum TwoResult {
    Applied,
    ControlMoved(String),
    TargetMoved(String),
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn link_error(e: LinkError) -> NodeError {
    match e {
        LinkError::Timeout { .. } => NodeError::Timeout(e.to_string()),
        other => NodeError::Link(other.to_string()),
    }
}

fn two_qubit_gate(code: u8) -> Result<Gate, NodeError> {
    let gc = GateCode::from_u8(code)?;
    if gc.arity() != 2 {
        return Err(NodeError::Invalid(format!("gate {gc:?} is not a two-qubit gate")));
    }
    Ok(gate_from_command(gc, 0))
}

fn unexpected(resp: PeerResponse) -> NodeError {
    match resp {
        PeerResponse::Error(e) => e,
        other => NodeError::Protocol(format!("unexpected response {other:?}")),
    }
}

impl State {
    fn alloc_virt(&mut self) -> Option<QubitId> {
        for _ in 0..=u16::MAX as usize {
            let id = self.next_virt;
            self.next_virt = self.next_virt.wrapping_add(1);
            if !self.virtuals.contains_key(&id) {
                self.released.remove(&id);
                return Some(id);
            }
        }
        None
    }

    fn lookup(&self, app: AppId, q: QubitId) -> Result<&VirtEntry, NodeError> {
        match self.virtuals.get(&q) {
            Some(v) if v.owner != app => Err(NodeError::Denied(q)),
            Some(v) if v.in_transit => Err(NodeError::Invalid(format!("qubit {q} is being sent"))),
            Some(v) => Ok(v),
            None if self.released.get(&q) == Some(&app) => Err(NodeError::Expired(q)),
            None => Err(NodeError::UnknownQubit(q)),
        }
    }

    fn note_register(&mut self, reg: u64) {
        if let Some(r) = self.registers.get(&reg) {
            self.peak_register = self.peak_register.max(r.num_qubits());
        }
    }

    /// Forgets a simulated qubit whose register slot was already dropped.
    fn forget_sim(&mut self, sim: SimId) {
        let Some(q) = self.sims.remove(&sim) else { return };
        for other in self.sims.values_mut() {
            if other.register == q.register && other.position > q.position {
                other.position -= 1;
            }
        }
        if self.registers.get(&q.register).is_some_and(|r| r.num_qubits() == 0) {
            self.registers.remove(&q.register);
        }
    }

    fn members(&self, reg: u64) -> Vec<(SimId, &SimQubit)> {
        let mut m: Vec<(SimId, &SimQubit)> =
            self.sims.iter().filter(|(_, q)| q.register == reg).map(|(s, q)| (*s, q)).collect();
        m.sort_by_key(|(_, q)| q.position);
        m
    }
}

/// One node of the simulated network.
pub struct Node {
    name: String,
    index: usize,
    directory: NodeDirectory,
    config: NodeConfig,
    seed: u64,
    state: Mutex<State>,
    inbox_changed: Notify,
    locks: LockTable,
    link: Arc<PeerLink>,
    next_txn: AtomicU64,
}

impl Node {
    pub fn new(directory: NodeDirectory, name: &str, config: NodeConfig) -> Result<Arc<Self>, NodeError> {
        let index = directory.index_of(name).ok_or_else(|| NodeError::UnknownNode(name.to_string()))?;
        let seed = config.seed.unwrap_or_else(rand::random) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let link = PeerLink::new(name, config.request_timeout);
        let node = Arc::new(Node {
            name: name.to_string(),
            index,
            directory,
            seed,
            state: Mutex::new(State {
                registers: HashMap::new(),
                sims: HashMap::new(),
                tombstones: HashMap::new(),
                pulled: HashMap::new(),
                virtuals: HashMap::new(),
                released: HashMap::new(),
                inboxes: HashMap::new(),
                next_virt: 0,
                next_sim: 0,
                next_register: 0,
                epr_seq: HashMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                peak_register: 0,
                remaps_received: 0,
            }),
            inbox_changed: Notify::new(),
            locks: LockTable::new(),
            link,
            next_txn: AtomicU64::new(0),
            config,
        });
        let weak: Weak<Node> = Arc::downgrade(&node);
        node.link.set_handler(Arc::new(move |from, req| match weak.upgrade() {
            Some(node) => node.handle(from, req),
            None => Box::pin(async { PeerResponse::Error(NodeError::Unavailable("node stopped".into())) }),
        }));
        Ok(node)
    }

    /// Serves the backend port and connects to every other node.
    pub async fn start(
        directory: NodeDirectory,
        name: &str,
        config: NodeConfig,
        backend: TcpListener,
    ) -> Result<Arc<Self>, NodeError> {
        let node = Node::new(directory, name, config)?;
        node.link.serve(backend);
        let mut dials = Vec::new();
        for entry in node.directory.entries()[..node.index].iter() {
            let addr = entry.backend_addr().map_err(|e| NodeError::Link(e.to_string()))?;
            let link = node.link.clone();
            let peer = entry.name.clone();
            let (window, interval) = (node.config.dial_window, node.config.dial_interval);
            dials.push(tokio::spawn(async move { link.dial(&peer, addr, window, interval).await }));
        }
        for d in dials {
            if let Ok(Err(e)) = d.await {
                node.shutdown();
                return Err(link_error(e));
            }
        }
        let others: Vec<String> =
            node.directory.entries().iter().map(|e| e.name.clone()).filter(|n| *n != node.name).collect();
        if !node.link.wait_for_peers(&others, node.config.dial_window).await {
            node.shutdown();
            let missing: Vec<&String> = others.iter().filter(|p| !node.link.is_connected(p)).collect();
            return Err(NodeError::Unavailable(format!("peers never connected: {missing:?}")));
        }
        tracing::info!(node = %node.name, peers = others.len(), "node ready");
        Ok(node)
    }

    pub fn shutdown(&self) {
        self.link.shutdown();
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn directory(&self) -> &NodeDirectory {
        &self.directory
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn link(&self) -> &Arc<PeerLink> {
        &self.link
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        let st = self.state.lock();
        let mut registers: Vec<StateRegister> = st.registers.values().cloned().collect();
        registers.sort_by_key(|r| r.id());
        let mut sims: Vec<SimInfo> = st
            .sims
            .iter()
            .map(|(s, q)| SimInfo {
                sim: *s,
                register: q.register,
                position: q.position,
                created_at: q.created_at,
                virt_node: q.virt_node.clone(),
                virt: q.virt,
            })
            .collect();
        sims.sort_by_key(|s| (s.register, s.position));
        let mut virtuals: Vec<VirtualInfo> = st
            .virtuals
            .iter()
            .map(|(id, v)| VirtualInfo {
                id: *id,
                owner: v.owner,
                host: v.host.clone(),
                sim: v.sim,
                in_transit: v.in_transit,
            })
            .collect();
        virtuals.sort_by_key(|v| v.id);
        let mut tombstones: Vec<(SimId, String)> = st.tombstones.iter().map(|(s, h)| (*s, h.clone())).collect();
        tombstones.sort();
        NodeSnapshot {
            name: self.name.clone(),
            peers: self.link.peers(),
            registers,
            sims,
            virtuals,
            tombstones,
            locks_held: !self.locks.is_empty(),
            lock_metrics: self.locks.metrics().snapshot(),
            remaps_received: st.remaps_received,
            peak_register_qubits: st.peak_register,
        }
    }

    fn new_txn(&self) -> u64 {
        sim_id(self.index, self.next_txn.fetch_add(1, Ordering::Relaxed))
    }

    fn handle(self: Arc<Self>, from: String, req: PeerRequest) -> HandlerFuture {
        Box::pin(async move {
            match self.serve_request(from, req).await {
                Ok(resp) => resp,
                Err(e) => PeerResponse::Error(e),
            }
        })
    }

    /// Sends `req` to `host`, short-circuiting when the host is this node.
    async fn route(self: &Arc<Self>, host: &str, req: PeerRequest) -> Result<PeerResponse, NodeError> {
        if host == self.name {
            Ok(self.clone().handle(self.name.clone(), req).await)
        } else {
            self.link.request(host, req).await.map_err(link_error)
        }
    }

    async fn serve_request(self: Arc<Self>, from: String, req: PeerRequest) -> Result<PeerResponse, NodeError> {
        match req {
            PeerRequest::Hello { .. } => Ok(PeerResponse::Ok),
            PeerRequest::ApplyGate { sim, code, step } => {
                let gc = GateCode::from_u8(code)?;
                if gc.arity() != 1 {
                    return Err(NodeError::Invalid(format!("gate {gc:?} is not a single-qubit gate")));
                }
                let gate = gate_from_command(gc, step);
                self.host_access(sim, |st| {
                    let q = &st.sims[&sim];
                    let (reg, pos) = (q.register, q.position);
                    st.registers.get_mut(&reg).expect("register of live qubit").apply_single(pos, &gate)?;
                    Ok(PeerResponse::Ok)
                })
                .await
            }
            PeerRequest::ApplyTwo { control, target_host, target, code } => {
                self.host_apply_two(control, target_host, target, code).await
            }
            PeerRequest::Measure { sim, inplace } => {
                self.host_access(sim, |st| {
                    let q = &st.sims[&sim];
                    let (reg, pos) = (q.register, q.position);
                    let State { registers, rng, .. } = &mut *st;
                    let r = registers.get_mut(&reg).expect("register of live qubit");
                    let outcome = r.measure(pos, !inplace, rng)?;
                    if !inplace {
                        st.forget_sim(sim);
                    }
                    Ok(PeerResponse::Outcome(outcome.bit))
                })
                .await
            }
            PeerRequest::Remove { sim } => {
                self.host_access(sim, |st| {
                    let q = &st.sims[&sim];
                    let (reg, pos) = (q.register, q.position);
                    let State { registers, rng, .. } = &mut *st;
                    registers.get_mut(&reg).expect("register of live qubit").remove_qubit(pos, rng)?;
                    st.forget_sim(sim);
                    Ok(PeerResponse::Ok)
                })
                .await
            }
            PeerRequest::Reset { sim } => {
                let x = gate_from_command(GateCode::X, 0);
                self.host_access(sim, |st| {
                    let q = &st.sims[&sim];
                    let (reg, pos) = (q.register, q.position);
                    let State { registers, rng, .. } = &mut *st;
                    let r = registers.get_mut(&reg).expect("register of live qubit");
                    if r.measure(pos, false, rng)?.bit == 1 {
                        r.apply_single(pos, &x)?;
                    }
                    Ok(PeerResponse::Ok)
                })
                .await
            }
            PeerRequest::GetTime { sim } => {
                self.host_access(sim, |st| Ok(PeerResponse::Time(st.sims[&sim].created_at))).await
            }
            PeerRequest::BindVirtual { sim, node, virt } => {
                self.host_access(sim, |st| {
                    let q = st.sims.get_mut(&sim).expect("checked by host_access");
                    q.virt_node = node.clone();
                    q.virt = virt;
                    Ok(PeerResponse::Ok)
                })
                .await
            }
            PeerRequest::LockAcq { txn, sim } => self.lock_acquire(txn, sim),
            PeerRequest::MergePull { txn, register } => self.merge_pull(txn, register),
            PeerRequest::LockRel { txn, commit } => {
                let mut st = self.state.lock();
                if let Some(regs) = st.pulled.remove(&txn) {
                    if commit {
                        for reg in regs {
                            st.registers.remove(&reg);
                            let gone: Vec<SimId> = st.members(reg).into_iter().map(|(s, _)| s).collect();
                            for s in gone {
                                st.sims.remove(&s);
                                st.tombstones.insert(s, from.clone());
                            }
                        }
                    }
                }
                drop(st);
                let _ = self.locks.release_all(txn);
                self.locks.forget(txn);
                Ok(PeerResponse::Ok)
            }
            PeerRequest::XferQubit { to_app, host, sim } => self.accept_qubit(to_app, host, sim, None).await,
            PeerRequest::EprOffer { to_app, host, sim, ent } => self.accept_qubit(to_app, host, sim, Some(ent)).await,
            PeerRequest::Remap { virt, sim, host } => {
                let mut st = self.state.lock();
                st.remaps_received += 1;
                if let Some(v) = st.virtuals.get_mut(&virt) {
                    if v.sim == sim {
                        v.host = host;
                    }
                }
                Ok(PeerResponse::Ok)
            }
            PeerRequest::NodeStateDump => Ok(PeerResponse::Dump(self.snapshot().render())),
        }
    }

    /// Runs `f` on the state once `sim` lives here and its register is not
    /// locked by a transaction.
    async fn host_access<T>(
        &self,
        sim: SimId,
        mut f: impl FnMut(&mut State) -> Result<T, NodeError>,
    ) -> Result<PeerResponse, NodeError>
    where
        T: Into<PeerResponse>,
    {
        match self.host_access_inner(sim, &mut f).await? {
            Access::Here(v) => Ok(v.into()),
            Access::Moved(h) => Ok(PeerResponse::Moved(h)),
        }
    }

    async fn host_access_inner<T>(
        &self,
        sim: SimId,
        f: &mut impl FnMut(&mut State) -> Result<T, NodeError>,
    ) -> Result<Access<T>, NodeError> {
        let deadline = tokio::time::Instant::now() + self.config.lock_wait;
        loop {
            let busy = {
                let mut st = self.state.lock();
                if let Some(h) = st.tombstones.get(&sim) {
                    return Ok(Access::Moved(h.clone()));
                }
                let q = st.sims.get(&sim).ok_or(NodeError::UnknownSim(sim))?;
                let lock = LockId::register(&self.name, q.register);
                if self.locks.holder(&lock).is_none() {
                    return f(&mut st).map(Access::Here);
                }
                lock
            };
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            if left.is_zero() || !self.locks.wait_released(&busy, left).await {
                return Err(NodeError::Timeout(format!("register {} stayed locked", busy.id)));
            }
        }
    }

    fn lock_acquire(&self, txn: u64, sim: SimId) -> Result<PeerResponse, NodeError> {
        let st = self.state.lock();
        if let Some(h) = st.tombstones.get(&sim) {
            return Ok(PeerResponse::Moved(h.clone()));
        }
        let q = st.sims.get(&sim).ok_or(NodeError::UnknownSim(sim))?;
        let reg = q.register;
        let n = st.registers[&reg].num_qubits();
        let locks = [LockId::register(&self.name, reg), LockId::qubit(&self.name, sim)];
        match self.locks.try_acquire(txn, &locks).map_err(|e| NodeError::Protocol(e.to_string()))? {
            Acquire::Granted => Ok(PeerResponse::Granted { register: reg, num_qubits: n as u8 }),
            Acquire::Conflict { .. } => {
                self.locks.forget(txn);
                Ok(PeerResponse::Conflict)
            }
        }
    }

    fn merge_pull(&self, txn: u64, register: u64) -> Result<PeerResponse, NodeError> {
        let mut st = self.state.lock();
        if self.locks.holder(&LockId::register(&self.name, register)) != Some(txn) {
            return Err(NodeError::Protocol(format!("merge pull of register {register} without holding its lock")));
        }
        let reg = st.registers.get(&register).ok_or_else(|| NodeError::Protocol("register vanished".into()))?;
        let amplitudes = reg.amplitudes().to_vec();
        let qubits = st
            .members(register)
            .into_iter()
            .map(|(s, q)| ShippedQubit {
                sim: s,
                position: q.position as u8,
                created_at: q.created_at,
                virt_node: q.virt_node.clone(),
                virt: q.virt,
            })
            .collect();
        st.pulled.entry(txn).or_default().push(register);
        Ok(PeerResponse::Register(RegisterPayload { amplitudes, qubits }))
    }

    async fn host_apply_two(
        self: &Arc<Self>,
        control: SimId,
        mut target_host: String,
        target: SimId,
        code: u8,
    ) -> Result<PeerResponse, NodeError> {
        let gate = two_qubit_gate(code)?;
        if control == target {
            return Err(NodeError::Invalid("control and target are the same qubit".into()));
        }
        let txn = self.new_txn();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ txn);
        for _ in 0..MAX_HOPS {
            let result = if target_host == self.name {
                self.local_two(control, target, &gate).await?
            } else {
                let host = target_host.clone();
                let outcome = with_backoff(&self.config.backoff, Some(self.locks.metrics()), &mut rng, |_| {
                    self.try_remote_two(txn, control, &host, target, &gate)
                })
                .await;
                self.locks.forget(txn);
                match outcome {
                    Ok((r, _)) => r,
                    Err(BackoffError::Lock(e)) => return Err(NodeError::Timeout(e.to_string())),
                    Err(BackoffError::Inner(e)) => return Err(e),
                }
            };
            match result {
                TwoResult::Applied => return Ok(PeerResponse::Ok),
                TwoResult::ControlMoved(h) => return Ok(PeerResponse::Moved(h)),
                TwoResult::TargetMoved(h) => target_host = h,
            }
        }
        Err(NodeError::Protocol("target qubit keeps moving".into()))
    }

    async fn local_two(&self, control: SimId, target: SimId, gate: &Gate) -> Result<TwoResult, NodeError> {
        let deadline = tokio::time::Instant::now() + self.config.lock_wait;
        loop {
            let busy = {
                let mut st = self.state.lock();
                if let Some(h) = st.tombstones.get(&control) {
                    return Ok(TwoResult::ControlMoved(h.clone()));
                }
                if let Some(h) = st.tombstones.get(&target) {
                    return Ok(TwoResult::TargetMoved(h.clone()));
                }
                let rc = st.sims.get(&control).ok_or(NodeError::UnknownSim(control))?.register;
                let rt = st.sims.get(&target).ok_or(NodeError::UnknownSim(target))?.register;
                let busy = [rc, rt]
                    .into_iter()
                    .map(|r| LockId::register(&self.name, r))
                    .find(|l| self.locks.holder(l).is_some());
                match busy {
                    Some(lock) => lock,
                    None => {
                        if rc != rt {
                            let total = st.registers[&rc].num_qubits() + st.registers[&rt].num_qubits();
                            if total > self.config.max_register_qubits {
                                return Err(NodeError::Capacity { max: self.config.max_register_qubits });
                            }
                            let src = st.registers.remove(&rt).expect("register of live qubit");
                            let offset = st.registers.get_mut(&rc).expect("register of live qubit").merge(src)?;
                            for q in st.sims.values_mut().filter(|q| q.register == rt) {
                                q.register = rc;
                                q.position += offset;
                            }
                            st.note_register(rc);
                        }
                        let (pc, pt) = (st.sims[&control].position, st.sims[&target].position);
                        st.registers.get_mut(&rc).expect("register of live qubit").apply_two(pc, pt, gate)?;
                        return Ok(TwoResult::Applied);
                    }
                }
            };
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            if left.is_zero() || !self.locks.wait_released(&busy, left).await {
                return Err(NodeError::Timeout(format!("register {} stayed locked", busy.id)));
            }
        }
    }

    fn local_lock(&self, txn: u64, control: SimId) -> Result<Result<Option<(u64, usize)>, String>, NodeError> {
        let st = self.state.lock();
        if let Some(h) = st.tombstones.get(&control) {
            return Ok(Err(h.clone()));
        }
        let rc = st.sims.get(&control).ok_or(NodeError::UnknownSim(control))?.register;
        let n = st.registers[&rc].num_qubits();
        let locks = [LockId::register(&self.name, rc), LockId::qubit(&self.name, control)];
        match self.locks.try_acquire(txn, &locks).map_err(|e| NodeError::Protocol(e.to_string()))? {
            Acquire::Granted => Ok(Ok(Some((rc, n)))),
            Acquire::Conflict { .. } => {
                self.locks.forget(txn);
                Ok(Ok(None))
            }
        }
    }

    async fn remote_release(&self, host: &str, txn: u64) {
        if let Err(e) = self.link.request(host, PeerRequest::LockRel { txn, commit: false }).await {
            tracing::warn!(node = %self.name, %host, "lock release failed: {e}");
        }
    }

    /// One attempt at a cross-node two-qubit gate: lock both registers in
    /// global order, pull the target's register here, apply, commit.
    async fn try_remote_two(
        self: &Arc<Self>,
        txn: u64,
        control: SimId,
        host: &str,
        target: SimId,
        gate: &Gate,
    ) -> Result<Attempt<TwoResult>, NodeError> {
        let local_first = self.name.as_str() < host;
        let mut local: Option<(u64, usize)> = None;
        let mut remote: Option<(u64, usize)> = None;
        let mut holding_local = false;
        let mut holding_remote = false;
        for step in 0..2 {
            let do_local = (step == 0) == local_first;
            let failure = if do_local {
                match self.local_lock(txn, control) {
                    Ok(Ok(Some(got))) => {
                        local = Some(got);
                        holding_local = true;
                        None
                    }
                    Ok(Ok(None)) => Some(Ok(Attempt::Retry)),
                    Ok(Err(h)) => Some(Ok(Attempt::Done(TwoResult::ControlMoved(h)))),
                    Err(e) => Some(Err(e)),
                }
            } else {
                match self.link.request(host, PeerRequest::LockAcq { txn, sim: target }).await {
                    Ok(PeerResponse::Granted { register, num_qubits }) => {
                        remote = Some((register, num_qubits as usize));
                        holding_remote = true;
                        None
                    }
                    Ok(PeerResponse::Conflict) => Some(Ok(Attempt::Retry)),
                    Ok(PeerResponse::Moved(h)) => Some(Ok(Attempt::Done(TwoResult::TargetMoved(h)))),
                    Ok(other) => Some(Err(unexpected(other))),
                    Err(e) => Some(Err(link_error(e))),
                }
            };
            if let Some(result) = failure {
                if holding_local {
                    let _ = self.locks.release_all(txn);
                }
                if holding_remote {
                    self.remote_release(host, txn).await;
                }
                return result;
            }
        }
        let ((rc, nc), (rt, nt)) = (local.expect("locked"), remote.expect("locked"));
        let abort = |e: NodeError| async move {
            let _ = self.locks.release_all(txn);
            self.remote_release(host, txn).await;
            Err(e)
        };
        if nc + nt > self.config.max_register_qubits {
            return abort(NodeError::Capacity { max: self.config.max_register_qubits }).await;
        }
        let payload = match self.link.request(host, PeerRequest::MergePull { txn, register: rt }).await {
            Ok(PeerResponse::Register(p)) => p,
            Ok(other) => return abort(unexpected(other)).await,
            Err(e) => return abort(link_error(e)).await,
        };
        let installed = {
            let mut st = self.state.lock();
            let max = self.config.max_register_qubits;
            StateRegister::from_amplitudes(rt, max, payload.amplitudes.clone())
                .and_then(|src| st.registers.get_mut(&rc).expect("locked register").merge(src))
                .map_err(NodeError::from)
                .and_then(|offset| {
                    for q in &payload.qubits {
                        st.tombstones.remove(&q.sim);
                        st.sims.insert(
                            q.sim,
                            SimQubit {
                                register: rc,
                                position: offset + q.position as usize,
                                created_at: q.created_at,
                                virt_node: q.virt_node.clone(),
                                virt: q.virt,
                            },
                        );
                    }
                    st.note_register(rc);
                    let (pc, pt) = (st.sims[&control].position, st.sims[&target].position);
                    st.registers.get_mut(&rc).expect("locked register").apply_two(pc, pt, gate)?;
                    Ok(())
                })
        };
        if let Err(e) = installed {
            return abort(e).await;
        }
        match self.link.request(host, PeerRequest::LockRel { txn, commit: true }).await {
            Ok(PeerResponse::Ok) => {}
            Ok(other) => tracing::error!(node = %self.name, "merge commit refused: {:?}", unexpected(other)),
            Err(e) => tracing::error!(node = %self.name, "merge commit lost: {e}"),
        }
        for q in &payload.qubits {
            let remap = PeerRequest::Remap { virt: q.virt, sim: q.sim, host: self.name.clone() };
            if let Err(e) = self.route(&q.virt_node, remap).await {
                tracing::debug!(node = %self.name, "remap to {} failed: {e}", q.virt_node);
            }
        }
        let _ = self.locks.release_all(txn);
        Ok(Attempt::Done(TwoResult::Applied))
    }

    async fn accept_qubit(
        self: &Arc<Self>,
        app: AppId,
        mut host: String,
        sim: SimId,
        ent: Option<EntanglementId>,
    ) -> Result<PeerResponse, NodeError> {
        let vid = {
            let mut st = self.state.lock();
            if st.virtuals.len() >= self.config.max_virtual_qubits {
                return Err(NodeError::Unavailable(format!("{} has no free qubits", self.name)));
            }
            let cap = self.config.queue_capacity;
            if st.inboxes.get(&app).is_some_and(|i| i.len() >= cap) {
                return Err(NodeError::Unavailable(format!("receive queue of app {app} is full")));
            }
            let vid = st.alloc_virt().ok_or_else(|| NodeError::Unavailable("qubit ids exhausted".into()))?;
            st.virtuals.insert(vid, VirtEntry { owner: app, host: host.clone(), sim, in_transit: false });
            st.inboxes.entry(app).or_default().pending += 1;
            vid
        };
        let mut bound = Err(NodeError::Protocol("qubit keeps moving".into()));
        for _ in 0..MAX_HOPS {
            match self.route(&host, PeerRequest::BindVirtual { sim, node: self.name.clone(), virt: vid }).await {
                Ok(PeerResponse::Ok) => {
                    bound = Ok(());
                    break;
                }
                Ok(PeerResponse::Moved(h)) => host = h,
                Ok(other) => {
                    bound = Err(unexpected(other));
                    break;
                }
                Err(e) => {
                    bound = Err(e);
                    break;
                }
            }
        }
        let mut st = self.state.lock();
        let inbox = st.inboxes.entry(app).or_default();
        inbox.pending -= 1;
        match bound {
            Ok(()) => {
                match ent {
                    Some(ent) => inbox.eprs.push_back((vid, ent)),
                    None => inbox.qubits.push_back(vid),
                }
                if let Some(v) = st.virtuals.get_mut(&vid) {
                    if v.sim == sim {
                        v.host = host;
                    }
                }
                drop(st);
                self.inbox_changed.notify_waiters();
                Ok(PeerResponse::Ok)
            }
            Err(e) => {
                st.virtuals.remove(&vid);
                Err(e)
            }
        }
    }

    /// Follows the virtual qubit to its host and runs `make(sim)` there.
    async fn chase(
        self: &Arc<Self>,
        app: AppId,
        q: QubitId,
        make: impl Fn(SimId) -> PeerRequest,
    ) -> Result<PeerResponse, NodeError> {
        for _ in 0..MAX_HOPS {
            let (host, sim) = {
                let st = self.state.lock();
                let v = st.lookup(app, q)?;
                (v.host.clone(), v.sim)
            };
            match self.route(&host, make(sim)).await? {
                PeerResponse::Moved(h) => self.redirect(q, sim, h),
                PeerResponse::Error(e) => return Err(e),
                other => return Ok(other),
            }
        }
        Err(NodeError::Protocol(format!("qubit {q} keeps moving")))
    }

    fn redirect(&self, q: QubitId, sim: SimId, host: String) {
        if let Some(v) = self.state.lock().virtuals.get_mut(&q) {
            if v.sim == sim {
                v.host = host;
            }
        }
    }

    fn new_sim_locked(&self, st: &mut State, reg: u64, position: usize, virt: QubitId, created_at: u64) -> SimId {
        let sim = sim_id(self.index, st.next_sim);
        st.next_sim += 1;
        st.sims.insert(sim, SimQubit { register: reg, position, created_at, virt_node: self.name.clone(), virt });
        sim
    }

    /// Allocates a fresh qubit in |0⟩ for `app`.
    pub fn create_qubit(&self, app: AppId) -> Result<QubitId, NodeError> {
        let mut st = self.state.lock();
        if st.virtuals.len() >= self.config.max_virtual_qubits {
            return Err(NodeError::NoQubit);
        }
        let vid = st.alloc_virt().ok_or(NodeError::NoQubit)?;
        let reg = st.next_register;
        st.next_register += 1;
        let mut r = StateRegister::with_limit(reg, self.config.max_register_qubits);
        r.add_qubit()?;
        st.registers.insert(reg, r);
        let sim = self.new_sim_locked(&mut st, reg, 0, vid, now_ms());
        st.virtuals.insert(vid, VirtEntry { owner: app, host: self.name.clone(), sim, in_transit: false });
        st.note_register(reg);
        Ok(vid)
    }

    pub async fn apply_gate(
        self: &Arc<Self>,
        app: AppId,
        q: QubitId,
        code: GateCode,
        step: u8,
    ) -> Result<(), NodeError> {
        if code.arity() != 1 {
            return Err(NodeError::Invalid(format!("gate {code:?} is not a single-qubit gate")));
        }
        match self.chase(app, q, |sim| PeerRequest::ApplyGate { sim, code: code as u8, step }).await? {
            PeerResponse::Ok => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    pub async fn apply_two(
        self: &Arc<Self>,
        app: AppId,
        control: QubitId,
        target: QubitId,
        code: GateCode,
    ) -> Result<(), NodeError> {
        two_qubit_gate(code as u8)?;
        if control == target {
            return Err(NodeError::Invalid("control and target are the same qubit".into()));
        }
        for _ in 0..MAX_HOPS {
            let (hc, sc, ht, tsim) = {
                let st = self.state.lock();
                let c = st.lookup(app, control)?;
                let t = st.lookup(app, target)?;
                (c.host.clone(), c.sim, t.host.clone(), t.sim)
            };
            let req = PeerRequest::ApplyTwo { control: sc, target_host: ht, target: tsim, code: code as u8 };
            match self.route(&hc, req).await? {
                PeerResponse::Ok => return Ok(()),
                PeerResponse::Moved(h) => self.redirect(control, sc, h),
                other => return Err(unexpected(other)),
            }
        }
        Err(NodeError::Protocol(format!("qubit {control} keeps moving")))
    }

    /// Measures in the standard basis. A demolition measurement consumes the qubit.
    pub async fn measure(self: &Arc<Self>, app: AppId, q: QubitId, inplace: bool) -> Result<u8, NodeError> {
        let bit = match self.chase(app, q, |sim| PeerRequest::Measure { sim, inplace }).await? {
            PeerResponse::Outcome(b) => b,
            other => return Err(unexpected(other)),
        };
        if !inplace {
            let mut st = self.state.lock();
            st.virtuals.remove(&q);
            st.released.insert(q, app);
        }
        Ok(bit)
    }

    pub async fn reset(self: &Arc<Self>, app: AppId, q: QubitId) -> Result<(), NodeError> {
        match self.chase(app, q, |sim| PeerRequest::Reset { sim }).await? {
            PeerResponse::Ok => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    /// Discards a qubit. Its id answers as expired until it is reused.
    pub async fn release(self: &Arc<Self>, app: AppId, q: QubitId) -> Result<(), NodeError> {
        match self.chase(app, q, |sim| PeerRequest::Remove { sim }).await? {
            PeerResponse::Ok => {}
            other => return Err(unexpected(other)),
        }
        let mut st = self.state.lock();
        st.virtuals.remove(&q);
        st.released.insert(q, app);
        Ok(())
    }

    /// Creation time of the qubit in milliseconds since the Unix epoch.
    pub async fn get_time(self: &Arc<Self>, app: AppId, q: QubitId) -> Result<u64, NodeError> {
        match self.chase(app, q, |sim| PeerRequest::GetTime { sim }).await? {
            PeerResponse::Time(t) => Ok(t),
            other => Err(unexpected(other)),
        }
    }

    /// Hands qubit `q` to application `dest_app` on node `dest`. The state
    /// does not move; only the virtual handle does.
    pub async fn send_qubit(
        self: &Arc<Self>,
        app: AppId,
        q: QubitId,
        dest: &str,
        dest_app: AppId,
    ) -> Result<(), NodeError> {
        self.directory.get(dest).map_err(|_| NodeError::UnknownNode(dest.to_string()))?;
        let (host, sim) = {
            let mut st = self.state.lock();
            let v = st.lookup(app, q)?;
            let out = (v.host.clone(), v.sim);
            st.virtuals.get_mut(&q).expect("looked up").in_transit = true;
            out
        };
        let result = self.route(dest, PeerRequest::XferQubit { to_app: dest_app, host, sim }).await;
        let mut st = self.state.lock();
        match result {
            Ok(PeerResponse::Ok) => {
                st.virtuals.remove(&q);
                Ok(())
            }
            other => {
                if let Some(v) = st.virtuals.get_mut(&q) {
                    v.in_transit = false;
                }
                Err(match other {
                    Ok(resp) => unexpected(resp),
                    Err(e) => e,
                })
            }
        }
    }

    pub async fn recv_qubit(&self, app: AppId) -> Result<QubitId, NodeError> {
        self.wait_inbox(app, |i| i.qubits.pop_front()).await
    }

    /// Creates a Bell pair (|00⟩+|11⟩)/√2, keeps one half and delivers the
    /// other to `peer_app` on `peer`.
    pub async fn create_epr(
        self: &Arc<Self>,
        app: AppId,
        peer: &str,
        peer_app: AppId,
    ) -> Result<(QubitId, EntanglementId), NodeError> {
        self.directory.get(peer).map_err(|_| NodeError::UnknownNode(peer.to_string()))?;
        let (mine, theirs, ent) = {
            let mut st = self.state.lock();
            if st.virtuals.len() + 2 > self.config.max_virtual_qubits {
                return Err(NodeError::NoQubit);
            }
            let v1 = st.alloc_virt().ok_or(NodeError::NoQubit)?;
            st.virtuals.insert(v1, VirtEntry { owner: app, host: String::new(), sim: 0, in_transit: true });
            let v2 = match st.alloc_virt() {
                Some(v) => v,
                None => {
                    st.virtuals.remove(&v1);
                    return Err(NodeError::NoQubit);
                }
            };
            let reg = st.next_register;
            st.next_register += 1;
            let mut r = StateRegister::with_limit(reg, self.config.max_register_qubits);
            r.add_qubit()?;
            r.add_qubit()?;
            r.apply_single(0, &gate_from_command(GateCode::H, 0))?;
            r.apply_two(0, 1, &gate_from_command(GateCode::Cnot, 0))?;
            st.registers.insert(reg, r);
            st.note_register(reg);
            let now = now_ms();
            let s1 = self.new_sim_locked(&mut st, reg, 0, v1, now);
            let s2 = self.new_sim_locked(&mut st, reg, 1, v2, now);
            st.virtuals.insert(v1, VirtEntry { owner: app, host: self.name.clone(), sim: s1, in_transit: true });
            st.virtuals.insert(v2, VirtEntry { owner: app, host: self.name.clone(), sim: s2, in_transit: true });
            let seq = st.epr_seq.entry(peer.to_string()).or_insert(0);
            *seq = seq.wrapping_add(1);
            let ent =
                EntanglementId { node_a: self.name.clone(), node_b: peer.to_string(), sequence: *seq, created_at: now };
            (v1, (v2, s2), ent)
        };
        let offer =
            PeerRequest::EprOffer { to_app: peer_app, host: self.name.clone(), sim: theirs.1, ent: ent.clone() };
        let result = self.route(peer, offer).await;
        let mut st = self.state.lock();
        match result {
            Ok(PeerResponse::Ok) => {
                st.virtuals.remove(&theirs.0);
                st.virtuals.get_mut(&mine).expect("reserved").in_transit = false;
                Ok((mine, ent))
            }
            other => {
                let s1 = st.virtuals.remove(&mine).map(|v| v.sim);
                st.virtuals.remove(&theirs.0);
                if let Some(reg) = s1.and_then(|s| st.sims.get(&s)).map(|q| q.register) {
                    st.registers.remove(&reg);
                    let members: Vec<SimId> = st.members(reg).into_iter().map(|(s, _)| s).collect();
                    for s in members {
                        st.sims.remove(&s);
                    }
                }
                Err(match other {
                    Ok(resp) => unexpected(resp),
                    Err(e) => e,
                })
            }
        }
    }

    pub async fn recv_epr(&self, app: AppId) -> Result<(QubitId, EntanglementId), NodeError> {
        self.wait_inbox(app, |i| i.eprs.pop_front()).await
    }

    async fn wait_inbox<T>(&self, app: AppId, mut take: impl FnMut(&mut Inbox) -> Option<T>) -> Result<T, NodeError> {
        let deadline = tokio::time::Instant::now() + self.config.recv_timeout;
        loop {
            let notified = self.inbox_changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(v) = self.state.lock().inboxes.get_mut(&app).and_then(&mut take) {
                return Ok(v);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(NodeError::Timeout(format!("nothing received for app {app}")));
            }
        }
    }

    /// Random bits from the node's generator, for protocol-level choices.
    pub fn random_bit(&self) -> u8 {
        self.state.lock().rng.gen_range(0..2)
    }
}
