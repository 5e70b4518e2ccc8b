//! In-process networks on ephemeral localhost ports, plus whole-network
//! inspection used by tests and benchmarks.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;

use crate::cqc::server::CqcServer;
use crate::engine::{QuantumRegister, C64};
use crate::netconf::{NodeDirectory, NodeEntry};
use crate::vnode::{Node, NodeConfig, NodeError, NodeSnapshot, QubitId, SimId};

pub struct Cluster {
    directory: NodeDirectory,
    nodes: Vec<Arc<Node>>,
    servers: Vec<CqcServer>,
}

impl Cluster {
    /// Starts one node per name, each with a backend and a CQC server.
    pub async fn start(names: &[&str], config: NodeConfig) -> Result<Cluster, NodeError> {
        let io = |e: std::io::Error| NodeError::Link(e.to_string());
        let mut backends = Vec::new();
        let mut cqcs = Vec::new();
        let mut entries = Vec::new();
        for name in names {
            let backend = TcpListener::bind("127.0.0.1:0").await.map_err(io)?;
            let cqc = TcpListener::bind("127.0.0.1:0").await.map_err(io)?;
            entries.push(NodeEntry {
                name: name.to_string(),
                host: "127.0.0.1".into(),
                backend_port: backend.local_addr().map_err(io)?.port(),
                cqc_port: cqc.local_addr().map_err(io)?.port(),
            });
            backends.push(backend);
            cqcs.push(cqc);
        }
        let directory = NodeDirectory::new(entries).map_err(|e| NodeError::Invalid(e.to_string()))?;
        let mut starts = Vec::new();
        for (name, backend) in names.iter().zip(backends) {
            let (dir, cfg, name) = (directory.clone(), config.clone(), name.to_string());
            starts.push(tokio::spawn(async move { Node::start(dir, &name, cfg, backend).await }));
        }
        let mut nodes = Vec::new();
        let mut failure = None;
        for s in starts {
            match s.await {
                Ok(Ok(n)) => nodes.push(n),
                Ok(Err(e)) => failure = Some(e),
                Err(e) => failure = Some(NodeError::Unavailable(e.to_string())),
            }
        }
        if let Some(e) = failure {
            for n in &nodes {
                n.shutdown();
            }
            return Err(e);
        }
        let servers = nodes.iter().zip(cqcs).map(|(n, l)| CqcServer::spawn(n.clone(), l)).collect();
        Ok(Cluster { directory, nodes, servers })
    }

    pub fn directory(&self) -> &NodeDirectory {
        &self.directory
    }

    pub fn nodes(&self) -> &[Arc<Node>] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> &Arc<Node> {
        self.nodes.iter().find(|n| n.name() == name).unwrap_or_else(|| panic!("no node named {name}"))
    }

    pub fn cqc_addr(&self, name: &str) -> SocketAddr {
        self.directory.get(name).and_then(|e| e.cqc_addr()).expect("cluster node address")
    }

    pub fn snapshots(&self) -> Vec<NodeSnapshot> {
        self.nodes.iter().map(|n| n.snapshot()).collect()
    }

    pub fn shutdown(&self) {
        for s in &self.servers {
            s.shutdown();
        }
        for n in &self.nodes {
            n.shutdown();
        }
    }

    /// Checks the cross-node bookkeeping of a quiescent network.
    pub fn check_consistency(&self) -> Result<(), String> {
        check_consistency(&self.snapshots())
    }

    /// Joint state of the listed application qubits, in the order given
    /// (first qubit is the most significant bit). Fails when a listed qubit
    /// shares a register with a qubit that is not listed.
    pub fn joint_state(&self, qubits: &[(&str, QubitId)]) -> Result<Vec<C64>, String> {
        joint_state(&self.snapshots(), qubits)
    }
}

/// Starts the node called `name` on the ports the directory assigns to it.
pub async fn launch(
    directory: NodeDirectory,
    name: &str,
    config: NodeConfig,
) -> Result<(Arc<Node>, CqcServer), NodeError> {
    let entry = directory.get(name).map_err(|e| NodeError::UnknownNode(e.to_string()))?.clone();
    let link = |e: String| NodeError::Link(e);
    let backend_addr = entry.backend_addr().map_err(|e| link(e.to_string()))?;
    let cqc_addr = entry.cqc_addr().map_err(|e| link(e.to_string()))?;
    let backend = TcpListener::bind(backend_addr).await.map_err(|e| link(format!("{backend_addr}: {e}")))?;
    let cqc = TcpListener::bind(cqc_addr).await.map_err(|e| link(format!("{cqc_addr}: {e}")))?;
    let node = Node::start(directory, name, config, backend).await?;
    let server = CqcServer::spawn(node.clone(), cqc);
    Ok((node, server))
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Location<'a> {
    node: &'a str,
    register: u64,
    virt: (&'a str, QubitId),
}

fn locate(snaps: &[NodeSnapshot]) -> Result<HashMap<SimId, Location<'_>>, String> {
    let mut at = HashMap::new();
    for s in snaps {
        for q in &s.sims {
            let loc = Location { node: s.name.as_str(), register: q.register, virt: (q.virt_node.as_str(), q.virt) };
            if let Some(prev) = at.insert(q.sim, loc) {
                return Err(format!("simulated qubit {:#x} lives on both {} and {}", q.sim, prev.node, s.name));
            }
        }
    }
    Ok(at)
}

pub fn check_consistency(snaps: &[NodeSnapshot]) -> Result<(), String> {
    let at = locate(snaps)?;
    let by_name: HashMap<&str, &NodeSnapshot> = snaps.iter().map(|s| (s.name.as_str(), s)).collect();
    for s in snaps {
        if s.locks_held {
            return Err(format!("{} still holds locks", s.name));
        }
        for r in &s.registers {
            let mut positions: Vec<usize> =
                s.sims.iter().filter(|q| q.register == r.id()).map(|q| q.position).collect();
            positions.sort_unstable();
            if positions != (0..r.num_qubits()).collect::<Vec<_>>() {
                return Err(format!("{} register {} has positions {positions:?}", s.name, r.id()));
            }
        }
        for q in &s.sims {
            if !s.registers.iter().any(|r| r.id() == q.register) {
                return Err(format!("{} qubit {:#x} points at missing register {}", s.name, q.sim, q.register));
            }
        }
    }
    let mut referenced: HashSet<SimId> = HashSet::new();
    for s in snaps {
        for v in &s.virtuals {
            if v.in_transit {
                return Err(format!("{} qubit {} is still in transit", s.name, v.id));
            }
            if !referenced.insert(v.sim) {
                return Err(format!("simulated qubit {:#x} has two virtual handles", v.sim));
            }
            let loc = at.get(&v.sim).ok_or_else(|| format!("{} qubit {} points at a vanished qubit", s.name, v.id))?;
            if loc.virt != (s.name.as_str(), v.id) {
                return Err(format!(
                    "{:#x} points back at {}:{}, expected {}:{}",
                    v.sim, loc.virt.0, loc.virt.1, s.name, v.id
                ));
            }
            let mut host = v.host.as_str();
            for _ in 0..=snaps.len() {
                if host == loc.node {
                    break;
                }
                let node = by_name.get(host).ok_or_else(|| format!("unknown host {host}"))?;
                host = node
                    .tombstones
                    .iter()
                    .find(|(sim, _)| *sim == v.sim)
                    .map(|(_, h)| h.as_str())
                    .ok_or_else(|| format!("{} qubit {} cannot be found from {}", s.name, v.id, v.host))?;
            }
            if host != loc.node {
                return Err(format!("{} qubit {} has a forwarding cycle", s.name, v.id));
            }
        }
    }
    if let Some(orphan) = at.keys().find(|sim| !referenced.contains(sim)) {
        return Err(format!("simulated qubit {orphan:#x} has no virtual handle"));
    }
    Ok(())
}

pub fn joint_state(snaps: &[NodeSnapshot], qubits: &[(&str, QubitId)]) -> Result<Vec<C64>, String> {
    let at = locate(snaps)?;
    let mut wanted = Vec::new();
    for (node, q) in qubits {
        let snap = snaps.iter().find(|s| s.name == *node).ok_or_else(|| format!("unknown node {node}"))?;
        let v = snap.virtuals.iter().find(|v| v.id == *q).ok_or_else(|| format!("{node} has no qubit {q}"))?;
        wanted.push(v.sim);
    }
    let mut regs: Vec<(&str, u64)> = Vec::new();
    for sim in &wanted {
        let loc = at.get(sim).ok_or("qubit vanished")?;
        if !regs.contains(&(loc.node, loc.register)) {
            regs.push((loc.node, loc.register));
        }
    }
    // order of qubits in the tensor product of the registers, MSB first
    let mut combined_order: Vec<SimId> = Vec::new();
    let mut amps = vec![C64::new(1.0, 0.0)];
    for (node, reg) in &regs {
        let snap = snaps.iter().find(|s| s.name == *node).expect("located");
        let r = snap.registers.iter().find(|r| r.id() == *reg).ok_or("register vanished")?;
        let mut members: Vec<(usize, SimId)> =
            snap.sims.iter().filter(|q| q.register == *reg).map(|q| (q.position, q.sim)).collect();
        members.sort_unstable();
        for (_, sim) in &members {
            if !wanted.contains(sim) {
                return Err(format!("register {reg} on {node} also holds unlisted qubit {sim:#x}"));
            }
            combined_order.push(*sim);
        }
        amps = amps.iter().flat_map(|a| r.amplitudes().iter().map(move |b| a * b)).collect();
    }
    let n = wanted.len();
    let mut out = vec![C64::new(0.0, 0.0); 1 << n];
    for (i, a) in amps.iter().enumerate() {
        let mut j = 0usize;
        for (k, sim) in wanted.iter().enumerate() {
            let p = combined_order.iter().position(|s| s == sim).expect("listed");
            let bit = (i >> (n - 1 - p)) & 1;
            j |= bit << (n - 1 - k);
        }
        out[j] = *a;
    }
    Ok(out)
}
