//! Brute-force reference simulator and helpers shared by the integration tests.
//!
//! The oracle builds every gate as a full 2^n x 2^n action by comparing basis
//! bit strings, so it shares no code with the engine.

#![allow(dead_code)]

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64 as C;
use qnetsim::engine::GateCode;

pub fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

pub fn single_matrix(code: GateCode, step: u8) -> [[C; 2]; 2] {
    let h = FRAC_1_SQRT_2;
    let theta = step as f64 * 2.0 * PI / 256.0;
    let (co, si) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    match code {
        GateCode::I => [[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]],
        GateCode::X => [[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]],
        GateCode::Y => [[c(0.0, 0.0), c(0.0, -1.0)], [c(0.0, 1.0), c(0.0, 0.0)]],
        GateCode::Z => [[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]],
        GateCode::H => [[c(h, 0.0), c(h, 0.0)], [c(h, 0.0), c(-h, 0.0)]],
        GateCode::K => [[c(h, 0.0), c(0.0, -h)], [c(0.0, h), c(-h, 0.0)]],
        GateCode::T => [[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), C::from_polar(1.0, PI / 4.0)]],
        GateCode::RotX => [[c(co, 0.0), c(0.0, -si)], [c(0.0, -si), c(co, 0.0)]],
        GateCode::RotY => [[c(co, 0.0), c(-si, 0.0)], [c(si, 0.0), c(co, 0.0)]],
        GateCode::RotZ => {
            [[C::from_polar(1.0, -theta / 2.0), c(0.0, 0.0)], [c(0.0, 0.0), C::from_polar(1.0, theta / 2.0)]]
        }
        other => panic!("{other:?} is not a single-qubit gate"),
    }
}

/// Dense reference state over `n` qubits; qubit 0 is the most significant bit.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub n: usize,
    pub amps: Vec<C>,
}

impl Oracle {
    pub fn new(n: usize) -> Self {
        let mut amps = vec![c(0.0, 0.0); 1 << n];
        amps[0] = c(1.0, 0.0);
        Oracle { n, amps }
    }

    fn bit(&self, index: usize, q: usize) -> usize {
        (index >> (self.n - 1 - q)) & 1
    }

    fn same_except(&self, i: usize, j: usize, qs: &[usize]) -> bool {
        let mask: usize = qs.iter().map(|q| 1 << (self.n - 1 - q)).sum();
        i & !mask == j & !mask
    }

    pub fn apply_single(&mut self, q: usize, m: [[C; 2]; 2]) {
        let dim = self.amps.len();
        let mut out = vec![c(0.0, 0.0); dim];
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..dim {
                if self.same_except(i, j, &[q]) {
                    *o += m[self.bit(i, q)][self.bit(j, q)] * self.amps[j];
                }
            }
        }
        self.amps = out;
    }

    pub fn apply_gate(&mut self, q: usize, code: GateCode, step: u8) {
        self.apply_single(q, single_matrix(code, step));
    }

    /// CNOT or CPHASE with `control` and `target`.
    pub fn apply_two(&mut self, control: usize, target: usize, code: GateCode) {
        let dim = self.amps.len();
        let mut out = vec![c(0.0, 0.0); dim];
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..dim {
                if !self.same_except(i, j, &[control, target]) {
                    continue;
                }
                let (ic, it, jc, jt) =
                    (self.bit(i, control), self.bit(i, target), self.bit(j, control), self.bit(j, target));
                let entry = match code {
                    GateCode::Cnot => {
                        let want = if jc == 1 { 1 - jt } else { jt };
                        if ic == jc && it == want {
                            c(1.0, 0.0)
                        } else {
                            c(0.0, 0.0)
                        }
                    }
                    GateCode::Cphase => {
                        if ic == jc && it == jt {
                            if ic == 1 && it == 1 {
                                c(-1.0, 0.0)
                            } else {
                                c(1.0, 0.0)
                            }
                        } else {
                            c(0.0, 0.0)
                        }
                    }
                    other => panic!("{other:?} is not a two-qubit gate"),
                };
                *o += entry * self.amps[j];
            }
        }
        self.amps = out;
    }

    pub fn probability(&self, q: usize, bit: usize) -> f64 {
        self.amps.iter().enumerate().filter(|(i, _)| self.bit(*i, q) == bit).map(|(_, a)| a.norm_sqr()).sum()
    }

    /// Projects qubit `q` onto `bit` and renormalises. Returns the prior probability.
    pub fn project(&mut self, q: usize, bit: usize) -> f64 {
        let p = self.probability(q, bit);
        let scale = if p > 0.0 { 1.0 / p.sqrt() } else { 0.0 };
        for i in 0..self.amps.len() {
            self.amps[i] = if self.bit(i, q) == bit { self.amps[i] * scale } else { c(0.0, 0.0) };
        }
        p
    }
}

/// Largest entry-wise distance between two states after aligning global phase.
pub fn phase_distance(a: &[C], b: &[C]) -> f64 {
    assert_eq!(a.len(), b.len());
    let inner: C = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    let phase = if inner.norm() > 1e-15 { inner / inner.norm() } else { c(1.0, 0.0) };
    a.iter().zip(b).map(|(x, y)| (x * phase - y).norm()).fold(0.0, f64::max)
}

use qnetsim::cluster::Cluster;
use qnetsim::cqc::client::{ClientError, CqcClient};
use qnetsim::cqc::codec::{Command, CqcRequest, Instruction, MsgType, OPT_IFTHEN};
use qnetsim::vnode::{NodeConfig, QubitId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NAMES: [&str; 3] = ["Alice", "Bob", "Charlie"];
const APP: u16 = 1;

/// Runs a random program of at most 12 operations on at most 4 qubits spread
/// over at most 3 nodes, and returns the distance between the distributed
/// state and the reference state.
pub async fn random_program(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodes = rng.gen_range(1..=3);
    let config = NodeConfig { seed: Some(seed), ..NodeConfig::default() };
    let cluster = Cluster::start(&NAMES[..n_nodes], config).await.map_err(|e| e.to_string())?;
    let n_qubits = rng.gen_range(1..=4);
    let mut held: Vec<(usize, QubitId)> = Vec::new();
    for _ in 0..n_qubits {
        let at = rng.gen_range(0..n_nodes);
        let id = cluster.node(NAMES[at]).create_qubit(APP).map_err(|e| e.to_string())?;
        held.push((at, id));
    }
    let mut oracle = Oracle::new(n_qubits);
    let singles = [
        GateCode::I,
        GateCode::X,
        GateCode::Y,
        GateCode::Z,
        GateCode::H,
        GateCode::K,
        GateCode::T,
        GateCode::RotX,
        GateCode::RotY,
        GateCode::RotZ,
    ];
    let mut ops = rng.gen_range(1..=12);
    while ops > 0 {
        ops -= 1;
        let q = rng.gen_range(0..n_qubits);
        let (at, id) = held[q];
        let node = cluster.node(NAMES[at]).clone();
        match rng.gen_range(0..10) {
            0..=3 => {
                let code = singles[rng.gen_range(0..singles.len())];
                let step: u8 = rng.gen();
                node.apply_gate(APP, id, code, step).await.map_err(|e| format!("gate: {e}"))?;
                oracle.apply_gate(q, code, step);
            }
            4..=6 if n_qubits >= 2 => {
                let mut t = rng.gen_range(0..n_qubits - 1);
                if t >= q {
                    t += 1;
                }
                if held[t].0 != at {
                    let (from, tid) = held[t];
                    cluster
                        .node(NAMES[from])
                        .send_qubit(APP, tid, NAMES[at], APP)
                        .await
                        .map_err(|e| format!("send: {e}"))?;
                    held[t] = (at, node.recv_qubit(APP).await.map_err(|e| format!("recv: {e}"))?);
                }
                let code = if rng.gen() { GateCode::Cnot } else { GateCode::Cphase };
                node.apply_two(APP, id, held[t].1, code).await.map_err(|e| format!("two-qubit gate: {e}"))?;
                oracle.apply_two(q, t, code);
            }
            7 => {
                let dest = rng.gen_range(0..n_nodes);
                node.send_qubit(APP, id, NAMES[dest], APP).await.map_err(|e| format!("send: {e}"))?;
                held[q] = (dest, cluster.node(NAMES[dest]).recv_qubit(APP).await.map_err(|e| format!("recv: {e}"))?);
            }
            _ => {
                let bit = node.measure(APP, id, true).await.map_err(|e| format!("measure: {e}"))?;
                let p = oracle.project(q, bit as usize);
                if p < 1e-9 {
                    return Err(format!("observed outcome {bit} on qubit {q} has reference probability {p}"));
                }
            }
        }
    }
    let listed: Vec<(&str, QubitId)> = held.iter().map(|(at, id)| (NAMES[*at], *id)).collect();
    let state = cluster.joint_state(&listed)?;
    cluster.check_consistency()?;
    cluster.shutdown();
    Ok(phase_distance(&oracle.amps, &state))
}

async fn connect(cl: &Cluster, node: &str, app: u16) -> Result<CqcClient, String> {
    CqcClient::connect(cl.cqc_addr(node), app, cl.directory().clone()).await.map_err(|e| e.to_string())
}

async fn raw_reply(c: &mut CqcClient, bytes: &[u8]) -> Result<MsgType, String> {
    c.send_raw(bytes).await.map_err(|e| e.to_string())?;
    Ok(c.read_reply().await.map_err(|e| e.to_string())?.msg_type)
}

/// Drives a live network into each CQC error reply in turn and returns the
/// reply types observed, in order.
pub async fn provoke_errors() -> Result<Vec<MsgType>, String> {
    let cl = Cluster::start(
        &["Alice", "Bob"],
        NodeConfig {
            seed: Some(11),
            max_virtual_qubits: 8,
            recv_timeout: std::time::Duration::from_millis(200),
            queue_capacity: 1,
            ..NodeConfig::default()
        },
    )
    .await
    .map_err(|e| e.to_string())?;
    let mut a = connect(&cl, "Alice", 1).await?;
    let mut intruder = connect(&cl, "Alice", 2).await?;
    let mut seen = Vec::new();
    // a call that unexpectedly succeeds shows up as DONE
    let mut note =
        |r: Result<(), ClientError>| seen.push(r.err().and_then(|e| e.reply_type()).unwrap_or(MsgType::Done));

    let q = a.new_qubit().await.map_err(|e| e.to_string())?;
    note(intruder.measure(q).await.map(drop));
    note(a.measure(500).await.map(drop));
    note(a.recv().await.map(drop));
    note(a.factory(Command::new(0, Instruction::New, 0), 0).await.map(drop));
    note(a.run(vec![Command::new(q, Instruction::H, OPT_IFTHEN)]).await.map(drop));
    a.release(q).await.map_err(|e| e.to_string())?;
    note(a.gate(q, Instruction::X, 0).await.map(drop));
    let mut b = connect(&cl, "Bob", 1).await?;
    let q1 = b.new_qubit().await.map_err(|e| e.to_string())?;
    b.send(q1, "Alice", 3).await.map_err(|e| e.to_string())?;
    let q2 = b.new_qubit().await.map_err(|e| e.to_string())?;
    note(b.send(q2, "Alice", 3).await.map(drop));
    note(a.allocate(9).await.map(drop));

    let mut bad = CqcRequest::Hello { app_id: 1 }.encode();
    bad[0] = 2;
    seen.push(raw_reply(&mut b, &bad).await?);
    let mut unknown = CqcRequest::Command { app_id: 1, commands: vec![Command::new(q2, Instruction::H, 0)] }.encode();
    unknown[10] = 19;
    seen.push(raw_reply(&mut b, &unknown).await?);

    Ok(seen)
}
