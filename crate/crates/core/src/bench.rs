//! Scripted scenarios that time the simulator end to end.
//!
//! Every scenario starts its own in-process network on loopback ports and
//! drives it through real CQC client connections, one client per role.
//! Roles that need to exchange classical bits do so over
//! [`ClassicalChannel`]s.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::classical::ClassicalChannel;
use crate::cluster::Cluster;
use crate::cqc::client::{ClientError, CqcClient};
use crate::cqc::codec::{Command, ExtraHeader, Instruction, MsgType, ReplyBody};
use crate::vnode::{NodeConfig, NodeError};

/// Application id used by every scenario role.
pub const APP: u16 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario parameter: {0}")]
    Invalid(String),
    #[error("network startup failed: {0}")]
    Startup(#[from] NodeError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("classical channel: {0}")]
    Io(#[from] std::io::Error),
    #[error("wrong result: {0}")]
    Correctness(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingMode {
    /// Each node creates its pair with the next node only once the qubit arrived.
    Fly,
    /// All pairs are created up front; hops proceed as soon as a pair exists.
    First,
}

impl RingMode {
    pub fn name(self) -> &'static str {
        match self {
            RingMode::Fly => "fly",
            RingMode::First => "first",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Ring { nodes: usize, mode: RingMode },
    PingPong { rounds: usize },
    Create { qubits: usize },
    Ghz { qubits: usize },
    Protocols,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub scenario: String,
    pub n: usize,
    pub mode: String,
    pub trial: usize,
    pub wall_time_s: f64,
    pub extra: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub records: Vec<TrialRecord>,
    /// Relative frequency of each observed outcome class.
    pub outcome_stats: BTreeMap<String, f64>,
    /// Largest register any node held during the run.
    pub peak_register_qubits: usize,
}

impl ScenarioResult {
    fn new(records: Vec<TrialRecord>, counts: BTreeMap<String, u64>, peak: usize) -> Self {
        let total: u64 = counts.values().sum();
        let outcome_stats = counts.into_iter().map(|(k, v)| (k, v as f64 / total.max(1) as f64)).collect();
        ScenarioResult { records, outcome_stats, peak_register_qubits: peak }
    }

    pub fn median_wall_time(&self) -> f64 {
        let mut t: Vec<f64> = self.records.iter().map(|r| r.wall_time_s).collect();
        t.sort_by(f64::total_cmp);
        match t.len() {
            0 => 0.0,
            n if n % 2 == 1 => t[n / 2],
            n => (t[n / 2 - 1] + t[n / 2]) / 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub seed: u64,
    pub trials: usize,
    pub node: NodeConfig,
}

impl BenchOptions {
    pub fn new(seed: u64, trials: usize) -> Self {
        BenchOptions { seed, trials, node: NodeConfig::default() }
    }

    fn config(&self) -> NodeConfig {
        NodeConfig { seed: Some(self.seed), ..self.node.clone() }
    }
}

pub async fn run(scenario: Scenario, opts: &BenchOptions) -> Result<ScenarioResult, BenchError> {
    if opts.trials == 0 {
        return Err(BenchError::Invalid("at least one trial is required".into()));
    }
    match scenario {
        Scenario::Ring { nodes, mode } => ring(nodes, mode, opts).await,
        Scenario::PingPong { rounds } => pingpong(rounds, opts).await,
        Scenario::Create { qubits } => create_measure(qubits, opts).await,
        Scenario::Ghz { qubits } => ghz(qubits, opts).await,
        Scenario::Protocols => {
            let report = protocols(opts, &ProtocolPlan::default()).await?;
            match report.failures() {
                f if f.is_empty() => Ok(report.result),
                f => Err(BenchError::Correctness(f.join("; "))),
            }
        }
    }
}

pub fn write_csv<W: Write>(out: W, records: &[TrialRecord]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "n", "mode", "trial", "wall_time_s", "extra"])?;
    for r in records {
        let row =
            [&r.scenario, &r.n.to_string(), &r.mode, &r.trial.to_string(), &format!("{:.9}", r.wall_time_s), &r.extra];
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// The six eigenstates of the Pauli operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PauliState {
    Zero,
    One,
    Plus,
    Minus,
    PlusI,
    MinusI,
}

impl PauliState {
    pub const ALL: [PauliState; 6] =
        [PauliState::Zero, PauliState::One, PauliState::Plus, PauliState::Minus, PauliState::PlusI, PauliState::MinusI];

    pub fn name(self) -> &'static str {
        match self {
            PauliState::Zero => "0",
            PauliState::One => "1",
            PauliState::Plus => "+",
            PauliState::Minus => "-",
            PauliState::PlusI => "+i",
            PauliState::MinusI => "-i",
        }
    }

    /// Gates that take |0> to this state.
    pub fn preparation(self) -> Vec<(Instruction, u8)> {
        match self {
            PauliState::Zero => vec![],
            PauliState::One => vec![(Instruction::X, 0)],
            PauliState::Plus => vec![(Instruction::H, 0)],
            PauliState::Minus => vec![(Instruction::X, 0), (Instruction::H, 0)],
            PauliState::PlusI => vec![(Instruction::RotX, 192)],
            PauliState::MinusI => vec![(Instruction::RotX, 64)],
        }
    }

    /// Gates that take this state back to |0>.
    pub fn inverse(self) -> Vec<(Instruction, u8)> {
        match self {
            PauliState::PlusI => vec![(Instruction::RotX, 64)],
            PauliState::MinusI => vec![(Instruction::RotX, 192)],
            other => other.preparation().into_iter().rev().collect(),
        }
    }
}

fn gate_command(q: u16, (instr, step): (Instruction, u8)) -> Command {
    let mut cmd = Command::new(q, instr, 0);
    if let Some(e) = cmd.extra.as_mut() {
        e.step = step;
    }
    cmd
}

async fn apply_all(c: &mut CqcClient, q: u16, gates: Vec<(Instruction, u8)>) -> Result<(), ClientError> {
    if gates.is_empty() {
        return Ok(());
    }
    c.run(gates.into_iter().map(|g| gate_command(q, g)).collect()).await.map(drop)
}

pub async fn prepare(c: &mut CqcClient, state: PauliState) -> Result<u16, ClientError> {
    let q = c.new_qubit().await?;
    apply_all(c, q, state.preparation()).await?;
    Ok(q)
}

/// Undoes `state`'s preparation and measures; a faithful copy yields 0.
pub async fn check(c: &mut CqcClient, q: u16, state: PauliState) -> Result<u8, ClientError> {
    apply_all(c, q, state.inverse()).await?;
    c.measure(q).await
}

fn outcomes(replies: &[crate::cqc::codec::CqcReply]) -> Vec<u8> {
    replies
        .iter()
        .filter(|r| r.msg_type == MsgType::MeasOut)
        .filter_map(|r| match r.body {
            ReplyBody::Outcome(b) => Some(b),
            _ => None,
        })
        .collect()
}

/// Bell measurement of `q` with the local half `epr`. Returns the two
/// classical bits (outcome of `q`, outcome of `epr`).
pub async fn teleport_out(c: &mut CqcClient, q: u16, epr: u16) -> Result<[u8; 2], BenchError> {
    let cmds = vec![
        Command::new(q, Instruction::Cnot, 0).with_extra(ExtraHeader { extra_qubit_id: epr, ..Default::default() }),
        Command::new(q, Instruction::H, 0),
        Command::new(q, Instruction::Measure, 0),
        Command::new(epr, Instruction::Measure, 0),
    ];
    match outcomes(&c.run(cmds).await?)[..] {
        [a, b] => Ok([a, b]),
        _ => Err(BenchError::Correctness("Bell measurement did not return two outcomes".into())),
    }
}

/// Pauli corrections on the receiving half.
pub async fn teleport_in(c: &mut CqcClient, target: u16, bits: [u8; 2]) -> Result<(), ClientError> {
    let mut gates = Vec::new();
    if bits[1] == 1 {
        gates.push((Instruction::X, 0));
    }
    if bits[0] == 1 {
        gates.push((Instruction::Z, 0));
    }
    apply_all(c, target, gates).await
}

fn bits_from(msg: &[u8]) -> Result<[u8; 2], BenchError> {
    msg.try_into().map_err(|_| BenchError::Correctness(format!("malformed correction message {msg:?}")))
}

/// Teleports `q` from the `src` role to the `dst` role, running both roles
/// concurrently. Returns the qubit id at the destination.
pub async fn teleport(
    src: (&mut CqcClient, &mut ClassicalChannel),
    dst: (&mut CqcClient, &mut ClassicalChannel),
    dst_name: &str,
    q: u16,
) -> Result<u16, BenchError> {
    let (sc, sch) = src;
    let (dc, dch) = dst;
    let sender = async {
        let (epr, _) = sc.create_epr(dst_name, APP).await?;
        let bits = teleport_out(sc, q, epr).await?;
        sch.send(&bits).await?;
        Ok::<_, BenchError>(())
    };
    let receiver = async {
        let bits = bits_from(&dch.recv().await?)?;
        let (epr, _) = dc.recv_epr().await?;
        teleport_in(dc, epr, bits).await?;
        Ok::<_, BenchError>(epr)
    };
    let (s, r) = tokio::join!(sender, receiver);
    s?;
    r
}

async fn clients(cluster: &Cluster, names: &[String]) -> Result<Vec<CqcClient>, BenchError> {
    let mut out = Vec::new();
    for n in names {
        out.push(CqcClient::connect(cluster.cqc_addr(n), APP, cluster.directory().clone()).await?);
    }
    Ok(out)
}

fn peak(cluster: &Cluster) -> usize {
    cluster.snapshots().iter().map(|s| s.peak_register_qubits).max().unwrap_or(0)
}

fn ensure_empty(cluster: &Cluster) -> Result<(), BenchError> {
    cluster.check_consistency().map_err(BenchError::Correctness)?;
    if cluster.snapshots().iter().any(|s| !s.sims.is_empty()) {
        return Err(BenchError::Correctness("qubits left behind after the trial".into()));
    }
    Ok(())
}

fn node_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("node{i}")).collect()
}

async fn ring_role(
    i: usize,
    mode: RingMode,
    next: String,
    mut c: CqcClient,
    mut inbound: ClassicalChannel,
    mut outbound: ClassicalChannel,
) -> Result<Option<u8>, BenchError> {
    let mut ahead = None;
    let mut behind = None;
    if mode == RingMode::First {
        ahead = Some(c.create_epr(&next, APP).await?.0);
        behind = Some(c.recv_epr().await?.0);
    }
    if i == 0 {
        let q = prepare(&mut c, PauliState::Plus).await?;
        let epr = match ahead {
            Some(e) => e,
            None => c.create_epr(&next, APP).await?.0,
        };
        outbound.send(&teleport_out(&mut c, q, epr).await?).await?;
    }
    let bits = bits_from(&inbound.recv().await?)?;
    let here = match behind {
        Some(e) => e,
        None => c.recv_epr().await?.0,
    };
    teleport_in(&mut c, here, bits).await?;
    if i == 0 {
        return Ok(Some(check(&mut c, here, PauliState::Plus).await?));
    }
    let epr = match ahead {
        Some(e) => e,
        None => c.create_epr(&next, APP).await?.0,
    };
    outbound.send(&teleport_out(&mut c, here, epr).await?).await?;
    Ok(None)
}

/// Teleports |+> once around a ring of `nodes` nodes and checks it came back.
pub async fn ring(nodes: usize, mode: RingMode, opts: &BenchOptions) -> Result<ScenarioResult, BenchError> {
    if nodes < 2 {
        return Err(BenchError::Invalid("a ring needs at least 2 nodes".into()));
    }
    let names = node_names(nodes);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let cluster = Cluster::start(&refs, opts.config()).await?;
    let mut records = Vec::new();
    for trial in 0..opts.trials {
        let mut conns = clients(&cluster, &names).await?;
        let mut outbound = Vec::new();
        let mut inbound = Vec::new();
        for _ in 0..nodes {
            let (a, b) = ClassicalChannel::pair().await?;
            outbound.push(a);
            inbound.push(b);
        }
        // channel i carries corrections from role i to role i+1
        inbound.rotate_right(1);
        let start = Instant::now();
        let mut roles = Vec::new();
        for (i, ((c, inb), out)) in conns.drain(..).zip(inbound).zip(outbound).enumerate() {
            let next = names[(i + 1) % nodes].clone();
            roles.push(tokio::spawn(ring_role(i, mode, next, c, inb, out)));
        }
        let mut result = None;
        for r in roles {
            if let Some(bit) = r.await.map_err(|e| BenchError::Correctness(e.to_string()))?? {
                result = Some(bit);
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if result != Some(0) {
            return Err(BenchError::Correctness(format!(
                "ring returned a state measuring {result:?} in the |+> basis"
            )));
        }
        ensure_empty(&cluster)?;
        records.push(TrialRecord {
            scenario: "ring".into(),
            n: nodes,
            mode: mode.name().into(),
            trial,
            wall_time_s: elapsed,
            extra: format!("peak_register={}", peak(&cluster)),
        });
    }
    let counts = BTreeMap::from([("verified".to_string(), opts.trials as u64)]);
    let result = ScenarioResult::new(records, counts, peak(&cluster));
    cluster.shutdown();
    Ok(result)
}

/// Teleports |+> back and forth between two nodes `rounds` times.
pub async fn pingpong(rounds: usize, opts: &BenchOptions) -> Result<ScenarioResult, BenchError> {
    if rounds == 0 {
        return Err(BenchError::Invalid("at least one round is required".into()));
    }
    let names = node_names(2);
    let cluster = Cluster::start(&[&names[0], &names[1]], opts.config()).await?;
    let mut conns = clients(&cluster, &names).await?;
    let b = &mut conns.pop().expect("two clients");
    let a = &mut conns.pop().expect("two clients");
    let (mut cha, mut chb) = ClassicalChannel::pair().await?;
    let mut records = Vec::new();
    for trial in 0..opts.trials {
        let start = Instant::now();
        let mut q = prepare(a, PauliState::Plus).await?;
        for _ in 0..rounds {
            q = teleport((&mut *a, &mut cha), (&mut *b, &mut chb), &names[1], q).await?;
            q = teleport((&mut *b, &mut chb), (&mut *a, &mut cha), &names[0], q).await?;
        }
        let bit = check(a, q, PauliState::Plus).await?;
        let elapsed = start.elapsed().as_secs_f64();
        if bit != 0 {
            return Err(BenchError::Correctness("ping-pong changed the state".into()));
        }
        ensure_empty(&cluster)?;
        records.push(TrialRecord {
            scenario: "pingpong".into(),
            n: rounds,
            mode: "-".into(),
            trial,
            wall_time_s: elapsed,
            extra: format!("teleports={}", 2 * rounds),
        });
    }
    let counts = BTreeMap::from([("verified".to_string(), opts.trials as u64)]);
    let result = ScenarioResult::new(records, counts, peak(&cluster));
    cluster.shutdown();
    Ok(result)
}

/// Creates `qubits` qubits one command at a time, then measures each one.
pub async fn create_measure(qubits: usize, opts: &BenchOptions) -> Result<ScenarioResult, BenchError> {
    if qubits == 0 {
        return Err(BenchError::Invalid("at least one qubit is required".into()));
    }
    let names = node_names(1);
    let cluster = Cluster::start(&[&names[0]], opts.config()).await?;
    let mut c = clients(&cluster, &names).await?.pop().expect("one client");
    let mut records = Vec::new();
    for trial in 0..opts.trials {
        let start = Instant::now();
        let mut ids = Vec::with_capacity(qubits);
        for _ in 0..qubits {
            ids.push(c.new_qubit().await?);
        }
        let created = start.elapsed();
        let registers = cluster.nodes()[0].snapshot().registers.len();
        if registers != qubits {
            return Err(BenchError::Correctness(format!("{qubits} fresh qubits occupy {registers} registers")));
        }
        let resumed = Instant::now();
        let mut ones = 0;
        for q in ids {
            ones += c.measure(q).await? as usize;
        }
        let elapsed = (created + resumed.elapsed()).as_secs_f64();
        if ones != 0 {
            return Err(BenchError::Correctness(format!("{ones} fresh qubits measured 1")));
        }
        records.push(TrialRecord {
            scenario: "create".into(),
            n: qubits,
            mode: "-".into(),
            trial,
            wall_time_s: elapsed,
            extra: format!("registers={registers}"),
        });
    }
    let counts = BTreeMap::from([("0".to_string(), (qubits * opts.trials) as u64)]);
    let result = ScenarioResult::new(records, counts, peak(&cluster));
    cluster.shutdown();
    Ok(result)
}

async fn ghz_trial(c: &mut CqcClient, qubits: usize) -> Result<(f64, u8), BenchError> {
    let start = Instant::now();
    let ids = c.allocate(qubits as u8).await?;
    let mut cmds = vec![Command::new(ids[0], Instruction::H, 0)];
    for w in ids.windows(2) {
        let extra = ExtraHeader { extra_qubit_id: w[1], ..Default::default() };
        cmds.push(Command::new(w[0], Instruction::Cnot, 0).with_extra(extra));
    }
    cmds.extend(ids.iter().map(|q| Command::new(*q, Instruction::Measure, 0)));
    let replies = c.run(cmds).await?;
    let elapsed = start.elapsed().as_secs_f64();
    let bits = outcomes(&replies);
    if bits.len() != qubits || bits.iter().any(|b| *b != bits[0]) {
        return Err(BenchError::Correctness(format!("GHZ outcomes disagree: {bits:?}")));
    }
    Ok((elapsed, bits[0]))
}

/// Allocates n qubits, then entangles them into a GHZ state and measures
/// them in one command batch.
pub async fn ghz(qubits: usize, opts: &BenchOptions) -> Result<ScenarioResult, BenchError> {
    Ok(ghz_sweep(&[qubits], opts).await?.remove(0))
}

/// Runs [`ghz`] for several sizes on one node, interleaving the sizes trial
/// by trial so that slow phases of the host affect every size alike.
pub async fn ghz_sweep(sizes: &[usize], opts: &BenchOptions) -> Result<Vec<ScenarioResult>, BenchError> {
    if let Some(bad) = sizes.iter().find(|n| **n == 0 || **n > u8::MAX as usize) {
        return Err(BenchError::Invalid(format!("cannot build a GHZ state on {bad} qubits")));
    }
    let names = node_names(1);
    let cluster = Cluster::start(&[&names[0]], opts.config()).await?;
    let mut c = clients(&cluster, &names).await?.pop().expect("one client");
    let mut records = vec![Vec::new(); sizes.len()];
    let mut counts = vec![BTreeMap::new(); sizes.len()];
    for trial in 0..opts.trials {
        for (i, &n) in sizes.iter().enumerate() {
            let (elapsed, bit) = ghz_trial(&mut c, n).await?;
            *counts[i].entry(format!("all{bit}")).or_insert(0u64) += 1;
            records[i].push(TrialRecord {
                scenario: "ghz".into(),
                n,
                mode: "-".into(),
                trial,
                wall_time_s: elapsed,
                extra: format!("outcome={bit}"),
            });
        }
    }
    let peak = peak(&cluster);
    cluster.shutdown();
    Ok(records.into_iter().zip(counts).map(|(r, c)| ScenarioResult::new(r, c, peak)).collect())
}

/// Trial counts for the protocol suite.
#[derive(Debug, Clone)]
pub struct ProtocolPlan {
    pub bb84_matched: usize,
    pub bb84_mismatched: usize,
    pub teleport_per_state: usize,
    pub teleport_plus: usize,
}

impl Default for ProtocolPlan {
    fn default() -> Self {
        ProtocolPlan { bb84_matched: 100, bb84_mismatched: 1000, teleport_per_state: 20, teleport_plus: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bb84Case {
    pub h_a: u8,
    pub x: u8,
    pub h_b: u8,
    pub trials: usize,
    pub ones: usize,
}

impl Bb84Case {
    pub fn matched(&self) -> bool {
        self.h_a == self.h_b
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub bb84: Vec<Bb84Case>,
    /// Per input state: trials, and trials whose inverse check measured 0.
    pub teleport: Vec<(PauliState, usize, usize)>,
    /// Standard-basis outcome counts after teleporting |+>.
    pub plus_counts: [u64; 2],
    /// Chi-square uniformity p-value of `plus_counts`.
    pub plus_p_value: f64,
    pub result: ScenarioResult,
}

impl ProtocolReport {
    /// Human-readable list of failed checks; empty when all passed.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.bb84 {
            let freq = c.ones as f64 / c.trials as f64;
            if c.matched() && c.ones != c.x as usize * c.trials {
                out.push(format!("BB84 h_A={} x={} h_B={}: {} of {} ones", c.h_a, c.x, c.h_b, c.ones, c.trials));
            }
            if !c.matched() && !(0.4..=0.6).contains(&freq) {
                out.push(format!("BB84 h_A={} x={} h_B={}: frequency of 1 is {freq}", c.h_a, c.x, c.h_b));
            }
        }
        for (state, trials, ok) in &self.teleport {
            if trials != ok {
                out.push(format!("teleporting |{}>: {ok} of {trials} copies verified", state.name()));
            }
        }
        if self.plus_p_value <= 0.01 {
            out.push(format!(
                "teleported |+> counts {:?} fail uniformity (p = {})",
                self.plus_counts, self.plus_p_value
            ));
        }
        out
    }
}

/// Chi-square p-value of observed counts against a uniform distribution.
pub fn uniformity_p_value(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

async fn bb84_case(
    alice: &mut CqcClient,
    bob: &mut CqcClient,
    bob_name: &str,
    case: (u8, u8, u8),
    trials: usize,
) -> Result<usize, BenchError> {
    let (h_a, x, h_b) = case;
    let (mut cha, mut chb) = ClassicalChannel::pair().await?;
    let sender = async {
        for _ in 0..trials {
            let q = alice.new_qubit().await?;
            let mut gates = Vec::new();
            if x == 1 {
                gates.push((Instruction::X, 0));
            }
            if h_a == 1 {
                gates.push((Instruction::H, 0));
            }
            apply_all(alice, q, gates).await?;
            alice.send(q, bob_name, APP).await?;
            // wait until Bob has measured before sending the next qubit
            cha.recv().await?;
        }
        Ok::<_, BenchError>(())
    };
    let receiver = async {
        let mut ones = 0;
        for _ in 0..trials {
            let q = bob.recv().await?;
            if h_b == 1 {
                bob.gate(q, Instruction::H, 0).await?;
            }
            ones += bob.measure(q).await? as usize;
            chb.send(b"k").await?;
        }
        Ok::<_, BenchError>(ones)
    };
    let (s, r) = tokio::join!(sender, receiver);
    s?;
    r
}

/// BB84 state transmission and teleportation between two nodes.
pub async fn protocols(opts: &BenchOptions, plan: &ProtocolPlan) -> Result<ProtocolReport, BenchError> {
    let names = node_names(2);
    let cluster = Cluster::start(&[&names[0], &names[1]], opts.config()).await?;
    let mut conns = clients(&cluster, &names).await?;
    let mut bob = conns.pop().expect("two clients");
    let mut alice = conns.pop().expect("two clients");
    let mut records = Vec::new();
    let mut counts = BTreeMap::new();
    let mut bb84 = Vec::new();
    for h_a in 0..2u8 {
        for x in 0..2u8 {
            for h_b in 0..2u8 {
                let trials = if h_a == h_b { plan.bb84_matched } else { plan.bb84_mismatched };
                let start = Instant::now();
                let ones = bb84_case(&mut alice, &mut bob, &names[1], (h_a, x, h_b), trials).await?;
                records.push(TrialRecord {
                    scenario: "bb84".into(),
                    n: trials,
                    mode: format!("hA{h_a}x{x}hB{h_b}"),
                    trial: 0,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    extra: format!("ones={ones}"),
                });
                *counts.entry("bb84_one".to_string()).or_insert(0) += ones as u64;
                *counts.entry("bb84_zero".to_string()).or_insert(0) += (trials - ones) as u64;
                bb84.push(Bb84Case { h_a, x, h_b, trials, ones });
            }
        }
    }
    let (mut cha, mut chb) = ClassicalChannel::pair().await?;
    let mut teleport_cases = Vec::new();
    for state in PauliState::ALL {
        let start = Instant::now();
        let mut ok = 0;
        for _ in 0..plan.teleport_per_state {
            let q = prepare(&mut alice, state).await?;
            let t = teleport((&mut alice, &mut cha), (&mut bob, &mut chb), &names[1], q).await?;
            if check(&mut bob, t, state).await? == 0 {
                ok += 1;
            }
        }
        records.push(TrialRecord {
            scenario: "teleport".into(),
            n: plan.teleport_per_state,
            mode: state.name().into(),
            trial: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
            extra: format!("verified={ok}"),
        });
        teleport_cases.push((state, plan.teleport_per_state, ok));
    }
    let start = Instant::now();
    let mut plus_counts = [0u64; 2];
    for _ in 0..plan.teleport_plus {
        let q = prepare(&mut alice, PauliState::Plus).await?;
        let t = teleport((&mut alice, &mut cha), (&mut bob, &mut chb), &names[1], q).await?;
        plus_counts[bob.measure(t).await? as usize] += 1;
    }
    let plus_p_value = uniformity_p_value(&plus_counts);
    records.push(TrialRecord {
        scenario: "teleport_plus".into(),
        n: plan.teleport_plus,
        mode: "+".into(),
        trial: 0,
        wall_time_s: start.elapsed().as_secs_f64(),
        extra: format!("zeros={} ones={} p={:.6}", plus_counts[0], plus_counts[1], plus_p_value),
    });
    ensure_empty(&cluster)?;
    let result = ScenarioResult::new(records, counts, peak(&cluster));
    cluster.shutdown();
    Ok(ProtocolReport { bb84, teleport: teleport_cases, plus_counts, plus_p_value, result })
}

/// Least-squares slope of log(time) against log(n).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(trials: usize) -> BenchOptions {
        BenchOptions::new(42, trials)
    }

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = [50.0, 100.0, 200.0, 400.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(1.5))).collect();
        assert!((loglog_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_counts_have_high_p_value() {
        assert!((uniformity_p_value(&[500, 500]) - 1.0).abs() < 1e-12);
        assert!(uniformity_p_value(&[600, 400]) < 1e-9);
        // chi-square statistic 4 with one degree of freedom
        assert!((uniformity_p_value(&[60, 40]) - 0.0455002638963584).abs() < 1e-9);
    }

    #[test]
    fn inverse_undoes_preparation() {
        for s in PauliState::ALL {
            let steps: u32 = s.preparation().iter().chain(&s.inverse()).map(|(_, st)| *st as u32).sum();
            assert_eq!(steps % 256, 0, "{s:?}");
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn small_ring_in_both_modes() {
        for mode in [RingMode::Fly, RingMode::First] {
            for n in [2, 3] {
                let r = ring(n, mode, &opts(2)).await.unwrap();
                assert_eq!(r.records.len(), 2);
                assert!(r.peak_register_qubits <= 3);
            }
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn pingpong_round_trip() {
        let r = pingpong(1, &opts(2)).await.unwrap();
        assert_eq!(r.records[0].extra, "teleports=2");
        assert!(matches!(pingpong(0, &opts(1)).await, Err(BenchError::Invalid(_))));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn create_keeps_qubits_in_separate_registers() {
        let r = create_measure(100, &opts(1)).await.unwrap();
        assert_eq!(r.records[0].extra, "registers=100");
        assert_eq!(r.peak_register_qubits, 1);
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn ghz_outcomes_agree() {
        let r = ghz(3, &opts(200)).await.unwrap();
        let zeros = r.records.iter().filter(|t| t.extra == "outcome=0").count() as u64;
        assert!(uniformity_p_value(&[zeros, 200 - zeros]) > 0.01);
        assert!((r.outcome_stats.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(ghz(12, &opts(1)).await.is_ok());
        let err = ghz(21, &opts(1)).await.unwrap_err();
        assert!(matches!(err, BenchError::Client(ClientError::Server(MsgType::ErrNoQubit))), "{err}");
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn csv_is_deterministic_apart_from_timing() {
        let strip = |r: ScenarioResult| {
            let mut buf = Vec::new();
            let rows: Vec<_> = r.records.into_iter().map(|t| TrialRecord { wall_time_s: 0.0, ..t }).collect();
            write_csv(&mut buf, &rows).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = strip(ghz(5, &opts(20)).await.unwrap());
        let b = strip(ghz(5, &opts(20)).await.unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("scenario,n,mode,trial,wall_time_s,extra\n"));
        let a = strip(ring(3, RingMode::Fly, &opts(3)).await.unwrap());
        let b = strip(ring(3, RingMode::Fly, &opts(3)).await.unwrap());
        assert_eq!(a, b);
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn small_protocol_suite_passes() {
        let plan = ProtocolPlan { bb84_matched: 10, bb84_mismatched: 200, teleport_per_state: 5, teleport_plus: 200 };
        let report = protocols(&opts(1), &plan).await.unwrap();
        assert_eq!(report.bb84.len(), 8);
        assert!(report.failures().is_empty(), "{:?}", report.failures());
    }
}
