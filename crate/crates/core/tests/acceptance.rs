//! Release gate: one PASS/FAIL line per acceptance criterion.
//!
//! Set `QNETSIM_RING60=1` to also run the optional 60-node ring.

mod support;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qnetsim::bench::{self, BenchOptions, PauliState, ProtocolPlan, RingMode};
use qnetsim::classical::ClassicalChannel;
use qnetsim::cluster::Cluster;
use qnetsim::cqc::client::CqcClient;
use qnetsim::cqc::codec::{
    Command, CqcReply, CqcRequest, EntInfo, ExtraHeader, Instruction, MsgType, ReplyBody, OPT_ACTION, OPT_IFTHEN,
};
use qnetsim::engine::GateCode;
use qnetsim::peerlink::{query, PeerRequest, PeerResponse};
use qnetsim::vnode::NodeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{phase_distance, provoke_errors, random_program, Oracle};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

async fn distributed_equals_monolithic() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..500u64 {
        let d = random_program(1000 + seed).await.map_err(|e| format!("program {seed}: {e}"))?;
        worst = worst.max(d);
        ensure(d < 1e-9, || format!("program {seed}: deviation {d:e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("500 programs, max deviation {worst:.1e}, {:.1} s", elapsed.as_secs_f64()))
}

async fn protocol_report() -> Result<bench::ProtocolReport, String> {
    let plan = ProtocolPlan { bb84_matched: 100, bb84_mismatched: 1000, teleport_per_state: 20, teleport_plus: 1000 };
    bench::protocols(&BenchOptions::new(2018, 1), &plan).await.map_err(|e| e.to_string())
}

fn bb84(report: &bench::ProtocolReport) -> Outcome {
    let mut parts = Vec::new();
    for c in &report.bb84 {
        if c.matched() {
            ensure(c.trials == 100 && c.ones == c.x as usize * 100, || {
                format!("h={} x={}: {} ones in {} trials", c.h_a, c.x, c.ones, c.trials)
            })?;
        } else {
            let f = c.ones as f64 / c.trials as f64;
            ensure(c.trials == 1000 && (0.4..=0.6).contains(&f), || {
                format!("h_A={} x={} h_B={}: frequency {f}", c.h_a, c.x, c.h_b)
            })?;
            parts.push(format!("{:.3}", f));
        }
    }
    Ok(format!("matched bases 100/100 deterministic, mismatched frequencies {}", parts.join(" ")))
}

/// Teleports each Pauli eigenstate and compares Bob's corrected qubit with
/// the reference state before anyone measures it.
async fn teleport_states(report: &bench::ProtocolReport) -> Outcome {
    let cluster = Cluster::start(&["Alice", "Bob"], NodeConfig { seed: Some(3), ..NodeConfig::default() })
        .await
        .map_err(|e| e.to_string())?;
    let connect = |n: &str| CqcClient::connect(cluster.cqc_addr(n), bench::APP, cluster.directory().clone());
    let mut alice = connect("Alice").await.map_err(|e| e.to_string())?;
    let mut bob = connect("Bob").await.map_err(|e| e.to_string())?;
    let (mut cha, mut chb) = ClassicalChannel::pair().await.map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for state in PauliState::ALL {
        let mut want = Oracle::new(1);
        for (instr, step) in state.preparation() {
            want.apply_gate(0, instr.gate().expect("single-qubit gate"), step);
        }
        for _ in 0..10 {
            let q = bench::prepare(&mut alice, state).await.map_err(|e| e.to_string())?;
            let t = bench::teleport((&mut alice, &mut cha), (&mut bob, &mut chb), "Bob", q)
                .await
                .map_err(|e| e.to_string())?;
            let got = cluster.joint_state(&[("Bob", t)])?;
            let d = phase_distance(&got, &want.amps);
            worst = worst.max(d);
            ensure(d < 1e-9, || format!("|{}> arrived as {got:?}", state.name()))?;
            bob.measure(t).await.map_err(|e| e.to_string())?;
        }
    }
    ensure(report.teleport.iter().all(|(_, n, ok)| n == ok), || format!("{:?}", report.teleport))?;
    ensure(report.plus_p_value > 0.01, || format!("|+> counts {:?} p = {}", report.plus_counts, report.plus_p_value))?;
    Ok(format!(
        "6 eigenstates within {worst:.1e}; |+> counts {:?} over 1000, p = {:.3}",
        report.plus_counts, report.plus_p_value
    ))
}

fn dump_value(dump: &str, key: &str) -> Option<String> {
    dump.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

async fn fig5_merge() -> Outcome {
    let cluster = Cluster::start(&["Alice", "Bob", "Charlie"], NodeConfig { seed: Some(5), ..NodeConfig::default() })
        .await
        .map_err(|e| e.to_string())?;
    let e = |e: qnetsim::vnode::NodeError| e.to_string();
    let (alice, bob, charlie) = (cluster.node("Alice"), cluster.node("Bob"), cluster.node("Charlie"));
    const APP: u16 = 1;
    // Bob's target qubit shares a register with the qubit he hands to Charlie
    let t = bob.create_qubit(APP).map_err(e)?;
    let c = bob.create_qubit(APP).map_err(e)?;
    bob.apply_gate(APP, c, GateCode::RotY, 37).await.map_err(e)?;
    bob.apply_two(APP, t, c, GateCode::Cnot).await.map_err(e)?;
    bob.send_qubit(APP, c, "Charlie", APP).await.map_err(e)?;
    let c = charlie.recv_qubit(APP).await.map_err(e)?;
    // Alice and Bob share an EPR pair simulated at Alice
    let (a, _) = alice.create_epr(APP, "Bob", APP).await.map_err(e)?;
    let (b, _) = bob.recv_epr(APP).await.map_err(e)?;
    ensure(bob.snapshot().registers.len() == 1, || "Bob should simulate one register before the CNOT".into())?;
    bob.apply_two(APP, b, t, GateCode::Cnot).await.map_err(e)?;

    let mut dumps = Vec::new();
    for name in ["Alice", "Bob", "Charlie"] {
        let addr = cluster.directory().get(name).and_then(|x| x.backend_addr()).map_err(|x| x.to_string())?;
        match query(addr, PeerRequest::NodeStateDump, Duration::from_secs(5)).await.map_err(|x| x.to_string())? {
            PeerResponse::Dump(text) => dumps.push(text),
            other => return Err(format!("unexpected dump reply {other:?}")),
        }
    }
    let alice_sims = dump_value(&dumps[0], "simulated_qubits");
    let alice_regs = dump_value(&dumps[0], "registers");
    ensure(alice_sims.as_deref() == Some("4") && alice_regs.as_deref() == Some("1"), || {
        format!("Alice simulates {alice_sims:?} qubits in {alice_regs:?} registers")
    })?;
    ensure(dumps[0].lines().any(|l| l.starts_with("register ") && l.contains(" qubits=4 ")), || {
        format!("no 4-qubit register in Alice's dump:\n{}", dumps[0])
    })?;
    ensure(dump_value(&dumps[1], "registers").as_deref() == Some("0"), || format!("Bob's dump:\n{}", dumps[1]))?;
    ensure(dump_value(&dumps[1], "simulated_qubits").as_deref() == Some("0"), || format!("Bob's dump:\n{}", dumps[1]))?;
    let remaps: u64 = dump_value(&dumps[2], "remaps_received").and_then(|v| v.parse().ok()).unwrap_or(0);
    ensure(remaps >= 1, || format!("Charlie's dump:\n{}", dumps[2]))?;
    ensure(dumps[2].lines().any(|l| l.starts_with(&format!("virt id={c} ")) && l.contains("host=Alice")), || {
        format!("Charlie's qubit does not point at Alice:\n{}", dumps[2])
    })?;
    cluster.check_consistency()?;

    let mut want = Oracle::new(4);
    want.apply_gate(0, GateCode::H, 0);
    want.apply_two(0, 1, GateCode::Cnot);
    want.apply_two(1, 2, GateCode::Cnot);
    want.apply_gate(3, GateCode::RotY, 37);
    let got = cluster.joint_state(&[("Alice", a), ("Bob", b), ("Bob", t), ("Charlie", c)])?;
    let d = phase_distance(&got, &want.amps);
    ensure(d < 1e-9, || format!("merged state deviates by {d:e}"))?;

    charlie.apply_gate(APP, c, GateCode::RotY, 219).await.map_err(e)?;
    let mc = charlie.measure(APP, c, false).await.map_err(e)?;
    let bits = [
        alice.measure(APP, a, false).await.map_err(e)?,
        bob.measure(APP, b, false).await.map_err(e)?,
        bob.measure(APP, t, false).await.map_err(e)?,
    ];
    ensure(mc == 0, || "Charlie's qubit lost its state".into())?;
    ensure(bits.iter().all(|x| *x == bits[0]), || format!("GHZ outcomes {bits:?}"))?;
    Ok(format!("Alice holds one 4-qubit register, Bob none, Charlie remapped {remaps}x; state within {d:.1e}"))
}

async fn ring_scalability() -> Outcome {
    let start = Instant::now();
    let r = bench::ring(16, RingMode::First, &BenchOptions::new(16, 1)).await.map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("16-node ring took {elapsed:?}"))?;
    ensure(r.peak_register_qubits <= 3, || format!("peak register {} qubits", r.peak_register_qubits))?;
    let mut msg = format!(
        "16 nodes, traversal {:.3} s (with startup {:.3} s), peak register {}",
        r.records[0].wall_time_s,
        elapsed.as_secs_f64(),
        r.peak_register_qubits
    );
    if std::env::var_os("QNETSIM_RING60").is_some() {
        let r60 = bench::ring(60, RingMode::First, &BenchOptions::new(60, 1)).await.map_err(|e| e.to_string())?;
        msg.push_str(&format!("; 60 nodes in {:.3} s", r60.records[0].wall_time_s));
    }
    Ok(msg)
}

async fn scaling_shapes() -> Outcome {
    let mut create = Vec::new();
    for n in [50usize, 100, 200, 400] {
        let r = bench::create_measure(n, &BenchOptions::new(7, 5)).await.map_err(|e| e.to_string())?;
        create.push((n as f64, r.median_wall_time()));
    }
    let slope = bench::loglog_slope(&create);
    ensure(slope < 1.3, || format!("create/measure exponent {slope:.3} from {create:?}"))?;
    let sweep = bench::ghz_sweep(&[8, 10, 12, 14], &BenchOptions::new(7, 41)).await.map_err(|e| e.to_string())?;
    let ghz: Vec<f64> = sweep.iter().map(|r| r.median_wall_time()).collect();
    let ratios: Vec<f64> = ghz.windows(2).map(|w| w[1] / w[0]).collect();
    ensure(ratios.windows(2).all(|w| w[1] > w[0]), || format!("GHZ ratios {ratios:?} from medians {ghz:?}"))?;
    Ok(format!(
        "create exponent {slope:.3}; GHZ ratios {}",
        ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" < ")
    ))
}

fn random_command(rng: &mut ChaCha8Rng, instr: Instruction, options: u8, factory: bool, depth: usize) -> Command {
    let mut cmd = Command::new(rng.gen(), instr, options);
    let conditional = options & (OPT_ACTION | OPT_IFTHEN) != 0;
    cmd.extra = (factory || instr.has_extra() || conditional).then(|| ExtraHeader {
        extra_qubit_id: rng.gen(),
        remote_app_id: rng.gen(),
        remote_node: rng.gen(),
        remote_port: rng.gen(),
        step: rng.gen(),
    });
    if conditional && depth < 2 {
        for _ in 0..rng.gen_range(0..3) {
            let i = Instruction::ALL[rng.gen_range(0..Instruction::ALL.len())];
            let opts = rng.gen_range(0..16);
            cmd.block.push(random_command(rng, i, opts, false, depth + 1));
        }
    }
    cmd
}

fn random_reply(rng: &mut ChaCha8Rng, t: MsgType) -> CqcReply {
    let body = match t {
        MsgType::NewOk | MsgType::Recv | MsgType::Expire => ReplyBody::QubitId(rng.gen()),
        MsgType::MeasOut => ReplyBody::Outcome(rng.gen_range(0..2)),
        MsgType::InfTime => ReplyBody::Time(rng.gen()),
        MsgType::EprOk => ReplyBody::Epr {
            qubit_id: rng.gen(),
            ent: EntInfo { node_a: rng.gen(), node_b: rng.gen(), sequence: rng.gen(), created_at: rng.gen() },
        },
        MsgType::Hello => {
            let len = rng.gen_range(0..12);
            ReplyBody::Hello { max_qubits: rng.gen(), name: (0..len).map(|_| rng.gen_range('a'..='z')).collect() }
        }
        _ => ReplyBody::Empty,
    };
    CqcReply::new(t, rng.gen(), body)
}

async fn codec_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0usize;
    let mut mismatches = Vec::new();
    let mut check_request = |req: CqcRequest| {
        let bytes = req.encode();
        match CqcRequest::decode(&bytes) {
            Ok(back) if back == req && back.encode() == bytes => {}
            other => mismatches.push(format!("{req:?} -> {other:?}")),
        }
    };
    for instr in Instruction::ALL {
        for options in 0..16u8 {
            for _ in 0..15 {
                let n = rng.gen_range(1..4);
                let commands = (0..n).map(|_| random_command(&mut rng, instr, options, false, 0)).collect();
                check_request(CqcRequest::Command { app_id: rng.gen(), commands });
                let command = random_command(&mut rng, instr, options, true, 0);
                check_request(CqcRequest::Factory { app_id: rng.gen(), command });
                cases += 2;
            }
        }
    }
    for _ in 0..500 {
        check_request(CqcRequest::Hello { app_id: rng.gen() });
        check_request(CqcRequest::GetTime { app_id: rng.gen(), qubit_id: rng.gen() });
        cases += 2;
    }
    for t in MsgType::ALL {
        for _ in 0..100 {
            let reply = random_reply(&mut rng, t);
            let bytes = reply.encode();
            match CqcReply::decode(&bytes) {
                Ok(back) if back == reply && back.encode() == bytes => {}
                other => mismatches.push(format!("{reply:?} -> {other:?}")),
            }
            cases += 1;
        }
    }
    ensure(cases >= 10_000 && mismatches.is_empty(), || {
        format!("{} mismatches in {cases} cases, first: {:?}", mismatches.len(), mismatches.first())
    })?;

    let mut crashes = 0usize;
    let mut decoded = 0usize;
    for i in 0..1_000_000u32 {
        let len = rng.gen_range(0..48);
        let mut bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        if i % 2 == 0 && len >= 8 {
            // keep the version and a declared length that matches, to reach deeper paths
            bytes[0] = 1;
            bytes[1] = rng.gen_range(0..3);
            bytes[4..8].copy_from_slice(&((len - 8) as u32).to_be_bytes());
        }
        match catch_unwind(AssertUnwindSafe(|| (CqcRequest::decode(&bytes).is_ok(), CqcReply::decode(&bytes).is_ok())))
        {
            Ok((a, b)) => decoded += a as usize + b as usize,
            Err(_) => crashes += 1,
        }
    }
    ensure(crashes == 0, || format!("{crashes} panics while decoding random bytes"))?;

    let seen = provoke_errors().await?;
    let reached: HashSet<MsgType> = seen.into_iter().collect();
    let missing: Vec<MsgType> = MsgType::ALL
        .into_iter()
        .filter(|t| t.is_error() || *t == MsgType::Expire)
        .filter(|t| !reached.contains(t))
        .collect();
    ensure(missing.is_empty(), || format!("never reached {missing:?}"))?;
    Ok(format!("{cases} round trips, 1000000 fuzz inputs ({decoded} decodable), all 9 error replies reached"))
}

async fn lock_stress() -> Outcome {
    const APP: u16 = 1;
    let cluster = Cluster::start(&["Alice", "Bob"], NodeConfig { seed: Some(8), ..NodeConfig::default() })
        .await
        .map_err(|e| e.to_string())?;
    let (alice, bob) = (cluster.node("Alice").clone(), cluster.node("Bob").clone());
    let e = |e: qnetsim::vnode::NodeError| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for iter in 0..1000 {
        let (sa, sb): (u8, u8) = (rng.gen(), rng.gen());
        let (x1, y1) = (alice.create_qubit(APP).map_err(e)?, alice.create_qubit(APP).map_err(e)?);
        let (x2, y2) = (bob.create_qubit(APP).map_err(e)?, bob.create_qubit(APP).map_err(e)?);
        alice.apply_gate(APP, x1, GateCode::RotY, sa).await.map_err(e)?;
        alice.apply_two(APP, x1, y1, GateCode::Cnot).await.map_err(e)?;
        bob.apply_gate(APP, x2, GateCode::RotY, sb).await.map_err(e)?;
        bob.apply_two(APP, x2, y2, GateCode::Cnot).await.map_err(e)?;
        alice.send_qubit(APP, y1, "Bob", APP).await.map_err(e)?;
        bob.send_qubit(APP, y2, "Alice", APP).await.map_err(e)?;
        let y1 = bob.recv_qubit(APP).await.map_err(e)?;
        let y2 = alice.recv_qubit(APP).await.map_err(e)?;
        // each side entangles its own qubit with the register held by the other side
        let crossed = async {
            tokio::join!(alice.apply_two(APP, x1, y2, GateCode::Cnot), bob.apply_two(APP, x2, y1, GateCode::Cnot))
        };
        let (ra, rb) = tokio::time::timeout(Duration::from_secs(60), crossed)
            .await
            .map_err(|_| format!("iteration {iter}: crossed merge did not finish (deadlock)"))?;
        ra.map_err(e)?;
        rb.map_err(e)?;

        let mut want = Oracle::new(4);
        want.apply_gate(0, GateCode::RotY, sa);
        want.apply_two(0, 1, GateCode::Cnot);
        want.apply_gate(2, GateCode::RotY, sb);
        want.apply_two(2, 3, GateCode::Cnot);
        want.apply_two(0, 3, GateCode::Cnot);
        want.apply_two(2, 1, GateCode::Cnot);
        let got = cluster.joint_state(&[("Alice", x1), ("Bob", y1), ("Bob", x2), ("Alice", y2)])?;
        let d = phase_distance(&got, &want.amps);
        worst = worst.max(d);
        ensure(d < 1e-9, || format!("iteration {iter}: state deviates by {d:e}"))?;
        for (node, q) in [(&alice, x1), (&alice, y2), (&bob, x2), (&bob, y1)] {
            node.measure(APP, q, false).await.map_err(e)?;
        }
    }
    cluster.check_consistency().map_err(|v| format!("consistency sweep: {v}"))?;
    let conflicts: u64 = cluster.snapshots().iter().map(|s| s.lock_metrics.conflicts).sum();
    let backoffs: u64 = cluster.snapshots().iter().map(|s| s.lock_metrics.backoffs).sum();
    Ok(format!("1000 crossed merges, {conflicts} lock conflicts, {backoffs} backoffs, state within {worst:.1e}"))
}

fn report(n: usize, title: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n}: PASS {title}: {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {n}: FAIL {title}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().expect("runtime");
    let passed = rt.block_on(async {
        let mut ok = true;
        ok &= report(1, "distributed simulation matches a single register", distributed_equals_monolithic().await);
        let protocols = protocol_report().await;
        match &protocols {
            Ok(r) => {
                ok &= report(2, "BB84 determinism", bb84(r));
                ok &= report(3, "teleportation", teleport_states(r).await);
            }
            Err(e) => {
                ok &= report(2, "BB84 determinism", Err(e.clone()));
                ok &= report(3, "teleportation", Err(e.clone()));
            }
        }
        ok &= report(4, "register merge locality", fig5_merge().await);
        ok &= report(5, "ring scalability", ring_scalability().await);
        ok &= report(6, "scaling shapes", scaling_shapes().await);
        ok &= report(7, "CQC codec conformance", codec_conformance().await);
        ok &= report(8, "crossed merge lock stress", lock_stress().await);
        ok
    });
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
