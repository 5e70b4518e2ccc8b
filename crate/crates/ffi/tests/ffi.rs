use std::ffi::CString;
use std::path::PathBuf;
use std::ptr;

use qnetsim::cluster::Cluster;
use qnetsim::vnode::NodeConfig;
use qnetsim_ffi::*;

const H: u8 = 17;
const X: u8 = 10;
const ROT_X: u8 = 14;
const CNOT: u8 = 20;

fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/cqc/golden.txt");
    let text = std::fs::read_to_string(path).unwrap();
    let hex = text
        .lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("fixture {name} missing"));
    (0..hex.len()).step_by(2).map(|i| u8::from_str_radix(&hex[i..i + 2], 16).unwrap()).collect()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; qns_last_error_length() + 1];
    assert_eq!(unsafe { qns_last_error_message(buf.as_mut_ptr(), buf.len()) }, QnsStatus::Ok);
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

fn amplitudes(reg: *const QnsRegister) -> Vec<(f64, f64)> {
    let n = 1usize << unsafe { qns_register_num_qubits(reg) };
    let (mut re, mut im) = (vec![0.0; n], vec![0.0; n]);
    assert_eq!(unsafe { qns_register_amplitudes(reg, re.as_mut_ptr(), im.as_mut_ptr(), n) }, QnsStatus::Ok);
    re.into_iter().zip(im).collect()
}

#[test]
fn register_builds_a_bell_pair() {
    let mut reg = ptr::null_mut();
    unsafe {
        assert_eq!(qns_register_new(2, 20, 7, &mut reg), QnsStatus::Ok);
        assert_eq!(qns_register_num_qubits(reg), 2);
        assert_eq!(qns_register_apply_gate(reg, 0, H, 0), QnsStatus::Ok);
        assert_eq!(qns_register_apply_two(reg, 0, 1, CNOT), QnsStatus::Ok);
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [(s, 0.0), (0.0, 0.0), (0.0, 0.0), (s, 0.0)];
    for (a, e) in amplitudes(reg).iter().zip(expected) {
        assert!((a.0 - e.0).abs() < 1e-12 && (a.1 - e.1).abs() < 1e-12);
    }
    let (mut a, mut b) = (9u8, 9u8);
    unsafe {
        assert_eq!(qns_register_measure(reg, 0, true, &mut a), QnsStatus::Ok);
        assert_eq!(qns_register_num_qubits(reg), 1);
        assert_eq!(qns_register_measure(reg, 0, false, &mut b), QnsStatus::Ok);
        qns_register_free(reg);
    }
    assert_eq!(a, b);
}

#[test]
fn rotation_step_matches_angle() {
    let mut reg = ptr::null_mut();
    unsafe {
        assert_eq!(qns_register_new(1, 20, 1, &mut reg), QnsStatus::Ok);
        assert_eq!(qns_register_apply_gate(reg, 0, ROT_X, 64), QnsStatus::Ok);
    }
    let amps = amplitudes(reg);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!((amps[0].0 - s).abs() < 1e-12 && amps[0].1.abs() < 1e-12);
    assert!(amps[1].0.abs() < 1e-12 && (amps[1].1 + s).abs() < 1e-12);
    unsafe { qns_register_free(reg) };
}

#[test]
fn register_errors_are_reported() {
    let mut reg = ptr::null_mut();
    unsafe {
        assert_eq!(qns_register_new(3, 2, 0, &mut reg), QnsStatus::Capacity);
        assert!(reg.is_null());
        assert!(last_error().contains("limit is 2"));
        assert_eq!(qns_register_new(1, 2, 0, ptr::null_mut()), QnsStatus::NullPointer);
        assert_eq!(qns_register_new(1, 2, 0, &mut reg), QnsStatus::Ok);
        assert_eq!(qns_register_apply_gate(reg, 5, X, 0), QnsStatus::InvalidArgument);
        assert_eq!(qns_register_apply_gate(reg, 0, CNOT, 0), QnsStatus::InvalidArgument);
        assert_eq!(qns_register_apply_two(reg, 0, 0, CNOT), QnsStatus::InvalidArgument);
        let mut small = [0.0; 1];
        assert_eq!(qns_register_amplitudes(reg, small.as_mut_ptr(), small.as_mut_ptr(), 1), QnsStatus::BufferTooSmall);
        assert_eq!(qns_register_apply_gate(ptr::null_mut(), 0, X, 0), QnsStatus::NullPointer);
        assert_eq!(qns_register_num_qubits(ptr::null()), 0);
        qns_register_free(reg);
        qns_register_free(ptr::null_mut());
    }
}

#[test]
fn encoded_commands_match_golden_fixtures() {
    let mut buf = [0u8; 64];
    let mut len = 0;
    let h = QnsCommand { qubit_id: 3, instruction: H, options: 0x05, ..Default::default() };
    assert_eq!(unsafe { qns_cqc_encode_command(1, &h, buf.as_mut_ptr(), buf.len(), &mut len) }, QnsStatus::Ok);
    assert_eq!(&buf[..len], fixture("command_17_h"));

    let rot = QnsCommand { qubit_id: 3, instruction: ROT_X, options: 0x05, step: 64, ..Default::default() };
    assert_eq!(unsafe { qns_cqc_encode_command(1, &rot, buf.as_mut_ptr(), buf.len(), &mut len) }, QnsStatus::Ok);
    assert_eq!(&buf[..len], fixture("command_14_rotx"));

    assert_eq!(unsafe { qns_cqc_encode_command(1, &rot, buf.as_mut_ptr(), 4, &mut len) }, QnsStatus::BufferTooSmall);
    assert_eq!(len, fixture("command_14_rotx").len());
    let bad = QnsCommand { instruction: 19, ..Default::default() };
    assert_eq!(
        unsafe { qns_cqc_encode_command(1, &bad, buf.as_mut_ptr(), buf.len(), &mut len) },
        QnsStatus::InvalidArgument
    );
}

#[test]
fn golden_replies_decode() {
    let mut reply = QnsReply::default();
    let bytes = fixture("reply_measout");
    assert_eq!(unsafe { qns_cqc_decode_reply(bytes.as_ptr(), bytes.len(), &mut reply) }, QnsStatus::Ok);
    assert_eq!((reply.msg_type, reply.app_id, reply.outcome), (7, 1, 1));

    let bytes = fixture("reply_epr_ok");
    assert_eq!(unsafe { qns_cqc_decode_reply(bytes.as_ptr(), bytes.len(), &mut reply) }, QnsStatus::Ok);
    assert_eq!((reply.msg_type, reply.qubit_id, reply.ent_node_b, reply.ent_sequence), (6, 5, 1, 7));

    assert_eq!(unsafe { qns_cqc_decode_reply(bytes.as_ptr(), 5, &mut reply) }, QnsStatus::Codec);
}

#[test]
fn client_teleports_between_nodes() {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let cluster =
        rt.block_on(Cluster::start(&["Alice", "Bob"], NodeConfig { seed: Some(3), ..NodeConfig::default() })).unwrap();
    let path = std::env::temp_dir().join(format!("qnetsim-ffi-{}.cfg", std::process::id()));
    std::fs::write(&path, cluster.directory().render()).unwrap();
    let config = CString::new(path.to_str().unwrap()).unwrap();
    let (alice_name, bob_name) = (CString::new("Alice").unwrap(), CString::new("Bob").unwrap());

    let (mut alice, mut bob) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(qns_client_connect(config.as_ptr(), alice_name.as_ptr(), 1, &mut alice), QnsStatus::Ok);
        assert_eq!(qns_client_connect(config.as_ptr(), bob_name.as_ptr(), 1, &mut bob), QnsStatus::Ok);

        let mut q = 0u16;
        assert_eq!(qns_client_new_qubit(alice, &mut q), QnsStatus::Ok);
        assert_eq!(qns_client_gate(alice, q, X, 0), QnsStatus::Ok);
        let mut epr = QnsReply::default();
        assert_eq!(qns_client_create_epr(alice, bob_name.as_ptr(), 1, &mut epr), QnsStatus::Ok);
        let mut their = QnsReply::default();
        assert_eq!(qns_client_recv_epr(bob, &mut their), QnsStatus::Ok);
        assert_eq!(epr.ent_sequence, their.ent_sequence);

        assert_eq!(qns_client_two(alice, CNOT, q, epr.qubit_id), QnsStatus::Ok);
        assert_eq!(qns_client_gate(alice, q, H, 0), QnsStatus::Ok);
        let (mut m1, mut m2) = (0u8, 0u8);
        assert_eq!(qns_client_measure(alice, q, false, &mut m1), QnsStatus::Ok);
        assert_eq!(qns_client_measure(alice, epr.qubit_id, false, &mut m2), QnsStatus::Ok);
        if m2 == 1 {
            assert_eq!(qns_client_gate(bob, their.qubit_id, X, 0), QnsStatus::Ok);
        }
        if m1 == 1 {
            assert_eq!(qns_client_gate(bob, their.qubit_id, 11, 0), QnsStatus::Ok);
        }
        let mut out = 0u8;
        assert_eq!(qns_client_measure(bob, their.qubit_id, true, &mut out), QnsStatus::Ok);
        assert_eq!(out, 1);

        assert_eq!(qns_client_send(bob, their.qubit_id, alice_name.as_ptr(), 1), QnsStatus::Ok);
        let mut back = 0u16;
        assert_eq!(qns_client_recv(alice, &mut back), QnsStatus::Ok);
        assert_eq!(qns_client_measure(alice, back, false, &mut out), QnsStatus::Ok);
        assert_eq!(out, 1);

        assert_eq!(qns_client_gate(alice, back, X, 0), QnsStatus::Server);
        assert!(qns_last_reply_type() == 3 || qns_last_reply_type() == 20, "{}", qns_last_reply_type());
        assert_eq!(qns_client_gate(alice, 0, CNOT, 0), QnsStatus::InvalidArgument);

        let nobody = CString::new("Nobody").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(qns_client_connect(config.as_ptr(), nobody.as_ptr(), 1, &mut none), QnsStatus::InvalidArgument);

        qns_client_free(alice);
        qns_client_free(bob);
    }
    cluster.shutdown();
    let _ = std::fs::remove_file(path);
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/qnetsim.h")).unwrap();
    for name in [
        "qns_register_new",
        "qns_register_apply_gate",
        "qns_register_amplitudes",
        "qns_cqc_encode_command",
        "qns_cqc_decode_reply",
        "qns_client_connect",
        "qns_client_create_epr",
        "qns_last_error_message",
        "QNS_STATUS_OK = 0",
        "typedef struct QnsRegister QnsRegister",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
