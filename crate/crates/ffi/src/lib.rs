//! C interface to the qnetsim state-vector engine, the CQC codec and a
//! blocking CQC client.
//!
//! Every function returns a `QnsStatus` code. On failure a message is kept
//! per thread and can be read with `qns_last_error_message`. Handles are
//! opaque pointers owned by the caller and released with the matching
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use qnetsim::cqc::client::{BlockingCqcClient, ClientError};
use qnetsim::cqc::codec::{Command, CqcReply, CqcRequest, ExtraHeader, Instruction, MsgType, ReplyBody};
use qnetsim::engine::{gate_from_command, EngineError, GateCode, QuantumRegister, StateRegister};
use qnetsim::netconf::NodeDirectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QnsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Capacity = 3,
    BufferTooSmall = 4,
    Codec = 5,
    Io = 6,
    /// The CQC server answered with an error; see `qns_last_reply_type`.
    Server = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
    static LAST_REPLY: RefCell<u8> = const { RefCell::new(0) };
}

fn fail(status: QnsStatus, message: impl Into<String>) -> QnsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> QnsStatus) -> QnsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(QnsStatus::Panic, "internal panic"),
    }
}

fn engine_status(e: EngineError) -> QnsStatus {
    match e {
        EngineError::Capacity { .. } => fail(QnsStatus::Capacity, e.to_string()),
        other => fail(QnsStatus::InvalidArgument, other.to_string()),
    }
}

fn client_status(e: ClientError) -> QnsStatus {
    if let Some(t) = e.reply_type() {
        LAST_REPLY.with(|r| *r.borrow_mut() = t as u8);
    }
    let status = match e {
        ClientError::Io(_) => QnsStatus::Io,
        ClientError::Codec(_) => QnsStatus::Codec,
        ClientError::UnknownNode(_) => QnsStatus::InvalidArgument,
        ClientError::Server(_) | ClientError::Expired(_) | ClientError::Unexpected(_) => QnsStatus::Server,
    };
    fail(status, e.to_string())
}

unsafe fn out<'a, T>(ptr: *mut T) -> Result<&'a mut T, QnsStatus> {
    ptr.as_mut().ok_or_else(|| fail(QnsStatus::NullPointer, "null output pointer"))
}

unsafe fn text<'a>(ptr: *const c_char) -> Result<&'a str, QnsStatus> {
    if ptr.is_null() {
        return Err(fail(QnsStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| fail(QnsStatus::InvalidArgument, "string is not UTF-8"))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Length in bytes of the last error message on this thread.
#[no_mangle]
pub extern "C" fn qns_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message, NUL-terminated, into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn qns_last_error_message(buf: *mut c_char, cap: usize) -> QnsStatus {
    if buf.is_null() {
        return QnsStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if cap < msg.len() + 1 {
            return QnsStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, msg.len());
        *buf.add(msg.len()) = 0;
        QnsStatus::Ok
    })
}

/// CQC message type of the last server error seen on this thread.
#[no_mangle]
pub extern "C" fn qns_last_reply_type() -> u8 {
    LAST_REPLY.with(|r| *r.borrow())
}

/// A state-vector register with its own measurement randomness.
pub struct QnsRegister {
    reg: StateRegister,
    rng: ChaCha8Rng,
}

/// Creates a register of `num_qubits` qubits in |0...0>, capped at `max_qubits`.
///
/// # Safety
/// `out_reg` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qns_register_new(
    num_qubits: usize,
    max_qubits: usize,
    seed: u64,
    out_reg: *mut *mut QnsRegister,
) -> QnsStatus {
    guard(|| {
        let slot = tri!(out(out_reg));
        let mut reg = StateRegister::with_limit(0, max_qubits);
        for _ in 0..num_qubits {
            if let Err(e) = reg.add_qubit() {
                return engine_status(e);
            }
        }
        *slot = Box::into_raw(Box::new(QnsRegister { reg, rng: ChaCha8Rng::seed_from_u64(seed) }));
        QnsStatus::Ok
    })
}

/// # Safety
/// `reg` must come from `qns_register_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qns_register_free(reg: *mut QnsRegister) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Number of qubits, or 0 for a null handle.
///
/// # Safety
/// `reg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qns_register_num_qubits(reg: *const QnsRegister) -> usize {
    reg.as_ref().map_or(0, |r| r.reg.num_qubits())
}

/// Applies a single-qubit gate given by its CQC instruction code.
///
/// # Safety
/// `reg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qns_register_apply_gate(reg: *mut QnsRegister, pos: usize, code: u8, step: u8) -> QnsStatus {
    guard(|| {
        let r = tri!(out(reg));
        let code = match GateCode::from_u8(code) {
            Ok(c) if c.arity() == 1 => c,
            _ => return fail(QnsStatus::InvalidArgument, format!("{code} is not a single-qubit gate")),
        };
        match r.reg.apply_single(pos, &gate_from_command(code, step)) {
            Ok(()) => QnsStatus::Ok,
            Err(e) => engine_status(e),
        }
    })
}

/// Applies CNOT (20) or CPHASE (21).
///
/// # Safety
/// `reg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qns_register_apply_two(
    reg: *mut QnsRegister,
    control: usize,
    target: usize,
    code: u8,
) -> QnsStatus {
    guard(|| {
        let r = tri!(out(reg));
        let code = match GateCode::from_u8(code) {
            Ok(c) if c.arity() == 2 => c,
            _ => return fail(QnsStatus::InvalidArgument, format!("{code} is not a two-qubit gate")),
        };
        match r.reg.apply_two(control, target, &gate_from_command(code, 0)) {
            Ok(()) => QnsStatus::Ok,
            Err(e) => engine_status(e),
        }
    })
}

/// Measures qubit `pos`; a demolition measurement removes it.
///
/// # Safety
/// `reg` and `out_bit` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qns_register_measure(
    reg: *mut QnsRegister,
    pos: usize,
    demolition: bool,
    out_bit: *mut u8,
) -> QnsStatus {
    guard(|| {
        let r = tri!(out(reg));
        let bit = tri!(out(out_bit));
        let QnsRegister { reg, rng } = r;
        match reg.measure(pos, demolition, rng) {
            Ok(m) => {
                *bit = m.bit;
                QnsStatus::Ok
            }
            Err(e) => engine_status(e),
        }
    })
}

/// Copies the 2^n amplitudes into `re` and `im`, index 0 being |0...0> with
/// qubit 0 as the most significant bit.
///
/// # Safety
/// `re` and `im` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qns_register_amplitudes(
    reg: *const QnsRegister,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> QnsStatus {
    guard(|| {
        let Some(r) = reg.as_ref() else { return fail(QnsStatus::NullPointer, "null register") };
        if re.is_null() || im.is_null() {
            return fail(QnsStatus::NullPointer, "null amplitude buffer");
        }
        let amps = r.reg.amplitudes();
        if len < amps.len() {
            return fail(QnsStatus::BufferTooSmall, format!("need {} amplitudes", amps.len()));
        }
        for (i, a) in amps.iter().enumerate() {
            *re.add(i) = a.re;
            *im.add(i) = a.im;
        }
        QnsStatus::Ok
    })
}

/// Fields of a single CQC command. `has_extra` forces the extra header even
/// when the instruction does not need it.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QnsCommand {
    pub qubit_id: u16,
    pub instruction: u8,
    pub options: u8,
    pub has_extra: bool,
    pub extra_qubit_id: u16,
    pub remote_app_id: u16,
    /// IPv4 address as a host-order integer.
    pub remote_node: u32,
    pub remote_port: u16,
    pub step: u8,
}

/// Encodes a COMMAND message holding one command. `out_len` receives the
/// full message length even when `buf` is too small.
///
/// # Safety
/// `cmd` and `out_len` must be valid; `buf` must be valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn qns_cqc_encode_command(
    app_id: u16,
    cmd: *const QnsCommand,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> QnsStatus {
    guard(|| {
        let Some(c) = cmd.as_ref() else { return fail(QnsStatus::NullPointer, "null command") };
        let len = tri!(out(out_len));
        let Some(instruction) = Instruction::from_u8(c.instruction) else {
            return fail(QnsStatus::InvalidArgument, format!("unknown instruction {}", c.instruction));
        };
        let mut command = Command::new(c.qubit_id, instruction, c.options);
        if c.has_extra || command.extra.is_some() {
            command.extra = Some(ExtraHeader {
                extra_qubit_id: c.extra_qubit_id,
                remote_app_id: c.remote_app_id,
                remote_node: c.remote_node,
                remote_port: c.remote_port,
                step: c.step,
            });
        }
        let bytes = CqcRequest::Command { app_id, commands: vec![command] }.encode();
        *len = bytes.len();
        if buf.is_null() || cap < bytes.len() {
            return fail(QnsStatus::BufferTooSmall, format!("need {} bytes", bytes.len()));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        QnsStatus::Ok
    })
}

/// A decoded reply. Only the fields implied by `msg_type` are meaningful.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QnsReply {
    pub msg_type: u8,
    pub app_id: u16,
    pub qubit_id: u16,
    pub outcome: u8,
    pub time: u64,
    pub ent_node_a: u32,
    pub ent_node_b: u32,
    pub ent_sequence: u32,
    pub ent_created_at: u64,
    pub max_qubits: u16,
}

fn flatten(reply: &CqcReply) -> QnsReply {
    let mut r = QnsReply { msg_type: reply.msg_type as u8, app_id: reply.app_id, ..Default::default() };
    match &reply.body {
        ReplyBody::Empty => {}
        ReplyBody::QubitId(q) => r.qubit_id = *q,
        ReplyBody::Outcome(b) => r.outcome = *b,
        ReplyBody::Time(t) => r.time = *t,
        ReplyBody::Epr { qubit_id, ent } => {
            r.qubit_id = *qubit_id;
            r.ent_node_a = ent.node_a;
            r.ent_node_b = ent.node_b;
            r.ent_sequence = ent.sequence;
            r.ent_created_at = ent.created_at;
        }
        ReplyBody::Hello { max_qubits, .. } => r.max_qubits = *max_qubits,
    }
    r
}

/// Decodes one complete reply message.
///
/// # Safety
/// `bytes` must be valid for `len` bytes and `out_reply` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qns_cqc_decode_reply(bytes: *const u8, len: usize, out_reply: *mut QnsReply) -> QnsStatus {
    guard(|| {
        if bytes.is_null() {
            return fail(QnsStatus::NullPointer, "null input");
        }
        let slot = tri!(out(out_reply));
        match CqcReply::decode(std::slice::from_raw_parts(bytes, len)) {
            Ok(r) => {
                *slot = flatten(&r);
                QnsStatus::Ok
            }
            Err(e) => fail(QnsStatus::Codec, e.to_string()),
        }
    })
}

/// A connection to one node's CQC server.
pub struct QnsClient {
    inner: BlockingCqcClient,
}

/// Connects to node `node` of the network described by the config file at
/// `config_path`, as application `app_id`.
///
/// # Safety
/// Strings must be NUL-terminated; `out_client` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qns_client_connect(
    config_path: *const c_char,
    node: *const c_char,
    app_id: u16,
    out_client: *mut *mut QnsClient,
) -> QnsStatus {
    guard(|| {
        let slot = tri!(out(out_client));
        let path = tri!(text(config_path));
        let node = tri!(text(node));
        let dir = match NodeDirectory::load(Path::new(path)) {
            Ok(d) => d,
            Err(e) => return fail(QnsStatus::InvalidArgument, e.to_string()),
        };
        let addr = match dir.get(node).and_then(|e| e.cqc_addr()) {
            Ok(a) => a,
            Err(e) => return fail(QnsStatus::InvalidArgument, e.to_string()),
        };
        match BlockingCqcClient::connect(addr, app_id, dir) {
            Ok(inner) => {
                *slot = Box::into_raw(Box::new(QnsClient { inner }));
                QnsStatus::Ok
            }
            Err(e) => client_status(e),
        }
    })
}

/// # Safety
/// `client` must come from `qns_client_connect` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qns_client_free(client: *mut QnsClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

unsafe fn with_client<T>(
    client: *mut QnsClient,
    result: *mut T,
    f: impl FnOnce(&mut BlockingCqcClient) -> Result<T, ClientError>,
) -> QnsStatus {
    guard(|| {
        let c = tri!(out(client));
        match f(&mut c.inner) {
            Ok(v) => {
                if let Some(slot) = result.as_mut() {
                    *slot = v;
                }
                QnsStatus::Ok
            }
            Err(e) => client_status(e),
        }
    })
}

/// # Safety
/// `client` must be a live handle; `out_id` may be null.
#[no_mangle]
pub unsafe extern "C" fn qns_client_new_qubit(client: *mut QnsClient, out_id: *mut u16) -> QnsStatus {
    with_client(client, out_id, |c| c.call(|c| c.new_qubit()))
}

/// Applies a single-qubit gate by CQC instruction code.
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qns_client_gate(client: *mut QnsClient, qubit: u16, instruction: u8, step: u8) -> QnsStatus {
    let Some(instr) = Instruction::from_u8(instruction).filter(|i| i.gate().is_some_and(|g| g.arity() == 1)) else {
        return fail(QnsStatus::InvalidArgument, format!("{instruction} is not a single-qubit gate"));
    };
    with_client(client, std::ptr::null_mut::<()>(), |c| c.call(|c| c.gate(qubit, instr, step)))
}

/// Applies CNOT (20) or CPHASE (21).
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qns_client_two(
    client: *mut QnsClient,
    instruction: u8,
    control: u16,
    target: u16,
) -> QnsStatus {
    let Some(instr) = Instruction::from_u8(instruction).filter(|i| i.gate().is_some_and(|g| g.arity() == 2)) else {
        return fail(QnsStatus::InvalidArgument, format!("{instruction} is not a two-qubit gate"));
    };
    with_client(client, std::ptr::null_mut::<()>(), |c| c.call(|c| c.two(instr, control, target)))
}

/// # Safety
/// `client` must be a live handle; `out_bit` may be null.
#[no_mangle]
pub unsafe extern "C" fn qns_client_measure(
    client: *mut QnsClient,
    qubit: u16,
    inplace: bool,
    out_bit: *mut u8,
) -> QnsStatus {
    with_client(client, out_bit, |c| {
        c.call(|c| async move {
            if inplace {
                c.measure_inplace(qubit).await
            } else {
                c.measure(qubit).await
            }
        })
    })
}

/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qns_client_release(client: *mut QnsClient, qubit: u16) -> QnsStatus {
    with_client(client, std::ptr::null_mut::<()>(), |c| c.call(|c| c.release(qubit)))
}

/// Sends a qubit to application `remote_app` on node `node`.
///
/// # Safety
/// `client` must be a live handle and `node` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qns_client_send(
    client: *mut QnsClient,
    qubit: u16,
    node: *const c_char,
    remote_app: u16,
) -> QnsStatus {
    let node = tri!(text(node)).to_string();
    with_client(client, std::ptr::null_mut::<()>(), |c| {
        c.call(|c| async move { c.send(qubit, &node, remote_app).await })
    })
}

/// Waits for a qubit sent to this application.
///
/// # Safety
/// `client` must be a live handle; `out_id` may be null.
#[no_mangle]
pub unsafe extern "C" fn qns_client_recv(client: *mut QnsClient, out_id: *mut u16) -> QnsStatus {
    with_client(client, out_id, |c| c.call(|c| c.recv()))
}

/// Creates an EPR pair with application `remote_app` on node `node`.
///
/// # Safety
/// `client` must be a live handle and `node` NUL-terminated; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn qns_client_create_epr(
    client: *mut QnsClient,
    node: *const c_char,
    remote_app: u16,
    out_reply: *mut QnsReply,
) -> QnsStatus {
    let node = tri!(text(node)).to_string();
    with_client(client, out_reply, |c| {
        c.call(|c| async move {
            let (qubit_id, ent) = c.create_epr(&node, remote_app).await?;
            Ok(flatten(&CqcReply::new(MsgType::EprOk, c.app_id(), ReplyBody::Epr { qubit_id, ent })))
        })
    })
}

/// Waits for the other half of an EPR pair.
///
/// # Safety
/// `client` must be a live handle; `out_reply` may be null.
#[no_mangle]
pub unsafe extern "C" fn qns_client_recv_epr(client: *mut QnsClient, out_reply: *mut QnsReply) -> QnsStatus {
    with_client(client, out_reply, |c| {
        c.call(|c| async move {
            let (qubit_id, ent) = c.recv_epr().await?;
            Ok(flatten(&CqcReply::new(MsgType::EprOk, c.app_id(), ReplyBody::Epr { qubit_id, ent })))
        })
    })
}
