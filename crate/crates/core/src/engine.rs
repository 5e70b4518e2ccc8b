//! Dense state-vector registers.
//!
//! A [`StateRegister`] holds the pure state of `n` qubits as `2^n` complex
//! amplitudes. Qubit position 0 is the most significant bit of the amplitude
//! index, so the basis state `|q0 q1 ... q(n-1)>` lives at the index whose
//! binary expansion reads `q0 q1 ... q(n-1)`.
//!
//! Registers are single threaded; callers serialize access.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

pub type C64 = Complex64;

/// Default cap on the number of qubits in one register.
pub const DEFAULT_MAX_REGISTER_QUBITS: usize = 20;

/// Tolerance for runtime invariant checks (norm, unitarity).
pub const RUNTIME_TOLERANCE: f64 = 1e-9;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("qubit position {pos} out of range for a {num_qubits}-qubit register")]
    InvalidQubit { pos: usize, num_qubits: usize },
    #[error("invalid operation: {0}")]
    InvalidOperation(&'static str),
    #[error("register would hold {requested} qubits, limit is {max}")]
    Capacity { requested: usize, max: usize },
    #[error("unsupported gate command code {0}")]
    UnsupportedCommand(u8),
}

/// Gate instructions understood by the engine. The discriminants are the CQC
/// instruction codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum GateCode {
    I = 0,
    X = 10,
    Z = 11,
    Y = 12,
    T = 13,
    RotX = 14,
    RotY = 15,
    RotZ = 16,
    H = 17,
    K = 18,
    Cnot = 20,
    Cphase = 21,
}

impl GateCode {
    pub const ALL: [GateCode; 12] = [
        GateCode::I,
        GateCode::X,
        GateCode::Z,
        GateCode::Y,
        GateCode::T,
        GateCode::RotX,
        GateCode::RotY,
        GateCode::RotZ,
        GateCode::H,
        GateCode::K,
        GateCode::Cnot,
        GateCode::Cphase,
    ];

    pub fn from_u8(code: u8) -> Result<Self, EngineError> {
        GateCode::ALL.iter().copied().find(|g| *g as u8 == code).ok_or(EngineError::UnsupportedCommand(code))
    }

    pub fn arity(self) -> usize {
        match self {
            GateCode::Cnot | GateCode::Cphase => 2,
            _ => 1,
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, GateCode::RotX | GateCode::RotY | GateCode::RotZ)
    }
}

/// A one- or two-qubit unitary. Two-qubit matrices act on the ordered pair
/// `(first, second)` with basis order `|00>, |01>, |10>, |11>`.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Single([[C64; 2]; 2]),
    Two([[C64; 4]; 4]),
}

impl Gate {
    pub fn arity(&self) -> usize {
        match self {
            Gate::Single(_) => 1,
            Gate::Two(_) => 2,
        }
    }

    /// Row-major copy of the matrix.
    pub fn matrix(&self) -> Vec<Vec<C64>> {
        match self {
            Gate::Single(m) => m.iter().map(|r| r.to_vec()).collect(),
            Gate::Two(m) => m.iter().map(|r| r.to_vec()).collect(),
        }
    }

    /// Max-norm of `U^dagger U - I`.
    pub fn unitarity_defect(&self) -> f64 {
        let m = self.matrix();
        let d = m.len();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let acc: C64 = m.iter().map(|row| row[i].conj() * row[j]).sum();
                let expect = if i == j { ONE } else { ZERO };
                worst = worst.max((acc - expect).norm());
            }
        }
        worst
    }
}

/// Rotation angle for a CQC step: `step * 2pi / 256`.
pub fn rotation_angle(step: u8) -> f64 {
    step as f64 * 2.0 * PI / 256.0
}

/// Builds the matrix for a gate instruction. `step` is only read by rotations.
///
/// Rotations are `R_a(theta) = exp(-i theta/2 sigma_a)`. `K` is `(Y + Z)/sqrt 2`,
/// the Hermitian unitary exchanging the Z and Y axes.
pub fn gate_from_command(code: GateCode, step: u8) -> Gate {
    let s = FRAC_1_SQRT_2;
    let c = |re: f64, im: f64| C64::new(re, im);
    match code {
        GateCode::I => Gate::Single([[ONE, ZERO], [ZERO, ONE]]),
        GateCode::X => Gate::Single([[ZERO, ONE], [ONE, ZERO]]),
        GateCode::Y => Gate::Single([[ZERO, c(0.0, -1.0)], [c(0.0, 1.0), ZERO]]),
        GateCode::Z => Gate::Single([[ONE, ZERO], [ZERO, c(-1.0, 0.0)]]),
        GateCode::H => Gate::Single([[c(s, 0.0), c(s, 0.0)], [c(s, 0.0), c(-s, 0.0)]]),
        GateCode::K => Gate::Single([[c(s, 0.0), c(0.0, -s)], [c(0.0, s), c(-s, 0.0)]]),
        GateCode::T => Gate::Single([[ONE, ZERO], [ZERO, C64::from_polar(1.0, PI / 4.0)]]),
        GateCode::RotX | GateCode::RotY | GateCode::RotZ => {
            let half = rotation_angle(step) / 2.0;
            let (cos, sin) = (half.cos(), half.sin());
            match code {
                GateCode::RotX => Gate::Single([[c(cos, 0.0), c(0.0, -sin)], [c(0.0, -sin), c(cos, 0.0)]]),
                GateCode::RotY => Gate::Single([[c(cos, 0.0), c(-sin, 0.0)], [c(sin, 0.0), c(cos, 0.0)]]),
                _ => Gate::Single([[c(cos, -sin), ZERO], [ZERO, c(cos, sin)]]),
            }
        }
        GateCode::Cnot => {
            let mut m = [[ZERO; 4]; 4];
            m[0][0] = ONE;
            m[1][1] = ONE;
            m[2][3] = ONE;
            m[3][2] = ONE;
            Gate::Two(m)
        }
        GateCode::Cphase => {
            let mut m = [[ZERO; 4]; 4];
            m[0][0] = ONE;
            m[1][1] = ONE;
            m[2][2] = ONE;
            m[3][3] = c(-1.0, 0.0);
            Gate::Two(m)
        }
    }
}

/// Result of a single-qubit standard-basis measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementOutcome {
    pub bit: u8,
    /// Probability of `bit` before the collapse.
    pub probability: f64,
}

/// Operations a register backend must provide. [`StateRegister`] is the pure
/// state implementation; a mixed-state backend can slot in behind the same
/// surface.
pub trait QuantumRegister {
    fn num_qubits(&self) -> usize;
    fn add_qubit(&mut self) -> Result<usize, EngineError>;
    fn apply_single(&mut self, pos: usize, gate: &Gate) -> Result<(), EngineError>;
    fn apply_two(&mut self, first: usize, second: usize, gate: &Gate) -> Result<(), EngineError>;
    fn measure<R: Rng + ?Sized>(
        &mut self,
        pos: usize,
        demolition: bool,
        rng: &mut R,
    ) -> Result<MeasurementOutcome, EngineError>;
    fn remove_qubit<R: Rng + ?Sized>(&mut self, pos: usize, rng: &mut R) -> Result<(), EngineError>;
    fn merge(&mut self, src: Self) -> Result<usize, EngineError>
    where
        Self: Sized;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateRegister {
    id: u64,
    num_qubits: usize,
    max_qubits: usize,
    amplitudes: Vec<C64>,
}

impl Default for StateRegister {
    fn default() -> Self {
        Self::new()
    }
}

impl StateRegister {
    /// Empty register (zero qubits, single amplitude 1) with the default cap.
    pub fn new() -> Self {
        Self::with_limit(0, DEFAULT_MAX_REGISTER_QUBITS)
    }

    pub fn with_limit(id: u64, max_qubits: usize) -> Self {
        StateRegister { id, num_qubits: 0, max_qubits, amplitudes: vec![ONE] }
    }

    /// Rebuilds a register from raw amplitudes. The length must be a power of two.
    pub fn from_amplitudes(id: u64, max_qubits: usize, amplitudes: Vec<C64>) -> Result<Self, EngineError> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(EngineError::InvalidOperation("amplitude count is not a power of two"));
        }
        let num_qubits = len.trailing_zeros() as usize;
        if num_qubits > max_qubits {
            return Err(EngineError::Capacity { requested: num_qubits, max: max_qubits });
        }
        Ok(StateRegister { id, num_qubits, max_qubits, amplitudes })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn set_id(&mut self, id: u64) {
        self.id = id;
    }

    pub fn max_qubits(&self) -> usize {
        self.max_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    fn check_pos(&self, pos: usize) -> Result<(), EngineError> {
        if pos >= self.num_qubits {
            return Err(EngineError::InvalidQubit { pos, num_qubits: self.num_qubits });
        }
        Ok(())
    }

    fn stride(&self, pos: usize) -> usize {
        1 << (self.num_qubits - 1 - pos)
    }

    /// Probability that the qubit at `pos` reads 1.
    pub fn probability_one(&self, pos: usize) -> Result<f64, EngineError> {
        self.check_pos(pos)?;
        let stride = self.stride(pos);
        Ok(self.amplitudes.iter().enumerate().filter(|(i, _)| i & stride != 0).map(|(_, a)| a.norm_sqr()).sum())
    }

    fn renormalize(&mut self) {
        let norm = self.norm();
        if norm > 0.0 {
            let inv = 1.0 / norm;
            self.amplitudes.iter_mut().for_each(|a| *a *= inv);
        }
    }

    /// Projects the qubit at `pos` onto `bit` and renormalizes, without sampling.
    /// Fails if the projection has zero probability.
    pub fn project(&mut self, pos: usize, bit: u8) -> Result<f64, EngineError> {
        let p1 = self.probability_one(pos)?;
        let p = if bit == 1 { p1 } else { 1.0 - p1 };
        if p <= 0.0 {
            return Err(EngineError::InvalidOperation("projection onto a zero-probability outcome"));
        }
        let stride = self.stride(pos);
        let keep_set = bit == 1;
        for (i, a) in self.amplitudes.iter_mut().enumerate() {
            if (i & stride != 0) != keep_set {
                *a = ZERO;
            }
        }
        self.renormalize();
        Ok(p)
    }

    /// Drops the qubit at `pos`, keeping the slice where it reads `bit`.
    fn drop_qubit(&mut self, pos: usize, bit: u8) {
        let stride = self.stride(pos);
        let want = if bit == 1 { stride } else { 0 };
        let kept: Vec<C64> =
            self.amplitudes.iter().enumerate().filter(|(i, _)| i & stride == want).map(|(_, a)| *a).collect();
        self.amplitudes = kept;
        self.num_qubits -= 1;
        self.renormalize();
    }

    /// Text dump: `register id=<id> qubits=<n> amps=<re>,<im>;...` with 12
    /// significant digits per number.
    pub fn debug_dump(&self) -> String {
        let mut out = format!("register id={} qubits={} amps=", self.id, self.num_qubits);
        for (i, a) in self.amplitudes.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            let _ = write!(out, "{:.11e},{:.11e}", a.re, a.im);
        }
        out
    }

    /// Parses a line produced by [`StateRegister::debug_dump`].
    pub fn parse_dump(line: &str, max_qubits: usize) -> Result<Self, EngineError> {
        const BAD: EngineError = EngineError::InvalidOperation("malformed register dump");
        let rest = line.strip_prefix("register ").ok_or(BAD)?;
        let mut id = None;
        let mut amps = None;
        for field in rest.split(' ') {
            if let Some(v) = field.strip_prefix("id=") {
                id = v.parse::<u64>().ok();
            } else if let Some(v) = field.strip_prefix("amps=") {
                let parsed: Option<Vec<C64>> = v
                    .split(';')
                    .map(|pair| {
                        let (re, im) = pair.split_once(',')?;
                        Some(C64::new(re.parse().ok()?, im.parse().ok()?))
                    })
                    .collect();
                amps = parsed;
            }
        }
        Self::from_amplitudes(id.ok_or(BAD)?, max_qubits, amps.ok_or(BAD)?)
    }
}

impl QuantumRegister for StateRegister {
    fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    /// Appends a `|0>` qubit at the last position.
    fn add_qubit(&mut self) -> Result<usize, EngineError> {
        if self.num_qubits + 1 > self.max_qubits {
            return Err(EngineError::Capacity { requested: self.num_qubits + 1, max: self.max_qubits });
        }
        let mut next = vec![ZERO; self.amplitudes.len() * 2];
        for (i, a) in self.amplitudes.iter().enumerate() {
            next[2 * i] = *a;
        }
        self.amplitudes = next;
        self.num_qubits += 1;
        Ok(self.num_qubits - 1)
    }

    fn apply_single(&mut self, pos: usize, gate: &Gate) -> Result<(), EngineError> {
        let Gate::Single(m) = gate else {
            return Err(EngineError::InvalidOperation("two-qubit gate applied to one qubit"));
        };
        self.check_pos(pos)?;
        let stride = self.stride(pos);
        for base in 0..self.amplitudes.len() {
            if base & stride != 0 {
                continue;
            }
            let a0 = self.amplitudes[base];
            let a1 = self.amplitudes[base | stride];
            self.amplitudes[base] = m[0][0] * a0 + m[0][1] * a1;
            self.amplitudes[base | stride] = m[1][0] * a0 + m[1][1] * a1;
        }
        Ok(())
    }

    fn apply_two(&mut self, first: usize, second: usize, gate: &Gate) -> Result<(), EngineError> {
        let Gate::Two(m) = gate else {
            return Err(EngineError::InvalidOperation("one-qubit gate applied to two qubits"));
        };
        self.check_pos(first)?;
        self.check_pos(second)?;
        if first == second {
            return Err(EngineError::InvalidOperation("control and target are the same qubit"));
        }
        let sf = self.stride(first);
        let ss = self.stride(second);
        for base in 0..self.amplitudes.len() {
            if base & (sf | ss) != 0 {
                continue;
            }
            let idx = [base, base | ss, base | sf, base | sf | ss];
            let v = idx.map(|i| self.amplitudes[i]);
            for (row, &target) in idx.iter().enumerate() {
                self.amplitudes[target] = (0..4).map(|k| m[row][k] * v[k]).sum();
            }
        }
        Ok(())
    }

    fn measure<R: Rng + ?Sized>(
        &mut self,
        pos: usize,
        demolition: bool,
        rng: &mut R,
    ) -> Result<MeasurementOutcome, EngineError> {
        let p1 = self.probability_one(pos)?.clamp(0.0, 1.0);
        let draw: f64 = rng.gen();
        let bit = if draw < 1.0 - p1 { 0u8 } else { 1u8 };
        let probability = if bit == 1 { p1 } else { 1.0 - p1 };
        self.project(pos, bit)?;
        if demolition {
            self.drop_qubit(pos, bit);
        }
        Ok(MeasurementOutcome { bit, probability })
    }

    /// Removes a qubit. An entangled qubit is measured first, so the remaining
    /// qubits are left in the matching post-measurement state.
    fn remove_qubit<R: Rng + ?Sized>(&mut self, pos: usize, rng: &mut R) -> Result<(), EngineError> {
        self.measure(pos, true, rng).map(|_| ())
    }

    /// Tensors `src` onto the end of this register and returns the position
    /// where `src`'s qubit 0 now lives.
    fn merge(&mut self, src: StateRegister) -> Result<usize, EngineError> {
        let total = self.num_qubits + src.num_qubits;
        if total > self.max_qubits {
            return Err(EngineError::Capacity { requested: total, max: self.max_qubits });
        }
        let offset = self.num_qubits;
        let mut out = Vec::with_capacity(self.amplitudes.len() * src.amplitudes.len());
        for a in &self.amplitudes {
            out.extend(src.amplitudes.iter().map(|b| a * b));
        }
        self.amplitudes = out;
        self.num_qubits = total;
        Ok(offset)
    }
}
