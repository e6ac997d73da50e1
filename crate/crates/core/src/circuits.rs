//! Gate-level circuits over the reduced registers: Trotterized evolution,
//! state preparation, the variational circuit, statevector simulation,
//! noisy sampling and post-selected observables.
//!
//! Qubit `q` holds register `q + 1`; `|0>` is 𝟘 and basis index bit `q`
//! is the qubit value, matching the packed register encoding.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{is_constrained, register_from_str, register_to_orbitals, register_to_string, root_occupation, CylinderGeometry, Occupation};
use crate::dynamics::{observables_from_distribution, Observables};
use crate::error::{Error, Result};
use crate::geometry::MetricTensor;
use crate::hamiltonian::{Couplings, Space, StateVector};
use crate::variational::VariationalParams;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Largest register count the simulator accepts.
pub const MAX_QUBITS: usize = 30;
/// CNOTs in the singly controlled `RX` decomposition.
pub const CRX_CNOTS: usize = 2;
/// CNOTs in the doubly controlled `RX` decomposition.
pub const CCRX_CNOTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateKind {
    X,
    Rz(f64),
    Rx(f64),
    Cnot,
    Crx(f64),
    Ccrx(f64),
}

impl GateKind {
    fn name(&self) -> &'static str {
        match self {
            GateKind::X => "X",
            GateKind::Rz(_) => "RZ",
            GateKind::Rx(_) => "RX",
            GateKind::Cnot => "CNOT",
            GateKind::Crx(_) => "CRX",
            GateKind::Ccrx(_) => "CCRX",
        }
    }

    fn angle(&self) -> Option<f64> {
        match *self {
            GateKind::Rz(a) | GateKind::Rx(a) | GateKind::Crx(a) | GateKind::Ccrx(a) => Some(a),
            _ => None,
        }
    }

    fn n_controls(&self) -> usize {
        match self {
            GateKind::Cnot | GateKind::Crx(_) => 1,
            GateKind::Ccrx(_) => 2,
            _ => 0,
        }
    }
}

/// Control qubit and the value that activates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Control {
    pub qubit: usize,
    pub on_one: bool,
}

impl Control {
    pub fn one(qubit: usize) -> Self {
        Self { qubit, on_one: true }
    }

    pub fn zero(qubit: usize) -> Self {
        Self { qubit, on_one: false }
    }
}

/// `RZ(θ) = e^{-iθZ/2}`, `RX(θ) = e^{-iθX/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub kind: GateKind,
    pub target: usize,
    pub controls: Vec<Control>,
}

impl Gate {
    pub fn x(q: usize) -> Self {
        Self { kind: GateKind::X, target: q, controls: vec![] }
    }

    pub fn rz(q: usize, theta: f64) -> Self {
        Self { kind: GateKind::Rz(theta), target: q, controls: vec![] }
    }

    pub fn rx(q: usize, theta: f64) -> Self {
        Self { kind: GateKind::Rx(theta), target: q, controls: vec![] }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Self { kind: GateKind::Cnot, target, controls: vec![Control::one(control)] }
    }

    pub fn crx(control: Control, target: usize, theta: f64) -> Self {
        Self { kind: GateKind::Crx(theta), target, controls: vec![control] }
    }

    pub fn ccrx(c1: Control, c2: Control, target: usize, theta: f64) -> Self {
        Self { kind: GateKind::Ccrx(theta), target, controls: vec![c1, c2] }
    }

    pub fn qubits(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.target).chain(self.controls.iter().map(|c| c.qubit))
    }

    pub fn cnot_count(&self) -> usize {
        match self.kind {
            GateKind::Cnot => 1,
            GateKind::Crx(_) => CRX_CNOTS,
            GateKind::Ccrx(_) => CCRX_CNOTS,
            _ => 0,
        }
    }

    fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.controls.len() != self.kind.n_controls() {
            return Err(Error::InvalidInput(format!("{} needs {} controls", self.kind.name(), self.kind.n_controls())));
        }
        if self.kind == GateKind::Cnot && !self.controls[0].on_one {
            return Err(Error::InvalidInput("CNOT controls on |1>".into()));
        }
        let qs: Vec<usize> = self.qubits().collect();
        if qs.iter().any(|&q| q >= n_qubits) {
            return Err(Error::InvalidInput(format!("gate {self} addresses a qubit beyond {n_qubits}")));
        }
        let mut sorted = qs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != qs.len() {
            return Err(Error::InvalidInput(format!("gate {self} repeats a qubit")));
        }
        if let Some(a) = self.kind.angle() {
            if !a.is_finite() {
                return Err(Error::NonFinite(a));
            }
        }
        Ok(())
    }
}

/// `GATE target [controls] [angle]`; a control written `!q` fires on `|0>`.
impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind.name(), self.target)?;
        if !self.controls.is_empty() {
            let cs: Vec<String> =
                self.controls.iter().map(|c| if c.on_one { c.qubit.to_string() } else { format!("!{}", c.qubit) }).collect();
            write!(f, " {}", cs.join(","))?;
        }
        if let Some(a) = self.kind.angle() {
            write!(f, " {a:?}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Gate {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Parse(format!("malformed gate line {line:?}"));
        let name = *parts.first().ok_or_else(bad)?;
        let target: usize = parts.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let (n_controls, has_angle) = match name {
            "X" => (0, false),
            "RZ" | "RX" => (0, true),
            "CNOT" => (1, false),
            "CRX" => (1, true),
            "CCRX" => (2, true),
            _ => return Err(Error::Parse(format!("unknown gate {name:?}"))),
        };
        let mut idx = 2;
        let mut controls = Vec::new();
        if n_controls > 0 {
            for c in parts.get(idx).ok_or_else(bad)?.split(',') {
                let (on_one, q) = match c.strip_prefix('!') {
                    Some(q) => (false, q),
                    None => (true, c),
                };
                controls.push(Control { qubit: q.parse().map_err(|_| bad())?, on_one });
            }
            idx += 1;
        }
        let angle: f64 = if has_angle { parts.get(idx).ok_or_else(bad)?.parse().map_err(|_| bad())? } else { 0.0 };
        if parts.len() != idx + has_angle as usize {
            return Err(bad());
        }
        let kind = match name {
            "X" => GateKind::X,
            "RZ" => GateKind::Rz(angle),
            "RX" => GateKind::Rx(angle),
            "CNOT" => GateKind::Cnot,
            "CRX" => GateKind::Crx(angle),
            _ => GateKind::Ccrx(angle),
        };
        Ok(Gate { kind, target, controls })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub n_qubits: usize,
    pub gates: Vec<Gate>,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Self {
        Self { n_qubits, gates: Vec::new() }
    }

    pub fn push(&mut self, g: Gate) {
        self.gates.push(g);
    }

    pub fn extend(&mut self, other: &Circuit) -> Result<()> {
        if other.n_qubits != self.n_qubits {
            return Err(Error::InvalidInput(format!("cannot join {} and {} qubit circuits", self.n_qubits, other.n_qubits)));
        }
        self.gates.extend(other.gates.iter().cloned());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gates.iter().try_for_each(|g| g.validate(self.n_qubits))
    }

    /// Header line `QUBITS n` followed by one gate per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("QUBITS {}\n", self.n_qubits);
        for g in &self.gates {
            s += &format!("{g}\n");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty circuit".into()))?;
        let n_qubits = header
            .strip_prefix("QUBITS")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad circuit header {header:?}")))?;
        let gates = lines.map(str::parse).collect::<Result<Vec<Gate>>>()?;
        let c = Circuit { n_qubits, gates };
        c.validate()?;
        Ok(c)
    }
}

/// Total CNOTs, counting those inside controlled rotations.
pub fn cnot_count(c: &Circuit) -> usize {
    c.gates.iter().map(Gate::cnot_count).sum()
}

/// Hadamard up to a global phase: `RZ(π/2) RX(π/2) RZ(π/2)`.
fn hadamard(q: usize, out: &mut Vec<Gate>) {
    out.extend([Gate::rz(q, FRAC_PI_2), Gate::rx(q, FRAC_PI_2), Gate::rz(q, FRAC_PI_2)]);
}

fn sign(c: &Control) -> f64 {
    if c.on_one {
        -1.0
    } else {
        1.0
    }
}

/// Rewrite controlled rotations with `X`, `RZ`, `RX` and `CNOT` only.
///
/// A controlled `RX` is a controlled `RZ` in the Hadamard frame of the target;
/// the controlled `RZ` flips the sign of target `Z` rotations with CNOTs.
/// The result agrees with the input up to a global phase.
pub fn decompose(c: &Circuit) -> Circuit {
    let mut out = Vec::with_capacity(c.gates.len() * 4);
    for g in &c.gates {
        let t = g.target;
        match g.kind {
            GateKind::Crx(theta) => {
                let a = &g.controls[0];
                hadamard(t, &mut out);
                out.push(Gate::rz(t, theta / 2.0));
                out.push(Gate::cnot(a.qubit, t));
                out.push(Gate::rz(t, sign(a) * theta / 2.0));
                out.push(Gate::cnot(a.qubit, t));
                hadamard(t, &mut out);
            }
            GateKind::Ccrx(theta) => {
                let (a, b) = (&g.controls[0], &g.controls[1]);
                let q = theta / 4.0;
                hadamard(t, &mut out);
                out.push(Gate::rz(t, q));
                out.push(Gate::cnot(a.qubit, t));
                out.push(Gate::rz(t, sign(a) * q));
                out.push(Gate::cnot(b.qubit, t));
                out.push(Gate::rz(t, sign(a) * sign(b) * q));
                out.push(Gate::cnot(a.qubit, t));
                out.push(Gate::rz(t, sign(b) * q));
                out.push(Gate::cnot(b.qubit, t));
                hadamard(t, &mut out);
            }
            _ => out.push(g.clone()),
        }
    }
    Circuit { n_qubits: c.n_qubits, gates: out }
}

fn check_qubits(n: usize) -> Result<()> {
    if n > MAX_QUBITS {
        return Err(Error::QubitOverflow(n));
    }
    Ok(())
}

fn controls_fire(x: usize, controls: &[Control]) -> bool {
    controls.iter().all(|c| ((x >> c.qubit) & 1 == 1) == c.on_one)
}

fn apply_rx(psi: &mut [Complex64], t: usize, theta: f64, controls: &[Control]) {
    let (c, s) = ((theta / 2.0).cos(), Complex64::new(0.0, -(theta / 2.0).sin()));
    let bit = 1usize << t;
    for x in 0..psi.len() {
        if x & bit == 0 && controls_fire(x, controls) {
            let (u, v) = (psi[x], psi[x | bit]);
            psi[x] = c * u + s * v;
            psi[x | bit] = s * u + c * v;
        }
    }
}

/// Apply one gate in place.
pub fn apply_gate(psi: &mut [Complex64], g: &Gate) {
    let bit = 1usize << g.target;
    match g.kind {
        GateKind::X | GateKind::Cnot => {
            for x in 0..psi.len() {
                if x & bit == 0 && controls_fire(x, &g.controls) {
                    psi.swap(x, x | bit);
                }
            }
        }
        GateKind::Rz(theta) => {
            let (m, p) = (Complex64::from_polar(1.0, -theta / 2.0), Complex64::from_polar(1.0, theta / 2.0));
            for (x, a) in psi.iter_mut().enumerate() {
                *a *= if x & bit == 0 { m } else { p };
            }
        }
        GateKind::Rx(theta) | GateKind::Crx(theta) | GateKind::Ccrx(theta) => apply_rx(psi, g.target, theta, &g.controls),
    }
}

/// Apply a single-qubit Pauli (1 = X, 2 = Y, 3 = Z) in place.
fn apply_pauli(psi: &mut [Complex64], q: usize, p: u8) {
    let bit = 1usize << q;
    match p {
        1 => (0..psi.len()).filter(|x| x & bit == 0).for_each(|x| psi.swap(x, x | bit)),
        2 => {
            for x in (0..psi.len()).filter(|x| x & bit == 0) {
                let (u, v) = (psi[x], psi[x | bit]);
                psi[x] = Complex64::new(0.0, -1.0) * v;
                psi[x | bit] = Complex64::new(0.0, 1.0) * u;
            }
        }
        3 => psi.iter_mut().enumerate().filter(|(x, _)| x & bit != 0).for_each(|(_, a)| *a = -*a),
        _ => {}
    }
}

/// Run `c` on `initial`, or on `|0…0>` when no state is given.
pub fn simulate_from(c: &Circuit, initial: Option<&StateVector>) -> Result<StateVector> {
    check_qubits(c.n_qubits)?;
    c.validate()?;
    let space = Space::Register { n_qubits: c.n_qubits };
    let mut psi = match initial {
        Some(s) => {
            s.space.ensure_eq(&space)?;
            s.amps.clone()
        }
        None => {
            let mut v = vec![ZERO; 1 << c.n_qubits];
            v[0] = Complex64::new(1.0, 0.0);
            v
        }
    };
    for g in &c.gates {
        apply_gate(&mut psi, g);
    }
    Ok(StateVector { space, amps: psi })
}

/// Exact noiseless amplitudes over all `2^n` register strings, starting from `|0…0>`.
pub fn simulate_statevector(c: &Circuit) -> Result<StateVector> {
    simulate_from(c, None)
}

/// Couplings of the post-quench Hamiltonian in units of its `V_{1,0}`.
fn unit_couplings(geometry: &CylinderGeometry, g: &MetricTensor) -> Result<Couplings> {
    g.validate()?;
    let c = Couplings::new(geometry, g);
    Ok(Couplings { v10: 1.0, v20: c.v20 / c.v10, v30: c.v30 / c.v10, v21: c.v21 / c.v10 })
}

/// One step `Π_ℓ U_ℓ(δt)` of the sequential product formula, ascending `ℓ`.
///
/// `U_ℓ` carries the register-`ℓ` diagonal terms (including the edge
/// corrections and the `N_ℓ N_{ℓ+2}` coupling) followed by the squeezing
/// rotation conditioned on both neighbours in 𝟘. The constant energy shift is
/// dropped, so the circuit matches `e^{-iHt}` up to a global phase.
pub fn trotter_step(geometry: &CylinderGeometry, g_post: &MetricTensor, dt: f64) -> Result<Circuit> {
    let n = geometry.n_registers();
    check_qubits(n)?;
    let c = unit_couplings(geometry, g_post)?;
    let mut circ = Circuit::new(n);
    let (amp, arg) = (c.v21.norm(), c.v21.arg());
    for q in 0..n {
        let edges = (q == 0) as usize + (q == n - 1) as usize;
        let a = c.v10 - 3.0 * c.v30 + c.v30 * edges as f64;
        // e^{-iδt a N} = RZ(-a δt) up to phase, N = (1 - Z)/2
        let mut rz = -a * dt;
        if q + 2 < n {
            // e^{-iδt V N_q N_{q+2}}: Z terms folded into single-qubit angles
            let v = c.v30 * dt;
            rz -= v / 2.0;
            circ.push(Gate::rz(q + 2, -v / 2.0));
            circ.push(Gate::cnot(q, q + 2));
            circ.push(Gate::rz(q + 2, v / 2.0));
            circ.push(Gate::cnot(q, q + 2));
        }
        circ.push(Gate::rz(q, rz));
        // V σ+ + V* σ- = |V| (cos χ X + sin χ Y) = RZ(χ) |V| X RZ(-χ)
        let theta = 2.0 * amp * dt;
        circ.push(Gate::rz(q, -arg));
        let rot = match (q > 0, q + 1 < n) {
            (true, true) => Gate::ccrx(Control::zero(q - 1), Control::zero(q + 1), q, theta),
            (false, true) => Gate::crx(Control::zero(q + 1), q, theta),
            (true, false) => Gate::crx(Control::zero(q - 1), q, theta),
            (false, false) => Gate::rx(q, theta),
        };
        circ.push(rot);
        circ.push(Gate::rz(q, arg));
    }
    Ok(circ)
}

/// `[Π_ℓ U_ℓ(t/k)]^k` for the post-quench Hamiltonian in units of `V_{1,0}`.
pub fn build_trotter_circuit(geometry: &CylinderGeometry, g_post: &MetricTensor, t: f64, k: usize) -> Result<Circuit> {
    if k == 0 {
        return Err(Error::InvalidInput("Trotter step count must be at least 1".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(t));
    }
    let step = trotter_step(geometry, g_post, t / k as f64)?;
    let mut c = Circuit::new(step.n_qubits);
    for _ in 0..k {
        c.extend(&step)?;
    }
    Ok(c)
}

/// Site-resolved ladder: `RX(2β_ℓ)` controlled on the left neighbour in 𝟘
/// (bare on register 1), then `RZ(-α_ℓ)`, ascending `ℓ`.
pub fn ladder_circuit(alpha: &[f64], beta: &[f64]) -> Result<Circuit> {
    if alpha.len() != beta.len() {
        return Err(Error::InvalidInput("angle arrays differ in length".into()));
    }
    let n = alpha.len();
    check_qubits(n)?;
    let mut c = Circuit::new(n);
    for q in 0..n {
        if q == 0 {
            c.push(Gate::rx(q, 2.0 * beta[q]));
        } else {
            c.push(Gate::crx(Control::zero(q - 1), q, 2.0 * beta[q]));
        }
        c.push(Gate::rz(q, -alpha[q]));
    }
    Ok(c)
}

/// Circuit form of the two-parameter ansatz on `N - 1` registers.
pub fn build_variational_circuit(params: VariationalParams, n_electrons: usize) -> Result<Circuit> {
    if n_electrons < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 electrons, got {n_electrons}")));
    }
    let n = n_electrons - 1;
    ladder_circuit(&vec![params.alpha; n], &vec![params.beta; n])
}

/// Exact preparation of the closed-form ground state at metric `g`.
///
/// Register `ℓ` is squeezed with the conditional weight fixed by the
/// hard-core partition functions of the registers to its right.
pub fn build_state_prep(geometry: &CylinderGeometry, g: &MetricTensor) -> Result<Circuit> {
    let n = geometry.n_registers();
    let lambda = Couplings::new(geometry, g).lambda();
    let x = lambda.norm_sqr();
    // z[m]: weighted count of strings on m free registers; z[0] = 1, z[-1] = 1
    let mut z = vec![1.0, 1.0];
    for m in 1..=n {
        let next = z[m] + x * z[m - 1];
        z.push(next);
    }
    let zf = |m: isize| z[(m + 1) as usize];
    let mut beta = vec![0.0; n];
    for (q, b) in beta.iter_mut().enumerate() {
        let m = (n - q) as isize;
        *b = (zf(m - 1) / zf(m)).sqrt().clamp(-1.0, 1.0).acos();
    }
    // -i e^{iφ} = -λ/|λ| fixes the squeeze phase; e^{-iα N} contributes e^{-iα}
    let phi = (Complex64::new(0.0, -1.0) * lambda).arg();
    ladder_circuit(&vec![-phi; n], &beta)
}

/// Depolarizing noise after every elementary gate plus readout confusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p1: f64,
    pub p2: f64,
    /// Per-qubit `P(measured | true)`, rows indexed by the true value.
    pub readout: Vec<[[f64; 2]; 2]>,
}

impl NoiseModel {
    pub fn depolarizing(p1: f64, p2: f64) -> Self {
        Self { p1, p2, readout: Vec::new() }
    }

    /// Symmetric readout flips with probability `e` on each of `n` qubits.
    pub fn with_readout(mut self, e: f64, n: usize) -> Self {
        self.readout = vec![[[1.0 - e, e], [e, 1.0 - e]]; n];
        self
    }

    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        for p in [self.p1, self.p2] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
            }
        }
        if !self.readout.is_empty() && self.readout.len() != n_qubits {
            return Err(Error::InvalidInput(format!("readout for {} qubits, circuit has {n_qubits}", self.readout.len())));
        }
        for m in &self.readout {
            for row in m {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput("confusion rows must be probabilities summing to 1".into()));
                }
            }
        }
        Ok(())
    }

    fn is_trivial(&self) -> bool {
        self.p1 == 0.0 && self.p2 == 0.0 && self.readout.iter().all(|m| m[0][1] == 0.0 && m[1][0] == 0.0)
    }
}

/// Shots handled by one random stream.
const SHOT_BATCH: u64 = 8192;

fn sample_index(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(psi: &[Complex64]) -> Vec<f64> {
    psi.iter()
        .scan(0.0, |acc, a| {
            *acc += a.norm_sqr();
            Some(*acc)
        })
        .collect()
}

/// Draw one noisy trajectory; `None` when no error fired and the ideal state applies.
fn noisy_shot(
    elementary: &Circuit,
    initial: &[Complex64],
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Complex64>> {
    let mut events: Vec<(usize, Vec<(usize, u8)>)> = Vec::new();
    for (i, g) in elementary.gates.iter().enumerate() {
        let two = g.kind == GateKind::Cnot;
        let p = if two { noise.p2 } else { noise.p1 };
        if p > 0.0 && rng.random::<f64>() < p {
            let paulis = if two {
                let k = rng.random_range(1..16u8);
                vec![(g.controls[0].qubit, k / 4), (g.target, k % 4)]
            } else {
                vec![(g.target, rng.random_range(1..4u8))]
            };
            events.push((i, paulis));
        }
    }
    if events.is_empty() {
        return None;
    }
    let mut psi = initial.to_vec();
    let mut next = events.iter().peekable();
    for (i, g) in elementary.gates.iter().enumerate() {
        apply_gate(&mut psi, g);
        while let Some((j, ps)) = next.peek() {
            if *j != i {
                break;
            }
            for &(q, p) in ps {
                apply_pauli(&mut psi, q, p);
            }
            next.next();
        }
    }
    Some(psi)
}

fn apply_readout(x: usize, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> usize {
    let mut out = x;
    for (q, m) in noise.readout.iter().enumerate() {
        let v = (x >> q) & 1;
        if rng.random::<f64>() < m[v][1 - v] {
            out ^= 1 << q;
        }
    }
    out
}

/// Measurement counts keyed by register strings (register 1 first).
///
/// Noisy runs simulate the elementary decomposition with one Pauli
/// trajectory per shot. Shots are split into fixed batches with their own
/// streams, so results depend only on the seed.
pub fn sample(
    c: &Circuit,
    initial: Option<&StateVector>,
    shots: u64,
    noise: Option<&NoiseModel>,
    seed: u64,
) -> Result<BTreeMap<String, u64>> {
    if shots == 0 {
        return Err(Error::InvalidInput("shots must be at least 1".into()));
    }
    let ideal = simulate_from(c, initial)?;
    let cdf = cumulative(&ideal.amps);
    let noise = noise.filter(|m| !m.is_trivial());
    if let Some(m) = noise {
        m.validate(c.n_qubits)?;
    }
    let elementary = decompose(c);
    let start: Vec<Complex64> = match initial {
        Some(s) => s.amps.clone(),
        None => {
            let mut v = vec![ZERO; 1 << c.n_qubits];
            v[0] = Complex64::new(1.0, 0.0);
            v
        }
    };
    let n_batches = shots.div_ceil(SHOT_BATCH);
    let hist: Vec<Vec<u64>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let count = SHOT_BATCH.min(shots - b * SHOT_BATCH);
            let mut h = vec![0u64; cdf.len()];
            for _ in 0..count {
                let x = match noise {
                    None => sample_index(&cdf, &mut rng),
                    Some(m) => {
                        let x = match noisy_shot(&elementary, &start, m, &mut rng) {
                            None => sample_index(&cdf, &mut rng),
                            Some(psi) => sample_index(&cumulative(&psi), &mut rng),
                        };
                        apply_readout(x, m, &mut rng)
                    }
                };
                h[x] += 1;
            }
            h
        })
        .collect();
    let mut counts = BTreeMap::new();
    for (x, n) in (0..cdf.len()).map(|x| (x, hist.iter().map(|h| h[x]).sum::<u64>())) {
        if n > 0 {
            counts.insert(register_to_string(x as u64, c.n_qubits), n);
        }
    }
    Ok(counts)
}

/// Keep only constrained strings; also returns the retained fraction.
pub fn post_select_counts(counts: &BTreeMap<String, u64>) -> Result<(BTreeMap<String, u64>, f64)> {
    let total: u64 = counts.values().sum();
    let mut kept = BTreeMap::new();
    for (k, &v) in counts {
        if is_constrained(register_from_str(k)?) {
            kept.insert(k.clone(), v);
        }
    }
    let frac = if total == 0 { 0.0 } else { kept.values().sum::<u64>() as f64 / total as f64 };
    Ok((kept, frac))
}

/// Restricts a distribution to constrained strings and renormalizes; returns the retained weight.
pub fn post_select_distribution(probs: &BTreeMap<String, f64>) -> (BTreeMap<String, f64>, f64) {
    let kept: BTreeMap<String, f64> =
        probs.iter().filter(|(k, _)| register_from_str(k).map(is_constrained).unwrap_or(false)).map(|(k, &p)| (k.clone(), p)).collect();
    let w: f64 = kept.values().sum();
    if w > 0.0 {
        (kept.into_iter().map(|(k, p)| (k, p / w)).collect(), w)
    } else {
        (kept, 0.0)
    }
}

/// Normalized empirical distribution of a count map.
pub fn distribution(counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let total: u64 = counts.values().sum();
    counts.iter().map(|(k, &v)| (k.clone(), v as f64 / total.max(1) as f64)).collect()
}

/// `½ Σ |p - q|` over the union of outcomes.
pub fn total_variation(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    0.5 * keys.into_iter().map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

/// Exact outcome distribution of a register statevector.
pub fn exact_distribution(psi: &StateVector) -> Result<BTreeMap<String, f64>> {
    let Space::Register { n_qubits } = psi.space else {
        return Err(Error::InvalidInput("register-space state required".into()));
    };
    Ok(psi
        .amps
        .iter()
        .enumerate()
        .filter(|(_, a)| a.norm_sqr() > 0.0)
        .map(|(x, a)| (register_to_string(x as u64, n_qubits), a.norm_sqr()))
        .collect())
}

/// Root fidelity, orbital densities and correlations from post-selected counts.
pub fn estimate_observables_from_counts(counts: &BTreeMap<String, u64>, geometry: &CylinderGeometry) -> Result<Observables> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let probs: BTreeMap<String, f64> = counts.iter().map(|(k, &v)| (k.clone(), v as f64 / total as f64)).collect();
    observables_from_register_distribution(&probs, geometry)
}

/// Observables of a normalized distribution over register strings.
pub fn observables_from_register_distribution(probs: &BTreeMap<String, f64>, geometry: &CylinderGeometry) -> Result<Observables> {
    if probs.is_empty() {
        return Err(Error::EmptyCounts);
    }
    let n = geometry.n_electrons;
    let mut occ: Vec<(Occupation, f64)> = Vec::with_capacity(probs.len());
    for (k, &p) in probs {
        let r = register_from_str(k)?;
        if k.len() != geometry.n_registers() {
            return Err(Error::InvalidInput(format!("bitstring {k} has {} registers, expected {}", k.len(), geometry.n_registers())));
        }
        if !is_constrained(r) {
            return Err(Error::NotInSqueezedSubspace(k.clone()));
        }
        occ.push((register_to_orbitals(r, n), p));
    }
    Ok(observables_from_distribution(&occ, root_occupation(n), geometry.n_orbitals()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SqueezedBasis;
    use crate::dynamics::{evolve, observables, post_quench_hamiltonian};
    use crate::geometry::{metric_from_params, MetricParams};
    use crate::hamiltonian::{embed_in_register_space, ground_state_closed_form};
    use crate::variational::build_ansatz;
    use approx::assert_abs_diff_eq;

    fn geom(n: usize) -> CylinderGeometry {
        CylinderGeometry::new(n, 5.477).unwrap()
    }

    fn random_circuit(n: usize, len: usize, seed: u64) -> Circuit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Circuit::new(n);
        for _ in 0..len {
            let mut qs: Vec<usize> = (0..n).collect();
            for i in 0..3 {
                let j = rng.random_range(i..n);
                qs.swap(i, j);
            }
            let th: f64 = rng.random_range(-3.0..3.0);
            let ctl = |q: usize, b: bool| Control { qubit: q, on_one: b };
            let g = match rng.random_range(0..6) {
                0 => Gate::x(qs[0]),
                1 => Gate::rz(qs[0], th),
                2 => Gate::rx(qs[0], th),
                3 => Gate::cnot(qs[1], qs[0]),
                4 => Gate::crx(ctl(qs[1], rng.random()), qs[0], th),
                _ => Gate::ccrx(ctl(qs[1], rng.random()), ctl(qs[2], rng.random()), qs[0], th),
            };
            c.push(g);
        }
        c
    }

    #[test]
    fn elementary_identities() {
        let empty = Circuit::new(3);
        let psi = simulate_statevector(&empty).unwrap();
        assert_eq!(psi.amps[0], Complex64::new(1.0, 0.0));
        let mut c = random_circuit(3, 10, 1);
        let before = simulate_statevector(&c).unwrap();
        c.push(Gate::cnot(0, 2));
        c.push(Gate::cnot(0, 2));
        c.push(Gate::rx(1, 0.83));
        c.push(Gate::rx(1, -0.83));
        let after = simulate_statevector(&c).unwrap();
        for (a, b) in before.amps.iter().zip(&after.amps) {
            assert!((a - b).norm() < 1e-14);
        }
        assert!(matches!(simulate_statevector(&Circuit::new(31)), Err(Error::QubitOverflow(31))));
    }

    #[test]
    fn decomposition_is_exact_up_to_phase() {
        for seed in 0..10 {
            let c = random_circuit(4, 30, seed);
            let d = decompose(&c);
            assert!(d.gates.iter().all(|g| matches!(g.kind, GateKind::X | GateKind::Rz(_) | GateKind::Rx(_) | GateKind::Cnot)));
            assert_eq!(cnot_count(&c), cnot_count(&d));
            let a = simulate_statevector(&c).unwrap();
            let b = simulate_statevector(&d).unwrap();
            assert_abs_diff_eq!(a.fidelity(&b).unwrap(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let c = random_circuit(5, 40, 3);
        let back = Circuit::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(Circuit::from_text("QUBITS 2\nCCRX 0 1 0.5\n").is_err());
        assert!(Circuit::from_text("QUBITS 2\nRX 5 0.5\n").is_err());
        assert_eq!("CRX 3 !2 0.25".parse::<Gate>().unwrap(), Gate::crx(Control::zero(2), 3, 0.25));
    }

    #[test]
    fn cnot_counts() {
        assert_eq!(cnot_count(&Circuit::new(4)), 0);
        // RX on register 1, then one CRX per further register
        let v5 = build_variational_circuit(VariationalParams::new(0.3, 0.4), 5).unwrap();
        assert_eq!(cnot_count(&v5), 6);
        for n in 3..10 {
            let v = build_variational_circuit(VariationalParams::new(0.3, 0.4), n).unwrap();
            assert_eq!(cnot_count(&v), CRX_CNOTS * (n - 2));
        }
        let g = metric_from_params(MetricParams::new(0.18, 0.0));
        let one = cnot_count(&build_trotter_circuit(&geom(5), &g, 3.0, 1).unwrap());
        // N=5: two CRX, two CCRX and two N_l N_{l+2} couplings
        assert_eq!(one, 2 * CRX_CNOTS + 2 * CCRX_CNOTS + 2 * 2);
        assert_eq!(cnot_count(&build_trotter_circuit(&geom(5), &g, 3.0, 15).unwrap()), 15 * one);
    }

    #[test]
    fn variational_circuit_matches_ansatz() {
        for n in [2usize, 5, 9] {
            let b = SqueezedBasis::new(geom(n));
            for p in [VariationalParams::new(0.3, 0.4), VariationalParams::new(5.0, 2.5)] {
                let circ = simulate_statevector(&build_variational_circuit(p, n).unwrap()).unwrap();
                let ans = embed_in_register_space(&build_ansatz(p, &b), &b).unwrap();
                assert!(circ.fidelity(&ans).unwrap() >= 1.0 - 1e-12);
            }
        }
        let flat = simulate_statevector(&build_variational_circuit(VariationalParams::new(1.2, 0.0), 6).unwrap()).unwrap();
        assert_abs_diff_eq!(flat.amps[0].norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn state_prep_is_exact() {
        for (n, p) in [(2usize, MetricParams::new(0.0, 0.0)), (5, MetricParams::new(0.0, 0.0)), (8, MetricParams::new(0.4, 1.3))] {
            let g = metric_from_params(p);
            let b = SqueezedBasis::new(geom(n));
            let exact = embed_in_register_space(&ground_state_closed_form(&b, &g).unwrap(), &b).unwrap();
            let prep = simulate_statevector(&build_state_prep(&geom(n), &g).unwrap()).unwrap();
            assert!(prep.fidelity(&exact).unwrap() >= 1.0 - 1e-12);
        }
    }

    fn trotter_fidelity(n: usize, p: MetricParams, t: f64, k: usize) -> f64 {
        let g = metric_from_params(p);
        let b = SqueezedBasis::new(geom(n));
        let psi0 = ground_state_closed_form(&b, &MetricTensor::identity()).unwrap();
        let (h, _) = post_quench_hamiltonian(&b, &g).unwrap();
        let exact = embed_in_register_space(&evolve(&h, &psi0, t).unwrap(), &b).unwrap();
        let start = embed_in_register_space(&psi0, &b).unwrap();
        let circ = simulate_from(&build_trotter_circuit(&geom(n), &g, t, k).unwrap(), Some(&start)).unwrap();
        circ.fidelity(&exact).unwrap()
    }

    #[test]
    fn trotter_converges_to_exact() {
        assert!(trotter_fidelity(5, MetricParams::new(0.18, 0.0), 3.0, 400) >= 0.999);
        // complex squeezing amplitude
        assert!(trotter_fidelity(6, MetricParams::new(0.3, 1.1), 2.0, 400) >= 0.999);
        assert!(trotter_fidelity(2, MetricParams::new(0.3, 0.7), 2.0, 200) >= 0.9999);
        let c0 = build_trotter_circuit(&geom(5), &metric_from_params(MetricParams::new(0.18, 0.0)), 0.0, 3).unwrap();
        assert!(c0.gates.iter().all(|g| g.kind.angle().is_none_or(|a| a == 0.0)));
        assert!(build_trotter_circuit(&geom(5), &MetricTensor::identity(), 1.0, 0).is_err());
    }

    #[test]
    fn trotter_error_scaling() {
        let p = MetricParams::new(0.18, 0.0);
        let inf: Vec<f64> = [5, 10, 20, 40, 80].iter().map(|&k| 1.0 - trotter_fidelity(5, p, 3.0, k)).collect();
        for w in inf.windows(2) {
            assert!(w[1] < w[0], "{inf:?}");
            // infidelity is quadratic in the first-order step error
            let r = w[1] / w[0];
            assert!((0.15..0.35).contains(&r), "{inf:?}");
        }
    }

    #[test]
    fn sampling_basics() {
        let mut c = Circuit::new(3);
        c.push(Gate::x(1));
        let counts = sample(&c, None, 1000, None, 0).unwrap();
        assert_eq!(counts.len(), 1);
        assert_eq!(counts["010"], 1000);
        assert!(sample(&c, None, 0, None, 0).is_err());
        let v = build_variational_circuit(VariationalParams::new(0.7, 0.9), 6).unwrap();
        let noise = NoiseModel::depolarizing(0.001, 0.02).with_readout(0.01, 5);
        let a = sample(&v, None, 20000, Some(&noise), 5).unwrap();
        let b = sample(&v, None, 20000, Some(&noise), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values().sum::<u64>(), 20000);
        let clean = sample(&v, None, 20000, None, 5).unwrap();
        let (kept, frac) = post_select_counts(&clean).unwrap();
        assert_eq!(frac, 1.0);
        assert_eq!(kept, clean);
        let (_, noisy_frac) = post_select_counts(&a).unwrap();
        assert!(noisy_frac < 1.0);
    }

    #[test]
    fn frequencies_converge() {
        let v = build_variational_circuit(VariationalParams::new(0.7, 0.9), 5).unwrap();
        let exact = exact_distribution(&simulate_statevector(&v).unwrap()).unwrap();
        let tv = |shots| total_variation(&distribution(&sample(&v, None, shots, None, 11).unwrap()), &exact);
        let (small, large) = (tv(1_000), tv(100_000));
        assert!(large < small);
        assert!(large < 0.01);
    }

    #[test]
    fn depolarizing_preserves_trace_on_average() {
        // a certain error picks X, Y or Z evenly and two of the three flip |0>
        let mut c = Circuit::new(1);
        c.push(Gate::rz(0, 0.0));
        let counts = sample(&c, None, 30000, Some(&NoiseModel::depolarizing(1.0, 0.0)), 2).unwrap();
        let ones = *counts.get("1").unwrap_or(&0) as f64 / 30000.0;
        assert!((ones - 2.0 / 3.0).abs() < 0.02, "{ones}");
    }

    #[test]
    fn counts_observables() {
        let g = geom(5);
        let mut counts = BTreeMap::new();
        counts.insert("0000".to_string(), 500u64);
        let obs = estimate_observables_from_counts(&counts, &g).unwrap();
        assert_eq!(obs.root_fidelity, 1.0);
        assert_eq!(obs.density[..4], [1.0, 0.0, 0.0, 1.0]);
        assert!(estimate_observables_from_counts(&BTreeMap::new(), &g).is_err());
        counts.insert("1100".to_string(), 1);
        assert!(estimate_observables_from_counts(&counts, &g).is_err());

        // infinite-shot limit equals the exact observables
        let b = SqueezedBasis::new(g);
        let psi = ground_state_closed_form(&b, &MetricTensor::identity()).unwrap();
        let exact = observables(&psi, &b).unwrap();
        let weights: BTreeMap<String, u64> = b
            .states()
            .iter()
            .zip(&psi.amps)
            .map(|(&s, a)| (register_to_string(s, 4), (a.norm_sqr() * 1e15).round() as u64))
            .collect();
        let est = estimate_observables_from_counts(&weights, &g).unwrap();
        assert_abs_diff_eq!(est.root_fidelity, exact.root_fidelity, epsilon = 1e-12);
        for (a, b) in est.density.iter().zip(&exact.density) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(est.corr.iter().enumerate().all(|(i, r)| r[i] <= 1e-15));
    }
}
