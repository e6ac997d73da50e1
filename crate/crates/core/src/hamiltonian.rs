//! Pseudopotential matrix elements and Hamiltonians in the register and Fock bases.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::basis::{momentum_of, CylinderGeometry, FockBasis, Occupation, SqueezedBasis};
use crate::error::{Error, Result};
use crate::geometry::MetricTensor;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Hilbert space a vector or matrix lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    /// Constrained register basis of `N` electrons.
    Squeezed { n_electrons: usize },
    /// Fock basis, optionally restricted to one momentum sector.
    Fock { n_electrons: usize, sector: Option<i64> },
    /// Unconstrained `2^n` register product space.
    Register { n_qubits: usize },
}

impl Space {
    pub fn of_squeezed(b: &SqueezedBasis) -> Self {
        Space::Squeezed { n_electrons: b.geometry.n_electrons }
    }

    pub fn of_fock(b: &FockBasis) -> Self {
        Space::Fock { n_electrons: b.geometry.n_electrons, sector: b.sector }
    }

    pub fn ensure_eq(&self, other: &Space) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::BasisMismatch { expected: format!("{self:?}"), found: format!("{other:?}") })
        }
    }
}

/// Complex amplitudes tagged with their basis.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub space: Space,
    pub amps: Vec<Complex64>,
}

impl StateVector {
    /// Normalized copy of `amps`.
    pub fn normalized(space: Space, amps: Vec<Complex64>) -> Result<Self> {
        let mut s = Self { space, amps };
        let n = s.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidInput(format!("cannot normalize a vector of norm {n}")));
        }
        s.amps.iter_mut().for_each(|a| *a /= n);
        Ok(s)
    }

    /// Unit vector on basis position `i`.
    pub fn basis_state(space: Space, dim: usize, i: usize) -> Self {
        let mut amps = vec![ZERO; dim];
        amps[i] = Complex64::new(1.0, 0.0);
        Self { space, amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        self.space.ensure_eq(&other.space)?;
        if self.dim() != other.dim() {
            return Err(Error::BasisMismatch {
                expected: format!("dimension {}", self.dim()),
                found: format!("dimension {}", other.dim()),
            });
        }
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum())
    }

    /// `|<self|other>|^2`.
    pub fn fidelity(&self, other: &StateVector) -> Result<f64> {
        Ok(self.inner(other)?.norm_sqr())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// Hermitian matrix stored as its upper triangle (`row <= col`), real diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseHermitian {
    pub space: Space,
    dim: usize,
    entries: Vec<(usize, usize, Complex64)>,
}

impl SparseHermitian {
    /// Assemble from a full set of matrix elements `(row, col) -> value`.
    ///
    /// Both triangles must be supplied; they are checked against each other
    /// and only the upper one is kept.
    pub fn from_elements(space: Space, dim: usize, elements: &BTreeMap<(usize, usize), Complex64>) -> Result<Self> {
        let scale = elements.values().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        let mut entries = Vec::new();
        for (&(r, c), &v) in elements {
            if r >= dim || c >= dim {
                return Err(Error::InvalidInput(format!("entry ({r}, {c}) outside dimension {dim}")));
            }
            let mirror = elements.get(&(c, r)).copied().unwrap_or(ZERO);
            if (v - mirror.conj()).norm() > 1e-12 * scale {
                return Err(Error::InvalidInput(format!("matrix is not Hermitian at ({r}, {c})")));
            }
            if r < c && v != ZERO {
                entries.push((r, c, v));
            } else if r == c && v.re != 0.0 {
                entries.push((r, c, Complex64::new(v.re, 0.0)));
            }
        }
        Ok(Self { space, dim, entries })
    }

    pub fn from_dense(space: Space, m: &DMatrix<Complex64>) -> Result<Self> {
        let mut el = BTreeMap::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != ZERO {
                    el.insert((r, c), m[(r, c)]);
                }
            }
        }
        Self::from_elements(space, m.nrows(), &el)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored upper-triangle entries.
    pub fn entries(&self) -> &[(usize, usize, Complex64)] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        let (a, b, conj) = if r <= c { (r, c, false) } else { (c, r, true) };
        self.entries
            .iter()
            .find(|e| e.0 == a && e.1 == b)
            .map(|e| if conj { e.2.conj() } else { e.2 })
            .unwrap_or(ZERO)
    }

    pub fn is_real(&self) -> bool {
        self.entries.iter().all(|e| e.2.im == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.2.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        self.entries.iter().filter(|e| e.0 == e.1).map(|e| e.2.re).sum()
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            space: self.space,
            dim: self.dim,
            entries: self.entries.iter().map(|&(r, c, v)| (r, c, v * f)).collect(),
        }
    }

    /// `a·self + b·other`, with exact zeros dropped.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.space.ensure_eq(&other.space)?;
        let mut acc: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
        for &(r, c, v) in &self.entries {
            *acc.entry((r, c)).or_insert(ZERO) += v * a;
        }
        for &(r, c, v) in &other.entries {
            *acc.entry((r, c)).or_insert(ZERO) += v * b;
        }
        Ok(Self {
            space: self.space,
            dim: self.dim,
            entries: acc.into_iter().filter(|e| e.1 != ZERO).map(|((r, c), v)| (r, c, v)).collect(),
        })
    }

    /// `y = H x`.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![ZERO; self.dim];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
            if r != c {
                y[c] += v.conj() * x[r];
            }
        }
        y
    }

    pub fn expectation(&self, psi: &StateVector) -> Result<f64> {
        self.space.ensure_eq(&psi.space)?;
        let hx = self.apply(&psi.amps);
        Ok(psi.amps.iter().zip(&hx).map(|(a, b)| (a.conj() * b).re).sum())
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::from_element(self.dim, self.dim, ZERO);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
            m[(c, r)] = v.conj();
        }
        m
    }

    pub fn to_dense_real(&self) -> Option<DMatrix<f64>> {
        if !self.is_real() {
            return None;
        }
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v.re;
            m[(c, r)] = v.re;
        }
        Some(m)
    }

    /// True if every nonzero element connects states with equal `labels`.
    pub fn commutes_with_diagonal(&self, labels: &[i64]) -> bool {
        self.entries.iter().all(|&(r, c, _)| labels[r] == labels[c])
    }

    /// Coordinate list `row col re im`, upper triangle, one entry per line.
    pub fn to_coo(&self) -> String {
        let mut s = String::new();
        for &(r, c, v) in &self.entries {
            let _ = writeln!(s, "{r} {c} {} {}", crate::io::fmt_g(v.re), crate::io::fmt_g(v.im));
        }
        s
    }

    /// Parse [`to_coo`](Self::to_coo) output back into a matrix.
    pub fn from_coo(space: Space, dim: usize, text: &str) -> Result<Self> {
        let mut el = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("expected `row col re im`, got {line:?}")));
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
            let (r, c) = (idx(f[0])?, idx(f[1])?);
            let v = Complex64::new(num(f[2])?, num(f[3])?);
            el.insert((r, c), v);
            el.insert((c, r), v.conj());
        }
        Self::from_elements(space, dim, &el)
    }
}

/// Overall scale of the pseudopotentials. Energies in units of `V_{1,0}` do not depend on it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// Unit prefactor.
    #[default]
    Unit,
    /// Extra factor `κ³ / g11^{3/2}`.
    KappaCubed,
}

/// Two-body amplitude `V_{k,m}` for the anisotropic first Haldane pseudopotential.
pub fn vkm(k: i64, m: i64, geometry: &CylinderGeometry, g: &MetricTensor) -> Result<Complex64> {
    vkm_with(k, m, geometry, g, Prefactor::Unit)
}

pub fn vkm_with(k: i64, m: i64, geometry: &CylinderGeometry, g: &MetricTensor, prefactor: Prefactor) -> Result<Complex64> {
    if k <= m.abs() {
        return Err(Error::DomainViolation { k, m });
    }
    Ok(vkm_unchecked(k, m, geometry, g) * prefactor_value(prefactor, geometry, g))
}

fn prefactor_value(p: Prefactor, geometry: &CylinderGeometry, g: &MetricTensor) -> f64 {
    match p {
        Prefactor::Unit => 1.0,
        Prefactor::KappaCubed => geometry.kappa().powi(3) / g.g11.powf(1.5),
    }
}

fn vkm_unchecked(k: i64, m: i64, geometry: &CylinderGeometry, g: &MetricTensor) -> Complex64 {
    let (kf, mf) = (k as f64, m as f64);
    let a = 2.0 * PI * PI / (geometry.l2 * geometry.l2 * g.g11);
    let arg = Complex64::new(-a * (kf * kf + mf * mf), 2.0 * a * kf * mf * g.g12);
    (kf * kf - mf * mf) * arg.exp()
}

/// The four amplitudes entering the truncated model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Couplings {
    pub v10: f64,
    pub v20: f64,
    pub v30: f64,
    pub v21: Complex64,
}

impl Couplings {
    pub fn new(geometry: &CylinderGeometry, g: &MetricTensor) -> Self {
        Self {
            v10: vkm_unchecked(1, 0, geometry, g).re,
            v20: vkm_unchecked(2, 0, geometry, g).re,
            v30: vkm_unchecked(3, 0, geometry, g).re,
            v21: vkm_unchecked(2, 1, geometry, g),
        }
    }

    /// Squeezing amplitude `λ = sqrt(V30/V10) · e^{i arg V21}`.
    pub fn lambda(&self) -> Complex64 {
        Complex64::from_polar((self.v30 / self.v10).sqrt(), self.v21.arg())
    }
}

#[inline]
fn parity_below(occ: Occupation, j: usize) -> f64 {
    if (occ & ((1 << j) - 1)).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// `c_j |occ>` with the sign from ordering creation operators by orbital index.
#[inline]
pub fn annihilate(occ: Occupation, j: usize) -> Option<(Occupation, f64)> {
    ((occ >> j) & 1 == 1).then(|| (occ ^ (1 << j), parity_below(occ, j)))
}

#[inline]
pub fn create(occ: Occupation, j: usize) -> Option<(Occupation, f64)> {
    ((occ >> j) & 1 == 0).then(|| (occ | (1 << j), parity_below(occ, j)))
}

/// `c†_a c†_b c_c c_d |occ>`.
#[inline]
pub fn two_body(occ: Occupation, a: usize, b: usize, c: usize, d: usize) -> Option<(Occupation, f64)> {
    let (o, s1) = annihilate(occ, d)?;
    let (o, s2) = annihilate(o, c)?;
    let (o, s3) = create(o, b)?;
    let (o, s4) = create(o, a)?;
    Some((o, s1 * s2 * s3 * s4))
}

/// A term `coef · c†_a c†_b c_c c_d`.
#[derive(Clone, Copy, Debug)]
struct TwoBodyTerm {
    coef: Complex64,
    ops: [usize; 4],
}

fn assemble_fock(basis: &FockBasis, terms: &[TwoBodyTerm]) -> Result<SparseHermitian> {
    let mut el: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    for (i, &occ) in basis.states().iter().enumerate() {
        for t in terms {
            let [a, b, c, d] = t.ops;
            if let Some((out, sign)) = two_body(occ, a, b, c, d) {
                let j = basis.index_of(out).ok_or_else(|| Error::BasisMismatch {
                    expected: format!("sector {:?}", basis.sector),
                    found: format!("K = {}", momentum_of(out, &basis.geometry)),
                })?;
                *el.entry((j, i)).or_insert(ZERO) += t.coef * sign;
            }
        }
    }
    el.retain(|_, v| *v != ZERO);
    SparseHermitian::from_elements(Space::of_fock(basis), basis.dim(), &el)
}

/// Terms `V_{k,m} c†_{j+m} c†_{j+k} c_{j+m+k} c_j` for the listed `(k, m)`, all in-range `j`.
fn scattering_terms(basis: &FockBasis, g: &MetricTensor, km: &[(i64, i64)]) -> Vec<TwoBodyTerm> {
    let n_orb = basis.n_orbitals() as i64;
    let mut terms = Vec::new();
    for &(k, m) in km {
        let v = vkm_unchecked(k, m, &basis.geometry, g);
        for j in 0..n_orb {
            let idx = [j + m, j + k, j + m + k, j];
            if idx.iter().all(|&x| (0..n_orb).contains(&x)) {
                terms.push(TwoBodyTerm { coef: v, ops: idx.map(|x| x as usize) });
            }
        }
    }
    terms
}

/// `(k, m)` pairs with `|V_{k,m}| > cutoff · V_{1,0}` that fit in `n_orb` orbitals.
pub fn retained_channels(geometry: &CylinderGeometry, g: &MetricTensor, cutoff: f64) -> Vec<(i64, i64)> {
    let v10 = vkm_unchecked(1, 0, geometry, g).norm();
    let n_orb = geometry.n_orbitals() as i64;
    let mut out = Vec::new();
    for k in 1..n_orb {
        for m in -(k - 1)..k {
            // the orbitals j+m, j+m+k, j and j+k must all fit
            let lo = m.min(0);
            let hi = (m + k).max(k);
            if hi - lo >= n_orb {
                continue;
            }
            if vkm_unchecked(k, m, geometry, g).norm() > cutoff * v10 {
                out.push((k, m));
            }
        }
    }
    out
}

/// Default relative cutoff for long-range scattering channels.
pub const DEFAULT_CUTOFF: f64 = 1e-12;

/// Full interacting Hamiltonian in a Fock basis, summing over both signs of `m`.
pub fn build_full_hamiltonian(basis: &FockBasis, g: &MetricTensor, cutoff: f64) -> Result<SparseHermitian> {
    if !(cutoff >= 0.0) {
        return Err(Error::InvalidInput(format!("cutoff must be non-negative, got {cutoff}")));
    }
    g.validate()?;
    let channels = retained_channels(&basis.geometry, g, cutoff);
    assemble_fock(basis, &scattering_terms(basis, g, &channels))
}

/// Fock-space Hamiltonian with only the `V10, V20, V30, V21` channels.
pub fn build_truncated_fock(basis: &FockBasis, g: &MetricTensor) -> Result<SparseHermitian> {
    g.validate()?;
    let channels = [(1, 0), (2, 0), (3, 0), (2, 1), (2, -1)];
    assemble_fock(basis, &scattering_terms(basis, g, &channels))
}

/// The `V20` channel alone.
pub fn build_v20_term(basis: &FockBasis, g: &MetricTensor) -> Result<SparseHermitian> {
    assemble_fock(basis, &scattering_terms(basis, g, &[(2, 0)]))
}

/// Truncated model written as `Σ_j Q†_j Q_j + P†_j P_j` with
/// `Q_j = sqrt(V10) c_{j+2} c_{j+1} + sqrt(V30) e^{iθ} c_{j+3} c_j` and
/// `P_j = sqrt(V20) c_j c_{j+2}`.
pub fn qp_decomposition(basis: &FockBasis, g: &MetricTensor) -> Result<SparseHermitian> {
    g.validate()?;
    let cp = Couplings::new(&basis.geometry, g);
    let phase = Complex64::from_polar(1.0, cp.v21.arg());
    let n_orb = basis.n_orbitals() as i64;
    let mut terms = Vec::new();
    let in_range = |x: i64| (0..n_orb).contains(&x);
    for j in -2..n_orb {
        // each pair (coef, p, q) stands for coef · c_p c_q
        let q_pairs: Vec<(Complex64, i64, i64)> = [
            (Complex64::new(cp.v10.sqrt(), 0.0), j + 2, j + 1),
            (phase * cp.v30.sqrt(), j + 3, j),
        ]
        .into_iter()
        .filter(|&(_, p, q)| in_range(p) && in_range(q))
        .collect();
        let p_pairs: Vec<(Complex64, i64, i64)> = [(Complex64::new(cp.v20.sqrt(), 0.0), j, j + 2)]
            .into_iter()
            .filter(|&(_, p, q)| in_range(p) && in_range(q))
            .collect();
        for pairs in [&q_pairs, &p_pairs] {
            for &(ca, pa, qa) in pairs.iter() {
                for &(cb, pb, qb) in pairs.iter() {
                    // (c_pa c_qa)† c_pb c_qb = c†_qa c†_pa c_pb c_qb
                    terms.push(TwoBodyTerm {
                        coef: ca.conj() * cb,
                        ops: [qa as usize, pa as usize, pb as usize, qb as usize],
                    });
                }
            }
        }
    }
    assemble_fock(basis, &terms)
}

/// Spin-chain form of the truncated model on the constrained register basis.
///
/// Diagonal: `V30 (N-1) + (V10 - 3 V30) Σ n_ℓ + V30 Σ n_ℓ n_{ℓ+2} + V30 (n_1 + n_{N-1})`.
/// Off-diagonal: `<𝟙_ℓ|H|𝟘_ℓ> = V21` whenever both neighbours are 𝟘.
pub fn build_truncated_hamiltonian(basis: &SqueezedBasis, g: &MetricTensor) -> Result<SparseHermitian> {
    g.validate()?;
    let cp = Couplings::new(&basis.geometry, g);
    let n = basis.n_registers();
    let edge_mask = 1u64 | (1u64 << (n - 1));
    let mut el = BTreeMap::new();
    for (i, &s) in basis.states().iter().enumerate() {
        let diag = cp.v30 * n as f64
            + (cp.v10 - 3.0 * cp.v30) * s.count_ones() as f64
            + cp.v30 * (s & (s >> 2)).count_ones() as f64
            + cp.v30 * (s & edge_mask).count_ones() as f64
            // the single register is both edges when N = 2
            + if n == 1 { cp.v30 * s as f64 } else { 0.0 };
        if diag != 0.0 {
            el.insert((i, i), Complex64::new(diag, 0.0));
        }
        for b in 0..n {
            let neighbours = (1u64 << b) | ((1u64 << b) << 1) | ((1u64 << b) >> 1);
            if s & neighbours == 0 {
                let j = basis.index_of(s | 1 << b).expect("constrained flip stays in the basis");
                el.insert((j, i), cp.v21);
                el.insert((i, j), cp.v21.conj());
            }
        }
    }
    SparseHermitian::from_elements(Space::of_squeezed(basis), basis.dim(), &el)
}

/// Zero-energy state with amplitude `(-λ)^s` on a string with `s` squeezes.
pub fn ground_state_closed_form(basis: &SqueezedBasis, g: &MetricTensor) -> Result<StateVector> {
    let cp = Couplings::new(&basis.geometry, g);
    if !(cp.v10 > 0.0) {
        return Err(Error::InvalidInput("V10 must be positive".into()));
    }
    Ok(closed_form_from_lambda(basis, cp.lambda()))
}

/// Normalized `(-λ)^s` state for an arbitrary squeezing amplitude.
pub fn closed_form_from_lambda(basis: &SqueezedBasis, lambda: Complex64) -> StateVector {
    let powers: Vec<Complex64> = (0..=basis.n_registers()).scan(Complex64::new(1.0, 0.0), |p, _| {
        let cur = *p;
        *p *= -lambda;
        Some(cur)
    })
    .collect();
    let amps = basis.states().iter().map(|s| powers[s.count_ones() as usize]).collect();
    StateVector::normalized(Space::of_squeezed(basis), amps).expect("root amplitude is one")
}

/// Embed a squeezed-basis vector into a Fock basis that contains the squeezed images.
pub fn embed_squeezed(psi: &StateVector, squeezed: &SqueezedBasis, fock: &FockBasis) -> Result<StateVector> {
    psi.space.ensure_eq(&Space::of_squeezed(squeezed))?;
    let pos = fock.squeezed_positions(squeezed)?;
    let mut amps = vec![ZERO; fock.dim()];
    for (i, &p) in pos.iter().enumerate() {
        amps[p] = psi.amps[i];
    }
    Ok(StateVector { space: Space::of_fock(fock), amps })
}

/// Components of a Fock vector on the squeezed images (not renormalized).
pub fn project_to_squeezed(psi: &StateVector, squeezed: &SqueezedBasis, fock: &FockBasis) -> Result<StateVector> {
    psi.space.ensure_eq(&Space::of_fock(fock))?;
    let pos = fock.squeezed_positions(squeezed)?;
    Ok(StateVector { space: Space::of_squeezed(squeezed), amps: pos.iter().map(|&p| psi.amps[p]).collect() })
}

/// Embed a squeezed-basis vector into the `2^{N-1}` register product space.
pub fn embed_in_register_space(psi: &StateVector, squeezed: &SqueezedBasis) -> Result<StateVector> {
    psi.space.ensure_eq(&Space::of_squeezed(squeezed))?;
    let n = squeezed.n_registers();
    if n > 30 {
        return Err(Error::QubitOverflow(n));
    }
    let mut amps = vec![ZERO; 1 << n];
    for (i, &s) in squeezed.states().iter().enumerate() {
        amps[s as usize] = psi.amps[i];
    }
    Ok(StateVector { space: Space::Register { n_qubits: n }, amps })
}

/// Momentum labels of the basis states.
pub fn momentum_labels(basis: &FockBasis) -> Vec<i64> {
    basis.states().iter().map(|&o| momentum_of(o, &basis.geometry)).collect()
}
