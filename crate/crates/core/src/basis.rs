//! Reduced-register and fermionic Fock bases on the thin cylinder.
//!
//! Register strings are packed little-endian into a `u64`: bit `ℓ-1` holds
//! register `ℓ` (1 = squeezed). Orbital occupations are packed into a `u128`
//! with bit `j` = orbital `j`, counted from the left edge.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Occupation bitstring over orbitals, bit `j` = orbital `j`.
pub type Occupation = u128;

/// Largest electron number whose full `3N`-orbital image fits in an [`Occupation`].
pub const MAX_ELECTRONS: usize = 42;

/// `N` electrons at filling 1/3 on a cylinder of circumference `L2` (magnetic length 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CylinderGeometry {
    pub n_electrons: usize,
    pub l2: f64,
}

impl CylinderGeometry {
    pub fn new(n_electrons: usize, l2: f64) -> Result<Self> {
        if n_electrons < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 electrons, got {n_electrons}")));
        }
        if n_electrons > MAX_ELECTRONS {
            return Err(Error::InvalidInput(format!(
                "at most {MAX_ELECTRONS} electrons supported, got {n_electrons}"
            )));
        }
        if !(l2 > 0.0 && l2.is_finite()) {
            return Err(Error::InvalidInput(format!("circumference must be positive, got {l2}")));
        }
        Ok(Self { n_electrons, l2 })
    }

    pub fn n_phi(&self) -> usize {
        3 * self.n_electrons
    }

    pub fn kappa(&self) -> f64 {
        2.0 * PI / self.l2
    }

    /// Number of physical registers, `N - 1`.
    pub fn n_registers(&self) -> usize {
        self.n_electrons - 1
    }

    /// Orbitals kept in the Fock basis, `N_phi - 2`.
    pub fn n_orbitals(&self) -> usize {
        self.n_phi() - 2
    }

    /// Twice the orbital centre, so that `K = Σ j n_j - N * center2 / 2` is an integer.
    fn center2(&self) -> i64 {
        self.n_orbitals() as i64 - 1
    }
}

/// True if no two adjacent registers are squeezed.
#[inline]
pub fn is_constrained(s: u64) -> bool {
    s & (s >> 1) == 0
}

/// Orbital image of a register string: 𝟙 ↦ 011, 𝟘 after 𝟙 ↦ 000, other 𝟘 ↦ 100.
/// The ghost register `N` is always 𝟘.
pub fn register_to_orbitals(r: u64, n_electrons: usize) -> Occupation {
    let mut occ: Occupation = 0;
    let mut prev = false;
    for l in 0..n_electrons {
        let squeezed = l + 1 < n_electrons && (r >> l) & 1 == 1;
        let base = 3 * l;
        if squeezed {
            occ |= 0b110 << base;
        } else if !prev {
            occ |= 1 << base;
        }
        prev = squeezed;
    }
    occ
}

/// Inverse of [`register_to_orbitals`] on its image over `3N` orbitals.
pub fn orbitals_to_register(occ: Occupation, n_electrons: usize) -> Result<u64> {
    let bad = || Error::NotInSqueezedSubspace(occupation_to_string(occ, 3 * n_electrons));
    if 3 * n_electrons < 128 && occ >> (3 * n_electrons) != 0 {
        return Err(bad());
    }
    let mut r = 0u64;
    let mut prev = false;
    for l in 0..n_electrons {
        let block = (occ >> (3 * l)) & 0b111;
        let squeezed = match (block, prev) {
            (0b110, _) if l + 1 < n_electrons => true,
            (0b001, false) | (0b000, true) => false,
            _ => return Err(bad()),
        };
        if squeezed {
            if prev {
                return Err(bad());
            }
            r |= 1 << l;
        }
        prev = squeezed;
    }
    Ok(r)
}

/// Root (Tao–Thouless) occupation `100100…100`.
pub fn root_occupation(n_electrons: usize) -> Occupation {
    register_to_orbitals(0, n_electrons)
}

/// Centre-of-mass momentum `K = Σ_j (j - c) n_j` with `c` the centre of the kept orbitals.
pub fn momentum_of(occ: Occupation, geometry: &CylinderGeometry) -> i64 {
    let mut sum = 0i64;
    let mut o = occ;
    while o != 0 {
        let j = o.trailing_zeros() as i64;
        sum += j;
        o &= o - 1;
    }
    let n = occ.count_ones() as i64;
    // Σ (j - c) with 2c = n_orb - 1
    (2 * sum - n * geometry.center2()) / 2
}

/// Text form of an occupation, orbital 0 first.
pub fn occupation_to_string(occ: Occupation, len: usize) -> String {
    (0..len).map(|j| if (occ >> j) & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn occupation_from_str(s: &str) -> Result<Occupation> {
    if s.len() > 128 {
        return Err(Error::Parse(format!("occupation string too long: {}", s.len())));
    }
    s.chars().enumerate().try_fold(0, |acc, (j, c)| match c {
        '0' => Ok(acc),
        '1' => Ok(acc | 1 << j),
        _ => Err(Error::Parse(format!("invalid occupation character {c:?}"))),
    })
}

/// Text form of a register string, register 1 first.
pub fn register_to_string(r: u64, n_registers: usize) -> String {
    (0..n_registers).map(|l| if (r >> l) & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn register_from_str(s: &str) -> Result<u64> {
    if s.len() > 64 {
        return Err(Error::Parse(format!("register string too long: {}", s.len())));
    }
    s.chars().enumerate().try_fold(0, |acc, (l, c)| match c {
        '0' => Ok(acc),
        '1' => Ok(acc | 1 << l),
        _ => Err(Error::Parse(format!("invalid register character {c:?}"))),
    })
}

/// Keep only samples without adjacent squeezed registers, preserving order.
pub fn post_select(samples: &[u64]) -> Vec<u64> {
    samples.iter().copied().filter(|&s| is_constrained(s)).collect()
}

/// Constrained register space: all strings of `N-1` registers with no adjacent 𝟙𝟙.
#[derive(Clone, Debug)]
pub struct SqueezedBasis {
    pub geometry: CylinderGeometry,
    states: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl SqueezedBasis {
    /// States in ascending integer order.
    pub fn new(geometry: CylinderGeometry) -> Self {
        let n = geometry.n_registers();
        let mut states = Vec::new();
        // depth-first from the highest register, 0 before 1, yields ascending order
        fn rec(pos: usize, cur: u64, prev_one: bool, out: &mut Vec<u64>) {
            if pos == 0 {
                out.push(cur);
                return;
            }
            let bit = pos - 1;
            rec(bit, cur, false, out);
            if !prev_one {
                rec(bit, cur | 1 << bit, true, out);
            }
        }
        rec(n, 0, false, &mut states);
        let index = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Self { geometry, states, index }
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_registers(&self) -> usize {
        self.geometry.n_registers()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> u64 {
        self.states[i]
    }

    pub fn index_of(&self, s: u64) -> Option<usize> {
        self.index.get(&s).copied()
    }

    pub fn orbital_image(&self, i: usize) -> Occupation {
        register_to_orbitals(self.states[i], self.geometry.n_electrons)
    }

    /// Newline-delimited register strings.
    pub fn export(&self) -> String {
        let n = self.n_registers();
        self.states.iter().map(|&s| register_to_string(s, n) + "\n").collect()
    }
}

/// Fermionic Fock basis with `N` electrons in `N_phi - 2` orbitals, optionally one `K` sector.
#[derive(Clone, Debug)]
pub struct FockBasis {
    pub geometry: CylinderGeometry,
    pub sector: Option<i64>,
    states: Vec<Occupation>,
    index: HashMap<Occupation, usize>,
}

impl FockBasis {
    pub fn new(geometry: CylinderGeometry, sector: Option<i64>) -> Result<Self> {
        let n_orb = geometry.n_orbitals();
        let n = geometry.n_electrons;
        let mut states = Vec::new();
        // Gosper's hack over fixed-popcount words, ascending
        let mut s: Occupation = (1 << n) - 1;
        let limit: Occupation = 1 << n_orb;
        while s < limit {
            if sector.is_none_or(|k| momentum_of(s, &geometry) == k) {
                states.push(s);
            }
            let c = s & s.wrapping_neg();
            let r = s + c;
            s = (((r ^ s) >> 2) / c) | r;
        }
        if states.is_empty() {
            return Err(Error::EmptySector(sector.unwrap_or(0)));
        }
        let index = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Ok(Self { geometry, sector, states, index })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_orbitals(&self) -> usize {
        self.geometry.n_orbitals()
    }

    pub fn states(&self) -> &[Occupation] {
        &self.states
    }

    pub fn state(&self, i: usize) -> Occupation {
        self.states[i]
    }

    pub fn index_of(&self, occ: Occupation) -> Option<usize> {
        self.index.get(&occ).copied()
    }

    /// Positions of the squeezed-basis images, in squeezed-basis order.
    pub fn squeezed_positions(&self, squeezed: &SqueezedBasis) -> Result<Vec<usize>> {
        (0..squeezed.dim())
            .map(|i| {
                let occ = squeezed.orbital_image(i);
                self.index_of(occ).ok_or_else(|| Error::BasisMismatch {
                    expected: "Fock basis containing the squeezed subspace".into(),
                    found: format!("missing {}", occupation_to_string(occ, self.n_orbitals())),
                })
            })
            .collect()
    }

    pub fn export(&self) -> String {
        let n = self.n_orbitals();
        self.states.iter().map(|&s| occupation_to_string(s, n) + "\n").collect()
    }
}
