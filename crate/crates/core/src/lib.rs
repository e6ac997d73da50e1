//! Geometric-quench dynamics of the thin-cylinder Laughlin state.
//!
//! Exact evolution in the constrained register basis and the fermionic Fock
//! basis, extraction of the intrinsic metric, bimetric fits, the
//! two-parameter variational ansatz and gate-level Trotter circuits.

pub mod basis;
pub mod circuits;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod hamiltonian;
pub mod io;
pub mod optim;
pub mod variational;

pub use error::{Error, Result};
