//! Hamiltonian cell automata built from staged reversible Turing machines:
//! machine construction, the nearest-neighbour Hamiltonian, exact orbit
//! dynamics, initial-state encodings and the finite-lattice decision
//! procedures.

pub mod error;
pub mod rtm;

pub use error::{Error, Result};
pub use rtm::{
    invert, run_orbit, validate_reversible, Boundary, Cell, Configuration, Dir, Machine,
    MachineSpec, Mode, Orbit, Site, Step, Terminal, Variant,
};
pub mod dynamics;
pub mod hca;
pub mod encoding;
pub mod verifier;
