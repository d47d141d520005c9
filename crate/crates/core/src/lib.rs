//! NV⁻ ground-state hyperfine structure near the level anticrossing:
//! Hamiltonians, transition intensities, ODMR spectra, 13C Monte Carlo
//! averaging and spectrum fitting.

pub mod carbon13;
pub mod cli;
pub mod constants;
pub mod error;
pub mod fitting;
pub mod hamiltonian;
pub mod spectrum;
pub mod spin_core;
pub mod transitions;

pub use constants::PhysicalConstants;
pub use error::{Error, Result};
