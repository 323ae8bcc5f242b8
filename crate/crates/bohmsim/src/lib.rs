//! Pilot-wave quantum dynamics on rectangular grids, with the statistical
//! machinery needed to verify quantum-equilibrium claims numerically:
//! equivariant transport of |psi|^2, conditional and effective wave
//! functions of subsystems, pointer measurements, multitime random-system
//! experiments and environment-selection invariance tests.

pub mod analytic;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod hamiltonian;
pub mod measurement;
pub mod multitime;
pub mod propagator;
pub mod scenario;
pub mod serial;
pub mod states;
pub mod stats;
pub mod subsystem;
pub mod wavefunction;

pub use error::{BsimError, Result};
pub use grid::{AxisSpec, Boundary, Configuration, Grid};
pub use hamiltonian::{build_pair_potential, Hamiltonian, Potential};
pub use propagator::{Method, Propagator, PropagatorConfig};
pub use wavefunction::{Density, WaveFunction};
