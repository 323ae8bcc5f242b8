//! Hamiltonians: per-axis masses, a (possibly time-dependent) potential on
//! the grid, and the value of hbar for the run.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{BsimError, Result};
use crate::grid::{Boundary, Grid};

/// Potential energy field. Time-dependent potentials are evaluated once per
/// propagation step at the step midpoint.
#[derive(Clone)]
pub enum Potential {
    Zero,
    Static(Arc<Vec<f64>>),
    TimeDependent(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for Potential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Potential::Zero => write!(f, "Potential::Zero"),
            Potential::Static(v) => write!(f, "Potential::Static(len={})", v.len()),
            Potential::TimeDependent(_) => write!(f, "Potential::TimeDependent(..)"),
        }
    }
}

impl Potential {
    pub fn values_at(&self, t: f64, ncells: usize) -> Cow<'_, [f64]> {
        match self {
            Potential::Zero => Cow::Owned(vec![0.0; ncells]),
            Potential::Static(v) => Cow::Borrowed(v.as_slice()),
            Potential::TimeDependent(f) => Cow::Owned(f(t)),
        }
    }

    pub fn is_static(&self) -> bool {
        !matches!(self, Potential::TimeDependent(_))
    }
}

#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub grid: Arc<Grid>,
    /// One mass per grid axis.
    pub masses: Vec<f64>,
    pub potential: Potential,
    pub hbar: f64,
}

impl Hamiltonian {
    pub fn new(grid: Arc<Grid>, masses: Vec<f64>, potential: Potential, hbar: f64) -> Result<Self> {
        if masses.len() != grid.ndim() {
            return Err(BsimError::InvalidGrid("one mass per axis required".into()));
        }
        if masses.iter().any(|&m| !(m > 0.0)) || !(hbar > 0.0) {
            return Err(BsimError::InvalidGrid("masses and hbar must be positive".into()));
        }
        if let Potential::Static(v) = &potential {
            if v.len() != grid.len() {
                return Err(BsimError::GridMismatch);
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(BsimError::InvalidGrid("potential must be finite".into()));
            }
        }
        Ok(Hamiltonian { grid, masses, potential, hbar })
    }

    /// Free Hamiltonian in natural units (hbar = 1).
    pub fn free(grid: Arc<Grid>, masses: Vec<f64>) -> Result<Self> {
        Hamiltonian::new(grid, masses, Potential::Zero, 1.0)
    }

    /// Hamiltonian for a subsystem: masses of the kept axes, zero potential.
    /// Used where only the kinetic data (masses, hbar) matter, e.g. velocity
    /// fields of conditional wave functions.
    pub fn restrict(&self, keep_axes: &[usize]) -> Result<Hamiltonian> {
        let sub = Arc::new(self.grid.subgrid(keep_axes)?);
        let masses = keep_axes.iter().map(|&a| self.masses[a]).collect();
        Hamiltonian::new(sub, masses, Potential::Zero, self.hbar)
    }
}

/// Evaluate `V(q) = sum_{i<j} phi(|q_i - q_j|)` on every grid cell.
///
/// `axis_groups` assigns grid axes to particles; every particle must have
/// the same dimension. Distances along periodic axes use the minimum image.
pub fn build_pair_potential<F: Fn(f64) -> f64>(
    grid: &Grid,
    pair_fn: F,
    axis_groups: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if axis_groups.is_empty() {
        return Err(BsimError::EmptyAxisSet);
    }
    let dim = axis_groups[0].len();
    let mut seen = vec![false; grid.ndim()];
    for g in axis_groups {
        if g.len() != dim || dim == 0 {
            return Err(BsimError::InconsistentParticleDims);
        }
        for &a in g {
            if a >= grid.ndim() || seen[a] {
                return Err(BsimError::InconsistentParticleDims);
            }
            seen[a] = true;
        }
    }
    if seen.iter().any(|&s| !s) {
        return Err(BsimError::InconsistentParticleDims);
    }
    let mut out = vec![0.0f64; grid.len()];
    for (flat, v) in out.iter_mut().enumerate() {
        let q = grid.coords(flat).coords;
        let mut acc = 0.0;
        for i in 0..axis_groups.len() {
            for j in (i + 1)..axis_groups.len() {
                let mut r2 = 0.0;
                for k in 0..dim {
                    let ai = axis_groups[i][k];
                    let aj = axis_groups[j][k];
                    let mut d = q[ai] - q[aj];
                    let ax = grid.axis(ai);
                    if ax.boundary == Boundary::Periodic
                        && grid.axis(aj).boundary == Boundary::Periodic
                        && (ax.len() - grid.axis(aj).len()).abs() < 1e-12
                    {
                        let l = ax.len();
                        d -= (d / l).round() * l;
                    }
                    r2 += d * d;
                }
                acc += pair_fn(r2.sqrt());
            }
        }
        *v = acc;
    }
    Ok(out)
}
