//! Wave functions and densities on a grid, with normalization and
//! marginalization primitives.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{BsimError, Result};
use crate::grid::Grid;

pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct WaveFunction {
    pub grid: Arc<Grid>,
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
}

impl WaveFunction {
    pub fn new(grid: Arc<Grid>, amplitudes: Vec<Complex64>, time: f64) -> Result<Self> {
        if amplitudes.len() != grid.len() {
            return Err(BsimError::GridMismatch);
        }
        Ok(WaveFunction { grid, amplitudes, time })
    }

    /// Build from a function of the cell coordinates.
    pub fn from_fn<F: Fn(&[f64]) -> Complex64>(grid: Arc<Grid>, time: f64, f: F) -> Self {
        let amplitudes = (0..grid.len()).map(|i| f(&grid.coords(i).coords)).collect();
        WaveFunction { grid, amplitudes, time }
    }

    /// Squared L2 norm, `sum |psi|^2 * dV`.
    pub fn norm2(&self) -> f64 {
        let dv = self.grid.cell_volume();
        self.amplitudes.iter().map(|c| c.norm_sqr()).sum::<f64>() * dv
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm2() - 1.0).abs() < NORM_TOL
    }

    /// Scale by a positive real constant so that `norm2 == 1`.
    pub fn normalize(&self) -> Result<WaveFunction> {
        let n2 = self.norm2();
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(BsimError::ZeroNorm);
        }
        let s = 1.0 / n2.sqrt();
        let amplitudes = self.amplitudes.iter().map(|c| c * s).collect();
        Ok(WaveFunction { grid: self.grid.clone(), amplitudes, time: self.time })
    }

    /// `|psi|^2` pointwise.
    pub fn density(&self) -> Density {
        let values: Vec<f64> = self.amplitudes.iter().map(|c| c.norm_sqr()).collect();
        let total = values.iter().sum::<f64>() * self.grid.cell_volume();
        Density { grid: self.grid.clone(), values, normalized: (total - 1.0).abs() < NORM_TOL }
    }

    /// `sum conj(self) * other * dV` on a shared grid.
    pub fn inner_product(&self, other: &WaveFunction) -> Result<Complex64> {
        if *self.grid != *other.grid {
            return Err(BsimError::GridMismatch);
        }
        let dv = self.grid.cell_volume();
        let s: Complex64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(s * dv)
    }

    /// `|<self, other>|^2`; equals 1 for equal normalized states up to phase.
    pub fn fidelity(&self, other: &WaveFunction) -> Result<f64> {
        Ok(self.inner_product(other)?.norm_sqr())
    }

    pub fn conjugated(&self) -> WaveFunction {
        WaveFunction {
            grid: self.grid.clone(),
            amplitudes: self.amplitudes.iter().map(|c| c.conj()).collect(),
            time: self.time,
        }
    }

    pub fn scaled(&self, c: Complex64) -> WaveFunction {
        WaveFunction {
            grid: self.grid.clone(),
            amplitudes: self.amplitudes.iter().map(|a| a * c).collect(),
            time: self.time,
        }
    }

    pub fn max_abs2(&self) -> f64 {
        self.amplitudes.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
    }
}

/// Nonnegative real field on a grid; `normalized` means unit integral.
#[derive(Debug, Clone)]
pub struct Density {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Density {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(BsimError::GridMismatch);
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(BsimError::InvalidGrid("density values must be finite and >= 0".into()));
        }
        let total = values.iter().sum::<f64>() * grid.cell_volume();
        Ok(Density { grid, values, normalized: (total - 1.0).abs() < NORM_TOL })
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn normalize(&self) -> Result<Density> {
        let m = self.total_mass();
        if !(m > 0.0) || !m.is_finite() {
            return Err(BsimError::ZeroNorm);
        }
        Ok(Density {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v / m).collect(),
            normalized: true,
        })
    }

    /// Integrate out all axes not in `keep_axes`; the result lives on the
    /// subgrid of the kept axes, in the order given.
    pub fn marginal(&self, keep_axes: &[usize]) -> Result<Density> {
        if keep_axes.is_empty() {
            return Err(BsimError::EmptyAxisSet);
        }
        let d = self.grid.ndim();
        for &a in keep_axes {
            if a >= d {
                return Err(BsimError::InvalidGrid(format!("axis {a} out of range")));
            }
        }
        let sub = Arc::new(self.grid.subgrid(keep_axes)?);
        let dropped: Vec<usize> = (0..d).filter(|a| !keep_axes.contains(a)).collect();
        let dv_dropped: f64 = dropped.iter().map(|&a| self.grid.axis(a).dx()).product();
        let mut out = vec![0.0f64; sub.len()];
        let strides = self.grid.strides();
        let sub_strides = sub.strides();
        let mut idx = vec![0usize; d];
        for (flat, &v) in self.values.iter().enumerate() {
            self.grid.unravel(flat, &mut idx);
            let mut sub_flat = 0usize;
            for (k, &a) in keep_axes.iter().enumerate() {
                sub_flat += idx[a] * sub_strides[k];
            }
            out[sub_flat] += v;
        }
        let _ = strides;
        for v in &mut out {
            *v *= dv_dropped;
        }
        Ok(Density { grid: sub, values: out, normalized: self.normalized })
    }
}
