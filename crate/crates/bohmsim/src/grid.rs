//! Rectangular tensor-product grids over configuration space.
//!
//! A grid is a list of axes, each either periodic (cells at `min + i*dx`,
//! `dx = (max-min)/points`, wrapping at the ends) or a box with homogeneous
//! Dirichlet walls (cells at `min + (i+1)*dx`, `dx = (max-min)/(points+1)`,
//! the wave function vanishing at `min` and `max`). Arrays over a grid are
//! stored row-major with the last axis fastest.

use serde::{Deserialize, Serialize};

use crate::error::{BsimError, Result};

pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub points: usize,
    pub min: f64,
    pub max: f64,
    pub boundary: Boundary,
}

impl AxisSpec {
    pub fn periodic(points: usize, min: f64, max: f64) -> Self {
        AxisSpec { points, min, max, boundary: Boundary::Periodic }
    }

    pub fn boxed(points: usize, min: f64, max: f64) -> Self {
        AxisSpec { points, min, max, boundary: Boundary::Box }
    }

    pub fn len(&self) -> f64 {
        self.max - self.min
    }

    pub fn dx(&self) -> f64 {
        match self.boundary {
            Boundary::Periodic => self.len() / self.points as f64,
            Boundary::Box => self.len() / (self.points + 1) as f64,
        }
    }

    /// Physical coordinate of cell `i`.
    pub fn coord(&self, i: usize) -> f64 {
        match self.boundary {
            Boundary::Periodic => self.min + i as f64 * self.dx(),
            Boundary::Box => self.min + (i as f64 + 1.0) * self.dx(),
        }
    }

    /// Continuous (fractional) cell index of coordinate `x`. Periodic axes
    /// wrap into `[0, points)`; box axes clamp to `[0, points-1]`.
    pub fn frac_index(&self, x: f64) -> f64 {
        let dx = self.dx();
        match self.boundary {
            Boundary::Periodic => {
                let n = self.points as f64;
                let mut u = (x - self.min) / dx;
                u = u.rem_euclid(n);
                if u >= n {
                    0.0
                } else {
                    u
                }
            }
            Boundary::Box => {
                let u = (x - self.min) / dx - 1.0;
                u.clamp(0.0, (self.points - 1) as f64)
            }
        }
    }

    /// Wrap (periodic) or clamp (box) a coordinate into the axis domain.
    /// Box coordinates are kept strictly inside the walls.
    pub fn confine(&self, x: f64) -> f64 {
        match self.boundary {
            Boundary::Periodic => {
                let l = self.len();
                let mut v = (x - self.min).rem_euclid(l) + self.min;
                if v >= self.max {
                    v = self.min;
                }
                v
            }
            Boundary::Box => {
                let eps = 1e-12 * self.len();
                x.clamp(self.min + eps, self.max - eps)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(BsimError::InvalidGrid(format!(
                "axis needs at least 2 points, got {}",
                self.points
            )));
        }
        if !(self.max > self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(BsimError::InvalidGrid(format!(
                "axis range [{}, {}] is invalid",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<AxisSpec>,
}

impl Grid {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Grid> {
        if axes.is_empty() {
            return Err(BsimError::InvalidGrid("grid needs at least one axis".into()));
        }
        if axes.len() > MAX_DIM {
            return Err(BsimError::InvalidGrid(format!(
                "grid dimension {} exceeds cap {}",
                axes.len(),
                MAX_DIM
            )));
        }
        for ax in &axes {
            ax.validate()?;
        }
        Ok(Grid { axes })
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    pub fn axis(&self, a: usize) -> &AxisSpec {
        &self.axes[a]
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.dx()).product()
    }

    pub fn is_all_periodic(&self) -> bool {
        self.axes.iter().all(|a| a.boundary == Boundary::Periodic)
    }

    pub fn is_all_box(&self) -> bool {
        self.axes.iter().all(|a| a.boundary == Boundary::Box)
    }

    /// Euclidean diameter of the domain.
    pub fn diameter(&self) -> f64 {
        self.axes.iter().map(|a| a.len() * a.len()).sum::<f64>().sqrt()
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let d = self.ndim();
        let mut s = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.axes[a + 1].points;
        }
        s
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.ndim());
        let mut flat = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.axes[a].points);
            flat = flat * self.axes[a].points + i;
        }
        flat
    }

    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for a in (0..self.ndim()).rev() {
            let n = self.axes[a].points;
            out[a] = flat % n;
            flat /= n;
        }
    }

    /// Physical coordinates of cell `flat`.
    pub fn coords(&self, flat: usize) -> Configuration {
        let mut idx = [0usize; MAX_DIM];
        self.unravel(flat, &mut idx[..self.ndim()]);
        let coords = (0..self.ndim()).map(|a| self.axes[a].coord(idx[a])).collect();
        Configuration { coords }
    }

    /// Grid restricted to the given axes, in the order given.
    pub fn subgrid(&self, keep: &[usize]) -> Result<Grid> {
        if keep.is_empty() {
            return Err(BsimError::EmptyAxisSet);
        }
        let axes = keep.iter().map(|&a| self.axes[a].clone()).collect();
        Grid::new(axes)
    }
}

/// A single point of configuration space, one coordinate per grid axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub coords: Vec<f64>,
}

impl Configuration {
    pub fn new(coords: Vec<f64>) -> Self {
        Configuration { coords }
    }

    pub fn ndim(&self) -> usize {
        self.coords.len()
    }

    /// Wrap/clamp every coordinate into its axis domain.
    pub fn confine(&mut self, grid: &Grid) {
        for (a, x) in self.coords.iter_mut().enumerate() {
            *x = grid.axis(a).confine(*x);
        }
    }
}

/// Multilinear interpolation of a real field stored on `grid`.
///
/// `point` may lie anywhere; periodic axes wrap, box axes clamp to the
/// outermost cells.
pub fn interp_real(grid: &Grid, values: &[f64], point: &[f64]) -> f64 {
    interp_with(grid, point, |flat| values[flat])
}

/// Multilinear interpolation with a caller-supplied cell accessor, so the
/// same corner walk serves real fields, complex fields and slices.
pub fn interp_with<T, F>(grid: &Grid, point: &[f64], fetch: F) -> T
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Default,
    F: Fn(usize) -> T,
{
    let d = grid.ndim();
    debug_assert_eq!(point.len(), d);
    let mut lo = [0usize; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    let mut w = [0f64; MAX_DIM];
    for a in 0..d {
        let ax = grid.axis(a);
        let u = ax.frac_index(point[a]);
        let i0 = u.floor() as usize;
        let i0 = i0.min(ax.points - 1);
        let frac = u - i0 as f64;
        lo[a] = i0;
        hi[a] = match ax.boundary {
            Boundary::Periodic => (i0 + 1) % ax.points,
            Boundary::Box => (i0 + 1).min(ax.points - 1),
        };
        w[a] = frac;
    }
    let strides = grid.strides();
    let mut acc = T::default();
    for corner in 0..(1usize << d) {
        let mut flat = 0usize;
        let mut weight = 1.0f64;
        for a in 0..d {
            if corner >> a & 1 == 1 {
                flat += hi[a] * strides[a];
                weight *= w[a];
            } else {
                flat += lo[a] * strides[a];
                weight *= 1.0 - w[a];
            }
        }
        if weight != 0.0 {
            acc = acc + fetch(flat) * weight;
        }
    }
    acc
}
