//! The guiding velocity field v_k = (hbar/m_k) Im(grad_k psi / psi), the
//! probability current, and trajectory/ensemble integration.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{BsimError, Result};
use crate::grid::{interp_real, Boundary, Configuration, Grid};
use crate::hamiltonian::Hamiltonian;
use crate::wavefunction::WaveFunction;

/// Node handling: cells with |psi|^2 below `epsilon_rel * max|psi|^2` get
/// their velocity magnitude clamped to `vmax`.
#[derive(Debug, Clone, Copy)]
pub struct Regularization {
    pub epsilon_rel: f64,
    pub vmax: f64,
}

impl Regularization {
    /// Spec defaults: epsilon = 1e-12 * max|psi|^2, vmax = 10 * diameter/dt.
    pub fn default_for(grid: &Grid, dt: f64) -> Regularization {
        Regularization { epsilon_rel: 1e-12, vmax: 10.0 * grid.diameter() / dt }
    }
}

/// Velocity (or current) components on a grid, one real array per axis.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub grid: Arc<Grid>,
    pub components: Vec<Vec<f64>>,
    /// Number of cells where the regularization cap was applied.
    pub capped_cells: usize,
}

impl VelocityField {
    /// Multilinear interpolation of all components at a point.
    pub fn at(&self, point: &[f64], out: &mut [f64]) {
        for (a, comp) in self.components.iter().enumerate() {
            out[a] = interp_real(&self.grid, comp, point);
        }
    }
}

/// Gradient of psi along `axis`: spectral on periodic axes, centered
/// differences with Dirichlet ghosts on box axes.
pub fn gradient_axis(psi: &WaveFunction, axis: usize) -> Vec<Complex64> {
    let grid = &psi.grid;
    let ax = grid.axis(axis);
    let n = ax.points;
    let strides = grid.strides();
    let stride = strides[axis];
    let block = stride * n;
    let nblocks = grid.len() / block;
    let mut out = psi.amplitudes.clone();
    match ax.boundary {
        Boundary::Periodic => {
            let mut planner = FftPlanner::new();
            let fwd = planner.plan_fft_forward(n);
            let inv = planner.plan_fft_inverse(n);
            let ks = crate::propagator::wavenumbers(n, ax.len());
            let mut line = vec![Complex64::default(); n];
            for ob in 0..nblocks {
                for inner in 0..stride {
                    let base = ob * block + inner;
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = out[base + i * stride];
                    }
                    fwd.process(&mut line);
                    for (i, v) in line.iter_mut().enumerate() {
                        *v *= Complex64::new(0.0, ks[i]);
                    }
                    inv.process(&mut line);
                    let scale = 1.0 / n as f64;
                    for (i, v) in line.iter().enumerate() {
                        out[base + i * stride] = v * scale;
                    }
                }
            }
        }
        Boundary::Box => {
            let inv2dx = 1.0 / (2.0 * ax.dx());
            let src = psi.amplitudes.clone();
            for ob in 0..nblocks {
                for inner in 0..stride {
                    let base = ob * block + inner;
                    for i in 0..n {
                        let left =
                            if i > 0 { src[base + (i - 1) * stride] } else { Complex64::default() };
                        let right = if i + 1 < n {
                            src[base + (i + 1) * stride]
                        } else {
                            Complex64::default()
                        };
                        out[base + i * stride] = (right - left) * inv2dx;
                    }
                }
            }
        }
    }
    out
}

/// The guiding field v_k = (hbar/m_k) Im(grad_k psi / psi) with node
/// regularization.
pub fn velocity_field(psi: &WaveFunction, h: &Hamiltonian, reg: Regularization) -> VelocityField {
    field_from_gradients(psi, h, reg, true)
}

/// Quantum probability current J_k = (hbar/m_k) Im(conj(psi) grad_k psi).
pub fn probability_current(psi: &WaveFunction, h: &Hamiltonian) -> VelocityField {
    field_from_gradients(psi, h, Regularization { epsilon_rel: 0.0, vmax: f64::INFINITY }, false)
}

fn field_from_gradients(
    psi: &WaveFunction,
    h: &Hamiltonian,
    reg: Regularization,
    divide_by_density: bool,
) -> VelocityField {
    let d = psi.grid.ndim();
    let ncells = psi.grid.len();
    let abs2: Vec<f64> = psi.amplitudes.iter().map(|c| c.norm_sqr()).collect();
    let max_abs2 = abs2.iter().cloned().fold(0.0, f64::max);
    let eps = reg.epsilon_rel * max_abs2;
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(d);
    for a in 0..d {
        let grad = gradient_axis(psi, a);
        let coef = h.hbar / h.masses[a];
        let comp: Vec<f64> = (0..ncells)
            .map(|i| {
                let num = (psi.amplitudes[i].conj() * grad[i]).im * coef;
                if divide_by_density {
                    if abs2[i] > 0.0 {
                        num / abs2[i]
                    } else {
                        0.0
                    }
                } else {
                    num
                }
            })
            .collect();
        components.push(comp);
    }
    let mut capped = 0usize;
    if divide_by_density {
        for i in 0..ncells {
            if abs2[i] < eps {
                let mag2: f64 = components.iter().map(|c| c[i] * c[i]).sum();
                let mag = mag2.sqrt();
                if mag > reg.vmax {
                    let s = reg.vmax / mag;
                    for c in components.iter_mut() {
                        c[i] *= s;
                    }
                    capped += 1;
                }
            }
        }
    }
    VelocityField { grid: psi.grid.clone(), components, capped_cells: capped }
}

/// One trajectory: times and the configuration at each time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<Configuration>,
}

/// M configuration points co-evolving with a wave function.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub configs: Vec<Configuration>,
    pub time: f64,
    pub seed: u64,
}

impl EnsembleState {
    pub fn new(configs: Vec<Configuration>, time: f64, seed: u64) -> Self {
        EnsembleState { configs, time, seed }
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// RK4 step of one configuration through the time-interpolated field
/// lerp(v0, v1; (t-t0)/dt). Periodic axes wrap, box axes clamp inside the
/// walls.
fn rk4_point(
    grid: &Grid,
    v0: &VelocityField,
    v1: &VelocityField,
    x: &mut [f64],
    dt: f64,
    scale: f64,
) {
    let d = grid.ndim();
    debug_assert!(d <= crate::grid::MAX_DIM);
    let mut k = [[0.0f64; crate::grid::MAX_DIM]; 4];
    let mut tmp = [0.0f64; crate::grid::MAX_DIM];
    let mut buf0 = [0.0f64; crate::grid::MAX_DIM];
    let mut buf1 = [0.0f64; crate::grid::MAX_DIM];

    let eval = |pt: &[f64], theta: f64, out: &mut [f64], b0: &mut [f64], b1: &mut [f64]| {
        for a in 0..d {
            b0[a] = interp_real(grid, &v0.components[a], pt);
            b1[a] = interp_real(grid, &v1.components[a], pt);
            out[a] = scale * ((1.0 - theta) * b0[a] + theta * b1[a]);
        }
    };

    eval(x, 0.0, &mut k[0][..d], &mut buf0, &mut buf1);
    for a in 0..d {
        tmp[a] = x[a] + 0.5 * dt * k[0][a];
    }
    eval(&tmp[..d], 0.5, &mut k[1][..d], &mut buf0, &mut buf1);
    for a in 0..d {
        tmp[a] = x[a] + 0.5 * dt * k[1][a];
    }
    eval(&tmp[..d], 0.5, &mut k[2][..d], &mut buf0, &mut buf1);
    for a in 0..d {
        tmp[a] = x[a] + dt * k[2][a];
    }
    eval(&tmp[..d], 1.0, &mut k[3][..d], &mut buf0, &mut buf1);
    for a in 0..d {
        x[a] += dt / 6.0 * (k[0][a] + 2.0 * k[1][a] + 2.0 * k[2][a] + k[3][a]);
        x[a] = grid.axis(a).confine(x[a]);
    }
}

/// Advance every ensemble member by one RK4 step between two velocity
/// fields dt apart. `scale` multiplies the field (1.0 for physical flow).
pub fn advance_with_fields(
    ens: &mut EnsembleState,
    grid: &Grid,
    v0: &VelocityField,
    v1: &VelocityField,
    dt: f64,
    scale: f64,
) {
    ens.configs.par_iter_mut().for_each(|c| {
        rk4_point(grid, v0, v1, &mut c.coords, dt, scale);
    });
    ens.time += dt;
}

/// Spec-shaped wrapper: advance through the interval separating two wave
/// function snapshots.
pub fn advance_ensemble(
    ens: &mut EnsembleState,
    psi_pair: (&WaveFunction, &WaveFunction),
    h: &Hamiltonian,
    reg: Regularization,
) -> Result<()> {
    let (p0, p1) = psi_pair;
    let dt = p1.time - p0.time;
    if !(dt > 0.0) {
        return Err(BsimError::SnapshotGap(0));
    }
    if (ens.time - p0.time).abs() > 1e-9 * dt.max(1.0) {
        return Err(BsimError::Config("ensemble time does not match first snapshot".into()));
    }
    let v0 = velocity_field(p0, h, reg);
    let v1 = velocity_field(p1, h, reg);
    advance_with_fields(ens, &p0.grid, &v0, &v1, dt, 1.0);
    Ok(())
}

/// Integrate the ensemble across a uniformly spaced snapshot sequence,
/// recording full trajectories for the members in `record`.
pub fn integrate(
    ens: &EnsembleState,
    snapshots: &[WaveFunction],
    h: &Hamiltonian,
    reg: Regularization,
    record: &[usize],
) -> Result<(EnsembleState, Vec<Trajectory>)> {
    if snapshots.is_empty() {
        return Err(BsimError::SnapshotGap(0));
    }
    let mut out = ens.clone();
    let mut trajs: Vec<Trajectory> = record
        .iter()
        .map(|&i| Trajectory {
            times: vec![ens.time],
            points: vec![ens.configs[i].clone()],
        })
        .collect();
    if snapshots.len() == 1 {
        return Ok((out, trajs));
    }
    let dt = snapshots[1].time - snapshots[0].time;
    for (i, w) in snapshots.windows(2).enumerate() {
        let step = w[1].time - w[0].time;
        if (step - dt).abs() > 1e-9 * dt {
            return Err(BsimError::SnapshotGap(i + 1));
        }
    }
    let mut v0 = velocity_field(&snapshots[0], h, reg);
    for (i, w) in snapshots.windows(2).enumerate() {
        let v1 = velocity_field(&w[1], h, reg);
        advance_with_fields(&mut out, &w[0].grid, &v0, &v1, dt, 1.0);
        for (t, &m) in trajs.iter_mut().zip(record) {
            t.times.push(out.time);
            t.points.push(out.configs[m].clone());
        }
        v0 = v1;
        let _ = i;
    }
    Ok((out, trajs))
}

/// Evolve the wave function and the ensemble together without storing the
/// snapshot sequence: one velocity field per step, RK4 advection through
/// `scale` times the guiding field. Calls `on_step` after every step with
/// the current wave function and ensemble. Returns the final wave function.
pub fn co_evolve<F: FnMut(&WaveFunction, &EnsembleState)>(
    prop: &crate::propagator::Propagator,
    psi0: &WaveFunction,
    ens: &mut EnsembleState,
    t_final: f64,
    reg: Regularization,
    scale: f64,
    mut on_step: F,
) -> Result<WaveFunction> {
    let h = prop.hamiltonian();
    let dt = prop.config().dt;
    let span = t_final - psi0.time;
    if span < -1e-12 {
        return Err(BsimError::Config("t_final precedes the state time".into()));
    }
    let n_full = (span / dt + 1e-9).floor() as usize;
    let remainder = span - n_full as f64 * dt;
    let mut psi = psi0.clone();
    let mut v0 = velocity_field(&psi, h, reg);
    for _ in 0..n_full {
        let next = prop.step(&psi)?;
        let v1 = velocity_field(&next, h, reg);
        advance_with_fields(ens, &psi.grid, &v0, &v1, dt, scale);
        psi = next;
        v0 = v1;
        on_step(&psi, ens);
    }
    if remainder > 1e-9 * dt {
        let next = prop.step_dt(&psi, remainder)?;
        let v1 = velocity_field(&next, h, reg);
        advance_with_fields(ens, &psi.grid, &v0, &v1, remainder, scale);
        psi = next;
        on_step(&psi, ens);
    }
    Ok(psi)
}
