//! Time evolution of the wave function: spectral split-step with Strang
//! splitting on all-periodic grids, and a per-axis Cayley (Crank-Nicolson)
//! scheme with Dirichlet walls on box grids.
//!
//! Both schemes apply the potential as exact half-step phases around the
//! kinetic update, so they are second order in dt and norm-preserving to
//! machine precision. Time-dependent potentials are sampled once per step
//! at the step midpoint.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{BsimError, Result};
use crate::grid::Grid;
use crate::hamiltonian::{Hamiltonian, Potential};
use crate::wavefunction::WaveFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SplitFourier,
    CrankNicolson,
}

#[derive(Debug, Clone)]
pub struct PropagatorConfig {
    pub method: Method,
    pub dt: f64,
    pub steps_per_snapshot: usize,
}

impl PropagatorConfig {
    pub fn new(method: Method, dt: f64, steps_per_snapshot: usize) -> Result<Self> {
        if !(dt > 0.0) || steps_per_snapshot == 0 {
            return Err(BsimError::Config("dt and steps_per_snapshot must be positive".into()));
        }
        Ok(PropagatorConfig { method, dt, steps_per_snapshot })
    }

    pub fn split(dt: f64) -> Self {
        PropagatorConfig { method: Method::SplitFourier, dt, steps_per_snapshot: 1 }
    }

    pub fn crank_nicolson(dt: f64) -> Self {
        PropagatorConfig { method: Method::CrankNicolson, dt, steps_per_snapshot: 1 }
    }
}

/// Stability/accuracy heuristic: dt <= 0.1 * min_k(m_k dx_k^2 / hbar).
pub fn suggest_dt(h: &Hamiltonian) -> f64 {
    h.grid
        .axes()
        .iter()
        .zip(&h.masses)
        .map(|(ax, &m)| 0.1 * m * ax.dx() * ax.dx() / h.hbar)
        .fold(f64::INFINITY, f64::min)
}

/// Fourier wavenumbers for an axis of `n` cells over length `l`.
pub(crate) fn wavenumbers(n: usize, l: f64) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let f = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            2.0 * PI * f / l
        })
        .collect()
}

/// Apply `op` to every 1D line of `data` along `axis`, via a gather/scatter
/// scratch buffer.
fn for_each_line<F: FnMut(&mut [Complex64])>(
    grid: &Grid,
    data: &mut [Complex64],
    axis: usize,
    mut op: F,
) {
    let strides = grid.strides();
    let stride = strides[axis];
    let n = grid.axis(axis).points;
    let block = stride * n;
    let nblocks = grid.len() / block;
    let mut line = vec![Complex64::default(); n];
    for ob in 0..nblocks {
        for inner in 0..stride {
            let base = ob * block + inner;
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[base + i * stride];
            }
            op(&mut line);
            for (i, v) in line.iter().enumerate() {
                data[base + i * stride] = *v;
            }
        }
    }
}

struct SplitPlan {
    ffts_fwd: Vec<Arc<dyn Fft<f64>>>,
    ffts_inv: Vec<Arc<dyn Fft<f64>>>,
    /// Kinetic symbol sum_k hbar^2 k^2 / (2 m_k), one value per cell.
    kin_energy: Vec<f64>,
    /// exp(-i dt kin/hbar) for the configured dt.
    kin_phase: Vec<Complex64>,
}

struct ThomasPlan {
    /// Off-diagonal LHS coefficient (constant per axis).
    a: Complex64,
    /// Diagonal LHS coefficient.
    b: Complex64,
    /// Precomputed forward-sweep coefficients.
    cprime: Vec<Complex64>,
    inv_denom: Vec<Complex64>,
}

impl ThomasPlan {
    /// Cayley step coefficients for one axis: solves
    /// (I + i dt/(2 hbar) T) psi' = (I - i dt/(2 hbar) T) psi
    /// with T the Dirichlet [-1,2,-1]/dx^2 kinetic stencil times hbar^2/2m.
    fn new(n: usize, dt: f64, hbar: f64, mass: f64, dx: f64) -> ThomasPlan {
        let coef = Complex64::i() * dt * hbar / (4.0 * mass * dx * dx);
        let a = -coef;
        let b = Complex64::new(1.0, 0.0) + 2.0 * coef;
        let mut cprime = vec![Complex64::default(); n];
        let mut inv_denom = vec![Complex64::default(); n];
        cprime[0] = a / b;
        inv_denom[0] = 1.0 / b;
        for i in 1..n {
            let denom = b - a * cprime[i - 1];
            inv_denom[i] = 1.0 / denom;
            cprime[i] = a * inv_denom[i];
        }
        ThomasPlan { a, b, cprime, inv_denom }
    }

    fn solve_line(&self, line: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        let n = line.len();
        // RHS: (I - i dt/(2 hbar) T) psi, mirrored coefficients
        let rb = 2.0 * Complex64::new(1.0, 0.0) - self.b; // 1 - 2 coef
        let ra = -self.a; // +coef
        scratch.clear();
        scratch.reserve(n);
        for i in 0..n {
            let left = if i > 0 { line[i - 1] } else { Complex64::default() };
            let right = if i + 1 < n { line[i + 1] } else { Complex64::default() };
            scratch.push(rb * line[i] + ra * (left + right));
        }
        // forward sweep
        line[0] = scratch[0] * self.inv_denom[0];
        for i in 1..n {
            line[i] = (scratch[i] - self.a * line[i - 1]) * self.inv_denom[i];
        }
        // back substitution
        for i in (0..n - 1).rev() {
            let next = line[i + 1];
            line[i] -= self.cprime[i] * next;
        }
    }
}

enum Plan {
    Split(SplitPlan),
    Cn(Vec<ThomasPlan>),
}

pub struct Propagator {
    h: Hamiltonian,
    cfg: PropagatorConfig,
    plan: Plan,
    /// Half-step potential phase for a static potential at the configured dt.
    static_pot_phase: Option<Vec<Complex64>>,
}

impl Propagator {
    pub fn new(h: Hamiltonian, cfg: PropagatorConfig) -> Result<Propagator> {
        let grid = h.grid.clone();
        let plan = match cfg.method {
            Method::SplitFourier => {
                if !grid.is_all_periodic() {
                    return Err(BsimError::MethodGridMismatch(
                        "split_fourier requires an all-periodic grid".into(),
                    ));
                }
                let mut planner = FftPlanner::new();
                let mut ffts_fwd = Vec::new();
                let mut ffts_inv = Vec::new();
                for ax in grid.axes() {
                    ffts_fwd.push(planner.plan_fft_forward(ax.points));
                    ffts_inv.push(planner.plan_fft_inverse(ax.points));
                }
                let per_axis: Vec<Vec<f64>> = grid
                    .axes()
                    .iter()
                    .zip(&h.masses)
                    .map(|(ax, &m)| {
                        wavenumbers(ax.points, ax.len())
                            .into_iter()
                            .map(|k| h.hbar * h.hbar * k * k / (2.0 * m))
                            .collect()
                    })
                    .collect();
                let mut kin_energy = vec![0.0f64; grid.len()];
                let mut idx = vec![0usize; grid.ndim()];
                for (flat, e) in kin_energy.iter_mut().enumerate() {
                    grid.unravel(flat, &mut idx);
                    *e = idx.iter().enumerate().map(|(a, &i)| per_axis[a][i]).sum();
                }
                let kin_phase = kin_energy
                    .iter()
                    .map(|&e| Complex64::from_polar(1.0, -e * cfg.dt / h.hbar))
                    .collect();
                Plan::Split(SplitPlan { ffts_fwd, ffts_inv, kin_energy, kin_phase })
            }
            Method::CrankNicolson => {
                if !grid.is_all_box() {
                    return Err(BsimError::MethodGridMismatch(
                        "crank_nicolson requires an all-box grid".into(),
                    ));
                }
                let plans = grid
                    .axes()
                    .iter()
                    .zip(&h.masses)
                    .map(|(ax, &m)| ThomasPlan::new(ax.points, cfg.dt, h.hbar, m, ax.dx()))
                    .collect();
                Plan::Cn(plans)
            }
        };
        let static_pot_phase = match &h.potential {
            Potential::Zero => None,
            Potential::Static(v) => Some(half_phase(v, cfg.dt, h.hbar)),
            Potential::TimeDependent(_) => None,
        };
        Ok(Propagator { h, cfg, plan, static_pot_phase })
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.h
    }

    pub fn config(&self) -> &PropagatorConfig {
        &self.cfg
    }

    /// Advance by one step of the configured dt.
    pub fn step(&self, psi: &WaveFunction) -> Result<WaveFunction> {
        self.step_dt(psi, self.cfg.dt)
    }

    /// Advance by one step of arbitrary dt (used for padded final steps).
    pub fn step_dt(&self, psi: &WaveFunction, dt: f64) -> Result<WaveFunction> {
        if *psi.grid != *self.h.grid {
            return Err(BsimError::GridMismatch);
        }
        let mut amps = psi.amplitudes.clone();
        let full_dt = dt == self.cfg.dt;

        // half potential kick at the step midpoint
        let pot_phase: Option<Vec<Complex64>> = match &self.h.potential {
            Potential::Zero => None,
            Potential::Static(v) => {
                if full_dt {
                    None // use cached
                } else {
                    Some(half_phase(v, dt, self.h.hbar))
                }
            }
            Potential::TimeDependent(f) => {
                let v = f(psi.time + 0.5 * dt);
                Some(half_phase(&v, dt, self.h.hbar))
            }
        };
        let phase_ref: Option<&[Complex64]> = pot_phase
            .as_deref()
            .or(if full_dt { self.static_pot_phase.as_deref() } else { None });
        if let Some(ph) = phase_ref {
            apply_phase(&mut amps, ph);
        }

        match &self.plan {
            Plan::Split(sp) => {
                let n_total = self.h.grid.len() as f64;
                for (a, fft) in sp.ffts_fwd.iter().enumerate() {
                    for_each_line(&self.h.grid, &mut amps, a, |line| fft.process(line));
                }
                if full_dt {
                    apply_phase(&mut amps, &sp.kin_phase);
                } else {
                    for (c, &e) in amps.iter_mut().zip(&sp.kin_energy) {
                        *c *= Complex64::from_polar(1.0, -e * dt / self.h.hbar);
                    }
                }
                for (a, fft) in sp.ffts_inv.iter().enumerate() {
                    for_each_line(&self.h.grid, &mut amps, a, |line| fft.process(line));
                }
                let scale = 1.0 / n_total;
                for c in &mut amps {
                    *c *= scale;
                }
            }
            Plan::Cn(plans) => {
                let mut scratch = Vec::new();
                if full_dt {
                    for (a, plan) in plans.iter().enumerate() {
                        for_each_line(&self.h.grid, &mut amps, a, |line| {
                            plan.solve_line(line, &mut scratch)
                        });
                    }
                } else {
                    for (a, (ax, &m)) in
                        self.h.grid.axes().iter().zip(&self.h.masses).enumerate()
                    {
                        let plan = ThomasPlan::new(ax.points, dt, self.h.hbar, m, ax.dx());
                        for_each_line(&self.h.grid, &mut amps, a, |line| {
                            plan.solve_line(line, &mut scratch)
                        });
                    }
                }
            }
        }

        if let Some(ph) = phase_ref {
            apply_phase(&mut amps, ph);
        }

        WaveFunction::new(self.h.grid.clone(), amps, psi.time + dt)
    }

    /// Evolve to `t_final`, returning snapshots at the configured cadence
    /// (always including the initial and final states). A remainder shorter
    /// than dt is handled with one padded partial step.
    pub fn evolve(&self, psi: &WaveFunction, t_final: f64) -> Result<Vec<WaveFunction>> {
        if t_final < psi.time - 1e-12 {
            return Err(BsimError::Config("t_final precedes the state time".into()));
        }
        let span = t_final - psi.time;
        let dt = self.cfg.dt;
        let n_full = (span / dt + 1e-9).floor() as usize;
        let remainder = span - n_full as f64 * dt;
        let mut snaps = vec![psi.clone()];
        let mut cur = psi.clone();
        for s in 1..=n_full {
            cur = self.step(&cur)?;
            if s % self.cfg.steps_per_snapshot == 0 {
                snaps.push(cur.clone());
            }
        }
        if remainder > 1e-9 * dt {
            cur = self.step_dt(&cur, remainder)?;
            snaps.push(cur.clone());
        } else if n_full % self.cfg.steps_per_snapshot != 0 {
            snaps.push(cur.clone());
        }
        Ok(snaps)
    }
}

fn half_phase(v: &[f64], dt: f64, hbar: f64) -> Vec<Complex64> {
    v.iter().map(|&x| Complex64::from_polar(1.0, -x * dt / (2.0 * hbar))).collect()
}

fn apply_phase(amps: &mut [Complex64], phase: &[Complex64]) {
    for (c, p) in amps.iter_mut().zip(phase) {
        *c *= p;
    }
}

/// One step via a throwaway propagator. Scenario loops should build a
/// `Propagator` once instead.
pub fn step(psi: &WaveFunction, h: &Hamiltonian, cfg: &PropagatorConfig) -> Result<WaveFunction> {
    Propagator::new(h.clone(), cfg.clone())?.step(psi)
}

pub fn evolve(
    psi: &WaveFunction,
    h: &Hamiltonian,
    cfg: &PropagatorConfig,
    t_final: f64,
) -> Result<Vec<WaveFunction>> {
    Propagator::new(h.clone(), cfg.clone())?.evolve(psi, t_final)
}

/// `<psi|H|psi>` for a time-independent Hamiltonian. Kinetic part is
/// spectral on periodic grids and second-order finite-difference on box
/// grids.
pub fn energy_expectation(psi: &WaveFunction, h: &Hamiltonian) -> Result<f64> {
    if *psi.grid != *h.grid {
        return Err(BsimError::GridMismatch);
    }
    let grid = &h.grid;
    let dv = grid.cell_volume();
    let mut kinetic = 0.0f64;
    if grid.is_all_periodic() {
        let mut planner = FftPlanner::new();
        let mut amps = psi.amplitudes.clone();
        for (a, ax) in grid.axes().iter().enumerate() {
            let fft = planner.plan_fft_forward(ax.points);
            for_each_line(grid, &mut amps, a, |line| fft.process(line));
        }
        let per_axis: Vec<Vec<f64>> = grid
            .axes()
            .iter()
            .zip(&h.masses)
            .map(|(ax, &m)| {
                wavenumbers(ax.points, ax.len())
                    .into_iter()
                    .map(|k| h.hbar * h.hbar * k * k / (2.0 * m))
                    .collect()
            })
            .collect();
        // Parseval: sum_x |psi|^2 = (1/N) sum_k |psihat|^2 for unnormalized FFT
        let n_total = grid.len() as f64;
        let mut idx = vec![0usize; grid.ndim()];
        kinetic = amps
            .iter()
            .enumerate()
            .map(|(flat, c)| {
                grid.unravel(flat, &mut idx);
                let e: f64 = idx.iter().enumerate().map(|(a, &i)| per_axis[a][i]).sum();
                e * c.norm_sqr()
            })
            .sum::<f64>()
            * dv
            / n_total;
    } else {
        // -hbar^2/2m central second difference, Dirichlet ghosts
        let strides = grid.strides();
        for (a, (ax, &m)) in grid.axes().iter().zip(&h.masses).enumerate() {
            let coef = h.hbar * h.hbar / (2.0 * m * ax.dx() * ax.dx());
            let stride = strides[a];
            let n = ax.points;
            let block = stride * n;
            let nblocks = grid.len() / block;
            for ob in 0..nblocks {
                for inner in 0..stride {
                    let base = ob * block + inner;
                    for i in 0..n {
                        let c = psi.amplitudes[base + i * stride];
                        let left = if i > 0 {
                            psi.amplitudes[base + (i - 1) * stride]
                        } else {
                            Complex64::default()
                        };
                        let right = if i + 1 < n {
                            psi.amplitudes[base + (i + 1) * stride]
                        } else {
                            Complex64::default()
                        };
                        let lap = left - 2.0 * c + right;
                        kinetic += -(c.conj() * lap).re * coef * dv;
                    }
                }
            }
        }
    }
    let pot = match &h.potential {
        Potential::Zero => 0.0,
        Potential::Static(v) => v
            .iter()
            .zip(&psi.amplitudes)
            .map(|(&x, c)| x * c.norm_sqr())
            .sum::<f64>()
            * dv,
        Potential::TimeDependent(f) => {
            let v = f(psi.time);
            v.iter().zip(&psi.amplitudes).map(|(&x, c)| x * c.norm_sqr()).sum::<f64>() * dv
        }
    };
    Ok(kinetic + pot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{FreeGaussian, HarmonicCoherent};
    use crate::grid::AxisSpec;
    use crate::states;

    fn pgrid(points: usize, min: f64, max: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec![AxisSpec::periodic(points, min, max)]).unwrap())
    }

    fn bgrid(points: usize, min: f64, max: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec![AxisSpec::boxed(points, min, max)]).unwrap())
    }

    #[test]
    fn split_plane_wave_exact_phase() {
        let g = pgrid(64, 0.0, 8.0);
        let psi0 = states::plane_wave(g.clone(), 3).unwrap();
        let k = states::plane_wave_k(&g, 3);
        let m = 1.5;
        let h = Hamiltonian::free(g, vec![m]).unwrap();
        let dt = 0.01;
        let prop = Propagator::new(h, PropagatorConfig::split(dt)).unwrap();
        let t = 0.5;
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        let e = k * k / (2.0 * m);
        let phase = Complex64::from_polar(1.0, -e * t);
        for (a, b) in psi_t.amplitudes.iter().zip(&psi0.amplitudes) {
            assert!((a - b * phase).norm() < 1e-12);
        }
    }

    #[test]
    fn split_free_gaussian_spread_oracle() {
        let g = pgrid(1024, -40.0, 40.0);
        let oracle = FreeGaussian { sigma0: 1.0, x0: 0.0, k0: 0.0, mass: 1.0, hbar: 1.0 };
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::split(0.002)).unwrap();
        let psi0 = states::gaussian_packet(g.clone(), 1.0, 0.0, 0.0).unwrap();
        let t = oracle.time_for_spread(2.0);
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        let rho = psi_t.density();
        let mut max_err = 0.0f64;
        for i in 0..g.len() {
            let x = g.axis(0).coord(i);
            max_err = max_err.max((rho.values[i] - oracle.density(x, t)).abs());
        }
        assert!(max_err < 1e-6, "max density error {max_err}");
        // measured std matches sigma(t)
        let dv = g.cell_volume();
        let var: f64 = (0..g.len())
            .map(|i| {
                let x = g.axis(0).coord(i);
                x * x * rho.values[i] * dv
            })
            .sum();
        assert!((var.sqrt() - oracle.sigma(t)).abs() < 1e-6);
    }

    #[test]
    fn split_moving_packet_drifts() {
        let g = pgrid(1024, -40.0, 40.0);
        let k0 = states::plane_wave_k(&g, 32); // resolved wavenumber
        let oracle = FreeGaussian { sigma0: 1.0, x0: -3.0, k0, mass: 1.0, hbar: 1.0 };
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::split(0.002)).unwrap();
        let psi0 = states::gaussian_packet(g.clone(), 1.0, -3.0, k0).unwrap();
        let t = 1.2;
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        let rho = psi_t.density();
        let dv = g.cell_volume();
        let mean: f64 =
            (0..g.len()).map(|i| g.axis(0).coord(i) * rho.values[i] * dv).sum();
        assert!((mean - oracle.center(t)).abs() < 1e-6, "mean {mean} vs {}", oracle.center(t));
    }

    #[test]
    fn split_harmonic_coherent_center() {
        let g = pgrid(512, -12.0, 12.0);
        let (m, omega, hbar, x0) = (1.0, 1.0, 1.0, 2.0);
        let oracle = HarmonicCoherent { omega, x0, mass: m, hbar };
        let v: Vec<f64> = (0..g.len())
            .map(|i| {
                let x = g.axis(0).coord(i);
                0.5 * m * omega * omega * x * x
            })
            .collect();
        let h =
            Hamiltonian::new(g.clone(), vec![m], Potential::Static(Arc::new(v)), hbar).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::split(0.001)).unwrap();
        let psi0 = states::coherent_state(g.clone(), m, omega, hbar, x0).unwrap();
        // half a period: center should be at -x0
        let t = std::f64::consts::PI / omega;
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        let rho = psi_t.density();
        let dv = g.cell_volume();
        let mean: f64 =
            (0..g.len()).map(|i| g.axis(0).coord(i) * rho.values[i] * dv).sum();
        assert!((mean - oracle.center(t)).abs() < 1e-4, "center {mean} vs {}", oracle.center(t));
        // and the profile should still be the analytic coherent density
        let mut max_err = 0.0f64;
        for i in 0..g.len() {
            let x = g.axis(0).coord(i);
            max_err = max_err.max((rho.values[i] - oracle.density(x, t)).abs());
        }
        assert!(max_err < 1e-4, "profile error {max_err}");
    }

    #[test]
    fn unitarity_both_methods() {
        let gp = pgrid(256, -10.0, 10.0);
        let v: Vec<f64> = (0..gp.len()).map(|i| gp.axis(0).coord(i).sin()).collect();
        let hp = Hamiltonian::new(gp.clone(), vec![1.0], Potential::Static(Arc::new(v)), 1.0)
            .unwrap();
        let prop = Propagator::new(hp, PropagatorConfig::split(0.01)).unwrap();
        let mut psi = states::gaussian_packet(gp, 1.0, 0.0, 1.0).unwrap();
        for _ in 0..200 {
            psi = prop.step(&psi).unwrap();
        }
        assert!((psi.norm2() - 1.0).abs() < 1e-12, "split norm drift {}", psi.norm2() - 1.0);

        let gb = bgrid(255, -10.0, 10.0);
        let v: Vec<f64> = (0..gb.len()).map(|i| gb.axis(0).coord(i).cos()).collect();
        let hb = Hamiltonian::new(gb.clone(), vec![1.0], Potential::Static(Arc::new(v)), 1.0)
            .unwrap();
        let prop = Propagator::new(hb.clone(), PropagatorConfig::crank_nicolson(0.01)).unwrap();
        let mut psi = WaveFunction::from_fn(gb, 0.0, |q| {
            let u = q[0];
            Complex64::from_polar((-u * u / 4.0).exp(), 1.3 * u)
        })
        .normalize()
        .unwrap();
        for _ in 0..200 {
            psi = prop.step(&psi).unwrap();
        }
        assert!((psi.norm2() - 1.0).abs() < 1e-12, "cn norm drift {}", psi.norm2() - 1.0);
    }

    #[test]
    fn split_energy_conserved() {
        let g = pgrid(512, -16.0, 16.0);
        let v: Vec<f64> = (0..g.len())
            .map(|i| {
                let x = g.axis(0).coord(i);
                0.5 * x * x * (2.0 * std::f64::consts::PI * x / 32.0).cos().powi(2)
            })
            .collect();
        let h =
            Hamiltonian::new(g.clone(), vec![1.0], Potential::Static(Arc::new(v)), 1.0).unwrap();
        let prop = Propagator::new(h.clone(), PropagatorConfig::split(0.002)).unwrap();
        let psi0 = states::gaussian_packet(g, 1.0, 1.0, 0.5).unwrap();
        let e0 = energy_expectation(&psi0, &h).unwrap();
        let mut psi = psi0;
        for _ in 0..500 {
            psi = prop.step(&psi).unwrap();
        }
        let e1 = energy_expectation(&psi, &h).unwrap();
        // Strang splitting conserves a modified energy; the true energy
        // oscillates with amplitude O(dt^2)
        assert!((e1 - e0).abs() < 1e-7, "energy drift {}", e1 - e0);
    }

    #[test]
    fn cn_box_ground_state_stationary() {
        // sin(pi (x-min)/L) is an exact eigenvector of the Dirichlet
        // difference stencil, so the Cayley step should only rotate its
        // global phase: the density must be frozen to machine precision.
        let g = bgrid(127, 0.0, 8.0);
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::crank_nicolson(0.01)).unwrap();
        let psi0 = states::box_ground_state(g.clone()).unwrap();
        let rho0 = psi0.density();
        let mut psi = psi0;
        for _ in 0..300 {
            psi = prop.step(&psi).unwrap();
        }
        let rho1 = psi.density();
        for (a, b) in rho0.values.iter().zip(&rho1.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cn_free_gaussian_matches_oracle() {
        let g = bgrid(2047, -60.0, 60.0);
        let oracle = FreeGaussian { sigma0: 1.0, x0: 0.0, k0: 0.0, mass: 1.0, hbar: 1.0 };
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::crank_nicolson(0.0005)).unwrap();
        let psi0 = states::gaussian_packet(g.clone(), 1.0, 0.0, 0.0).unwrap();
        let t = 1.0;
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        let rho = psi_t.density();
        let mut max_err = 0.0f64;
        for i in 0..g.len() {
            let x = g.axis(0).coord(i);
            max_err = max_err.max((rho.values[i] - oracle.density(x, t)).abs());
        }
        // CN kinetic stencil is O(dx^2); the walls are far enough away that
        // the Dirichlet truncation is negligible
        assert!(max_err < 5e-4, "max density error {max_err}");
    }

    #[test]
    fn time_reversal_recovers_state() {
        let g = pgrid(512, -16.0, 16.0);
        let v: Vec<f64> =
            (0..g.len()).map(|i| 0.3 * g.axis(0).coord(i).powi(2).min(20.0)).collect();
        let h =
            Hamiltonian::new(g.clone(), vec![1.0], Potential::Static(Arc::new(v)), 1.0).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::split(0.005)).unwrap();
        let psi0 = states::gaussian_packet(g, 1.0, 0.5, 1.0).unwrap();
        let t = 1.0;
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        // conjugate, run the same span forward, conjugate again
        let mut back = psi_t.conjugated();
        back.time = 0.0;
        let rev = prop.evolve(&back, t).unwrap().pop().unwrap().conjugated();
        let mut max_err = 0.0f64;
        for (a, b) in rev.amplitudes.iter().zip(&psi0.amplitudes) {
            max_err = max_err.max((a - b).norm());
        }
        assert!(max_err < 1e-8, "time-reversal residual {max_err}");
    }

    #[test]
    fn strang_second_order_in_dt() {
        let g = pgrid(256, -12.0, 12.0);
        let v: Vec<f64> = (0..g.len()).map(|i| 0.5 * g.axis(0).coord(i).powi(2)).collect();
        let h = Hamiltonian::new(g.clone(), vec![1.0], Potential::Static(Arc::new(v)), 1.0)
            .unwrap();
        let psi0 = states::gaussian_packet(g, 1.0, 1.5, 0.0).unwrap();
        let t = 0.5;
        let run = |dt: f64| {
            let prop = Propagator::new(h.clone(), PropagatorConfig::split(dt)).unwrap();
            prop.evolve(&psi0, t).unwrap().pop().unwrap()
        };
        let reference = run(1e-4);
        let err = |psi: &WaveFunction| {
            psi.amplitudes
                .iter()
                .zip(&reference.amplitudes)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let e1 = err(&run(0.01));
        let e2 = err(&run(0.005));
        let ratio = e1 / e2;
        assert!(
            (3.5..4.5).contains(&ratio),
            "halving dt should quarter the error; ratio {ratio}"
        );
    }

    #[test]
    fn cn_second_order_in_dt() {
        let g = bgrid(255, -12.0, 12.0);
        let v: Vec<f64> = (0..g.len()).map(|i| 0.5 * g.axis(0).coord(i).powi(2)).collect();
        let h = Hamiltonian::new(g.clone(), vec![1.0], Potential::Static(Arc::new(v)), 1.0)
            .unwrap();
        let psi0 = states::gaussian_packet(g, 1.0, 1.5, 0.0).unwrap();
        let t = 0.5;
        let run = |dt: f64| {
            let prop = Propagator::new(h.clone(), PropagatorConfig::crank_nicolson(dt)).unwrap();
            prop.evolve(&psi0, t).unwrap().pop().unwrap()
        };
        let reference = run(1e-4);
        let err = |psi: &WaveFunction| {
            psi.amplitudes
                .iter()
                .zip(&reference.amplitudes)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let e1 = err(&run(0.01));
        let e2 = err(&run(0.005));
        let ratio = e1 / e2;
        assert!(
            (3.5..4.5).contains(&ratio),
            "halving dt should quarter the error; ratio {ratio}"
        );
    }

    #[test]
    fn steps_compose() {
        let g = pgrid(128, -8.0, 8.0);
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::split(0.01)).unwrap();
        let psi0 = states::gaussian_packet(g, 1.0, 0.0, 1.0).unwrap();
        let mut stepped = psi0.clone();
        for _ in 0..10 {
            stepped = prop.step(&stepped).unwrap();
        }
        let evolved = prop.evolve(&psi0, 0.1).unwrap().pop().unwrap();
        for (a, b) in stepped.amplitudes.iter().zip(&evolved.amplitudes) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn evolve_snapshot_cadence_and_remainder() {
        let g = pgrid(64, 0.0, 8.0);
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let cfg = PropagatorConfig::new(Method::SplitFourier, 0.01, 5).unwrap();
        let prop = Propagator::new(h, cfg).unwrap();
        let psi0 = states::plane_wave(g, 1).unwrap();
        // 23.7 steps: initial + snapshots after steps 5,10,15,20 + padded final
        let snaps = prop.evolve(&psi0, 0.237).unwrap();
        assert_eq!(snaps.len(), 6);
        assert!((snaps.last().unwrap().time - 0.237).abs() < 1e-12);
        assert!((snaps[1].time - 0.05).abs() < 1e-12);
        // zero-span evolve returns just the initial state
        let only = prop.evolve(&snaps[0], 0.0).unwrap();
        assert_eq!(only.len(), 1);
    }

    #[test]
    fn method_grid_mismatch_rejected() {
        let gp = pgrid(32, 0.0, 4.0);
        let gb = bgrid(31, 0.0, 4.0);
        let hp = Hamiltonian::free(gp, vec![1.0]).unwrap();
        let hb = Hamiltonian::free(gb, vec![1.0]).unwrap();
        assert!(matches!(
            Propagator::new(hb, PropagatorConfig::split(0.01)),
            Err(BsimError::MethodGridMismatch(_))
        ));
        assert!(matches!(
            Propagator::new(hp, PropagatorConfig::crank_nicolson(0.01)),
            Err(BsimError::MethodGridMismatch(_))
        ));
    }

    #[test]
    fn time_dependent_potential_sampled_at_midpoint() {
        // V(t) = f(t) * 1 is a pure global phase exp(-i \int f); with the
        // midpoint rule a linear f integrates exactly.
        let g = pgrid(32, 0.0, 4.0);
        let f = |t: f64| 2.0 * t;
        let pot = Potential::TimeDependent(Arc::new(move |t: f64| vec![f(t); 32]));
        let h = Hamiltonian::new(g.clone(), vec![1.0], pot, 1.0).unwrap();
        let prop = Propagator::new(h, PropagatorConfig::split(0.01)).unwrap();
        let psi0 = states::plane_wave(g.clone(), 1).unwrap();
        let k = states::plane_wave_k(&g, 1);
        let t = 0.5;
        let psi_t = prop.evolve(&psi0, t).unwrap().pop().unwrap();
        let phase = Complex64::from_polar(1.0, -(k * k / 2.0 * t + t * t));
        for (a, b) in psi_t.amplitudes.iter().zip(&psi0.amplitudes) {
            assert!((a - b * phase).norm() < 1e-10);
        }
    }

    #[test]
    fn suggested_dt_scales_with_grid() {
        let coarse = Hamiltonian::free(pgrid(64, 0.0, 8.0), vec![1.0]).unwrap();
        let fine = Hamiltonian::free(pgrid(256, 0.0, 8.0), vec![1.0]).unwrap();
        assert!(suggest_dt(&fine) < suggest_dt(&coarse));
        assert!((suggest_dt(&coarse) - 0.1 * 0.125 * 0.125).abs() < 1e-15);
    }

    #[test]
    fn energy_expectation_plane_wave() {
        let g = pgrid(64, 0.0, 8.0);
        let psi = states::plane_wave(g.clone(), 3).unwrap();
        let k = states::plane_wave_k(&g, 3);
        let m = 2.0;
        let h = Hamiltonian::free(g, vec![m]).unwrap();
        let e = energy_expectation(&psi, &h).unwrap();
        assert!((e - k * k / (2.0 * m)).abs() < 1e-12);
    }
}
