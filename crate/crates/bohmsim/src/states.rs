//! Constructors for the wave functions used by the scenario suite.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::Result;
use crate::grid::Grid;
use crate::wavefunction::WaveFunction;

/// Normalized 1D Gaussian packet exp(-(x-x0)^2/(4 sigma0^2) + i k0 x).
/// `sigma0` is the std of the position density |psi|^2.
pub fn gaussian_packet(grid: Arc<Grid>, sigma0: f64, x0: f64, k0: f64) -> Result<WaveFunction> {
    assert_eq!(grid.ndim(), 1);
    WaveFunction::from_fn(grid, 0.0, |q| {
        let u = q[0] - x0;
        Complex64::from_polar((-u * u / (4.0 * sigma0 * sigma0)).exp(), k0 * q[0])
    })
    .normalize()
}

/// Normalized plane wave e^{ikx} on a periodic axis; `mode` counts full
/// periods so the wavenumber is resolved exactly by the grid.
pub fn plane_wave(grid: Arc<Grid>, mode: i32) -> Result<WaveFunction> {
    assert_eq!(grid.ndim(), 1);
    let l = grid.axis(0).len();
    let k = 2.0 * std::f64::consts::PI * mode as f64 / l;
    WaveFunction::from_fn(grid, 0.0, |q| Complex64::from_polar(1.0 / l.sqrt(), k * q[0]))
        .normalize()
}

pub fn plane_wave_k(grid: &Grid, mode: i32) -> f64 {
    2.0 * std::f64::consts::PI * mode as f64 / grid.axis(0).len()
}

/// Ground state of the particle in a box axis: sin(pi (x-min)/L), zero at
/// the walls. Real-valued, so the guiding velocity vanishes identically.
pub fn box_ground_state(grid: Arc<Grid>) -> Result<WaveFunction> {
    assert_eq!(grid.ndim(), 1);
    let ax = grid.axis(0).clone();
    WaveFunction::from_fn(grid, 0.0, |q| {
        let u = (q[0] - ax.min) / ax.len();
        Complex64::new((std::f64::consts::PI * u).sin(), 0.0)
    })
    .normalize()
}

/// Ground state of V = 1/2 m omega^2 x^2 (real Gaussian of density std
/// sqrt(hbar/(2 m omega))).
pub fn harmonic_ground_state(
    grid: Arc<Grid>,
    mass: f64,
    omega: f64,
    hbar: f64,
) -> Result<WaveFunction> {
    let sigma0 = (hbar / (2.0 * mass * omega)).sqrt();
    gaussian_packet(grid, sigma0, 0.0, 0.0)
}

/// Coherent state: harmonic ground state displaced by `x0`.
pub fn coherent_state(
    grid: Arc<Grid>,
    mass: f64,
    omega: f64,
    hbar: f64,
    x0: f64,
) -> Result<WaveFunction> {
    let sigma0 = (hbar / (2.0 * mass * omega)).sqrt();
    gaussian_packet(grid, sigma0, x0, 0.0)
}

/// Symmetric superposition of two displaced Gaussian packets at +-sep/2,
/// optionally with a common wavenumber; weights c1, c2 are real amplitudes.
pub fn two_packet_superposition(
    grid: Arc<Grid>,
    sigma0: f64,
    sep: f64,
    k0: f64,
    c1: f64,
    c2: f64,
) -> Result<WaveFunction> {
    assert_eq!(grid.ndim(), 1);
    WaveFunction::from_fn(grid, 0.0, |q| {
        let a = q[0] + sep / 2.0;
        let b = q[0] - sep / 2.0;
        let env = c1 * (-a * a / (4.0 * sigma0 * sigma0)).exp()
            + c2 * (-b * b / (4.0 * sigma0 * sigma0)).exp();
        Complex64::from_polar(env, k0 * q[0])
    })
    .normalize()
}

/// Constant-phase wave function localized in a sub-box, with smoothed
/// (raised-cosine) edges of width `edge` so the velocity field stays tame.
pub fn smoothed_box_state(
    grid: Arc<Grid>,
    lo: &[f64],
    hi: &[f64],
    edge: f64,
) -> Result<WaveFunction> {
    let d = grid.ndim();
    assert_eq!(lo.len(), d);
    assert_eq!(hi.len(), d);
    let lo = lo.to_vec();
    let hi = hi.to_vec();
    WaveFunction::from_fn(grid, 0.0, move |q| {
        let mut amp = 1.0f64;
        for a in 0..d {
            amp *= smooth_step(q[a], lo[a], hi[a], edge);
        }
        Complex64::new(amp, 0.0)
    })
    .normalize()
}

fn smooth_step(x: f64, lo: f64, hi: f64, edge: f64) -> f64 {
    if x <= lo - edge || x >= hi + edge {
        0.0
    } else if x >= lo + edge && x <= hi - edge {
        1.0
    } else if x < lo + edge {
        let u = (x - (lo - edge)) / (2.0 * edge);
        0.5 * (1.0 - (std::f64::consts::PI * u).cos())
    } else {
        let u = ((hi + edge) - x) / (2.0 * edge);
        0.5 * (1.0 - (std::f64::consts::PI * u).cos())
    }
}
