//! Splittings q = (x, y), conditional wave functions psi(x) = Psi(x, Y),
//! effective wave function detection, and product composition.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{BsimError, Result};
use crate::grid::{Boundary, Grid, MAX_DIM};
use crate::guidance::{velocity_field, Regularization};
use crate::hamiltonian::Hamiltonian;
use crate::wavefunction::WaveFunction;

/// Norm^2 below which a conditional slice counts as null.
pub const NULL_SLICE_TOL: f64 = 1e-14;

/// Ordered split of grid axes into a subsystem (x) and its environment (y).
#[derive(Debug, Clone)]
pub struct SubsystemSplit {
    pub x_axes: Vec<usize>,
    pub y_axes: Vec<usize>,
}

impl SubsystemSplit {
    /// Both sets non-empty, disjoint, jointly covering `0..ndim`.
    pub fn new(x_axes: Vec<usize>, y_axes: Vec<usize>, ndim: usize) -> Result<Self> {
        if x_axes.is_empty() || y_axes.is_empty() {
            return Err(BsimError::EmptyAxisSet);
        }
        let mut seen = vec![false; ndim];
        for &a in x_axes.iter().chain(&y_axes) {
            if a >= ndim {
                return Err(BsimError::InvalidGrid(format!("axis {a} out of range")));
            }
            if seen[a] {
                return Err(BsimError::AxisOverlap(format!("axis {a} appears twice")));
            }
            seen[a] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(BsimError::AxisOverlap("split does not cover every axis".into()));
        }
        Ok(SubsystemSplit { x_axes, y_axes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectiveStatus {
    /// The conditional wave function is (locally in y) Y-independent.
    Effective,
    /// A conditional wave function exists but varies across the branch.
    ConditionalOnly,
    /// The slice at Y is null or Y lies outside every branch support.
    Undefined,
}

/// Outcome of effective wave function detection at an environment point.
#[derive(Debug, Clone)]
pub struct EffectiveWfReport {
    pub status: EffectiveStatus,
    pub psi: Option<WaveFunction>,
    pub branch_weight: f64,
    /// Worst-case leakage: the largest y-marginal density over cells below
    /// the support threshold (the region separating the branches).
    pub support_gap: f64,
    pub branch_id: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EffectiveThresholds {
    pub support_eps: f64,
    pub fidelity_delta: f64,
}

impl Default for EffectiveThresholds {
    fn default() -> Self {
        EffectiveThresholds { support_eps: 1e-10, fidelity_delta: 1e-6 }
    }
}

/// Raw (unnormalized) slice Psi(x, Y), with Y handled by multilinear
/// interpolation across the y-axes.
fn raw_slice(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    x_grid: &Arc<Grid>,
    y_point: &[f64],
) -> Vec<Complex64> {
    let grid = &psi.grid;
    let strides = grid.strides();
    let dy = split.y_axes.len();
    // corner indices and weights along each y-axis
    let mut lo = [0usize; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    let mut w = [0f64; MAX_DIM];
    for (k, &a) in split.y_axes.iter().enumerate() {
        let ax = grid.axis(a);
        let u = ax.frac_index(y_point[k]);
        let i0 = (u.floor() as usize).min(ax.points - 1);
        lo[k] = i0;
        hi[k] = match ax.boundary {
            Boundary::Periodic => (i0 + 1) % ax.points,
            Boundary::Box => (i0 + 1).min(ax.points - 1),
        };
        w[k] = u - i0 as f64;
    }
    let mut xi = [0usize; MAX_DIM];
    (0..x_grid.len())
        .map(|xf| {
            x_grid.unravel(xf, &mut xi[..split.x_axes.len()]);
            let base: usize = split
                .x_axes
                .iter()
                .enumerate()
                .map(|(j, &a)| xi[j] * strides[a])
                .sum();
            let mut acc = Complex64::default();
            for corner in 0..(1usize << dy) {
                let mut flat = base;
                let mut weight = 1.0f64;
                for k in 0..dy {
                    if corner >> k & 1 == 1 {
                        flat += hi[k] * strides[split.y_axes[k]];
                        weight *= w[k];
                    } else {
                        flat += lo[k] * strides[split.y_axes[k]];
                        weight *= 1.0 - w[k];
                    }
                }
                if weight != 0.0 {
                    acc += psi.amplitudes[flat] * weight;
                }
            }
            acc
        })
        .collect()
}

/// psi(x) = Psi(x, Y), normalized. `y_point` holds one coordinate per
/// y-axis, in split order.
pub fn conditional_wavefunction(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    y_point: &[f64],
) -> Result<WaveFunction> {
    let x_grid = Arc::new(psi.grid.subgrid(&split.x_axes)?);
    let amps = raw_slice(psi, split, &x_grid, y_point);
    let raw = WaveFunction::new(x_grid, amps, psi.time)?;
    if raw.norm2() < NULL_SLICE_TOL {
        return Err(BsimError::NullSlice);
    }
    raw.normalize()
}

/// Number of branch sample points used for the fidelity check.
const BRANCH_SAMPLES: usize = 8;

/// Detect whether the x-system has an effective wave function at Y: the
/// y-marginal of |Psi|^2 is thresholded at `support_eps`, split into
/// connected components, and the conditional wave functions at the
/// heaviest cells of Y's component are compared pairwise.
pub fn detect_effective_wavefunction(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    y_point: &[f64],
    thresholds: EffectiveThresholds,
) -> Result<EffectiveWfReport> {
    let marginal = psi.density().marginal(&split.y_axes)?;
    let y_grid = marginal.grid.clone();
    let dy = y_grid.ndim();

    // connected components of {marginal > support_eps}
    let mut component = vec![usize::MAX; y_grid.len()];
    let mut n_components = 0usize;
    let mut support_gap = 0.0f64;
    let mut stack: Vec<usize> = Vec::new();
    let mut idx = [0usize; MAX_DIM];
    let strides = y_grid.strides();
    for start in 0..y_grid.len() {
        if marginal.values[start] <= thresholds.support_eps {
            support_gap = support_gap.max(marginal.values[start]);
            continue;
        }
        if component[start] != usize::MAX {
            continue;
        }
        let id = n_components;
        n_components += 1;
        stack.push(start);
        component[start] = id;
        while let Some(cell) = stack.pop() {
            y_grid.unravel(cell, &mut idx[..dy]);
            for a in 0..dy {
                let n = y_grid.axis(a).points;
                let i = idx[a];
                let neighbors: [Option<usize>; 2] = match y_grid.axis(a).boundary {
                    Boundary::Periodic => [Some((i + 1) % n), Some((i + n - 1) % n)],
                    Boundary::Box => [
                        if i + 1 < n { Some(i + 1) } else { None },
                        if i > 0 { Some(i - 1) } else { None },
                    ],
                };
                for nb in neighbors.into_iter().flatten() {
                    let flat = (cell as isize + (nb as isize - i as isize) * strides[a] as isize)
                        as usize;
                    if marginal.values[flat] > thresholds.support_eps
                        && component[flat] == usize::MAX
                    {
                        component[flat] = id;
                        stack.push(flat);
                    }
                }
            }
        }
    }

    // nearest y-cell to Y
    let mut y_flat = 0usize;
    for (k, &x) in y_point.iter().enumerate() {
        let ax = y_grid.axis(k);
        let i = (ax.frac_index(x).round() as usize).min(ax.points - 1);
        y_flat += i * strides[k];
    }
    let undefined = |gap: f64| EffectiveWfReport {
        status: EffectiveStatus::Undefined,
        psi: None,
        branch_weight: 0.0,
        support_gap: gap,
        branch_id: usize::MAX,
    };
    if component[y_flat] == usize::MAX {
        return Ok(undefined(support_gap));
    }
    let branch_id = component[y_flat];

    // heaviest cells of the branch, deterministic order
    let mut cells: Vec<usize> = (0..y_grid.len()).filter(|&c| component[c] == branch_id).collect();
    cells.sort_by(|&a, &b| {
        marginal.values[b]
            .partial_cmp(&marginal.values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let dvy = y_grid.cell_volume();
    let branch_weight: f64 = cells.iter().map(|&c| marginal.values[c] * dvy).sum();
    cells.truncate(BRANCH_SAMPLES);

    let mut slices: Vec<WaveFunction> = Vec::with_capacity(cells.len());
    for &c in &cells {
        let y = y_grid.coords(c);
        match conditional_wavefunction(psi, split, &y.coords) {
            Ok(s) => slices.push(s),
            Err(BsimError::NullSlice) => continue,
            Err(e) => return Err(e),
        }
    }
    if slices.is_empty() {
        return Ok(undefined(support_gap));
    }
    let mut effective = true;
    'outer: for i in 0..slices.len() {
        for j in i + 1..slices.len() {
            if slices[i].fidelity(&slices[j])? < 1.0 - thresholds.fidelity_delta {
                effective = false;
                break 'outer;
            }
        }
    }
    if !effective {
        return Ok(EffectiveWfReport {
            status: EffectiveStatus::ConditionalOnly,
            psi: None,
            branch_weight,
            support_gap,
            branch_id,
        });
    }
    // phase-align every slice to the first, then average
    let first = slices[0].clone();
    let mut avg = vec![Complex64::default(); first.amplitudes.len()];
    for s in &slices {
        let ip = first.inner_product(s)?;
        let phase = if ip.norm() > 0.0 { ip.conj() / ip.norm() } else { Complex64::ONE };
        for (a, c) in avg.iter_mut().zip(&s.amplitudes) {
            *a += c * phase;
        }
    }
    let psi_eff = WaveFunction::new(first.grid.clone(), avg, psi.time)?.normalize()?;
    Ok(EffectiveWfReport {
        status: EffectiveStatus::Effective,
        psi: Some(psi_eff),
        branch_weight,
        support_gap,
        branch_id,
    })
}

/// Compose Psi(q) = prod_i psi_i(q_{group_i}) on `target`. Axis groups must
/// be disjoint and tile the target grid, and each part's axes must match
/// the target axes they claim.
pub fn product_compose(
    target: Arc<Grid>,
    parts: &[(WaveFunction, Vec<usize>)],
) -> Result<WaveFunction> {
    let d = target.ndim();
    let mut owner = vec![usize::MAX; d];
    for (p, (part, axes)) in parts.iter().enumerate() {
        if axes.len() != part.grid.ndim() {
            return Err(BsimError::AxisOverlap(format!(
                "part {p} has {} axes but claims {}",
                part.grid.ndim(),
                axes.len()
            )));
        }
        for (j, &a) in axes.iter().enumerate() {
            if a >= d {
                return Err(BsimError::AxisOverlap(format!("axis {a} out of range")));
            }
            if owner[a] != usize::MAX {
                return Err(BsimError::AxisOverlap(format!("axis {a} claimed twice")));
            }
            owner[a] = p;
            if *part.grid.axis(j) != *target.axis(a) {
                return Err(BsimError::AxisOverlap(format!(
                    "axis {a} of the target does not match part {p} axis {j}"
                )));
            }
        }
    }
    if owner.iter().any(|&o| o == usize::MAX) {
        return Err(BsimError::AxisOverlap("axis groups do not tile the target".into()));
    }
    let part_strides: Vec<Vec<usize>> = parts.iter().map(|(w, _)| w.grid.strides()).collect();
    let mut idx = vec![0usize; d];
    let time = parts[0].0.time;
    let amps: Vec<Complex64> = (0..target.len())
        .map(|flat| {
            target.unravel(flat, &mut idx);
            let mut v = Complex64::ONE;
            for (p, (part, axes)) in parts.iter().enumerate() {
                let pf: usize = axes
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| idx[a] * part_strides[p][j])
                    .sum();
                v *= part.amplitudes[pf];
            }
            v
        })
        .collect();
    WaveFunction::new(target, amps, time)?.normalize()
}

/// Max deviation over well-supported x-cells between the x-components of
/// the full velocity field evaluated at (x, Y) and the velocity field of
/// the conditional wave function at x. The guiding law commutes with
/// conditioning, so this should vanish up to discretization.
pub fn conditional_velocity_consistency(
    psi: &WaveFunction,
    h: &Hamiltonian,
    split: &SubsystemSplit,
    y_point: &[f64],
) -> Result<f64> {
    let cond = conditional_wavefunction(psi, split, y_point)?;
    let h_x = h.restrict(&split.x_axes)?;
    let reg = Regularization { epsilon_rel: 0.0, vmax: f64::INFINITY };
    let v_full = velocity_field(psi, h, reg);
    let v_cond = velocity_field(&cond, &h_x, reg);
    let x_grid = &cond.grid;
    let max_abs2 = cond.max_abs2();
    let eps = 1e-6 * max_abs2;
    let d_full = psi.grid.ndim();
    let mut point = vec![0.0f64; d_full];
    for (k, &a) in split.y_axes.iter().enumerate() {
        point[a] = y_point[k];
    }
    let mut max_dev = 0.0f64;
    for xf in 0..x_grid.len() {
        if cond.amplitudes[xf].norm_sqr() < eps {
            continue;
        }
        let xc = x_grid.coords(xf);
        for (j, &a) in split.x_axes.iter().enumerate() {
            point[a] = xc.coords[j];
        }
        for (j, &a) in split.x_axes.iter().enumerate() {
            let full = crate::grid::interp_real(&psi.grid, &v_full.components[a], &point);
            let dev = (full - v_cond.components[j][xf]).abs();
            max_dev = max_dev.max(dev);
        }
    }
    Ok(max_dev)
}
