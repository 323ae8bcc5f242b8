//! Von Neumann pointer measurements on a system ⊗ pointer composite, the
//! two-slit scenario, and collapse to the effective wave function.
//!
//! The impulsive coupling is realized as the time-dependent potential
//! V_int = lambda * A(x) * y during the window, which kicks the pointer
//! momentum by -lambda*A*tau; a free flight then converts the momentum
//! difference into position separation before readout.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{BsimError, Result};
use crate::grid::{AxisSpec, Configuration, Grid};
use crate::guidance::{co_evolve, EnsembleState, Regularization, Trajectory};
use crate::hamiltonian::{Hamiltonian, Potential};
use crate::propagator::{Propagator, PropagatorConfig};
use crate::stats::sample;
use crate::subsystem::{
    detect_effective_wavefunction, EffectiveStatus, EffectiveThresholds, SubsystemSplit,
};
use crate::wavefunction::{Density, WaveFunction};

/// Von Neumann coupling of a measured function A(x) to one pointer axis.
pub struct PointerModel {
    pub system_axes: Vec<usize>,
    pub pointer_axis: usize,
    /// Coupling strength lambda of V_int = lambda A(x) y.
    pub coupling_strength: f64,
    /// (t_on, t_off) of the impulsive window.
    pub coupling_window: (f64, f64),
    pub measured_function: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// Initial pointer state, a narrow packet on the pointer axis.
    pub pointer_init: WaveFunction,
    /// Free flight after t_off converting momentum into position.
    pub settle_time: f64,
}

/// One ensemble member's readout.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    pub member: usize,
    pub branch_id: usize,
    pub pointer_reading: f64,
    pub system_config: Configuration,
    /// Per-branch weights (shared by every record of a run).
    pub weights: Vec<f64>,
}

/// Residual inter-branch pointer-marginal mass above which branch
/// assignment is refused.
pub const BRANCH_OVERLAP_TOL: f64 = 1e-6;

pub struct MeasurementOutcome {
    pub psi_final: WaveFunction,
    pub records: Vec<MeasurementRecord>,
    pub ensemble: EnsembleState,
    /// Branch weights by branch id.
    pub weights: Vec<f64>,
}

/// Run the measurement: compose psi_sys with the pointer packet, evolve
/// with the windowed coupling plus `settle_time` of free flight, then
/// assign each member a branch from the pointer-marginal component
/// structure.
pub fn run_measurement(
    psi_sys: &WaveFunction,
    model: &PointerModel,
    h_free: &Hamiltonian,
    cfg: &PropagatorConfig,
    m_samples: usize,
    seed: u64,
) -> Result<MeasurementOutcome> {
    let grid = h_free.grid.clone();
    let d = grid.ndim();
    if model.system_axes.len() + 1 != d || model.pointer_axis >= d {
        return Err(BsimError::InvalidGrid("pointer model does not match the grid".into()));
    }
    let psi0 = crate::subsystem::product_compose(
        grid.clone(),
        &[
            (psi_sys.clone(), model.system_axes.clone()),
            (model.pointer_init.clone(), vec![model.pointer_axis]),
        ],
    )?;

    // windowed interaction potential on top of the free Hamiltonian; the
    // window is relative to the state's own time so measurements compose
    let (t_on, t_off) = model.coupling_window;
    if !(t_off > t_on) {
        return Err(BsimError::Config("coupling window must have t_off > t_on".into()));
    }
    let (t_on, t_off) = (psi0.time + t_on, psi0.time + t_off);
    let lambda = model.coupling_strength;
    let mut v_on = vec![0.0f64; grid.len()];
    let sys_axes = model.system_axes.clone();
    let ptr_axis = model.pointer_axis;
    for (flat, v) in v_on.iter_mut().enumerate() {
        let c = grid.coords(flat);
        let x: Vec<f64> = sys_axes.iter().map(|&a| c.coords[a]).collect();
        *v = lambda * (model.measured_function)(&x) * c.coords[ptr_axis];
    }
    let base = match &h_free.potential {
        Potential::Zero => None,
        Potential::Static(v) => Some(v.clone()),
        Potential::TimeDependent(_) => {
            return Err(BsimError::Config(
                "run_measurement requires a static background potential".into(),
            ))
        }
    };
    let v_on = Arc::new(v_on);
    let ncells = grid.len();
    let pot = Potential::TimeDependent(Arc::new(move |t: f64| {
        let mut v = match &base {
            Some(b) => b.as_ref().clone(),
            None => vec![0.0f64; ncells],
        };
        if t >= t_on && t <= t_off {
            for (x, w) in v.iter_mut().zip(v_on.iter()) {
                *x += w;
            }
        }
        v
    }));
    let h = Hamiltonian::new(grid.clone(), h_free.masses.clone(), pot, h_free.hbar)?;

    // quantum-equilibrium ensemble and co-evolution to readout time
    let rho0 = psi0.density().normalize()?;
    let set = sample(&rho0, m_samples, seed)?;
    let mut ens = EnsembleState::new(set.points, psi0.time, seed);
    let prop = Propagator::new(h, cfg.clone())?;
    let reg = Regularization::default_for(&grid, cfg.dt);
    let t_final = t_off + model.settle_time;
    let psi_final = co_evolve(&prop, &psi0, &mut ens, t_final, reg, 1.0, |_, _| {})?;

    let (records, weights) = assign_branches(&psi_final, model, &ens)?;
    Ok(MeasurementOutcome { psi_final, records, ensemble: ens, weights })
}

/// Branch assignment from the pointer-marginal component structure.
fn assign_branches(
    psi: &WaveFunction,
    model: &PointerModel,
    ens: &EnsembleState,
) -> Result<(Vec<MeasurementRecord>, Vec<f64>)> {
    let thresholds = EffectiveThresholds::default();
    let marginal = psi.density().marginal(&[model.pointer_axis])?;
    let ax = marginal.grid.axis(0).clone();
    let dv = marginal.grid.cell_volume();
    // 1D components of the thresholded marginal
    let mut component = vec![usize::MAX; ax.points];
    let mut n_comp = 0usize;
    let mut residual = 0.0f64;
    for i in 0..ax.points {
        if marginal.values[i] <= thresholds.support_eps {
            residual += marginal.values[i] * dv;
            continue;
        }
        if i > 0 && component[i - 1] != usize::MAX {
            component[i] = component[i - 1];
        } else {
            component[i] = n_comp;
            n_comp += 1;
        }
    }
    // periodic wrap joins the ends
    if ax.boundary == crate::grid::Boundary::Periodic
        && component[0] != usize::MAX
        && component[ax.points - 1] != usize::MAX
        && component[0] != component[ax.points - 1]
    {
        let merge = component[ax.points - 1];
        for c in component.iter_mut() {
            if *c == merge {
                *c = 0; // wrapped ends are one branch; first component is 0
            }
        }
    }
    if residual > BRANCH_OVERLAP_TOL {
        return Err(BsimError::BranchOverlap(residual));
    }
    let ids: Vec<usize> = {
        let mut seen = Vec::new();
        for &c in &component {
            if c != usize::MAX && !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen
    };
    let mut weights = vec![0.0f64; ids.len()];
    for (i, &c) in component.iter().enumerate() {
        if let Some(b) = ids.iter().position(|&x| x == c) {
            weights[b] += marginal.values[i] * dv;
        }
    }
    let records = ens
        .configs
        .iter()
        .enumerate()
        .map(|(member, c)| {
            let y = c.coords[model.pointer_axis];
            let cell = (ax.frac_index(y).round() as usize).min(ax.points - 1);
            // walk to the nearest supported cell if the member sits in a gap
            let mut cell_c = component[cell];
            if cell_c == usize::MAX {
                for off in 1..ax.points {
                    let lo = cell.saturating_sub(off);
                    let hi = (cell + off).min(ax.points - 1);
                    if component[lo] != usize::MAX {
                        cell_c = component[lo];
                        break;
                    }
                    if component[hi] != usize::MAX {
                        cell_c = component[hi];
                        break;
                    }
                }
            }
            let branch_id = ids.iter().position(|&x| x == cell_c).unwrap_or(usize::MAX);
            let system_config = Configuration::new(
                model.system_axes.iter().map(|&a| c.coords[a]).collect(),
            );
            MeasurementRecord {
                member,
                branch_id,
                pointer_reading: y,
                system_config,
                weights: weights.clone(),
            }
        })
        .collect();
    Ok((records, weights))
}

/// Two-slit geometry: transverse axis 0, forward axis 1.
#[derive(Debug, Clone)]
pub struct TwoSlitGeometry {
    pub transverse_points: usize,
    pub transverse_half_width: f64,
    pub forward_points: usize,
    pub forward_min: f64,
    pub forward_max: f64,
    pub slit_separation: f64,
    pub packet_sigma: f64,
    pub forward_sigma: f64,
    pub forward_k: f64,
    pub source_z: f64,
    pub screen_time: f64,
    pub dt: f64,
    pub mass: f64,
}

impl Default for TwoSlitGeometry {
    fn default() -> Self {
        TwoSlitGeometry {
            transverse_points: 256,
            transverse_half_width: 24.0,
            forward_points: 128,
            forward_min: -24.0,
            forward_max: 40.0,
            slit_separation: 4.0,
            packet_sigma: 0.75,
            forward_sigma: 3.0,
            forward_k: 4.0,
            source_z: -10.0,
            screen_time: 3.0,
            dt: 0.01,
            mass: 1.0,
        }
    }
}

pub struct TwoSlitOutcome {
    pub histogram: Density,
    /// Transverse |psi|^2 marginal at screen time.
    pub screen_marginal: Density,
    pub trajectories: Vec<Trajectory>,
    /// Initial transverse side of each recorded trajectory (+1 / -1).
    pub sides: Vec<f64>,
    pub crossings: usize,
    pub psi_screen: WaveFunction,
    pub ensemble: EnsembleState,
}

/// Free flight of a two-packet superposition to the screen, recording
/// which slit each trajectory came from and whether any crossed the axis.
pub fn two_slit_scenario(
    geo: &TwoSlitGeometry,
    m_samples: usize,
    n_record: usize,
    seed: u64,
) -> Result<TwoSlitOutcome> {
    let grid = Arc::new(Grid::new(vec![
        AxisSpec::periodic(geo.transverse_points, -geo.transverse_half_width, geo.transverse_half_width),
        AxisSpec::periodic(geo.forward_points, geo.forward_min, geo.forward_max),
    ])?);
    let a = geo.slit_separation / 2.0;
    let sx = geo.packet_sigma;
    let sz = geo.forward_sigma;
    let (z0, kz) = (geo.source_z, geo.forward_k);
    let psi0 = WaveFunction::from_fn(grid.clone(), 0.0, |q| {
        let (x, z) = (q[0], q[1]);
        let slits = (-(x - a) * (x - a) / (4.0 * sx * sx)).exp()
            + (-(x + a) * (x + a) / (4.0 * sx * sx)).exp();
        let fwd = (-(z - z0) * (z - z0) / (4.0 * sz * sz)).exp();
        Complex64::from_polar(slits * fwd, kz * z)
    })
    .normalize()?;
    let h = Hamiltonian::free(grid.clone(), vec![geo.mass, geo.mass])?;
    let cfg = PropagatorConfig::split(geo.dt);
    let rho0 = psi0.density().normalize()?;
    let set = sample(&rho0, m_samples, seed)?;
    let mut ens = EnsembleState::new(set.points, 0.0, seed);
    let sides: Vec<f64> = ens.configs[..n_record.min(m_samples)]
        .iter()
        .map(|c| c.coords[0].signum())
        .collect();
    let mut trajectories: Vec<Trajectory> = ens.configs[..n_record.min(m_samples)]
        .iter()
        .map(|c| Trajectory { times: vec![0.0], points: vec![c.clone()] })
        .collect();
    let prop = Propagator::new(h, cfg.clone())?;
    let reg = Regularization::default_for(&grid, cfg.dt);
    let psi_screen = co_evolve(&prop, &psi0, &mut ens, geo.screen_time, reg, 1.0, |p, e| {
        for (t, c) in trajectories.iter_mut().zip(&e.configs) {
            t.times.push(p.time);
            t.points.push(c.clone());
        }
    })?;
    let mut crossings = 0usize;
    for (t, &side) in trajectories.iter().zip(&sides) {
        if t.points.iter().any(|p| p.coords[0].signum() != side) {
            crossings += 1;
        }
    }
    let x_grid = Arc::new(grid.subgrid(&[0])?);
    let screen_points: Vec<Configuration> = ens
        .configs
        .iter()
        .map(|c| Configuration::new(vec![c.coords[0]]))
        .collect();
    let screen_set = crate::stats::SampleSet {
        points: screen_points,
        time: ens.time,
        provenance: format!("two_slit(seed={seed})"),
    };
    let histogram = crate::stats::empirical_distribution(&screen_set, &x_grid)?;
    let screen_marginal = psi_screen.density().marginal(&[0])?.normalize()?;
    Ok(TwoSlitOutcome {
        histogram,
        screen_marginal,
        trajectories,
        sides,
        crossings,
        psi_screen,
        ensemble: ens,
    })
}

/// Collapse: return the effective branch wave function for independent
/// further evolution. Valid while the branch y-supports stay disjoint.
pub fn collapse_and_continue(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    y_point: &[f64],
    thresholds: EffectiveThresholds,
) -> Result<WaveFunction> {
    let rep = detect_effective_wavefunction(psi, split, y_point, thresholds)?;
    match rep.status {
        EffectiveStatus::Effective => Ok(rep.psi.expect("effective status carries psi")),
        _ => Err(BsimError::NotEffective),
    }
}

/// Reference pointer model used by scenarios and tests: A = tanh(x/w) on a
/// 1D system, pointer packet of width sigma at the origin.
pub fn sign_pointer_model(
    grid: &Arc<Grid>,
    pointer_sigma: f64,
    lambda: f64,
    window: (f64, f64),
    settle: f64,
    edge_width: f64,
) -> Result<PointerModel> {
    let ptr_grid = Arc::new(grid.subgrid(&[1])?);
    let pointer_init = crate::states::gaussian_packet(ptr_grid, pointer_sigma, 0.0, 0.0)?;
    Ok(PointerModel {
        system_axes: vec![0],
        pointer_axis: 1,
        coupling_strength: lambda,
        coupling_window: window,
        measured_function: Arc::new(move |x: &[f64]| (x[0] / edge_width).tanh()),
        pointer_init,
        settle_time: settle,
    })
}

/// The standard two-branch measurement scenario: system superposition
/// c1 psi(-x0) + c2 psi(+x0) measured by the sign pointer. Masses are
/// (1, pointer_mass).
pub struct TwoBranchScenario {
    pub grid: Arc<Grid>,
    pub h_free: Hamiltonian,
    pub psi_sys: WaveFunction,
    pub model: PointerModel,
    pub cfg: PropagatorConfig,
    /// |c1|^2 of the negative-side packet.
    pub weight1: f64,
}

pub fn two_branch_scenario(c1: f64, c2: f64) -> Result<TwoBranchScenario> {
    let grid = Arc::new(Grid::new(vec![
        AxisSpec::periodic(256, -16.0, 16.0),
        AxisSpec::periodic(256, -16.0, 16.0),
    ])?);
    let sys_grid = Arc::new(grid.subgrid(&[0])?);
    // narrow, well-separated packets: their tails near x = 0, where A(x) is
    // between its plateaus and kicks the pointer only partially, carry
    // ~1e-16 of the mass, so the pointer-branch gap stays clean
    let psi_sys = WaveFunction::from_fn(sys_grid, 0.0, move |q| {
        let s = 0.5f64;
        let a = q[0] + 3.5;
        let b = q[0] - 3.5;
        Complex64::new(
            c1 * (-a * a / (4.0 * s * s)).exp() + c2 * (-b * b / (4.0 * s * s)).exp(),
            0.0,
        )
    })
    .normalize()?;
    // a heavy system keeps the packets localized through the readout; the
    // settle time is long enough that the pointer branches separate to
    // ~7 sigma, putting the inter-branch marginal below the support floor
    let pointer_mass = 10.0;
    let h_free = Hamiltonian::free(grid.clone(), vec![5.0, pointer_mass])?;
    let model = sign_pointer_model(&grid, 0.5, 20.0, (0.0, 0.5), 5.0, 0.4)?;
    let cfg = PropagatorConfig::split(0.005);
    let norm2 = c1 * c1 + c2 * c2;
    Ok(TwoBranchScenario { grid, h_free, psi_sys, model, cfg, weight1: c1 * c1 / norm2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::velocity_field;
    use crate::states;
    use crate::stats::{run_test, SampleSet, TestSpec};
    use crate::subsystem::conditional_wavefunction;

    #[test]
    fn constant_a_single_branch_uniform_shift() {
        // A == 1 everywhere: one branch, weight 1, pointer momentum kicked
        // by -lambda*tau, position drifted by the free flight
        let grid = Arc::new(Grid::new(vec![
            AxisSpec::periodic(64, -16.0, 16.0),
            AxisSpec::periodic(256, -16.0, 16.0),
        ]).unwrap());
        let sys_grid = Arc::new(grid.subgrid(&[0]).unwrap());
        let psi_sys = states::gaussian_packet(sys_grid, 1.0, 0.0, 0.0).unwrap();
        let ptr_grid = Arc::new(grid.subgrid(&[1]).unwrap());
        let pointer_init = states::gaussian_packet(ptr_grid, 0.5, 0.0, 0.0).unwrap();
        let pointer_mass = 10.0;
        let (lambda, tau, settle) = (20.0, 0.5, 2.0);
        let model = PointerModel {
            system_axes: vec![0],
            pointer_axis: 1,
            coupling_strength: lambda,
            coupling_window: (0.0, tau),
            measured_function: Arc::new(|_| 1.0),
            pointer_init,
            settle_time: settle,
        };
        let h = Hamiltonian::free(grid.clone(), vec![1.0, pointer_mass]).unwrap();
        let out = run_measurement(&psi_sys, &model, &h, &PropagatorConfig::split(0.005), 500, 3)
            .unwrap();
        assert_eq!(out.weights.len(), 1);
        assert!((out.weights[0] - 1.0).abs() < 1e-9);
        // mean pointer reading: drift -lambda*tau/m * (settle + tau/2)
        let expect = -lambda * tau / pointer_mass * (settle + tau / 2.0);
        let mean: f64 = out.records.iter().map(|r| r.pointer_reading).sum::<f64>()
            / out.records.len() as f64;
        assert!((mean - expect).abs() < 0.15, "mean {mean} vs {expect}");
        assert!(out.records.iter().all(|r| r.branch_id == 0));
    }

    #[test]
    fn two_branch_born_frequencies_and_conditionals() {
        let sc = two_branch_scenario(0.8, 0.6).unwrap();
        let m = 4000usize;
        let out =
            run_measurement(&sc.psi_sys, &sc.model, &sc.h_free, &sc.cfg, m, 17).unwrap();
        assert_eq!(out.weights.len(), 2, "weights {:?}", out.weights);
        // weights match |c|^2 within 1e-3 (residual tails)
        let w_neg = out
            .weights
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min); // pointer kicked down for x<0? identify via records
        let _ = w_neg;
        let f1 = out
            .records
            .iter()
            .filter(|r| r.system_config.coords[0] < 0.0)
            .count() as f64
            / m as f64;
        let band = 3.0 * (0.64f64 * 0.36 / m as f64).sqrt();
        assert!((f1 - 0.64).abs() < band, "branch-1 frequency {f1}");
        // branch weights from the wave function match |c|^2
        let mut ws = out.weights.clone();
        ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ws[1] - 0.64).abs() < 1e-3 && (ws[0] - 0.36).abs() < 1e-3, "{ws:?}");
        // conditioned on a branch, system configs follow that branch density
        let sys_grid = Arc::new(sc.grid.subgrid(&[0]).unwrap());
        let psi1 = states::gaussian_packet(sys_grid.clone(), 1.0, -3.0, 0.0).unwrap();
        // the branch containing x<0 members:
        let b1 = out
            .records
            .iter()
            .find(|r| r.system_config.coords[0] < -1.0)
            .unwrap()
            .branch_id;
        let xs: Vec<Configuration> = out
            .records
            .iter()
            .filter(|r| r.branch_id == b1)
            .map(|r| Configuration::new(vec![r.system_config.coords[0]]))
            .collect();
        assert!(xs.len() > 2000);
        let set = SampleSet { points: xs, time: out.ensemble.time, provenance: "b1".into() };
        // the system keeps evolving freely after the kick: compare against
        // the conditional wave function of the final state, not psi1(0)
        let split = SubsystemSplit::new(vec![0], vec![1], 2).unwrap();
        let y_rep = out
            .records
            .iter()
            .find(|r| r.branch_id == b1)
            .map(|r| r.pointer_reading)
            .unwrap();
        let cond = conditional_wavefunction(&out.psi_final, &split, &[y_rep]).unwrap();
        let rho = cond.density().normalize().unwrap();
        let rep = run_test(&set, &rho, &TestSpec::ks(0.01)).unwrap();
        assert!(rep.passed, "D = {} > {}", rep.statistic, rep.threshold);
        // and that conditional is still centered near the psi1 packet side
        let dv = rho.grid.cell_volume();
        let mean: f64 = (0..rho.grid.len())
            .map(|i| rho.grid.axis(0).coord(i) * rho.values[i] * dv)
            .sum();
        assert!(mean < -1.0, "branch-1 conditional mean {mean}");
        let _ = psi1;
    }

    #[test]
    fn two_slit_symmetric_no_crossings() {
        let geo = TwoSlitGeometry {
            transverse_points: 128,
            forward_points: 64,
            dt: 0.02,
            screen_time: 2.0,
            ..Default::default()
        };
        let out = two_slit_scenario(&geo, 2000, 200, 5).unwrap();
        assert_eq!(out.crossings, 0, "trajectories crossed the axis");
        // screen histogram tracks the transverse marginal
        let xs: Vec<Configuration> = out
            .ensemble
            .configs
            .iter()
            .map(|c| Configuration::new(vec![c.coords[0]]))
            .collect();
        let set = SampleSet { points: xs, time: out.ensemble.time, provenance: "ts".into() };
        let rep = run_test(&set, &out.screen_marginal, &TestSpec::ks(0.01)).unwrap();
        assert!(rep.passed, "D = {} > {}", rep.statistic, rep.threshold);
        // symmetric histogram: mean close to 0
        let dv = out.histogram.grid.cell_volume();
        let mean: f64 = (0..out.histogram.grid.len())
            .map(|i| out.histogram.grid.axis(0).coord(i) * out.histogram.values[i] * dv)
            .sum();
        assert!(mean.abs() < 0.2, "screen mean {mean}");
    }

    #[test]
    fn collapse_product_state_and_entangled() {
        let g = Arc::new(Grid::new(vec![
            AxisSpec::periodic(64, -8.0, 8.0),
            AxisSpec::periodic(64, -8.0, 8.0),
        ]).unwrap());
        let g1 = Arc::new(g.subgrid(&[0]).unwrap());
        let a = states::gaussian_packet(g1.clone(), 1.0, 0.5, 1.0).unwrap();
        let b = states::gaussian_packet(g1, 1.0, -0.5, 0.0).unwrap();
        let full =
            crate::subsystem::product_compose(g.clone(), &[(a.clone(), vec![0]), (b, vec![1])])
                .unwrap();
        let split = SubsystemSplit::new(vec![0], vec![1], 2).unwrap();
        let psi = collapse_and_continue(&full, &split, &[-0.5], EffectiveThresholds::default())
            .unwrap();
        assert!(psi.fidelity(&a).unwrap() > 1.0 - 1e-10);
        // entangled Gaussian: refuse to collapse
        let ent = WaveFunction::from_fn(g, 0.0, |q| {
            Complex64::new(
                (-(q[0] - q[1]).powi(2) / 4.0 - (q[0] + q[1]).powi(2) / 12.0).exp(),
                0.0,
            )
        })
        .normalize()
        .unwrap();
        let r = collapse_and_continue(&ent, &split, &[0.0], EffectiveThresholds::default());
        assert!(matches!(r, Err(BsimError::NotEffective)));
    }

    #[test]
    fn collapsed_factor_evolves_like_conditional() {
        // evolve the product jointly and the collapsed factor alone; the
        // conditional of the joint evolution matches the factor evolution
        let g = Arc::new(Grid::new(vec![
            AxisSpec::periodic(128, -12.0, 12.0),
            AxisSpec::periodic(128, -12.0, 12.0),
        ]).unwrap());
        let g1 = Arc::new(g.subgrid(&[0]).unwrap());
        let a = states::gaussian_packet(g1.clone(), 1.0, 0.0, 1.0).unwrap();
        let b = states::gaussian_packet(g1.clone(), 1.0, 2.0, 0.0).unwrap();
        let full = crate::subsystem::product_compose(
            g.clone(),
            &[(a.clone(), vec![0]), (b.clone(), vec![1])],
        )
        .unwrap();
        let split = SubsystemSplit::new(vec![0], vec![1], 2).unwrap();
        let collapsed =
            collapse_and_continue(&full, &split, &[2.0], EffectiveThresholds::default()).unwrap();
        let h2 = Hamiltonian::free(g, vec![1.0, 1.0]).unwrap();
        let h1 = Hamiltonian::free(g1, vec![1.0]).unwrap();
        let cfg = PropagatorConfig::split(0.01);
        let t = 0.5;
        let full_t = Propagator::new(h2, cfg.clone()).unwrap().evolve(&full, t).unwrap().pop().unwrap();
        let fac_t = Propagator::new(h1, cfg).unwrap().evolve(&collapsed, t).unwrap().pop().unwrap();
        // condition at the evolved y-packet center (drifted by 0 since k=0)
        let cond = conditional_wavefunction(&full_t, &split, &[2.0]).unwrap();
        assert!(cond.fidelity(&fac_t).unwrap() > 1.0 - 1e-6);
    }

    #[test]
    fn repeat_measurement_same_branch() {
        // measuring the collapsed branch again gives the same outcome
        let sc = two_branch_scenario(0.8, 0.6).unwrap();
        let out = run_measurement(&sc.psi_sys, &sc.model, &sc.h_free, &sc.cfg, 500, 23).unwrap();
        // collapse onto the branch of member 0 via its pointer reading
        let split = SubsystemSplit::new(vec![0], vec![1], 2).unwrap();
        let y0 = out.records[0].pointer_reading;
        let branch = collapse_and_continue(
            &out.psi_final,
            &split,
            &[y0],
            EffectiveThresholds { support_eps: 1e-10, fidelity_delta: 1e-4 },
        )
        .unwrap();
        // the branch is localized on one side; re-measuring A = sign gives
        // a single branch with weight ~1
        let out2 =
            run_measurement(&branch, &sc.model, &sc.h_free, &sc.cfg, 300, 29).unwrap();
        let dominant = out2.weights.iter().cloned().fold(0.0, f64::max);
        assert!(dominant > 1.0 - 1e-3, "weights {:?}", out2.weights);
        let lead = out2
            .records
            .iter()
            .filter(|r| r.branch_id == out2.weights.iter().position(|&w| w == dominant).unwrap())
            .count();
        assert!(lead as f64 / 300.0 > 0.99);
    }

    #[test]
    fn velocity_antisymmetric_on_two_slit_axis() {
        // the two-slit state is symmetric in x, so v_x(-x, z) = -v_x(x, z);
        // in particular the axis is a flow barrier
        let geo = TwoSlitGeometry {
            transverse_points: 128,
            forward_points: 64,
            dt: 0.02,
            screen_time: 1.0,
            ..Default::default()
        };
        let grid = Arc::new(Grid::new(vec![
            AxisSpec::periodic(geo.transverse_points, -geo.transverse_half_width, geo.transverse_half_width),
            AxisSpec::periodic(geo.forward_points, geo.forward_min, geo.forward_max),
        ]).unwrap());
        let a = geo.slit_separation / 2.0;
        let (sx, sz, z0, kz) = (geo.packet_sigma, geo.forward_sigma, geo.source_z, geo.forward_k);
        let psi0 = WaveFunction::from_fn(grid.clone(), 0.0, |q| {
            let (x, z) = (q[0], q[1]);
            let slits = (-(x - a) * (x - a) / (4.0 * sx * sx)).exp()
                + (-(x + a) * (x + a) / (4.0 * sx * sx)).exp();
            Complex64::from_polar(slits * (-(z - z0) * (z - z0) / (4.0 * sz * sz)).exp(), kz * z)
        })
        .normalize()
        .unwrap();
        let h = Hamiltonian::free(grid.clone(), vec![1.0, 1.0]).unwrap();
        let psi_t = Propagator::new(h.clone(), PropagatorConfig::split(0.02))
            .unwrap()
            .evolve(&psi0, 1.0)
            .unwrap()
            .pop()
            .unwrap();
        let v = velocity_field(&psi_t, &h, Regularization { epsilon_rel: 1e-12, vmax: 1e6 });
        let nx = geo.transverse_points;
        let nz = geo.forward_points;
        let abs2max = psi_t.max_abs2();
        for ix in 1..nx {
            let mx = nx - ix; // mirror of cell ix about x=0 (cell 0 is -W)
            for iz in 0..nz {
                let f = ix * nz + iz;
                let fm = mx * nz + iz;
                if psi_t.amplitudes[f].norm_sqr() > 1e-8 * abs2max {
                    let s = v.components[0][f] + v.components[0][fm];
                    assert!(s.abs() < 1e-7, "v_x not antisymmetric at ({ix},{iz}): {s}");
                }
            }
        }
    }
}
