//! Equivariance verification and the fundamental conditional probability
//! formula: sample an ensemble from a candidate density, transport it with
//! the guiding flow, and test the result against the evolved candidate.

use crate::error::{BsimError, Result};
use crate::grid::Configuration;
use crate::guidance::{co_evolve, EnsembleState, Regularization};
use crate::hamiltonian::Hamiltonian;
use crate::propagator::{Propagator, PropagatorConfig};
use crate::stats::{ks_critical, ks_statistic, run_test, sample, GridCdf, SampleSet, TestReport, TestSpec};
use crate::subsystem::{conditional_wavefunction, SubsystemSplit};
use crate::wavefunction::{Density, WaveFunction};

/// Which density functional of psi the ensemble is supposed to follow.
/// |psi|^2 is equivariant under the guiding flow; |psi|^4 is not and serves
/// as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateDensity {
    Psi2,
    Psi4,
}

impl CandidateDensity {
    pub fn of(&self, psi: &WaveFunction) -> Result<Density> {
        let rho = psi.density();
        match self {
            CandidateDensity::Psi2 => rho.normalize(),
            CandidateDensity::Psi4 => {
                let sq: Vec<f64> = rho.values.iter().map(|v| v * v).collect();
                Density::new(psi.grid.clone(), sq)?.normalize()
            }
        }
    }
}

/// Sample M points from `candidate`(psi0), transport them through
/// `velocity_scale` times the guiding field to `t_final`, and KS-test the
/// final points against `candidate`(psi_t). Passing with scale 1 and
/// candidate |psi|^2 is equivariance; any other combination should fail.
#[allow(clippy::too_many_arguments)]
pub fn equivariance_check(
    psi0: &WaveFunction,
    h: &Hamiltonian,
    cfg: &PropagatorConfig,
    m: usize,
    t_final: f64,
    velocity_scale: f64,
    candidate: CandidateDensity,
    alpha: f64,
    seed: u64,
) -> Result<(TestReport, WaveFunction, EnsembleState)> {
    let rho0 = candidate.of(psi0)?;
    let set = sample(&rho0, m, seed)?;
    let mut ens = EnsembleState::new(set.points, psi0.time, seed);
    let prop = Propagator::new(h.clone(), cfg.clone())?;
    let reg = Regularization::default_for(&psi0.grid, cfg.dt);
    let psi_t = co_evolve(&prop, psi0, &mut ens, t_final, reg, velocity_scale, |_, _| {})?;
    let rho_t = candidate.of(&psi_t)?;
    let final_set = SampleSet {
        points: ens.configs.clone(),
        time: ens.time,
        provenance: format!("equivariance(scale={velocity_scale}, seed={seed})"),
    };
    let report = run_test(&final_set, &rho_t, &TestSpec::ks(alpha))?;
    Ok((report, psi_t, ens))
}

/// Result of one conditional-probability bin.
#[derive(Debug, Clone)]
pub struct BinReport {
    pub y_center: Vec<f64>,
    pub count: usize,
    pub report: TestReport,
}

/// Outcome of `conditional_probability_check`.
#[derive(Debug, Clone)]
pub struct ConditionalCheck {
    pub per_bin: Vec<BinReport>,
    /// KS test of the pooled probability-integral transforms: within each
    /// tested bin, F_bin(x) should be uniform on [0,1].
    pub pooled: TestReport,
    /// Fraction of ensemble members that landed in tested bins.
    pub coverage: f64,
    /// Bins skipped for holding fewer than `min_count` members or a null
    /// conditional slice.
    pub skipped_bins: usize,
}

/// Verify P(X in dx | Y) = |psi_Y(x)|^2 dx on an evolved ensemble: members
/// are grouped into equal-width y-bins, and each populated bin's
/// x-coordinates are tested against the conditional wave function at the
/// bin center. Requires a 1D x-subsystem.
pub fn conditional_probability_check(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    ens: &EnsembleState,
    y_bins: usize,
    min_count: usize,
    alpha: f64,
) -> Result<ConditionalCheck> {
    if split.x_axes.len() != 1 {
        return Err(BsimError::InvalidTestSpec(
            "conditional_probability_check needs a 1D x-subsystem".into(),
        ));
    }
    let grid = &psi.grid;
    let dy = split.y_axes.len();
    // equal-width bins along every y-axis
    let bin_of = |c: &Configuration| -> usize {
        let mut key = 0usize;
        for &a in &split.y_axes {
            let ax = grid.axis(a);
            let u = ((c.coords[a] - ax.min) / ax.len() * y_bins as f64).floor();
            let i = (u as isize).clamp(0, y_bins as isize - 1) as usize;
            key = key * y_bins + i;
        }
        key
    };
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); y_bins.pow(dy as u32)];
    for (i, c) in ens.configs.iter().enumerate() {
        groups[bin_of(c)].push(i);
    }
    let mut per_bin = Vec::new();
    let mut pooled_u: Vec<f64> = Vec::new();
    let mut covered = 0usize;
    let mut skipped = 0usize;
    for (key, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < min_count {
            skipped += 1;
            continue;
        }
        // bin center in y
        let mut y_center = vec![0.0f64; dy];
        let mut k = key;
        for j in (0..dy).rev() {
            let ax = grid.axis(split.y_axes[j]);
            let i = k % y_bins;
            k /= y_bins;
            y_center[j] = ax.min + (i as f64 + 0.5) * ax.len() / y_bins as f64;
        }
        let cond = match conditional_wavefunction(psi, split, &y_center) {
            Ok(c) => c,
            Err(BsimError::NullSlice) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let rho = cond.density().normalize()?;
        let xs: Vec<Configuration> = members
            .iter()
            .map(|&i| Configuration::new(vec![ens.configs[i].coords[split.x_axes[0]]]))
            .collect();
        let set = SampleSet {
            points: xs,
            time: ens.time,
            provenance: format!("y-bin {key}"),
        };
        let report = run_test(&set, &rho, &TestSpec::ks(alpha))?;
        let cdf = GridCdf::new(&rho)?;
        for p in &set.points {
            pooled_u.push(cdf.eval(p.coords[0]));
        }
        covered += members.len();
        per_bin.push(BinReport { y_center, count: members.len(), report });
    }
    if pooled_u.is_empty() {
        return Err(BsimError::EmptySelection);
    }
    let n = pooled_u.len();
    let d = ks_statistic(&mut pooled_u, |u| u.clamp(0.0, 1.0));
    let pooled = TestReport {
        statistic: d,
        threshold: ks_critical(alpha) / (n as f64).sqrt(),
        passed: d <= ks_critical(alpha) / (n as f64).sqrt(),
        delta: alpha,
        sample_size: n,
    };
    Ok(ConditionalCheck {
        per_bin,
        pooled,
        coverage: covered as f64 / ens.configs.len() as f64,
        skipped_bins: skipped,
    })
}

/// Sample from |Psi_0|^2 and co-evolve the ensemble to `t_final`,
/// returning the final wave function and ensemble. Convenience wrapper
/// shared by the scenario suite.
pub fn evolve_equilibrium_ensemble(
    psi0: &WaveFunction,
    h: &Hamiltonian,
    cfg: &PropagatorConfig,
    m: usize,
    t_final: f64,
    seed: u64,
) -> Result<(WaveFunction, EnsembleState)> {
    let rho0 = psi0.density().normalize()?;
    let set = sample(&rho0, m, seed)?;
    let mut ens = EnsembleState::new(set.points, psi0.time, seed);
    let prop = Propagator::new(h.clone(), cfg.clone())?;
    let reg = Regularization::default_for(&psi0.grid, cfg.dt);
    let psi_t = co_evolve(&prop, psi0, &mut ens, t_final, reg, 1.0, |_, _| {})?;
    Ok((psi_t, ens))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::analytic::FreeGaussian;
    use crate::grid::{AxisSpec, Grid};
    use crate::guidance::{probability_current, velocity_field};
    use crate::propagator::Propagator as Prop;
    use crate::states;
    use crate::subsystem::product_compose;

    fn grid1(points: usize, min: f64, max: f64) -> Arc<Grid> {
        Arc::new(crate::grid::Grid::new(vec![AxisSpec::periodic(points, min, max)]).unwrap())
    }

    #[test]
    fn equivariance_free_gaussian_passes() {
        let g = grid1(512, -30.0, 30.0);
        let oracle = FreeGaussian { sigma0: 1.0, x0: 0.0, k0: 0.0, mass: 1.0, hbar: 1.0 };
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let cfg = PropagatorConfig::split(0.01);
        let t = oracle.time_for_spread(2.0);
        let (rep, psi_t, _) =
            equivariance_check(&states::gaussian_packet(g, 1.0, 0.0, 0.0).unwrap(), &h, &cfg,
                4000, t, 1.0, CandidateDensity::Psi2, 0.01, 21)
                .unwrap();
        assert!(rep.passed, "D = {} > {}", rep.statistic, rep.threshold);
        assert!((psi_t.time - t).abs() < 1e-9);
    }

    #[test]
    fn equivariance_wrong_scale_fails() {
        let g = grid1(512, -30.0, 30.0);
        let oracle = FreeGaussian { sigma0: 1.0, x0: 0.0, k0: 0.0, mass: 1.0, hbar: 1.0 };
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let cfg = PropagatorConfig::split(0.01);
        let t = oracle.time_for_spread(2.0);
        let (rep, _, _) =
            equivariance_check(&states::gaussian_packet(g, 1.0, 0.0, 0.0).unwrap(), &h, &cfg,
                4000, t, 2.0, CandidateDensity::Psi2, 0.01, 22)
                .unwrap();
        assert!(!rep.passed, "doubled velocity should break equivariance");
    }

    #[test]
    fn psi4_not_equivariant_for_superposition() {
        // A pure Gaussian's flow is linear and happens to transport |psi|^4
        // onto |psi_t|^4; a two-packet superposition developing interference
        // has a nonlinear flow, so the |psi|^4 candidate must fail there.
        let g = grid1(1024, -32.0, 32.0);
        let psi0 = states::two_packet_superposition(g.clone(), 1.0, 4.0, 0.0, 1.0, 1.0).unwrap();
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let cfg = PropagatorConfig::split(0.005);
        let (rep, _, _) = equivariance_check(
            &psi0, &h, &cfg, 4000, 3.0, 1.0, CandidateDensity::Psi4, 0.01, 23,
        )
        .unwrap();
        assert!(!rep.passed, "|psi|^4 should not be equivariant, D = {}", rep.statistic);
        // sanity: the same flow transports |psi|^2 correctly
        let (rep2, _, _) = equivariance_check(
            &psi0, &h, &cfg, 4000, 3.0, 1.0, CandidateDensity::Psi2, 0.01, 23,
        )
        .unwrap();
        assert!(rep2.passed, "D = {} > {}", rep2.statistic, rep2.threshold);
    }

    #[test]
    fn conditional_probability_product_state() {
        let g = Arc::new(
            crate::grid::Grid::new(vec![
                AxisSpec::periodic(128, -8.0, 8.0),
                AxisSpec::periodic(128, -8.0, 8.0),
            ])
            .unwrap(),
        );
        let g1 = Arc::new(g.subgrid(&[0]).unwrap());
        let psi_x = states::gaussian_packet(g1.clone(), 1.0, 0.5, 0.0).unwrap();
        let phi_y = states::gaussian_packet(g1, 1.5, -0.5, 0.0).unwrap();
        let full = product_compose(g, &[(psi_x, vec![0]), (phi_y, vec![1])]).unwrap();
        // time-0 sanity: sample |Psi|^2 and condition immediately
        let rho = full.density().normalize().unwrap();
        let set = sample(&rho, 10_000, 31).unwrap();
        let ens = EnsembleState::new(set.points, 0.0, 31);
        let split = SubsystemSplit::new(vec![0], vec![1], 2).unwrap();
        let check = conditional_probability_check(&full, &split, &ens, 16, 50, 0.01).unwrap();
        assert!(check.pooled.passed, "pooled D = {}", check.pooled.statistic);
        assert!(check.coverage > 0.9, "coverage {}", check.coverage);
        let failed = check.per_bin.iter().filter(|b| !b.report.passed).count();
        // with alpha = 0.01 over ~10 bins, more than 2 failures is suspect
        assert!(failed <= 2, "{failed} of {} bins failed", check.per_bin.len());
    }

    #[test]
    fn conditional_probability_two_branch_state() {
        let g = Arc::new(
            crate::grid::Grid::new(vec![
                AxisSpec::periodic(128, -16.0, 16.0),
                AxisSpec::periodic(128, -16.0, 16.0),
            ])
            .unwrap(),
        );
        let g1 = Arc::new(g.subgrid(&[0]).unwrap());
        let psi1 = states::gaussian_packet(g1.clone(), 1.0, -3.0, 0.0).unwrap();
        let psi2 = states::gaussian_packet(g1.clone(), 1.0, 3.0, 0.0).unwrap();
        let phi1 = states::gaussian_packet(g1.clone(), 1.0, -8.0, 0.0).unwrap();
        let phi2 = states::gaussian_packet(g1, 1.0, 8.0, 0.0).unwrap();
        let nearest = |w: &WaveFunction, x: f64| {
            let ax = w.grid.axis(0);
            let idx = (ax.frac_index(x).round() as usize).min(ax.points - 1);
            w.amplitudes[idx]
        };
        let full = WaveFunction::from_fn(g, 0.0, |q| {
            0.8 * nearest(&psi1, q[0]) * nearest(&phi1, q[1])
                + 0.6 * nearest(&psi2, q[0]) * nearest(&phi2, q[1])
        })
        .normalize()
        .unwrap();
        let rho = full.density().normalize().unwrap();
        let set = sample(&rho, 10_000, 33).unwrap();
        let ens = EnsembleState::new(set.points, 0.0, 33);
        let split = SubsystemSplit::new(vec![0], vec![1], 2).unwrap();
        let check = conditional_probability_check(&full, &split, &ens, 16, 50, 0.01).unwrap();
        assert!(check.pooled.passed, "pooled D = {}", check.pooled.statistic);
        // branch-1 bins (negative y) should be testing against psi1: check
        // via the bin centers that both branches are represented
        assert!(check.per_bin.iter().any(|b| b.y_center[0] < 0.0));
        assert!(check.per_bin.iter().any(|b| b.y_center[0] > 0.0));
        let failed = check.per_bin.iter().filter(|b| !b.report.passed).count();
        assert!(failed <= 2, "{failed} of {} bins failed", check.per_bin.len());
    }

    #[test]
    fn continuity_equation_residual() {
        // d|psi|^2/dt + dJ/dx -> 0: centered differences in both time and
        // space on three consecutive snapshots
        let g = grid1(512, -16.0, 16.0);
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let dt = 0.002;
        let prop = Prop::new(h.clone(), PropagatorConfig::split(dt)).unwrap();
        let psi0 = states::gaussian_packet(g.clone(), 1.0, 0.0, 1.0).unwrap();
        let p1 = prop.step(&psi0).unwrap();
        let p2 = prop.step(&p1).unwrap();
        let rho0 = psi0.density();
        let rho2 = p2.density();
        let j = probability_current(&p1, &h);
        let dx = g.axis(0).dx();
        let n = g.len();
        let mut max_res = 0.0f64;
        for i in 0..n {
            let drho_dt = (rho2.values[i] - rho0.values[i]) / (2.0 * dt);
            let dj_dx =
                (j.components[0][(i + 1) % n] - j.components[0][(i + n - 1) % n]) / (2.0 * dx);
            max_res = max_res.max((drho_dt + dj_dx).abs());
        }
        assert!(max_res < 1e-3, "continuity residual {max_res}");
    }

    #[test]
    fn conditional_independence_within_bin() {
        // inside one y-bin of a product state, corr(f(X), g(Y)) ~ 0
        let g = Arc::new(
            crate::grid::Grid::new(vec![
                AxisSpec::periodic(128, -8.0, 8.0),
                AxisSpec::periodic(128, -8.0, 8.0),
            ])
            .unwrap(),
        );
        let g1 = Arc::new(g.subgrid(&[0]).unwrap());
        let psi_x = states::gaussian_packet(g1.clone(), 1.0, 0.0, 0.0).unwrap();
        let phi_y = states::gaussian_packet(g1, 1.5, 0.0, 0.0).unwrap();
        let full = product_compose(g, &[(psi_x, vec![0]), (phi_y, vec![1])]).unwrap();
        let rho = full.density().normalize().unwrap();
        let set = sample(&rho, 20_000, 37).unwrap();
        // central y-bin: |y| < 0.5
        let members: Vec<&Configuration> =
            set.points.iter().filter(|c| c.coords[1].abs() < 0.5).collect();
        let nb = members.len();
        assert!(nb > 1000);
        let f = |x: f64| (x > 0.0) as i32 as f64;
        let gfun = |y: f64| y; // bounded on the bin
        let mf = members.iter().map(|c| f(c.coords[0])).sum::<f64>() / nb as f64;
        let mg = members.iter().map(|c| gfun(c.coords[1])).sum::<f64>() / nb as f64;
        let mut num = 0.0;
        let mut vf = 0.0;
        let mut vg = 0.0;
        for c in &members {
            let a = f(c.coords[0]) - mf;
            let b = gfun(c.coords[1]) - mg;
            num += a * b;
            vf += a * a;
            vg += b * b;
        }
        let corr = num / (vf.sqrt() * vg.sqrt());
        assert!(corr.abs() < 4.0 / (nb as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn velocity_scale_zero_freezes_flow() {
        let g = grid1(256, -16.0, 16.0);
        let psi0 = states::gaussian_packet(g.clone(), 1.0, 0.0, 0.0).unwrap();
        let h = Hamiltonian::free(g.clone(), vec![1.0]).unwrap();
        let cfg = PropagatorConfig::split(0.01);
        let rho0 = psi0.density().normalize().unwrap();
        let set = sample(&rho0, 100, 41).unwrap();
        let before: Vec<f64> = set.points.iter().map(|c| c.coords[0]).collect();
        let mut ens = EnsembleState::new(set.points, 0.0, 41);
        let prop = Prop::new(h.clone(), cfg.clone()).unwrap();
        let reg = Regularization::default_for(&g, cfg.dt);
        co_evolve(&prop, &psi0, &mut ens, 0.5, reg, 0.0, |_, _| {}).unwrap();
        for (c, b) in ens.configs.iter().zip(&before) {
            assert_eq!(c.coords[0], *b);
        }
        // while the real field would have moved them
        let v = velocity_field(&prop.evolve(&psi0, 0.5).unwrap().pop().unwrap(), &h, reg);
        assert!(v.components[0].iter().any(|&x| x.abs() > 1e-3));
    }
}
