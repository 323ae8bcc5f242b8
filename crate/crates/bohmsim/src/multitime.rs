//! Sequential experiments on subsystems selected by environment-measurable
//! rules: a rule may consult the time and the environment coordinates of a
//! run, never the system coordinates it is about to examine. Outcomes of
//! earlier rules are written into register axes by a windowed coupling so
//! that later rules can lawfully depend on them, and the harness checks
//! that the recorded outcome streams are independent with the expected
//! marginals, including under any selection that reads only the
//! environment.

use std::sync::Arc;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{BsimError, Result};
use crate::grid::Configuration;
use crate::guidance::{co_evolve, EnsembleState, Regularization};
use crate::hamiltonian::{Hamiltonian, Potential};
use crate::propagator::{Propagator, PropagatorConfig};
use crate::stats::{ks_critical, ks_statistic, run_test, sample, GridCdf, SampleSet, TestReport, TestSpec};
use crate::subsystem::{conditional_wavefunction, SubsystemSplit};
use crate::wavefunction::WaveFunction;

/// When a rule examines its subsystem. Time is discrete: a trigger fires
/// at the first propagation step whose state satisfies it.
#[derive(Clone)]
pub enum Trigger {
    /// Fires at the first step with t >= t0 (a clock is trivially an
    /// environment variable).
    AtTime(f64),
    /// Fires once the given environment axis coordinate of the run
    /// satisfies |y| >= threshold.
    EnvAbsAbove { axis: usize, threshold: f64 },
}

/// One experiment: when to look (a function of the environment only),
/// where to look, and what number to write down.
pub struct RandomSystemRule {
    pub label: String,
    pub trigger: Trigger,
    /// Axes of the examined subsystem. Single axis supported.
    pub target_axes: Vec<usize>,
    /// Outcome Z = f(X) of the examined coordinates.
    pub outcome: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// Expected conditional wave function of the target at t = 0; evolved
    /// alongside the run and compared at trigger time.
    pub prepared: Option<WaveFunction>,
}

/// Windowed von Neumann coupling writing A(source coords) into a register
/// axis: V = lambda * A(x) * r during the window.
pub struct RecordCoupling {
    pub source_axes: Vec<usize>,
    pub a: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub register_axis: usize,
    pub lambda: f64,
    pub window: (f64, f64),
}

pub struct ExperimentPlan {
    pub rules: Vec<RandomSystemRule>,
    pub couplings: Vec<RecordCoupling>,
    pub t_final: f64,
}

/// One fired rule on one run.
#[derive(Debug, Clone)]
pub struct OutcomeRecord {
    pub run_id: usize,
    pub label: String,
    pub trigger_time: f64,
    pub x: Vec<f64>,
    pub z: f64,
    /// Probability integral transform of x under the target marginal at
    /// trigger time; uniform on [0,1] in quantum equilibrium.
    pub pit: f64,
    pub branch_id: usize,
}

pub struct PlanOutcome {
    pub records: Vec<OutcomeRecord>,
    /// Runs flagged by the preparation fidelity check, excluded from
    /// analysis but counted.
    pub excluded_runs: Vec<usize>,
    pub runs: usize,
    pub psi_final: WaveFunction,
    pub ensemble: EnsembleState,
}

impl PlanOutcome {
    /// Records of complete, unflagged runs grouped by run, one record per
    /// rule in plan order.
    pub fn complete_runs(&self, n_rules: usize) -> Vec<Vec<&OutcomeRecord>> {
        let mut per_run: Vec<Vec<&OutcomeRecord>> = vec![Vec::new(); self.runs];
        for r in &self.records {
            per_run[r.run_id].push(r);
        }
        per_run
            .into_iter()
            .enumerate()
            .filter(|(id, recs)| recs.len() == n_rules && !self.excluded_runs.contains(id))
            .map(|(_, recs)| recs)
            .collect()
    }
}

const PREPARATION_FIDELITY: f64 = 1.0 - 1e-4;

fn trigger_fires(trig: &Trigger, time: f64, cfg: &Configuration) -> bool {
    match *trig {
        Trigger::AtTime(t0) => time + 1e-9 >= t0,
        Trigger::EnvAbsAbove { axis, threshold } => cfg.coords[axis].abs() >= threshold,
    }
}

/// Evolve one universe wave function with the plan's record couplings and
/// M independently sampled initial configurations; fire each rule at most
/// once per run, in plan order.
pub fn run_plan(
    psi0: &WaveFunction,
    h_base: &Hamiltonian,
    cfg: &PropagatorConfig,
    plan: &ExperimentPlan,
    m_runs: usize,
    seed: u64,
) -> Result<PlanOutcome> {
    let grid = h_base.grid.clone();
    let d = grid.ndim();
    for rule in &plan.rules {
        if rule.target_axes.len() != 1 || rule.target_axes[0] >= d {
            return Err(BsimError::Config(format!(
                "rule {} must target exactly one valid axis",
                rule.label
            )));
        }
        if let Trigger::EnvAbsAbove { axis, .. } = rule.trigger {
            if axis >= d || rule.target_axes.contains(&axis) {
                return Err(BsimError::Config(format!(
                    "rule {} trigger must read an environment axis",
                    rule.label
                )));
            }
        }
    }

    // the record couplings become one time-dependent potential
    let base = match &h_base.potential {
        Potential::Zero => None,
        Potential::Static(v) => Some(v.clone()),
        Potential::TimeDependent(_) => {
            return Err(BsimError::Config("run_plan requires a static background potential".into()))
        }
    };
    let coupling_fields: Vec<(Arc<Vec<f64>>, f64, f64)> = plan
        .couplings
        .iter()
        .map(|c| {
            let mut v = vec![0.0f64; grid.len()];
            for (flat, w) in v.iter_mut().enumerate() {
                let q = grid.coords(flat);
                let x: Vec<f64> = c.source_axes.iter().map(|&a| q.coords[a]).collect();
                *w = c.lambda * (c.a)(&x) * q.coords[c.register_axis];
            }
            (Arc::new(v), c.window.0, c.window.1)
        })
        .collect();
    let ncells = grid.len();
    let fields = coupling_fields.clone();
    let pot = Potential::TimeDependent(Arc::new(move |t: f64| {
        let mut v = match &base {
            Some(b) => b.as_ref().clone(),
            None => vec![0.0f64; ncells],
        };
        for (field, on, off) in &fields {
            if t >= *on && t <= *off {
                for (x, w) in v.iter_mut().zip(field.iter()) {
                    *x += w;
                }
            }
        }
        v
    }));
    let h = Hamiltonian::new(grid.clone(), h_base.masses.clone(), pot, h_base.hbar)?;

    // prepared references, each evolved on its own restricted Hamiltonian
    let mut prepared: Vec<Option<(WaveFunction, Propagator)>> = plan
        .rules
        .iter()
        .map(|rule| {
            rule.prepared
                .as_ref()
                .map(|p| -> Result<(WaveFunction, Propagator)> {
                    let h1 = h_base.restrict(&rule.target_axes)?;
                    Ok((p.clone(), Propagator::new(h1, cfg.clone())?))
                })
                .transpose()
        })
        .collect::<Result<_>>()?;
    let splits: Vec<SubsystemSplit> = plan
        .rules
        .iter()
        .map(|rule| {
            let y: Vec<usize> = (0..d).filter(|a| !rule.target_axes.contains(a)).collect();
            SubsystemSplit::new(rule.target_axes.clone(), y, d)
        })
        .collect::<Result<_>>()?;

    let rho0 = psi0.density().normalize()?;
    let set = sample(&rho0, m_runs, seed)?;
    let mut ens = EnsembleState::new(set.points, psi0.time, seed);

    let mut next_rule = vec![0usize; m_runs];
    let mut excluded: Vec<usize> = Vec::new();
    let mut records: Vec<OutcomeRecord> = Vec::new();
    let mut closure_err: Option<BsimError> = None;

    let mut process = |psi: &WaveFunction,
                       ens: &EnsembleState,
                       next_rule: &mut Vec<usize>,
                       excluded: &mut Vec<usize>,
                       records: &mut Vec<OutcomeRecord>|
     -> Result<()> {
        // advance the prepared references to the snapshot time
        for slot in prepared.iter_mut().flatten() {
            let gap = psi.time - slot.0.time;
            if gap > 1e-12 {
                slot.0 = slot.1.step_dt(&slot.0, gap)?;
            }
        }
        let mut cdf_cache: Vec<Option<GridCdf>> =
            (0..plan.rules.len()).map(|_| None).collect();
        for run in 0..ens.configs.len() {
            if excluded.contains(&run) {
                continue;
            }
            while next_rule[run] < plan.rules.len() {
                let r = next_rule[run];
                let rule = &plan.rules[r];
                if !trigger_fires(&rule.trigger, psi.time, &ens.configs[run]) {
                    break;
                }
                next_rule[run] += 1;
                let y: Vec<f64> = splits[r]
                    .y_axes
                    .iter()
                    .map(|&a| ens.configs[run].coords[a])
                    .collect();
                if let Some((p_now, _)) = &prepared[r] {
                    let cond = conditional_wavefunction(psi, &splits[r], &y)?;
                    if cond.fidelity(p_now)? < PREPARATION_FIDELITY {
                        excluded.push(run);
                        break;
                    }
                }
                if cdf_cache[r].is_none() {
                    let rho = psi.density().marginal(&rule.target_axes)?.normalize()?;
                    cdf_cache[r] = Some(GridCdf::new(&rho)?);
                }
                let x: Vec<f64> = rule
                    .target_axes
                    .iter()
                    .map(|&a| ens.configs[run].coords[a])
                    .collect();
                let z = (rule.outcome)(&x);
                records.push(OutcomeRecord {
                    run_id: run,
                    label: rule.label.clone(),
                    trigger_time: psi.time,
                    pit: cdf_cache[r].as_ref().unwrap().eval(x[0]),
                    branch_id: (z > 0.0) as usize,
                    x,
                    z,
                });
            }
        }
        Ok(())
    };

    process(psi0, &ens, &mut next_rule, &mut excluded, &mut records)?;
    let prop = Propagator::new(h, cfg.clone())?;
    let reg = Regularization::default_for(&grid, cfg.dt);
    let psi_final = co_evolve(&prop, psi0, &mut ens, plan.t_final, reg, 1.0, |psi, ens| {
        if closure_err.is_none() {
            if let Err(e) = process(psi, ens, &mut next_rule, &mut excluded, &mut records) {
                closure_err = Some(e);
            }
        }
    })?;
    if let Some(e) = closure_err {
        return Err(e);
    }
    excluded.sort_unstable();
    Ok(PlanOutcome { records, excluded_runs: excluded, runs: m_runs, psi_final, ensemble: ens })
}

pub const MIN_RUNS: usize = 500;

#[derive(Debug)]
pub struct IndependenceReport {
    /// One per rule: KS of the probability integral transforms against
    /// the uniform law, pooled over trigger times.
    pub marginals: Vec<TestReport>,
    /// Max |Pearson correlation| over rule pairs, of both the outcomes Z
    /// and the transforms.
    pub max_corr: f64,
    pub corr_threshold: f64,
    /// Chi-square independence test on quartile product bins of the first
    /// rule pair's transforms.
    pub joint: TestReport,
    pub runs: usize,
    pub passed: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn uniform_ks_report(us: &[f64], alpha: f64) -> TestReport {
    let mut v = us.to_vec();
    let d = ks_statistic(&mut v, |u| u.clamp(0.0, 1.0));
    let thr = ks_critical(alpha) / (us.len() as f64).sqrt();
    TestReport { statistic: d, threshold: thr, passed: d <= thr, delta: alpha, sample_size: us.len() }
}

/// Marginal, pairwise-correlation and joint-independence checks over the
/// complete runs of a plan.
pub fn independence_report(po: &PlanOutcome, n_rules: usize, alpha: f64) -> Result<IndependenceReport> {
    if n_rules < 2 {
        return Err(BsimError::Config("independence needs at least two rules".into()));
    }
    let complete = po.complete_runs(n_rules);
    if complete.len() < MIN_RUNS {
        return Err(BsimError::InsufficientRuns { got: complete.len(), need: MIN_RUNS });
    }
    let n = complete.len();
    let cols_z: Vec<Vec<f64>> =
        (0..n_rules).map(|r| complete.iter().map(|run| run[r].z).collect()).collect();
    let cols_u: Vec<Vec<f64>> =
        (0..n_rules).map(|r| complete.iter().map(|run| run[r].pit).collect()).collect();
    let marginals: Vec<TestReport> = cols_u.iter().map(|u| uniform_ks_report(u, alpha)).collect();
    let mut max_corr = 0.0f64;
    for i in 0..n_rules {
        for j in i + 1..n_rules {
            max_corr = max_corr.max(pearson(&cols_z[i], &cols_z[j]).abs());
            max_corr = max_corr.max(pearson(&cols_u[i], &cols_u[j]).abs());
        }
    }
    let corr_threshold = 4.0 / (n as f64).sqrt();
    // quartile product bins of (u_0, u_1)
    let k = 4usize;
    let mut counts = vec![0usize; k * k];
    for run in 0..n {
        let bi = ((cols_u[0][run] * k as f64) as usize).min(k - 1);
        let bj = ((cols_u[1][run] * k as f64) as usize).min(k - 1);
        counts[bi * k + bj] += 1;
    }
    let rows: Vec<f64> = (0..k).map(|i| (0..k).map(|j| counts[i * k + j] as f64).sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| counts[i * k + j] as f64).sum()).collect();
    let mut chi2 = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let e = rows[i] * cols[j] / n as f64;
            if e > 0.0 {
                let diff = counts[i * k + j] as f64 - e;
                chi2 += diff * diff / e;
            }
        }
    }
    let dof = ((k - 1) * (k - 1)) as f64;
    let thr = ChiSquared::new(dof)
        .map_err(|e| BsimError::Config(format!("chi-square setup: {e}")))?
        .inverse_cdf(1.0 - alpha);
    let joint =
        TestReport { statistic: chi2, threshold: thr, passed: chi2 <= thr, delta: alpha, sample_size: n };
    let passed = marginals.iter().all(|m| m.passed) && max_corr < corr_threshold && joint.passed;
    Ok(IndependenceReport { marginals, max_corr, corr_threshold, joint, runs: n, passed })
}

/// Re-analyze one rule's marginal over the runs kept by `keep`, which sees
/// the complete record list of a run. Conditioning on an event that was
/// recorded before every trigger leaves the marginals intact; conditioning
/// on later configuration information does not.
pub fn filtered_marginal_report(
    po: &PlanOutcome,
    n_rules: usize,
    rule_index: usize,
    keep: &dyn Fn(&[&OutcomeRecord]) -> bool,
    alpha: f64,
) -> Result<TestReport> {
    let complete = po.complete_runs(n_rules);
    let us: Vec<f64> = complete
        .iter()
        .filter(|run| keep(run))
        .map(|run| run[rule_index].pit)
        .collect();
    if us.is_empty() {
        return Err(BsimError::EmptySelection);
    }
    Ok(uniform_ks_report(&us, alpha))
}

/// Named selectors reading only environment coordinates; all of them must
/// leave the selected X-statistics at |psi|^2.
pub fn selector_registry() -> Vec<(&'static str, Arc<dyn Fn(&[f64]) -> bool + Send + Sync>)> {
    fn mix(bits: u64) -> u64 {
        // splitmix64 finalizer
        let mut z = bits.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    vec![
        ("all", Arc::new(|_: &[f64]| true)),
        ("y_positive", Arc::new(|y: &[f64]| y[0] > 0.0)),
        ("y_hash_half", Arc::new(|y: &[f64]| {
            let mut h = 0u64;
            for v in y {
                h = mix(h ^ v.to_bits());
            }
            h & 1 == 0
        })),
        ("y_band", Arc::new(|y: &[f64]| y[0].abs() < 1.0)),
        ("y_bin_parity", Arc::new(|y: &[f64]| (y[0].floor() as i64).rem_euclid(2) == 0)),
    ]
}

/// KS of the selected members' X against the X-marginal of |psi|^2. The
/// selector receives only the environment coordinates of each member.
pub fn selection_invariance_test(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    ens: &EnsembleState,
    selector: &dyn Fn(&[f64]) -> bool,
    alpha: f64,
) -> Result<TestReport> {
    selection_test_unchecked(
        psi,
        split,
        ens,
        &|_x: &[f64], y: &[f64]| selector(y),
        alpha,
    )
}

/// Adversarial control: a selector that also sees X. Exists to verify the
/// test has power; everything else must go through
/// `selection_invariance_test`.
pub fn selection_test_unchecked(
    psi: &WaveFunction,
    split: &SubsystemSplit,
    ens: &EnsembleState,
    selector: &dyn Fn(&[f64], &[f64]) -> bool,
    alpha: f64,
) -> Result<TestReport> {
    if split.x_axes.len() != 1 {
        return Err(BsimError::InvalidTestSpec("selection test needs a 1D x-subsystem".into()));
    }
    let selected: Vec<Configuration> = ens
        .configs
        .iter()
        .filter_map(|c| {
            let x: Vec<f64> = split.x_axes.iter().map(|&a| c.coords[a]).collect();
            let y: Vec<f64> = split.y_axes.iter().map(|&a| c.coords[a]).collect();
            selector(&x, &y).then(|| Configuration::new(x))
        })
        .collect();
    if selected.is_empty() {
        return Err(BsimError::EmptySelection);
    }
    let rho = psi.density().marginal(&split.x_axes)?.normalize()?;
    let set = SampleSet { points: selected, time: ens.time, provenance: "selection".into() };
    run_test(&set, &rho, &TestSpec::ks(alpha))
}

/// The reference two-rule plan: identical superpositions on axes 0 and 1,
/// one register on axis 2. Rule 1 fires on the clock before the record
/// window; the window writes sign(x_0) into the register; rule 2 fires
/// when the run's register has moved past the readout threshold.
pub struct TwoExperimentSetup {
    pub psi0: WaveFunction,
    pub h: Hamiltonian,
    pub cfg: PropagatorConfig,
    pub plan: ExperimentPlan,
}

pub fn two_experiment_plan() -> Result<TwoExperimentSetup> {
    use crate::grid::{AxisSpec, Grid};
    let grid = Arc::new(Grid::new(vec![
        AxisSpec::periodic(64, -12.0, 12.0),
        AxisSpec::periodic(64, -12.0, 12.0),
        AxisSpec::periodic(64, -12.0, 12.0),
    ])?);
    let g1 = Arc::new(grid.subgrid(&[0])?);
    let packet = |c1: f64, c2: f64| -> Result<WaveFunction> {
        WaveFunction::from_fn(g1.clone(), 0.0, move |q| {
            let s = 0.5f64;
            let a = q[0] + 3.5;
            let b = q[0] - 3.5;
            num_complex::Complex64::new(
                c1 * (-a * a / (4.0 * s * s)).exp() + c2 * (-b * b / (4.0 * s * s)).exp(),
                0.0,
            )
        })
        .normalize()
    };
    let sys = packet(0.8, 0.6)?;
    let reg0 = crate::states::gaussian_packet(Arc::new(grid.subgrid(&[2])?), 0.6, 0.0, 0.0)?;
    let psi0 = crate::subsystem::product_compose(
        grid.clone(),
        &[(sys.clone(), vec![0]), (sys.clone(), vec![1]), (reg0, vec![2])],
    )?;
    // the record kick momentum lambda*tau = 4 must stay well inside the
    // register axis Nyquist momentum pi/dx ~ 8.4
    let h = Hamiltonian::free(grid, vec![5.0, 5.0, 2.5])?;
    let cfg = PropagatorConfig::split(0.005);
    let sign_outcome: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> =
        Arc::new(|x: &[f64]| if x[0] > 0.0 { 1.0 } else { -1.0 });
    let plan = ExperimentPlan {
        rules: vec![
            RandomSystemRule {
                label: "first".into(),
                trigger: Trigger::AtTime(0.4),
                target_axes: vec![0],
                outcome: sign_outcome.clone(),
                prepared: Some(sys.clone()),
            },
            RandomSystemRule {
                label: "second".into(),
                trigger: Trigger::EnvAbsAbove { axis: 2, threshold: 1.5 },
                target_axes: vec![1],
                outcome: sign_outcome,
                prepared: Some(sys),
            },
        ],
        couplings: vec![RecordCoupling {
            source_axes: vec![0],
            a: Arc::new(|x: &[f64]| (x[0] / 0.4).tanh()),
            register_axis: 2,
            lambda: 8.0,
            window: (0.5, 1.0),
        }],
        t_final: 3.0,
    };
    Ok(TwoExperimentSetup { psi0, h, cfg, plan })
}
