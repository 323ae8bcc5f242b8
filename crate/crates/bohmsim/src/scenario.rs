//! Named scenario registry behind the command-line runner: each scenario
//! builds its states and Hamiltonian from a declarative config, runs its
//! declared statistical tests, and emits deterministic CSV artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::FreeGaussian;
use crate::equilibrium::{self, CandidateDensity};
use crate::error::{BsimError, Result};
use crate::grid::{AxisSpec, Grid};
use crate::guidance::{co_evolve, EnsembleState, Regularization};
use crate::hamiltonian::{Hamiltonian, Potential};
use crate::measurement::{self, TwoSlitGeometry};
use crate::multitime;
use crate::propagator::{Method, Propagator, PropagatorConfig};
use crate::stats::{run_test, sample, SampleSet, TestReport, TestSpec};
use crate::subsystem::SubsystemSplit;
use crate::wavefunction::{Density, WaveFunction};

/// One line of report.csv.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub scenario: String,
    pub test: String,
    pub report: TestReport,
}

pub struct ScenarioOutcome {
    pub rows: Vec<ReportRow>,
    /// Extra artifacts: (file name, contents).
    pub files: Vec<(String, Vec<u8>)>,
    pub final_state: WaveFunction,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub scenario: String,
    pub seed: u64,
    pub samples: usize,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub t_final: Option<f64>,
    #[serde(default)]
    pub grid: Option<GridStanza>,
    #[serde(default)]
    pub hamiltonian: Option<HamiltonianStanza>,
    #[serde(default)]
    pub state: Option<StateStanza>,
    #[serde(default)]
    pub propagator: Option<PropagatorStanza>,
    #[serde(default)]
    pub thresholds: Option<ThresholdStanza>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridStanza {
    pub points: Vec<usize>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub periodic: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianStanza {
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(default = "one")]
    pub omega: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateStanza {
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub k0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagatorStanza {
    #[serde(default = "split_name")]
    pub method: String,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdStanza {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}
fn split_name() -> String {
    "split".into()
}
fn default_dt() -> f64 {
    0.005
}
fn default_alpha() -> f64 {
    0.01
}

impl Default for HamiltonianStanza {
    fn default() -> Self {
        HamiltonianStanza { mass: 1.0, hbar: 1.0, omega: 1.0 }
    }
}
impl Default for StateStanza {
    fn default() -> Self {
        StateStanza { sigma: 1.0, x0: 0.0, k0: 0.0 }
    }
}
impl Default for PropagatorStanza {
    fn default() -> Self {
        PropagatorStanza { method: split_name(), dt: default_dt() }
    }
}
impl Default for ThresholdStanza {
    fn default() -> Self {
        ThresholdStanza { alpha: default_alpha() }
    }
}

/// The config with every default filled in; echoed into the output
/// directory so each run is self-describing.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub scenario: String,
    pub seed: u64,
    pub samples: usize,
    pub output: String,
    pub t_final: f64,
    pub grid: Option<GridStanza>,
    pub hamiltonian: HamiltonianStanza,
    pub state: StateStanza,
    pub propagator: PropagatorStanza,
    pub thresholds: ThresholdStanza,
    /// Scenario-internal numeric parameters, echoed for reproducibility.
    pub parameters: BTreeMap<String, f64>,
    /// Directory of the config file, for resolving plan references.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn resolve_config(raw: RawConfig, base_dir: &Path, output_override: Option<&Path>) -> Result<ResolvedConfig> {
    if raw.samples == 0 {
        return Err(BsimError::Config("samples must be >= 1".into()));
    }
    let output = match output_override {
        Some(p) => p.to_string_lossy().into_owned(),
        None => raw
            .output
            .ok_or_else(|| BsimError::Config("missing field `output` (or pass --output)".into()))?,
    };
    if let Some(g) = &raw.grid {
        let d = g.points.len();
        if g.min.len() != d || g.max.len() != d || g.periodic.len() != d {
            return Err(BsimError::Config(
                "grid: points, min, max and periodic must have equal length".into(),
            ));
        }
    }
    Ok(ResolvedConfig {
        scenario: raw.scenario,
        seed: raw.seed,
        samples: raw.samples,
        output,
        t_final: raw.t_final.unwrap_or(0.0),
        grid: raw.grid,
        hamiltonian: raw.hamiltonian.unwrap_or_default(),
        state: raw.state.unwrap_or_default(),
        propagator: raw.propagator.unwrap_or_default(),
        thresholds: raw.thresholds.unwrap_or_default(),
        parameters: BTreeMap::new(),
        base_dir: base_dir.to_path_buf(),
    })
}

impl ResolvedConfig {
    fn grid(&self) -> Result<Arc<Grid>> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| BsimError::Config("missing `grid` stanza".into()))?;
        let axes = (0..g.points.len())
            .map(|i| {
                if g.periodic[i] {
                    AxisSpec::periodic(g.points[i], g.min[i], g.max[i])
                } else {
                    AxisSpec::boxed(g.points[i], g.min[i], g.max[i])
                }
            })
            .collect();
        Ok(Arc::new(Grid::new(axes)?))
    }

    fn propagator_config(&self) -> Result<PropagatorConfig> {
        let method = match self.propagator.method.as_str() {
            "split" => Method::SplitFourier,
            "crank_nicolson" => Method::CrankNicolson,
            other => return Err(BsimError::Config(format!("unknown propagator method `{other}`"))),
        };
        PropagatorConfig::new(method, self.propagator.dt, 1)
    }
}

fn fmt_f64(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

fn report_csv(rows: &[ReportRow], m: usize, seed: u64) -> Vec<u8> {
    let mut s = String::from("scenario,test,statistic,threshold,passed,delta,M,seed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.scenario,
            r.test,
            fmt_f64(r.report.statistic),
            fmt_f64(r.report.threshold),
            r.report.passed,
            fmt_f64(r.report.delta),
            m,
            seed
        );
    }
    s.into_bytes()
}

/// Run the named scenario and collect its reports and artifacts.
pub fn run_scenario(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    match cfg.scenario.clone().as_str() {
        "free_gaussian" => free_gaussian(cfg),
        "harmonic_coherent" => harmonic_coherent(cfg),
        "two_slit" => two_slit(cfg),
        "pointer_measurement" => pointer_measurement(cfg),
        "nonequilibrium_box" => nonequilibrium_box(cfg),
        "nonequilibrium_psi4" => nonequilibrium_psi4(cfg),
        other => {
            if let Some(plan) = other.strip_prefix("multitime_plan:") {
                multitime_plan(cfg, plan)
            } else {
                Err(BsimError::Config(format!("unknown scenario `{other}`")))
            }
        }
    }
}

fn free_gaussian(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    let grid = cfg.grid()?;
    if grid.ndim() != 1 {
        return Err(BsimError::Config("free_gaussian needs a 1D grid".into()));
    }
    let h = Hamiltonian::new(
        grid.clone(),
        vec![cfg.hamiltonian.mass],
        Potential::Zero,
        cfg.hamiltonian.hbar,
    )?;
    let psi0 = crate::states::gaussian_packet(grid, cfg.state.sigma, cfg.state.x0, cfg.state.k0)?;
    let oracle = FreeGaussian {
        sigma0: cfg.state.sigma,
        x0: cfg.state.x0,
        k0: cfg.state.k0,
        mass: cfg.hamiltonian.mass,
        hbar: cfg.hamiltonian.hbar,
    };
    if cfg.t_final <= 0.0 {
        cfg.t_final = oracle.time_for_spread(2.0);
    }
    cfg.parameters.insert("sigma_final_over_sigma0".into(), oracle.sigma(cfg.t_final) / cfg.state.sigma);
    let pcfg = cfg.propagator_config()?;
    let (report, psi_t, _ens) = equilibrium::equivariance_check(
        &psi0,
        &h,
        &pcfg,
        cfg.samples,
        cfg.t_final,
        1.0,
        CandidateDensity::Psi2,
        cfg.thresholds.alpha,
        cfg.seed,
    )?;
    let rows = vec![ReportRow {
        scenario: cfg.scenario.clone(),
        test: "equivariance_ks".into(),
        report,
    }];
    Ok(ScenarioOutcome { rows, files: Vec::new(), final_state: psi_t })
}

fn harmonic_coherent(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    let grid = cfg.grid()?;
    if grid.ndim() != 1 {
        return Err(BsimError::Config("harmonic_coherent needs a 1D grid".into()));
    }
    let (m, w, hbar) = (cfg.hamiltonian.mass, cfg.hamiltonian.omega, cfg.hamiltonian.hbar);
    let v: Vec<f64> = (0..grid.len())
        .map(|i| {
            let x = grid.axis(0).coord(i);
            0.5 * m * w * w * x * x
        })
        .collect();
    let h = Hamiltonian::new(grid.clone(), vec![m], Potential::Static(Arc::new(v)), hbar)?;
    let x0 = if cfg.state.x0 != 0.0 { cfg.state.x0 } else { 2.0 };
    let psi0 = crate::states::coherent_state(grid, m, w, hbar, x0)?;
    if cfg.t_final <= 0.0 {
        // half an oscillation period
        cfg.t_final = std::f64::consts::PI / w;
    }
    cfg.parameters.insert("displacement".into(), x0);
    let pcfg = cfg.propagator_config()?;
    let (report, psi_t, _ens) = equilibrium::equivariance_check(
        &psi0,
        &h,
        &pcfg,
        cfg.samples,
        cfg.t_final,
        1.0,
        CandidateDensity::Psi2,
        cfg.thresholds.alpha,
        cfg.seed,
    )?;
    let rows = vec![ReportRow {
        scenario: cfg.scenario.clone(),
        test: "equivariance_ks".into(),
        report,
    }];
    Ok(ScenarioOutcome { rows, files: Vec::new(), final_state: psi_t })
}

fn two_slit(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| BsimError::Config("missing `grid` stanza".into()))?
        .clone();
    if g.points.len() != 2 || !g.periodic.iter().all(|&p| p) {
        return Err(BsimError::Config("two_slit needs a 2D periodic grid".into()));
    }
    if g.min[0] + g.max[0] != 0.0 {
        return Err(BsimError::Config("two_slit transverse axis must be symmetric about 0".into()));
    }
    let geo = TwoSlitGeometry {
        transverse_points: g.points[0],
        transverse_half_width: g.max[0],
        forward_points: g.points[1],
        forward_min: g.min[1],
        forward_max: g.max[1],
        screen_time: if cfg.t_final > 0.0 { cfg.t_final } else { 3.0 },
        dt: cfg.propagator.dt,
        mass: cfg.hamiltonian.mass,
        ..Default::default()
    };
    cfg.t_final = geo.screen_time;
    cfg.parameters.insert("slit_separation".into(), geo.slit_separation);
    cfg.parameters.insert("packet_sigma".into(), geo.packet_sigma);
    cfg.parameters.insert("forward_sigma".into(), geo.forward_sigma);
    cfg.parameters.insert("forward_k".into(), geo.forward_k);
    cfg.parameters.insert("source_z".into(), geo.source_z);
    let n_record = 200usize.min(cfg.samples);
    cfg.parameters.insert("recorded_trajectories".into(), n_record as f64);
    let out = measurement::two_slit_scenario(&geo, cfg.samples, n_record, cfg.seed)?;
    let xs: Vec<crate::grid::Configuration> = out
        .ensemble
        .configs
        .iter()
        .map(|c| crate::grid::Configuration::new(vec![c.coords[0]]))
        .collect();
    let set = SampleSet { points: xs, time: out.ensemble.time, provenance: "screen".into() };
    let ks = run_test(&set, &out.screen_marginal, &TestSpec::ks(cfg.thresholds.alpha))?;
    let crossings = TestReport {
        statistic: out.crossings as f64,
        threshold: 0.0,
        passed: out.crossings == 0,
        delta: 0.0,
        sample_size: n_record,
    };
    // histogram.csv: bin_center, count, expected
    let mut hist = String::from("bin_center,count,expected\n");
    let dv = out.histogram.grid.cell_volume();
    for i in 0..out.histogram.grid.len() {
        let center = out.histogram.grid.axis(0).coord(i);
        let count = (out.histogram.values[i] * dv * cfg.samples as f64).round() as u64;
        let expected = out.screen_marginal.values[i] * dv * cfg.samples as f64;
        let _ = writeln!(hist, "{},{},{}", fmt_f64(center), count, fmt_f64(expected));
    }
    let rows = vec![
        ReportRow { scenario: cfg.scenario.clone(), test: "screen_ks".into(), report: ks },
        ReportRow { scenario: cfg.scenario.clone(), test: "axis_crossings".into(), report: crossings },
    ];
    Ok(ScenarioOutcome {
        rows,
        files: vec![("histogram.csv".into(), hist.into_bytes())],
        final_state: out.psi_screen,
    })
}

fn pointer_measurement(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    // the composite grid comes from the config; the rest of the two-branch
    // geometry is fixed and echoed
    let grid = cfg.grid()?;
    if grid.ndim() != 2 {
        return Err(BsimError::Config("pointer_measurement needs a 2D grid".into()));
    }
    let (c1, c2) = (0.8f64, 0.6f64);
    let sys_grid = Arc::new(grid.subgrid(&[0])?);
    let psi_sys = WaveFunction::from_fn(sys_grid, 0.0, move |q| {
        let s = 0.5f64;
        let a = q[0] + 3.5;
        let b = q[0] - 3.5;
        num_complex::Complex64::new(
            c1 * (-a * a / (4.0 * s * s)).exp() + c2 * (-b * b / (4.0 * s * s)).exp(),
            0.0,
        )
    })
    .normalize()?;
    let h = Hamiltonian::free(grid.clone(), vec![5.0, 10.0])?;
    let model = measurement::sign_pointer_model(&grid, 0.5, 20.0, (0.0, 0.5), 5.0, 0.4)?;
    for (k, v) in [
        ("c1", c1),
        ("c2", c2),
        ("packet_center", 3.5),
        ("packet_sigma", 0.5),
        ("pointer_sigma", 0.5),
        ("lambda", 20.0),
        ("window_on", 0.0),
        ("window_off", 0.5),
        ("settle_time", 5.0),
        ("system_mass", 5.0),
        ("pointer_mass", 10.0),
    ] {
        cfg.parameters.insert(k.into(), v);
    }
    cfg.t_final = 5.5;
    let pcfg = cfg.propagator_config()?;
    let out = measurement::run_measurement(&psi_sys, &model, &h, &pcfg, cfg.samples, cfg.seed)?;
    let w1 = c1 * c1 / (c1 * c1 + c2 * c2);
    let mut rows = Vec::new();
    // wave-function branch weights against |c|^2
    let weight_err = out
        .weights
        .iter()
        .map(|w| (w - w1).abs().min((w - (1.0 - w1)).abs()))
        .fold(0.0f64, f64::max);
    rows.push(ReportRow {
        scenario: cfg.scenario.clone(),
        test: "branch_weights".into(),
        report: TestReport {
            statistic: weight_err,
            threshold: 1e-3,
            passed: out.weights.len() == 2 && weight_err <= 1e-3,
            delta: 0.0,
            sample_size: 2,
        },
    });
    // empirical branch frequencies within 3 binomial sigma
    let m = cfg.samples as f64;
    let f_neg = out.records.iter().filter(|r| r.system_config.coords[0] < 0.0).count() as f64 / m;
    let band = 3.0 * (w1 * (1.0 - w1) / m).sqrt();
    rows.push(ReportRow {
        scenario: cfg.scenario.clone(),
        test: "branch_frequency".into(),
        report: TestReport {
            statistic: (f_neg - w1).abs(),
            threshold: band,
            passed: (f_neg - w1).abs() <= band,
            delta: 0.0,
            sample_size: cfg.samples,
        },
    });
    // per-branch conditional KS
    let split = SubsystemSplit::new(vec![0], vec![1], 2)?;
    for branch in 0..out.weights.len() {
        let members: Vec<&measurement::MeasurementRecord> =
            out.records.iter().filter(|r| r.branch_id == branch).collect();
        if members.is_empty() {
            continue;
        }
        let y_rep = members[0].pointer_reading;
        let cond = crate::subsystem::conditional_wavefunction(&out.psi_final, &split, &[y_rep])?;
        let rho = cond.density().normalize()?;
        let xs: Vec<crate::grid::Configuration> = members
            .iter()
            .map(|r| crate::grid::Configuration::new(vec![r.system_config.coords[0]]))
            .collect();
        let set = SampleSet {
            points: xs,
            time: out.psi_final.time,
            provenance: format!("branch {branch}"),
        };
        let rep = run_test(&set, &rho, &TestSpec::ks(cfg.thresholds.alpha))?;
        rows.push(ReportRow {
            scenario: cfg.scenario.clone(),
            test: format!("branch{branch}_conditional_ks"),
            report: rep,
        });
    }
    // records.csv
    let mut csv = String::from("member,branch,pointer,system_x\n");
    for r in &out.records {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.member,
            r.branch_id,
            fmt_f64(r.pointer_reading),
            fmt_f64(r.system_config.coords[0])
        );
    }
    Ok(ScenarioOutcome {
        rows,
        files: vec![("records.csv".into(), csv.into_bytes())],
        final_state: out.psi_final,
    })
}

fn nonequilibrium_box(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    // ensemble drawn from the uniform density instead of |psi|^2: the flow
    // does not transport uniform onto |psi_t|^2, so the test fails by design
    let grid = cfg.grid()?;
    if grid.ndim() != 1 || grid.axis(0).boundary != crate::grid::Boundary::Box {
        return Err(BsimError::Config("nonequilibrium_box needs a 1D box grid".into()));
    }
    let h = Hamiltonian::new(
        grid.clone(),
        vec![cfg.hamiltonian.mass],
        Potential::Zero,
        cfg.hamiltonian.hbar,
    )?;
    let psi0 = crate::states::gaussian_packet(grid.clone(), cfg.state.sigma, cfg.state.x0, cfg.state.k0)?;
    if cfg.t_final <= 0.0 {
        cfg.t_final = 1.0;
    }
    let uniform = Density::new(grid.clone(), vec![1.0; grid.len()])?.normalize()?;
    let set = sample(&uniform, cfg.samples, cfg.seed)?;
    let mut ens = EnsembleState::new(set.points, 0.0, cfg.seed);
    let pcfg = cfg.propagator_config()?;
    let prop = Propagator::new(h, pcfg.clone())?;
    let reg = Regularization::default_for(&grid, pcfg.dt);
    let psi_t = co_evolve(&prop, &psi0, &mut ens, cfg.t_final, reg, 1.0, |_, _| {})?;
    let rho_t = psi_t.density().normalize()?;
    let fin = SampleSet { points: ens.configs.clone(), time: ens.time, provenance: "uniform".into() };
    let report = run_test(&fin, &rho_t, &TestSpec::ks(cfg.thresholds.alpha))?;
    let rows = vec![ReportRow {
        scenario: cfg.scenario.clone(),
        test: "equilibrium_ks".into(),
        report,
    }];
    Ok(ScenarioOutcome { rows, files: Vec::new(), final_state: psi_t })
}

fn nonequilibrium_psi4(cfg: &mut ResolvedConfig) -> Result<ScenarioOutcome> {
    // ensemble from normalized |psi_0|^4, tested against |psi_t|^4 on an
    // interfering superposition: |psi|^4 is not equivariant, fails by design
    let grid = cfg.grid()?;
    if grid.ndim() != 1 {
        return Err(BsimError::Config("nonequilibrium_psi4 needs a 1D grid".into()));
    }
    let h = Hamiltonian::new(
        grid.clone(),
        vec![cfg.hamiltonian.mass],
        Potential::Zero,
        cfg.hamiltonian.hbar,
    )?;
    let sep = 4.0;
    let psi0 = crate::states::two_packet_superposition(grid, cfg.state.sigma, sep, 0.0, 1.0, 1.0)?;
    cfg.parameters.insert("separation".into(), sep);
    if cfg.t_final <= 0.0 {
        cfg.t_final = 3.0;
    }
    let pcfg = cfg.propagator_config()?;
    let (report, psi_t, _ens) = equilibrium::equivariance_check(
        &psi0,
        &h,
        &pcfg,
        cfg.samples,
        cfg.t_final,
        1.0,
        CandidateDensity::Psi4,
        cfg.thresholds.alpha,
        cfg.seed,
    )?;
    let rows = vec![ReportRow {
        scenario: cfg.scenario.clone(),
        test: "psi4_equivariance_ks".into(),
        report,
    }];
    Ok(ScenarioOutcome { rows, files: Vec::new(), final_state: psi_t })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    plan: String,
    #[serde(default)]
    selectors: Vec<String>,
}

fn multitime_plan(cfg: &mut ResolvedConfig, plan_ref: &str) -> Result<ScenarioOutcome> {
    let path = cfg.base_dir.join(plan_ref);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| BsimError::Config(format!("plan file {}: {e}", path.display())))?;
    let plan_file: PlanFile =
        toml::from_str(&text).map_err(|e| BsimError::Config(format!("plan file: {e}")))?;
    if plan_file.plan != "two_experiment" {
        return Err(BsimError::Config(format!("unknown plan `{}`", plan_file.plan)));
    }
    let setup = multitime::two_experiment_plan()?;
    cfg.t_final = setup.plan.t_final;
    cfg.parameters.insert("rules".into(), setup.plan.rules.len() as f64);
    let po = multitime::run_plan(&setup.psi0, &setup.h, &setup.cfg, &setup.plan, cfg.samples, cfg.seed)?;
    let alpha = cfg.thresholds.alpha;
    let rep = multitime::independence_report(&po, setup.plan.rules.len(), alpha)?;
    let mut rows = Vec::new();
    for (rule, marg) in setup.plan.rules.iter().zip(&rep.marginals) {
        rows.push(ReportRow {
            scenario: cfg.scenario.clone(),
            test: format!("marginal_{}", rule.label),
            report: marg.clone(),
        });
    }
    rows.push(ReportRow {
        scenario: cfg.scenario.clone(),
        test: "max_pairwise_corr".into(),
        report: TestReport {
            statistic: rep.max_corr,
            threshold: rep.corr_threshold,
            passed: rep.max_corr < rep.corr_threshold,
            delta: 0.0,
            sample_size: rep.runs,
        },
    });
    rows.push(ReportRow {
        scenario: cfg.scenario.clone(),
        test: "joint_chi2".into(),
        report: rep.joint.clone(),
    });
    // selection-invariance tests on the second system (still a product
    // factor of the final state)
    let split = SubsystemSplit::new(vec![1], vec![0, 2], 3)?;
    let registry = multitime::selector_registry();
    for name in &plan_file.selectors {
        let sel = registry
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| BsimError::Config(format!("unknown selector `{name}`")))?;
        let rep = multitime::selection_invariance_test(
            &po.psi_final,
            &split,
            &po.ensemble,
            sel.1.as_ref(),
            alpha,
        )?;
        rows.push(ReportRow {
            scenario: cfg.scenario.clone(),
            test: format!("selector_{name}"),
            report: rep,
        });
    }
    // records.csv
    let mut csv = String::from("run,rule,trigger_time,x,z,pit,branch\n");
    for r in &po.records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.run_id,
            r.label,
            fmt_f64(r.trigger_time),
            fmt_f64(r.x[0]),
            fmt_f64(r.z),
            fmt_f64(r.pit),
            r.branch_id
        );
    }
    let mut excl = String::from("excluded_run\n");
    for e in &po.excluded_runs {
        let _ = writeln!(excl, "{e}");
    }
    Ok(ScenarioOutcome {
        rows,
        files: vec![("records.csv".into(), csv.into_bytes()), ("excluded.csv".into(), excl.into_bytes())],
        final_state: po.psi_final,
    })
}

/// Execute a config end to end: run the scenario, write every artifact
/// plus a SHA-256 manifest, and return whether all declared tests passed.
pub fn cmd_run(config_path: &Path, output_override: Option<&Path>) -> Result<bool> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| BsimError::Config(format!("config {}: {e}", config_path.display())))?;
    let raw: RawConfig =
        toml::from_str(&text).map_err(|e| BsimError::Config(format!("config: {e}")))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let mut cfg = resolve_config(raw, base, output_override)?;
    let outcome = run_scenario(&mut cfg)?;

    let out_dir = PathBuf::from(&cfg.output);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| BsimError::Config(format!("output {}: {e}", out_dir.display())))?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let echoed = toml::to_string(&cfg)
        .map_err(|e| BsimError::Config(format!("echoing config: {e}")))?;
    files.push(("config_resolved.toml".into(), echoed.into_bytes()));
    files.push(("report.csv".into(), report_csv(&outcome.rows, cfg.samples, cfg.seed)));
    let mut state = Vec::new();
    crate::serial::write_wavefunction(&mut state, &outcome.final_state)?;
    files.push(("final_state.bsim".into(), state));
    files.extend(outcome.files);
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut manifest = String::new();
    for (name, bytes) in &files {
        std::fs::write(out_dir.join(name), bytes)
            .map_err(|e| BsimError::Config(format!("writing {name}: {e}")))?;
        let mut h = Sha256::new();
        h.update(bytes);
        let _ = writeln!(manifest, "{:x}  {}", h.finalize(), name);
    }
    std::fs::write(out_dir.join("MANIFEST.sha256"), manifest.as_bytes())
        .map_err(|e| BsimError::Config(format!("writing manifest: {e}")))?;
    Ok(outcome.rows.iter().all(|r| r.report.passed))
}

/// Re-check the manifest hashes and aggregate report.csv without
/// recomputation. Ok(true): intact and all tests passed; Ok(false): intact
/// but some test failed; Err: corrupt or incomplete directory.
pub fn cmd_verify(dir: &Path) -> Result<bool> {
    let manifest = std::fs::read_to_string(dir.join("MANIFEST.sha256"))
        .map_err(|e| BsimError::Config(format!("manifest: {e}")))?;
    let mut saw_report = false;
    for line in manifest.lines() {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| BsimError::Config(format!("malformed manifest line: {line}")))?;
        let bytes = std::fs::read(dir.join(name))
            .map_err(|e| BsimError::Config(format!("{name}: {e}")))?;
        let mut h = Sha256::new();
        h.update(&bytes);
        if format!("{:x}", h.finalize()) != hash {
            return Err(BsimError::Config(format!("{name}: hash mismatch")));
        }
        if name == "report.csv" {
            saw_report = true;
        }
    }
    if !saw_report {
        return Err(BsimError::Config("manifest lists no report.csv".into()));
    }
    let report = std::fs::read_to_string(dir.join("report.csv"))
        .map_err(|e| BsimError::Config(format!("report.csv: {e}")))?;
    let mut rows = 0usize;
    let mut all_passed = true;
    for (i, line) in report.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("scenario,test,") {
                return Err(BsimError::Config("report.csv: unexpected header".into()));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(BsimError::Config(format!("report.csv: malformed row {i}")));
        }
        match cols[4] {
            "true" => {}
            "false" => all_passed = false,
            _ => return Err(BsimError::Config(format!("report.csv: bad passed flag in row {i}"))),
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(BsimError::Config("report.csv has no test rows".into()));
    }
    Ok(all_passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    const SMALL_FREE: &str = r#"
scenario = "free_gaussian"
seed = 7
samples = 1500
output = "OUT"

[grid]
points = [512]
min = [-24.0]
max = [24.0]
periodic = [true]
"#;

    #[test]
    fn run_and_verify_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let body = SMALL_FREE.replace("OUT", out.to_str().unwrap());
        let cfg = write_cfg(tmp.path(), &body);
        assert!(cmd_run(&cfg, None).unwrap());
        for f in ["report.csv", "config_resolved.toml", "final_state.bsim", "MANIFEST.sha256"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        assert!(cmd_verify(&out).unwrap());
        // defaults are echoed
        let echoed = std::fs::read_to_string(out.join("config_resolved.toml")).unwrap();
        assert!(echoed.contains("dt = 0.005"), "{echoed}");
        assert!(echoed.contains("alpha = 0.01"));
        assert!(echoed.contains("t_final ="));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let body = SMALL_FREE.replace("OUT", out.to_str().unwrap());
        let cfg = write_cfg(tmp.path(), &body);
        cmd_run(&cfg, None).unwrap();
        let first = std::fs::read(out.join("MANIFEST.sha256")).unwrap();
        cmd_run(&cfg, None).unwrap();
        let second = std::fs::read(out.join("MANIFEST.sha256")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_grid_stanza_names_the_field() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_cfg(
            tmp.path(),
            "scenario = \"free_gaussian\"\nseed = 1\nsamples = 10\noutput = \"o\"\n",
        );
        let err = cmd_run(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
    }

    #[test]
    fn missing_seed_names_the_field() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_cfg(tmp.path(), "scenario = \"free_gaussian\"\nsamples = 10\noutput = \"o\"\n");
        let err = cmd_run(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_scenario_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_cfg(
            tmp.path(),
            "scenario = \"bogus\"\nseed = 1\nsamples = 10\noutput = \"o\"\n",
        );
        let err = cmd_run(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn verify_detects_tampering_and_rejects_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let body = SMALL_FREE.replace("OUT", out.to_str().unwrap());
        let cfg = write_cfg(tmp.path(), &body);
        cmd_run(&cfg, None).unwrap();
        let report = out.join("report.csv");
        let mut bytes = std::fs::read(&report).unwrap();
        bytes.push(b'x');
        std::fs::write(&report, bytes).unwrap();
        assert!(cmd_verify(&out).is_err());
        let empty = tmp.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        assert!(cmd_verify(&empty).is_err());
    }

    #[test]
    fn nonequilibrium_scenario_reports_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let body = format!(
            r#"
scenario = "nonequilibrium_psi4"
seed = 3
samples = 3000
t_final = 3.0
output = "{}"

[grid]
points = [1024]
min = [-32.0]
max = [32.0]
periodic = [true]
"#,
            out.to_str().unwrap()
        );
        let cfg = write_cfg(tmp.path(), &body);
        // exit-1 path: run returns Ok(false) but the reports are written
        assert!(!cmd_run(&cfg, None).unwrap());
        assert!(out.join("report.csv").exists());
        assert_eq!(cmd_verify(&out).unwrap(), false);
    }
}
