//! Equilibrium sampling and the statistical test battery: alias-method
//! sampling from grid densities, empirical distributions, agreement norms,
//! and KS / chi-square / coarse-grained sup-norm tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{BsimError, Result};
use crate::grid::{Boundary, Configuration, Grid};
use crate::wavefunction::Density;

/// A batch of configuration samples taken at one time.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<Configuration>,
    pub time: f64,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Ks,
    ChiSquare,
    CoarseGrainSup,
}

/// What to test and how hard: the test family, the coarse-graining test
/// functions (cell-indexed, used by `CoarseGrainSup` and `agreement_norm`),
/// the sup-norm tolerance and the significance level.
#[derive(Debug, Clone)]
pub struct TestSpec {
    pub kind: TestKind,
    pub functions: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub alpha: f64,
}

impl TestSpec {
    pub fn ks(alpha: f64) -> TestSpec {
        TestSpec { kind: TestKind::Ks, functions: Vec::new(), epsilon: 0.0, alpha }
    }

    pub fn chi_square(alpha: f64) -> TestSpec {
        TestSpec { kind: TestKind::ChiSquare, functions: Vec::new(), epsilon: 0.0, alpha }
    }

    pub fn coarse_grain(functions: Vec<Vec<f64>>, epsilon: f64) -> TestSpec {
        TestSpec { kind: TestKind::CoarseGrainSup, functions, epsilon, alpha: 0.0 }
    }

    fn validate(&self, ncells: usize) -> Result<()> {
        match self.kind {
            TestKind::Ks | TestKind::ChiSquare => {
                if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    return Err(BsimError::InvalidTestSpec("alpha must lie in (0,1)".into()));
                }
            }
            TestKind::CoarseGrainSup => {
                if self.functions.is_empty() {
                    return Err(BsimError::InvalidTestSpec(
                        "coarse_grain_sup needs at least one test function".into(),
                    ));
                }
                if !(self.epsilon > 0.0) {
                    return Err(BsimError::InvalidTestSpec("epsilon must be positive".into()));
                }
                if self.functions.iter().any(|f| f.len() != ncells) {
                    return Err(BsimError::InvalidTestSpec(
                        "test functions must be cell-indexed on the density grid".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of one statistical test.
#[derive(Debug, Clone)]
pub struct TestReport {
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Unreliability estimate: the probability of a false failure.
    pub delta: f64,
    pub sample_size: usize,
}

impl TestReport {
    fn new(statistic: f64, threshold: f64, delta: f64, sample_size: usize) -> TestReport {
        TestReport { statistic, threshold, passed: statistic <= threshold, delta, sample_size }
    }
}

/// Walker alias table over cell probabilities.
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    /// `weights` must be nonnegative with positive sum.
    pub fn new(weights: &[f64]) -> Result<AliasTable> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(BsimError::ZeroNorm);
        }
        let n = weights.len();
        let mut prob: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut alias = vec![0usize; n];
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &p) in prob.iter().enumerate() {
            if p < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l;
            prob[l] = (prob[l] + prob[s]) - 1.0;
            if prob[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for &i in small.iter().chain(&large) {
            prob[i] = 1.0;
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let n = self.prob.len();
        let i = rng.gen_range(0..n);
        if rng.gen::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// M independent draws from a normalized grid density: alias-method cell
/// selection plus uniform jitter within the cell. Deterministic in `seed`.
pub fn sample(rho: &Density, m: usize, seed: u64) -> Result<SampleSet> {
    if !rho.normalized {
        return Err(BsimError::NotNormalized);
    }
    let table = AliasTable::new(&rho.values)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let grid = &rho.grid;
    let d = grid.ndim();
    let points = (0..m)
        .map(|_| {
            let cell = table.draw(&mut rng);
            let mut c = grid.coords(cell);
            for a in 0..d {
                let dx = grid.axis(a).dx();
                c.coords[a] += (rng.gen::<f64>() - 0.5) * dx;
            }
            c.confine(grid);
            c
        })
        .collect();
    Ok(SampleSet { points, time: 0.0, provenance: format!("sampled(seed={seed})") })
}

/// Nearest-cell bin index of a point; cells own the half-open interval of
/// width dx centered on them (matching the sampling jitter).
pub fn bin_cell(grid: &Grid, point: &[f64]) -> Result<usize> {
    let d = grid.ndim();
    let strides = grid.strides();
    let mut flat = 0usize;
    for a in 0..d {
        let ax = grid.axis(a);
        let x = point[a];
        if ax.boundary == Boundary::Box && (x < ax.min || x > ax.max) {
            return Err(BsimError::OutOfDomain);
        }
        if ax.boundary == Boundary::Periodic && (x < ax.min - ax.len() || x > ax.max + ax.len()) {
            return Err(BsimError::OutOfDomain);
        }
        let i = (ax.frac_index(x).round() as usize) % ax.points;
        flat += i * strides[a];
    }
    Ok(flat)
}

/// Normalized histogram of the samples on `bins`.
pub fn empirical_distribution(s: &SampleSet, bins: &std::sync::Arc<Grid>) -> Result<Density> {
    let mut counts = vec![0usize; bins.len()];
    for p in &s.points {
        counts[bin_cell(bins, &p.coords)?] += 1;
    }
    let m = s.points.len() as f64;
    let dv = bins.cell_volume();
    let values = counts.iter().map(|&c| c as f64 / (m * dv)).collect();
    Density::new(bins.clone(), values)
}

/// sup over the family of |∫(rho_emp − rho_qe) f_a|.
pub fn agreement_norm(rho_emp: &Density, rho_qe: &Density, spec: &TestSpec) -> Result<f64> {
    if *rho_emp.grid != *rho_qe.grid {
        return Err(BsimError::BinningMismatch);
    }
    if spec.functions.iter().any(|f| f.len() != rho_emp.values.len()) {
        return Err(BsimError::BinningMismatch);
    }
    let dv = rho_emp.grid.cell_volume();
    let mut sup = 0.0f64;
    for f in &spec.functions {
        let v: f64 = rho_emp
            .values
            .iter()
            .zip(&rho_qe.values)
            .zip(f)
            .map(|((e, q), fv)| (e - q) * fv)
            .sum::<f64>()
            * dv;
        sup = sup.max(v.abs());
    }
    Ok(sup)
}

/// Kolmogorov distribution tail Q(c) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 c^2).
pub fn kolmogorov_tail(c: f64) -> f64 {
    if c <= 0.0 {
        return 1.0;
    }
    let mut q = 0.0f64;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k as f64) * (k as f64) * c * c).exp();
        q += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    q.clamp(0.0, 1.0)
}

/// Critical value c with Q(c) = alpha; the KS threshold is c/sqrt(M).
pub fn ks_critical(alpha: f64) -> f64 {
    let (mut lo, mut hi) = (1e-3f64, 5.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_tail(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Piecewise-linear CDF of a 1D grid density, evaluated at x. Mass in each
/// cell is spread uniformly over the dx-wide interval centered on the cell.
pub struct GridCdf {
    edges: Vec<f64>,
    cum: Vec<f64>,
    density: Vec<f64>,
    /// Domain length of a periodic axis; used to fold wrapped samples back
    /// into the CDF support [min - dx/2, max - dx/2).
    period: Option<f64>,
}

impl GridCdf {
    pub fn new(rho: &Density) -> Result<GridCdf> {
        if rho.grid.ndim() != 1 {
            return Err(BsimError::InvalidTestSpec("KS requires a 1D density".into()));
        }
        let ax = rho.grid.axis(0);
        let period = match ax.boundary {
            Boundary::Periodic => Some(ax.len()),
            Boundary::Box => None,
        };
        let dx = ax.dx();
        let n = ax.points;
        let mut edges = Vec::with_capacity(n + 1);
        for i in 0..n {
            edges.push(ax.coord(i) - 0.5 * dx);
        }
        edges.push(ax.coord(n - 1) + 0.5 * dx);
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0f64;
        cum.push(0.0);
        for &v in &rho.values {
            acc += v * dx;
            cum.push(acc);
        }
        // guard against rounding: force a proper CDF
        let total = acc;
        if !(total > 0.0) {
            return Err(BsimError::ZeroNorm);
        }
        for c in &mut cum {
            *c /= total;
        }
        let density = rho.values.iter().map(|&v| v / total).collect();
        Ok(GridCdf { edges, cum, density, period })
    }

    /// Fold a periodic coordinate into the CDF support interval.
    pub fn canonicalize(&self, x: f64) -> f64 {
        match self.period {
            Some(l) => {
                let lo = self.edges[0];
                (x - lo).rem_euclid(l) + lo
            }
            None => x,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = self.canonicalize(x);
        let n = self.edges.len() - 1;
        if x <= self.edges[0] {
            return 0.0;
        }
        if x >= self.edges[n] {
            return 1.0;
        }
        // cells are uniform-width: direct index
        let w = self.edges[1] - self.edges[0];
        let i = (((x - self.edges[0]) / w).floor() as usize).min(n - 1);
        self.cum[i] + self.density[i] * (x - self.edges[i])
    }
}

/// One-sample KS statistic of `xs` against a CDF.
pub fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m);
    }
    d
}

/// Deterministic equal-mass partition of the grid cells of `rho` into at
/// most `k` bins, walking cells in flat order. Returns (cell -> bin map,
/// bin masses).
pub fn equal_mass_bins(rho: &Density, k: usize) -> (Vec<usize>, Vec<f64>) {
    let dv = rho.grid.cell_volume();
    let total: f64 = rho.values.iter().sum::<f64>() * dv;
    let target = total / k as f64;
    let mut map = vec![0usize; rho.values.len()];
    let mut masses = vec![0.0f64];
    let mut bin = 0usize;
    for (i, &v) in rho.values.iter().enumerate() {
        let mass = v * dv;
        if masses[bin] >= target && bin + 1 < k {
            bin += 1;
            masses.push(0.0);
        }
        map[i] = bin;
        masses[bin] += mass;
    }
    (map, masses)
}

pub const DEFAULT_CHI2_BINS: usize = 16;

/// Test `s` against the null hypothesis that it was drawn from `rho_qe`.
pub fn run_test(s: &SampleSet, rho_qe: &Density, spec: &TestSpec) -> Result<TestReport> {
    spec.validate(rho_qe.values.len())?;
    let m = s.points.len();
    match spec.kind {
        TestKind::Ks => {
            let cdf = GridCdf::new(rho_qe)?;
            let mut xs: Vec<f64> =
                s.points.iter().map(|p| cdf.canonicalize(p.coords[0])).collect();
            let d = ks_statistic(&mut xs, |x| cdf.eval(x));
            let threshold = ks_critical(spec.alpha) / (m as f64).sqrt();
            Ok(TestReport::new(d, threshold, spec.alpha, m))
        }
        TestKind::ChiSquare => {
            let k = DEFAULT_CHI2_BINS.min(rho_qe.values.len());
            let (map, masses) = equal_mass_bins(rho_qe, k);
            let nbins = masses.len();
            let mut observed = vec![0.0f64; nbins];
            for p in &s.points {
                observed[map[bin_cell(&rho_qe.grid, &p.coords)?]] += 1.0;
            }
            let total_mass: f64 = masses.iter().sum();
            let mut stat = 0.0f64;
            let mut dof = 0usize;
            for (o, &mass) in observed.iter().zip(&masses) {
                let e = m as f64 * mass / total_mass;
                if e > 0.0 {
                    stat += (o - e) * (o - e) / e;
                    dof += 1;
                }
            }
            let dof = dof.saturating_sub(1).max(1);
            let chi = ChiSquared::new(dof as f64)
                .map_err(|e| BsimError::InvalidTestSpec(e.to_string()))?;
            let threshold = chi.inverse_cdf(1.0 - spec.alpha);
            Ok(TestReport::new(stat, threshold, spec.alpha, m))
        }
        TestKind::CoarseGrainSup => {
            let dv = rho_qe.grid.cell_volume();
            let mut sup = 0.0f64;
            let mut delta = 0.0f64;
            for f in &spec.functions {
                // empirical mean of f(X) vs integral of rho f
                let mut emp = 0.0f64;
                for p in &s.points {
                    emp += f[bin_cell(&rho_qe.grid, &p.coords)?];
                }
                emp /= m as f64;
                let expect: f64 =
                    f.iter().zip(&rho_qe.values).map(|(fv, rv)| fv * rv).sum::<f64>() * dv;
                sup = sup.max((emp - expect).abs());
                let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let b = (hi - lo).max(f64::MIN_POSITIVE);
                // Hoeffding bound on a false failure for this function
                delta += 2.0 * (-2.0 * m as f64 * spec.epsilon * spec.epsilon / (b * b)).exp();
            }
            Ok(TestReport::new(sup, spec.epsilon, delta.min(1.0), m))
        }
    }
}

/// Indicator functions of `k` equal-mass bins of `rho`, the default
/// coarse-graining family.
pub fn equal_mass_indicators(rho: &Density, k: usize) -> Vec<Vec<f64>> {
    let (map, masses) = equal_mass_bins(rho, k);
    let nbins = masses.len();
    let mut fs = vec![vec![0.0f64; rho.values.len()]; nbins];
    for (cell, &b) in map.iter().enumerate() {
        fs[b][cell] = 1.0;
    }
    fs
}
