//! Closed-form reference solutions used to check the numerics: the free
//! Gaussian packet and the harmonic coherent state. These are evaluated
//! directly from the textbook formulas and never go through the solvers.

/// Free Gaussian packet with initial position-density std `sigma0`,
/// center `x0` and mean wavenumber `k0`.
#[derive(Debug, Clone, Copy)]
pub struct FreeGaussian {
    pub sigma0: f64,
    pub x0: f64,
    pub k0: f64,
    pub mass: f64,
    pub hbar: f64,
}

impl FreeGaussian {
    /// Dimensionless spreading parameter tau = hbar t / (2 m sigma0^2).
    pub fn tau(&self, t: f64) -> f64 {
        self.hbar * t / (2.0 * self.mass * self.sigma0 * self.sigma0)
    }

    /// Position-density std at time t: sigma0 sqrt(1 + tau^2).
    pub fn sigma(&self, t: f64) -> f64 {
        let tau = self.tau(t);
        self.sigma0 * (1.0 + tau * tau).sqrt()
    }

    pub fn center(&self, t: f64) -> f64 {
        self.x0 + self.hbar * self.k0 / self.mass * t
    }

    /// |psi(x,t)|^2, a normal density with the above center and std.
    pub fn density(&self, x: f64, t: f64) -> f64 {
        let s = self.sigma(t);
        let u = (x - self.center(t)) / s;
        (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn cdf(&self, x: f64, t: f64) -> f64 {
        normal_cdf(x, self.center(t), self.sigma(t))
    }

    /// Guiding velocity v(x,t) = (x - center) sigma'(t)/sigma(t) + drift.
    pub fn velocity(&self, x: f64, t: f64) -> f64 {
        let tau = self.tau(t);
        let rate = self.hbar / (2.0 * self.mass * self.sigma0 * self.sigma0);
        (x - self.center(t)) * rate * tau / (1.0 + tau * tau)
            + self.hbar * self.k0 / self.mass
    }

    /// Trajectory from initial point `xi`: packet-frame offsets scale with
    /// sigma(t)/sigma0.
    pub fn trajectory(&self, xi: f64, t: f64) -> f64 {
        (xi - self.x0) * self.sigma(t) / self.sigma0 + self.center(t)
    }

    /// Time at which sigma(t) = factor * sigma0.
    pub fn time_for_spread(&self, factor: f64) -> f64 {
        let tau = (factor * factor - 1.0).sqrt();
        tau * 2.0 * self.mass * self.sigma0 * self.sigma0 / self.hbar
    }
}

/// Coherent state in V = 1/2 m omega^2 x^2, displaced by `x0`.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicCoherent {
    pub omega: f64,
    pub x0: f64,
    pub mass: f64,
    pub hbar: f64,
}

impl HarmonicCoherent {
    /// Position-density std (time-independent for a coherent state).
    pub fn sigma(&self) -> f64 {
        (self.hbar / (2.0 * self.mass * self.omega)).sqrt()
    }

    pub fn center(&self, t: f64) -> f64 {
        self.x0 * (self.omega * t).cos()
    }

    pub fn density(&self, x: f64, t: f64) -> f64 {
        let s = self.sigma();
        let u = (x - self.center(t)) / s;
        (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64, mean: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (sigma * std::f64::consts::SQRT_2)))
}

/// Abramowitz-Stegun 7.1.26 style rational approximation is not accurate
/// enough for KS work; use the Cody-style series/continued fraction pair.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 3.0 {
        // Maclaurin series, converges to ~1e-16 for |x| < 3
        let x2 = x * x;
        let mut sum = 0.0f64;
        let mut num = x;
        let mut n = 0usize;
        loop {
            let t = num / (2.0 * n as f64 + 1.0);
            sum += t;
            if t.abs() < 1e-18 {
                break;
            }
            n += 1;
            num *= -x2 / n as f64;
            if n > 300 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        1.0 - erfc_large(x)
    }
}

/// Complementary erf for x >= 3 via the asymptotic continued fraction.
fn erfc_large(x: f64) -> f64 {
    // Laplace continued fraction: erfc(x) = exp(-x^2)/(x sqrt(pi)) * 1/(1+ 1/(2x^2+ 2/(1+ 3/(2x^2+ ...))))
    let x2 = 2.0 * x * x;
    let mut f = 0.0f64;
    for k in (1..=60).rev() {
        f = k as f64 / (if k % 2 == 1 { x2 } else { 1.0 } + f);
    }
    (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) / (1.0 + f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // reference values from standard tables
        assert!((erf(0.5) - 0.5204998778130465).abs() < 1e-12);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-12);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1e-12);
        assert!((erf(3.5) - 0.9999992569016276).abs() < 1e-12);
        assert!((erf(-1.0) + 0.8427007929497149).abs() < 1e-12);
    }

    #[test]
    fn gaussian_spread_matches_formula() {
        let g = FreeGaussian { sigma0: 1.0, x0: 0.0, k0: 0.0, mass: 1.0, hbar: 1.0 };
        let t = g.time_for_spread(2.0);
        assert!((g.sigma(t) - 2.0).abs() < 1e-12);
        // tau at that time is sqrt(3)
        assert!((g.tau(t) - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_normalized() {
        let g = FreeGaussian { sigma0: 0.7, x0: 0.3, k0: 1.0, mass: 2.0, hbar: 1.0 };
        let t = 0.9;
        let n = 20001;
        let (a, b) = (-30.0, 30.0);
        let h = (b - a) / (n - 1) as f64;
        let total: f64 = (0..n).map(|i| g.density(a + i as f64 * h, t) * h).sum();
        assert!((total - 1.0).abs() < 1e-8);
    }
}
