//! Gaussian and unit-interval quadrature rules.
//!
//! `E[f(m + sigma Z)]` with `Z ~ N(0,1)` uses Gauss-Hermite nodes when `sigma <= 1`.
//! For wider Gaussians the logistic kink at `m + sigma Z = 0` is too sharp for a
//! global Hermite rule, so a composite Gauss-Legendre rule is used instead: panels
//! of width 2 on `Z in [-10, 10]`, refined by breakpoints every 4 units of
//! `t = m + sigma Z` on `|t| <= 36`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node counts for the Gaussian and unit-interval integrals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureConfig {
    pub hermite_nodes: usize,
    pub unit_nodes: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { hermite_nodes: 80, unit_nodes: 64 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hermite_nodes < 20 {
            return Err(Error::InvalidArgument(format!("hermite_nodes = {} < 20", self.hermite_nodes)));
        }
        if self.unit_nodes < 16 {
            return Err(Error::InvalidArgument(format!("unit_nodes = {} < 16", self.unit_nodes)));
        }
        Ok(())
    }
}

const Z_LIMIT: f64 = 10.0;
const Z_STEP: f64 = 2.0;
const Z_MAX: f64 = 40.0;
const Z_MARGIN: f64 = 4.0;
const T_LIMIT: f64 = 36.0;
const T_STEP: f64 = 4.0;
const HERMITE_MAX_SIGMA: f64 = 1.0;

/// Precomputed node tables.
#[derive(Clone, Debug)]
pub struct Quadrature {
    config: QuadratureConfig,
    hermite: (Vec<f64>, Vec<f64>),
    panel: (Vec<f64>, Vec<f64>),
    unit: (Vec<f64>, Vec<f64>),
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::new(QuadratureConfig::default()).expect("default config is valid")
    }
}

impl Quadrature {
    pub fn new(config: QuadratureConfig) -> Result<Self> {
        config.validate()?;
        let hermite = gauss_hermite(config.hermite_nodes);
        let panel = gauss_legendre((config.hermite_nodes / 4).max(8));
        let half = gauss_legendre(config.unit_nodes.div_ceil(2));
        let mut unit = (Vec::new(), Vec::new());
        for (lo, hi) in [(0.0, 0.5), (0.5, 1.0)] {
            for (x, w) in half.0.iter().zip(&half.1) {
                unit.0.push(lo + (hi - lo) * 0.5 * (x + 1.0));
                unit.1.push((hi - lo) * 0.5 * w);
            }
        }
        Ok(Quadrature { config, hermite, panel, unit })
    }

    pub fn config(&self) -> QuadratureConfig {
        self.config
    }

    /// Nodes and weights on [0, 1] for the uniform measure, split at 1/2.
    pub fn unit_rule(&self) -> (&[f64], &[f64]) {
        (&self.unit.0, &self.unit.1)
    }

    /// `E[f(m + sigma Z)]` for `Z ~ N(0,1)`, component-wise over the array `f` returns.
    /// `sigma = 0` evaluates `f(m)` exactly.
    pub fn normal_expectation<const K: usize>(
        &self,
        m: f64,
        sigma: f64,
        f: impl Fn(f64) -> [f64; K],
    ) -> [f64; K] {
        let mut acc = [0.0; K];
        if sigma == 0.0 {
            return f(m);
        }
        let sigma = sigma.abs();
        if sigma <= HERMITE_MAX_SIGMA {
            for (z, w) in self.hermite.0.iter().zip(&self.hermite.1) {
                let v = f(m + sigma * z);
                for k in 0..K {
                    acc[k] += w * v[k];
                }
            }
            return acc;
        }
        // The window covers |Z| <= Z_LIMIT and, when the kink t = 0 lies beyond it,
        // extends past the kink so that exponentially small tails keep relative accuracy.
        let kink = (-m / sigma).clamp(-Z_MAX, Z_MAX);
        let lo = (-Z_LIMIT).min(kink - Z_MARGIN);
        let hi = Z_LIMIT.max(kink + Z_MARGIN);
        let mut cuts = [0.0f64; 96];
        let mut len = 0;
        let mut z = lo;
        while z < hi {
            cuts[len] = z;
            len += 1;
            z += Z_STEP;
        }
        cuts[len] = hi;
        len += 1;
        let mut t = -T_LIMIT;
        while t <= T_LIMIT + 1e-12 {
            let z = (t - m) / sigma;
            if z > lo && z < hi {
                cuts[len] = z;
                len += 1;
            }
            t += T_STEP;
        }
        let cuts = &mut cuts[..len];
        cuts.sort_unstable_by(f64::total_cmp);
        let norm = (2.0 * std::f64::consts::PI).sqrt().recip();
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let half = 0.5 * (b - a);
            if half <= 1e-14 {
                continue;
            }
            let mid = 0.5 * (a + b);
            for (x, w) in self.panel.0.iter().zip(&self.panel.1) {
                let z = mid + half * x;
                let weight = half * w * norm * (-0.5 * z * z).exp();
                let v = f(m + sigma * z);
                for k in 0..K {
                    acc[k] += weight * v[k];
                }
            }
        }
        acc
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Gauss-Hermite rule for the standard normal: `sum w_i f(x_i) ~ E[f(Z)]`, weights summing to 1.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Nodes for weight exp(-x^2) by Newton on the normalized Hermite recurrence.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let scale = std::f64::consts::SQRT_2;
    let mut nodes: Vec<f64> = x.iter().rev().map(|v| v * scale).collect();
    let mut weights: Vec<f64> = w.iter().rev().copied().collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::logistic;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        for k in 0..20 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "degree {k}");
        }
    }

    #[test]
    fn hermite_reproduces_normal_moments() {
        for n in [20, 21, 80, 160] {
            let (x, w) = gauss_hermite(n);
            let mut double_fact = 1.0;
            for k in 0..(n.min(30)) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                // Odd moments cancel; rounding scales with the absolute moment.
                let scale: f64 = x.iter().zip(&w).map(|(x, w)| w * x.abs().powi(k as i32)).sum();
                let exact = if k % 2 == 1 {
                    0.0
                } else {
                    if k > 0 {
                        double_fact *= (k - 1) as f64;
                    }
                    double_fact
                };
                assert!((q - exact).abs() <= 1e-12 * scale.max(1.0), "n={n} k={k}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn unit_rule_is_exact_for_piecewise_polynomials() {
        let q = Quadrature::default();
        let (x, w) = q.unit_rule();
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        // E[min(l,1-l)|2l-1|] for l uniform is 1/12.
        let v: f64 = x.iter().zip(w).map(|(l, w)| w * l.min(1.0 - l) * (2.0 * l - 1.0).abs()).sum();
        assert!((v - 1.0 / 12.0).abs() < 1e-15);
    }

    /// Trapezoid rule on a fine grid, as an independent reference.
    fn trapezoid_expectation(m: f64, s: f64) -> f64 {
        let n = 400_000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let z = lo + h * i as f64;
            let wt = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += wt * (-0.5 * z * z).exp() * logistic::loss(m + s * z);
        }
        acc * h / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn expectation_matches_reference() {
        let q = Quadrature::default();
        for &(m, s) in &[(0.0, 0.5), (0.0, 1.5), (3.0, 5.0), (-2.0, 20.0), (10.0, 63.0), (-7.0, 1.01), (0.3, 0.99)] {
            let v = q.normal_expectation(m, s, |t| [logistic::loss(t)])[0];
            let r = trapezoid_expectation(m, s);
            assert!((v - r).abs() < 1e-9, "m={m} s={s}: {v} vs {r}");
        }
        assert_eq!(q.normal_expectation(1.0, 0.0, |t| [logistic::loss(t)])[0], logistic::loss(1.0));
    }

    #[test]
    fn exponentially_small_tails_keep_relative_accuracy() {
        // References from 40-digit adaptive quadrature split finely around the kink.
        let q = Quadrature::default();
        for &(m, s, r) in &[
            (158.0, 17.8, 1.068_762_654_460_515e-18),
            (316.0, 25.0, 1.981_116_104_683_669_2e-36),
            (60.0, 3.0, 7.882_359_790_600_851e-25),
        ] {
            let v = q.normal_expectation(m, s, |t| [logistic::loss(t)])[0];
            assert!((v / r - 1.0).abs() < 1e-10, "m={m} s={s}: {v} vs {r}");
        }
    }

    #[test]
    fn doubling_nodes_is_stable() {
        let q = Quadrature::default();
        let q2 = Quadrature::new(QuadratureConfig { hermite_nodes: 160, unit_nodes: 64 }).unwrap();
        for m in [-20.0, -3.0, 0.0, 0.7, 5.0, 40.0] {
            for s in [1e-3, 0.3, 0.999, 1.0001, 2.0, 7.5, 30.0, 70.0] {
                let a = q.normal_expectation(m, s, logistic::derivatives);
                let b = q2.normal_expectation(m, s, logistic::derivatives);
                for k in 0..5 {
                    assert!((a[k] - b[k]).abs() <= 1e-12, "m={m} s={s} k={k}: {} vs {}", a[k], b[k]);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(Quadrature::new(QuadratureConfig { hermite_nodes: 19, unit_nodes: 64 }).is_err());
        assert!(Quadrature::new(QuadratureConfig { hermite_nodes: 20, unit_nodes: 15 }).is_err());
        assert!(Quadrature::new(QuadratureConfig { hermite_nodes: 20, unit_nodes: 16 }).is_ok());
    }
}
