//! Numerical checks of the structural facts behind the linear results: where the
//! expected-loss minimizers sit, how their norms scale with `kappa`, how masking
//! distorts the direction, a handful of scalar inequalities, the pair-batch
//! partition, and a Gaussian norm tail bound.
//!
//! Each check returns a [`CheckReport`]. `worst_violation` is measured net of
//! the check's tolerance, so a check passes iff it is `<= 0`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expected::{ExpectedErm, ExpectedMask, ExpectedMixup};
use crate::losses::logistic;
use crate::losses::scheme::{MaskScheme, MixupScheme};
use crate::maxmargin::{solve_max_margin, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::minimize::{newton_minimize, MinimizeResult, NewtonOptions, SecondOrder, Status};
use crate::model::{bayes_direction, cosine_similarity, sample_dataset, spectral_norm, Kappa, ProblemSpec};
use crate::quadrature::Quadrature;

const MAX_WITNESSES: usize = 20;

/// Outcome of one check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub worst_violation: f64,
    /// False when the check's premise does not hold; such reports pass vacuously.
    pub applicable: bool,
    pub witnesses: Vec<String>,
    pub seed: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

impl CheckReport {
    /// One JSON object `{name, passed, worst_violation, seed, ...}` on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

struct Tally {
    name: String,
    worst: f64,
    witnesses: Vec<String>,
    seed: Option<u64>,
    metrics: BTreeMap<String, f64>,
    applicable: bool,
}

impl Tally {
    fn new(name: &str, seed: Option<u64>) -> Self {
        Tally {
            name: name.into(),
            worst: f64::NEG_INFINITY,
            witnesses: Vec::new(),
            seed,
            metrics: BTreeMap::new(),
            applicable: true,
        }
    }

    /// Records `violation` (net of tolerance); positive or NaN means failure.
    fn record(&mut self, violation: f64, witness: impl FnOnce() -> String) {
        let v = if violation.is_nan() { f64::INFINITY } else { violation };
        self.worst = self.worst.max(v);
        if v > 0.0 && self.witnesses.len() < MAX_WITNESSES {
            self.witnesses.push(witness());
        }
    }

    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    fn finish(self) -> CheckReport {
        let worst = if self.worst == f64::NEG_INFINITY { 0.0 } else { self.worst };
        CheckReport {
            name: self.name,
            passed: worst <= 0.0,
            worst_violation: worst,
            applicable: self.applicable,
            witnesses: self.witnesses,
            seed: self.seed,
            metrics: self.metrics,
        }
    }
}

/// Minimizes a smooth convex `f` on `c >= 0` given `[f, f', f'']`. The minimizer
/// is bracketed by doubling until `f' > 0`, located by golden-section search,
/// then polished by safeguarded Newton steps on `f'`.
pub fn minimize_ray(profile: impl Fn(f64) -> Result<[f64; 3]>) -> Result<f64> {
    if profile(0.0)?[1] >= 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut doublings = 0;
    while profile(hi)?[1] <= 0.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::NotConverged("no sign change of the ray derivative".into()));
        }
    }
    let mut lo = 0.0;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let mut fa = profile(a)?[0];
    let mut fb = profile(b)?[0];
    for _ in 0..60 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = profile(a)?[0];
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = profile(b)?[0];
        }
    }
    // Re-establish a derivative bracket around the golden-section estimate.
    let mut c: f64 = 0.5 * (lo + hi);
    let (mut left, mut right): (f64, f64) = (0.0, hi.max(c) * 2.0 + 1.0);
    for _ in 0..100 {
        let [_, d1, d2] = profile(c)?;
        if d1 == 0.0 {
            return Ok(c);
        }
        if d1 < 0.0 {
            left = left.max(c);
        } else {
            right = right.min(c);
        }
        let mut next = if d2 > 0.0 { c - d1 / d2 } else { f64::NAN };
        if !(next > left && next < right) {
            next = 0.5 * (left + right);
        }
        if (next - c).abs() <= 4.0 * f64::EPSILON * c.abs() {
            return Ok(next);
        }
        c = next;
    }
    Ok(c)
}

fn newton_from_zero<O: SecondOrder>(obj: &O, d: usize) -> MinimizeResult {
    newton_minimize(obj, &DVector::zeros(d), &NewtonOptions { max_iters: 200, ..NewtonOptions::default() })
}

/// Newton from zero until steps stop making progress. The expected ERM loss at
/// large `kappa` is exponentially small near its minimizer, so an absolute
/// gradient tolerance stops far short of it.
fn newton_to_stationarity<O: SecondOrder>(obj: &O, d: usize) -> MinimizeResult {
    let opts = NewtonOptions { grad_tol: 0.0, max_iters: 400, ..NewtonOptions::default() };
    let mut r = newton_minimize(obj, &DVector::zeros(d), &opts);
    if r.status == Status::MaxIters && r.final_loss.is_finite() {
        r.status = Status::Converged;
    }
    r
}

fn kappa_of(k: f64) -> Result<Kappa> {
    Kappa::new(k)
}

/// For each `kappa`: the minimizer `c*` of the ERM loss along `c Sigma^{-1} mu`
/// lies in `[4 kappa / 3, 4 kappa]` (tolerance `1e-6 kappa`), and Newton on the
/// full expected loss recovers `c* Sigma^{-1} mu` to relative `1e-6` per coordinate.
pub fn check_erm_norm_bounds(spec: &ProblemSpec, kappas: &[f64], quad: &Quadrature) -> Result<CheckReport> {
    let mut t = Tally::new("erm_norm_bounds", None);
    let v = bayes_direction(spec)?;
    for &k in kappas {
        let s = spec.with_kappa(kappa_of(k)?)?;
        let erm = ExpectedErm::new(&s, quad);
        let c = minimize_ray(|c| erm.ray_profile(c))?;
        t.metric(format!("c_star[kappa={k}]"), c);
        let tol = 1e-6 * k;
        t.record((4.0 * k / 3.0 - tol) - c, || format!("kappa={k}: c*={c} below 4k/3"));
        t.record(c - (4.0 * k + tol), || format!("kappa={k}: c*={c} above 4k"));
        let r = newton_to_stationarity(&erm, spec.dim());
        if r.status != Status::Converged {
            t.record(f64::INFINITY, || format!("kappa={k}: Newton {:?}", r.status));
            continue;
        }
        let target = &v * c;
        let rel = r
            .w_star
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs() / b.abs())
            .fold(0.0, f64::max);
        t.record(rel - 1e-6, || format!("kappa={k}: Newton w* differs from c* ray by {rel:e}"));
    }
    Ok(t.finish())
}

/// Bounds on the Mixup minimizer along the Bayes ray, from the scheme alone:
/// `lower <= c* < upper`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MixupRayBounds {
    pub lower: f64,
    pub upper: f64,
    /// `E[min(lambda, 1 - lambda) |2 g(lambda) - 1|]`.
    pub spread: f64,
}

pub fn mixup_ray_bounds(spec: &ProblemSpec, scheme: &MixupScheme, quad: &Quadrature) -> Result<MixupRayBounds> {
    let s = spec.mahalanobis()?;
    let kinv = spec.kappa().inverse();
    let law = &scheme.law;
    let g = |l: f64| scheme.g(l);
    let num = law.expect(quad, |l| (2.0 * l - 1.0) * (2.0 * g(l) - 1.0));
    let spread_sq = law.expect(quad, |l| g(l).powi(2) + (1.0 - g(l)).powi(2));
    let tilt = law.expect(quad, |l| (2.0 * g(l) - 1.0).powi(2) + 2.0);
    let spread = law.expect(quad, |l| l.min(1.0 - l) * (2.0 * g(l) - 1.0).abs());
    Ok(MixupRayBounds {
        lower: num / (kinv * (2.0 * spread_sq + 1.0) + s * tilt),
        upper: 4.0 * std::f64::consts::LN_2 / (spread * s),
        spread,
    })
}

/// For each `n` and `kappa`: the Mixup minimizer `c*` along `Sigma^{-1} mu` is
/// positive, satisfies `lower <= c* < upper`, and over the `kappa` list varies by
/// less than 10% of its smallest value. The bounds do not involve `n`.
pub fn check_mixup_norm_bounds(
    spec: &ProblemSpec,
    scheme: &MixupScheme,
    ns: &[usize],
    kappas: &[f64],
    quad: &Quadrature,
) -> Result<CheckReport> {
    if !scheme.is_valid() {
        return Err(Error::InvalidScheme(format!("{scheme:?} does not satisfy the Mixup validity condition")));
    }
    let mut t = Tally::new("mixup_norm_bounds", None);
    for &n in ns {
        let mut stars = Vec::new();
        for &k in kappas {
            let s = spec.with_kappa(kappa_of(k)?)?;
            let b = mixup_ray_bounds(&s, scheme, quad)?;
            let mix = ExpectedMixup::new(&s, scheme, n, quad)?;
            let c = minimize_ray(|c| mix.ray_profile(c))?;
            t.metric(format!("c_star[n={n},kappa={k}]"), c);
            t.metric(format!("lower[kappa={k}]"), b.lower);
            t.metric(format!("upper[kappa={k}]"), b.upper);
            t.record(-c, || format!("n={n} kappa={k}: c*={c} not positive"));
            t.record(b.lower - c, || format!("n={n} kappa={k}: c*={c} below {}", b.lower));
            // Strict upper bound: equality counts as a violation.
            t.record(if c < b.upper { c - b.upper } else { f64::MIN_POSITIVE.max(c - b.upper) }, || {
                format!("n={n} kappa={k}: c*={c} not below {}", b.upper)
            });
            stars.push(c);
        }
        let lo = stars.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = stars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = (hi - lo) / lo;
        t.metric(format!("relative_spread[n={n}]"), spread);
        t.record(spread - 0.1, || format!("n={n}: c* varies by {:.1}% across kappa", 100.0 * spread));
    }
    Ok(t.finish())
}

/// Newton minimizers of the expected ERM loss and, for each `n`, the expected
/// Mixup loss have cosine similarity at least `1 - 1e-8` with `Sigma^{-1} mu`.
pub fn check_directional_optimality(
    spec: &ProblemSpec,
    scheme: &MixupScheme,
    kappas: &[f64],
    ns: &[usize],
    quad: &Quadrature,
) -> Result<CheckReport> {
    let mut t = Tally::new("directional_optimality", None);
    let v = bayes_direction(spec)?;
    for &k in kappas {
        let s = spec.with_kappa(kappa_of(k)?)?;
        let mut runs: Vec<(String, MinimizeResult)> = vec![("erm".into(), newton_to_stationarity(&ExpectedErm::new(&s, quad), s.dim()))];
        for &n in ns {
            let mix = ExpectedMixup::new(&s, scheme, n, quad)?;
            runs.push((format!("mixup n={n}"), newton_from_zero(&mix, s.dim())));
        }
        for (label, r) in runs {
            if r.status != Status::Converged {
                t.record(f64::INFINITY, || format!("kappa={k} {label}: Newton {:?}", r.status));
                continue;
            }
            let sim = cosine_similarity(&r.w_star, &v)?;
            t.metric(format!("one_minus_sim[{label},kappa={k}]"), 1.0 - sim);
            t.record((1.0 - 1e-8) - sim, || format!("kappa={k} {label}: sim={sim}"));
        }
    }
    Ok(t.finish())
}

/// Checks the mask-law spanning assumption, refusing schemes where it fails.
fn require_mask_assumption(spec: &ProblemSpec, scheme: &MaskScheme) -> Result<()> {
    scheme.validate(Some(spec.dim()))?;
    let mu: Vec<f64> = spec.mu().iter().copied().collect();
    if !scheme.assumption_holds(&mu) {
        return Err(Error::InvalidScheme(
            "mask support does not span R^d with interior lambda; the noiseless mask loss has no unique minimizer".into(),
        ));
    }
    Ok(())
}

/// Newton minimizers of the expected mask loss approach the noiseless-limit
/// minimizer: distances are nonincreasing along `kappas` (ascending) and at most
/// `1e-2` at the last one. The limit minimizer must also be the same from two
/// starting points (to `1e-8`).
pub fn check_mask_limit(
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    kappas: &[f64],
    n: usize,
    quad: &Quadrature,
) -> Result<CheckReport> {
    require_mask_assumption(spec, scheme)?;
    let mut t = Tally::new("mask_limit", None);
    let d = spec.dim();
    let limit = ExpectedMask::infinite(spec, scheme, n, quad)?;
    let opts = NewtonOptions { max_iters: 200, ..NewtonOptions::default() };
    let a = newton_minimize(&limit, &DVector::zeros(d), &opts);
    let mut start = DVector::zeros(d);
    start[0] = 5.0;
    let b = newton_minimize(&limit, &start, &opts);
    for (label, r) in [("zero", &a), ("5 e1", &b)] {
        if r.status != Status::Converged {
            t.record(f64::INFINITY, || format!("noiseless Newton from {label}: {:?}", r.status));
        }
    }
    let gap = (&a.w_star - &b.w_star).norm();
    t.metric("limit_start_gap", gap);
    t.record(gap - 1e-8, || format!("noiseless minimizers from two starts differ by {gap:e}"));
    let mut prev = f64::INFINITY;
    let mut last = f64::INFINITY;
    for &k in kappas {
        let s = spec.with_kappa(kappa_of(k)?)?;
        let r = newton_minimize(&ExpectedMask::new(&s, scheme, n, quad)?, &DVector::zeros(d), &opts);
        if r.status != Status::Converged {
            t.record(f64::INFINITY, || format!("kappa={k}: Newton {:?}", r.status));
            continue;
        }
        let dist = (&r.w_star - &a.w_star).norm();
        t.metric(format!("distance[kappa={k}]"), dist);
        t.record(dist - prev, || format!("kappa={k}: distance {dist:e} grew from {prev:e}"));
        prev = dist;
        last = dist;
    }
    t.record(last - 1e-2, || format!("final distance {last:e} above 1e-2"));
    Ok(t.finish())
}

/// Whether `mu` is an eigenvector of `Sigma`, in which case every loss here is
/// minimized along `mu` and no distortion can show.
fn mu_is_eigenvector(spec: &ProblemSpec) -> bool {
    let sm = spec.sigma() * spec.mu();
    let rayleigh = spec.mu().dot(&sm) / spec.mu().norm_squared();
    (&sm - spec.mu() * rayleigh).norm() <= 1e-10 * sm.norm()
}

/// The noiseless mask minimizer points away from `Sigma^{-1} mu`
/// (`sim < 1 - 1e-3`), while the Mixup minimizer at the problem's `kappa` does not
/// (`sim >= 1 - 1e-8`).
pub fn check_mask_distortion(
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    mixup: &MixupScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<CheckReport> {
    let mut t = Tally::new("mask_distortion", None);
    if mu_is_eigenvector(spec) {
        t.applicable = false;
        return Ok(t.finish());
    }
    require_mask_assumption(spec, scheme)?;
    let v = bayes_direction(spec)?;
    let mask = newton_from_zero(&ExpectedMask::infinite(spec, scheme, n, quad)?, spec.dim());
    let mix = newton_from_zero(&ExpectedMixup::new(spec, mixup, n, quad)?, spec.dim());
    for (label, r) in [("mask", &mask), ("mixup", &mix)] {
        if r.status != Status::Converged {
            t.record(f64::INFINITY, || format!("{label}: Newton {:?}", r.status));
        }
    }
    let sim_mask = cosine_similarity(&mask.w_star, &v)?;
    let sim_mix = cosine_similarity(&mix.w_star, &v)?;
    t.metric("sim_mask", sim_mask);
    t.metric("sim_mixup", sim_mix);
    t.record(sim_mask - (1.0 - 1e-3), || format!("mask sim {sim_mask} not below 1 - 1e-3"));
    t.record((1.0 - 1e-8) - sim_mix, || format!("mixup sim {sim_mix} below 1 - 1e-8"));
    Ok(t.finish())
}

/// Relative rounding allowance for inequalities that hold with equality somewhere.
fn rounding(lhs: f64, rhs: f64) -> f64 {
    1e-15 * (lhs.abs() + rhs.abs())
}

/// Scalar inequalities on random and adversarial inputs:
///
/// * `l''(z) >= exp(-z^2/2) / 4` and `z / (1 + e^z) >= z/2 - z^2/4` on `grid_size`
///   random `z` in `[-50, 50]` plus edge points;
/// * `0 <= E[l(m + s Z)] - l(m) <= s` on a grid `m in [-20, 20]`, `s in (0, 10]`;
/// * `E[exp(|z|)] <= exp(4 ||M||) + 2^(k/2)` for `z ~ N(0, M)` by Monte Carlo
///   (within 4 standard errors) for random positive definite `M`, `k <= 6`, `||M|| <= 1`.
pub fn check_pointwise_inequalities(grid_size: usize, seed: u64, quad: &Quadrature) -> CheckReport {
    let mut t = Tally::new("pointwise_inequalities", Some(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs: Vec<f64> = vec![0.0, -0.0, 1e-300, -1e-300, 1e-8, -1e-8, 1e-3, -1e-3, 1.0, -1.0, 50.0, -50.0, 36.7, -36.7];
    zs.extend((0..grid_size).map(|_| rng.random_range(-50.0..=50.0)));
    for &z in &zs {
        let lhs = logistic::d2(z);
        let rhs = 0.25 * (-0.5 * z * z).exp();
        t.record(rhs - lhs - rounding(lhs, rhs), || format!("curvature bound fails at z={z}: {lhs} < {rhs}"));
        let lhs = z / (1.0 + z.exp());
        let rhs = 0.5 * z - 0.25 * z * z;
        t.record(rhs - lhs - rounding(lhs, rhs), || format!("linear-quadratic bound fails at z={z}: {lhs} < {rhs}"));
    }

    let mut worst_small = 0.0f64;
    for i in 0..=80 {
        let m = -20.0 + 0.5 * i as f64;
        for s in [1e-4, 1e-3, 0.01, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 7.5, 10.0] {
            let e = quad.normal_expectation(m, s, |z| [logistic::loss(z)])[0];
            let base = logistic::loss(m);
            let gap = e - base;
            // Quadrature sums carry rounding of order 64 eps relative to the loss.
            let tol = 64.0 * f64::EPSILON * (1.0 + base.abs());
            t.record(-gap - tol, || format!("Jensen gap negative at m={m}, s={s}: {gap:e}"));
            t.record(gap - s - tol, || format!("gap above s at m={m}, s={s}: {gap}"));
            if s == 1e-4 {
                worst_small = worst_small.max(gap);
            }
        }
    }
    t.metric("max_gap_at_s_1e-4", worst_small);

    for trial in 0..12 {
        let k = 1 + trial % 6;
        let m = random_pd(&mut rng, k, 1.0);
        let norm = spectral_norm(&m);
        let chol = m.clone().cholesky().expect("positive definite").unpack();
        let draws = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let z = &chol * DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = z.norm().exp();
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
        let bound = (4.0 * norm).exp() + 2f64.powf(k as f64 / 2.0);
        t.record(mean - bound - 4.0 * se, || format!("exp-norm moment {mean} above {bound} (k={k})"));
    }
    t.finish()
}

/// Random symmetric positive definite `k x k` matrix with spectral norm `top`.
fn random_pd(rng: &mut ChaCha8Rng, k: usize, top: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let mut eig: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    eig[0] = 1.0;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(k, eig.iter().map(|e| e * top)));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Batches of ordered index pairs (0-based) covering the off-diagonal `N x N`
/// grid, each batch using every index at most once, plus the diagonal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairPartition {
    pub n: usize,
    pub batches: Vec<Vec<(usize, usize)>>,
    pub diagonal: Vec<(usize, usize)>,
}

/// Modular-sum construction. For odd `N`, batch `k` (and its mirror) holds the
/// pairs `i < j` with `i + j = k (mod N)`; the fixed point `2i = k` is left out.
/// For even `N` the same is done on `N - 1` indices and the left-out index is
/// paired with `N`. Indices are 1-based in the construction and 0-based in the output.
pub fn build_pair_partition(n: usize) -> Result<PairPartition> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pair partition needs N >= 2, got {n}")));
    }
    let odd = n % 2 == 1;
    let base = if odd { n } else { n - 1 };
    let mut batches = Vec::with_capacity(2 * base);
    for k in 1..=base {
        let mut forward = Vec::new();
        for i in 1..=base {
            for j in (i + 1)..=base {
                if (i + j) % base == k % base {
                    forward.push((i - 1, j - 1));
                }
            }
        }
        if !odd {
            let ik = (1..=base).find(|&i| (2 * i) % base == k % base).expect("2 is invertible mod an odd base");
            forward.push((ik - 1, n - 1));
        }
        let mirror = forward.iter().map(|&(i, j)| (j, i)).collect();
        batches.push(forward);
        batches.push(mirror);
    }
    Ok(PairPartition { n, batches, diagonal: (0..n).map(|i| (i, i)).collect() })
}

/// Exhaustive structural check of [`build_pair_partition`] for each `N` in `range`:
/// batch count, batch sizes, index-disjointness within batches, and exact cover.
pub fn check_pair_partition(range: std::ops::RangeInclusive<usize>) -> Result<CheckReport> {
    let mut t = Tally::new("pair_partition", None);
    for n in range {
        let p = build_pair_partition(n)?;
        let (count, size) = if n % 2 == 1 { (2 * n, (n - 1) / 2) } else { (2 * (n - 1), n / 2) };
        t.record(if p.batches.len() == count { -1.0 } else { 1.0 }, || {
            format!("N={n}: {} batches, expected {count}", p.batches.len())
        });
        let mut seen = vec![0u32; n * n];
        for (b, batch) in p.batches.iter().enumerate() {
            t.record(if batch.len() == size { -1.0 } else { 1.0 }, || {
                format!("N={n}: batch {b} has {} pairs, expected {size}", batch.len())
            });
            let mut used = vec![false; n];
            let mut clash = false;
            for &(i, j) in batch {
                clash |= i == j || used[i] || used[j];
                used[i] = true;
                used[j] = true;
                seen[i * n + j] += 1;
            }
            t.record(if clash { 1.0 } else { -1.0 }, || format!("N={n}: batch {b} reuses an index"));
        }
        for &(i, j) in &p.diagonal {
            seen[i * n + j] += 1;
        }
        let bad = seen.iter().filter(|&&c| c != 1).count();
        t.record(if bad == 0 { -1.0 } else { 1.0 }, || format!("N={n}: {bad} cells not covered exactly once"));
    }
    Ok(t.finish())
}

/// Empirical frequency of `|z| > Tr(M)^{1/2} + (2 ||M|| log(1/delta))^{1/2}` over
/// `trials` draws `z ~ N(0, M)` is at most `delta` plus three binomial standard errors.
/// At `delta = 1` the bound is vacuous and the report says so.
pub fn check_gaussian_norm_bound(m: &DMatrix<f64>, delta: f64, trials: usize, seed: u64) -> Result<CheckReport> {
    if !(delta > 0.0 && delta <= 1.0) || trials == 0 {
        return Err(Error::InvalidArgument(format!("need delta in (0, 1] and trials > 0, got {delta}, {trials}")));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("M is not positive definite".into()))?
        .unpack();
    let mut t = Tally::new("gaussian_norm_bound", Some(seed));
    let bound = m.trace().sqrt() + (2.0 * spectral_norm(m) * (1.0 / delta).ln()).sqrt();
    t.metric("bound", bound);
    if delta == 1.0 {
        t.applicable = false;
        t.record(-1.0, String::new);
        return Ok(t.finish());
    }
    let k = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let z = &chol * DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        if z.norm() > bound {
            hits += 1;
        }
    }
    let freq = hits as f64 / trials as f64;
    let limit = delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt();
    t.metric("frequency", freq);
    t.record(freq - limit, || format!("exceedance frequency {freq} above {limit}"));
    Ok(t.finish())
}

/// Over `trials` seeded datasets of size `n`: the data are separable in at least
/// 95% of trials, and among separable trials the max-margin direction has
/// `sim(w_bar, Sigma^{-1} mu) < (1 + sim(mu, Sigma^{-1} mu)) / 2` in at least 95%.
pub fn check_max_margin_event(spec: &ProblemSpec, n: usize, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut t = Tally::new("max_margin_event", Some(seed));
    let v = bayes_direction(spec)?;
    let threshold = (1.0 + cosine_similarity(spec.mu(), &v)?) / 2.0;
    let outcomes: Vec<Result<Option<f64>>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let data = sample_dataset(spec, n, seed.wrapping_add(i))?;
            let sol = solve_max_margin(&data, DEFAULT_TOL, DEFAULT_MAX_ITERS);
            Ok(if sol.feasible { Some(cosine_similarity(&sol.w_bar, &v)?) } else { None })
        })
        .collect();
    let sims: Vec<Option<f64>> = outcomes.into_iter().collect::<Result<_>>()?;
    let separable: Vec<f64> = sims.iter().flatten().copied().collect();
    let sep_rate = separable.len() as f64 / trials as f64;
    let below = separable.iter().filter(|&&s| s < threshold).count() as f64;
    let below_rate = if separable.is_empty() { 0.0 } else { below / separable.len() as f64 };
    t.metric("threshold", threshold);
    t.metric("separable_rate", sep_rate);
    t.metric("below_threshold_rate", below_rate);
    t.record(0.95 - sep_rate, || format!("separable in {:.1}% of trials", 100.0 * sep_rate));
    t.record(0.95 - below_rate, || format!("sim below threshold in {:.1}% of separable trials", 100.0 * below_rate));
    Ok(t.finish())
}

/// Named groups of checks for the command line.
pub const SUITES: [&str; 9] = [
    "inequalities",
    "partition",
    "norm-bound",
    "direction",
    "erm-norm",
    "mixup-norm",
    "mask",
    "max-margin",
    "all",
];

type Job = Box<dyn Fn() -> Result<CheckReport> + Send + Sync>;

/// Runs a named suite on the built-in d=10 problem (and the d=2 toy problem for
/// the mask limit). Checks run in parallel; reports come back in a fixed order.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckReport>> {
    use crate::model::{default_spec_d10, toy_spec_d2};
    let quad = Quadrature::default();
    let spec = default_spec_d10(Kappa::Finite(1.0));
    let beta = MixupScheme::beta(1.0)?;
    let bern = MaskScheme::bernoulli(1.0)?;
    let mut jobs: Vec<(&str, Job)> = Vec::new();
    let want = |s: &str| name == "all" || name == s;
    if !SUITES.contains(&name) {
        return Err(Error::Config(format!("unknown suite {name:?}; expected one of {}", SUITES.join(", "))));
    }
    if want("inequalities") {
        let q = quad.clone();
        jobs.push(("inequalities", Box::new(move || Ok(check_pointwise_inequalities(100_000, seed, &q)))));
    }
    if want("partition") {
        jobs.push(("partition", Box::new(|| check_pair_partition(2..=64))));
    }
    if want("norm-bound") {
        let s = spec.clone();
        jobs.push((
            "norm-bound",
            Box::new(move || {
                let settings = [
                    (DMatrix::identity(1, 1), 0.5),
                    (s.with_kappa(Kappa::Finite(50.0))?.sigma() / 50.0, 0.01),
                    (DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 1.0, 0.5])), 0.05),
                ];
                let mut merged = Tally::new("gaussian_norm_bound", Some(seed));
                for (i, (m, delta)) in settings.iter().enumerate() {
                    let r = check_gaussian_norm_bound(m, *delta, 100_000, seed.wrapping_add(i as u64))?;
                    merged.metric(format!("frequency[{i}]"), r.metrics["frequency"]);
                    merged.record(r.worst_violation, || r.witnesses.join("; "));
                }
                Ok(merged.finish())
            }),
        ));
    }
    if want("direction") {
        let (s, q, b) = (spec.clone(), quad.clone(), beta.clone());
        jobs.push((
            "direction",
            Box::new(move || check_directional_optimality(&s, &b, &[0.5, 1.0, 2.0, 5.0, 10.0], &[2, 500], &q)),
        ));
    }
    if want("erm-norm") {
        let (s, q) = (spec.clone(), quad.clone());
        jobs.push(("erm-norm", Box::new(move || check_erm_norm_bounds(&s, &[0.5, 1.0, 2.0, 5.0, 10.0, 20.0], &q))));
    }
    if want("mixup-norm") {
        let (s, q, b) = (spec.clone(), quad.clone(), beta.clone());
        jobs.push(("mixup-norm", Box::new(move || check_mixup_norm_bounds(&s, &b, &[2, 500], &[1.0, 5.0, 50.0], &q))));
    }
    if want("mask") {
        let (q, m) = (quad.clone(), bern.clone());
        jobs.push((
            "mask-limit",
            Box::new(move || check_mask_limit(&toy_spec_d2(Kappa::Finite(1.0)), &m, &[10.0, 1e2, 1e3, 1e4], 500, &q)),
        ));
        let (s, q, m, b) = (spec.clone(), quad.clone(), bern.clone(), beta.clone());
        jobs.push(("mask-distortion", Box::new(move || check_mask_distortion(&s, &m, &b, 500, &q))));
    }
    if want("max-margin") {
        let s = spec.with_kappa(Kappa::Finite(50.0))?;
        jobs.push(("max-margin", Box::new(move || check_max_margin_event(&s, 64, 200, seed))));
    }
    jobs.par_iter().map(|(_, job)| job()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::scheme::{LambdaLaw, MaskAtom, MixMap};
    use crate::model::{default_spec_d10, toy_spec_d2};
    use proptest::prelude::*;

    fn quad() -> Quadrature {
        Quadrature::default()
    }

    fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
        let steps = ((hi - lo) / step).round() as usize;
        (0..=steps)
            .map(|i| lo + step * i as f64)
            .map(|c| (c, f(c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn minimize_ray_on_a_quadratic() {
        let c = minimize_ray(|c| Ok([(c - 3.25).powi(2), 2.0 * (c - 3.25), 2.0])).unwrap();
        assert!((c - 3.25).abs() < 1e-14);
        let c = minimize_ray(|c| Ok([(c + 1.0).powi(2), 2.0 * (c + 1.0), 2.0])).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn erm_ray_minimizer_matches_grid_search() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let erm = ExpectedErm::new(&spec, &quad());
        let c = minimize_ray(|c| erm.ray_profile(c)).unwrap();
        assert!((4.0 / 3.0..=4.0).contains(&c));
        let g = grid_argmin(|c| erm.ray_profile(c).unwrap()[0], 0.0, 8.0, 1e-4);
        assert!((g - c).abs() <= 1e-4, "{g} vs {c}");
    }

    #[test]
    fn erm_norm_bounds_hold() {
        let r = check_erm_norm_bounds(&default_spec_d10(Kappa::Finite(1.0)), &[1.0, 10.0], &quad()).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.metrics["c_star[kappa=10]"] >= 40.0 / 3.0);
    }

    #[test]
    fn mixup_ray_minimizer_matches_grid_search() {
        let spec = default_spec_d10(Kappa::Finite(2.0));
        let mix = ExpectedMixup::new(&spec, &MixupScheme::beta(1.0).unwrap(), 500, &quad()).unwrap();
        let c = minimize_ray(|c| mix.ray_profile(c)).unwrap();
        let b = mixup_ray_bounds(&spec, &MixupScheme::beta(1.0).unwrap(), &quad()).unwrap();
        let g = grid_argmin(|c| mix.ray_profile(c).unwrap()[0], 0.0, b.upper, 1e-4);
        assert!((g - c).abs() <= 1e-4, "{g} vs {c}");
    }

    #[test]
    fn uniform_spread_is_one_twelfth() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let b = mixup_ray_bounds(&spec, &MixupScheme::beta(1.0).unwrap(), &quad()).unwrap();
        // Midpoint rule on a fine grid as an independent integrator.
        let k = 2_000_000;
        let mid: f64 = (0..k)
            .map(|i| {
                let l = (i as f64 + 0.5) / k as f64;
                l.min(1.0 - l) * (2.0 * l - 1.0).abs()
            })
            .sum::<f64>()
            / k as f64;
        assert!((mid - 1.0 / 12.0).abs() < 1e-10);
        assert!((b.spread - 1.0 / 12.0).abs() < 1e-10);
        let s = spec.mahalanobis().unwrap();
        assert!((b.upper - 48.0 * std::f64::consts::LN_2 / s).abs() < 1e-9);
    }

    #[test]
    fn invalid_mixup_scheme_is_rejected() {
        let half = MixupScheme::unchecked(LambdaLaw::PointMass { value: 0.5 }, MixMap::Identity).unwrap();
        let r = check_mixup_norm_bounds(&default_spec_d10(Kappa::Finite(1.0)), &half, &[2], &[1.0], &quad());
        assert!(matches!(r, Err(Error::InvalidScheme(_))));
    }

    #[test]
    fn direction_check_passes_at_small_scale() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let r = check_directional_optimality(&spec, &MixupScheme::beta(1.0).unwrap(), &[1.0], &[10], &quad()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mask_limit_rejects_non_spanning_support() {
        let spec = toy_spec_d2(Kappa::Finite(1.0));
        let ones = MaskScheme::finite(vec![MaskAtom { mask: vec![true, true], lambda: LambdaLaw::Uniform, prob: 1.0 }]).unwrap();
        assert!(check_mask_limit(&spec, &ones, &[10.0], 10, &quad()).is_err());
    }

    #[test]
    fn mask_distortion_not_applicable_for_isotropic_covariance() {
        let spec = ProblemSpec::new(
            DVector::from_row_slice(&[0.6, 0.8]),
            DMatrix::identity(2, 2),
            Kappa::Finite(1.0),
        )
        .unwrap();
        let r = check_mask_distortion(
            &spec,
            &MaskScheme::bernoulli(1.0).unwrap(),
            &MixupScheme::beta(1.0).unwrap(),
            10,
            &quad(),
        )
        .unwrap();
        assert!(!r.applicable);
        assert!(r.passed);
    }

    #[test]
    fn inequality_edge_points() {
        assert_eq!(logistic::d2(0.0), 0.25);
        assert_eq!(0.0 / (1.0 + 0f64.exp()), 0.5 * 0.0 - 0.25 * 0.0);
        let r = check_pointwise_inequalities(2000, 1, &quad());
        assert!(r.passed, "{r:?}");
        assert!(r.metrics["max_gap_at_s_1e-4"] <= 1e-4);
    }

    #[test]
    fn partition_counts() {
        let p3 = build_pair_partition(3).unwrap();
        assert_eq!(p3.batches.len(), 6);
        assert!(p3.batches.iter().all(|b| b.len() == 1));
        assert_eq!(p3.diagonal.len(), 3);
        let p4 = build_pair_partition(4).unwrap();
        assert_eq!(p4.batches.len(), 6);
        assert!(p4.batches.iter().all(|b| b.len() == 2));
        assert_eq!(p4.batches.iter().map(Vec::len).sum::<usize>() + p4.diagonal.len(), 16);
        assert!(build_pair_partition(1).is_err());
    }

    #[test]
    fn partition_structure_up_to_64() {
        let r = check_pair_partition(2..=64).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gaussian_norm_bound_examples() {
        let m = DMatrix::identity(1, 1);
        let r = check_gaussian_norm_bound(&m, 0.5, 100_000, 3).unwrap();
        assert!((r.metrics["bound"] - (1.0 + (2.0 * std::f64::consts::LN_2).sqrt())).abs() < 1e-15);
        assert!(r.passed);
        assert!(r.metrics["frequency"] < 0.1);
        let r = check_gaussian_norm_bound(&m, 1.0, 10, 3).unwrap();
        assert!(!r.applicable && r.passed);
        assert_eq!(r.metrics["bound"], 1.0);
        assert!(check_gaussian_norm_bound(&m, 0.0, 10, 3).is_err());
    }

    #[test]
    fn reports_serialize_as_json_lines() {
        let r = check_pair_partition(2..=4).unwrap();
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["name"], "pair_partition");
        assert_eq!(v["passed"], true);
        assert!(v["worst_violation"].is_number());
    }

    #[test]
    fn reports_are_reproducible() {
        let a = check_pointwise_inequalities(500, 9, &quad());
        let b = check_pointwise_inequalities(500, 9, &quad());
        assert_eq!(a.to_json_line(), b.to_json_line());
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("nope", 0), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_batches_are_disjoint(n in 2usize..200) {
            let p = build_pair_partition(n).unwrap();
            for b in &p.batches {
                let mut used = vec![false; n];
                for &(i, j) in b {
                    prop_assert!(i != j && !used[i] && !used[j]);
                    used[i] = true;
                    used[j] = true;
                }
            }
            let total: usize = p.batches.iter().map(Vec::len).sum();
            prop_assert_eq!(total, n * (n - 1));
        }
    }
}
