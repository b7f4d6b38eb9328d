//! Population (expected) versions of the three training losses, by quadrature.
//!
//! Every expected loss is a finite or quadrature-weighted mixture of terms
//! `E[l(w^T x)]` with `x ~ N(u, C)`. Each term reduces to the 1-D integral
//! `E[l(m + s Z)]` with `m = w^T u`, `s^2 = w^T C w`, and its derivatives follow
//! from Gaussian integration by parts:
//!
//! ```text
//! grad = E[l'] u + E[l''] C w
//! hess = E[l''] (u u^T + C) + E[l'''] (C w u^T + u w^T C) + E[l''''] C w w^T C
//! ```
//!
//! A term `l(-w^T x)` is the same integral with `u` negated, and by
//! `l(-t) = l(t) + t` it reuses the moments of the unnegated term.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::losses::logistic::{self, CompensatedSum};
use crate::losses::scheme::{MaskScheme, MixupScheme};
use crate::minimize::{Objective, SecondOrder};
use crate::model::{Kappa, ProblemSpec};
use crate::quadrature::Quadrature;

/// Largest dimension for which the Bernoulli mask law is enumerated.
pub const MAX_ENUMERATED_DIM: usize = 16;

/// `[E l, E l', E l'', E l''', E l'''']` at `m + s Z`, `s = sqrt(s2)`.
fn moments(quad: &Quadrature, m: f64, s2: f64) -> [f64; 5] {
    quad.normal_expectation(m, s2.max(0.0).sqrt(), logistic::derivatives)
}

/// Moments of `l(-t)` from those of `l(t)`, where `t` has mean `m`.
fn reflect(e: [f64; 5], m: f64) -> [f64; 5] {
    [e[0] + m, -e[1] - 1.0, e[2], -e[3], e[4]]
}

/// Scalar coefficients of a mixture whose terms all have `u = a mu` and `C = c Sigma`.
#[derive(Clone, Copy, Debug, Default)]
struct RayTerms {
    value: f64,
    g_mu: f64,
    g_sigma: f64,
    h_mumu: f64,
    h_sigma: f64,
    h_cross: f64,
    h_outer: f64,
}

impl RayTerms {
    fn add(&mut self, weight: f64, a: f64, c: f64, e: [f64; 5]) {
        if weight == 0.0 {
            return;
        }
        self.value += weight * e[0];
        self.g_mu += weight * e[1] * a;
        self.g_sigma += weight * e[2] * c;
        self.h_mumu += weight * e[2] * a * a;
        self.h_sigma += weight * e[2] * c;
        self.h_cross += weight * e[3] * a * c;
        self.h_outer += weight * e[4] * c * c;
    }

    fn assemble(&self, mu: &DVector<f64>, sw: &DVector<f64>, sigma: &DMatrix<f64>, hess: bool) -> Evaluation {
        let grad = mu * self.g_mu + sw * self.g_sigma;
        let hess = hess.then(|| {
            let mut h = sigma * self.h_sigma;
            h.ger(self.h_mumu, mu, mu, 1.0);
            h.ger(self.h_cross, sw, mu, 1.0);
            h.ger(self.h_cross, mu, sw, 1.0);
            h.ger(self.h_outer, sw, sw, 1.0);
            h
        });
        Evaluation { value: self.value, grad, hess }
    }

    /// Value and first two derivatives in `c` along `w = c Sigma^{-1} mu`, where
    /// `mu^T w = c s`, `Sigma w = c mu` and `w^T Sigma w = c^2 s`.
    fn along_ray(&self, c: f64, s: f64) -> [f64; 3] {
        [
            self.value,
            s * (self.g_mu + c * self.g_sigma),
            s * s * self.h_mumu + s * self.h_sigma + 2.0 * c * s * s * self.h_cross + c * c * s * s * self.h_outer,
        ]
    }
}

/// Value, gradient and (optionally) Hessian.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: Option<DMatrix<f64>>,
}

fn erm_terms(quad: &Quadrature, kinv: f64, m: f64, q: f64) -> RayTerms {
    let mut t = RayTerms::default();
    t.add(1.0, 1.0, kinv, moments(quad, m, kinv * q));
    t
}

/// `m = w^T mu`, `q = w^T Sigma w`.
fn mixup_terms(quad: &Quadrature, scheme: &MixupScheme, n: usize, kinv: f64, m: f64, q: f64) -> RayTerms {
    let off = (n - 1) as f64 / (2 * n) as f64;
    let mut t = RayTerms::default();
    for (lambda, rho) in scheme.law.nodes(quad) {
        let g = scheme.g(lambda);
        let c = (g * g + (1.0 - g) * (1.0 - g)) * kinv;
        let s2 = c * q;
        // Same-label pairs.
        t.add(off * rho, 1.0, c, moments(quad, m, s2));
        // Opposite-label pairs, soft label lambda on the side of x_i.
        let b = 2.0 * g - 1.0;
        let e = moments(quad, b * m, s2);
        t.add(off * rho * lambda, b, c, e);
        t.add(off * rho * (1.0 - lambda), -b, c, reflect(e, b * m));
    }
    t.add(1.0 / n as f64, 1.0, kinv, moments(quad, m, kinv * q));
    t
}

fn is_zero(w: &DVector<f64>) -> bool {
    w.iter().all(|&v| v == 0.0)
}

/// Expected logistic ERM loss `E[l((2y-1) w^T x)]`. Infinite `kappa` gives the
/// exact limit `l(w^T mu)`.
#[derive(Clone, Debug)]
pub struct ExpectedErm {
    spec: ProblemSpec,
    quad: Quadrature,
}

impl ExpectedErm {
    pub fn new(spec: &ProblemSpec, quad: &Quadrature) -> Self {
        ExpectedErm { spec: spec.clone(), quad: quad.clone() }
    }

    pub fn eval(&self, w: &DVector<f64>, hess: bool) -> Result<Evaluation> {
        check_dim(self.spec.dim(), w.len())?;
        let sw = self.spec.sigma() * w;
        let t = erm_terms(&self.quad, self.spec.kappa().inverse(), w.dot(self.spec.mu()), w.dot(&sw));
        let mut e = t.assemble(self.spec.mu(), &sw, self.spec.sigma(), hess);
        if is_zero(w) {
            e.value = std::f64::consts::LN_2;
        }
        Ok(e)
    }

    /// `[f, f', f'']` of `f(c) = E[l(c X)]`, `X ~ N(s, s / kappa)`, the loss along
    /// `w = c Sigma^{-1} mu`.
    pub fn ray_profile(&self, c: f64) -> Result<[f64; 3]> {
        let s = self.spec.mahalanobis()?;
        let t = erm_terms(&self.quad, self.spec.kappa().inverse(), c * s, c * c * s);
        Ok(t.along_ray(c, s))
    }
}

/// Expected Mixup loss over all `n^2` ordered pairs of an `n`-sample dataset.
#[derive(Clone, Debug)]
pub struct ExpectedMixup {
    spec: ProblemSpec,
    scheme: MixupScheme,
    n: usize,
    quad: Quadrature,
}

impl ExpectedMixup {
    pub fn new(spec: &ProblemSpec, scheme: &MixupScheme, n: usize, quad: &Quadrature) -> Result<Self> {
        if !scheme.is_valid() {
            return Err(Error::InvalidScheme(format!("{scheme:?} does not satisfy the Mixup validity condition")));
        }
        Self::unchecked(spec, scheme, n, quad)
    }

    /// Accepts schemes that fail the validity condition.
    pub fn unchecked(spec: &ProblemSpec, scheme: &MixupScheme, n: usize, quad: &Quadrature) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("Mixup needs n >= 2, got {n}")));
        }
        Ok(ExpectedMixup { spec: spec.clone(), scheme: scheme.clone(), n, quad: quad.clone() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eval(&self, w: &DVector<f64>, hess: bool) -> Result<Evaluation> {
        check_dim(self.spec.dim(), w.len())?;
        let sw = self.spec.sigma() * w;
        let t = mixup_terms(
            &self.quad,
            &self.scheme,
            self.n,
            self.spec.kappa().inverse(),
            w.dot(self.spec.mu()),
            w.dot(&sw),
        );
        let mut e = t.assemble(self.spec.mu(), &sw, self.spec.sigma(), hess);
        if is_zero(w) {
            e.value = std::f64::consts::LN_2;
        }
        Ok(e)
    }

    /// `[f, f', f'']` of the loss along `w = c Sigma^{-1} mu`.
    pub fn ray_profile(&self, c: f64) -> Result<[f64; 3]> {
        let s = self.spec.mahalanobis()?;
        let t = mixup_terms(&self.quad, &self.scheme, self.n, self.spec.kappa().inverse(), c * s, c * c * s);
        Ok(t.along_ray(c, s))
    }
}

/// One mask in the support of a mask law, with its three mixture weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskEntry {
    /// Bit `k` set means coordinate `k` comes from the first point.
    pub mask: u64,
    /// `E[lambda 1{M = mask}] / 2`.
    pub a: f64,
    /// `E[(1 - lambda) 1{M = mask}] / 2`.
    pub b: f64,
    /// `P[M = mask] / 2`.
    pub c: f64,
}

/// Mixture weights of the expected mask loss with the shifted means and
/// covariances `mu_k = mu * (2M - 1)`, `Sigma_k = Sigma * (M M^T + (1-M)(1-M)^T)`.
#[derive(Clone, Debug)]
pub struct MaskCoefficients {
    d: usize,
    entries: Vec<MaskEntry>,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl MaskCoefficients {
    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mask(&self, k: usize) -> Vec<bool> {
        (0..self.d).map(|i| self.entries[k].mask >> i & 1 == 1).collect()
    }

    pub fn mu_k(&self, k: usize) -> DVector<f64> {
        shifted_mean(&self.mu, self.entries[k].mask)
    }

    pub fn sigma_k(&self, k: usize) -> DMatrix<f64> {
        let bits = self.entries[k].mask;
        DMatrix::from_fn(self.d, self.d, |i, j| {
            if (bits >> i & 1) == (bits >> j & 1) {
                self.sigma[(i, j)]
            } else {
                0.0
            }
        })
    }

    /// `sum_k (a_k + b_k + c_k)`; one up to quadrature rounding.
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.a + e.b + e.c).sum()
    }
}

fn shifted_mean(mu: &DVector<f64>, bits: u64) -> DVector<f64> {
    DVector::from_fn(mu.len(), |i, _| if bits >> i & 1 == 1 { mu[i] } else { -mu[i] })
}

/// Enumerates the support of the mask law. The Bernoulli law has `2^d` masks and
/// is refused above [`MAX_ENUMERATED_DIM`]; use [`expected_mask_monte_carlo`] there.
pub fn mask_coefficients(scheme: &MaskScheme, spec: &ProblemSpec, quad: &Quadrature) -> Result<MaskCoefficients> {
    let d = spec.dim();
    scheme.validate(Some(d))?;
    let entries = match scheme {
        MaskScheme::Bernoulli { alpha } => {
            if d > MAX_ENUMERATED_DIM {
                return Err(Error::SupportTooLarge(1u128 << d));
            }
            let nodes = crate::losses::scheme::LambdaLaw::Beta { alpha: *alpha }.nodes(quad);
            // Weights depend on the mask only through its popcount.
            let by_count: Vec<(f64, f64, f64)> = (0..=d)
                .map(|j| {
                    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                    for &(l, rho) in &nodes {
                        let p = rho * l.powi(j as i32) * (1.0 - l).powi((d - j) as i32);
                        a += p * l;
                        b += p * (1.0 - l);
                        c += p;
                    }
                    (0.5 * a, 0.5 * b, 0.5 * c)
                })
                .collect();
            (0..1u64 << d)
                .map(|mask| {
                    let (a, b, c) = by_count[mask.count_ones() as usize];
                    MaskEntry { mask, a, b, c }
                })
                .collect()
        }
        MaskScheme::Finite(atoms) => {
            let mut entries: Vec<MaskEntry> = Vec::new();
            for atom in atoms.iter().filter(|a| a.prob > 0.0) {
                let mask = crate::losses::scheme::mask_bits(&atom.mask);
                let mean = atom.lambda.mean();
                let idx = match entries.iter().position(|e| e.mask == mask) {
                    Some(i) => i,
                    None => {
                        entries.push(MaskEntry { mask, a: 0.0, b: 0.0, c: 0.0 });
                        entries.len() - 1
                    }
                };
                let e = &mut entries[idx];
                e.a += 0.5 * atom.prob * mean;
                e.b += 0.5 * atom.prob * (1.0 - mean);
                e.c += 0.5 * atom.prob;
            }
            entries
        }
    };
    Ok(MaskCoefficients { d, entries, mu: spec.mu().clone(), sigma: spec.sigma().clone() })
}

/// Accumulates general Gaussian terms.
struct VectorTerms {
    value: CompensatedSum,
    grad: DVector<f64>,
    hess: Option<DMatrix<f64>>,
}

impl VectorTerms {
    fn new(d: usize, hess: bool) -> Self {
        VectorTerms { value: CompensatedSum::new(), grad: DVector::zeros(d), hess: hess.then(|| DMatrix::zeros(d, d)) }
    }

    /// One term with mean `u`, `cw = C w`, and `c = C` (needed only for the Hessian).
    fn add(&mut self, weight: f64, u: &DVector<f64>, cw: &DVector<f64>, c: &dyn Fn() -> DMatrix<f64>, e: [f64; 5]) {
        if weight == 0.0 {
            return;
        }
        self.value.add(weight * e[0]);
        self.grad.axpy(weight * e[1], u, 1.0);
        self.grad.axpy(weight * e[2], cw, 1.0);
        if let Some(h) = self.hess.as_mut() {
            *h += c() * (weight * e[2]);
            h.ger(weight * e[2], u, u, 1.0);
            h.ger(weight * e[3], cw, u, 1.0);
            h.ger(weight * e[3], u, cw, 1.0);
            h.ger(weight * e[4], cw, cw, 1.0);
        }
    }
}

/// Expected masked-Mixup loss over all `n^2` ordered pairs. With infinite
/// `kappa` this is the noiseless limit, a finite sum over the mask support.
#[derive(Clone, Debug)]
pub struct ExpectedMask {
    spec: ProblemSpec,
    coefficients: MaskCoefficients,
    n: usize,
    quad: Quadrature,
}

impl ExpectedMask {
    pub fn new(spec: &ProblemSpec, scheme: &MaskScheme, n: usize, quad: &Quadrature) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        let coefficients = mask_coefficients(scheme, spec, quad)?;
        Ok(ExpectedMask { spec: spec.clone(), coefficients, n, quad: quad.clone() })
    }

    /// The noiseless limit for the mean of `spec`, whatever its `kappa`.
    pub fn infinite(spec: &ProblemSpec, scheme: &MaskScheme, n: usize, quad: &Quadrature) -> Result<Self> {
        Self::new(&spec.with_kappa(Kappa::Infinite)?, scheme, n, quad)
    }

    pub fn coefficients(&self) -> &MaskCoefficients {
        &self.coefficients
    }

    pub fn eval(&self, w: &DVector<f64>, hess: bool) -> Result<Evaluation> {
        let d = self.spec.dim();
        check_dim(d, w.len())?;
        let kinv = self.spec.kappa().inverse();
        let mu = self.spec.mu();
        let sigma = self.spec.sigma();
        let m_mu = w.dot(mu);
        let off = (self.n - 1) as f64 / self.n as f64;
        let mut acc = VectorTerms::new(d, hess);

        let cw_full = sigma * w * kinv;
        let full = || sigma * kinv;
        acc.add(1.0 / self.n as f64, mu, &cw_full, &full, moments(&self.quad, m_mu, w.dot(&cw_full)));

        if off > 0.0 {
            let mut inside = DVector::zeros(d);
            let mut outside = DVector::zeros(d);
            for (k, entry) in self.coefficients.entries.iter().enumerate() {
                let bits = entry.mask;
                for i in 0..d {
                    let on = bits >> i & 1 == 1;
                    inside[i] = if on { w[i] } else { 0.0 };
                    outside[i] = if on { 0.0 } else { w[i] };
                }
                let si = sigma * &inside;
                let so = sigma * &outside;
                let cw = DVector::from_fn(d, |i, _| kinv * if bits >> i & 1 == 1 { si[i] } else { so[i] });
                let s2 = w.dot(&cw);
                let uk = shifted_mean(mu, bits);
                let cmat = || self.coefficients.sigma_k(k) * kinv;
                let m = w.dot(&uk);
                let e = moments(&self.quad, m, s2);
                acc.add(off * entry.a, &uk, &cw, &cmat, e);
                acc.add(off * entry.b, &(-&uk), &cw, &cmat, reflect(e, m));
                acc.add(off * entry.c, mu, &cw, &cmat, moments(&self.quad, m_mu, s2));
            }
        }
        let value = if is_zero(w) { std::f64::consts::LN_2 } else { acc.value.total() };
        Ok(Evaluation { value, grad: acc.grad, hess: acc.hess })
    }
}

macro_rules! objective_impl {
    ($t:ty) => {
        impl Objective for $t {
            fn dim(&self) -> usize {
                self.spec.dim()
            }
            fn value(&self, w: &DVector<f64>) -> f64 {
                self.eval(w, false).map_or(f64::NAN, |e| e.value)
            }
            fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
                self.value_gradient(w).1
            }
            fn value_gradient(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
                match self.eval(w, false) {
                    Ok(e) => (e.value, e.grad),
                    Err(_) => (f64::NAN, DVector::from_element(w.len(), f64::NAN)),
                }
            }
        }

        impl SecondOrder for $t {
            fn evaluate(&self, w: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
                match self.eval(w, true) {
                    Ok(e) => (e.value, e.grad, e.hess.expect("requested")),
                    Err(_) => {
                        let d = w.len();
                        (f64::NAN, DVector::from_element(d, f64::NAN), DMatrix::from_element(d, d, f64::NAN))
                    }
                }
            }
        }
    };
}

objective_impl!(ExpectedErm);
objective_impl!(ExpectedMixup);
objective_impl!(ExpectedMask);

pub fn expected_erm(w: &DVector<f64>, spec: &ProblemSpec, quad: &Quadrature) -> Result<f64> {
    Ok(ExpectedErm::new(spec, quad).eval(w, false)?.value)
}

pub fn expected_erm_grad(w: &DVector<f64>, spec: &ProblemSpec, quad: &Quadrature) -> Result<DVector<f64>> {
    Ok(ExpectedErm::new(spec, quad).eval(w, false)?.grad)
}

pub fn expected_erm_hess(w: &DVector<f64>, spec: &ProblemSpec, quad: &Quadrature) -> Result<DMatrix<f64>> {
    Ok(ExpectedErm::new(spec, quad).eval(w, true)?.hess.expect("requested"))
}

pub fn expected_mixup(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MixupScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<f64> {
    Ok(ExpectedMixup::new(spec, scheme, n, quad)?.eval(w, false)?.value)
}

pub fn expected_mixup_grad(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MixupScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<DVector<f64>> {
    Ok(ExpectedMixup::new(spec, scheme, n, quad)?.eval(w, false)?.grad)
}

pub fn expected_mixup_hess(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MixupScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<DMatrix<f64>> {
    Ok(ExpectedMixup::new(spec, scheme, n, quad)?.eval(w, true)?.hess.expect("requested"))
}

pub fn expected_mask(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<f64> {
    Ok(ExpectedMask::new(spec, scheme, n, quad)?.eval(w, false)?.value)
}

pub fn expected_mask_grad(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<DVector<f64>> {
    Ok(ExpectedMask::new(spec, scheme, n, quad)?.eval(w, false)?.grad)
}

pub fn expected_mask_hess(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<DMatrix<f64>> {
    Ok(ExpectedMask::new(spec, scheme, n, quad)?.eval(w, true)?.hess.expect("requested"))
}

/// Noiseless limit of the expected mask loss: a finite sum over the mask support.
pub fn expected_mask_infty(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    n: usize,
    quad: &Quadrature,
) -> Result<f64> {
    Ok(ExpectedMask::infinite(spec, scheme, n, quad)?.eval(w, false)?.value)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Expected mask loss with the mask average done by Monte Carlo over `samples`
/// draws of `(M, lambda)`, for supports too large to enumerate. The Gaussian
/// integrals are still done by quadrature.
pub fn expected_mask_monte_carlo(
    w: &DVector<f64>,
    spec: &ProblemSpec,
    scheme: &MaskScheme,
    n: usize,
    quad: &Quadrature,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let d = spec.dim();
    check_dim(d, w.len())?;
    scheme.validate(Some(d))?;
    if n == 0 || samples < 2 {
        return Err(Error::InvalidArgument("need n >= 1 and at least two samples".into()));
    }
    let kinv = spec.kappa().inverse();
    let mu = spec.mu();
    let sigma = spec.sigma();
    let m_mu = w.dot(mu);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = CompensatedSum::new();
    let mut sq = CompensatedSum::new();
    let mut inside = DVector::zeros(d);
    let mut outside = DVector::zeros(d);
    for _ in 0..samples {
        let (bits, lambda) = scheme.sample(&mut rng, d);
        for i in 0..d {
            let on = bits >> i & 1 == 1;
            inside[i] = if on { w[i] } else { 0.0 };
            outside[i] = if on { 0.0 } else { w[i] };
        }
        let s2 = kinv * (inside.dot(&(sigma * &inside)) + outside.dot(&(sigma * &outside)));
        let m = w.dot(&shifted_mean(mu, bits));
        let e = moments(quad, m, s2)[0];
        let v = 0.5 * (lambda * e + (1.0 - lambda) * (e + m)) + 0.5 * moments(quad, m_mu, s2)[0];
        sum.add(v);
        sq.add(v * v);
    }
    let k = samples as f64;
    let mean = sum.total() / k;
    let var = ((sq.total() - k * mean * mean) / (k - 1.0)).max(0.0);
    let off = (n - 1) as f64 / n as f64;
    let diag = moments(quad, m_mu, kinv * w.dot(&(sigma * w)))[0];
    Ok(McEstimate {
        value: off * mean + diag / n as f64,
        std_error: off * (var / k).sqrt(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::scheme::{LambdaLaw, MaskAtom, MixMap};
    use crate::losses::{mask_loss, mixup_loss, PairDraws, PairMode};
    use crate::model::{bayes_direction, default_spec_d10, sample_dataset, spectral_norm, toy_spec_d2};
    use crate::quadrature::QuadratureConfig;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn quad() -> Quadrature {
        Quadrature::default()
    }

    fn random_w(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DVector<f64> {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r: f64 = rng.random_range(0.05..1.0) * radius;
        &v / v.norm() * r
    }

    /// Streams labeled draws from the model without materializing a dataset.
    struct Sampler {
        rng: ChaCha8Rng,
        mu: DVector<f64>,
        chol: DMatrix<f64>,
        scale: f64,
    }

    impl Sampler {
        fn new(spec: &ProblemSpec, seed: u64) -> Self {
            Sampler {
                rng: ChaCha8Rng::seed_from_u64(seed),
                mu: spec.mu().clone(),
                chol: spec.cholesky_factor().clone(),
                scale: spec.kappa().inverse().sqrt(),
            }
        }

        fn draw(&mut self) -> (DVector<f64>, f64) {
            let y = if self.rng.random::<bool>() { 1.0 } else { 0.0 };
            let z = DVector::from_fn(self.mu.len(), |_, _| self.rng.sample::<f64, _>(StandardNormal));
            (&self.mu * (2.0 * y - 1.0) + &self.chol * z * self.scale, y)
        }
    }

    fn soft_loss(z: f64, y: f64) -> f64 {
        y * logistic::loss(z) + (1.0 - y) * logistic::loss(-z)
    }

    fn mean_se(values: &[f64]) -> (f64, f64) {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (mean, (var / k).sqrt())
    }

    /// Running mean and standard error without storing samples.
    #[derive(Default)]
    struct Running {
        k: f64,
        mean: f64,
        m2: f64,
    }

    impl Running {
        fn push(&mut self, v: f64) {
            self.k += 1.0;
            let delta = v - self.mean;
            self.mean += delta / self.k;
            self.m2 += delta * (v - self.mean);
        }
        fn se(&self) -> f64 {
            (self.m2 / (self.k - 1.0) / self.k).sqrt()
        }
    }

    #[test]
    fn zero_weight_gives_log_two() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let q = quad();
        let w = DVector::zeros(10);
        assert_eq!(expected_erm(&w, &spec, &q).unwrap(), std::f64::consts::LN_2);
        for n in [2, 7, 500] {
            for scheme in [MixupScheme::beta(1.0).unwrap(), MixupScheme::beta(0.3).unwrap()] {
                assert_eq!(expected_mixup(&w, &spec, &scheme, n, &q).unwrap(), std::f64::consts::LN_2);
            }
        }
        let toy = toy_spec_d2(Kappa::Finite(2.0));
        let mask = MaskScheme::bernoulli(1.0).unwrap();
        let w2 = DVector::zeros(2);
        assert_eq!(expected_mask(&w2, &toy, &mask, 10, &q).unwrap(), std::f64::consts::LN_2);
        assert_eq!(expected_mask_infty(&w2, &toy, &mask, 10, &q).unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn erm_matches_monte_carlo() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let w = bayes_direction(&spec).unwrap();
        let exact = expected_erm(&w, &spec, &quad()).unwrap();
        let mut s = Sampler::new(&spec, 11);
        let mut acc = Running::default();
        for _ in 0..10_000_000 {
            let (x, y) = s.draw();
            acc.push(soft_loss(w.dot(&x), y));
        }
        assert!((acc.mean - exact).abs() < 4.0 * acc.se(), "{} vs {exact} (se {})", acc.mean, acc.se());
    }

    #[test]
    fn infinite_kappa_is_exact_limit() {
        let spec = default_spec_d10(Kappa::Infinite);
        let w = bayes_direction(&spec).unwrap() * 0.7;
        let v = expected_erm(&w, &spec, &quad()).unwrap();
        assert_eq!(v, logistic::loss(w.dot(spec.mu())));
    }

    #[test]
    fn wider_gaussian_has_larger_expected_loss() {
        let q = quad();
        let sigmas = [0.01, 0.1, 0.5, 1.0, 1.5, 3.0, 7.0, 15.0];
        for i in -20..=20 {
            let m = i as f64 * 0.5;
            let vals: Vec<f64> = sigmas.iter().map(|&s| q.normal_expectation(m, s, |z| [logistic::loss(z)])[0]).collect();
            for p in vals.windows(2) {
                assert!(p[1] > p[0], "m={m}: {vals:?}");
            }
        }
    }

    #[test]
    fn point_mass_at_one_reduces_to_erm() {
        let spec = default_spec_d10(Kappa::Finite(2.0));
        let q = quad();
        let scheme = MixupScheme::unchecked(LambdaLaw::PointMass { value: 1.0 }, MixMap::Identity).unwrap();
        assert!(ExpectedMixup::new(&spec, &scheme, 10, &q).is_err());
        let mix = ExpectedMixup::unchecked(&spec, &scheme, 10, &q).unwrap();
        let erm = ExpectedErm::new(&spec, &q);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = random_w(&mut rng, 10, 5.0);
            let a = mix.eval(&w, true).unwrap();
            let b = erm.eval(&w, true).unwrap();
            assert!((a.value - b.value).abs() <= 1e-14 * b.value.abs().max(1.0));
            assert!((a.grad - b.grad).amax() <= 1e-13);
            assert!((a.hess.unwrap() - b.hess.unwrap()).amax() <= 1e-13);
        }
    }

    #[test]
    fn mixup_requires_two_samples_and_a_valid_scheme() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let q = quad();
        assert!(ExpectedMixup::new(&spec, &MixupScheme::beta(1.0).unwrap(), 1, &q).is_err());
        let half = MixupScheme::unchecked(LambdaLaw::PointMass { value: 0.5 }, MixMap::Identity).unwrap();
        assert!(matches!(ExpectedMixup::new(&spec, &half, 10, &q), Err(Error::InvalidScheme(_))));
    }

    #[test]
    fn mixup_is_affine_in_inverse_n() {
        // E[L] = (1 - 1/n) A + (1/n) E_erm for some A independent of n.
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let q = quad();
        let scheme = MixupScheme::beta(1.0).unwrap();
        let w = bayes_direction(&spec).unwrap() * 0.3;
        let erm = expected_erm(&w, &spec, &q).unwrap();
        let v2 = expected_mixup(&w, &spec, &scheme, 2, &q).unwrap();
        let v10 = expected_mixup(&w, &spec, &scheme, 10, &q).unwrap();
        let a = (v2 - erm / 2.0) * 2.0;
        assert!((v10 - (0.9 * a + 0.1 * erm)).abs() < 1e-14);
    }

    #[test]
    fn mixup_matches_single_pair_monte_carlo() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let scheme = MixupScheme::beta(1.0).unwrap();
        let n = 500;
        let w = bayes_direction(&spec).unwrap() * 0.3;
        let exact = expected_mixup(&w, &spec, &scheme, n, &quad()).unwrap();
        // A uniformly random ordered pair is the diagonal with probability 1/n.
        let mut s = Sampler::new(&spec, 5);
        let mut lam = ChaCha8Rng::seed_from_u64(6);
        let mut acc = Running::default();
        for _ in 0..4_000_000 {
            if lam.random_range(0..n) == 0 {
                let (x, y) = s.draw();
                acc.push(soft_loss(w.dot(&x), y));
            } else {
                let (xi, yi) = s.draw();
                let (xj, yj) = s.draw();
                let l = scheme.law.sample(&mut lam);
                let g = scheme.g(l);
                let z = g * w.dot(&xi) + (1.0 - g) * w.dot(&xj);
                acc.push(soft_loss(z, l * yi + (1.0 - l) * yj));
            }
        }
        assert!((acc.mean - exact).abs() < 4.0 * acc.se(), "{} vs {exact} (se {})", acc.mean, acc.se());
    }

    #[test]
    fn mixup_matches_nested_monte_carlo() {
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let scheme = MixupScheme::beta(1.0).unwrap();
        let n = 500;
        let w = bayes_direction(&spec).unwrap() * 0.3;
        let exact = expected_mixup(&w, &spec, &scheme, n, &quad()).unwrap();
        let vals: Vec<f64> = (0..300u64)
            .map(|t| {
                let data = sample_dataset(&spec, n, 1000 + t).unwrap();
                let pairs = PairDraws::mixup(&data, &scheme, 5000 + t, PairMode::FixedPerPair).unwrap();
                mixup_loss(&w, &data, &pairs).unwrap()
            })
            .collect();
        let (mean, se) = mean_se(&vals);
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn mask_matches_nested_monte_carlo() {
        let spec = toy_spec_d2(Kappa::Finite(1.0));
        let scheme = MaskScheme::bernoulli(1.0).unwrap();
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..3u64 {
            let w = random_w(&mut rng, 2, 3.0);
            let exact = expected_mask(&w, &spec, &scheme, n, &quad()).unwrap();
            let mut acc = Running::default();
            for t in 0..100_000u64 {
                let seed = case * 1_000_000 + t;
                let data = sample_dataset(&spec, n, seed).unwrap();
                let pairs = PairDraws::mask(&data, &scheme, seed, PairMode::FixedPerPair).unwrap();
                acc.push(mask_loss(&w, &data, &pairs).unwrap());
            }
            assert!((acc.mean - exact).abs() < 4.0 * acc.se(), "{} vs {exact} (se {})", acc.mean, acc.se());
        }
    }

    #[test]
    fn mask_coefficient_examples() {
        let q = quad();
        let one = crate::model::ProblemSpec::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            Kappa::Finite(1.0),
        )
        .unwrap();
        let c = mask_coefficients(&MaskScheme::bernoulli(1.0).unwrap(), &one, &q).unwrap();
        assert_eq!(c.len(), 2);
        let full = c.entries().iter().find(|e| e.mask == 1).unwrap();
        assert!((full.c - 0.25).abs() < 1e-15);

        let toy = toy_spec_d2(Kappa::Finite(1.0));
        let single = MaskScheme::finite(vec![MaskAtom { mask: vec![true, true], lambda: LambdaLaw::Beta { alpha: 1.0 }, prob: 1.0 }])
            .unwrap();
        let c = mask_coefficients(&single, &toy, &q).unwrap();
        assert_eq!(c.len(), 1);
        let e = c.entries()[0];
        assert_eq!((e.a, e.b, e.c), (0.25, 0.25, 0.5));
    }

    #[test]
    fn mask_coefficient_identities() {
        let q = quad();
        for alpha in [0.2, 1.0, 3.0] {
            let spec = default_spec_d10(Kappa::Finite(1.0));
            let c = mask_coefficients(&MaskScheme::bernoulli(alpha).unwrap(), &spec, &q).unwrap();
            assert_eq!(c.len(), 1024);
            assert!((c.total() - 1.0).abs() <= 1e-10, "alpha {alpha}: {}", c.total());
            for (k, e) in c.entries().iter().enumerate() {
                assert!(e.a >= 0.0 && e.b >= 0.0);
                assert!((e.a + e.b - e.c).abs() <= 1e-15);
                let m = c.mask(k);
                let mu_k = c.mu_k(k);
                let s_k = c.sigma_k(k);
                for i in 0..10 {
                    let sign = if m[i] { 1.0 } else { -1.0 };
                    assert_eq!(mu_k[i], spec.mu()[i] * sign);
                    for j in 0..10 {
                        let keep = (m[i] && m[j]) || (!m[i] && !m[j]);
                        assert_eq!(s_k[(i, j)], if keep { spec.sigma()[(i, j)] } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn bernoulli_coefficients_match_beta_moments() {
        // For Beta(1,1): E[l^j (1-l)^k] = j! k! / (j + k + 1)!.
        fn beta_moment(j: u64, k: u64) -> f64 {
            let f = |n: u64| (1..=n).map(|v| v as f64).product::<f64>();
            f(j) * f(k) / f(j + k + 1)
        }
        let spec = toy_spec_d2(Kappa::Finite(1.0));
        let c = mask_coefficients(&MaskScheme::bernoulli(1.0).unwrap(), &spec, &quad()).unwrap();
        for e in c.entries() {
            let j = e.mask.count_ones() as u64;
            assert!((e.a - 0.5 * beta_moment(j + 1, 2 - j)).abs() < 1e-15);
            assert!((e.b - 0.5 * beta_moment(j, 3 - j)).abs() < 1e-15);
        }
    }

    #[test]
    fn large_support_is_refused() {
        let d = 17;
        let mut mu = DVector::zeros(d);
        mu[0] = 1.0;
        let spec = ProblemSpec::new(mu, DMatrix::identity(d, d), Kappa::Finite(1.0)).unwrap();
        let r = mask_coefficients(&MaskScheme::bernoulli(1.0).unwrap(), &spec, &quad());
        assert!(matches!(r, Err(Error::SupportTooLarge(p)) if p == 1 << 17));
    }

    #[test]
    fn monte_carlo_mask_agrees_with_enumeration() {
        let spec = default_spec_d10(Kappa::Finite(2.0));
        let scheme = MaskScheme::bernoulli(1.0).unwrap();
        let q = quad();
        let w = bayes_direction(&spec).unwrap() * 0.4;
        let exact = expected_mask(&w, &spec, &scheme, 50, &q).unwrap();
        let mc = expected_mask_monte_carlo(&w, &spec, &scheme, 50, &q, 200_000, 4).unwrap();
        assert!((mc.value - exact).abs() < 4.0 * mc.std_error, "{mc:?} vs {exact}");
        assert!(mc.std_error > 0.0);
    }

    #[test]
    fn mask_near_noiseless_limit_obeys_bound() {
        let q = quad();
        let scheme = MaskScheme::bernoulli(1.0).unwrap();
        let kappa = 1e6;
        for spec in [toy_spec_d2(Kappa::Finite(kappa)), default_spec_d10(Kappa::Finite(kappa))] {
            let d = spec.dim();
            let coef = mask_coefficients(&scheme, &spec, &q).unwrap();
            let spread: f64 = (0..coef.len())
                .map(|k| {
                    let e = coef.entries()[k];
                    (e.a + e.b + e.c) * spectral_norm(&coef.sigma_k(k)).sqrt()
                })
                .sum();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..10 {
                let w = random_w(&mut rng, d, 2.0);
                let finite = expected_mask(&w, &spec, &scheme, 20, &q).unwrap();
                let limit = expected_mask_infty(&w, &spec, &scheme, 20, &q).unwrap();
                let bound = 2.0 * w.norm() / kappa.sqrt() * (spectral_norm(spec.sigma()).sqrt() + spread);
                assert!(finite >= limit - 1e-15);
                assert!(finite - limit <= bound, "{finite} - {limit} > {bound}");
            }
        }
    }

    fn fd_check(
        f: &dyn Fn(&DVector<f64>) -> Evaluation,
        w: &DVector<f64>,
    ) {
        let e = f(w);
        let d = w.len();
        let h = 1e-5;
        let hess = e.hess.clone().unwrap();
        for k in 0..d {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let (ep, em) = (f(&wp), f(&wm));
            let fd = (ep.value - em.value) / (2.0 * h);
            assert!((fd - e.grad[k]).abs() <= 1e-6 * e.grad.amax().max(1e-2), "grad[{k}]: {fd} vs {}", e.grad[k]);
            let col = (ep.grad - em.grad) / (2.0 * h);
            let want = hess.column(k);
            assert!((col - want).amax() <= 1e-6 * hess.amax().max(1e-2), "hess column {k}");
        }
        assert!((&hess - hess.transpose()).amax() <= 1e-12 * hess.amax().max(1.0));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let q = quad();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kappa in [0.5, 2.0, 20.0] {
            let spec = default_spec_d10(Kappa::Finite(kappa));
            let erm = ExpectedErm::new(&spec, &q);
            let mix = ExpectedMixup::new(&spec, &MixupScheme::beta(0.7).unwrap(), 7, &q).unwrap();
            let mask = ExpectedMask::new(&spec, &MaskScheme::bernoulli(1.0).unwrap(), 7, &q).unwrap();
            for _ in 0..3 {
                let w = random_w(&mut rng, 10, 5.0);
                fd_check(&|v| erm.eval(v, true).unwrap(), &w);
                fd_check(&|v| mix.eval(v, true).unwrap(), &w);
                fd_check(&|v| mask.eval(v, true).unwrap(), &w);
            }
        }
        let toy = toy_spec_d2(Kappa::Finite(1.0));
        let inf = ExpectedMask::infinite(&toy, &MaskScheme::bernoulli(1.0).unwrap(), 5, &q).unwrap();
        fd_check(&|v| inf.eval(v, true).unwrap(), &DVector::from_row_slice(&[0.7, -1.2]));
        let tab = MixupScheme::new(
            LambdaLaw::Uniform,
            MixMap::Tabulated { xs: vec![0.0, 0.5, 1.0], ys: vec![0.0, 0.5, 1.0] },
        )
        .unwrap();
        let mix = ExpectedMixup::new(&toy, &tab, 3, &q).unwrap();
        fd_check(&|v| mix.eval(v, true).unwrap(), &DVector::from_row_slice(&[1.5, 0.4]));
    }

    #[test]
    fn hessians_are_positive_definite() {
        let q = quad();
        let spec = default_spec_d10(Kappa::Finite(1.0));
        let erm = ExpectedErm::new(&spec, &q);
        let mix = ExpectedMixup::new(&spec, &MixupScheme::beta(1.0).unwrap(), 10, &q).unwrap();
        let mask = ExpectedMask::new(&spec, &MaskScheme::bernoulli(1.0).unwrap(), 10, &q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let w = random_w(&mut rng, 10, 5.0);
            for h in [erm.evaluate(&w).2, mix.evaluate(&w).2, mask.evaluate(&w).2] {
                let min = nalgebra::SymmetricEigen::new(h).eigenvalues.min();
                assert!(min > 0.0, "{min}");
            }
        }
    }

    #[test]
    fn doubling_hermite_nodes_is_stable() {
        let q = quad();
        let fine = Quadrature::new(QuadratureConfig { hermite_nodes: 160, ..QuadratureConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mixup = MixupScheme::beta(1.0).unwrap();
        let mask = MaskScheme::bernoulli(1.0).unwrap();
        for kappa in [0.1, 0.5, 1.0, 10.0, 50.0] {
            let spec = default_spec_d10(Kappa::Finite(kappa));
            for radius in [0.5, 2.0, 8.0, 20.0] {
                let mut w = random_w(&mut rng, 10, 1.0);
                w *= radius / w.norm();
                let pairs = [
                    (expected_erm(&w, &spec, &q).unwrap(), expected_erm(&w, &spec, &fine).unwrap()),
                    (
                        expected_mixup(&w, &spec, &mixup, 50, &q).unwrap(),
                        expected_mixup(&w, &spec, &mixup, 50, &fine).unwrap(),
                    ),
                    (
                        expected_mask(&w, &spec, &mask, 50, &q).unwrap(),
                        expected_mask(&w, &spec, &mask, 50, &fine).unwrap(),
                    ),
                ];
                for (a, b) in pairs {
                    assert!((a - b).abs() <= 1e-10, "kappa {kappa} |w| {radius}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn ray_profile_matches_full_evaluation() {
        let q = quad();
        let spec = default_spec_d10(Kappa::Finite(3.0));
        let v = bayes_direction(&spec).unwrap();
        let erm = ExpectedErm::new(&spec, &q);
        let mix = ExpectedMixup::new(&spec, &MixupScheme::beta(1.0).unwrap(), 20, &q).unwrap();
        for c in [0.1, 0.8, 2.5] {
            let w = &v * c;
            for (p, e) in [
                (erm.ray_profile(c).unwrap(), erm.eval(&w, true).unwrap()),
                (mix.ray_profile(c).unwrap(), mix.eval(&w, true).unwrap()),
            ] {
                let h = e.hess.unwrap();
                assert!((p[0] - e.value).abs() <= 1e-13);
                assert!((p[1] - e.grad.dot(&v)).abs() <= 1e-11 * p[1].abs().max(1.0));
                assert!((p[2] - v.dot(&(&h * &v))).abs() <= 1e-10 * p[2].abs().max(1.0));
            }
        }
    }
}
