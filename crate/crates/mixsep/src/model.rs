//! Two-Gaussian data family: class `y` uniform on {0,1}, and `x | y ~ N((2y-1)mu, Sigma/kappa)`.
//!
//! `kappa` may be infinite, in which case `x = (2y-1)mu` exactly.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};

/// Relative tolerance for `|mu|^2 == ||Sigma||` on user-supplied problems.
pub const NORM_TOLERANCE: f64 = 1e-8;

/// Tolerance used for the built-in d=10 problem, whose constants are given to
/// four decimals and match only to about 4e-5.
pub const ROUNDED_CONSTANT_TOLERANCE: f64 = 1e-4;

const SYMMETRY_TOLERANCE: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;

/// Separability constant. Larger values shrink the class covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kappa {
    Finite(f64),
    Infinite,
}

impl Kappa {
    /// `f64::INFINITY` maps to [`Kappa::Infinite`]; anything else must be finite and positive.
    pub fn new(value: f64) -> Result<Self> {
        if value == f64::INFINITY {
            Ok(Kappa::Infinite)
        } else if value.is_finite() && value > 0.0 {
            Ok(Kappa::Finite(value))
        } else {
            Err(Error::InvalidSpec(format!("kappa must be positive, got {value}")))
        }
    }

    /// `1/kappa`, zero when infinite.
    pub fn inverse(self) -> f64 {
        match self {
            Kappa::Finite(k) => 1.0 / k,
            Kappa::Infinite => 0.0,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Kappa::Infinite)
    }

    /// Value as a float, `f64::INFINITY` for the infinite case. Only for display and keys.
    pub fn as_f64(self) -> f64 {
        match self {
            Kappa::Finite(k) => k,
            Kappa::Infinite => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for Kappa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kappa::Finite(k) => write!(f, "{k}"),
            Kappa::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Kappa {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Kappa::Finite(k) => s.serialize_f64(*k),
            Kappa::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Kappa {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Kappa::new(k).map_err(serde::de::Error::custom),
            Raw::Text(t) if t == "inf" || t == "Infinity" => Ok(Kappa::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad kappa {t:?}"))),
        }
    }
}

/// A validated member of the data family.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    kappa: Kappa,
    chol: DMatrix<f64>,
    norm_tolerance: f64,
}

impl ProblemSpec {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, kappa: Kappa) -> Result<Self> {
        Self::with_norm_tolerance(mu, sigma, kappa, NORM_TOLERANCE)
    }

    /// Like [`ProblemSpec::new`] but with an explicit relative tolerance on `|mu|^2 == ||Sigma||`.
    /// `f64::INFINITY` disables the check. Inputs are never rescaled.
    pub fn with_norm_tolerance(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        kappa: Kappa,
        norm_tolerance: f64,
    ) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidSpec("empty mean vector".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::InvalidSpec(format!(
                "sigma is {}x{}, expected {d}x{d}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if let Kappa::Finite(k) = kappa {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidSpec(format!("kappa must be positive, got {k}")));
            }
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite entry".into()));
        }
        if mu.norm() == 0.0 {
            return Err(Error::InvalidSpec("mu is zero".into()));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidSpec(format!("sigma asymmetric by {asym:e}")));
        }
        let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "sigma not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidSpec("sigma has no Cholesky factor".into()))?
            .unpack();
        let norm = spectral_norm(&sigma);
        let mu2 = mu.norm_squared();
        let rel = (mu2 - norm).abs() / norm;
        if rel > norm_tolerance {
            return Err(Error::InvalidSpec(format!(
                "|mu|^2 = {mu2} but ||sigma|| = {norm} (relative gap {rel:e} > {norm_tolerance:e})"
            )));
        }
        Ok(ProblemSpec { mu, sigma, kappa, chol, norm_tolerance })
    }

    /// Same mean and covariance with a different separability constant.
    pub fn with_kappa(&self, kappa: Kappa) -> Result<Self> {
        if let Kappa::Finite(k) = kappa {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidSpec(format!("kappa must be positive, got {k}")));
            }
        }
        let mut out = self.clone();
        out.kappa = kappa;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn kappa(&self) -> Kappa {
        self.kappa
    }

    pub fn norm_tolerance(&self) -> f64 {
        self.norm_tolerance
    }

    /// Lower Cholesky factor of `Sigma`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `mu^T Sigma^{-1} mu`.
    pub fn mahalanobis(&self) -> Result<f64> {
        Ok(self.mu.dot(&bayes_direction(self)?))
    }
}

#[derive(Serialize, Deserialize)]
struct ProblemSpecJson {
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    kappa: Kappa,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_tolerance: Option<Kappa>,
}

impl Serialize for ProblemSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let d = self.dim();
        let json = ProblemSpecJson {
            mu: self.mu.iter().copied().collect(),
            sigma: (0..d).map(|i| (0..d).map(|j| self.sigma[(i, j)]).collect()).collect(),
            kappa: self.kappa,
            norm_tolerance: (self.norm_tolerance != NORM_TOLERANCE).then(|| Kappa::new(self.norm_tolerance).expect("positive")),
        };
        json.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProblemSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = ProblemSpecJson::deserialize(d)?;
        let dim = json.mu.len();
        if json.sigma.len() != dim || json.sigma.iter().any(|r| r.len() != dim) {
            return Err(serde::de::Error::custom("sigma shape does not match mu"));
        }
        let sigma = DMatrix::from_fn(dim, dim, |i, j| json.sigma[i][j]);
        ProblemSpec::with_norm_tolerance(
            DVector::from_vec(json.mu),
            sigma,
            json.kappa,
            json.norm_tolerance.map_or(NORM_TOLERANCE, Kappa::as_f64),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration
/// (stops when the Rayleigh quotient changes by less than 1e-14 relative, at most 10^4 iterations).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    let mut v = DVector::from_fn(d, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut estimate = 0.0_f64;
    for _ in 0..10_000 {
        let mv = m * &v;
        let norm = mv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&mv).abs();
        v = mv / norm;
        let converged = (next - estimate).abs() <= 1e-14 * next;
        estimate = next;
        if converged {
            break;
        }
    }
    // The Rayleigh quotient of the final iterate is the more accurate value.
    (v.dot(&(m * &v))).abs()
}

/// One observation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: DVector<f64>,
    pub y: u8,
}

/// Labeled samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    d: usize,
    xs: Vec<f64>,
    ys: Vec<u8>,
    seed: u64,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, seed: u64) -> Result<Self> {
        let d = samples
            .first()
            .map(|s| s.x.len())
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let mut xs = Vec::with_capacity(d * samples.len());
        let mut ys = Vec::with_capacity(samples.len());
        for s in &samples {
            check_dim(d, s.x.len())?;
            xs.extend(s.x.iter());
            ys.push(s.y);
        }
        Self::from_rows(d, xs, ys, seed)
    }

    /// `xs` holds `ys.len()` rows of length `d`.
    pub fn from_rows(d: usize, xs: Vec<f64>, ys: Vec<u8>, seed: u64) -> Result<Self> {
        if d == 0 || ys.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        check_dim(d * ys.len(), xs.len())?;
        if let Some(bad) = ys.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} not in {{0,1}}")));
        }
        Ok(Dataset { d, xs, ys, seed })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> u8 {
        self.ys[i]
    }

    /// Label as a float in {0, 1}.
    pub fn label(&self, i: usize) -> f64 {
        f64::from(self.ys[i])
    }

    pub fn rows(&self) -> &[f64] {
        &self.xs
    }

    pub fn labels(&self) -> &[u8] {
        &self.ys
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        LabeledSample { x: DVector::from_row_slice(self.x(i)), y: self.ys[i] }
    }

    pub fn samples(&self) -> impl Iterator<Item = LabeledSample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// `n x d` design matrix.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.d, &self.xs)
    }

    /// Maps every `(x, y)` to `(-x, 1-y)`.
    pub fn negated(&self) -> Dataset {
        Dataset {
            d: self.d,
            xs: self.xs.iter().map(|v| -v).collect(),
            ys: self.ys.iter().map(|y| 1 - y).collect(),
            seed: self.seed,
        }
    }

    /// Scales every point by `c`.
    pub fn scaled(&self, c: f64) -> Dataset {
        Dataset { d: self.d, xs: self.xs.iter().map(|v| c * v).collect(), ys: self.ys.clone(), seed: self.seed }
    }

    /// CSV with header `x0,...,x{d-1},y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.d).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.ys[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, seed: u64) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let header = input.headers()?.clone();
        let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            Error::InvalidArgument("dataset CSV needs at least one feature column".into())
        })?;
        for (k, name) in header.iter().enumerate() {
            let want = if k == d { "y".to_string() } else { format!("x{k}") };
            if name != want {
                return Err(Error::InvalidArgument(format!("column {k} is {name:?}, expected {want:?}")));
            }
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in input.records() {
            let rec = rec?;
            for k in 0..d {
                xs.push(parse_field(&rec[k])?);
            }
            ys.push(
                rec[d]
                    .trim()
                    .parse::<u8>()
                    .map_err(|e| Error::InvalidArgument(format!("bad label {:?}: {e}", &rec[d])))?,
            );
        }
        Self::from_rows(d, xs, ys, seed)
    }
}

fn parse_field(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
}

/// Draws `n` samples. The same `(spec, n, seed)` always yields the same bits.
pub fn sample_dataset(spec: &ProblemSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let mut z = DVector::zeros(d);
    for _ in 0..n {
        let y: bool = rng.random();
        let sign = if y { 1.0 } else { -1.0 };
        match spec.kappa {
            Kappa::Infinite => xs.extend(spec.mu.iter().map(|m| sign * m)),
            Kappa::Finite(k) => {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let noise = &spec.chol * &z;
                let scale = k.sqrt().recip();
                xs.extend((0..d).map(|j| sign * spec.mu[j] + scale * noise[j]));
            }
        }
        ys.push(u8::from(y));
    }
    Dataset::from_rows(d, xs, ys, seed)
}

/// `Sigma^{-1} mu` by a Cholesky solve with one round of iterative refinement.
pub fn bayes_direction(spec: &ProblemSpec) -> Result<DVector<f64>> {
    solve_spd(&spec.sigma, &spec.mu)
}

pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let chol = a.clone().cholesky().ok_or(Error::IllConditioned(cond))?;
    let mut v = chol.solve(b);
    let r = b - a * &v;
    v += chol.solve(&r);
    let resid = (a * &v - b).norm();
    if resid > 1e-10 * b.norm() {
        return Err(Error::NotConverged(format!("linear solve residual {resid:e}")));
    }
    Ok(v)
}

/// `u.v / (|u||v|)`, clamped to [-1, 1].
pub fn cosine_similarity(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    check_dim(u.len(), v.len())?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

const D10_MU: [f64; 10] =
    [-0.1067, 0.2572, -0.2392, 0.4135, -0.2179, -0.3995, -0.1437, 0.5950, 0.1786, -0.2839];

#[rustfmt::skip]
const D10_SIGMA: [[f64; 10]; 10] = [
    [0.4481, 0.0904, -0.0128, -0.0245, 0.1082, -0.2444, 0.1817, 0.0881, 0.0308, 0.0450],
    [0.0904, 0.4727, 0.0578, -0.1620, 0.0481, -0.0629, 0.0509, -0.1300, -0.1013, -0.1706],
    [-0.0128, 0.0578, 0.2477, -0.0728, -0.0490, 0.1214, 0.0189, 0.0159, 0.0064, 0.1649],
    [-0.0245, -0.1620, -0.0728, 0.4457, 0.0462, -0.1026, 0.1188, -0.0066, -0.0757, 0.1065],
    [0.1082, 0.0481, -0.0490, 0.0462, 0.2892, 0.0268, 0.1117, -0.1799, 0.0617, 0.1787],
    [-0.2444, -0.0629, 0.1214, -0.1026, 0.0268, 0.4248, -0.0868, 0.0565, 0.0482, 0.2182],
    [0.1817, 0.0509, 0.0189, 0.1188, 0.1117, -0.0868, 0.3638, -0.0980, -0.0279, 0.1658],
    [0.0881, -0.1300, 0.0159, -0.0066, -0.1799, 0.0565, -0.0980, 0.4999, 0.0010, -0.0318],
    [0.0308, -0.1013, 0.0064, -0.0757, 0.0617, 0.0482, -0.0279, 0.0010, 0.1550, 0.1723],
    [0.0450, -0.1706, 0.1649, 0.1065, 0.1787, 0.2182, 0.1658, -0.0318, 0.1723, 0.6230],
];

/// The built-in 10-dimensional problem. `mu` is not an eigenvector of `Sigma`,
/// so the Bayes direction differs from `mu`.
pub fn default_spec_d10(kappa: Kappa) -> ProblemSpec {
    let mu = DVector::from_row_slice(&D10_MU);
    let sigma = DMatrix::from_fn(10, 10, |i, j| D10_SIGMA[i][j]);
    ProblemSpec::with_norm_tolerance(mu, sigma, kappa, ROUNDED_CONSTANT_TOLERANCE)
        .expect("built-in d=10 problem is valid")
}

/// Two independent copies of the d=10 problem: `mu = (mu0, mu0)`, `Sigma = diag(Sigma0, Sigma0)`.
/// Here `|mu|^2 = 2 ||Sigma||`, so the norm check is disabled.
pub fn default_spec_d20(kappa: Kappa) -> ProblemSpec {
    let mu = DVector::from_fn(20, |i, _| D10_MU[i % 10]);
    let sigma = DMatrix::from_fn(20, 20, |i, j| {
        if i / 10 == j / 10 {
            D10_SIGMA[i % 10][j % 10]
        } else {
            0.0
        }
    });
    ProblemSpec::with_norm_tolerance(mu, sigma, kappa, f64::INFINITY).expect("built-in d=20 problem is valid")
}

/// A small 2-dimensional problem with correlated coordinates and `mu` off every eigenvector.
/// `mu` is scaled so the norm condition holds to rounding.
pub fn toy_spec_d2(kappa: Kappa) -> ProblemSpec {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let dir = DVector::from_row_slice(&[0.6, 0.8]);
    let mu = dir * spectral_norm(&sigma).sqrt();
    ProblemSpec::new(mu, sigma, kappa).expect("toy problem is valid")
}
