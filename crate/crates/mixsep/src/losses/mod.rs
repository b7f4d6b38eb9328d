//! Empirical training losses on a linear model: plain logistic ERM, Mixup over all
//! `n^2` ordered pairs, and masked Mixup, each with gradient and Hessian.

pub mod logistic;
pub mod scheme;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::minimize::{Objective, SecondOrder};
use crate::model::Dataset;
use logistic::{sigmoid_pair, CompensatedSum};
use scheme::{MaskScheme, MixupScheme};

/// When the pair draws are refreshed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// One table of draws for the whole run.
    #[default]
    FixedPerPair,
    /// A fresh table every epoch.
    ResamplePerEpoch,
}

#[derive(Clone, Debug)]
enum PairLaw {
    Mixup(MixupScheme),
    Mask(MaskScheme),
}

/// The `n x n` table of mixing draws. Diagonal cells always reproduce the raw point.
#[derive(Clone, Debug)]
pub struct PairDraws {
    n: usize,
    d: usize,
    mode: PairMode,
    seed: u64,
    law: PairLaw,
    lambdas: Vec<f64>,
    gs: Vec<f64>,
    masks: Vec<u64>,
}

impl PairDraws {
    pub fn mixup(data: &Dataset, scheme: &MixupScheme, seed: u64, mode: PairMode) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("Mixup needs n >= 2".into()));
        }
        if !scheme.is_valid() {
            return Err(Error::InvalidScheme("Mixup scheme is not valid".into()));
        }
        Ok(Self::build(data, PairLaw::Mixup(scheme.clone()), seed, mode))
    }

    /// Like [`PairDraws::mixup`] without the validity gate, for degenerate schemes in tests.
    pub fn mixup_unchecked(data: &Dataset, scheme: &MixupScheme, seed: u64, mode: PairMode) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("Mixup needs n >= 2".into()));
        }
        Ok(Self::build(data, PairLaw::Mixup(scheme.clone()), seed, mode))
    }

    pub fn mask(data: &Dataset, scheme: &MaskScheme, seed: u64, mode: PairMode) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("masked Mixup needs n >= 2".into()));
        }
        scheme.validate(Some(data.dim()))?;
        Ok(Self::build(data, PairLaw::Mask(scheme.clone()), seed, mode))
    }

    fn build(data: &Dataset, law: PairLaw, seed: u64, mode: PairMode) -> Self {
        let n = data.len();
        let mut p = PairDraws {
            n,
            d: data.dim(),
            mode,
            seed,
            law,
            lambdas: vec![0.0; n * n],
            gs: Vec::new(),
            masks: Vec::new(),
        };
        p.fill(0);
        p
    }

    fn fill(&mut self, stream: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        match &self.law {
            PairLaw::Mixup(s) => {
                self.gs.resize(self.n * self.n, 0.0);
                for (l, g) in self.lambdas.iter_mut().zip(self.gs.iter_mut()) {
                    *l = s.law.sample(&mut rng);
                    *g = s.g(*l);
                }
            }
            PairLaw::Mask(s) => {
                self.masks.resize(self.n * self.n, 0);
                for (l, m) in self.lambdas.iter_mut().zip(self.masks.iter_mut()) {
                    let (bits, lambda) = s.sample(&mut rng, self.d);
                    *m = bits;
                    *l = lambda;
                }
            }
        }
    }

    /// Redraws the table for `epoch` in [`PairMode::ResamplePerEpoch`]; no-op otherwise.
    pub fn redraw(&mut self, epoch: u64) {
        if self.mode == PairMode::ResamplePerEpoch {
            self.fill(epoch);
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_mask(&self) -> bool {
        matches!(self.law, PairLaw::Mask(_))
    }

    pub fn lambda(&self, i: usize, j: usize) -> f64 {
        self.lambdas[i * self.n + j]
    }

    /// `g(lambda_ij)`; 1 for mask draws.
    pub fn g(&self, i: usize, j: usize) -> f64 {
        if self.gs.is_empty() {
            1.0
        } else {
            self.gs[i * self.n + j]
        }
    }

    /// Mask bits for cell `(i, j)`; all ones for Mixup draws.
    pub fn mask_bits(&self, i: usize, j: usize) -> u64 {
        if self.masks.is_empty() {
            u64::MAX
        } else {
            self.masks[i * self.n + j]
        }
    }

    /// The mixed input and soft label of cell `(i, j)`.
    pub fn mixed_point(&self, data: &Dataset, i: usize, j: usize) -> (DVector<f64>, f64) {
        if i == j {
            return (DVector::from_row_slice(data.x(i)), data.label(i));
        }
        let lambda = self.lambda(i, j);
        let y = lambda * data.label(i) + (1.0 - lambda) * data.label(j);
        let (xi, xj) = (data.x(i), data.x(j));
        let x = match self.law {
            PairLaw::Mixup(_) => {
                let g = self.g(i, j);
                DVector::from_fn(self.d, |k, _| g * xi[k] + (1.0 - g) * xj[k])
            }
            PairLaw::Mask(_) => {
                let m = self.mask_bits(i, j);
                DVector::from_fn(self.d, |k, _| if m >> k & 1 == 1 { xi[k] } else { xj[k] })
            }
        };
        (x, y)
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        check_dim(self.n, data.len())?;
        check_dim(self.d, data.dim())
    }
}

/// Fixed-per-pair Mixup draws.
pub fn make_mixup_pairs(data: &Dataset, scheme: &MixupScheme, seed: u64) -> Result<PairDraws> {
    PairDraws::mixup(data, scheme, seed, PairMode::FixedPerPair)
}

/// Fixed-per-pair mask draws.
pub fn make_mask_pairs(data: &Dataset, scheme: &MaskScheme, seed: u64) -> Result<PairDraws> {
    PairDraws::mask(data, scheme, seed, PairMode::FixedPerPair)
}

#[derive(Clone, Copy)]
struct Want {
    value: bool,
    hess: bool,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: Option<DMatrix<f64>>,
}

fn projections(data: &Dataset, w: &DVector<f64>) -> Vec<f64> {
    (0..data.len()).map(|i| data.x(i).iter().zip(w.iter()).map(|(a, b)| a * b).sum()).collect()
}

/// `X^T diag(c) X` plus `X^T (C + C^T) X` when `cross` is given.
fn weighted_gram(data: &Dataset, diag: &[f64], cross: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let d = data.dim();
    let mut h = DMatrix::zeros(d, d);
    for i in 0..data.len() {
        let x = data.x(i);
        let c = diag[i];
        if c == 0.0 {
            continue;
        }
        for a in 0..d {
            let ca = c * x[a];
            for b in 0..=a {
                h[(a, b)] += ca * x[b];
            }
        }
    }
    if let Some(cm) = cross {
        let x = data.x_matrix();
        let sym = cm + cm.transpose();
        let prod = x.transpose() * sym * &x;
        for a in 0..d {
            for b in 0..=a {
                h[(a, b)] += prod[(a, b)];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    h
}

fn erm_eval(w: &DVector<f64>, data: &Dataset, want: Want) -> Eval {
    let n = data.len();
    let a = projections(data, w);
    let mut value = CompensatedSum::new();
    let mut coef = vec![0.0; n];
    let mut hdiag = vec![0.0; n];
    for i in 0..n {
        let z = a[i];
        let y = data.label(i);
        if want.value {
            value.add(logistic::loss(z) + (1.0 - y) * z);
        }
        let (p, q) = sigmoid_pair(z);
        coef[i] = p - y;
        hdiag[i] = p * q;
    }
    let inv = 1.0 / n as f64;
    let mut grad = DVector::zeros(data.dim());
    for i in 0..n {
        for (g, x) in grad.iter_mut().zip(data.x(i)) {
            *g += coef[i] * x;
        }
    }
    grad *= inv;
    let hess = want.hess.then(|| weighted_gram(data, &hdiag, None) * inv);
    Eval { value: value.total() * inv, grad, hess }
}

fn mixup_eval(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws, want: Want) -> Eval {
    let n = data.len();
    let a = projections(data, w);
    let mut value = CompensatedSum::new();
    let mut coef = vec![0.0; n];
    let mut hdiag = vec![0.0; n];
    let mut cross = want.hess.then(|| DMatrix::<f64>::zeros(n, n));
    for i in 0..n {
        let yi = data.label(i);
        let row = i * n;
        for j in 0..n {
            let (z, y, g) = if i == j {
                (a[i], yi, 1.0)
            } else {
                let g = pairs.gs[row + j];
                let l = pairs.lambdas[row + j];
                (g * a[i] + (1.0 - g) * a[j], l * yi + (1.0 - l) * data.label(j), g)
            };
            if want.value {
                value.add(logistic::loss(z) + (1.0 - y) * z);
            }
            let (p, q) = sigmoid_pair(z);
            let r = p - y;
            coef[i] += r * g;
            coef[j] += r * (1.0 - g);
            if let Some(c) = cross.as_mut() {
                let h = p * q;
                hdiag[i] += h * g * g;
                hdiag[j] += h * (1.0 - g) * (1.0 - g);
                if i != j {
                    c[(i, j)] += h * g * (1.0 - g);
                }
            }
        }
    }
    let inv = 1.0 / (n * n) as f64;
    let mut grad = DVector::zeros(data.dim());
    for i in 0..n {
        for (gk, x) in grad.iter_mut().zip(data.x(i)) {
            *gk += coef[i] * x;
        }
    }
    grad *= inv;
    let hess = cross.map(|c| weighted_gram(data, &hdiag, Some(&c)) * inv);
    Eval { value: value.total() * inv, grad, hess }
}

fn mask_eval(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws, want: Want) -> Eval {
    let n = data.len();
    let d = data.dim();
    let wv: Vec<f64> = w.iter().copied().collect();
    let mut value = CompensatedSum::new();
    let mut grad = vec![0.0; d];
    let mut hess = want.hess.then(|| vec![0.0; d * d]);
    let mut xt = vec![0.0; d];
    for i in 0..n {
        let xi = data.x(i);
        let yi = data.label(i);
        let row = i * n;
        for j in 0..n {
            let (bits, y) = if i == j {
                (u64::MAX, yi)
            } else {
                let l = pairs.lambdas[row + j];
                (pairs.masks[row + j], l * yi + (1.0 - l) * data.label(j))
            };
            let xj = data.x(j);
            let mut z = 0.0;
            for k in 0..d {
                let v = if bits >> k & 1 == 1 { xi[k] } else { xj[k] };
                xt[k] = v;
                z += wv[k] * v;
            }
            if want.value {
                value.add(logistic::loss(z) + (1.0 - y) * z);
            }
            let (p, q) = sigmoid_pair(z);
            let r = p - y;
            for k in 0..d {
                grad[k] += r * xt[k];
            }
            if let Some(h) = hess.as_mut() {
                let c = p * q;
                for a in 0..d {
                    let ca = c * xt[a];
                    for b in 0..=a {
                        h[a * d + b] += ca * xt[b];
                    }
                }
            }
        }
    }
    let inv = 1.0 / (n * n) as f64;
    let hess = hess.map(|h| DMatrix::from_fn(d, d, |a, b| if b <= a { h[a * d + b] } else { h[b * d + a] } * inv));
    Eval { value: value.total() * inv, grad: DVector::from_vec(grad) * inv, hess }
}

const ALL: Want = Want { value: true, hess: true };
const VALUE: Want = Want { value: true, hess: false };
const GRAD: Want = Want { value: false, hess: false };

pub fn erm_loss(w: &DVector<f64>, data: &Dataset) -> Result<f64> {
    check_dim(data.dim(), w.len())?;
    Ok(erm_eval(w, data, VALUE).value)
}

pub fn erm_grad(w: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>> {
    check_dim(data.dim(), w.len())?;
    Ok(erm_eval(w, data, GRAD).grad)
}

pub fn erm_hess(w: &DVector<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dim(data.dim(), w.len())?;
    Ok(erm_eval(w, data, ALL).hess.expect("requested"))
}

fn check_pairs(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws, mask: bool) -> Result<()> {
    check_dim(data.dim(), w.len())?;
    pairs.check(data)?;
    if pairs.is_mask() != mask {
        return Err(Error::InvalidArgument("pair draws are of the wrong kind".into()));
    }
    Ok(())
}

pub fn mixup_loss(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws) -> Result<f64> {
    check_pairs(w, data, pairs, false)?;
    Ok(mixup_eval(w, data, pairs, VALUE).value)
}

pub fn mixup_grad(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws) -> Result<DVector<f64>> {
    check_pairs(w, data, pairs, false)?;
    Ok(mixup_eval(w, data, pairs, GRAD).grad)
}

pub fn mixup_hess(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws) -> Result<DMatrix<f64>> {
    check_pairs(w, data, pairs, false)?;
    Ok(mixup_eval(w, data, pairs, ALL).hess.expect("requested"))
}

pub fn mask_loss(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws) -> Result<f64> {
    check_pairs(w, data, pairs, true)?;
    Ok(mask_eval(w, data, pairs, VALUE).value)
}

pub fn mask_grad(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws) -> Result<DVector<f64>> {
    check_pairs(w, data, pairs, true)?;
    Ok(mask_eval(w, data, pairs, GRAD).grad)
}

pub fn mask_hess(w: &DVector<f64>, data: &Dataset, pairs: &PairDraws) -> Result<DMatrix<f64>> {
    check_pairs(w, data, pairs, true)?;
    Ok(mask_eval(w, data, pairs, ALL).hess.expect("requested"))
}

/// Which empirical loss to train.
#[derive(Clone, Debug)]
pub enum EmpiricalLoss<'a> {
    Erm(&'a Dataset),
    Mixup(&'a Dataset, PairDraws),
    Mask(&'a Dataset, PairDraws),
}

impl<'a> EmpiricalLoss<'a> {
    pub fn erm(data: &'a Dataset) -> Self {
        EmpiricalLoss::Erm(data)
    }

    pub fn mixup(data: &'a Dataset, pairs: PairDraws) -> Result<Self> {
        pairs.check(data)?;
        if pairs.is_mask() {
            return Err(Error::InvalidArgument("expected Mixup draws".into()));
        }
        Ok(EmpiricalLoss::Mixup(data, pairs))
    }

    pub fn mask(data: &'a Dataset, pairs: PairDraws) -> Result<Self> {
        pairs.check(data)?;
        if !pairs.is_mask() {
            return Err(Error::InvalidArgument("expected mask draws".into()));
        }
        Ok(EmpiricalLoss::Mask(data, pairs))
    }

    pub fn data(&self) -> &Dataset {
        match self {
            EmpiricalLoss::Erm(d) | EmpiricalLoss::Mixup(d, _) | EmpiricalLoss::Mask(d, _) => d,
        }
    }

    fn eval(&self, w: &DVector<f64>, want: Want) -> Eval {
        match self {
            EmpiricalLoss::Erm(d) => erm_eval(w, d, want),
            EmpiricalLoss::Mixup(d, p) => mixup_eval(w, d, p, want),
            EmpiricalLoss::Mask(d, p) => mask_eval(w, d, p, want),
        }
    }
}

impl Objective for EmpiricalLoss<'_> {
    fn dim(&self) -> usize {
        self.data().dim()
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        self.eval(w, VALUE).value
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        self.eval(w, GRAD).grad
    }

    fn value_gradient(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let e = self.eval(w, VALUE);
        (e.value, e.grad)
    }

    fn set_epoch(&mut self, epoch: u64) {
        match self {
            EmpiricalLoss::Erm(_) => {}
            EmpiricalLoss::Mixup(_, p) | EmpiricalLoss::Mask(_, p) => p.redraw(epoch),
        }
    }
}

impl SecondOrder for EmpiricalLoss<'_> {
    fn evaluate(&self, w: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let e = self.eval(w, ALL);
        (e.value, e.grad, e.hess.expect("requested"))
    }
}
