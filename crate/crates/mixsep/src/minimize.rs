//! Optimizers: damped Newton, full-batch gradient descent and Adam, plus a
//! divergence test for losses without a finite minimizer.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::cosine_similarity;

/// A differentiable loss of a weight vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, w: &DVector<f64>) -> f64;
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64>;

    fn value_gradient(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.value(w), self.gradient(w))
    }

    /// Hook called before each epoch of a first-order run; losses with
    /// per-epoch randomness redraw here.
    fn set_epoch(&mut self, _epoch: u64) {}
}

/// An objective with a Hessian.
pub trait SecondOrder: Objective {
    /// Value, gradient and Hessian at `w`.
    fn evaluate(&self, w: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, w: &DVector<f64>) -> f64 {
        (**self).value(w)
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (**self).gradient(w)
    }
    fn value_gradient(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        (**self).value_gradient(w)
    }
}

impl<T: SecondOrder + ?Sized> SecondOrder for &T {
    fn evaluate(&self, w: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        (**self).evaluate(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIters,
    Diverged,
}

/// One row of an optimizer trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Cosine similarity to the reference direction, if one was given and `w != 0`.
    pub sim: Option<f64>,
    #[serde(skip)]
    pub w_norm: f64,
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub w_star: DVector<f64>,
    pub status: Status,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub final_loss: f64,
    /// Iteration at which a non-finite value appeared.
    pub diverged_at: Option<usize>,
    pub trace: Option<Vec<TraceRecord>>,
}

impl MinimizeResult {
    /// Writes the trace as CSV `epoch,loss,grad_norm,sim`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "grad_norm", "sim"])?;
        for r in self.trace.iter().flatten() {
            out.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.grad_norm),
                r.sim.map(|s| format!("{s:?}")).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn similarity(w: &DVector<f64>, reference: Option<&DVector<f64>>) -> Option<f64> {
    reference.and_then(|r| cosine_similarity(w, r).ok())
}

fn record(epoch: usize, loss: f64, grad: &DVector<f64>, w: &DVector<f64>, reference: Option<&DVector<f64>>) -> TraceRecord {
    TraceRecord { epoch, loss, grad_norm: grad.norm(), sim: similarity(w, reference), w_norm: w.norm() }
}

#[derive(Clone, Debug)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Stop with [`Status::Diverged`] once `|w|` exceeds this.
    pub max_norm: Option<f64>,
    pub reference: Option<DVector<f64>>,
    pub record_trace: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { grad_tol: 1e-10, max_iters: 100, max_norm: None, reference: None, record_trace: false }
    }
}

const ARMIJO: f64 = 1e-4;

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(c) = h.clone().cholesky() {
        return Some(-c.solve(g));
    }
    let mut ridge = 1e-12;
    while ridge <= 1e-6 * (1.0 + 1e-9) {
        let shifted = h + DMatrix::identity(h.nrows(), h.ncols()) * ridge;
        if let Some(c) = shifted.cholesky() {
            return Some(-c.solve(g));
        }
        ridge *= 10.0;
    }
    None
}

/// Damped Newton with Armijo backtracking (`c = 1e-4`, halving). A failed
/// Hessian solve is retried with a ridge from 1e-12 up to 1e-6 before giving up.
/// Near the optimum, where loss differences fall below rounding, a full step is
/// accepted if it reduces the gradient norm.
pub fn newton_minimize<O: SecondOrder + ?Sized>(obj: &O, w0: &DVector<f64>, opts: &NewtonOptions) -> MinimizeResult {
    let reference = opts.reference.as_ref();
    let mut w = w0.clone();
    let (mut f, mut g, mut h) = obj.evaluate(&w);
    let mut trace = opts.record_trace.then(Vec::new);
    let mut status = Status::MaxIters;
    let mut iterations = 0;
    let mut diverged_at = None;
    for it in 0..=opts.max_iters {
        iterations = it;
        if let Some(t) = trace.as_mut() {
            t.push(record(it, f, &g, &w, reference));
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            status = Status::Diverged;
            diverged_at = Some(it);
            break;
        }
        if g.norm() <= opts.grad_tol {
            status = Status::Converged;
            break;
        }
        if opts.max_norm.is_some_and(|r| w.norm() > r) {
            status = Status::Diverged;
            break;
        }
        if it == opts.max_iters {
            break;
        }
        let Some(mut p) = newton_direction(&h, &g) else {
            status = Status::Diverged;
            break;
        };
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            p = -&g;
            slope = -g.norm_squared();
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t >= 1e-12 {
            let cand = &w + &p * t;
            let fc = obj.value(&cand);
            if fc.is_finite() && fc <= f + ARMIJO * t * slope {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let next = match accepted {
            Some(c) => c,
            None => {
                let cand = &w + &p;
                let (f2, g2, h2) = obj.evaluate(&cand);
                if f2.is_finite() && g2.norm() < g.norm() {
                    w = cand;
                    f = f2;
                    g = g2;
                    h = h2;
                    continue;
                }
                break;
            }
        };
        w = next;
        (f, g, h) = obj.evaluate(&w);
    }
    MinimizeResult {
        final_grad_norm: g.norm(),
        final_loss: f,
        w_star: w,
        status,
        iterations,
        diverged_at,
        trace,
    }
}

#[derive(Clone, Debug)]
pub struct GdOptions {
    pub lr: f64,
    pub epochs: usize,
    pub reference: Option<DVector<f64>>,
    pub record_trace: bool,
}

impl Default for GdOptions {
    fn default() -> Self {
        GdOptions { lr: 1.0, epochs: 1500, reference: None, record_trace: false }
    }
}

/// Full-batch gradient descent `w <- w - lr * grad` for a fixed number of epochs.
/// Trace row `t` holds the loss, gradient norm and similarity at the iterate before step `t`.
pub fn gd_minimize<O: Objective + ?Sized>(obj: &mut O, w0: &DVector<f64>, opts: &GdOptions) -> MinimizeResult {
    first_order(obj, w0, opts.epochs, opts.reference.as_ref(), opts.record_trace, |_, g, w| {
        *w -= g * opts.lr;
    })
}

#[derive(Clone, Debug)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub reference: Option<DVector<f64>>,
    pub record_trace: bool,
}

impl Default for AdamOptions {
    fn default() -> Self {
        AdamOptions {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1500,
            reference: None,
            record_trace: false,
        }
    }
}

/// Full-batch Adam with bias correction.
pub fn adam_minimize<O: Objective + ?Sized>(obj: &mut O, w0: &DVector<f64>, opts: &AdamOptions) -> MinimizeResult {
    let mut state = AdamState::new(w0.len());
    first_order(obj, w0, opts.epochs, opts.reference.as_ref(), opts.record_trace, |_, g, w| {
        state.step(w.as_mut_slice(), g.as_slice(), opts);
    })
}

/// Adam moment estimates, usable on any flat parameter slice.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], opts: &AdamOptions) {
        self.t += 1;
        let c1 = 1.0 - opts.beta1.powi(self.t);
        let c2 = 1.0 - opts.beta2.powi(self.t);
        for k in 0..w.len() {
            self.m[k] = opts.beta1 * self.m[k] + (1.0 - opts.beta1) * g[k];
            self.v[k] = opts.beta2 * self.v[k] + (1.0 - opts.beta2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            w[k] -= opts.lr * mh / (vh.sqrt() + opts.eps);
        }
    }
}

fn first_order<O: Objective + ?Sized>(
    obj: &mut O,
    w0: &DVector<f64>,
    epochs: usize,
    reference: Option<&DVector<f64>>,
    record_trace: bool,
    mut update: impl FnMut(usize, &DVector<f64>, &mut DVector<f64>),
) -> MinimizeResult {
    let mut w = w0.clone();
    let mut trace = record_trace.then(Vec::new);
    for epoch in 0..epochs {
        obj.set_epoch(epoch as u64);
        let (f, g) = if record_trace { obj.value_gradient(&w) } else { (f64::NAN, obj.gradient(&w)) };
        let finite = g.iter().all(|v| v.is_finite()) && (!record_trace || f.is_finite());
        if let Some(t) = trace.as_mut() {
            t.push(record(epoch, f, &g, &w, reference));
        }
        if !finite {
            return MinimizeResult {
                final_grad_norm: g.norm(),
                final_loss: f,
                w_star: w,
                status: Status::Diverged,
                iterations: epoch,
                diverged_at: Some(epoch),
                trace,
            };
        }
        update(epoch, &g, &mut w);
    }
    obj.set_epoch(epochs as u64);
    let (f, g) = obj.value_gradient(&w);
    let finite = f.is_finite() && g.iter().all(|v| v.is_finite());
    MinimizeResult {
        final_grad_norm: g.norm(),
        final_loss: f,
        w_star: w,
        status: if finite { Status::MaxIters } else { Status::Diverged },
        iterations: epochs,
        diverged_at: (!finite).then_some(epochs),
        trace,
    }
}

/// Flags a run whose loss has no finite minimizer along its direction: either
/// `|w|` exceeds `radius`, or the loss keeps decreasing along the ray
/// `2^k w, k = 0..30`. In both cases the trace, when present, must show the loss
/// still decreasing over its last tenth.
pub fn detect_divergence<O: Objective + ?Sized>(obj: &O, result: &MinimizeResult, radius: f64) -> bool {
    let w = &result.w_star;
    if w.iter().any(|v| !v.is_finite()) {
        return true;
    }
    if let Some(t) = &result.trace {
        let tail = &t[t.len() - t.len().div_ceil(10)..];
        if tail.windows(2).any(|p| p[1].loss > p[0].loss) {
            return false;
        }
    }
    if w.norm() > radius {
        return true;
    }
    if w.norm() == 0.0 {
        return false;
    }
    let mut prev = obj.value(w);
    let start = prev;
    for k in 1..=30 {
        let v = obj.value(&(w * 2f64.powi(k)));
        if v > prev {
            return false;
        }
        prev = v;
    }
    prev < start
}
