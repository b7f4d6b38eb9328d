//! Hard-margin minimum-norm separator through the origin, and a linear
//! separability test built on it.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginStatus {
    /// KKT conditions hold to the requested tolerance.
    Converged,
    /// The iteration budget ran out, with and without the 10x retry.
    NotConverged,
}

#[derive(Clone, Debug)]
pub struct MarginSolution {
    pub w_bar: DVector<f64>,
    pub alphas: Vec<f64>,
    /// True iff the margin problem was solved: `w_bar` is the minimum-norm `w`
    /// with `(2y_i - 1) w^T x_i >= 1` for every sample.
    pub feasible: bool,
    /// True if some dual iterate strictly separated the data, even when the
    /// solver did not converge.
    pub separating_witness: bool,
    pub status: MarginStatus,
    /// Epochs used by the final attempt.
    pub iterations: usize,
}

impl MarginSolution {
    /// Largest KKT violation: primal infeasibility, complementary slackness and
    /// stationarity `w = sum alpha_i z_i`.
    ///
    /// Rounding in `z_i^T w` is about `eps * sum_j alpha_j |z_i^T z_j|`, so the
    /// slackness product can reach `eps * (sum alpha)^2` on badly conditioned
    /// supports. The slackness term is therefore divided by `max(1, sum alpha)`.
    pub fn kkt_violation(&self, data: &Dataset) -> f64 {
        let z = signed_points(data);
        let scale = self.alphas.iter().sum::<f64>().max(1.0);
        let mut w = DVector::zeros(data.dim());
        let mut worst: f64 = 0.0;
        for (i, zi) in z.iter().enumerate() {
            w += zi * self.alphas[i];
            let slack = zi.dot(&self.w_bar) - 1.0;
            worst = worst.max(-slack).max(self.alphas[i] * slack / scale).max(-self.alphas[i]);
        }
        worst.max((w - &self.w_bar).amax())
    }
}

fn signed_points(data: &Dataset) -> Vec<DVector<f64>> {
    (0..data.len())
        .map(|i| DVector::from_row_slice(data.x(i)) * (2.0 * data.label(i) - 1.0))
        .collect()
}

struct Dual {
    z: Vec<DVector<f64>>,
    sq: Vec<f64>,
}

impl Dual {
    /// Largest violation of the dual optimality conditions.
    fn violation(&self, alpha: &[f64], w: &DVector<f64>) -> f64 {
        self.z
            .iter()
            .zip(alpha)
            .map(|(z, &a)| {
                let g = 1.0 - z.dot(w);
                if a > 0.0 { g.abs() } else { g.max(0.0) }
            })
            .fold(0.0, f64::max)
    }

    fn rebuild(&self, alpha: &[f64], d: usize) -> DVector<f64> {
        let mut w = DVector::zeros(d);
        for (z, &a) in self.z.iter().zip(alpha) {
            if a != 0.0 {
                w += z * a;
            }
        }
        w
    }

    /// Solves the KKT system on the current support exactly; returns the
    /// polished multipliers if they are nonnegative.
    fn polish(&self, alpha: &[f64]) -> Option<Vec<f64>> {
        let active: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let k = active.len();
        let gram = DMatrix::from_fn(k, k, |a, b| self.z[active[a]].dot(&self.z[active[b]]));
        let sol = gram.cholesky()?.solve(&DVector::from_element(k, 1.0));
        if sol.iter().any(|&v| !(v >= 0.0)) {
            return None;
        }
        let mut out = vec![0.0; alpha.len()];
        for (a, &i) in active.iter().enumerate() {
            out[i] = sol[a];
        }
        Some(out)
    }

    /// Dual coordinate ascent on `max sum a - |sum a_i z_i|^2 / 2, a >= 0`.
    fn run(&self, d: usize, tol: f64, max_iters: usize) -> (Vec<f64>, DVector<f64>, bool, bool, usize) {
        let n = self.z.len();
        let mut alpha = vec![0.0; n];
        let mut w = DVector::zeros(d);
        let mut witness = false;
        for epoch in 1..=max_iters {
            for i in 0..n {
                if self.sq[i] == 0.0 {
                    continue;
                }
                let g = 1.0 - self.z[i].dot(&w);
                let next = (alpha[i] + g / self.sq[i]).max(0.0);
                let delta = next - alpha[i];
                if delta != 0.0 {
                    w.axpy(delta, &self.z[i], 1.0);
                    alpha[i] = next;
                }
            }
            if !witness && self.z.iter().all(|z| z.dot(&w) > 0.0) {
                witness = true;
            }
            if epoch % 10 == 0 || epoch == max_iters {
                w = self.rebuild(&alpha, d);
                let current = self.violation(&alpha, &w);
                if let Some(p) = self.polish(&alpha) {
                    let pw = self.rebuild(&p, d);
                    let polished = self.violation(&p, &pw);
                    if polished <= tol && polished <= current {
                        return (p, pw, true, true, epoch);
                    }
                }
                if current <= tol {
                    return (alpha, w, true, true, epoch);
                }
            }
        }
        (alpha, w, false, witness, max_iters)
    }
}

/// Minimum-norm `w` with `(2y_i - 1) w^T x_i >= 1` for all `i`, by dual coordinate
/// ascent with periodic exact solves on the current support. Convergence means
/// every dual optimality condition holds to `tol`. A run that does not converge
/// is retried once with `10 * max_iters` epochs before being reported.
///
/// A sample with `x_i = 0` can never satisfy its constraint, so such data are
/// reported infeasible.
pub fn solve_max_margin(data: &Dataset, tol: f64, max_iters: usize) -> MarginSolution {
    let d = data.dim();
    let z = signed_points(data);
    let sq: Vec<f64> = z.iter().map(|v| v.norm_squared()).collect();
    if sq.contains(&0.0) {
        return MarginSolution {
            w_bar: DVector::zeros(d),
            alphas: vec![0.0; z.len()],
            feasible: false,
            separating_witness: false,
            status: MarginStatus::NotConverged,
            iterations: 0,
        };
    }
    let dual = Dual { z, sq };
    let mut result = dual.run(d, tol, max_iters);
    if !result.2 {
        let witness = result.3;
        result = dual.run(d, tol, max_iters.saturating_mul(10));
        result.3 |= witness;
    }
    let (alphas, w_bar, converged, witness, iterations) = result;
    MarginSolution {
        w_bar,
        alphas,
        feasible: converged,
        separating_witness: witness,
        status: if converged { MarginStatus::Converged } else { MarginStatus::NotConverged },
        iterations,
    }
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Whether the data can be strictly separated by a hyperplane through the origin,
/// decided by the feasibility of `(2y_i - 1) w . x_i >= 1` as a linear program.
/// Unlike the dual solver this is fast on data that cannot be separated.
pub fn is_separable(data: &Dataset) -> bool {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..data.dim()).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for i in 0..data.len() {
        let s = 2.0 * data.label(i) - 1.0;
        let row: Vec<_> = vars.iter().zip(data.x(i)).map(|(&v, &x)| (v, s * x)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Ge, 1.0);
    }
    lp.solve().is_ok()
}
