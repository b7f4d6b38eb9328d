//! Logistic loss `l(z) = log(1 + e^{-z})` and its derivatives, stable for all `z`.

/// `l(z)`, computed as `log1p(exp(-|z|)) + max(-z, 0)`.
#[inline]
pub fn loss(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + (-z).max(0.0)
}

/// Returns `(sigmoid(z), sigmoid(-z))` without cancellation.
#[inline]
pub fn sigmoid_pair(z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e * big;
    if z >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    sigmoid_pair(z).0
}

/// `l'(z) = -1/(1+e^z)`.
#[inline]
pub fn d1(z: f64) -> f64 {
    -sigmoid_pair(z).1
}

/// `l''(z) = e^z/(1+e^z)^2`.
#[inline]
pub fn d2(z: f64) -> f64 {
    let (p, q) = sigmoid_pair(z);
    p * q
}

/// `[l, l', l'', l''', l'''']` at `z`, sharing one exponential.
#[inline]
pub fn derivatives(z: f64) -> [f64; 5] {
    let e = (-z.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e * big;
    let (p, q) = if z >= 0.0 { (big, small) } else { (small, big) };
    let pq = p * q;
    [e.ln_1p() + (-z).max(0.0), -q, pq, pq * (q - p), pq * (1.0 - 6.0 * pq)]
}

/// Neumaier compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}
