//! Mixing laws: the `(lambda, g)` law of Mixup and the `(mask, lambda)` law of masked Mixup.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::Quadrature;

/// Law of the mixing weight `lambda` on [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum LambdaLaw {
    Beta { alpha: f64 },
    PointMass { value: f64 },
    Uniform,
}

impl LambdaLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaLaw::Beta { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                Err(Error::InvalidScheme(format!("beta alpha must be positive, got {alpha}")))
            }
            LambdaLaw::PointMass { value } if !(0.0..=1.0).contains(&value) => {
                Err(Error::InvalidScheme(format!("point mass {value} outside [0,1]")))
            }
            _ => Ok(()),
        }
    }

    /// Draws one value. Beta draws other than Beta(1, 1) use the ratio of two Gamma variates.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            // Beta(1, 1) is uniform; one draw instead of two Gamma variates.
            LambdaLaw::Beta { alpha: 1.0 } => rng.random::<f64>(),
            LambdaLaw::Beta { alpha } => {
                let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
                let a = gamma.sample(rng);
                let b = gamma.sample(rng);
                if a + b == 0.0 {
                    // Both draws underflowed; only possible for tiny alpha.
                    if rng.random::<bool>() { 1.0 } else { 0.0 }
                } else {
                    a / (a + b)
                }
            }
            LambdaLaw::PointMass { value } => value,
            LambdaLaw::Uniform => rng.random::<f64>(),
        }
    }

    /// Quadrature nodes `(lambda_i, w_i)` with `sum w_i f(lambda_i) ~ E[f(lambda)]`.
    /// Beta weights are the unit rule reweighted by the density and renormalized.
    pub fn nodes(&self, quad: &Quadrature) -> Vec<(f64, f64)> {
        match *self {
            LambdaLaw::PointMass { value } => vec![(value, 1.0)],
            LambdaLaw::Uniform => {
                let (x, w) = quad.unit_rule();
                x.iter().copied().zip(w.iter().copied()).collect()
            }
            LambdaLaw::Beta { alpha } => {
                let (x, w) = quad.unit_rule();
                let raw: Vec<(f64, f64)> = x
                    .iter()
                    .zip(w)
                    .map(|(&l, &w)| (l, w * (l * (1.0 - l)).powf(alpha - 1.0)))
                    .collect();
                let total: f64 = raw.iter().map(|p| p.1).sum();
                raw.into_iter().map(|(l, w)| (l, w / total)).collect()
            }
        }
    }

    /// Exact mean.
    pub fn mean(&self) -> f64 {
        match *self {
            LambdaLaw::PointMass { value } => value,
            LambdaLaw::Beta { .. } | LambdaLaw::Uniform => 0.5,
        }
    }

    /// `E[f(lambda)]` by [`LambdaLaw::nodes`].
    pub fn expect(&self, quad: &Quadrature, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes(quad).into_iter().map(|(l, w)| w * f(l)).sum()
    }

    /// Whether `lambda` lies outside {0, 1} with positive probability.
    fn hits_interior(&self) -> bool {
        match *self {
            LambdaLaw::PointMass { value } => value > 0.0 && value < 1.0,
            _ => true,
        }
    }
}

/// The map `g` applied to `lambda` before mixing inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMap {
    Identity,
    /// `g = 1/2` everywhere. Never valid; kept for negative tests.
    Midpoint,
    /// Piecewise-linear interpolation through `(xs[i], ys[i])`, `xs` increasing from 0 to 1.
    Tabulated { xs: Vec<f64>, ys: Vec<f64> },
}

impl MixMap {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            MixMap::Identity => z,
            MixMap::Midpoint => 0.5,
            MixMap::Tabulated { xs, ys } => {
                let k = xs.partition_point(|&x| x <= z).clamp(1, xs.len() - 1);
                let (x0, x1) = (xs[k - 1], xs[k]);
                let t = if x1 > x0 { ((z - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 0.0 };
                ys[k - 1] + t * (ys[k] - ys[k - 1])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let MixMap::Tabulated { xs, ys } = self {
            let ok = xs.len() >= 2
                && xs.len() == ys.len()
                && xs[0] == 0.0
                && xs[xs.len() - 1] == 1.0
                && xs.windows(2).all(|p| p[1] > p[0])
                && ys.iter().all(|y| (0.0..=1.0).contains(y));
            if !ok {
                return Err(Error::InvalidScheme("tabulated g needs increasing xs from 0 to 1 and ys in [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Checks `g(z) > 1/2 <=> z > 1/2` on [0, 1]. For piecewise-linear maps it is
    /// enough to check the knots, the point 1/2 and a fine grid.
    fn preserves_side(&self) -> bool {
        let mut points: Vec<f64> = (0..=4096).map(|i| i as f64 / 4096.0).collect();
        if let MixMap::Tabulated { xs, .. } = self {
            points.extend(xs.iter().copied());
        }
        points.iter().all(|&z| (self.eval(z) > 0.5) == (z > 0.5))
    }
}

/// A Mixup scheme `(Lambda, g)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupScheme {
    pub law: LambdaLaw,
    pub g: MixMap,
}

impl MixupScheme {
    /// Validated constructor.
    pub fn new(law: LambdaLaw, g: MixMap) -> Result<Self> {
        let s = Self::unchecked(law, g)?;
        if !s.is_valid() {
            return Err(Error::InvalidScheme(
                "need P[lambda not in {0,1} and g(lambda) != 1/2] > 0 and g(z) > 1/2 iff z > 1/2".into(),
            ));
        }
        Ok(s)
    }

    /// Skips the validity condition (parameters are still checked). For degenerate test schemes.
    pub fn unchecked(law: LambdaLaw, g: MixMap) -> Result<Self> {
        law.validate()?;
        g.validate()?;
        Ok(MixupScheme { law, g })
    }

    /// Beta(alpha, alpha) with identity `g`.
    pub fn beta(alpha: f64) -> Result<Self> {
        Self::new(LambdaLaw::Beta { alpha }, MixMap::Identity)
    }

    pub fn is_valid(&self) -> bool {
        let interior = match (&self.law, &self.g) {
            (_, MixMap::Midpoint) => false,
            (LambdaLaw::PointMass { value }, g) => self.law.hits_interior() && g.eval(*value) != 0.5,
            (_, MixMap::Identity) => true,
            // A continuous law charges any interval where g differs from 1/2.
            (_, MixMap::Tabulated { ys, .. }) => ys.iter().any(|&y| y != 0.5),
        };
        interior && self.g.preserves_side()
    }

    pub fn g(&self, lambda: f64) -> f64 {
        self.g.eval(lambda)
    }
}

/// One atom of an explicit mask law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAtom {
    pub mask: Vec<bool>,
    pub lambda: LambdaLaw,
    pub prob: f64,
}

/// Law of `(M, lambda)` for masked Mixup.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskScheme {
    /// `lambda ~ Beta(alpha, alpha)`, then each mask bit is Bernoulli(`lambda`).
    Bernoulli { alpha: f64 },
    /// Finitely many masks, each with its own conditional law of `lambda`.
    Finite(Vec<MaskAtom>),
}

impl MaskScheme {
    pub fn bernoulli(alpha: f64) -> Result<Self> {
        let s = MaskScheme::Bernoulli { alpha };
        s.validate(None)?;
        Ok(s)
    }

    pub fn finite(atoms: Vec<MaskAtom>) -> Result<Self> {
        let s = MaskScheme::Finite(atoms);
        s.validate(None)?;
        Ok(s)
    }

    /// Checks parameters, and the mask dimension when `d` is given.
    pub fn validate(&self, d: Option<usize>) -> Result<()> {
        match self {
            MaskScheme::Bernoulli { alpha } => {
                LambdaLaw::Beta { alpha: *alpha }.validate()?;
                if let Some(d) = d {
                    if d > 64 {
                        return Err(Error::InvalidScheme(format!("masks support d <= 64, got {d}")));
                    }
                }
            }
            MaskScheme::Finite(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::InvalidScheme("empty mask support".into()));
                }
                let len = atoms[0].mask.len();
                let mut total = 0.0;
                for a in atoms {
                    a.lambda.validate()?;
                    if a.mask.len() != len || !(a.prob >= 0.0) {
                        return Err(Error::InvalidScheme("masks must share a length and have nonnegative mass".into()));
                    }
                    total += a.prob;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidScheme(format!("mask probabilities sum to {total}")));
                }
                if let Some(d) = d {
                    if len != d || d > 64 {
                        return Err(Error::InvalidScheme(format!("mask length {len} does not fit d = {d}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws `(mask bits, lambda)`; bit `k` of the mask is coordinate `k`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, d: usize) -> (u64, f64) {
        match self {
            MaskScheme::Bernoulli { alpha } => {
                let lambda = LambdaLaw::Beta { alpha: *alpha }.sample(rng);
                let mut bits = 0u64;
                for k in 0..d {
                    bits |= u64::from(rng.random::<f64>() < lambda) << k;
                }
                (bits, lambda)
            }
            MaskScheme::Finite(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = atoms.len() - 1;
                for (i, a) in atoms.iter().enumerate() {
                    acc += a.prob;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let atom = &atoms[pick];
                (mask_bits(&atom.mask), atom.lambda.sample(rng))
            }
        }
    }

    /// Whether `{mu * (2M - 1)}` over the support spans `R^d` and every mask
    /// carries mass with `lambda` outside {0, 1}.
    pub fn assumption_holds(&self, mu: &[f64]) -> bool {
        let d = mu.len();
        match self {
            // All sign patterns appear, and `lambda` is interior almost surely.
            MaskScheme::Bernoulli { .. } => mu.iter().all(|&m| m != 0.0),
            MaskScheme::Finite(atoms) => {
                let support: Vec<&MaskAtom> = atoms.iter().filter(|a| a.prob > 0.0).collect();
                if support.iter().any(|a| a.mask.len() != d) {
                    return false;
                }
                let mut masks: Vec<&Vec<bool>> = support.iter().map(|a| &a.mask).collect();
                masks.sort();
                masks.dedup();
                let interior = masks.iter().all(|m| {
                    support.iter().any(|a| &&a.mask == m && a.lambda.hits_interior())
                });
                let rows: Vec<Vec<f64>> = masks
                    .iter()
                    .map(|m| (0..d).map(|k| if m[k] { mu[k] } else { -mu[k] }).collect())
                    .collect();
                interior && rank(rows, d) == d
            }
        }
    }
}

pub(crate) fn mask_bits(mask: &[bool]) -> u64 {
    mask.iter().enumerate().fold(0, |acc, (k, &b)| if b { acc | (1 << k) } else { acc })
}

fn rank(mut rows: Vec<Vec<f64>>, d: usize) -> usize {
    let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale.max(1e-300) * d as f64;
    let mut r = 0;
    for col in 0..d {
        let Some(piv) = (r..rows.len()).max_by(|&a, &b| rows[a][col].abs().total_cmp(&rows[b][col].abs())) else {
            break;
        };
        if rows[piv][col].abs() <= tol {
            continue;
        }
        rows.swap(r, piv);
        for i in r + 1..rows.len() {
            let f = rows[i][col] / rows[r][col];
            for k in col..d {
                rows[i][k] -= f * rows[r][k];
            }
        }
        r += 1;
    }
    r
}

/// JSON form of a Mixup scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SchemeConfig {
    Beta {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "identity")]
        g: MixMapConfig,
    },
    PointMass {
        value: f64,
        #[serde(default = "identity")]
        g: MixMapConfig,
    },
    Uniform {
        #[serde(default = "identity")]
        g: MixMapConfig,
    },
    BernoulliMask {
        #[serde(default = "one")]
        alpha: f64,
    },
    FiniteMask {
        atoms: Vec<MaskAtom>,
    },
}

/// JSON form of `g`: `"identity"`, `"midpoint"`, or `{"xs": [...], "ys": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MixMapConfig {
    Named(String),
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

fn identity() -> MixMapConfig {
    MixMapConfig::Named("identity".into())
}

impl MixMapConfig {
    fn build(&self) -> Result<MixMap> {
        match self {
            MixMapConfig::Named(n) if n == "identity" => Ok(MixMap::Identity),
            MixMapConfig::Named(n) if n == "midpoint" => Ok(MixMap::Midpoint),
            MixMapConfig::Named(n) => Err(Error::InvalidScheme(format!("unknown g {n:?}"))),
            MixMapConfig::Table { xs, ys } => Ok(MixMap::Tabulated { xs: xs.clone(), ys: ys.clone() }),
        }
    }

    fn from_map(g: &MixMap) -> Self {
        match g {
            MixMap::Identity => identity(),
            MixMap::Midpoint => MixMapConfig::Named("midpoint".into()),
            MixMap::Tabulated { xs, ys } => MixMapConfig::Table { xs: xs.clone(), ys: ys.clone() },
        }
    }
}

impl SchemeConfig {
    /// Builds a validated Mixup scheme; fails for mask configs.
    pub fn mixup(&self) -> Result<MixupScheme> {
        match self {
            SchemeConfig::Beta { alpha, g } => MixupScheme::new(LambdaLaw::Beta { alpha: *alpha }, g.build()?),
            SchemeConfig::PointMass { value, g } => MixupScheme::new(LambdaLaw::PointMass { value: *value }, g.build()?),
            SchemeConfig::Uniform { g } => MixupScheme::new(LambdaLaw::Uniform, g.build()?),
            _ => Err(Error::InvalidScheme("expected a Mixup scheme".into())),
        }
    }

    /// Builds a mask scheme; fails for Mixup configs.
    pub fn mask(&self) -> Result<MaskScheme> {
        match self {
            SchemeConfig::BernoulliMask { alpha } => MaskScheme::bernoulli(*alpha),
            SchemeConfig::FiniteMask { atoms } => MaskScheme::finite(atoms.clone()),
            _ => Err(Error::InvalidScheme("expected a mask scheme".into())),
        }
    }

    pub fn from_mixup(s: &MixupScheme) -> Self {
        let g = MixMapConfig::from_map(&s.g);
        match s.law {
            LambdaLaw::Beta { alpha } => SchemeConfig::Beta { alpha, g },
            LambdaLaw::PointMass { value } => SchemeConfig::PointMass { value, g },
            LambdaLaw::Uniform => SchemeConfig::Uniform { g },
        }
    }

    pub fn from_mask(s: &MaskScheme) -> Self {
        match s {
            MaskScheme::Bernoulli { alpha } => SchemeConfig::BernoulliMask { alpha: *alpha },
            MaskScheme::Finite(atoms) => SchemeConfig::FiniteMask { atoms: atoms.clone() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn validity_rules() {
        assert!(MixupScheme::beta(1.0).unwrap().is_valid());
        assert!(MixupScheme::new(LambdaLaw::Beta { alpha: 1.0 }, MixMap::Midpoint).is_err());
        assert!(MixupScheme::new(LambdaLaw::PointMass { value: 0.5 }, MixMap::Identity).is_err());
        assert!(MixupScheme::new(LambdaLaw::PointMass { value: 1.0 }, MixMap::Identity).is_err());
        assert!(MixupScheme::new(LambdaLaw::PointMass { value: 0.3 }, MixMap::Identity).is_ok());
        assert!(MixupScheme::unchecked(LambdaLaw::PointMass { value: 1.0 }, MixMap::Identity).is_ok());
        assert!(MixupScheme::beta(0.0).is_err());
        // A g that flips sides is invalid.
        let flip = MixMap::Tabulated { xs: vec![0.0, 1.0], ys: vec![1.0, 0.0] };
        assert!(MixupScheme::new(LambdaLaw::Uniform, flip).is_err());
        let smooth = MixMap::Tabulated { xs: vec![0.0, 0.5, 1.0], ys: vec![0.1, 0.5, 0.8] };
        assert!(MixupScheme::new(LambdaLaw::Uniform, smooth).is_ok());
    }

    #[test]
    fn tabulated_interpolates() {
        let g = MixMap::Tabulated { xs: vec![0.0, 0.5, 1.0], ys: vec![0.0, 0.5, 0.7] };
        assert_eq!(g.eval(0.25), 0.25);
        assert!((g.eval(0.75) - 0.6).abs() < 1e-15);
        assert_eq!(g.eval(1.0), 0.7);
    }

    #[test]
    fn beta_one_draws_look_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let law = LambdaLaw::Beta { alpha: 1.0 };
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| law.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let below = draws.iter().filter(|&&l| l < 0.25).count() as f64 / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n as f64).sqrt());
        assert!((below - 0.25).abs() < 4.0 * (0.25 * 0.75 / n as f64).sqrt());
    }

    #[test]
    fn beta_moments_by_quadrature() {
        let quad = Quadrature::default();
        // Beta(2,2): E[l] = 1/2, E[l^2] = 3/10.
        let law = LambdaLaw::Beta { alpha: 2.0 };
        assert!((law.expect(&quad, |l| l) - 0.5).abs() < 1e-14);
        assert!((law.expect(&quad, |l| l * l) - 0.3).abs() < 1e-14);
    }

    #[test]
    fn mask_assumption() {
        let mu = [0.5, -0.2];
        assert!(MaskScheme::bernoulli(1.0).unwrap().assumption_holds(&mu));
        assert!(!MaskScheme::bernoulli(1.0).unwrap().assumption_holds(&[0.5, 0.0]));
        let ones = MaskScheme::finite(vec![MaskAtom {
            mask: vec![true, true],
            lambda: LambdaLaw::Beta { alpha: 1.0 },
            prob: 1.0,
        }])
        .unwrap();
        assert!(!ones.assumption_holds(&mu));
        let two = MaskScheme::finite(vec![
            MaskAtom { mask: vec![true, false], lambda: LambdaLaw::Uniform, prob: 0.5 },
            MaskAtom { mask: vec![true, true], lambda: LambdaLaw::Uniform, prob: 0.5 },
        ])
        .unwrap();
        assert!(two.assumption_holds(&mu));
        let degenerate = MaskScheme::finite(vec![
            MaskAtom { mask: vec![true, false], lambda: LambdaLaw::PointMass { value: 1.0 }, prob: 0.5 },
            MaskAtom { mask: vec![true, true], lambda: LambdaLaw::Uniform, prob: 0.5 },
        ])
        .unwrap();
        assert!(!degenerate.assumption_holds(&mu));
    }

    #[test]
    fn bernoulli_mask_bit_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = MaskScheme::bernoulli(1.0).unwrap();
        let n = 100_000;
        let mut ones = 0u32;
        for _ in 0..n {
            ones += s.sample(&mut rng, 10).0.count_ones();
        }
        let rate = ones as f64 / (10.0 * n as f64);
        assert!((rate - 0.5).abs() < 0.005);
    }

    #[test]
    fn scheme_json() {
        let cfg: SchemeConfig = serde_json::from_str(r#"{"type":"beta","alpha":1.0,"g":"identity"}"#).unwrap();
        assert_eq!(cfg.mixup().unwrap(), MixupScheme::beta(1.0).unwrap());
        let cfg: SchemeConfig = serde_json::from_str(r#"{"type":"bernoulli_mask","alpha":1.0}"#).unwrap();
        assert_eq!(cfg.mask().unwrap(), MaskScheme::Bernoulli { alpha: 1.0 });
        assert!(cfg.mixup().is_err());
        let text = serde_json::to_string(&SchemeConfig::from_mixup(&MixupScheme::beta(2.0).unwrap())).unwrap();
        assert_eq!(text, r#"{"type":"beta","alpha":2.0,"g":"identity"}"#);
        let bad: SchemeConfig = serde_json::from_str(r#"{"type":"beta","alpha":1.0,"g":"midpoint"}"#).unwrap();
        assert!(bad.mixup().is_err());
    }
}
