//! A two-layer ReLU network trained with ERM, Mixup or masked Mixup on 2-D data
//! whose classes are noisy bands around a shared sine curve.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::losses::logistic;
use crate::losses::scheme::{MaskScheme, MixupScheme, SchemeConfig};
use crate::losses::{PairDraws, PairMode};
use crate::minimize::{AdamOptions, AdamState};
use crate::model::Dataset;

pub const DEFAULT_HIDDEN: usize = 500;
/// Seed of the weight initialization unless overridden.
pub const DEFAULT_INIT_SEED: u64 = 0x5EED;

/// `x -> w2 . relu(W1 x + b1) + b2`. The output is the logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerReLU {
    pub w1: Vec<[f64; 2]>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl TwoLayerReLU {
    /// Uniform fan-in initialization: first-layer entries in `±1/sqrt(2)`,
    /// second-layer entries in `±1/sqrt(hidden)`.
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / 2f64.sqrt();
        let b = 1.0 / (hidden as f64).sqrt();
        let w1 = (0..hidden).map(|_| [rng.random_range(-a..a), rng.random_range(-a..a)]).collect();
        let b1 = (0..hidden).map(|_| rng.random_range(-a..a)).collect();
        let w2 = (0..hidden).map(|_| rng.random_range(-b..b)).collect();
        let b2 = rng.random_range(-b..b);
        Ok(TwoLayerReLU { w1, b1, w2, b2 })
    }

    pub fn hidden(&self) -> usize {
        self.w2.len()
    }

    pub fn logit(&self, x: [f64; 2]) -> f64 {
        let mut f = self.b2;
        for k in 0..self.hidden() {
            let a = self.w1[k][0] * x[0] + self.w1[k][1] * x[1] + self.b1[k];
            if a > 0.0 {
                f += self.w2[k] * a;
            }
        }
        f
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden() + 1
    }

    /// Parameters as `[W1 row-major, b1, w2, b2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(self.w1.iter().flatten());
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let h = self.hidden();
        assert_eq!(v.len(), 4 * h + 1, "flat parameter length");
        for k in 0..h {
            self.w1[k] = [v[2 * k], v[2 * k + 1]];
        }
        self.b1.copy_from_slice(&v[2 * h..3 * h]);
        self.w2.copy_from_slice(&v[3 * h..4 * h]);
        self.b2 = v[4 * h];
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let m: TwoLayerReLU = serde_json::from_reader(r)?;
        let h = m.hidden();
        if h == 0 || m.w1.len() != h || m.b1.len() != h {
            return Err(Error::Config("checkpoint layer sizes disagree".into()));
        }
        if !m.is_finite() {
            return Err(Error::Config("checkpoint has non-finite parameters".into()));
        }
        Ok(m)
    }
}

/// A training point with a soft label in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftPoint {
    pub x: [f64; 2],
    pub y: f64,
}

/// Mean of `y l(f) + (1 - y) l(-f)` over `points` and its gradient in the flat layout.
pub fn loss_and_grad(model: &TwoLayerReLU, points: &[SoftPoint]) -> (f64, Vec<f64>) {
    let h = model.hidden();
    let mut grad = vec![0.0; 4 * h + 1];
    let mut loss = 0.0;
    let (gw1, rest) = grad.split_at_mut(2 * h);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(h);
    for p in points {
        let f = model.logit(p.x);
        loss += p.y * logistic::loss(f) + (1.0 - p.y) * logistic::loss(-f);
        let delta = logistic::sigmoid(f) - p.y;
        gb2[0] += delta;
        for k in 0..h {
            let a = model.w1[k][0] * p.x[0] + model.w1[k][1] * p.x[1] + model.b1[k];
            if a > 0.0 {
                gw2[k] += delta * a;
                let back = delta * model.w2[k];
                gw1[2 * k] += back * p.x[0];
                gw1[2 * k + 1] += back * p.x[1];
                gb1[k] += back;
            }
        }
    }
    let scale = 1.0 / points.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Two classes of points `(x1, x2)` with `x1` uniform on `x_range` and
/// `x2 = ±class_offset/2 + amplitude sin(frequency x1) + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SineDataConfig {
    /// Samples per class.
    pub n: usize,
    pub x_range: [f64; 2],
    pub amplitude: f64,
    pub frequency: f64,
    pub class_offset: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SineDataConfig {
    fn default() -> Self {
        Self::large_noise()
    }
}

impl SineDataConfig {
    pub fn large_noise() -> Self {
        SineDataConfig {
            n: 250,
            x_range: [-3.0, 3.0],
            amplitude: 0.5,
            frequency: std::f64::consts::PI,
            class_offset: 2.0,
            noise_sd: 0.4,
            seed: 0,
        }
    }

    pub fn small_noise() -> Self {
        SineDataConfig { noise_sd: 0.05, ..Self::large_noise() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sine data: {m}")));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if !(self.x_range[0] < self.x_range[1]) || !self.x_range.iter().all(|v| v.is_finite()) {
            return bad("x_range must be a finite interval with lo < hi");
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be finite and >= 0");
        }
        if !(self.class_offset > 0.0) || !self.class_offset.is_finite() {
            return bad("class_offset must be finite and > 0");
        }
        if !self.amplitude.is_finite() || !self.frequency.is_finite() {
            return bad("amplitude and frequency must be finite");
        }
        Ok(())
    }

    /// The noiseless class-`c` curve at `x1`.
    pub fn curve(&self, c: u8, x1: f64) -> f64 {
        (2.0 * f64::from(c) - 1.0) * self.class_offset / 2.0 + self.amplitude * (self.frequency * x1).sin()
    }
}

/// `n` points of class 0 followed by `n` points of class 1.
pub fn gen_sine_data(cfg: &SineDataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xs = Vec::with_capacity(4 * cfg.n);
    let mut ys = Vec::with_capacity(2 * cfg.n);
    for c in 0..2u8 {
        for _ in 0..cfg.n {
            let x1 = rng.random_range(cfg.x_range[0]..cfg.x_range[1]);
            let z: f64 = rng.sample(StandardNormal);
            xs.push(x1);
            xs.push(cfg.curve(c, x1) + cfg.noise_sd * z);
            ys.push(c);
        }
    }
    Dataset::from_rows(2, xs, ys, cfg.seed)
}

/// Training objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Erm,
    Mixup(MixupScheme),
    Mask(MaskScheme),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Mixup(_) => "mixup",
            Method::Mask(_) => "mask",
        }
    }
}

/// How mixed pairs are formed each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// All `n^2` ordered pairs with fresh draws every epoch.
    #[default]
    Full,
    /// `n` pairs `(i, pi(i))` for a fresh random permutation `pi` every epoch.
    Permuted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden: usize,
    pub init_seed: u64,
    /// Seed of the per-epoch pair draws.
    pub seed: u64,
    pub pairing: Pairing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamOptions::default();
        TrainConfig {
            epochs: 1500,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            hidden: DEFAULT_HIDDEN,
            init_seed: DEFAULT_INIT_SEED,
            seed: 0,
            pairing: Pairing::Full,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamOptions {
        AdamOptions {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            epochs: self.epochs,
            ..AdamOptions::default()
        }
    }
}

/// A trained model and the full-batch loss before each update.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: TwoLayerReLU,
    pub losses: Vec<f64>,
}

/// Full-batch Adam on the chosen objective. Fails with [`Error::NonFinite`] at
/// the first epoch whose loss or gradient is not finite.
pub fn train_mlp(data: &Dataset, method: &Method, cfg: &TrainConfig) -> Result<TrainRun> {
    match method {
        Method::Erm => {}
        Method::Mixup(s) if !s.is_valid() => {
            return Err(Error::InvalidScheme("Mixup scheme is not valid".into()));
        }
        Method::Mixup(_) => {}
        Method::Mask(s) => s.validate(Some(2))?,
    }
    train_unchecked(data, method, cfg)
}

fn train_unchecked(data: &Dataset, method: &Method, cfg: &TrainConfig) -> Result<TrainRun> {
    check_dim(2, data.dim())?;
    if data.len() < 2 && *method != Method::Erm {
        return Err(Error::InvalidArgument("mixing needs at least two points".into()));
    }
    let mut model = TwoLayerReLU::new(cfg.hidden, cfg.init_seed)?;
    let adam = cfg.adam();
    let mut state = AdamState::new(model.num_params());
    let mut params = model.to_flat();
    let mut batch = Batcher::new(data, method, cfg)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let points = batch.points(epoch);
        let (loss, grad) = loss_and_grad(&model, points);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { epoch });
        }
        losses.push(loss);
        state.step(&mut params, &grad, &adam);
        model.set_flat(&params);
    }
    Ok(TrainRun { model, losses })
}

struct Batcher<'a> {
    data: &'a Dataset,
    method: &'a Method,
    seed: u64,
    pairing: Pairing,
    draws: Option<PairDraws>,
    buf: Vec<SoftPoint>,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a Dataset, method: &'a Method, cfg: &TrainConfig) -> Result<Self> {
        let draws = match (method, cfg.pairing) {
            (Method::Mixup(s), Pairing::Full) => {
                Some(PairDraws::mixup_unchecked(data, s, cfg.seed, PairMode::ResamplePerEpoch)?)
            }
            (Method::Mask(s), Pairing::Full) => Some(PairDraws::mask(data, s, cfg.seed, PairMode::ResamplePerEpoch)?),
            _ => None,
        };
        let mut b = Batcher { data, method, seed: cfg.seed, pairing: cfg.pairing, draws, buf: Vec::new() };
        if *method == Method::Erm {
            b.buf = (0..data.len()).map(|i| b.raw(i)).collect();
        }
        Ok(b)
    }

    fn raw(&self, i: usize) -> SoftPoint {
        let x = self.data.x(i);
        SoftPoint { x: [x[0], x[1]], y: self.data.label(i) }
    }

    fn points(&mut self, epoch: usize) -> &[SoftPoint] {
        match (self.method, self.pairing) {
            (Method::Erm, _) => {}
            (_, Pairing::Full) => {
                let draws = self.draws.as_mut().expect("full pairing keeps a draw table");
                draws.redraw(epoch as u64);
                let n = self.data.len();
                self.buf.clear();
                for i in 0..n {
                    for j in 0..n {
                        let (x, y) = draws.mixed_point(self.data, i, j);
                        self.buf.push(SoftPoint { x: [x[0], x[1]], y });
                    }
                }
            }
            (method, Pairing::Permuted) => {
                let n = self.data.len();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(epoch as u64);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                self.buf.clear();
                for (i, &j) in perm.iter().enumerate() {
                    let (xi, xj) = (self.data.x(i), self.data.x(j));
                    let (yi, yj) = (self.data.label(i), self.data.label(j));
                    let point = match method {
                        Method::Mixup(s) => {
                            let lambda = s.law.sample(&mut rng);
                            let g = s.g(lambda);
                            SoftPoint {
                                x: [g * xi[0] + (1.0 - g) * xj[0], g * xi[1] + (1.0 - g) * xj[1]],
                                y: lambda * yi + (1.0 - lambda) * yj,
                            }
                        }
                        Method::Mask(s) => {
                            let (bits, lambda) = s.sample(&mut rng, 2);
                            let pick = |k: usize| if bits >> k & 1 == 1 { xi[k] } else { xj[k] };
                            SoftPoint { x: [pick(0), pick(1)], y: lambda * yi + (1.0 - lambda) * yj }
                        }
                        Method::Erm => unreachable!(),
                    };
                    self.buf.push(if i == j { self.raw(i) } else { point });
                }
            }
        }
        &self.buf
    }
}

/// Fraction of points whose logit sign matches the label (a zero logit counts as wrong).
pub fn accuracy(model: &TwoLayerReLU, data: &Dataset) -> f64 {
    let hits = (0..data.len())
        .filter(|&i| {
            let x = data.x(i);
            let f = model.logit([x[0], x[1]]);
            (f > 0.0 && data.y(i) == 1) || (f < 0.0 && data.y(i) == 0)
        })
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for GridBounds {
    fn default() -> Self {
        GridBounds { x_min: -3.0, x_max: 3.0, y_min: -2.5, y_max: 2.5 }
    }
}

impl GridBounds {
    fn validate(&self) -> Result<()> {
        if self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(Error::Config("grid bounds must satisfy min < max".into()))
        }
    }

    fn cell_center(&self, i: usize, nx: usize, j: usize, ny: usize) -> [f64; 2] {
        [
            self.x_min + (i as f64 + 0.5) * (self.x_max - self.x_min) / nx as f64,
            self.y_min + (j as f64 + 0.5) * (self.y_max - self.y_min) / ny as f64,
        ]
    }
}

/// Signs of the logit at cell centers, row-major with rows running over `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionGrid {
    pub bounds: GridBounds,
    pub nx: usize,
    pub ny: usize,
    pub signs: Vec<i8>,
}

pub fn decision_grid(model: &TwoLayerReLU, bounds: GridBounds, nx: usize, ny: usize) -> Result<DecisionGrid> {
    bounds.validate()?;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    let rows: Vec<Vec<i8>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            (0..nx)
                .map(|i| {
                    let f = model.logit(bounds.cell_center(i, nx, j, ny));
                    if f > 0.0 {
                        1
                    } else if f < 0.0 {
                        -1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    Ok(DecisionGrid { bounds, nx, ny, signs: rows.concat() })
}

impl DecisionGrid {
    pub fn sign(&self, i: usize, j: usize) -> i8 {
        self.signs[j * self.nx + i]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "y", "sign"])?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let [x, y] = self.bounds.cell_center(i, self.nx, j, self.ny);
                out.write_record([x.to_string(), y.to_string(), self.sign(i, j).to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Sign changes along each vertical scanline.
    pub fn crossings_per_column(&self) -> Vec<usize> {
        (0..self.nx)
            .map(|i| (1..self.ny).filter(|&j| self.sign(i, j) != self.sign(i, j - 1)).count())
            .collect()
    }
}

/// Points of the zero-level set: on each of `columns` vertical lines, every sign
/// change found on a `rows`-point scan is refined by bisection.
pub fn zero_level_curve(model: &TwoLayerReLU, bounds: GridBounds, columns: usize, rows: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    if columns == 0 || rows < 2 {
        return out;
    }
    for i in 0..columns {
        let x = bounds.x_min + (i as f64 + 0.5) * (bounds.x_max - bounds.x_min) / columns as f64;
        let y_at = |j: usize| bounds.y_min + j as f64 * (bounds.y_max - bounds.y_min) / (rows - 1) as f64;
        let mut prev = model.logit([x, y_at(0)]);
        for j in 1..rows {
            let cur = model.logit([x, y_at(j)]);
            if (prev > 0.0) != (cur > 0.0) {
                let (mut lo, mut hi) = (y_at(j - 1), y_at(j));
                let lo_positive = prev > 0.0;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if (model.logit([x, mid]) > 0.0) == lo_positive {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                out.push([x, 0.5 * (lo + hi)]);
            }
            prev = cur;
        }
    }
    out
}

/// Mean absolute deviation of `points` from their least-squares line `y = a + b x`.
/// `None` with fewer than two distinct `x` values.
pub fn nonlinearity_score(points: &[[f64; 2]]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p[0] - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    Some(points.iter().map(|p| (p[1] - a - b * p[0]).abs()).sum::<f64>() / n)
}

/// Summary statistics of one trained model's boundary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryStats {
    pub method: String,
    pub accuracy: f64,
    pub final_loss: f64,
    pub nonlinearity: Option<f64>,
    pub mean_crossings: f64,
}

pub fn boundary_stats(method: &str, run: &TrainRun, data: &Dataset, grid: &GridConfig) -> Result<BoundaryStats> {
    let g = decision_grid(&run.model, grid.bounds, grid.nx, grid.ny)?;
    let crossings = g.crossings_per_column();
    let curve = zero_level_curve(&run.model, grid.bounds, grid.nx, grid.ny);
    Ok(BoundaryStats {
        method: method.into(),
        accuracy: accuracy(&run.model, data),
        final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
        nonlinearity: nonlinearity_score(&curve),
        mean_crossings: crossings.iter().sum::<usize>() as f64 / crossings.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub bounds: GridBounds,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { bounds: GridBounds::default(), nx: 200, ny: 200 }
    }
}

/// One method to train: `erm`, `mixup` or `mask`, with an optional scheme
/// (Beta(1, 1) and Bernoulli(1) masks by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default)]
    pub scheme: Option<SchemeConfig>,
}

impl MethodConfig {
    pub fn build(&self) -> Result<Method> {
        match (self.name.as_str(), &self.scheme) {
            ("erm", None) => Ok(Method::Erm),
            ("erm", Some(_)) => Err(Error::Config("erm takes no scheme".into())),
            ("mixup", s) => Ok(Method::Mixup(match s {
                Some(s) => s.mixup()?,
                None => MixupScheme::beta(1.0)?,
            })),
            ("mask", s) => Ok(Method::Mask(match s {
                Some(s) => s.mask()?,
                None => MaskScheme::bernoulli(1.0)?,
            })),
            (other, _) => Err(Error::Config(format!("unknown method {other:?}; expected erm, mixup or mask"))),
        }
    }
}

/// Everything the `mlp2d` command needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mlp2dConfig {
    pub data: SineDataConfig,
    pub train: TrainConfig,
    pub methods: Vec<MethodConfig>,
    pub grid: GridConfig,
}

impl Default for Mlp2dConfig {
    fn default() -> Self {
        Mlp2dConfig {
            data: SineDataConfig::default(),
            train: TrainConfig::default(),
            methods: ["erm", "mixup", "mask"]
                .iter()
                .map(|n| MethodConfig { name: (*n).into(), scheme: None })
                .collect(),
            grid: GridConfig::default(),
        }
    }
}

/// Trains every configured method on one dataset and writes, per method,
/// `<method>_grid.csv` and `<method>_model.json`, plus `data.csv` and `summary.json`.
pub fn run_mlp2d(cfg: &Mlp2dConfig, out: &Path) -> Result<Vec<BoundaryStats>> {
    let methods = cfg.methods.iter().map(MethodConfig::build).collect::<Result<Vec<_>>>()?;
    let data = gen_sine_data(&cfg.data)?;
    std::fs::create_dir_all(out)?;
    data.write_csv(std::fs::File::create(out.join("data.csv"))?)?;
    let mut stats = Vec::new();
    for m in &methods {
        let run = train_mlp(&data, m, &cfg.train)?;
        let grid = decision_grid(&run.model, cfg.grid.bounds, cfg.grid.nx, cfg.grid.ny)?;
        grid.write_csv(std::fs::File::create(out.join(format!("{}_grid.csv", m.name())))?)?;
        run.model.write_json(std::fs::File::create(out.join(format!("{}_model.json", m.name())))?)?;
        stats.push(boundary_stats(m.name(), &run, &data, &cfg.grid)?);
    }
    serde_json::to_writer_pretty(std::fs::File::create(out.join("summary.json"))?, &stats)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::scheme::{LambdaLaw, MixMap};

    fn small_cfg(epochs: usize, pairing: Pairing) -> TrainConfig {
        TrainConfig { epochs, hidden: 16, pairing, ..TrainConfig::default() }
    }

    fn tiny_data(seed: u64) -> Dataset {
        gen_sine_data(&SineDataConfig { n: 6, ..SineDataConfig::large_noise().with_seed(seed) }).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_data(0);
        let cfg = small_cfg(0, Pairing::Full);
        let run = train_mlp(&data, &Method::Erm, &cfg).unwrap();
        assert_eq!(run.model, TwoLayerReLU::new(16, cfg.init_seed).unwrap());
        assert!(run.losses.is_empty());
    }

    #[test]
    fn backprop_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = TwoLayerReLU::new(5, 11).unwrap();
        let points: Vec<SoftPoint> = (0..8)
            .map(|_| SoftPoint {
                x: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                y: rng.random_range(0.0..1.0),
            })
            .collect();
        // Keep every preactivation away from the kink so differences stay on one linear piece.
        for p in &points {
            for k in 0..5 {
                let a = model.w1[k][0] * p.x[0] + model.w1[k][1] * p.x[1] + model.b1[k];
                assert!(a.abs() > 1e-3, "jitter the inputs");
            }
        }
        let (_, grad) = loss_and_grad(&model, &points);
        let theta = model.to_flat();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut m = model.clone();
            let mut t = theta.clone();
            t[k] += h;
            m.set_flat(&t);
            let up = loss_and_grad(&m, &points).0;
            t[k] -= 2.0 * h;
            m.set_flat(&t);
            let down = loss_and_grad(&m, &points).0;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[k]).abs() / grad[k].abs().max(1e-3);
            assert!(err <= 1e-5, "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn rescaling_layers_preserves_logits() {
        let model = TwoLayerReLU::new(50, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &c in &[0.25, 3.0, 17.0] {
            let mut scaled = model.clone();
            scaled.w1.iter_mut().for_each(|r| *r = [r[0] * c, r[1] * c]);
            scaled.b1.iter_mut().for_each(|b| *b *= c);
            scaled.w2.iter_mut().for_each(|w| *w /= c);
            for _ in 0..50 {
                let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let (a, b) = (model.logit(x), scaled.logit(x));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn point_mass_one_mixup_reproduces_erm_exactly() {
        let data = tiny_data(4);
        let one = MixupScheme::unchecked(LambdaLaw::PointMass { value: 1.0 }, MixMap::Identity).unwrap();
        let cfg = small_cfg(40, Pairing::Permuted);
        let erm = train_unchecked(&data, &Method::Erm, &cfg).unwrap();
        let mix = train_unchecked(&data, &Method::Mixup(one.clone()), &cfg).unwrap();
        assert_eq!(erm.model, mix.model);
        assert_eq!(erm.losses, mix.losses);
        // The full grid repeats each point n times, so sums round differently.
        let full = train_unchecked(&data, &Method::Mixup(one), &small_cfg(40, Pairing::Full)).unwrap();
        let (a, b) = (erm.model.to_flat(), full.model.to_flat());
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10, "{gap}");
    }

    #[test]
    fn training_is_reproducible() {
        let data = tiny_data(5);
        let cfg = small_cfg(20, Pairing::Full);
        let m = Method::Mask(MaskScheme::bernoulli(1.0).unwrap());
        let a = train_mlp(&data, &m, &cfg).unwrap();
        let b = train_mlp(&data, &m, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let c = train_mlp(&data, &m, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn training_lowers_the_loss() {
        let data = tiny_data(6);
        let run = train_mlp(&data, &Method::Erm, &small_cfg(300, Pairing::Full)).unwrap();
        assert!(run.losses.last().unwrap() < &run.losses[0]);
    }

    #[test]
    fn non_finite_loss_aborts_with_epoch() {
        let data = Dataset::from_rows(2, vec![f64::INFINITY, f64::INFINITY, 1.0, 1.0], vec![0, 1], 0).unwrap();
        match train_mlp(&data, &Method::Erm, &small_cfg(5, Pairing::Full)) {
            Err(Error::NonFinite { epoch }) => assert_eq!(epoch, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_schemes_are_rejected() {
        let data = tiny_data(0);
        let half = MixupScheme::unchecked(LambdaLaw::PointMass { value: 0.5 }, MixMap::Identity).unwrap();
        assert!(train_mlp(&data, &Method::Mixup(half), &small_cfg(1, Pairing::Full)).is_err());
        let wide = Dataset::from_rows(3, vec![0.0; 6], vec![0, 1], 0).unwrap();
        assert!(matches!(train_mlp(&wide, &Method::Erm, &small_cfg(1, Pairing::Full)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn degenerate_sine_configs() {
        let flat = SineDataConfig { noise_sd: 0.0, amplitude: 0.0, n: 50, ..SineDataConfig::default() };
        let d = gen_sine_data(&flat).unwrap();
        for i in 0..d.len() {
            let expect = if d.y(i) == 1 { 1.0 } else { -1.0 };
            assert_eq!(d.x(i)[1], expect);
        }
        let clean = SineDataConfig { noise_sd: 0.0, n: 50, ..SineDataConfig::default() };
        let d = gen_sine_data(&clean).unwrap();
        for i in (0..d.len()).filter(|&i| d.y(i) == 1) {
            assert_eq!(d.x(i)[1], clean.curve(1, d.x(i)[0]));
        }
        assert_eq!(d.labels().iter().filter(|&&y| y == 1).count(), 50);
        assert!(gen_sine_data(&SineDataConfig { noise_sd: -1.0, ..SineDataConfig::default() }).is_err());
        assert!(gen_sine_data(&SineDataConfig { class_offset: 0.0, ..SineDataConfig::default() }).is_err());
    }

    #[test]
    fn residual_moments_match_class_offsets() {
        let cfg = SineDataConfig { n: 50_000, ..SineDataConfig::default() };
        let d = gen_sine_data(&cfg).unwrap();
        for c in 0..2u8 {
            let r: Vec<f64> = (0..d.len())
                .filter(|&i| d.y(i) == c)
                .map(|i| d.x(i)[1] - cfg.amplitude * (cfg.frequency * d.x(i)[0]).sin())
                .collect();
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let target = (2.0 * f64::from(c) - 1.0) * cfg.class_offset / 2.0;
            let se = cfg.noise_sd / n.sqrt();
            assert!((mean - target).abs() <= 4.0 * se, "class {c}: {mean}");
        }
    }

    #[test]
    fn grid_examples() {
        let mut m = TwoLayerReLU::new(4, 0).unwrap();
        m.w2.iter_mut().for_each(|w| *w = 0.0);
        m.b2 = 0.3;
        let g = decision_grid(&m, GridBounds::default(), 7, 5).unwrap();
        assert!(g.signs.iter().all(|&s| s == 1));
        let m = TwoLayerReLU::new(30, 1).unwrap();
        let b = GridBounds { x_min: -1.0, x_max: 3.0, y_min: 0.0, y_max: 2.0 };
        let g = decision_grid(&m, b, 1, 1).unwrap();
        assert_eq!(g.signs.len(), 1);
        assert_eq!(f64::from(g.signs[0]), m.logit([1.0, 1.0]).signum());
        assert!(decision_grid(&m, b, 0, 1).is_err());
    }

    #[test]
    fn grid_csv_layout() {
        let m = TwoLayerReLU::new(3, 0).unwrap();
        let g = decision_grid(&m, GridBounds::default(), 3, 2).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,sign");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("-2,-1.25,"));
    }

    #[test]
    fn nonlinearity_of_lines_and_sines() {
        let line: Vec<[f64; 2]> = (0..50).map(|i| [i as f64, 2.0 - 0.5 * i as f64]).collect();
        assert!(nonlinearity_score(&line).unwrap() < 1e-12);
        let k = 100_000;
        let sine: Vec<[f64; 2]> = (0..k)
            .map(|i| {
                let x = -3.0 + 6.0 * (i as f64 + 0.5) / k as f64;
                [x, 0.5 * (std::f64::consts::PI * x).sin()]
            })
            .collect();
        // Over whole periods the fit is y = 0 plus a small tilt; the deviation is near 1/pi.
        let s = nonlinearity_score(&sine).unwrap();
        assert!((s - 1.0 / std::f64::consts::PI).abs() < 0.02, "{s}");
        assert!(nonlinearity_score(&[[1.0, 2.0]]).is_none());
        assert!(nonlinearity_score(&[[1.0, 2.0], [1.0, 3.0]]).is_none());
    }

    #[test]
    fn zero_level_of_a_linear_model() {
        // Single unit active everywhere on the box: logit = x2 - 0.5 x1 + 10 - 10.
        let m = TwoLayerReLU { w1: vec![[-0.5, 1.0]], b1: vec![10.0], w2: vec![1.0], b2: -10.0 };
        let curve = zero_level_curve(&m, GridBounds::default(), 20, 50);
        assert_eq!(curve.len(), 20);
        for p in &curve {
            assert!((p[1] - 0.5 * p[0]).abs() < 1e-12);
        }
        let g = decision_grid(&m, GridBounds::default(), 20, 50).unwrap();
        assert!(g.crossings_per_column().iter().all(|&c| c == 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = TwoLayerReLU::new(7, 3).unwrap();
        let mut buf = Vec::new();
        m.write_json(&mut buf).unwrap();
        assert_eq!(TwoLayerReLU::read_json(buf.as_slice()).unwrap(), m);
        assert!(TwoLayerReLU::read_json(&br#"{"w1":[],"b1":[],"w2":[],"b2":0}"#[..]).is_err());
    }

    #[test]
    fn method_configs() {
        let m = MethodConfig { name: "mixup".into(), scheme: None }.build().unwrap();
        assert_eq!(m, Method::Mixup(MixupScheme::beta(1.0).unwrap()));
        assert!(MethodConfig { name: "svm".into(), scheme: None }.build().is_err());
        let cfg: Mlp2dConfig = serde_json::from_str(r#"{"train": {"pairing": "permuted", "epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.pairing, Pairing::Permuted);
        assert_eq!(cfg.train.hidden, DEFAULT_HIDDEN);
        assert_eq!(cfg.methods.len(), 3);
    }
}
