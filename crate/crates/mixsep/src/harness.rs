//! Seeded experiment sweeps over method, `kappa` and sample size, aggregation
//! to CSV, and sample-complexity search.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expected::ExpectedMask;
use crate::losses::scheme::{MaskScheme, MixupScheme};
use crate::losses::{EmpiricalLoss, PairDraws, PairMode};
use crate::maxmargin::{is_separable, solve_max_margin, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::minimize::{
    adam_minimize, gd_minimize, newton_minimize, AdamOptions, GdOptions, MinimizeResult, NewtonOptions, Status,
};
use crate::model::{
    bayes_direction, cosine_similarity, default_spec_d10, default_spec_d20, sample_dataset, toy_spec_d2, Dataset,
    Kappa, ProblemSpec,
};
use crate::quadrature::Quadrature;

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "MIXSEP_WORKERS";

/// Where the problem comes from: `"d10"`, `"d20"`, `"toy_d2"`, or `{"path": "spec.json"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Builtin(String),
    File { path: PathBuf },
}

impl Default for SpecSource {
    fn default() -> Self {
        SpecSource::Builtin("d10".into())
    }
}

impl SpecSource {
    /// The problem at the given `kappa` (a file's own `kappa` is replaced).
    pub fn load(&self, kappa: Kappa) -> Result<ProblemSpec> {
        match self {
            SpecSource::Builtin(name) => match name.as_str() {
                "d10" => Ok(default_spec_d10(kappa)),
                "d20" => Ok(default_spec_d20(kappa)),
                "toy_d2" => Ok(toy_spec_d2(kappa)),
                other => Err(Error::Config(format!("unknown built-in problem {other:?}; expected d10, d20 or toy_d2"))),
            },
            SpecSource::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let spec: ProblemSpec = serde_json::from_str(&text)?;
                spec.with_kappa(kappa)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Erm,
    Mixup,
    Mask,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Erm => "erm",
            MethodName::Mixup => "mixup",
            MethodName::Mask => "mask",
        }
    }
}

/// How each trial's weight is obtained. All runs start from `w = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "optimizer", rename_all = "snake_case")]
pub enum TrainSpec {
    Gd { lr: f64, epochs: usize },
    Adam { lr: f64, epochs: usize },
    /// Newton to the empirical minimizer. ERM on separable data has none; the
    /// max-margin direction (the limit direction of gradient descent) is used instead.
    Newton {
        #[serde(default = "default_newton_iters")]
        max_iters: usize,
    },
}

fn default_newton_iters() -> usize {
    100
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec::Gd { lr: 1.0, epochs: 1500 }
    }
}

/// Direction that `final_sim` is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// `Sigma^{-1} mu` for every method.
    #[default]
    Bayes,
    /// `Sigma^{-1} mu`, except that mask trials use the minimizer of the
    /// expected mask loss at the same `kappa` and `n`.
    MaskMinimizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub spec: SpecSource,
    pub methods: Vec<MethodName>,
    pub kappas: Vec<f64>,
    pub ns: Vec<usize>,
    pub repetitions: usize,
    pub train: TrainSpec,
    /// Beta(alpha, alpha) for Mixup, Bernoulli masks with Beta(alpha, alpha) rates for masking.
    pub alpha: f64,
    pub pair_mode: PairMode,
    pub reference: Reference,
    pub epsilon: f64,
    pub delta: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Bisection stops once the bracket is within this fraction of its upper end.
    pub rel_precision: f64,
    pub base_seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            spec: SpecSource::default(),
            methods: vec![MethodName::Erm, MethodName::Mixup, MethodName::Mask],
            kappas: vec![0.5, 2.0],
            ns: vec![500],
            repetitions: 50,
            train: TrainSpec::default(),
            alpha: 1.0,
            pair_mode: PairMode::ResamplePerEpoch,
            reference: Reference::Bayes,
            epsilon: 0.1,
            delta: 0.1,
            n_min: 2,
            n_max: 100_000,
            rel_precision: 0.05,
            base_seed: 0,
            out: None,
        }
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.methods.is_empty() || self.kappas.is_empty() || self.ns.is_empty() {
            return bad("methods, kappas and ns must be nonempty".into());
        }
        for &k in &self.kappas {
            Kappa::new(k).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.ns.contains(&0) {
            return bad("sample sizes must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 2.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("need 0 < epsilon < 2 and 0 < delta < 1".into());
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad("need 1 <= n_min <= n_max".into());
        }
        if !(self.rel_precision >= 0.0) {
            return bad("rel_precision must be nonnegative".into());
        }
        match self.train {
            TrainSpec::Gd { lr, .. } | TrainSpec::Adam { lr, .. } if !(lr > 0.0 && lr.is_finite()) => {
                bad(format!("learning rate must be positive, got {lr}"))
            }
            TrainSpec::Newton { max_iters: 0 } => bad("max_iters must be positive".into()),
            _ => Ok(()),
        }
    }

    fn mixup_scheme(&self) -> Result<MixupScheme> {
        MixupScheme::beta(self.alpha)
    }

    fn mask_scheme(&self) -> Result<MaskScheme> {
        MaskScheme::bernoulli(self.alpha)
    }
}

/// Seed of one trial: the first 8 bytes of SHA-256 over `(base_seed, method, kappa, n, rep)`.
pub fn trial_seed(base_seed: u64, method: MethodName, kappa: f64, n: usize, rep: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(method.as_str().as_bytes());
    h.update(kappa.to_bits().to_le_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((rep as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seed of the pair draws, kept apart from the data seed.
fn pair_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    /// Newton met its gradient tolerance.
    Converged,
    /// A first-order run used its full epoch budget.
    Completed,
    /// The iterates grow without bound (ERM on separable data, or numerical blow-up);
    /// `final_sim` is the direction of the last finite iterate when there is one.
    Diverged,
    /// The trial raised an error; there is no direction.
    Failed,
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Converged => "converged",
            TrialStatus::Completed => "completed",
            TrialStatus::Diverged => "diverged",
            TrialStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub method: MethodName,
    pub kappa: f64,
    pub n: usize,
    pub seed: u64,
    pub final_sim: Option<f64>,
    pub status: TrialStatus,
    pub separable: Option<bool>,
    pub epochs_run: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything shared by the trials of one (method, kappa, n) cell.
#[derive(Clone, Debug)]
pub struct TrialConfig {
    pub method: MethodName,
    pub kappa: f64,
    pub n: usize,
    pub spec: ProblemSpec,
    pub reference: DVector<f64>,
    pub train: TrainSpec,
    pub mixup: MixupScheme,
    pub mask: MaskScheme,
    pub pair_mode: PairMode,
}

impl TrialConfig {
    pub fn new(cfg: &SweepConfig, method: MethodName, kappa: f64, n: usize) -> Result<Self> {
        let spec = cfg.spec.load(Kappa::new(kappa)?)?;
        let mask = cfg.mask_scheme()?;
        let reference = match (method, cfg.reference) {
            (MethodName::Mask, Reference::MaskMinimizer) => mask_minimizer(&spec, &mask, n)?,
            _ => bayes_direction(&spec)?,
        };
        Ok(TrialConfig {
            method,
            kappa,
            n,
            spec,
            reference,
            train: cfg.train.clone(),
            mixup: cfg.mixup_scheme()?,
            mask,
            pair_mode: cfg.pair_mode,
        })
    }
}

/// Minimizer of the expected mask loss for sample size `n`.
pub fn mask_minimizer(spec: &ProblemSpec, scheme: &MaskScheme, n: usize) -> Result<DVector<f64>> {
    let obj = ExpectedMask::new(spec, scheme, n.max(2), &Quadrature::default())?;
    let r = newton_minimize(&obj, &DVector::zeros(spec.dim()), &NewtonOptions { max_iters: 200, ..Default::default() });
    if r.status != Status::Converged {
        return Err(Error::NotConverged(format!("expected mask minimizer: {:?}", r.status)));
    }
    Ok(r.w_star)
}

/// One seeded trial: fresh data, training from zero, similarity to the reference.
/// Errors are recorded in the result rather than returned.
pub fn run_trial(cell: &TrialConfig, seed: u64) -> TrialResult {
    let mut out = TrialResult {
        method: cell.method,
        kappa: cell.kappa,
        n: cell.n,
        seed,
        final_sim: None,
        status: TrialStatus::Failed,
        separable: None,
        epochs_run: 0,
        error: None,
    };
    if let Err(e) = trial_body(cell, seed, &mut out) {
        out.status = TrialStatus::Failed;
        out.final_sim = None;
        out.error = Some(e.to_string());
    }
    out
}

fn trial_body(cell: &TrialConfig, seed: u64, out: &mut TrialResult) -> Result<()> {
    let data = sample_dataset(&cell.spec, cell.n, seed)?;
    let separable = is_separable(&data);
    out.separable = Some(separable);
    let d = data.dim();
    let w0 = DVector::zeros(d);
    let pairs = |mode| -> Result<PairDraws> {
        match cell.method {
            MethodName::Mixup => PairDraws::mixup(&data, &cell.mixup, pair_seed(seed), mode),
            _ => PairDraws::mask(&data, &cell.mask, pair_seed(seed), mode),
        }
    };
    let build = |mode| -> Result<EmpiricalLoss<'_>> {
        match cell.method {
            MethodName::Erm => Ok(EmpiricalLoss::erm(&data)),
            MethodName::Mixup => EmpiricalLoss::mixup(&data, pairs(mode)?),
            MethodName::Mask => EmpiricalLoss::mask(&data, pairs(mode)?),
        }
    };
    let (w, status, epochs) = match &cell.train {
        TrainSpec::Gd { lr, epochs } => {
            let mut obj = build(cell.pair_mode)?;
            let r = gd_minimize(&mut obj, &w0, &GdOptions { lr: *lr, epochs: *epochs, ..Default::default() });
            first_order_outcome(r, cell.method, separable)
        }
        TrainSpec::Adam { lr, epochs } => {
            let mut obj = build(cell.pair_mode)?;
            let r = adam_minimize(&mut obj, &w0, &AdamOptions { lr: *lr, epochs: *epochs, ..Default::default() });
            first_order_outcome(r, cell.method, separable)
        }
        TrainSpec::Newton { max_iters } => {
            if cell.method == MethodName::Erm && separable {
                let sol = solve_max_margin(&data, DEFAULT_TOL, DEFAULT_MAX_ITERS);
                (sol.w_bar, TrialStatus::Diverged, sol.iterations)
            } else {
                let obj = build(PairMode::FixedPerPair)?;
                let opts = NewtonOptions { max_iters: *max_iters, ..Default::default() };
                let r = newton_minimize(&obj, &w0, &opts);
                let status = match r.status {
                    Status::Converged => TrialStatus::Converged,
                    Status::MaxIters => TrialStatus::Completed,
                    Status::Diverged => TrialStatus::Diverged,
                };
                (r.w_star, status, r.iterations)
            }
        }
    };
    out.status = status;
    out.epochs_run = epochs;
    out.final_sim = direction_sim(&w, &cell.reference);
    Ok(())
}

fn first_order_outcome(r: MinimizeResult, method: MethodName, separable: bool) -> (DVector<f64>, TrialStatus, usize) {
    let status = match r.status {
        Status::Diverged => TrialStatus::Diverged,
        _ if method == MethodName::Erm && separable => TrialStatus::Diverged,
        _ => TrialStatus::Completed,
    };
    (r.w_star, status, r.iterations)
}

fn direction_sim(w: &DVector<f64>, reference: &DVector<f64>) -> Option<f64> {
    if w.iter().all(|v| v.is_finite()) {
        cosine_similarity(w, reference).ok()
    } else {
        None
    }
}

/// Runs `f` on a pool sized by [`WORKERS_ENV`], or rayon's default when unset.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let k: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// Mean, spread and normal-approximation 95% interval of one cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: MethodName,
    pub kappa: f64,
    pub n: usize,
    pub trials: usize,
    /// Trials with a direction.
    pub valid: usize,
    pub mean_sim: Option<f64>,
    pub sd: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub separable_rate: Option<f64>,
}

pub fn summarize(rows: &[TrialResult]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(MethodName, u64, usize), Vec<&TrialResult>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.method, r.kappa.to_bits(), r.n);
        if !cells.contains_key(&key) {
            order.push(key);
        }
        cells.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &cells[&key];
            let sims: Vec<f64> = group.iter().filter_map(|r| r.final_sim).collect();
            let m = sims.len();
            let mean = (m > 0).then(|| sims.iter().sum::<f64>() / m as f64);
            let sd = mean.filter(|_| m > 1).map(|mu| {
                (sims.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
            });
            let half = sd.map(|s| 1.96 * s / (m as f64).sqrt());
            let seps: Vec<bool> = group.iter().filter_map(|r| r.separable).collect();
            CellSummary {
                method: key.0,
                kappa: f64::from_bits(key.1),
                n: key.2,
                trials: group.len(),
                valid: m,
                mean_sim: mean,
                sd,
                ci_low: mean.zip(half).map(|(a, h)| a - h),
                ci_high: mean.zip(half).map(|(a, h)| a + h),
                separable_rate: (!seps.is_empty())
                    .then(|| seps.iter().filter(|&&s| s).count() as f64 / seps.len() as f64),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// `method,kappa,n,seed,final_sim,status,separable`, one row per trial.
pub fn raw_csv(rows: &[TrialResult]) -> String {
    let mut s = String::from("method,kappa,n,seed,final_sim,status,separable\n");
    for r in rows {
        let sep = r.separable.map(|b| b.to_string()).unwrap_or_default();
        writeln!(s, "{},{:?},{},{},{},{},{}", r.method.as_str(), r.kappa, r.n, r.seed, opt(r.final_sim), r.status.as_str(), sep)
            .expect("writing to a string");
    }
    s
}

/// One row per cell; empty fields where a statistic is undefined.
pub fn agg_csv(cells: &[CellSummary]) -> String {
    let mut s = String::from("method,kappa,n,trials,valid,mean_sim,sd,ci_low,ci_high,separable_rate\n");
    for c in cells {
        writeln!(
            s,
            "{},{:?},{},{},{},{},{},{},{},{}",
            c.method.as_str(),
            c.kappa,
            c.n,
            c.trials,
            c.valid,
            opt(c.mean_sim),
            opt(c.sd),
            opt(c.ci_low),
            opt(c.ci_high),
            opt(c.separable_rate)
        )
        .expect("writing to a string");
    }
    s
}

/// Trial results in factorial order (method, kappa, n, repetition) and their summaries.
#[derive(Clone, Debug)]
pub struct SweepTable {
    pub rows: Vec<TrialResult>,
    pub cells: Vec<CellSummary>,
}

/// Full factorial sweep. Trials run in parallel; output order does not depend on scheduling.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &m in &cfg.methods {
        for &k in &cfg.kappas {
            for &n in &cfg.ns {
                cells.push(TrialConfig::new(cfg, m, k, n)?);
            }
        }
    }
    let jobs: Vec<(&TrialConfig, usize)> =
        cells.iter().flat_map(|c| (0..cfg.repetitions).map(move |r| (c, r))).collect();
    let rows = with_workers(|| {
        jobs.par_iter()
            .map(|(c, r)| run_trial(c, trial_seed(cfg.base_seed, c.method, c.kappa, c.n, *r)))
            .collect::<Vec<_>>()
    })?;
    let cells = summarize(&rows);
    Ok(SweepTable { rows, cells })
}

/// Hex SHA-256 over the config echo and every output file's bytes.
pub fn run_hash(config_json: &str, files: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    for f in files {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `raw.csv`, `agg.csv` and `meta.json` into `dir`.
pub fn write_sweep(dir: &Path, cfg: &SweepConfig, table: &SweepTable) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let raw = raw_csv(&table.rows);
    let agg = agg_csv(&table.cells);
    let config = serde_json::to_string(cfg)?;
    let meta = serde_json::json!({
        "config": cfg,
        "run_hash": run_hash(&config, &[&raw, &agg]),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(dir.join("raw.csv"), raw)?;
    std::fs::write(dir.join("agg.csv"), agg)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Wilson score interval for `successes` out of `trials` at 95% confidence.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let m = trials as f64;
    let p = successes as f64 / m;
    let denom = 1.0 + z * z / m;
    let center = (p + z * z / (2.0 * m)) / denom;
    let half = z * (p * (1.0 - p) / m + z * z / (4.0 * m * m)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// The trials run at one sample size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub n: usize,
    pub trials: usize,
    pub successes: usize,
    pub wilson_low: f64,
    pub wilson_high: f64,
    pub passed: bool,
    /// False when the interval still straddled the target after the last batch.
    pub decided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityResult {
    pub method: MethodName,
    pub kappa: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Smallest passing `n` found; `None` when censored.
    pub n_star: Option<usize>,
    pub censored: bool,
    pub total_trials: usize,
    pub probes: Vec<Probe>,
}

/// Batches of `repetitions` trials per sample size, up to this many batches.
const MAX_BATCHES: usize = 4;

fn probe(cfg: &SweepConfig, method: MethodName, kappa: f64, n: usize) -> Result<Probe> {
    let cell = TrialConfig::new(cfg, method, kappa, n)?;
    let target = 1.0 - cfg.delta;
    let threshold = 1.0 - cfg.epsilon;
    let (mut trials, mut successes) = (0, 0);
    for batch in 0..MAX_BATCHES {
        let reps: Vec<usize> = (batch * cfg.repetitions..(batch + 1) * cfg.repetitions).collect();
        let hits = with_workers(|| {
            reps.par_iter()
                .filter(|&&r| {
                    let res = run_trial(&cell, trial_seed(cfg.base_seed, method, kappa, n, r));
                    res.final_sim.is_some_and(|s| s >= threshold)
                })
                .count()
        })?;
        trials += reps.len();
        successes += hits;
        let (lo, hi) = wilson_interval(successes, trials);
        if lo >= target || hi < target {
            return Ok(Probe { n, trials, successes, wilson_low: lo, wilson_high: hi, passed: lo >= target, decided: true });
        }
    }
    let (lo, hi) = wilson_interval(successes, trials);
    let passed = successes as f64 / trials as f64 >= target;
    Ok(Probe { n, trials, successes, wilson_low: lo, wilson_high: hi, passed, decided: false })
}

/// Smallest `n` at which `final_sim >= 1 - epsilon` holds with frequency at least
/// `1 - delta`: doubling from `n_min` until a pass, then bisection between the
/// last failing and first passing sizes. A size counts as passing once the
/// Wilson interval lies above `1 - delta` and failing once it lies below; an
/// interval still straddling the line after the last batch falls back to the
/// point estimate. Reaching `n_max` without a pass gives a censored result.
pub fn estimate_sample_complexity(
    method: MethodName,
    kappa: f64,
    epsilon: f64,
    delta: f64,
    config: &SweepConfig,
) -> Result<ComplexityResult> {
    let cfg = SweepConfig { epsilon, delta, ..config.clone() };
    cfg.validate()?;
    let mut probes = Vec::new();
    let run = |n: usize, probes: &mut Vec<Probe>| -> Result<bool> {
        let p = probe(&cfg, method, kappa, n)?;
        let passed = p.passed;
        probes.push(p);
        Ok(passed)
    };
    let mut fail = None;
    let mut n = cfg.n_min;
    let pass = loop {
        if run(n, &mut probes)? {
            break Some(n);
        }
        fail = Some(n);
        if n >= cfg.n_max {
            break None;
        }
        n = (2 * n).min(cfg.n_max);
    };
    let n_star = match (pass, fail) {
        (Some(mut hi), Some(mut lo)) => {
            while hi - lo > 1 && (hi - lo) as f64 > cfg.rel_precision * hi as f64 {
                let mid = lo + (hi - lo) / 2;
                if run(mid, &mut probes)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Some(hi)
        }
        (pass, _) => pass,
    };
    Ok(ComplexityResult {
        method,
        kappa,
        epsilon,
        delta,
        n_star,
        censored: n_star.is_none(),
        total_trials: probes.iter().map(|p| p.trials).sum(),
        probes,
    })
}

/// `method,kappa,epsilon,delta,n_star,censored,total_trials`.
pub fn complexity_csv(results: &[ComplexityResult]) -> String {
    let mut s = String::from("method,kappa,epsilon,delta,n_star,censored,total_trials\n");
    for r in results {
        let n = r.n_star.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{:?},{:?},{:?},{},{},{}", r.method.as_str(), r.kappa, r.epsilon, r.delta, n, r.censored, r.total_trials)
            .expect("writing to a string");
    }
    s
}

/// Runs the complexity search for every configured method and `kappa` and writes
/// `complexity.csv`, `probes.json` and `meta.json` into `dir`.
pub fn run_complexity(cfg: &SweepConfig, dir: &Path) -> Result<Vec<ComplexityResult>> {
    cfg.validate()?;
    let mut results = Vec::new();
    for &m in &cfg.methods {
        for &k in &cfg.kappas {
            results.push(estimate_sample_complexity(m, k, cfg.epsilon, cfg.delta, cfg)?);
        }
    }
    std::fs::create_dir_all(dir)?;
    let csv = complexity_csv(&results);
    let probes = serde_json::to_string_pretty(&results)?;
    let config = serde_json::to_string(cfg)?;
    let meta = serde_json::json!({
        "config": cfg,
        "run_hash": run_hash(&config, &[&csv, &probes]),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(dir.join("complexity.csv"), csv)?;
    std::fs::write(dir.join("probes.json"), probes)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(results)
}

/// Reads a dataset CSV written by [`Dataset::write_csv`].
pub fn read_dataset(path: &Path, seed: u64) -> Result<Dataset> {
    Dataset::read_csv(std::fs::File::open(path)?, seed)
}
