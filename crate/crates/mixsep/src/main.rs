use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use mixsep::error::{Error, Result};
use mixsep::expected::{ExpectedErm, ExpectedMask, ExpectedMixup};
use mixsep::harness::{self, MethodName, SpecSource, SweepConfig, TrainSpec};
use mixsep::losses::scheme::{MaskScheme, MixupScheme, SchemeConfig};
use mixsep::losses::{EmpiricalLoss, PairDraws, PairMode};
use mixsep::minimize::{
    adam_minimize, gd_minimize, newton_minimize, AdamOptions, GdOptions, MinimizeResult, NewtonOptions, SecondOrder,
};
use mixsep::mlp2d::{run_mlp2d, Mlp2dConfig};
use mixsep::model::{bayes_direction, cosine_similarity, sample_dataset, Kappa};
use mixsep::quadrature::Quadrature;
use mixsep::verify::{run_suite, SUITES};

/// Expected and empirical losses of ERM, Mixup and masked Mixup for
/// logistic regression on two-Gaussian data.
#[derive(Parser, Debug)]
#[command(name = "mixsep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a labeled sample from the two-Gaussian family and write `data.csv`.
    Sample(Common),
    /// Minimize one loss (expected or empirical, ERM/Mixup/mask) and report its
    /// direction against the Bayes direction Sigma^{-1} mu. Writes `result.json`
    /// and `trace.csv`.
    Minimize(Common),
    /// Train each method on fresh samples over a grid of kappa and n, and record
    /// the cosine similarity of the final weight to the Bayes direction.
    /// Defaults: d=10 problem, n=500, full-batch GD with lr 1 for 1500 epochs,
    /// Beta(1,1) mixing, 50 repetitions. Writes `raw.csv`, `agg.csv`, `meta.json`.
    Sweep(Common),
    /// Smallest sample size at which training lands within epsilon of the target
    /// direction with probability 1-delta, for each method and kappa; shows how
    /// that size grows with kappa. Writes `complexity.csv`, `probes.json`, `meta.json`.
    Complexity(Common),
    /// Run numerical checks of the analytical bounds and print one JSON line per check.
    /// Exits with status 2 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// One of: inequalities, partition, norm-bound, direction, erm-norm,
        /// mixup-norm, mask, max-margin, all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Train a two-layer ReLU network on 2-D sine-boundary data with each method
    /// and write decision grids and boundary statistics.
    Mlp2d(Common),
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn out_dir(common: &Common, configured: Option<PathBuf>) -> PathBuf {
    common.out.clone().or(configured).unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleConfig {
    spec: SpecSource,
    kappa: f64,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { spec: SpecSource::default(), kappa: 1.0, n: 500, seed: 0, out: None }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Objective {
    Expected,
    Empirical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MinimizeConfig {
    spec: SpecSource,
    kappa: f64,
    method: MethodName,
    objective: Objective,
    /// Sample size of the empirical loss, and the `n` the expected Mixup and mask losses depend on.
    n: usize,
    /// Defaults to Beta(1,1) for Mixup and Bernoulli masks with uniform rate for mask.
    scheme: Option<SchemeConfig>,
    train: TrainSpec,
    pair_mode: PairMode,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        MinimizeConfig {
            spec: SpecSource::default(),
            kappa: 1.0,
            method: MethodName::Mixup,
            objective: Objective::Expected,
            n: 500,
            scheme: None,
            train: TrainSpec::Newton { max_iters: 100 },
            pair_mode: PairMode::FixedPerPair,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct MinimizeReport {
    method: MethodName,
    objective: Objective,
    kappa: f64,
    n: usize,
    status: mixsep::minimize::Status,
    iterations: usize,
    final_loss: f64,
    final_grad_norm: f64,
    norm: f64,
    sim_to_bayes: Option<f64>,
    w_star: Vec<f64>,
}

fn optimize<O: SecondOrder>(obj: &mut O, train: &TrainSpec, reference: &DVector<f64>) -> MinimizeResult {
    let w0 = DVector::zeros(obj.dim());
    let reference = Some(reference.clone());
    match *train {
        TrainSpec::Gd { lr, epochs } => {
            gd_minimize(obj, &w0, &GdOptions { lr, epochs, reference, record_trace: true })
        }
        TrainSpec::Adam { lr, epochs } => {
            adam_minimize(obj, &w0, &AdamOptions { lr, epochs, reference, record_trace: true, ..Default::default() })
        }
        TrainSpec::Newton { max_iters } => {
            newton_minimize(obj, &w0, &NewtonOptions { max_iters, reference, record_trace: true, ..Default::default() })
        }
    }
}

fn minimize(cfg: &MinimizeConfig, out: &Path) -> Result<MinimizeReport> {
    let spec = cfg.spec.load(Kappa::new(cfg.kappa)?)?;
    let bayes = bayes_direction(&spec)?;
    let quad = Quadrature::default();
    let mixup = || -> Result<MixupScheme> { cfg.scheme.as_ref().map_or_else(|| MixupScheme::beta(1.0), |s| s.mixup()) };
    let mask = || -> Result<MaskScheme> { cfg.scheme.as_ref().map_or_else(|| MaskScheme::bernoulli(1.0), |s| s.mask()) };
    let result = match cfg.objective {
        Objective::Expected => match cfg.method {
            MethodName::Erm => optimize(&mut ExpectedErm::new(&spec, &quad), &cfg.train, &bayes),
            MethodName::Mixup => optimize(&mut ExpectedMixup::new(&spec, &mixup()?, cfg.n, &quad)?, &cfg.train, &bayes),
            MethodName::Mask => optimize(&mut ExpectedMask::new(&spec, &mask()?, cfg.n, &quad)?, &cfg.train, &bayes),
        },
        Objective::Empirical => {
            let data = sample_dataset(&spec, cfg.n, cfg.seed)?;
            let pair_seed = cfg.seed.wrapping_add(1);
            let mut obj = match cfg.method {
                MethodName::Erm => EmpiricalLoss::erm(&data),
                MethodName::Mixup => {
                    EmpiricalLoss::mixup(&data, PairDraws::mixup(&data, &mixup()?, pair_seed, cfg.pair_mode)?)?
                }
                MethodName::Mask => {
                    EmpiricalLoss::mask(&data, PairDraws::mask(&data, &mask()?, pair_seed, cfg.pair_mode)?)?
                }
            };
            optimize(&mut obj, &cfg.train, &bayes)
        }
    };
    std::fs::create_dir_all(out)?;
    result.write_trace_csv(std::fs::File::create(out.join("trace.csv"))?)?;
    let report = MinimizeReport {
        method: cfg.method,
        objective: cfg.objective,
        kappa: cfg.kappa,
        n: cfg.n,
        status: result.status,
        iterations: result.iterations,
        final_loss: result.final_loss,
        final_grad_norm: result.final_grad_norm,
        norm: result.w_star.norm(),
        sim_to_bayes: cosine_similarity(&result.w_star, &bayes).ok(),
        w_star: result.w_star.as_slice().to_vec(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(out.join("result.json"))?, &report)?;
    Ok(report)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sample(c) => {
            let mut cfg: SampleConfig = read_config(&c.config)?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let spec = cfg.spec.load(Kappa::new(cfg.kappa)?)?;
            let data = sample_dataset(&spec, cfg.n, cfg.seed)?;
            let out = out_dir(&c, cfg.out.clone());
            std::fs::create_dir_all(&out)?;
            data.write_csv(std::fs::File::create(out.join("data.csv"))?)?;
            println!("wrote {} points to {}", data.len(), out.join("data.csv").display());
        }
        Command::Minimize(c) => {
            let mut cfg: MinimizeConfig = read_config(&c.config)?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let report = minimize(&cfg, &out_dir(&c, cfg.out.clone()))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Sweep(c) => {
            let mut cfg: SweepConfig = read_config(&c.config)?;
            if let Some(s) = c.seed {
                cfg.base_seed = s;
            }
            let out = out_dir(&c, cfg.out.clone());
            cfg.out = Some(out.clone());
            let table = harness::sweep(&cfg)?;
            harness::write_sweep(&out, &cfg, &table)?;
            print!("{}", harness::agg_csv(&table.cells));
        }
        Command::Complexity(c) => {
            let mut cfg: SweepConfig = read_config(&c.config)?;
            if let Some(s) = c.seed {
                cfg.base_seed = s;
            }
            let out = out_dir(&c, cfg.out.clone());
            cfg.out = Some(out.clone());
            let results = harness::run_complexity(&cfg, &out)?;
            print!("{}", harness::complexity_csv(&results));
        }
        Command::Verify { common, suite } => {
            if common.config.is_some() {
                return Err(Error::Config("verify takes no config file".into()));
            }
            if !SUITES.contains(&suite.as_str()) {
                return Err(Error::Config(format!("unknown suite {suite:?}; expected one of {}", SUITES.join(", "))));
            }
            let reports = run_suite(&suite, common.seed.unwrap_or(0))?;
            let mut lines = String::new();
            for r in &reports {
                lines.push_str(&r.to_json_line());
                lines.push('\n');
            }
            print!("{lines}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("verify.jsonl"), &lines)?;
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Mlp2d(c) => {
            let mut cfg: Mlp2dConfig = read_config(&c.config)?;
            if let Some(s) = c.seed {
                cfg.data.seed = s;
                cfg.train.seed = s;
            }
            let stats = run_mlp2d(&cfg, &out_dir(&c, None))?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
