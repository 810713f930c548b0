//! Command-line front end: `simulate`, `estimate`, `bound`.
//!
//! Every flag may also come from a TOML file given by `--config`, keyed by
//! the flag name (`reps = 2000`, `n = [512, 1024]`). Flags win.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_dataset, validate, Layout, OverlapThresholds};
use crate::error::Error;
use crate::matching::ScoreIndex;
use crate::oracle::{efficiency_bound, BoundMethod};
use crate::propensity::{fit_mle, propensity_scores, FitOptions};
use crate::simulation::{run_monte_carlo, DesignSpec, MonteCarloConfig, SimTuning};
use crate::variance::{TuningRule, VariancePrep};
use crate::estimator::CrossCheck;

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const PARSE: i32 = 4;
    pub const DOMAIN: i32 = 5;
    pub const BOUND: i32 = 6;
    pub const DEGENERATE_ARM: i32 = 7;
    pub const RANK_DEFICIENT: i32 = 8;
    pub const SEPARATION: i32 = 9;
    pub const SHAPE: i32 = 10;
}

#[derive(Debug, Parser)]
#[command(name = "psmatch", version, about = "Propensity-score matching estimator of the average treatment effect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo study and write a results table
    Simulate(SimulateArgs),
    /// Estimate the treatment effect for a dataset
    Estimate(EstimateArgs),
    /// Print the semiparametric efficiency bound of a built-in design
    Bound(BoundArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Text,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Design id, 1 or 2 [default: 1]
    #[arg(long)]
    design: Option<u32>,
    /// Comma-separated sample sizes [default: 512,1024,2048,4096,8192]
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Replications per sample size [default: 2000]
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed; replication r uses seed + r [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated match counts [default: powers of two up to sqrt(N)]
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Same-arm variance window [default: nearest integer to N^(1/3)]
    #[arg(long)]
    q: Option<usize>,
    /// Covariance window [default: 4]
    #[arg(long)]
    l: Option<usize>,
    /// Output file [default: standard output]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output format [default: csv]
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads [default: machine parallelism]
    #[arg(long)]
    threads: Option<usize>,
    /// TOML file of flag defaults [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Comma-delimited input with header (y, w, x1..xk) [required]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Number of matches [default: largest power of two <= sqrt(N)]
    #[arg(long)]
    m: Option<usize>,
    /// Same-arm variance window [default: nearest integer to N^(1/3)]
    #[arg(long)]
    q: Option<usize>,
    /// Covariance window [default: 4]
    #[arg(long)]
    l: Option<usize>,
    /// Interval miscoverage level [default: 0.05]
    #[arg(long)]
    alpha: Option<f64>,
    /// Outcome column name [default: y]
    #[arg(long)]
    outcome: Option<String>,
    /// Treatment column name [default: w]
    #[arg(long)]
    treatment: Option<String>,
    /// Covariate column prefix [default: x]
    #[arg(long)]
    covariate_prefix: Option<String>,
    /// Report file [default: standard output]
    #[arg(long)]
    output: Option<PathBuf>,
    /// TOML file of flag defaults [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// Design id, 1 or 2 [required]
    #[arg(long)]
    design: Option<u32>,
    /// TOML file of flag defaults [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: exit::USAGE, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => exit::IO,
            Error::Parse { .. } => exit::PARSE,
            Error::Domain(_) => exit::DOMAIN,
            Error::Bound(_) => exit::BOUND,
            Error::DegenerateArm(_) => exit::DEGENERATE_ARM,
            Error::RankDeficient(_) => exit::RANK_DEFICIENT,
            Error::Separation(_) => exit::SEPARATION,
            Error::Shape(_) => exit::SHAPE,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command, and returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Bound(a) => bound(a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Flag-name keyed defaults from a TOML file.
struct ConfigFile(toml::Table);

impl ConfigFile {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self(toml::Table::new()));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|source| CliError::from(Error::Io { path: path.display().to_string(), source }))?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        Ok(Self(table))
    }

    fn bad(key: &str, what: &str) -> CliError {
        CliError::usage(format!("config key `{key}` must be {what}"))
    }

    fn uint(&self, key: &str) -> CliResult<Option<u64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
            Some(_) => Err(Self::bad(key, "a nonnegative integer")),
        }
    }

    fn float(&self, key: &str) -> CliResult<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(*v)),
            Some(toml::Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(Self::bad(key, "a number")),
        }
    }

    fn string(&self, key: &str) -> CliResult<Option<String>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Self::bad(key, "a string")),
        }
    }

    fn list(&self, key: &str) -> CliResult<Option<Vec<usize>>> {
        let bad = || Self::bad(key, "an integer, an array of integers, or a comma-separated string");
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(Some(vec![*v as usize])),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    _ => Err(bad()),
                })
                .collect::<CliResult<Vec<_>>>()
                .map(Some),
            Some(toml::Value::String(s)) => s
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<CliResult<Vec<_>>>()
                .map(Some),
            Some(_) => Err(bad()),
        }
    }

    fn triple(&self, key: &str) -> CliResult<Option<[f64; 3]>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) if items.len() == 3 => {
                let mut out = [0.0; 3];
                for (slot, v) in out.iter_mut().zip(items) {
                    *slot = match v {
                        toml::Value::Float(f) => *f,
                        toml::Value::Integer(i) => *i as f64,
                        _ => return Err(Self::bad(key, "an array of three numbers")),
                    };
                }
                Ok(Some(out))
            }
            Some(_) => Err(Self::bad(key, "an array of three numbers")),
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    let io_err = |p: &str, source| CliError::from(Error::Io { path: p.to_string(), source });
    match path {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| io_err(&p.display().to_string(), e))?;
            f.write_all(text.as_bytes()).map_err(|e| io_err(&p.display().to_string(), e))?;
            f.sync_all().map_err(|e| io_err(&p.display().to_string(), e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| io_err("<stdout>", e))
        }
    }
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let design_id = match a.design {
        Some(d) => d,
        None => cfg.uint("design")?.map_or(1, |v| v as u32),
    };
    let mut design = DesignSpec::from_id(design_id)?;
    if let (Some(y0), Some(y1)) = (cfg.triple("y0")?, cfg.triple("y1")?) {
        design = DesignSpec::custom(y0, y1);
    }
    let n_list = match a.n {
        Some(v) => v,
        None => cfg.list("n")?.unwrap_or_else(|| vec![512, 1024, 2048, 4096, 8192]),
    };
    if n_list.is_empty() || n_list.iter().any(|&n| n < 2) {
        return Err(CliError::usage("every --n must be at least 2"));
    }
    let reps = match a.reps {
        Some(r) => r,
        None => cfg.uint("reps")?.map_or(2000, |v| v as usize),
    };
    if reps == 0 {
        return Err(CliError::usage("--reps must be at least 1"));
    }
    let base_seed = match a.seed {
        Some(s) => s,
        None => cfg.uint("seed")?.unwrap_or(0),
    };
    let m_override = match a.m {
        Some(m) => Some(m),
        None => cfg.list("m")?,
    };
    let q = match a.q {
        Some(q) => Some(q),
        None => cfg.uint("q")?.map(|v| v as usize),
    };
    let l = match a.l {
        Some(l) => l,
        None => cfg.uint("l")?.map_or(4, |v| v as usize),
    };
    if q.is_some_and(|q| q < 2) || l < 2 {
        return Err(CliError::from(Error::Bound("--q and --l must be at least 2".into())));
    }
    let format = match a.format {
        Some(f) => f,
        None => match cfg.string("format")?.as_deref() {
            None | Some("csv") => Format::Csv,
            Some("text") => Format::Text,
            Some(other) => return Err(CliError::usage(format!("unknown format `{other}`"))),
        },
    };
    let threads = match a.threads {
        Some(t) => Some(t),
        None => cfg.uint("threads")?.map(|v| v as usize),
    };
    let output = a.output.or(cfg.string("output")?.map(PathBuf::from));

    let config = MonteCarloConfig { design, n_list, reps, base_seed, tuning: SimTuning { q, l }, m_override };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let table = pool.install(|| run_monte_carlo(&config))?;
    let text = match format {
        Format::Csv => table.to_csv(),
        Format::Text => table.to_text(),
    };
    write_output(output.as_deref(), &text)
}

fn estimate(a: EstimateArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let input = a
        .input
        .or(cfg.string("input")?.map(PathBuf::from))
        .ok_or_else(|| CliError::usage("estimate requires --input"))?;
    let defaults = Layout::default();
    let layout = Layout {
        outcome: a.outcome.or(cfg.string("outcome")?).unwrap_or(defaults.outcome),
        treatment: a.treatment.or(cfg.string("treatment")?).unwrap_or(defaults.treatment),
        covariate_prefix: a.covariate_prefix.or(cfg.string("covariate_prefix")?).unwrap_or(defaults.covariate_prefix),
    };
    let ds = load_dataset::<f64>(&input, &layout)?;
    let auto = TuningRule::<f64>::defaults(ds.n(), ds.n0(), ds.n1());
    let min_arm = ds.n0().min(ds.n1());
    let m = a.m.or(cfg.uint("m")?.map(|v| v as usize)).unwrap_or(auto.m);
    if m > min_arm {
        return Err(CliError::from(Error::Bound(format!(
            "m = {m} exceeds the smaller arm (min(n0, n1) = {min_arm}); choose m <= {min_arm}"
        ))));
    }
    let tuning = TuningRule {
        m,
        q: a.q.or(cfg.uint("q")?.map(|v| v as usize)).unwrap_or(auto.q),
        l: a.l.or(cfg.uint("l")?.map(|v| v as usize)).unwrap_or(auto.l),
        alpha: a.alpha.or(cfg.float("alpha")?).unwrap_or(auto.alpha),
    };
    tuning.validate()?;
    if tuning.q > min_arm || tuning.l > min_arm {
        return Err(CliError::from(Error::Bound(format!(
            "windows q = {} and l = {} must not exceed min(n0, n1) = {min_arm}",
            tuning.q, tuning.l
        ))));
    }
    let output = a.output.or(cfg.string("output")?.map(PathBuf::from));

    let fit = fit_mle(&ds, &FitOptions::default())?;
    let scores = propensity_scores(&ds, &fit.theta_hat)?;
    let report = validate(&ds, &scores, OverlapThresholds::default())?;
    let idx = ScoreIndex::build(&scores, ds.w())?;
    let prep = VariancePrep::new(&ds, &idx, &fit.theta_hat, tuning.q, tuning.l)?;
    let (est, vc) = prep.estimate(&ds, &idx, tuning.m, tuning.alpha, CrossCheck::Warn)?;

    let mut text = String::new();
    writeln!(text, "input = {}", input.display()).unwrap();
    writeln!(text, "n = {}\nn0 = {}\nn1 = {}\nk = {}", ds.n(), ds.n0(), ds.n1(), ds.k()).unwrap();
    text.push_str(&fit.to_kv_lines());
    writeln!(text, "m = {}\nq = {}\nl = {}\nalpha = {}", tuning.m, tuning.q, tuning.l, tuning.alpha).unwrap();
    writeln!(text, "tau_hat = {}", est.tau_hat).unwrap();
    text.push_str(&vc.to_kv_lines());
    writeln!(text, "std_error = {}", est.std_error()).unwrap();
    writeln!(text, "ci = [{}, {}]", est.ci_low, est.ci_high).unwrap();
    text.push_str(&report.to_kv_lines());
    if !fit.converged {
        log::warn!("propensity fit did not reach the gradient tolerance");
    }
    if !report.overlap_warnings.is_empty() {
        log::warn!("{} unit(s) have propensity scores outside [0.01, 0.99]", report.overlap_warnings.len());
    }
    write_output(output.as_deref(), &text)
}

fn bound(a: BoundArgs) -> CliResult<()> {
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let design = match a.design {
        Some(d) => d,
        None => cfg.uint("design")?.map(|v| v as u32).ok_or_else(|| CliError::usage("bound requires --design"))?,
    };
    let closed = efficiency_bound(design, BoundMethod::ClosedForm)?;
    let quad = efficiency_bound(design, BoundMethod::Quadrature)?;
    let text = format!(
        "design = {design}\nsigma2_eff = {:.10}\nsigma_eff = {:.6}\nmethod = {}\nquadrature_sigma2_eff = {:.10}\nmethod_agreement_delta = {:.3e}\n",
        closed.sigma2_eff,
        closed.sigma_eff,
        closed.method,
        quad.sigma2_eff,
        (closed.sigma2_eff - quad.sigma2_eff).abs()
    );
    write_output(None, &text)
}
