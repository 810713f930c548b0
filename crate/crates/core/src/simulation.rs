//! Data-generating designs and the Monte Carlo replication driver.
//!
//! Replication `r` draws from its own ChaCha8 stream seeded with
//! `base_seed + r`, and aggregation walks records in replication order, so a
//! table is identical for any worker count.

use std::fmt::Write as _;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::CrossCheck;
use crate::matching::ScoreIndex;
use crate::normal::quantile_unchecked;
use crate::propensity::{fit_mle, propensity_scores, FitOptions};
use crate::variance::{confidence_interval, default_q, VariancePrep};

/// Linear outcome model `Y(w) = a_w + b_w X₁ + c_w X₂ + U_w` with
/// `X₁, X₂ ~ U[-1/2, 1/2]`, standard normal noise, and treatment drawn from a
/// logistic model with coefficients `theta_star`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub design_id: u32,
    pub true_tau: f64,
    pub theta_star: [f64; 2],
    /// `[intercept, x1, x2]` for the control outcome.
    pub y0: [f64; 3],
    /// `[intercept, x1, x2]` for the treated outcome.
    pub y1: [f64; 3],
}

impl DesignSpec {
    pub fn design1() -> Self {
        Self { design_id: 1, true_tau: 5.0, theta_star: [1.0, 2.0], y0: [0.0, 3.0, -3.0], y1: [5.0, 5.0, 1.0] }
    }

    pub fn design2() -> Self {
        Self { design_id: 2, true_tau: 5.0, theta_star: [1.0, 2.0], y0: [0.0, 2.0, 4.0], y1: [5.0, -1.0, -2.0] }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(Self::design1()),
            2 => Ok(Self::design2()),
            other => Err(Error::Domain(format!("unknown design {other}; expected 1 or 2"))),
        }
    }

    /// A user-defined design with the same covariate, noise and treatment laws.
    /// The true effect is the intercept difference since the covariates are centered.
    pub fn custom(y0: [f64; 3], y1: [f64; 3]) -> Self {
        Self { design_id: 0, true_tau: y1[0] - y0[0], theta_star: [1.0, 2.0], y0, y1 }
    }
}

/// One simulated unit with both potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnUnit {
    pub x: [f64; 2],
    pub w: bool,
    pub y0: f64,
    pub y1: f64,
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    quantile_unchecked(rng.sample(Open01))
}

/// Draws `n` units; per unit the stream is consumed as x₁, x₂, w, u₀, u₁.
pub fn draw_units<R: Rng + ?Sized>(spec: &DesignSpec, n: usize, rng: &mut R) -> Vec<DrawnUnit> {
    (0..n)
        .map(|_| {
            let x1 = rng.gen::<f64>() - 0.5;
            let x2 = rng.gen::<f64>() - 0.5;
            let t = spec.theta_star[0] * x1 + spec.theta_star[1] * x2;
            let p = 1.0 / (1.0 + (-t).exp());
            let w = rng.gen::<f64>() < p;
            let u0 = std_normal(rng);
            let u1 = std_normal(rng);
            DrawnUnit {
                x: [x1, x2],
                w,
                y0: spec.y0[0] + spec.y0[1] * x1 + spec.y0[2] * x2 + u0,
                y1: spec.y1[0] + spec.y1[1] * x1 + spec.y1[2] * x2 + u1,
            }
        })
        .collect()
}

/// Observed sample `(X, W, Y(W))` of size `n`.
pub fn generate_design<R: Rng + ?Sized>(spec: &DesignSpec, n: usize, rng: &mut R) -> Result<Dataset<f64>> {
    if n < 2 {
        return Err(Error::Shape(format!("sample size {n} is below 2")));
    }
    let units = draw_units(spec, n, rng);
    let x = units.iter().flat_map(|u| u.x).collect();
    let w = units.iter().map(|u| u.w).collect();
    let y = units.iter().map(|u| if u.w { u.y1 } else { u.y0 }).collect();
    Dataset::from_columns(2, x, w, y)
}

/// Window sizes for the replication driver; `q = None` means `[N^{1/3}]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTuning {
    pub q: Option<usize>,
    pub l: usize,
}

impl Default for SimTuning {
    fn default() -> Self {
        Self { q: None, l: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellEstimate {
    pub tau_hat: f64,
    pub adjusted: f64,
    pub ci95: (f64, f64),
    pub ci90: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellRecord {
    Estimated { m: usize, estimate: CellEstimate },
    /// `m` exceeded an arm size in this sample.
    Skipped { m: usize },
}

impl CellRecord {
    pub fn m(&self) -> usize {
        match *self {
            CellRecord::Estimated { m, .. } | CellRecord::Skipped { m } => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub seed: u64,
    pub n: usize,
    /// Set when the propensity fit failed; `cells` is then empty.
    pub failure: Option<String>,
    pub cells: Vec<CellRecord>,
}

/// Generates one sample, fits `θ̂` once, and estimates every `m` in the grid
/// with intervals at α = 0.05 and α = 0.10.
pub fn run_replication(spec: &DesignSpec, n: usize, m_grid: &[usize], tuning: SimTuning, seed: u64) -> ReplicationRecord {
    match replicate(spec, n, m_grid, tuning, seed) {
        Ok(cells) => ReplicationRecord { seed, n, failure: None, cells },
        Err(e) => ReplicationRecord { seed, n, failure: Some(e.to_string()), cells: Vec::new() },
    }
}

fn replicate(spec: &DesignSpec, n: usize, m_grid: &[usize], tuning: SimTuning, seed: u64) -> Result<Vec<CellRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = generate_design(spec, n, &mut rng)?;
    let fit = fit_mle(&ds, &FitOptions::default())?;
    let scores = propensity_scores(&ds, &fit.theta_hat)?;
    let idx = ScoreIndex::build(&scores, ds.w())?;
    let min_arm = ds.n0().min(ds.n1());
    let q = tuning.q.unwrap_or_else(|| default_q(n, min_arm));
    let prep = VariancePrep::new(&ds, &idx, &fit.theta_hat, q, tuning.l)?;
    m_grid
        .iter()
        .map(|&m| {
            if m == 0 || m > min_arm {
                return Ok(CellRecord::Skipped { m });
            }
            let (est, _) = prep.estimate(&ds, &idx, m, 0.05, CrossCheck::Warn)?;
            let ci90 = confidence_interval(est.tau_hat, est.variance, n, 0.10)?;
            Ok(CellRecord::Estimated {
                m,
                estimate: CellEstimate {
                    tau_hat: est.tau_hat,
                    adjusted: est.variance,
                    ci95: (est.ci_low, est.ci_high),
                    ci90,
                },
            })
        })
        .collect()
}

/// `{2^j : 0 <= j <= floor(log2(n) / 2)}`.
pub fn m_grid(n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let top = n.ilog2() / 2;
    (0..=top).map(|j| 1usize << j).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub design: DesignSpec,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub base_seed: u64,
    pub tuning: SimTuning,
    /// Overrides the default power-of-two grid for every `n`.
    pub m_override: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub cover95: f64,
    pub cover90: f64,
    /// `√n` times the sample standard deviation (divisor reps - 1); NaN for one replication.
    pub nsd: f64,
}

pub fn metrics(
    estimates: &[f64],
    ci95s: &[(f64, f64)],
    ci90s: &[(f64, f64)],
    true_tau: f64,
    n: usize,
) -> Result<Metrics> {
    let r = estimates.len();
    if r == 0 || ci95s.len() != r || ci90s.len() != r {
        return Err(Error::Shape(format!(
            "metrics need equal nonempty inputs (estimates {r}, ci95 {}, ci90 {})",
            ci95s.len(),
            ci90s.len()
        )));
    }
    let rf = r as f64;
    let rmse = (estimates.iter().map(|e| (e - true_tau).powi(2)).sum::<f64>() / rf).sqrt();
    let mae = estimates.iter().map(|e| (e - true_tau).abs()).sum::<f64>() / rf;
    let cover = |cis: &[(f64, f64)]| cis.iter().filter(|(lo, hi)| *lo <= true_tau && true_tau <= *hi).count() as f64 / rf;
    let nsd = if r > 1 {
        let mean = estimates.iter().sum::<f64>() / rf;
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (rf - 1.0);
        (n as f64).sqrt() * var.sqrt()
    } else {
        f64::NAN
    };
    Ok(Metrics { rmse, mae, cover95: cover(ci95s), cover90: cover(ci90s), nsd })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub n: usize,
    pub m: usize,
    pub metrics: Option<Metrics>,
    /// Replications that failed outright or could not use this `m`.
    pub failed_reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloTable {
    pub config: MonteCarloConfig,
    pub rows: Vec<TableRow>,
}

/// Sweeps every `(n, m)` cell. Runs on the current rayon pool.
pub fn run_monte_carlo(config: &MonteCarloConfig) -> Result<MonteCarloTable> {
    if config.reps == 0 {
        return Err(Error::Domain("reps must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &n in &config.n_list {
        let grid = config.m_override.clone().unwrap_or_else(|| m_grid(n));
        let records: Vec<ReplicationRecord> = (0..config.reps as u64)
            .into_par_iter()
            .map(|r| run_replication(&config.design, n, &grid, config.tuning, config.base_seed.wrapping_add(r)))
            .collect();
        for (slot, &m) in grid.iter().enumerate() {
            let mut est = Vec::with_capacity(records.len());
            let mut ci95 = Vec::with_capacity(records.len());
            let mut ci90 = Vec::with_capacity(records.len());
            let mut failed = 0;
            for rec in &records {
                match rec.cells.get(slot) {
                    Some(CellRecord::Estimated { estimate, .. }) => {
                        est.push(estimate.tau_hat);
                        ci95.push(estimate.ci95);
                        ci90.push(estimate.ci90);
                    }
                    _ => failed += 1,
                }
            }
            let metrics = if est.is_empty() {
                None
            } else {
                Some(metrics(&est, &ci95, &ci90, config.design.true_tau, n)?)
            };
            rows.push(TableRow { n, m, metrics, failed_reps: failed });
        }
    }
    Ok(MonteCarloTable { config: config.clone(), rows })
}

impl MonteCarloTable {
    pub fn row(&self, n: usize, m: usize) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.n == n && r.m == m)
    }

    fn provenance(&self) -> String {
        let c = &self.config;
        let ns: Vec<String> = c.n_list.iter().map(ToString::to_string).collect();
        let grid = match &c.m_override {
            Some(g) => g.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
            None => "auto".into(),
        };
        format!(
            "# design={} y0={:?} y1={:?} true_tau={} n={} m={} reps={} base_seed={} q={} l={} version={}",
            c.design.design_id,
            c.design.y0,
            c.design.y1,
            c.design.true_tau,
            ns.join(";"),
            grid,
            c.reps,
            c.base_seed,
            c.tuning.q.map_or_else(|| "auto".to_string(), |q| q.to_string()),
            c.tuning.l,
            env!("CARGO_PKG_VERSION"),
        )
    }

    /// Comma-delimited rendering with a leading provenance comment.
    pub fn to_csv(&self) -> String {
        let mut out = self.provenance();
        out.push_str("\nn,m,rmse,mae,cover95,cover90,nsd,failed_reps\n");
        for r in &self.rows {
            match r.metrics {
                Some(mt) => writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                    r.n, r.m, mt.rmse, mt.mae, mt.cover95, mt.cover90, mt.nsd, r.failed_reps
                ),
                None => writeln!(out, "{},{},NaN,NaN,NaN,NaN,NaN,{}", r.n, r.m, r.failed_reps),
            }
            .expect("writing to a String");
        }
        out
    }

    /// Aligned text in the layout of a printed results table.
    pub fn to_text(&self) -> String {
        let mut out = self.provenance();
        out.push('\n');
        writeln!(out, "{:>6} {:>4} {:>7} {:>7} {:>9} {:>9} {:>7} {:>6}", "N", "M", "RMSE", "MAE", "95% Cov", "90% Cov", "NSD", "failed").unwrap();
        let mut last_n = None;
        for r in &self.rows {
            let n_label = if last_n == Some(r.n) { String::new() } else { r.n.to_string() };
            last_n = Some(r.n);
            match r.metrics {
                Some(mt) => writeln!(
                    out,
                    "{:>6} {:>4} {:>7.3} {:>7.3} {:>9.3} {:>9.3} {:>7.3} {:>6}",
                    n_label, r.m, mt.rmse, mt.mae, mt.cover95, mt.cover90, mt.nsd, r.failed_reps
                ),
                None => writeln!(out, "{:>6} {:>4} {:>7} {:>7} {:>9} {:>9} {:>7} {:>6}", n_label, r.m, "-", "-", "-", "-", "-", r.failed_reps),
            }
            .unwrap();
        }
        out
    }
}
