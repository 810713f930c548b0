//! Reference implementations that share no code path with the fast engine:
//! full-scan matching, direct double-loop estimators, and the semiparametric
//! efficiency bound by closed form and by tensor Gauss-Legendre quadrature.

use std::cmp::Ordering;
use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simulation::DesignSpec;

fn check_m(m: usize, available: usize) -> Result<()> {
    if m == 0 || m > available {
        return Err(Error::Bound(format!("m = {m} must lie in [1, {available}]")));
    }
    Ok(())
}

fn rank_by_distance<T: Scalar>(scores: &[T], i: usize, mut cands: Vec<usize>) -> Vec<usize> {
    cands.sort_by(|&a, &b| {
        let da = (scores[i] - scores[a]).abs();
        let db = (scores[i] - scores[b]).abs();
        da.partial_cmp(&db).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    cands
}

/// `J_m(i)` by scanning every opposite-arm unit and sorting on `(distance, index)`.
pub fn brute_force_match<T: Scalar>(scores: &[T], w: &[bool], i: usize, m: usize) -> Result<Vec<usize>> {
    let cands: Vec<usize> = (0..scores.len()).filter(|&j| w[j] != w[i]).collect();
    check_m(m, cands.len())?;
    let mut ranked = rank_by_distance(scores, i, cands);
    ranked.truncate(m);
    Ok(ranked)
}

/// `H_m(i)` by full scan: unit `i` first, then its own arm by `(distance, index)`.
pub fn brute_force_same<T: Scalar>(scores: &[T], w: &[bool], i: usize, m: usize) -> Result<Vec<usize>> {
    let cands: Vec<usize> = (0..scores.len()).filter(|&j| w[j] == w[i] && j != i).collect();
    check_m(m, cands.len() + 1)?;
    let mut out = vec![i];
    out.extend(rank_by_distance(scores, i, cands).into_iter().take(m - 1));
    Ok(out)
}

/// The set-builder form `{j : W_j ≠ W_i, #{k : W_k ≠ W_i, d_k ≤ d_j} ≤ m}`.
/// Under ties it may hold fewer than `m` units.
pub fn set_builder_match<T: Scalar>(scores: &[T], w: &[bool], i: usize, m: usize) -> Vec<usize> {
    let d = |j: usize| (scores[i] - scores[j]).abs();
    let opp: Vec<usize> = (0..scores.len()).filter(|&j| w[j] != w[i]).collect();
    opp.iter()
        .copied()
        .filter(|&j| opp.iter().filter(|&&k| d(k) <= d(j)).count() <= m)
        .collect()
}

/// `τ̂` by a direct double loop over units and their full-scan match sets.
pub fn brute_force_ate<T: Scalar>(ds: &Dataset<T>, scores: &[T], m: usize) -> Result<T> {
    let y = ds.y();
    let mut total = T::zero();
    for i in 0..ds.n() {
        let set = brute_force_match(scores, ds.w(), i, m)?;
        let mean = set.iter().map(|&j| y[j]).sum::<T>() / T::from_count(m);
        let diff = y[i] - mean;
        total += if ds.w()[i] { diff } else { -diff };
    }
    Ok(total / T::from_count(ds.n()))
}

/// Every variance component by its defining formula, `O(n²)` per quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectVariance<T> {
    pub tau_hat: T,
    pub counts: Vec<usize>,
    pub local_var: Vec<T>,
    pub sigma2_hat: T,
    pub c_hat: Vec<T>,
    /// Row-major `k × k`.
    pub info_hat: Vec<T>,
}

/// Direct evaluation for the logistic link; `scores` must equal `F(X'θ)`.
pub fn direct_variance<T: Scalar>(
    ds: &Dataset<T>,
    scores: &[T],
    theta: &[T],
    m: usize,
    q: usize,
    l: usize,
) -> Result<DirectVariance<T>> {
    let n = ds.n();
    let k = ds.k();
    let w = ds.w();
    let y = ds.y();
    let nf = T::from_count(n);
    let mf = T::from_count(m);

    let tau_hat = brute_force_ate(ds, scores, m)?;
    let counts: Vec<usize> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| w[j] != w[i])
                .filter(|&j| brute_force_match(scores, w, j, m).map(|s| s.contains(&i)).unwrap_or(false))
                .count()
        })
        .collect();

    let sample_var = |set: &[usize]| {
        let len = T::from_count(set.len());
        let mean = set.iter().map(|&j| y[j]).sum::<T>() / len;
        set.iter().map(|&j| (y[j] - mean) * (y[j] - mean)).sum::<T>() / (len - T::one())
    };
    let sample_cov = |set: &[usize], c: usize| {
        let len = T::from_count(set.len());
        let xm = set.iter().map(|&j| ds.x(j)[c]).sum::<T>() / len;
        let ym = set.iter().map(|&j| y[j]).sum::<T>() / len;
        set.iter().map(|&j| (ds.x(j)[c] - xm) * (y[j] - ym)).sum::<T>() / (len - T::one())
    };

    let local_var = (0..n)
        .map(|i| brute_force_same(scores, w, i, q).map(|h| sample_var(&h)))
        .collect::<Result<Vec<T>>>()?;

    let mut first = T::zero();
    let mut second = T::zero();
    for i in 0..n {
        let set = brute_force_match(scores, w, i, m)?;
        let mean = set.iter().map(|&j| y[j]).sum::<T>() / mf;
        let s = if w[i] { T::one() } else { -T::one() };
        let dev = s * (y[i] - mean) - tau_hat;
        first += dev * dev;
        let km = T::from_count(counts[i]) / mf;
        second += (km * km + (T::lit(2.0) * mf - T::one()) / mf * km) * local_var[i];
    }
    let sigma2_hat = (first + second) / nf;

    let mut c_hat = vec![T::zero(); k];
    let mut info_hat = vec![T::zero(); k * k];
    for i in 0..n {
        let xi = ds.x(i);
        let t = xi.iter().zip(theta).map(|(&a, &b)| a * b).sum::<T>();
        let p = T::one() / (T::one() + (-t).exp());
        let dens = p * (T::one() - p);
        let own = brute_force_same(scores, w, i, l)?;
        let opp = brute_force_match(scores, w, i, l)?;
        for c in 0..k {
            let (cov1, cov0) = if w[i] {
                (sample_cov(&own, c), sample_cov(&opp, c))
            } else {
                (sample_cov(&opp, c), sample_cov(&own, c))
            };
            c_hat[c] += (cov1 / p + cov0 / (T::one() - p)) * dens / nf;
            for d in 0..k {
                info_hat[c * k + d] += dens * dens / (p * (T::one() - p)) * xi[c] * xi[d] / nf;
            }
        }
    }
    Ok(DirectVariance { tau_hat, counts, local_var, sigma2_hat, c_hat, info_hat })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMethod {
    ClosedForm,
    Quadrature,
}

impl fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundMethod::ClosedForm => "closed-form",
            BoundMethod::Quadrature => "quadrature",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    pub sigma2_eff: f64,
    pub sigma_eff: f64,
    pub method: BoundMethod,
}

impl BoundResult {
    fn new(sigma2_eff: f64, method: BoundMethod) -> Self {
        Self { sigma2_eff, sigma_eff: sigma2_eff.sqrt(), method }
    }
}

/// Efficiency bound for design 1 or 2 by the requested method.
pub fn efficiency_bound(design_id: u32, method: BoundMethod) -> Result<BoundResult> {
    let spec = DesignSpec::from_id(design_id)?;
    Ok(match method {
        BoundMethod::ClosedForm => BoundResult::new(closed_form_bound(&spec), method),
        BoundMethod::Quadrature => BoundResult::new(quadrature_bound(&spec, 64), method),
    })
}

/// `Var(μ₁ - μ₀) + E[1/p + 1/(1-p)]` with unit noise variances.
///
/// For `X'θ* = X₁ + 2X₂`, `1/p + 1/(1-p) = 2 + 2cosh(X'θ*)`, and
/// `E[e^{aU}] = 2sinh(a/2)/a` for `U ~ U[-1/2, 1/2]`.
fn closed_form_bound(spec: &DesignSpec) -> f64 {
    let a = spec.y1[1] - spec.y0[1];
    let b = spec.y1[2] - spec.y0[2];
    let heterogeneity = (a * a + b * b) / 12.0;
    let mgf = |c: f64| if c == 0.0 { 1.0 } else { 2.0 * (c / 2.0).sinh() / c };
    let cosh_mean = mgf(spec.theta_star[0]) * mgf(spec.theta_star[1]);
    heterogeneity + 2.0 + 2.0 * cosh_mean
}

fn quadrature_bound(spec: &DesignSpec, order: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let mut total = 0.0;
    for (&u1, &w1) in nodes.iter().zip(&weights) {
        for (&u2, &w2) in nodes.iter().zip(&weights) {
            let (x1, x2) = (u1 / 2.0, u2 / 2.0);
            let mu0 = spec.y0[0] + spec.y0[1] * x1 + spec.y0[2] * x2;
            let mu1 = spec.y1[0] + spec.y1[1] * x1 + spec.y1[2] * x2;
            let p = 1.0 / (1.0 + (-(spec.theta_star[0] * x1 + spec.theta_star[1] * x2)).exp());
            let g = (mu1 - mu0 - spec.true_tau).powi(2) + 1.0 / p + 1.0 / (1.0 - p);
            total += w1 * w2 / 4.0 * g;
        }
    }
    total
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
