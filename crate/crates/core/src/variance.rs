//! Large-sample variance of the matching estimator with an estimated
//! propensity score: `σ̂² - ĉ' Î⁻¹ ĉ`, built from local same-arm variances and
//! local covariate/outcome covariances along the score.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{default_m, match_fit, AteEstimate, CrossCheck, MatchFit};
use crate::linalg::{dot, Matrix};
use crate::matching::ScoreIndex;
use crate::normal::normal_quantile;
use crate::propensity::{LinkFunction, PropensityModel};
use crate::scalar::{CompensatedSum, Scalar};

/// Match count and window sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningRule<T> {
    pub m: usize,
    /// Same-arm window for local outcome variances.
    pub q: usize,
    /// Window for local covariances.
    pub l: usize,
    /// Miscoverage level of the confidence interval.
    pub alpha: T,
}

impl<T: Scalar> TuningRule<T> {
    /// `M` = top of the power-of-two grid, `Q = [N^{1/3}]`, `L = 4`, α = 0.05;
    /// windows clamped to `[2, min(n0, n1)]`.
    pub fn defaults(n: usize, n0: usize, n1: usize) -> Self {
        let min_arm = n0.min(n1);
        Self { m: default_m(n, min_arm), q: default_q(n, min_arm), l: clamp_window(4, min_arm), alpha: T::lit(0.05) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.q < 2 || self.l < 2 {
            return Err(Error::Bound(format!(
                "tuning needs m >= 1, q >= 2, l >= 2 (m = {}, q = {}, l = {})",
                self.m, self.q, self.l
            )));
        }
        if !(self.alpha > T::zero() && self.alpha < T::one()) {
            return Err(Error::Domain(format!("alpha = {} must lie in (0,1)", self.alpha)));
        }
        Ok(())
    }
}

/// Nearest integer to `n^{1/3}`, clamped to `[2, min_arm]`.
pub fn default_q(n: usize, min_arm: usize) -> usize {
    clamp_window((n as f64).cbrt().round() as usize, min_arm)
}

fn clamp_window(w: usize, min_arm: usize) -> usize {
    w.max(2).min(min_arm.max(2))
}

/// Which arm a local covariance window is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `H_L(i)`: unit i's own arm, including i.
    Own,
    /// `J_L(i)`: the opposite arm.
    Opposite,
}

/// `σ̄̂²(W_i, p(X_i))`: sample variance of `Y` over `H_q(i)`, divisor `q - 1`.
pub fn cond_variance_hat<T: Scalar>(idx: &ScoreIndex<T>, y: &[T], i: usize, q: usize) -> Result<T> {
    if q < 2 {
        return Err(Error::Bound(format!("q = {q} must be at least 2")));
    }
    let window = idx.match_set_same(i, q)?;
    Ok(window_variance(&window, y))
}

fn window_variance<T: Scalar>(window: &[usize], y: &[T]) -> T {
    let q = T::from_count(window.len());
    let mean = window.iter().fold(T::zero(), |a, &j| a + y[j]) / q;
    window.iter().fold(T::zero(), |a, &j| a + (y[j] - mean).powi(2)) / (q - T::one())
}

/// Componentwise sample covariance of covariates with outcomes over the
/// `l`-unit window on `side`.
pub fn cond_cov_hat<T: Scalar>(
    idx: &ScoreIndex<T>,
    ds: &Dataset<T>,
    i: usize,
    l: usize,
    side: Side,
) -> Result<Vec<T>> {
    if l < 2 {
        return Err(Error::Bound(format!("l = {l} must be at least 2")));
    }
    let window = match side {
        Side::Own => idx.match_set_same(i, l)?,
        Side::Opposite => idx.match_set_opposite(i, l)?,
    };
    let mut out = vec![T::zero(); ds.k()];
    window_covariance(&window, ds, &mut out);
    Ok(out)
}

fn window_covariance<T: Scalar>(window: &[usize], ds: &Dataset<T>, out: &mut [T]) {
    let l = T::from_count(window.len());
    let y = ds.y();
    let y_mean = window.iter().fold(T::zero(), |a, &j| a + y[j]) / l;
    for (c, slot) in out.iter_mut().enumerate() {
        let x_mean = window.iter().fold(T::zero(), |a, &j| a + ds.x(j)[c]) / l;
        *slot = window.iter().fold(T::zero(), |a, &j| a + (ds.x(j)[c] - x_mean) * (y[j] - y_mean)) / (l - T::one());
    }
}

/// Per-unit local outcome variances `σ̄̂²` over `H_q(i)`.
pub fn local_variances<T: Scalar>(idx: &ScoreIndex<T>, y: &[T], q: usize) -> Result<Vec<T>> {
    if q < 2 {
        return Err(Error::Bound(format!("q = {q} must be at least 2")));
    }
    let mut buf = Vec::with_capacity(q);
    (0..idx.len())
        .map(|i| {
            idx.same_into(i, q, &mut buf)?;
            Ok(window_variance(&buf, y))
        })
        .collect()
}

/// `σ̂²` from a finished match fit and per-unit local variances.
pub fn sigma2_from_parts<T: Scalar>(fit: &MatchFit<T>, local_var: &[T]) -> T {
    let n = T::from_count(fit.unit_effects.len());
    let m = T::from_count(fit.m);
    let two_m_minus_one = (T::lit(2.0) * m - T::one()) / m;
    let mut dev = CompensatedSum::new();
    let mut weighted = CompensatedSum::new();
    for ((&e, &k), &v) in fit.unit_effects.iter().zip(&fit.counts).zip(local_var) {
        dev.add((e - fit.tau_hat).powi(2));
        let km = T::from_count(k) / m;
        weighted.add((km * km + two_m_minus_one * km) * v);
    }
    (dev.total() + weighted.total()) / n
}

/// `σ̂²` with match sets `J_m` and variance windows `H_q` from one index.
pub fn sigma2_hat<T: Scalar>(ds: &Dataset<T>, idx: &ScoreIndex<T>, m: usize, q: usize) -> Result<T> {
    let fit = match_fit(ds.y(), idx, m, CrossCheck::default())?;
    let local = local_variances(idx, ds.y(), q)?;
    Ok(sigma2_from_parts(&fit, &local))
}

/// `ĉ = (1/N) Σ [Ĉov₁/p̂ + Ĉov₀/(1-p̂)] f(X_i'θ̂)` for a general link.
pub fn c_hat_with<T: Scalar, L: LinkFunction<T>>(
    model: &PropensityModel<L>,
    ds: &Dataset<T>,
    idx: &ScoreIndex<T>,
    theta_hat: &[T],
    l: usize,
) -> Result<Vec<T>> {
    if l < 2 {
        return Err(Error::Bound(format!("l = {l} must be at least 2")));
    }
    if theta_hat.len() != ds.k() || idx.len() != ds.n() {
        return Err(Error::Shape("theta, index and dataset disagree in size".into()));
    }
    let k = ds.k();
    let mut acc = vec![CompensatedSum::new(); k];
    let mut own = vec![T::zero(); k];
    let mut opp = vec![T::zero(); k];
    let mut buf = Vec::with_capacity(l);
    for i in 0..ds.n() {
        idx.same_into(i, l, &mut buf)?;
        window_covariance(&buf, ds, &mut own);
        idx.opposite_into(i, l, &mut buf)?;
        window_covariance(&buf, ds, &mut opp);
        let p = idx.scores()[i];
        let f = model.link.density(dot(ds.x(i), theta_hat));
        let (treated_cov, control_cov) = if ds.w()[i] { (&own, &opp) } else { (&opp, &own) };
        for c in 0..k {
            acc[c].add((treated_cov[c] / p + control_cov[c] / (T::one() - p)) * f);
        }
    }
    let n = T::from_count(ds.n());
    Ok(acc.iter().map(|a| a.total() / n).collect())
}

pub fn c_hat<T: Scalar>(ds: &Dataset<T>, idx: &ScoreIndex<T>, theta_hat: &[T], l: usize) -> Result<Vec<T>> {
    c_hat_with(&PropensityModel::logistic(), ds, idx, theta_hat, l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents<T> {
    pub sigma2_hat: T,
    pub c_hat: Vec<T>,
    pub info_hat: Matrix<T>,
    /// `σ̂² - ĉ'Î⁻¹ĉ`, floored at `1e-12 σ̂²`.
    pub adjusted: T,
    /// Set when the floor replaced a negative or vanishing value.
    pub floored: bool,
    pub m_used: usize,
    pub q_used: usize,
    pub l_used: usize,
}

/// Solves `Î z = ĉ` and returns `σ̂² - ĉ'z`.
pub fn adjusted_variance<T: Scalar>(
    sigma2_hat: T,
    c_hat: Vec<T>,
    info_hat: Matrix<T>,
    tuning: &TuningRule<T>,
) -> Result<VarianceComponents<T>> {
    let z = info_hat.solve(&c_hat)?;
    let raw = sigma2_hat - dot(&c_hat, &z);
    let floor = T::lit(1e-12) * sigma2_hat.max(T::zero());
    let floored = raw < floor;
    if floored {
        log::warn!("adjusted variance {raw} fell below the floor; using {floor}");
    }
    Ok(VarianceComponents {
        sigma2_hat,
        c_hat,
        info_hat,
        adjusted: if floored { floor } else { raw },
        floored,
        m_used: tuning.m,
        q_used: tuning.q,
        l_used: tuning.l,
    })
}

/// `τ̂ ± z_{1-α/2} √(adjusted / n)`.
pub fn confidence_interval<T: Scalar>(tau_hat: T, adjusted: T, n: usize, alpha: T) -> Result<(T, T)> {
    if adjusted < T::zero() || n == 0 {
        return Err(Error::Domain(format!("interval needs adjusted >= 0 and n >= 1 (got {adjusted}, {n})")));
    }
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::Domain(format!("alpha = {alpha} must lie in (0,1)")));
    }
    let z = T::lit(normal_quantile(1.0 - alpha.as_f64() / 2.0)?);
    let half = z * (adjusted / T::from_count(n)).sqrt();
    Ok((tau_hat - half, tau_hat + half))
}

/// Quantities shared by every `m` once the score index and `θ̂` are fixed:
/// local variances `σ̄̂²`, `ĉ`, and `Î`.
#[derive(Debug, Clone)]
pub struct VariancePrep<T> {
    pub q: usize,
    pub l: usize,
    pub local_var: Vec<T>,
    pub c_hat: Vec<T>,
    pub info_hat: Matrix<T>,
}

impl<T: Scalar> VariancePrep<T> {
    pub fn new(ds: &Dataset<T>, idx: &ScoreIndex<T>, theta_hat: &[T], q: usize, l: usize) -> Result<Self> {
        Self::with_model(&PropensityModel::logistic(), ds, idx, theta_hat, q, l)
    }

    pub fn with_model<L: LinkFunction<T>>(
        model: &PropensityModel<L>,
        ds: &Dataset<T>,
        idx: &ScoreIndex<T>,
        theta_hat: &[T],
        q: usize,
        l: usize,
    ) -> Result<Self> {
        Ok(Self {
            q,
            l,
            local_var: local_variances(idx, ds.y(), q)?,
            c_hat: c_hat_with(model, ds, idx, theta_hat, l)?,
            info_hat: model.fisher_information(ds, theta_hat)?,
        })
    }

    /// Point estimate, variance components and interval for one `m`.
    pub fn estimate(
        &self,
        ds: &Dataset<T>,
        idx: &ScoreIndex<T>,
        m: usize,
        alpha: T,
        check: CrossCheck,
    ) -> Result<(AteEstimate<T>, VarianceComponents<T>)> {
        let fit = match_fit(ds.y(), idx, m, check)?;
        let sigma2 = sigma2_from_parts(&fit, &self.local_var);
        let tuning = TuningRule { m, q: self.q, l: self.l, alpha };
        let vc = adjusted_variance(sigma2, self.c_hat.clone(), self.info_hat.clone(), &tuning)?;
        let (ci_low, ci_high) = confidence_interval(fit.tau_hat, vc.adjusted, ds.n(), alpha)?;
        let est = AteEstimate { tau_hat: fit.tau_hat, m, variance: vc.adjusted, ci_low, ci_high, alpha, n: ds.n() };
        Ok((est, vc))
    }
}

/// Runs the whole variance pipeline for given scores and `θ̂`.
pub fn estimate_with_variance<T: Scalar>(
    ds: &Dataset<T>,
    scores: &[T],
    theta_hat: &[T],
    tuning: &TuningRule<T>,
) -> Result<(AteEstimate<T>, VarianceComponents<T>)> {
    tuning.validate()?;
    let idx = ScoreIndex::build(scores, ds.w())?;
    let prep = VariancePrep::new(ds, &idx, theta_hat, tuning.q, tuning.l)?;
    prep.estimate(ds, &idx, tuning.m, tuning.alpha, CrossCheck::default())
}

impl<T: Scalar> VarianceComponents<T> {
    pub fn to_kv_lines(&self) -> String {
        let c: Vec<String> = self.c_hat.iter().map(|v| format!("{v}")).collect();
        let rows: Vec<String> = (0..self.info_hat.rows())
            .map(|i| {
                let r: Vec<String> = self.info_hat.row(i).iter().map(|v| format!("{v}")).collect();
                format!("[{}]", r.join(", "))
            })
            .collect();
        format!(
            "sigma2_hat = {}\nc_hat = [{}]\ninfo_hat = [{}]\nadjusted = {}\nadjusted_floored = {}\n",
            self.sigma2_hat,
            c.join(", "),
            rows.join(", "),
            self.adjusted,
            self.floored
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;

    fn t4() -> (Dataset<f64>, ScoreIndex<f64>) {
        let rows = [(1, 5.0, 0.62), (0, 1.0, 0.50), (1, 3.0, 0.40), (0, 2.0, 0.71)];
        let ds = Dataset::from_observations(
            rows.iter().map(|&(w, y, _)| Observation { x: vec![y], w: w == 1, y }).collect(),
        )
        .unwrap();
        let scores: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let idx = ScoreIndex::build(&scores, ds.w()).unwrap();
        (ds, idx)
    }

    #[test]
    fn local_variance_t4() {
        let (ds, idx) = t4();
        assert_eq!(cond_variance_hat(&idx, ds.y(), 0, 2).unwrap(), 2.0);
        assert!(matches!(cond_variance_hat(&idx, ds.y(), 0, 1), Err(Error::Bound(_))));
        assert!(matches!(cond_variance_hat(&idx, ds.y(), 0, 3), Err(Error::Bound(_))));
    }

    #[test]
    fn local_variance_constant_arm() {
        let idx = ScoreIndex::build(&[0.1, 0.2, 0.3, 0.4], &[true, true, true, false]).unwrap();
        let y = [4.0, 4.0, 4.0, 1.0];
        assert_eq!(cond_variance_hat(&idx, &y, 1, 3).unwrap(), 0.0);
        let y = [1.0, 2.0, 6.0, 1.0];
        // Whole arm: mean 3, squared deviations 4 + 1 + 9 over 2.
        assert_eq!(cond_variance_hat(&idx, &y, 0, 3).unwrap(), 7.0);
    }

    #[test]
    fn covariance_windows() {
        // x = y on T4; own window of unit 0 is {0, 2} with Y = {5, 3}.
        let (ds, idx) = t4();
        assert_eq!(cond_cov_hat(&idx, &ds, 0, 2, Side::Own).unwrap(), vec![2.0]);
        // Opposite window of unit 0 is both controls, Y = {1, 2}: covariance 0.5.
        assert_eq!(cond_cov_hat(&idx, &ds, 0, 2, Side::Opposite).unwrap(), vec![0.5]);
        let const_y = Dataset::from_observations(
            ds.observations().map(|mut o| {
                o.y = 1.0;
                o
            })
            .collect(),
        )
        .unwrap();
        assert_eq!(cond_cov_hat(&idx, &const_y, 3, 2, Side::Own).unwrap(), vec![0.0]);
    }

    #[test]
    fn covariance_of_x_equal_y_values_one_three() {
        let ds = Dataset::from_observations(vec![
            Observation { x: vec![1.0], w: true, y: 1.0 },
            Observation { x: vec![3.0], w: true, y: 3.0 },
            Observation { x: vec![0.0], w: false, y: 0.0 },
        ])
        .unwrap();
        let idx = ScoreIndex::build(&[0.4, 0.6, 0.5], ds.w()).unwrap();
        assert_eq!(cond_cov_hat(&idx, &ds, 0, 2, Side::Own).unwrap(), vec![2.0]);
    }

    #[test]
    fn sigma2_degenerate_outcomes() {
        let ds = Dataset::from_observations(
            (0..8).map(|i| Observation { x: vec![i as f64 / 10.0], w: i % 2 == 0, y: 7.0 }).collect(),
        )
        .unwrap();
        let scores: Vec<f64> = (0..8).map(|i| 0.3 + 0.05 * i as f64).collect();
        let idx = ScoreIndex::build(&scores, ds.w()).unwrap();
        assert_eq!(sigma2_hat(&ds, &idx, 2, 3).unwrap(), 0.0);
        assert_eq!(c_hat(&ds, &idx, &[0.5], 3).unwrap(), vec![0.0]);
    }

    #[test]
    fn sigma2_t4_by_hand() {
        // m = 1, q = 2: unit effects (3, 2, 2, 3), tau 2.5, deviations 0.25 each.
        // K = 1 for all, weight (1 + 1) = 2; local variances: treated {5,3} -> 2,
        // controls {1,2} -> 0.5. Second sum = (2*2 + 2*0.5 + 2*2 + 2*0.5)/4 = 2.5.
        let (ds, idx) = t4();
        let v = sigma2_hat(&ds, &idx, 1, 2).unwrap();
        assert!((v - (0.25 + 2.5)).abs() < 1e-14);
    }

    #[test]
    fn adjusted_variance_arithmetic() {
        let tr = TuningRule { m: 1, q: 2, l: 2, alpha: 0.05 };
        let info = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let vc = adjusted_variance(4.0, vec![1.0], info.clone(), &tr).unwrap();
        assert_eq!(vc.adjusted, 2.0);
        assert!(!vc.floored);
        let vc = adjusted_variance(4.0, vec![0.0], info.clone(), &tr).unwrap();
        assert_eq!(vc.adjusted, 4.0);
        let vc = adjusted_variance(1.0, vec![1.0], info, &tr).unwrap();
        assert!(vc.floored);
        assert_eq!(vc.adjusted, 1e-12);
        let singular = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(adjusted_variance(1.0, vec![1.0, 0.0], singular, &tr), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn interval_examples() {
        let (lo, hi): (f64, f64) = confidence_interval(5.0, 6.116, 512, 0.05).unwrap();
        let half = 1.959_963_984_540_054 * (6.116f64 / 512.0).sqrt();
        assert!((half - 0.214_213_5).abs() < 1e-7);
        assert!((hi - 5.0 - half).abs() < 1e-9);
        assert!((5.0 - lo - half).abs() < 1e-9);
        assert_eq!(confidence_interval(1.5, 0.0, 10, 0.05).unwrap(), (1.5, 1.5));
        let w1: (f64, f64) = confidence_interval(0.0, 2.0, 100, 0.1).unwrap();
        let w2: (f64, f64) = confidence_interval(0.0, 2.0, 400, 0.1).unwrap();
        assert!((w1.1 / w2.1 - 2.0).abs() < 1e-12);
        assert!(confidence_interval(0.0, -1.0, 10, 0.05).is_err());
        assert!(confidence_interval(0.0, 1.0, 10, 1.0).is_err());
    }

    #[test]
    fn default_windows() {
        let t: TuningRule<f64> = TuningRule::defaults(512, 256, 256);
        assert_eq!((t.m, t.q, t.l), (16, 8, 4));
        let t: TuningRule<f64> = TuningRule::defaults(2048, 1000, 1048);
        assert_eq!((t.m, t.q, t.l), (32, 13, 4));
        let t: TuningRule<f64> = TuningRule::defaults(4, 2, 2);
        assert_eq!((t.q, t.l), (2, 2));
        assert!(TuningRule { m: 1, q: 1, l: 2, alpha: 0.05 }.validate().is_err());
    }
}
