//! The M-nearest-neighbor matching estimator of the average treatment effect.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::ScoreIndex;
use crate::scalar::{CompensatedSum, Scalar};

/// How a disagreement between the two algebraic forms of the estimator is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossCheck {
    Panic,
    Warn,
    Off,
}

impl Default for CrossCheck {
    fn default() -> Self {
        if cfg!(debug_assertions) {
            CrossCheck::Panic
        } else {
            CrossCheck::Warn
        }
    }
}

/// Point estimate together with the per-unit quantities the variance
/// estimator reuses.
#[derive(Debug, Clone)]
pub struct MatchFit<T> {
    pub m: usize,
    pub tau_hat: T,
    /// Same estimate computed through the match counts `K`.
    pub tau_k_form: T,
    /// `(2W_i - 1)(Y_i - mean of Y over J_m(i))` per unit.
    pub unit_effects: Vec<T>,
    pub counts: Vec<usize>,
}

/// Matches every unit and evaluates both forms of the estimator.
pub fn match_fit<T: Scalar>(y: &[T], idx: &ScoreIndex<T>, m: usize, check: CrossCheck) -> Result<MatchFit<T>> {
    let n = idx.len();
    if y.len() != n {
        return Err(Error::Shape(format!("{} outcomes for {n} indexed units", y.len())));
    }
    let min_arm = idx.arm_size(false).min(idx.arm_size(true));
    if m == 0 || m > min_arm {
        return Err(Error::Bound(format!("m = {m} must lie in [1, min(n0, n1) = {min_arm}]")));
    }
    let inv_m = T::one() / T::from_count(m);
    let mut counts = vec![0usize; n];
    let mut unit_effects = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(m);
    let mut tau = CompensatedSum::<T>::new();
    for i in 0..n {
        idx.opposite_into(i, m, &mut buf)?;
        let mean = buf.iter().fold(T::zero(), |acc, &j| acc + y[j]) * inv_m;
        for &j in &buf {
            counts[j] += 1;
        }
        let e = sign::<T>(idx.treated()[i]) * (y[i] - mean);
        unit_effects.push(e);
        tau.add(e);
    }
    let n_t = T::from_count(n);
    let tau_hat = tau.total() / n_t;

    let mut k_form = CompensatedSum::<T>::new();
    for i in 0..n {
        let weight = T::one() + T::from_count(counts[i]) * inv_m;
        k_form.add(sign::<T>(idx.treated()[i]) * weight * y[i]);
    }
    let tau_k_form = k_form.total() / n_t;

    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(1e4)) * (T::one() + tau_hat.abs());
    if (tau_hat - tau_k_form).abs() > tol {
        let msg = format!("matching estimator forms disagree: J-form {tau_hat}, K-form {tau_k_form}");
        match check {
            CrossCheck::Panic => panic!("{msg}"),
            CrossCheck::Warn => log::warn!("{msg}"),
            CrossCheck::Off => {}
        }
    }
    Ok(MatchFit { m, tau_hat, tau_k_form, unit_effects, counts })
}

#[inline]
fn sign<T: Scalar>(treated: bool) -> T {
    if treated {
        T::one()
    } else {
        -T::one()
    }
}

/// `τ̂ = (1/N) Σ (2W_i - 1)(Y_i - (1/M) Σ_{j ∈ J_M(i)} Y_j)`.
pub fn ate_matching<T: Scalar>(ds: &Dataset<T>, scores: &[T], m: usize) -> Result<T> {
    let idx = ScoreIndex::build(scores, ds.w())?;
    Ok(match_fit(ds.y(), &idx, m, CrossCheck::default())?.tau_hat)
}

/// Largest power of two not exceeding `√n`, capped by the smaller arm.
pub fn default_m(n: usize, min_arm: usize) -> usize {
    let cap = ((n as f64).sqrt().floor() as usize).min(min_arm).max(1);
    1 << (usize::BITS - 1 - cap.leading_zeros())
}

/// Final report for one estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AteEstimate<T> {
    pub tau_hat: T,
    pub m: usize,
    /// Adjusted asymptotic variance of `√N (τ̂ - τ)`.
    pub variance: T,
    pub ci_low: T,
    pub ci_high: T,
    pub alpha: T,
    pub n: usize,
}

impl<T: Scalar> AteEstimate<T> {
    pub fn std_error(&self) -> T {
        (self.variance / T::from_count(self.n)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;

    fn t4() -> (Dataset<f64>, Vec<f64>) {
        let rows = [(1, 5.0, 0.62), (0, 1.0, 0.50), (1, 3.0, 0.40), (0, 2.0, 0.71)];
        let ds = Dataset::from_observations(
            rows.iter().map(|&(w, y, s)| Observation { x: vec![s], w: w == 1, y }).collect(),
        )
        .unwrap();
        (ds, rows.iter().map(|r| r.2).collect())
    }

    #[test]
    fn t4_estimates() {
        let (ds, s) = t4();
        assert!((ate_matching(&ds, &s, 1).unwrap() - 2.5).abs() < 1e-15);
        assert!((ate_matching(&ds, &s, 2).unwrap() - 2.5).abs() < 1e-15);
        assert!(matches!(ate_matching(&ds, &s, 3), Err(Error::Bound(_))));
    }

    #[test]
    fn constant_outcomes_give_zero() {
        let ds = Dataset::from_observations(
            [(1, 0.1), (0, 0.4), (1, 0.8), (0, 0.3), (0, 0.6)]
                .iter()
                .map(|&(w, x)| Observation { x: vec![x], w: w == 1, y: 3.5 })
                .collect(),
        )
        .unwrap();
        let s = [0.1, 0.4, 0.8, 0.3, 0.6];
        for m in 1..=2 {
            assert_eq!(ate_matching(&ds, &s, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn flipping_arms_negates() {
        let (ds, s) = t4();
        let flipped = Dataset::from_observations(
            ds.observations().map(|mut o| {
                o.w = !o.w;
                o
            })
            .collect(),
        )
        .unwrap();
        let s2: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        for m in 1..=2 {
            let a = ate_matching(&ds, &s, m).unwrap();
            let b = ate_matching(&flipped, &s2, m).unwrap();
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn forms_agree_and_counts_recorded() {
        let (ds, s) = t4();
        let idx = ScoreIndex::build(&s, ds.w()).unwrap();
        let fit = match_fit(ds.y(), &idx, 1, CrossCheck::Panic).unwrap();
        assert_eq!(fit.counts, vec![1, 1, 1, 1]);
        assert_eq!(fit.tau_hat, fit.tau_k_form);
        assert_eq!(fit.unit_effects, vec![3.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn default_m_is_top_of_grid() {
        assert_eq!(default_m(512, 256), 16);
        assert_eq!(default_m(1024, 500), 32);
        assert_eq!(default_m(8192, 4000), 64);
        assert_eq!(default_m(4, 2), 2);
        assert_eq!(default_m(100, 3), 2);
        assert_eq!(default_m(2, 1), 1);
    }

    #[test]
    fn single_precision_t4() {
        let ds: Dataset<f32> = Dataset::from_observations(
            [(1, 5.0, 0.62), (0, 1.0, 0.50), (1, 3.0, 0.40), (0, 2.0, 0.71)]
                .iter()
                .map(|&(w, y, s)| Observation { x: vec![s], w: w == 1, y })
                .collect(),
        )
        .unwrap();
        let s = [0.62f32, 0.50, 0.40, 0.71];
        assert!((ate_matching(&ds, &s, 1).unwrap() - 2.5).abs() < 1e-6);
    }
}
