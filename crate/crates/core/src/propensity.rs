//! Generalized-linear propensity model `p(x; θ) = F(x'θ)` and its maximum
//! likelihood fit.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::{CompensatedSum, Scalar};

/// Link function `F` with density `f = F'`.
pub trait LinkFunction<T: Scalar>: Sync {
    fn cdf(&self, t: T) -> T;
    fn density(&self, t: T) -> T;

    fn log_cdf(&self, t: T) -> T {
        self.cdf(t).ln()
    }

    /// `log(1 - F(t))`.
    fn log_sf(&self, t: T) -> T {
        (T::one() - self.cdf(t)).ln()
    }

    /// `f(t) / (F(t)(1 - F(t)))`, the factor multiplying `x (w - p)` in the score.
    fn score_factor(&self, t: T) -> T {
        let p = self.cdf(t);
        self.density(t) / (p * (T::one() - p))
    }

    /// `f(t)^2 / (F(t)(1 - F(t)))`, the Fisher information weight.
    fn info_weight(&self, t: T) -> T {
        let p = self.cdf(t);
        let f = self.density(t);
        f * f / (p * (T::one() - p))
    }
}

/// The logistic link `F(t) = 1 / (1 + e^{-t})`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logistic;

impl<T: Scalar> LinkFunction<T> for Logistic {
    fn cdf(&self, t: T) -> T {
        if t >= T::zero() {
            T::one() / (T::one() + (-t).exp())
        } else {
            let e = t.exp();
            e / (T::one() + e)
        }
    }

    fn density(&self, t: T) -> T {
        let e = (-t.abs()).exp();
        e / ((T::one() + e) * (T::one() + e))
    }

    fn log_cdf(&self, t: T) -> T {
        if t >= T::zero() {
            -(-t).exp().ln_1p()
        } else {
            t - t.exp().ln_1p()
        }
    }

    fn log_sf(&self, t: T) -> T {
        self.log_cdf(-t)
    }

    fn score_factor(&self, _t: T) -> T {
        T::one()
    }

    fn info_weight(&self, t: T) -> T {
        self.density(t)
    }
}

/// Newton iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions<T> {
    /// Convergence threshold on the max-norm of the log-likelihood gradient.
    pub tolerance: T,
    pub max_iterations: usize,
    /// Any coefficient exceeding this magnitude is treated as separation.
    pub divergence_bound: T,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self { tolerance: T::lit(1e-10), max_iterations: 100, divergence_bound: T::lit(30.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit<T> {
    pub theta_hat: Vec<T>,
    pub loglik: T,
    /// Average information `(1/N) Σ f²/(p(1-p)) x x'` at `theta_hat`.
    pub fisher_info: Matrix<T>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: T,
}

impl<T: Scalar> PropensityFit<T> {
    pub fn to_kv_lines(&self) -> String {
        let theta: Vec<String> = self.theta_hat.iter().map(|v| format!("{v}")).collect();
        format!(
            "theta_hat = [{}]\nloglik = {}\nconverged = {}\niterations = {}\ngradient_max_norm = {:e}\n",
            theta.join(", "),
            self.loglik,
            self.converged,
            self.iterations,
            self.gradient_max_norm.as_f64()
        )
    }
}

/// A propensity model with a fixed link.
#[derive(Debug, Clone, Copy, Default)]
pub struct PropensityModel<L> {
    pub link: L,
}

impl PropensityModel<Logistic> {
    pub fn logistic() -> Self {
        Self { link: Logistic }
    }
}

fn check_theta<T: Scalar>(ds: &Dataset<T>, theta: &[T]) -> Result<()> {
    if theta.len() != ds.k() {
        return Err(Error::Shape(format!("theta has length {}, expected k = {}", theta.len(), ds.k())));
    }
    Ok(())
}

impl<L> PropensityModel<L> {
    pub fn log_likelihood<T: Scalar>(&self, ds: &Dataset<T>, theta: &[T]) -> Result<T>
    where
        L: LinkFunction<T>,
    {
        check_theta(ds, theta)?;
        let mut acc = CompensatedSum::new();
        for (i, &w) in ds.w().iter().enumerate() {
            let t = dot(ds.x(i), theta);
            acc.add(if w { self.link.log_cdf(t) } else { self.link.log_sf(t) });
        }
        Ok(acc.total())
    }

    /// Gradient of [`Self::log_likelihood`] (not normalized by N).
    pub fn score_gradient<T: Scalar>(&self, ds: &Dataset<T>, theta: &[T]) -> Result<Vec<T>>
    where
        L: LinkFunction<T>,
    {
        check_theta(ds, theta)?;
        let k = ds.k();
        let mut acc = vec![CompensatedSum::new(); k];
        for (i, &w) in ds.w().iter().enumerate() {
            let xi = ds.x(i);
            let t = dot(xi, theta);
            let resid = if w { T::one() } else { T::zero() } - self.link.cdf(t);
            let r = resid * self.link.score_factor(t);
            for (a, &xv) in acc.iter_mut().zip(xi) {
                a.add(xv * r);
            }
        }
        Ok(acc.iter().map(CompensatedSum::total).collect())
    }

    pub fn fisher_information<T: Scalar>(&self, ds: &Dataset<T>, theta: &[T]) -> Result<Matrix<T>>
    where
        L: LinkFunction<T>,
    {
        check_theta(ds, theta)?;
        let mut info = Matrix::zeros(ds.k(), ds.k());
        for i in 0..ds.n() {
            let xi = ds.x(i);
            info.add_outer(xi, self.link.info_weight(dot(xi, theta)));
        }
        info.scale(T::one() / T::from_count(ds.n()));
        Ok(info)
    }

    pub fn propensity_scores<T: Scalar>(&self, ds: &Dataset<T>, theta: &[T]) -> Result<Vec<T>>
    where
        L: LinkFunction<T>,
    {
        check_theta(ds, theta)?;
        Ok((0..ds.n()).map(|i| self.link.cdf(dot(ds.x(i), theta))).collect())
    }

    /// Newton's method from θ = 0 with step halving. The step uses the
    /// expected information, which is the exact Hessian for the logistic link.
    pub fn fit<T: Scalar>(&self, ds: &Dataset<T>, opts: &FitOptions<T>) -> Result<PropensityFit<T>>
    where
        L: LinkFunction<T>,
    {
        let k = ds.k();
        if ds.n() < k + 1 {
            return Err(Error::Shape(format!("need n >= k + 1 = {}, got n = {}", k + 1, ds.n())));
        }
        let n = T::from_count(ds.n());
        let mut theta = vec![T::zero(); k];
        let mut loglik = self.log_likelihood(ds, &theta)?;
        let mut grad = self.score_gradient(ds, &theta)?;
        let mut iterations = 0;
        let max_norm = |g: &[T]| g.iter().fold(T::zero(), |m, v| m.max(v.abs()));

        while iterations < opts.max_iterations {
            let mut hess = self.fisher_information(ds, &theta)?;
            hess.scale(n);
            let step = hess.solve(&grad)?;
            // A small gradient alone is not enough: under separation the
            // gradient vanishes while Newton steps stay of order one.
            let step_floor = T::lit(1e-8) * (T::one() + max_norm(&theta));
            if max_norm(&grad) < opts.tolerance && max_norm(&step) <= step_floor {
                break;
            }
            iterations += 1;

            let mut scale = T::one();
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<T> = theta.iter().zip(&step).map(|(&t, &s)| t + scale * s).collect();
                let ll = self.log_likelihood(ds, &cand)?;
                if ll >= loglik {
                    accepted = Some((cand, ll));
                    break;
                }
                scale *= T::lit(0.5);
            }
            let Some((cand, ll)) = accepted else {
                // No ascent direction left at working precision.
                break;
            };
            if max_norm(&cand) > opts.divergence_bound {
                return Err(Error::Separation(format!(
                    "coefficients exceed {} after {iterations} iterations; treatment is perfectly predicted by the covariates",
                    opts.divergence_bound
                )));
            }
            let stalled = cand == theta;
            theta = cand;
            loglik = ll;
            grad = self.score_gradient(ds, &theta)?;
            if stalled {
                break;
            }
        }

        let gradient_max_norm = max_norm(&grad);
        Ok(PropensityFit {
            fisher_info: self.fisher_information(ds, &theta)?,
            theta_hat: theta,
            loglik,
            converged: gradient_max_norm < opts.tolerance,
            iterations,
            gradient_max_norm,
        })
    }
}

pub fn log_likelihood<T: Scalar>(ds: &Dataset<T>, theta: &[T]) -> Result<T> {
    PropensityModel::logistic().log_likelihood(ds, theta)
}

pub fn score_gradient<T: Scalar>(ds: &Dataset<T>, theta: &[T]) -> Result<Vec<T>> {
    PropensityModel::logistic().score_gradient(ds, theta)
}

pub fn fisher_information<T: Scalar>(ds: &Dataset<T>, theta: &[T]) -> Result<Matrix<T>> {
    PropensityModel::logistic().fisher_information(ds, theta)
}

pub fn fit_mle<T: Scalar>(ds: &Dataset<T>, opts: &FitOptions<T>) -> Result<PropensityFit<T>> {
    PropensityModel::logistic().fit(ds, opts)
}

pub fn propensity_scores<T: Scalar>(ds: &Dataset<T>, theta: &[T]) -> Result<Vec<T>> {
    PropensityModel::logistic().propensity_scores(ds, theta)
}

/// Rounds each coefficient to the lattice `(d/√n) ℤ`, ties away from zero.
///
/// A fractional part within two ulps of one half counts as a tie so that
/// decimal inputs such as 0.235 on a 0.01 lattice resolve upward.
pub fn discretize<T: Scalar>(theta_hat: &[T], d: T, n: usize) -> Result<Vec<T>> {
    if d.is_nan() || d <= T::zero() || n == 0 {
        return Err(Error::Domain(format!("discretize needs d > 0 and n >= 1 (d = {d}, n = {n})")));
    }
    let spacing = d / T::from_count(n).sqrt();
    Ok(theta_hat
        .iter()
        .map(|&t| {
            let r = t / spacing;
            let base = r.abs().floor();
            let frac = r.abs() - base;
            let half = T::lit(0.5);
            let tie_window = T::lit(2.0) * T::epsilon() * r.abs().max(T::one());
            let mag = if (frac - half).abs() <= tie_window || frac > half { base + T::one() } else { base };
            spacing * mag.copysign(r)
        })
        .collect())
}
