//! Monte Carlo checks of designs against the asymptotic covariance `M⁻(ξ, θ)/N`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::design::{apportion, information_matrix, Design, DesignError, TargetVector};
use crate::model::{Family, ModelError, ModelSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("maximum likelihood fit did not converge from any start")]
    NoConvergence,
    #[error("covariance check needs at least 100 replications (got {0})")]
    TooFewReplications(usize),
    #[error("{failures} of {reps} fits failed (more than 2%)")]
    TooManyFailures { failures: usize, reps: usize },
}

/// Simulated responses grouped by support point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSet {
    pub points: Vec<f64>,
    pub replications: Vec<usize>,
    /// Responses for each support point, `replications[j]` of them.
    pub y: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub seed: u64,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.replications.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-replication generator: a counter-based stream of the master seed.
pub fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

/// Draws `N` responses at the apportioned design under the nominal parameter.
pub fn simulate_responses(
    model: &ModelSpec,
    design: &Design,
    n: usize,
    seed: u64,
) -> Result<DataSet, SimulateError> {
    let sampler = Sampler::new(model);
    let mut rng = replication_rng(seed, 0);
    let mut data = sampler.draw(model, design, n, &mut rng)?;
    data.seed = seed;
    Ok(data)
}

struct Sampler {
    /// Square root of `Ω` for the random-effects family.
    omega_root: Option<DMatrix<f64>>,
}

impl Sampler {
    fn new(model: &ModelSpec) -> Self {
        let omega_root = match model.family() {
            Family::RandomEffects(r) => {
                let eig = SymmetricEigen::new(r.omega.clone());
                let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                Some(&eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose())
            }
            _ => None,
        };
        Sampler { omega_root }
    }

    fn draw(
        &self,
        model: &ModelSpec,
        design: &Design,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<DataSet, SimulateError> {
        let reps = apportion(design.weights(), n)?;
        let theta = model.theta0();
        let mut y = Vec::with_capacity(reps.len());
        for (&x, &r) in design.points().iter().zip(&reps) {
            let mut ys = Vec::with_capacity(r);
            match (model.family(), &self.omega_root) {
                (Family::RandomEffects(re), Some(root)) => {
                    for _ in 0..r {
                        let z = DVector::from_fn(theta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                        let b = DVector::from_column_slice(theta) + root * z;
                        let mean = re.mean.eval(x, b.as_slice()).map_err(ModelError::from)?;
                        let e: f64 = rng.sample(StandardNormal);
                        ys.push(mean + re.sigma2.sqrt() * e);
                    }
                }
                _ => {
                    let mom = model.moments(x, theta)?;
                    let sd = mom.var.sqrt();
                    for _ in 0..r {
                        let e: f64 = rng.sample(StandardNormal);
                        ys.push(mom.mean + sd * e);
                    }
                }
            }
            y.push(ys);
        }
        Ok(DataSet {
            points: design.points().to_vec(),
            replications: reps,
            y,
            theta: theta.to_vec(),
            seed: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub neg_log_lik: f64,
    pub iterations: usize,
}

struct Likelihood<'a> {
    model: &'a ModelSpec,
    points: &'a [f64],
    /// `(n, Σy, Σy²)` per support point
    stats: Vec<(f64, f64, f64)>,
}

impl<'a> Likelihood<'a> {
    fn new(model: &'a ModelSpec, data: &'a DataSet) -> Self {
        let stats = data
            .y
            .iter()
            .map(|ys| {
                let s1: f64 = ys.iter().sum();
                let s2: f64 = ys.iter().map(|v| v * v).sum();
                (ys.len() as f64, s1, s2)
            })
            .collect();
        Likelihood {
            model,
            points: &data.points,
            stats,
        }
    }

    /// Negative log-likelihood and its gradient; `None` outside the model's domain.
    fn eval(&self, theta: &[f64]) -> Option<(f64, DVector<f64>)> {
        let mut f = 0.0;
        let mut g = DVector::zeros(theta.len());
        for (&x, &(n, s1, s2)) in self.points.iter().zip(&self.stats) {
            let m = self.model.moments(x, theta).ok()?;
            let (mu, v) = (m.mean, m.var);
            let q = s2 - 2.0 * mu * s1 + n * mu * mu;
            f += 0.5 * n * (2.0 * std::f64::consts::PI * v).ln() + q / (2.0 * v);
            g.axpy(-(s1 - n * mu) / v, &m.mean_grad, 1.0);
            g.axpy(n / (2.0 * v) - q / (2.0 * v * v), &m.var_grad, 1.0);
        }
        (f.is_finite() && g.iter().all(|v| v.is_finite())).then_some((f, g))
    }

    fn fisher(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let p = theta.len();
        let mut info = DMatrix::zeros(p, p);
        for (&x, &(n, _, _)) in self.points.iter().zip(&self.stats) {
            for fl in self.model.contributions_at(x, theta).ok()? {
                info.ger(n, &fl, &fl, 1.0);
            }
        }
        Some(info)
    }
}

/// Inverse of a symmetric positive semidefinite matrix with small eigenvalues lifted.
fn regularized_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.amax().max(1e-300);
    let inv = eig.eigenvalues.map(|v| 1.0 / v.max(1e-10 * top));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

fn quasi_newton(lik: &Likelihood, start: &[f64]) -> Option<FitResult> {
    let (mut f, mut g) = lik.eval(start)?;
    let mut x = DVector::from_column_slice(start);
    let mut h = regularized_inverse(&lik.fisher(start)?);
    for iter in 0..500 {
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = regularized_inverse(&lik.fisher(x.as_slice())?);
            dir = -(&h * &g);
            slope = g.dot(&dir);
            if !(slope < 0.0) {
                return None;
            }
        }
        // the Newton decrement approximates twice the remaining decrease in nats
        if -slope < 1e-10 {
            return Some(FitResult {
                theta: x.iter().copied().collect(),
                neg_log_lik: f,
                iterations: iter,
            });
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let trial = &x + &dir * t;
            if let Some((ft, gt)) = lik.eval(trial.as_slice()) {
                if ft <= f + 1e-4 * t * slope {
                    next = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let stalled = match &next {
            Some((_, ft, _)) => *ft >= f,
            None => true,
        };
        if stalled {
            // no further decrease is representable: accept when the decrement is small
            return (-slope < 1e-6).then(|| FitResult {
                theta: x.iter().copied().collect(),
                neg_log_lik: f,
                iterations: iter,
            });
        }
        let Some((xn, fn_, gn)) = next else {
            return None;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * ((sy + yhy) / (sy * sy))
                - (&hy * s.transpose() + &s * hy.transpose()) / sy;
        }
        x = xn;
        f = fn_;
        g = gn;
    }
    None
}

/// Maximum likelihood estimate by quasi-Newton descent from several starts.
pub fn fit_ml(
    model: &ModelSpec,
    data: &DataSet,
    theta_init: &[f64],
) -> Result<FitResult, SimulateError> {
    let lik = Likelihood::new(model, data);
    let p = theta_init.len();
    let starts = std::iter::once(theta_init.to_vec()).chain((0..4).map(|s| {
        (0..p)
            .map(|i| {
                let sign = if (s + i) % 2 == 0 { 1.0 } else { -1.0 };
                theta_init[i] * (1.0 + 0.1 * (s / 2 + 1) as f64 * sign)
            })
            .collect()
    }));
    let mut best: Option<FitResult> = None;
    for start in starts {
        if let Some(fit) = quasi_newton(&lik, &start) {
            let done = best.is_none();
            if best.as_ref().is_none_or(|b| fit.neg_log_lik < b.neg_log_lik) {
                best = Some(fit);
            }
            if done {
                break;
            }
        }
    }
    best.ok_or(SimulateError::NoConvergence)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceReport {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub failures: usize,
    pub mean_estimate: f64,
    pub empirical_var: f64,
    pub asymptotic_var: f64,
    pub ratio: f64,
    /// Fitted parameters per successful replication.
    #[serde(skip)]
    pub estimates: Vec<Vec<f64>>,
}

impl CovarianceReport {
    /// CSV of the fitted parameters, one row per successful replication.
    pub fn estimates_csv(&self) -> String {
        let p = self.estimates.first().map_or(0, Vec::len);
        let mut out = String::from("rep");
        for i in 1..=p {
            let _ = write!(out, ",t{i}");
        }
        out.push('\n');
        for (r, th) in self.estimates.iter().enumerate() {
            let _ = write!(out, "{r}");
            for v in th {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Compares the sample variance of `cᵀθ̂` over `reps` fits with `cᵀM⁺c/N`.
pub fn covariance_check(
    model: &ModelSpec,
    design: &Design,
    c: &TargetVector,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<CovarianceReport, SimulateError> {
    if reps < 100 {
        return Err(SimulateError::TooFewReplications(reps));
    }
    c.check_dim(model.p())?;
    let info = information_matrix(model, design)?;
    let asymptotic_var = info.criterion(c)? / n as f64;
    apportion(design.weights(), n)?;

    let sampler = Sampler::new(model);
    let fits: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, r as u64);
            let data = sampler.draw(model, design, n, &mut rng).ok()?;
            fit_ml(model, &data, model.theta0()).ok().map(|f| f.theta)
        })
        .collect();
    let estimates: Vec<Vec<f64>> = fits.into_iter().flatten().collect();
    let failures = reps - estimates.len();
    if failures * 50 > reps {
        return Err(SimulateError::TooManyFailures { failures, reps });
    }
    let values: Vec<f64> = estimates
        .iter()
        .map(|th| th.iter().zip(c.as_slice()).map(|(a, b)| a * b).sum())
        .collect();
    let k = values.len() as f64;
    let mean_estimate = values.iter().sum::<f64>() / k;
    let empirical_var = values.iter().map(|v| (v - mean_estimate).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(CovarianceReport {
        n,
        reps,
        seed,
        failures,
        mean_estimate,
        empirical_var,
        asymptotic_var,
        ratio: empirical_var / asymptotic_var,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{mm41, re42};

    #[test]
    fn responses_are_seed_deterministic() {
        let m = mm41();
        let d = Design::new(vec![1.1, 10.0], vec![0.967, 0.033]).unwrap();
        let a = simulate_responses(&m, &d, 50, 7).unwrap();
        let b = simulate_responses(&m, &d, 50, 7).unwrap();
        let c = simulate_responses(&m, &d, 50, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
        assert_eq!(a.len(), 50);
        assert_eq!(a.replications, vec![48, 2]);
    }

    #[test]
    fn sample_mean_matches_model_mean() {
        // mean 3·2/3.7 and variance exp(-0.2) at x = 2; 4 standard errors
        let m = mm41();
        let d = Design::one_point(2.0);
        let data = simulate_responses(&m, &d, 100_000, 1).unwrap();
        let mean: f64 = data.y[0].iter().sum::<f64>() / 100_000.0;
        let se = ((-0.2f64).exp() / 100_000.0).sqrt();
        assert!((mean - 6.0 / 3.7).abs() < 4.0 * se);
    }

    #[test]
    fn random_effects_draws_vary_with_subject() {
        // marginal variance is roughly the first-order value
        let m = re42();
        let d = Design::one_point(0.5);
        let data = simulate_responses(&m, &d, 20_000, 3).unwrap();
        let ys = &data.y[0];
        let mean: f64 = ys.iter().sum::<f64>() / ys.len() as f64;
        let var: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() as f64 - 1.0);
        let approx = m.moments(0.5, m.theta0()).unwrap().var;
        assert!((var / approx - 1.0).abs() < 0.2, "{var} vs {approx}");
    }

    #[test]
    fn noiseless_fit_recovers_theta() {
        let m = ModelSpec::heteroscedastic("t1*x/(t2+x)", "1e-12", vec![3.0, 1.7], (0.0, 10.0))
            .unwrap();
        let d = Design::new(vec![1.0, 10.0], vec![0.5, 0.5]).unwrap();
        let data = simulate_responses(&m, &d, 20, 5).unwrap();
        let fit = fit_ml(&m, &data, &[2.5, 2.0]).unwrap();
        assert!((fit.theta[0] - 3.0).abs() < 1e-6, "{:?}", fit);
        assert!((fit.theta[1] - 1.7).abs() < 1e-6, "{:?}", fit);
    }

    #[test]
    fn fit_beats_truth() {
        let m = mm41();
        let d = Design::new(vec![0.5, 1.1, 10.0], vec![0.3, 0.4, 0.3]).unwrap();
        for seed in 0..5 {
            let data = simulate_responses(&m, &d, 200, seed).unwrap();
            let fit = fit_ml(&m, &data, m.theta0()).unwrap();
            let lik = Likelihood::new(&m, &data);
            let at_truth = lik.eval(m.theta0()).unwrap().0;
            assert!(fit.neg_log_lik <= at_truth + 1e-9);
        }
    }

    #[test]
    fn asymptotic_variance_halves_when_n_doubles() {
        let m = mm41();
        let d = Design::new(vec![1.1, 10.0], vec![0.967, 0.033]).unwrap();
        let c = TargetVector::new(vec![-0.425, 0.5, 0.0]).unwrap();
        let a = covariance_check(&m, &d, &c, 100, 100, 1).unwrap();
        let b = covariance_check(&m, &d, &c, 200, 100, 1).unwrap();
        assert_eq!(a.asymptotic_var, 2.0 * b.asymptotic_var);
        assert!(covariance_check(&m, &d, &c, 100, 99, 1).is_err());
    }

    #[test]
    fn covariance_check_is_reproducible() {
        let m = mm41();
        let d = Design::new(vec![1.1, 10.0], vec![0.967, 0.033]).unwrap();
        let c = TargetVector::new(vec![-0.425, 0.5, 0.0]).unwrap();
        let a = covariance_check(&m, &d, &c, 100, 100, 9).unwrap();
        let b = covariance_check(&m, &d, &c, 100, 100, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures, 0);
    }
}
