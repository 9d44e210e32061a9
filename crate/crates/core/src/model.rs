//! Model families whose per-point information is a sum of `k` rank-one terms.
//!
//! Every family reduces to a normal observation with mean `mu(x, theta)` and
//! variance `v(x, theta)`; the contribution vectors are then
//! `f1 = grad(mu) / sqrt(v)` and `f2 = grad(v) / (sqrt(2) v)`.
//! A link-function model may instead be collapsed to the single vector
//! `sqrt(1/l(mu) + (l'(mu)/l(mu))^2 / 2) * grad(mu)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{check_gradient, EvalError, Expression, GradCheckReport, ParseError};

const POSITIVITY_GRID: usize = 1001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{field}: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("model.theta0: expected {expected} entries, got {got}")]
    ThetaLength { expected: usize, got: usize },
    #[error("model.design_space: need finite a < b, got [{a}, {b}]")]
    DesignSpace { a: f64, b: f64 },
    #[error("model.omega: {0}")]
    Omega(String),
    #[error("model.sigma2: residual variance must be positive, got {0}")]
    Sigma2(f64),
    #[error("variance is not positive at x = {x} (value {value})")]
    NonPositiveVariance { x: f64, value: f64 },
    #[error("link value is not positive at mu = {mu} (value {value})")]
    NonPositiveLink { mu: f64, value: f64 },
    #[error("x = {x} lies outside the design space [{a}, {b}]")]
    OutsideDesignSpace { x: f64, a: f64, b: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Mean and variance of one observation together with their parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub mean_grad: DVector<f64>,
    pub var: f64,
    pub var_grad: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroscedasticModel {
    pub mean: Expression,
    pub variance: Expression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsModel {
    pub mean: Expression,
    pub omega: DMatrix<f64>,
    pub sigma2: f64,
}

impl RandomEffectsModel {
    /// First-order marginal variance `grad(f)' Omega grad(f) + sigma^2`.
    pub fn re_variance(&self, x: f64, theta: &[f64]) -> Result<f64, EvalError> {
        let j = self.mean.eval_jet(x, theta)?;
        Ok(j.grad.dot(&(&self.omega * &j.grad)) + self.sigma2)
    }

    fn moments(&self, x: f64, theta: &[f64]) -> Result<Moments, EvalError> {
        let j = self.mean.eval_jet(x, theta)?;
        let omega_grad = &self.omega * &j.grad;
        let var = j.grad.dot(&omega_grad) + self.sigma2;
        // d/dtheta_j of grad' Omega grad = 2 (d grad / dtheta_j)' Omega grad
        let var_grad = (&j.hess * &omega_grad) * 2.0;
        Ok(Moments {
            mean: j.value,
            mean_grad: j.grad,
            var,
            var_grad,
        })
    }
}

/// Variance as a known function of the mean.
#[derive(Debug, Clone, PartialEq)]
pub enum Link {
    /// `l(mu) = mu^q`
    Power { q: f64 },
    /// `l(mu) = exp(q mu)`
    Exponential { q: f64 },
    /// User supplied `l` and `l'` as expressions in `mu`.
    Custom {
        value: Expression,
        derivative: Expression,
    },
}

impl Link {
    /// Returns `(l(mu), l'(mu))`.
    pub fn eval(&self, mu: f64) -> Result<(f64, f64), EvalError> {
        match self {
            Link::Power { q } => {
                if *q == 0.0 {
                    Ok((1.0, 0.0))
                } else {
                    Ok((mu.powf(*q), q * mu.powf(q - 1.0)))
                }
            }
            Link::Exponential { q } => {
                let e = (q * mu).exp();
                Ok((e, q * e))
            }
            Link::Custom { value, derivative } => {
                Ok((value.eval(mu, &[])?, derivative.eval(mu, &[])?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkFunctionModel {
    pub mean: Expression,
    pub link: Link,
    pub reduced: bool,
}

impl LinkFunctionModel {
    /// Scalar factor of the reduced single contribution vector.
    pub fn link_weight(&self, x: f64, theta: &[f64]) -> Result<f64, ModelError> {
        let mu = self.mean.eval(x, theta)?;
        let (l, dl) = self.link.eval(mu)?;
        link_weight_from(mu, l, dl)
    }
}

fn link_weight_from(mu: f64, l: f64, dl: f64) -> Result<f64, ModelError> {
    if !(l > 0.0) {
        return Err(ModelError::NonPositiveLink { mu, value: l });
    }
    let r = dl / l;
    Ok((1.0 / l + 0.5 * r * r).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Heteroscedastic(HeteroscedasticModel),
    RandomEffects(RandomEffectsModel),
    Link(LinkFunctionModel),
}

/// A model with `p` parameters and `k` contribution vectors on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    p: usize,
    k: usize,
    design_space: (f64, f64),
    theta0: Vec<f64>,
    family: Family,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        theta0: Vec<f64>,
        design_space: (f64, f64),
    ) -> Result<Self, ModelError> {
        let (a, b) = design_space;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(ModelError::DesignSpace { a, b });
        }
        let p = match &family {
            Family::Heteroscedastic(h) => h.mean.param_count(),
            Family::RandomEffects(r) => r.mean.param_count(),
            Family::Link(l) => l.mean.param_count(),
        };
        if theta0.len() != p {
            return Err(ModelError::ThetaLength {
                expected: p,
                got: theta0.len(),
            });
        }
        let k = match &family {
            Family::Link(l) if l.reduced => 1,
            _ => 2,
        };
        if let Family::RandomEffects(r) = &family {
            check_omega(&r.omega, p)?;
            if !(r.sigma2 > 0.0) {
                return Err(ModelError::Sigma2(r.sigma2));
            }
        }
        let spec = ModelSpec {
            p,
            k,
            design_space,
            theta0,
            family,
        };
        spec.check_positivity()?;
        Ok(spec)
    }

    /// Heteroscedastic model from mean and variance expression strings.
    pub fn heteroscedastic(
        mean: &str,
        variance: &str,
        theta0: Vec<f64>,
        design_space: (f64, f64),
    ) -> Result<Self, ModelError> {
        let p = infer_p(&[mean, variance], &theta0);
        let family = Family::Heteroscedastic(HeteroscedasticModel {
            mean: parse_field(mean, p, "model.mean")?,
            variance: parse_field(variance, p, "model.variance")?,
        });
        Self::new(family, theta0, design_space)
    }

    pub fn random_effects(
        mean: &str,
        omega: DMatrix<f64>,
        sigma2: f64,
        theta0: Vec<f64>,
        design_space: (f64, f64),
    ) -> Result<Self, ModelError> {
        let p = infer_p(&[mean], &theta0);
        let family = Family::RandomEffects(RandomEffectsModel {
            mean: parse_field(mean, p, "model.mean")?,
            omega,
            sigma2,
        });
        Self::new(family, theta0, design_space)
    }

    pub fn link(
        mean: &str,
        link: Link,
        reduced: bool,
        theta0: Vec<f64>,
        design_space: (f64, f64),
    ) -> Result<Self, ModelError> {
        let p = infer_p(&[mean], &theta0);
        let family = Family::Link(LinkFunctionModel {
            mean: parse_field(mean, p, "model.mean")?,
            link,
            reduced,
        });
        Self::new(family, theta0, design_space)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn design_space(&self) -> (f64, f64) {
        self.design_space
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Same model anchored at a different nominal parameter.
    pub fn with_theta0(&self, theta0: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(self.family.clone(), theta0, self.design_space)
    }

    /// The link model solved through the other path (`k = 2` versus reduced `k = 1`).
    pub fn with_reduced(&self, reduced: bool) -> Option<Self> {
        match &self.family {
            Family::Link(l) => {
                let mut l = l.clone();
                l.reduced = reduced;
                Self::new(Family::Link(l), self.theta0.clone(), self.design_space).ok()
            }
            _ => None,
        }
    }

    /// Named parameter-dependent expressions of this model, for derivative checks.
    pub fn expressions(&self) -> Vec<(&'static str, &Expression)> {
        match &self.family {
            Family::Heteroscedastic(h) => vec![("mean", &h.mean), ("variance", &h.variance)],
            Family::RandomEffects(r) => vec![("mean", &r.mean)],
            Family::Link(l) => vec![("mean", &l.mean)],
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let (a, b) = self.design_space;
        x >= a && x <= b
    }

    /// Uniform grid of `n >= 2` points over the design space, endpoints included.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let (a, b) = self.design_space;
        let n = n.max(2);
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    b
                } else {
                    a + (b - a) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    pub fn moments(&self, x: f64, theta: &[f64]) -> Result<Moments, ModelError> {
        let m = match &self.family {
            Family::Heteroscedastic(h) => {
                let mu = h.mean.eval_jet(x, theta)?;
                let v = h.variance.eval_jet(x, theta)?;
                Moments {
                    mean: mu.value,
                    mean_grad: mu.grad,
                    var: v.value,
                    var_grad: v.grad,
                }
            }
            Family::RandomEffects(r) => r.moments(x, theta)?,
            Family::Link(l) => {
                let mu = l.mean.eval_jet(x, theta)?;
                let (lv, dl) = l.link.eval(mu.value)?;
                if !(lv > 0.0) {
                    return Err(ModelError::NonPositiveLink {
                        mu: mu.value,
                        value: lv,
                    });
                }
                Moments {
                    mean: mu.value,
                    var_grad: &mu.grad * dl,
                    mean_grad: mu.grad,
                    var: lv,
                }
            }
        };
        if !(m.var > 0.0) {
            return Err(ModelError::NonPositiveVariance { x, value: m.var });
        }
        Ok(m)
    }

    /// Contribution vectors at an arbitrary parameter value.
    pub fn contributions_at(&self, x: f64, theta: &[f64]) -> Result<Vec<DVector<f64>>, ModelError> {
        if let Family::Link(l) = &self.family {
            if l.reduced {
                let mu = l.mean.eval_jet(x, theta)?;
                let (lv, dl) = l.link.eval(mu.value)?;
                let w = link_weight_from(mu.value, lv, dl)?;
                return Ok(vec![mu.grad * w]);
            }
        }
        let m = self.moments(x, theta)?;
        let f1 = &m.mean_grad / m.var.sqrt();
        let f2 = &m.var_grad / (std::f64::consts::SQRT_2 * m.var);
        Ok(vec![f1, f2])
    }

    /// Contribution vectors `f_1(x), .., f_k(x)` at the nominal parameter.
    pub fn contributions(&self, x: f64) -> Result<Vec<DVector<f64>>, ModelError> {
        let (a, b) = self.design_space;
        if !self.contains(x) {
            return Err(ModelError::OutsideDesignSpace { x, a, b });
        }
        self.contributions_at(x, &self.theta0)
    }

    fn check_positivity(&self) -> Result<(), ModelError> {
        for x in self.grid(POSITIVITY_GRID) {
            match &self.family {
                Family::Link(l) => {
                    let mu = l.mean.eval(x, &self.theta0)?;
                    let (lv, _) = l.link.eval(mu)?;
                    if !(lv > 0.0) {
                        return Err(ModelError::NonPositiveLink { mu, value: lv });
                    }
                }
                _ => {
                    self.moments(x, &self.theta0)?;
                }
            }
        }
        Ok(())
    }
}

fn parse_field(text: &str, p: usize, field: &str) -> Result<Expression, ModelError> {
    Expression::parse(text, p).map_err(|source| ModelError::Parse {
        field: field.to_string(),
        source,
    })
}

/// Parameter count: the length of `theta0`, unless an expression uses a larger index,
/// in which case the mismatch is reported against `theta0`.
fn infer_p(texts: &[&str], theta0: &[f64]) -> usize {
    let used = texts
        .iter()
        .filter_map(|t| t.parse::<Expression>().ok())
        .map(|e| e.param_count())
        .max()
        .unwrap_or(0);
    used.max(theta0.len())
}

fn check_omega(omega: &DMatrix<f64>, p: usize) -> Result<(), ModelError> {
    if omega.nrows() != p || omega.ncols() != p {
        return Err(ModelError::Omega(format!(
            "expected a {p}x{p} matrix, got {}x{}",
            omega.nrows(),
            omega.ncols()
        )));
    }
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Omega("entries must be finite".into()));
    }
    let scale = omega.amax().max(f64::MIN_POSITIVE);
    if (omega - omega.transpose()).amax() > 1e-12 * scale {
        return Err(ModelError::Omega("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(omega.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(ModelError::Omega(format!(
            "matrix is not positive semidefinite (eigenvalue {min})"
        )));
    }
    Ok(())
}

/// Tolerances for forward-mode derivatives against central differences.
pub const GRAD_TOL: f64 = 1e-6;
pub const HESS_TOL: f64 = 1e-4;

/// Derivative agreement over random `(x, θ)` draws for every expression of a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGradCheck {
    pub samples: usize,
    /// Draws where some expression left its domain.
    pub skipped: usize,
    pub grad_rel_err: f64,
    pub hess_rel_err: f64,
    pub worst_expression: Option<String>,
    pub pass: bool,
}

/// Draws `x` uniformly on the design space and each `θ_i` within 20% of `θ₀_i`.
pub fn gradcheck_model(model: &ModelSpec, samples: usize, seed: u64, step: f64) -> ModelGradCheck {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = model.design_space();
    let mut worst = GradCheckReport {
        grad_rel_err: 0.0,
        hess_rel_err: 0.0,
    };
    let mut worst_expression = None;
    let mut skipped = 0;
    for _ in 0..samples {
        let x = rng.random_range(a..=b);
        let theta: Vec<f64> = model
            .theta0()
            .iter()
            .map(|t| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                if *t == 0.0 {
                    0.2 * u
                } else {
                    t * (1.0 + 0.2 * u)
                }
            })
            .collect();
        let reports: Result<Vec<_>, _> = model
            .expressions()
            .into_iter()
            .map(|(name, e)| check_gradient(e, x, &theta, step).map(|r| (name, r)))
            .collect();
        match reports {
            Ok(reports) => {
                for (name, r) in reports {
                    if r.grad_rel_err > worst.grad_rel_err || r.hess_rel_err > worst.hess_rel_err {
                        worst_expression = Some(name.to_string());
                    }
                    worst = worst.worst(r);
                }
            }
            Err(_) => skipped += 1,
        }
    }
    ModelGradCheck {
        samples,
        skipped,
        grad_rel_err: worst.grad_rel_err,
        hess_rel_err: worst.hess_rel_err,
        worst_expression,
        pass: skipped < samples && worst.grad_rel_err <= GRAD_TOL && worst.hess_rel_err <= HESS_TOL,
    }
}

/// Model description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Heteroscedastic {
        mean: String,
        variance: String,
        theta0: Vec<f64>,
        design_space: [f64; 2],
    },
    RandomEffects {
        mean: String,
        omega: Vec<Vec<f64>>,
        sigma2: f64,
        theta0: Vec<f64>,
        design_space: [f64; 2],
    },
    Link {
        mean: String,
        link: LinkConfig,
        #[serde(default)]
        reduced: bool,
        theta0: Vec<f64>,
        design_space: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinkConfig {
    Power { q: f64 },
    Exponential { q: f64 },
    Custom { value: String, derivative: String },
}

impl ModelConfig {
    pub fn theta0(&self) -> &[f64] {
        match self {
            ModelConfig::Heteroscedastic { theta0, .. }
            | ModelConfig::RandomEffects { theta0, .. }
            | ModelConfig::Link { theta0, .. } => theta0,
        }
    }
}

/// Builds a [`ModelSpec`] from its configuration block.
pub fn build_model(config: &ModelConfig) -> Result<ModelSpec, ModelError> {
    match config {
        ModelConfig::Heteroscedastic {
            mean,
            variance,
            theta0,
            design_space,
        } => ModelSpec::heteroscedastic(
            mean,
            variance,
            theta0.clone(),
            (design_space[0], design_space[1]),
        ),
        ModelConfig::RandomEffects {
            mean,
            omega,
            sigma2,
            theta0,
            design_space,
        } => {
            let n = omega.len();
            if omega.iter().any(|row| row.len() != n) {
                return Err(ModelError::Omega("rows must all have the same length".into()));
            }
            let m = DMatrix::from_fn(n, n, |i, j| omega[i][j]);
            ModelSpec::random_effects(
                mean,
                m,
                *sigma2,
                theta0.clone(),
                (design_space[0], design_space[1]),
            )
        }
        ModelConfig::Link {
            mean,
            link,
            reduced,
            theta0,
            design_space,
        } => {
            let link = match link {
                LinkConfig::Power { q } => Link::Power { q: *q },
                LinkConfig::Exponential { q } => Link::Exponential { q: *q },
                LinkConfig::Custom { value, derivative } => Link::Custom {
                    value: Expression::parse_in(value, 0, "mu").map_err(|source| {
                        ModelError::Parse {
                            field: "model.link.value".into(),
                            source,
                        }
                    })?,
                    derivative: Expression::parse_in(derivative, 0, "mu").map_err(|source| {
                        ModelError::Parse {
                            field: "model.link.derivative".into(),
                            source,
                        }
                    })?,
                },
            };
            ModelSpec::link(
                mean,
                link,
                *reduced,
                theta0.clone(),
                (design_space[0], design_space[1]),
            )
        }
    }
}
