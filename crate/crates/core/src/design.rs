//! Approximate designs, information matrices and the c-criterion.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelSpec};

/// Default relative eigenvalue threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-10;
/// Relative residual below which a target counts as lying in the range.
pub const ESTIMABLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("design needs at least one support point")]
    Empty,
    #[error("points and weights differ in length ({points} vs {weights})")]
    LengthMismatch { points: usize, weights: usize },
    #[error("weight {index} is not strictly positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("support points must be finite and pairwise distinct ({0} repeats)")]
    DuplicatePoint(f64),
    #[error("target vector must be finite and nonzero")]
    ZeroTarget,
    #[error("target has length {got}, model has {expected} parameters")]
    TargetLength { expected: usize, got: usize },
    #[error("target is not estimable under this design (residual {residual:.3e})")]
    NotEstimable { residual: f64 },
    #[error("cannot apportion {m} support points to {n} runs")]
    TooFewRuns { n: usize, m: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A discrete probability measure on the design space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDesign")]
pub struct Design {
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawDesign> for Design {
    type Error = DesignError;

    fn try_from(raw: RawDesign) -> Result<Self, Self::Error> {
        Design::new(raw.points, raw.weights)
    }
}

impl Design {
    /// Builds a design; support is sorted and weights renormalised.
    ///
    /// Weights must be positive and sum to one within `1e-9`.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self, DesignError> {
        if points.len() != weights.len() {
            return Err(DesignError::LengthMismatch {
                points: points.len(),
                weights: weights.len(),
            });
        }
        if points.is_empty() {
            return Err(DesignError::Empty);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DesignError::NonPositiveWeight { index, value });
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DesignError::WeightSum(total));
        }
        let mut pairs: Vec<(f64, f64)> = points.into_iter().zip(weights).collect();
        if let Some((x, _)) = pairs.iter().find(|(x, _)| !x.is_finite()) {
            return Err(DesignError::DuplicatePoint(*x));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(DesignError::DuplicatePoint(w[0].0));
        }
        let (points, mut weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Design { points, weights })
    }

    /// Merges support points closer than `tol`, placing each cluster at its weighted mean.
    pub fn merged(&self, tol: f64) -> Design {
        let mut points: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        let mut first: Vec<f64> = Vec::new();
        for (&x, &w) in self.points.iter().zip(&self.weights) {
            match first.last() {
                Some(&x0) if x - x0 <= tol => {
                    let i = weights.len() - 1;
                    weights[i] += w;
                    sums[i] += w * x;
                    points[i] = (sums[i] / weights[i]).clamp(x0, x);
                }
                _ => {
                    first.push(x);
                    points.push(x);
                    weights.push(w);
                    sums.push(w * x);
                }
            }
        }
        Design { points, weights }
    }

    pub fn one_point(x: f64) -> Design {
        Design {
            points: vec![x],
            weights: vec![1.0],
        }
    }

    /// Equal weights on `m` equispaced points of `[a, b]`.
    pub fn uniform(a: f64, b: f64, m: usize) -> Design {
        if m == 1 {
            return Design::one_point(0.5 * (a + b));
        }
        let points = (0..m)
            .map(|i| a + (b - a) * i as f64 / (m - 1) as f64)
            .collect();
        Design {
            points,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(1 - alpha) * self + alpha * other`.
    pub fn mix(&self, other: &Design, alpha: f64) -> Design {
        let mut pairs: Vec<(f64, f64)> = self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (x, (1.0 - alpha) * w))
            .chain(
                other
                    .points
                    .iter()
                    .zip(&other.weights)
                    .map(|(&x, &w)| (x, alpha * w)),
            )
            .filter(|(_, w)| *w > 0.0)
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut points: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (x, w) in pairs {
            if points.last() == Some(&x) {
                *weights.last_mut().unwrap() += w;
            } else {
                points.push(x);
                weights.push(w);
            }
        }
        Design { points, weights }
    }

    /// Internal constructor for already validated, sorted data.
    pub(crate) fn from_parts_unchecked(points: Vec<f64>, weights: Vec<f64>) -> Design {
        Design { points, weights }
    }
}

/// Nonzero vector `c` defining the linear combination of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector(DVector<f64>);

impl TargetVector {
    pub fn new(c: Vec<f64>) -> Result<Self, DesignError> {
        let v = DVector::from_vec(c);
        if v.iter().any(|c| !c.is_finite()) || v.norm() == 0.0 {
            return Err(DesignError::ZeroTarget);
        }
        Ok(TargetVector(v))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_dim(&self, p: usize) -> Result<(), DesignError> {
        if self.0.len() != p {
            return Err(DesignError::TargetLength {
                expected: p,
                got: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Symmetric positive semidefinite information matrix with a cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct InfoMatrix {
    m: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    tol: f64,
}

impl InfoMatrix {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self::with_tol(m, RANK_TOL)
    }

    pub fn with_tol(m: DMatrix<f64>, tol: f64) -> Self {
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m.clone());
        InfoMatrix {
            m,
            eigvals: eig.eigenvalues,
            eigvecs: eig.eigenvectors,
            tol,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    fn cutoff(&self) -> f64 {
        let lmax = self.eigvals.iter().fold(0.0f64, |m, v| m.max(*v));
        self.tol * lmax
    }

    pub fn rank(&self) -> usize {
        let cut = self.cutoff();
        self.eigvals.iter().filter(|&&v| v > cut && v > 0.0).count()
    }

    /// Moore-Penrose inverse, dropping eigenvalues at or below `tol * lambda_max`.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let p = self.m.nrows();
        let cut = self.cutoff();
        let mut out = DMatrix::zeros(p, p);
        for (i, &lam) in self.eigvals.iter().enumerate() {
            if lam > cut && lam > 0.0 {
                let v = self.eigvecs.column(i);
                out += (v * v.transpose()) / lam;
            }
        }
        out
    }

    /// Orthogonal projector onto the range.
    pub fn range_projector(&self) -> DMatrix<f64> {
        let p = self.m.nrows();
        let cut = self.cutoff();
        let mut out = DMatrix::zeros(p, p);
        for (i, &lam) in self.eigvals.iter().enumerate() {
            if lam > cut && lam > 0.0 {
                let v = self.eigvecs.column(i);
                out += v * v.transpose();
            }
        }
        out
    }

    /// Relative residual `|(I - M M^+) c| / |c|`.
    pub fn range_residual(&self, c: &DVector<f64>) -> f64 {
        let r = c - self.range_projector() * c;
        r.norm() / c.norm()
    }

    pub fn estimable(&self, c: &TargetVector) -> bool {
        self.range_residual(c.as_vector()) <= ESTIMABLE_TOL
    }

    /// `c' M^+ c`, or an error when `c` is outside the range.
    pub fn criterion(&self, c: &TargetVector) -> Result<f64, DesignError> {
        let residual = self.range_residual(c.as_vector());
        if residual > ESTIMABLE_TOL {
            return Err(DesignError::NotEstimable { residual });
        }
        let c = c.as_vector();
        Ok(c.dot(&(self.pseudo_inverse() * c)))
    }
}

/// Per-point information `sum_l f_l f_l'` at the nominal parameter.
pub fn information_at(model: &ModelSpec, x: f64) -> Result<DMatrix<f64>, ModelError> {
    let p = model.p();
    let mut out = DMatrix::zeros(p, p);
    for f in model.contributions(x)? {
        out += &f * f.transpose();
    }
    Ok(out)
}

pub fn information_matrix(model: &ModelSpec, design: &Design) -> Result<InfoMatrix, ModelError> {
    let p = model.p();
    let mut m = DMatrix::zeros(p, p);
    for (&x, &w) in design.points().iter().zip(design.weights()) {
        m += information_at(model, x)? * w;
    }
    Ok(InfoMatrix::new(m))
}

pub fn pseudo_inverse(m: &InfoMatrix) -> (DMatrix<f64>, usize) {
    (m.pseudo_inverse(), m.rank())
}

pub fn estimable(c: &TargetVector, m: &InfoMatrix) -> bool {
    m.estimable(c)
}

/// The c-criterion `c' M^+(xi) c`.
pub fn criterion(model: &ModelSpec, design: &Design, c: &TargetVector) -> Result<f64, DesignError> {
    c.check_dim(model.p())?;
    information_matrix(model, design)?.criterion(c)
}

/// Rounds design weights to integer replications summing to `n`.
///
/// Starts from `ceil((n - m/2) w_j)`, then repeatedly increments the index with the
/// smallest `r_j / w_j` or decrements the one with the largest `(r_j - 1) / w_j`.
pub fn apportion(weights: &[f64], n: usize) -> Result<Vec<usize>, DesignError> {
    let m = weights.len();
    if m == 0 {
        return Err(DesignError::Empty);
    }
    if n < m {
        return Err(DesignError::TooFewRuns { n, m });
    }
    let scale = n as f64 - 0.5 * m as f64;
    let mut r: Vec<usize> = weights
        .iter()
        .map(|w| ((scale * w).ceil() as usize).max(1))
        .collect();
    loop {
        let total: usize = r.iter().sum();
        if total == n {
            return Ok(r);
        }
        if total < n {
            let j = (0..m)
                .min_by(|&a, &b| (r[a] as f64 / weights[a]).total_cmp(&(r[b] as f64 / weights[b])))
                .unwrap();
            r[j] += 1;
        } else {
            let j = (0..m)
                .filter(|&j| r[j] > 1)
                .max_by(|&a, &b| {
                    ((r[a] - 1) as f64 / weights[a]).total_cmp(&((r[b] - 1) as f64 / weights[b]))
                })
                .unwrap();
            r[j] -= 1;
        }
    }
}
