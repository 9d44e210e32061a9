use std::f64::consts::PI;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::ElfvingError;
use crate::model::{ModelError, ModelSpec};

/// A point `Σ_ℓ ε_ℓ f_ℓ(x)` of the generalized Elfving set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generator {
    pub x: f64,
    pub eps: Vec<f64>,
    #[serde(serialize_with = "crate::serialize_dvector")]
    pub g: DVector<f64>,
}

impl Generator {
    pub fn new(model: &ModelSpec, x: f64, eps: Vec<f64>) -> Result<Self, ModelError> {
        let f = model.contributions(x)?;
        Ok(Self::from_contributions(x, eps, &f))
    }

    fn from_contributions(x: f64, eps: Vec<f64>, f: &[DVector<f64>]) -> Self {
        let mut g = DVector::zeros(f[0].len());
        for (e, fl) in eps.iter().zip(f) {
            g.axpy(*e, fl, 1.0);
        }
        Generator { x, eps, g }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSet {
    pub generators: Vec<Generator>,
    /// Grid points whose contributions could not be evaluated.
    pub skipped: usize,
}

/// Unit vectors in `ℝ^k` closed under negation.
///
/// `k = 1` gives `±1`, `k = 2` gives `n_eps` equally spaced angles and `k ≥ 3` gives a
/// Halton point set pushed onto the sphere, offset by `seed`.
pub fn epsilon_set(k: usize, n_eps: usize, seed: u64) -> Vec<Vec<f64>> {
    let half: Vec<Vec<f64>> = match k {
        1 => vec![vec![1.0]],
        2 => (0..n_eps / 2)
            .map(|j| {
                let phi = 2.0 * PI * j as f64 / n_eps as f64;
                vec![snap(phi.cos()), snap(phi.sin())]
            })
            .collect(),
        _ => {
            let primes = first_primes(k);
            (0..n_eps / 2)
                .map(|j| {
                    let idx = j as u64 + 1 + seed;
                    let v: Vec<f64> = (0..k)
                        .map(|dim| gaussian_quantile(halton(idx, primes[dim])))
                        .collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.into_iter().map(|a| a / norm).collect()
                })
                .collect()
        }
    };
    let mut all = half.clone();
    all.extend(half.into_iter().map(|v| v.into_iter().map(|a| -a).collect()));
    all
}

/// Generators on a uniform `n_x` grid over the design space.
pub fn generator_grid(
    model: &ModelSpec,
    n_x: usize,
    n_eps: usize,
    seed: u64,
) -> Result<GeneratorSet, ElfvingError> {
    let k = model.k();
    if n_x < 2 || (k > 1 && (n_eps < 2 || n_eps % 2 == 1)) {
        return Err(ElfvingError::Grid { n_x, n_eps });
    }
    let eps = epsilon_set(k, n_eps, seed);
    let per_x: Vec<Option<Vec<Generator>>> = model
        .grid(n_x)
        .into_par_iter()
        .map(|x| {
            let f = model.contributions(x).ok()?;
            Some(
                eps.iter()
                    .map(|e| Generator::from_contributions(x, e.clone(), &f))
                    .collect(),
            )
        })
        .collect();
    let skipped = per_x.iter().filter(|g| g.is_none()).count();
    let generators: Vec<Generator> = per_x.into_iter().flatten().flatten().collect();
    if generators.is_empty() {
        return Err(ElfvingError::NoGenerators);
    }
    Ok(GeneratorSet {
        generators,
        skipped,
    })
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-15 {
        0.0
    } else {
        v
    }
}

fn first_primes(k: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(k);
    let mut n = 2u64;
    while primes.len() < k {
        if primes.iter().all(|p| n % p != 0) {
            primes.push(n);
        }
        n += 1;
    }
    primes
}

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Inverse standard normal CDF (Acklam's rational approximation).
fn gaussian_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}
