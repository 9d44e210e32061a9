//! The generalized Elfving set: generators, the maximal-scaling LP and design extraction.
//!
//! A generator is `g = Σ_ℓ ε_ℓ f_ℓ(x)` with `‖ε‖ = 1`. The largest `γ` with `γc` in the
//! convex hull of all generators gives the optimal criterion value `1/γ²`, and the
//! active generators give the optimal design.

mod generators;
mod plot;
pub mod simplex;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::design::{Design, DesignError, TargetVector};
use crate::model::ModelError;

pub use generators::{epsilon_set, generator_grid, Generator, GeneratorSet};
pub use plot::{plot_boundary, PlotData, PlotKind, PlotRow};
pub use simplex::LpError;

/// Minimum LP weight for a generator to count as active.
pub const ACTIVE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElfvingError {
    #[error("grid needs n_x >= 2 and an even n_eps >= 2 (got n_x = {n_x}, n_eps = {n_eps})")]
    Grid { n_x: usize, n_eps: usize },
    #[error("no generator could be evaluated")]
    NoGenerators,
    #[error("target not estimable on this grid (every generator is orthogonal to it)")]
    NotEstimable,
    #[error("epsilon grid too coarse: conflicting directions at x = {x} (mean norm {norm:.3})")]
    ConflictingEpsilon { x: f64, norm: f64 },
    #[error("plot needs 2 or 3 distinct axes within 1..={p}")]
    Axes { p: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A boundary point `γc = Σ λ_i g_i` together with the supporting hyperplane `d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElfvingRepresentation {
    pub gamma: f64,
    pub active: Vec<(Generator, f64)>,
    pub dual: Vec<f64>,
}

impl ElfvingRepresentation {
    pub fn dual_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.dual)
    }
}

/// Largest `γ` with `γc` in the convex hull of `gens`.
pub fn max_scaling_lp(
    gens: &[Generator],
    c: &TargetVector,
) -> Result<ElfvingRepresentation, ElfvingError> {
    if gens.is_empty() {
        return Err(ElfvingError::NoGenerators);
    }
    let p = c.len();
    for g in gens {
        c.check_dim(g.g.len())?;
    }
    let n = gens.len();
    let cv = c.as_vector();
    let mut a = DMatrix::zeros(p + 1, n + 1);
    for (j, g) in gens.iter().enumerate() {
        for i in 0..p {
            a[(i, j)] = g.g[i];
        }
        a[(p, j)] = 1.0;
    }
    for i in 0..p {
        a[(i, n)] = -cv[i];
    }
    let mut b = vec![0.0; p + 1];
    b[p] = 1.0;
    let mut obj = vec![0.0; n + 1];
    obj[n] = 1.0;

    let sol = simplex::solve(&a, &b, &obj)?;
    let gamma = sol.x[n];
    let scale = gens.iter().map(|g| g.g.amax()).fold(0.0, f64::max) / cv.amax();
    if !(gamma > 1e-10 * scale.max(1.0)) {
        return Err(ElfvingError::NotEstimable);
    }
    let mut active: Vec<(Generator, f64)> = sol.x[..n]
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > ACTIVE_TOL)
        .map(|(j, &l)| (gens[j].clone(), l))
        .collect();
    let total: f64 = active.iter().map(|(_, l)| l).sum();
    active.iter_mut().for_each(|(_, l)| *l /= total);

    let mut d = DVector::from_fn(p, |i, _| -sol.duals[i] / gamma);
    let cd = cv.dot(&d);
    if cd.abs() > 0.0 {
        d /= gamma * cd;
    }
    Ok(ElfvingRepresentation {
        gamma,
        active,
        dual: d.iter().copied().collect(),
    })
}

/// A design read off a boundary representation, with the unit `ε` at each support point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractedDesign {
    pub design: Design,
    pub eps: Vec<Vec<f64>>,
}

/// Groups active generators by `x` within `merge_tol` into a design.
pub fn extract_design(
    rep: &ElfvingRepresentation,
    merge_tol: f64,
) -> Result<ExtractedDesign, ElfvingError> {
    let mut active = rep.active.clone();
    active.sort_by(|a, b| a.0.x.total_cmp(&b.0.x));
    struct Group {
        first: f64,
        last: f64,
        weight: f64,
        xsum: f64,
        eps: Vec<f64>,
    }
    let mut groups: Vec<Group> = Vec::new();
    for (g, l) in &active {
        match groups.last_mut() {
            Some(grp) if g.x - grp.first <= merge_tol => {
                grp.last = g.x;
                grp.weight += l;
                grp.xsum += l * g.x;
                grp.eps.iter_mut().zip(&g.eps).for_each(|(e, v)| *e += l * v);
            }
            _ => groups.push(Group {
                first: g.x,
                last: g.x,
                weight: *l,
                xsum: l * g.x,
                eps: g.eps.iter().map(|v| l * v).collect(),
            }),
        }
    }
    let mut points = Vec::with_capacity(groups.len());
    let mut weights = Vec::with_capacity(groups.len());
    let mut eps = Vec::with_capacity(groups.len());
    let total: f64 = groups.iter().map(|g| g.weight).sum();
    for grp in groups {
        let x = (grp.xsum / grp.weight).clamp(grp.first, grp.last);
        let norm = grp.eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm / grp.weight < 0.5 {
            return Err(ElfvingError::ConflictingEpsilon {
                x,
                norm: norm / grp.weight,
            });
        }
        points.push(x);
        weights.push(grp.weight / total);
        eps.push(grp.eps.iter().map(|v| v / norm).collect());
    }
    let design = Design::new(points, weights)?;
    Ok(ExtractedDesign { design, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{linear, mm41};

    fn raw(x: f64, g: &[f64]) -> Generator {
        Generator {
            x,
            eps: vec![1.0],
            g: DVector::from_column_slice(g),
        }
    }

    fn diamond() -> Vec<Generator> {
        vec![
            raw(0.0, &[1.0, 0.0]),
            raw(1.0, &[0.0, 1.0]),
            raw(2.0, &[-1.0, 0.0]),
            raw(3.0, &[0.0, -1.0]),
        ]
    }

    fn target(c: &[f64]) -> TargetVector {
        TargetVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn diamond_diagonal() {
        let rep = max_scaling_lp(&diamond(), &target(&[1.0, 1.0])).unwrap();
        assert!((rep.gamma - 0.5).abs() < 1e-12);
        assert_eq!(rep.active.len(), 2);
        for (_, l) in &rep.active {
            assert!((l - 0.5).abs() < 1e-12);
        }
        assert!((rep.dual[0] - 1.0).abs() < 1e-12);
        assert!((rep.dual[1] - 1.0).abs() < 1e-12);

        let ex = extract_design(&rep, 1e-6).unwrap();
        assert_eq!(ex.design.points(), &[0.0, 1.0]);
        assert_eq!(ex.design.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn diamond_axis() {
        let rep = max_scaling_lp(&diamond(), &target(&[1.0, 0.0])).unwrap();
        assert!((rep.gamma - 1.0).abs() < 1e-12);
        let ex = extract_design(&rep, 1e-6).unwrap();
        assert_eq!(ex.design.points(), &[0.0]);
        assert_eq!(ex.eps, vec![vec![1.0]]);
    }

    #[test]
    fn orthogonal_target_is_rejected() {
        let gens = vec![raw(0.0, &[1.0, 0.0]), raw(1.0, &[-1.0, 0.0])];
        assert_eq!(
            max_scaling_lp(&gens, &target(&[0.0, 1.0])),
            Err(ElfvingError::NotEstimable)
        );
    }

    #[test]
    fn representation_invariants_hold_for_mm41() {
        let m = mm41();
        let c = target(&[-0.425, 0.5, 0.0]);
        let set = generator_grid(&m, 201, 32, 0).unwrap();
        let rep = max_scaling_lp(&set.generators, &c).unwrap();
        let lsum: f64 = rep.active.iter().map(|(_, l)| l).sum();
        assert!((lsum - 1.0).abs() < 1e-9);
        let mut comb = DVector::zeros(3);
        for (g, l) in &rep.active {
            comb += &g.g * *l;
        }
        let resid = (comb - c.as_vector() * rep.gamma).norm();
        assert!(resid <= 1e-8 * c.as_vector().norm() * rep.gamma);
        let d = rep.dual_vector();
        assert!((rep.gamma * c.as_vector().dot(&d) - 1.0).abs() < 1e-8);
        for (g, _) in &rep.active {
            assert!((g.g.dot(&d) - 1.0).abs() < 1e-6);
        }
        for g in &set.generators {
            assert!(g.g.dot(&d) <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn gamma_is_symmetric_and_monotone() {
        let m = mm41();
        let c = target(&[-0.425, 0.5, 0.0]);
        let neg = target(&[0.425, -0.5, 0.0]);
        let coarse = generator_grid(&m, 11, 8, 0).unwrap();
        let fine = generator_grid(&m, 21, 16, 0).unwrap();
        let g1 = max_scaling_lp(&coarse.generators, &c).unwrap().gamma;
        let g2 = max_scaling_lp(&coarse.generators, &neg).unwrap().gamma;
        let g3 = max_scaling_lp(&fine.generators, &c).unwrap().gamma;
        assert!((g1 - g2).abs() < 1e-10 * g1);
        assert!(g3 >= g1 * (1.0 - 1e-10));
    }

    #[test]
    fn linear_slope_is_classical() {
        // c = (0, 1) on [-1, 1]: γ = 1, design {-1: 1/2, 1: 1/2}
        let m = linear();
        let set = generator_grid(&m, 201, 2, 0).unwrap();
        let rep = max_scaling_lp(&set.generators, &target(&[0.0, 1.0])).unwrap();
        assert!((rep.gamma - 1.0).abs() < 1e-12);
        let ex = extract_design(&rep, 1e-6).unwrap();
        assert_eq!(ex.design.points(), &[-1.0, 1.0]);
        assert!((ex.design.weights()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conflicting_directions_are_reported() {
        let rep = ElfvingRepresentation {
            gamma: 1.0,
            active: vec![
                (
                    Generator {
                        x: 0.0,
                        eps: vec![1.0, 0.0],
                        g: DVector::zeros(2),
                    },
                    0.5,
                ),
                (
                    Generator {
                        x: 0.0,
                        eps: vec![-1.0, 0.0],
                        g: DVector::zeros(2),
                    },
                    0.5,
                ),
            ],
            dual: vec![0.0, 0.0],
        };
        assert!(matches!(
            extract_design(&rep, 1e-6),
            Err(ElfvingError::ConflictingEpsilon { .. })
        ));
    }
}
