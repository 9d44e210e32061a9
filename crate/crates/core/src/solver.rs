//! Locally c-optimal designs: grid LP, continuous refinement and certificate-driven cuts.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{information_matrix, Design, DesignError, TargetVector};
use crate::elfving::{
    extract_design, generator_grid, max_scaling_lp, ElfvingError, ElfvingRepresentation,
    Generator,
};
use crate::model::{ModelError, ModelSpec};
use crate::verify::{
    hyperplane_certificate, verify_design, OptimalityCertificate, Sensitivity, VerifyError,
    DEFAULT_GRID,
};

const PRUNE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Elfving(#[from] ElfvingError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("target preset: {0}")]
    Preset(String),
    #[error("invalid solver option: {0}")]
    Options(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub n_x: usize,
    pub n_eps: usize,
    pub max_rounds: usize,
    pub tol: f64,
    /// Distance below which active generators are grouped; defaults to 1.01 grid steps.
    pub merge_tol: Option<f64>,
    pub seed: u64,
    pub verify_grid: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            n_x: 401,
            n_eps: 64,
            max_rounds: 10,
            tol: 1e-4,
            merge_tol: None,
            seed: 0,
            verify_grid: DEFAULT_GRID,
        }
    }
}

impl SolveOptions {
    pub fn merge_tol_for(&self, model: &ModelSpec) -> f64 {
        let (a, b) = model.design_space();
        self.merge_tol
            .unwrap_or(1.01 * (b - a) / (self.n_x.max(2) - 1) as f64)
    }

    fn validate(&self) -> Result<(), SolveError> {
        if self.max_rounds == 0 {
            return Err(SolveError::Options("max_rounds must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SolveError::Options("tol must be positive".into()));
        }
        if matches!(self.merge_tol, Some(t) if !(t > 0.0)) {
            return Err(SolveError::Options("merge_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub design: Design,
    pub criterion_value: f64,
    /// Scaling from the final grid LP; `1/γ²` bounds every design's criterion from below.
    pub gamma: f64,
    pub certificate: OptimalityCertificate,
    pub representation: ElfvingRepresentation,
    pub rounds_used: usize,
    /// Whether the certificate passed within `max_rounds`.
    pub converged: bool,
}

/// Named targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    /// Minimum effective dose `x = Eθ₂/(θ₁ − E)` of an Emax-type mean.
    Med { e: f64 },
    /// Area under `θ₁ exp(−θ₂ x)`, that is `θ₁/θ₂`.
    Auc,
    /// Single parameter, 1-based.
    Single { index: usize },
    Linear { v: Vec<f64> },
}

impl Preset {
    /// The plug-in value of the estimated quantity where it has a closed form.
    pub fn estimand(&self, theta: &[f64]) -> Option<f64> {
        match self {
            Preset::Med { e } if theta.len() >= 2 => Some(e * theta[1] / (theta[0] - e)),
            Preset::Auc if theta.len() >= 2 => Some(theta[0] / theta[1]),
            Preset::Single { index } => theta.get(index.wrapping_sub(1)).copied(),
            Preset::Linear { v } if v.len() == theta.len() => {
                Some(v.iter().zip(theta).map(|(a, b)| a * b).sum())
            }
            _ => None,
        }
    }
}

/// The gradient of a preset's estimand at `θ₀`.
pub fn target_from_preset(model: &ModelSpec, preset: &Preset) -> Result<TargetVector, SolveError> {
    let theta = model.theta0();
    let p = theta.len();
    let mut c = vec![0.0; p];
    match preset {
        Preset::Med { e } => {
            if p < 2 {
                return Err(SolveError::Preset("med needs at least two parameters".into()));
            }
            let (t1, t2) = (theta[0], theta[1]);
            if !(*e > 0.0 && *e < t1) {
                return Err(SolveError::Preset(format!(
                    "med needs 0 < E < θ₁ (E = {e}, θ₁ = {t1})"
                )));
            }
            c[0] = -e * t2 / (t1 - e).powi(2);
            c[1] = e / (t1 - e);
        }
        Preset::Auc => {
            if p < 2 || theta[1] == 0.0 {
                return Err(SolveError::Preset("auc needs two parameters with θ₂ ≠ 0".into()));
            }
            c[0] = 1.0 / theta[1];
            c[1] = -theta[0] / theta[1].powi(2);
        }
        Preset::Single { index } => {
            if *index == 0 || *index > p {
                return Err(SolveError::Preset(format!("single index {index} outside 1..={p}")));
            }
            c[index - 1] = 1.0;
        }
        Preset::Linear { v } => {
            if v.len() != p {
                return Err(SolveError::Preset(format!(
                    "linear target has length {}, model has {p} parameters",
                    v.len()
                )));
            }
            c.clone_from(v);
        }
    }
    Ok(TargetVector::new(c)?)
}

/// Computes a locally c-optimal design.
pub fn solve(
    model: &ModelSpec,
    c: &TargetVector,
    opts: &SolveOptions,
) -> Result<SolveResult, SolveError> {
    opts.validate()?;
    c.check_dim(model.p())?;
    let merge_tol = opts.merge_tol_for(model);
    let mut gens = generator_grid(model, opts.n_x, opts.n_eps, opts.seed)?.generators;
    let grid = model.grid(opts.verify_grid);
    let mut best: Option<(Design, OptimalityCertificate, ElfvingRepresentation, usize)> = None;

    for round in 1..=opts.max_rounds {
        let rep = max_scaling_lp(&gens, c)?;
        let start = extract_design(&rep, merge_tol)?.design;
        let design = refine(model, &start, c, opts)?;

        let sens = Sensitivity::new(model, &design, c)?;
        let gamma = 1.0 / sens.criterion().sqrt();
        let d = sens.direction() * gamma;
        let check = hyperplane_certificate(model, &d, gamma, c, &grid, opts.tol)?;
        let cert = verify_design(model, &design, c, opts.verify_grid, opts.tol)?
            .with_hyperplane(check, gamma);

        // cuts: optimal generators at the support and at the worst violator
        let mut cut_x: Vec<f64> = design.points().to_vec();
        if !cert.pass {
            cut_x.push(cert.argmax_x);
        }
        for x in cut_x {
            gens.extend(best_generators(model, &d, x)?);
        }

        let better = best
            .as_ref()
            .is_none_or(|(_, b, _, _)| cert.criterion < b.criterion);
        let passed = cert.pass;
        if better || passed {
            best = Some((design, cert, rep, round));
        }
        if passed {
            break;
        }
    }

    let (design, cert, rep, rounds_used) = best.expect("at least one round");
    let converged = cert.pass;
    // the LP over a grid that contains the refined support gives an independent γ
    let final_rep = max_scaling_lp(&gens, c).unwrap_or(rep);
    let criterion_value = cert.criterion;
    let certificate = cert.with_gamma(final_rep.gamma);
    Ok(SolveResult {
        design,
        criterion_value,
        gamma: final_rep.gamma,
        certificate,
        representation: final_rep,
        rounds_used,
        converged,
    })
}

/// `±Σ ε_ℓ f_ℓ(x)` with `ε` aligned with `(dᵀf_ℓ(x))_ℓ`.
fn best_generators(model: &ModelSpec, d: &DVector<f64>, x: f64) -> Result<Vec<Generator>, ModelError> {
    let f = model.contributions(x)?;
    let a: Vec<f64> = f.iter().map(|fl| d.dot(fl)).collect();
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Ok(Vec::new());
    }
    let eps: Vec<f64> = a.iter().map(|v| v / norm).collect();
    let neg: Vec<f64> = eps.iter().map(|v| -v).collect();
    Ok(vec![
        Generator::new(model, x, eps)?,
        Generator::new(model, x, neg)?,
    ])
}

/// Sorts, merges points within `tol` and drops tiny weights.
fn assemble(mut pairs: Vec<(f64, f64)>, tol: f64) -> Design {
    pairs.retain(|(_, w)| *w > 0.0);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|(_, w)| w).sum();
    let (points, weights): (Vec<f64>, Vec<f64>) =
        pairs.into_iter().map(|(x, w)| (x, w / total)).unzip();
    Design::from_parts_unchecked(points, weights).merged(tol)
}

fn crit_or_inf(model: &ModelSpec, design: &Design, c: &TargetVector) -> f64 {
    match information_matrix(model, design) {
        Ok(info) => info.criterion(c).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

/// Alternating weight and support-point improvement of an estimable design.
pub fn refine(
    model: &ModelSpec,
    start: &Design,
    c: &TargetVector,
    opts: &SolveOptions,
) -> Result<Design, SolveError> {
    let (a, b) = model.design_space();
    let merge_tol = (opts.merge_tol_for(model) * 1e-3).max((b - a) * 1e-9);
    let mut design = start.clone();
    let mut crit = crit_or_inf(model, &design, c);
    if !crit.is_finite() {
        return Err(SolveError::Design(DesignError::NotEstimable {
            residual: f64::NAN,
        }));
    }
    let mut radius = 2.0 * opts.merge_tol_for(model);
    for _ in 0..200 {
        let before = crit;
        design = weight_step(model, &design, c);

        // prune dust, unless that loses estimability
        let kept: Vec<(f64, f64)> = design
            .points()
            .iter()
            .copied()
            .zip(design.weights().iter().copied())
            .filter(|(_, w)| *w >= PRUNE)
            .collect();
        if kept.len() < design.len() {
            let pruned = assemble(kept, merge_tol);
            if crit_or_inf(model, &pruned, c).is_finite() {
                design = weight_step(model, &pruned, c);
            }
        }

        design = point_step(model, &design, c, radius, merge_tol);
        design = weight_step(model, &design, c);
        crit = crit_or_inf(model, &design, c);
        if before - crit <= 1e-10 * crit {
            break;
        }
        radius = (radius * 0.5).max(1e-3 * (b - a) / opts.n_x as f64);
    }
    Ok(design)
}

/// Projected gradient on the weight simplex for fixed support.
fn weight_step(model: &ModelSpec, design: &Design, c: &TargetVector) -> Design {
    let points = design.points().to_vec();
    let m = points.len();
    if m == 1 {
        return design.clone();
    }
    let contributions: Vec<Vec<DVector<f64>>> = match points
        .iter()
        .map(|&x| model.contributions(x))
        .collect::<Result<_, _>>()
    {
        Ok(f) => f,
        Err(_) => return design.clone(),
    };
    let p = model.p();
    let eval = |w: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut mat = nalgebra::DMatrix::zeros(p, p);
        for (wr, fr) in w.iter().zip(&contributions) {
            for fl in fr {
                mat.ger(*wr, fl, fl, 1.0);
            }
        }
        let info = crate::design::InfoMatrix::new(mat);
        let crit = info.criterion(c).ok()?;
        let u = info.pseudo_inverse() * c.as_vector();
        let grad = contributions
            .iter()
            .map(|fr| -fr.iter().map(|fl| u.dot(fl).powi(2)).sum::<f64>())
            .collect();
        Some((crit, grad))
    };
    let mut w = design.weights().to_vec();
    let Some((mut f, mut g)) = eval(&w) else {
        return design.clone();
    };
    let mut step = 1.0 / f;
    for _ in 0..2000 {
        let mut accepted = None;
        let mut t = step;
        for _ in 0..60 {
            let trial: Vec<f64> = project_simplex(
                &w.iter().zip(&g).map(|(wi, gi)| wi - t * gi).collect::<Vec<_>>(),
            );
            if let Some((ft, gt)) = eval(&trial) {
                let decrease: f64 = g.iter().zip(&trial).zip(&w).map(|((gi, a), b)| gi * (a - b)).sum();
                if ft <= f + 1e-4 * decrease {
                    accepted = Some((trial, ft, gt, t));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, ft, gt, t)) = accepted else {
            break;
        };
        let moved = trial
            .iter()
            .zip(&w)
            .fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        // Barzilai-Borwein step for the next iteration
        let sy: f64 = trial
            .iter()
            .zip(&w)
            .zip(gt.iter().zip(&g))
            .map(|((a, b), (ga, gb))| (a - b) * (ga - gb))
            .sum();
        let ss: f64 = trial.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum();
        step = if sy > 0.0 { (ss / sy).min(1e6 / f) } else { 2.0 * t };
        w = trial;
        f = ft;
        g = gt;
        if moved < 1e-14 {
            break;
        }
    }
    let pairs = points.into_iter().zip(w).collect();
    assemble(pairs, 0.0)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|vi| (vi - theta).max(0.0)).collect()
}

/// Golden-section search of each support point within `radius`, others held fixed.
fn point_step(
    model: &ModelSpec,
    design: &Design,
    c: &TargetVector,
    radius: f64,
    merge_tol: f64,
) -> Design {
    let (a, b) = model.design_space();
    let weights = design.weights().to_vec();
    let mut points = design.points().to_vec();
    let mut current = crit_or_inf(model, design, c);
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    for r in 0..points.len() {
        let eval_at = |x: f64, pts: &[f64]| {
            let mut trial: Vec<(f64, f64)> = pts.iter().copied().zip(weights.iter().copied()).collect();
            trial[r].0 = x;
            crit_or_inf(model, &assemble(trial, 0.0), c)
        };
        let (mut lo, mut hi) = ((points[r] - radius).max(a), (points[r] + radius).min(b));
        let mut x1 = hi - invphi * (hi - lo);
        let mut x2 = lo + invphi * (hi - lo);
        let mut f1 = eval_at(x1, &points);
        let mut f2 = eval_at(x2, &points);
        while hi - lo > 1e-11 * (b - a) {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - invphi * (hi - lo);
                f1 = eval_at(x1, &points);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + invphi * (hi - lo);
                f2 = eval_at(x2, &points);
            }
        }
        let mut best = (points[r], current);
        for x in [lo, hi, 0.5 * (lo + hi)] {
            let fx = eval_at(x, &points);
            if fx < best.1 {
                best = (x, fx);
            }
        }
        points[r] = best.0;
        current = best.1;
    }
    assemble(points.into_iter().zip(weights).collect(), merge_tol)
}
