//! End-to-end acceptance checks. Each prints one PASS/FAIL line; the test fails if any does.

use std::path::Path;
use std::time::{Duration, Instant};

use cdesign::cli::load_config;
use cdesign::design::{apportion, information_at, Design, TargetVector};
use cdesign::elfving::{max_scaling_lp, Generator};
use cdesign::model::{gradcheck_model, ModelSpec};
use cdesign::simulate::covariance_check;
use cdesign::solver::{solve, SolveOptions, SolveResult};
use cdesign::verify::verify_design;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn fixture(name: &str) -> (ModelSpec, TargetVector) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    let loaded = load_config(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    (loaded.model, loaded.target)
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn solved(name: &str) -> (ModelSpec, TargetVector, SolveResult, Duration) {
    let (m, c) = fixture(name);
    let start = Instant::now();
    let r = solve(&m, &c, &SolveOptions::default()).expect("solve");
    (m, c, r, start.elapsed())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn c1_enzyme_med() -> Check {
    let (_, _, r, t) = solved("mm41.json");
    let d = &r.design;
    let ok = r.converged
        && close(d.points(), &[1.1, 10.0], 0.05)
        && close(d.weights(), &[0.967, 0.033], 0.01)
        && t < Duration::from_secs(30);
    ensure(ok, format!("points {:?} weights {:?} in {:.2?}", d.points(), d.weights(), t))
}

fn c2_elimination_auc() -> Check {
    let (_, _, r, _) = solved("re42.json");
    let d = &r.design;
    let ok = r.converged
        && close(d.points(), &[0.13, 2.08], 0.02)
        && close(d.weights(), &[0.24, 0.76], 0.01);
    ensure(ok, format!("points {:?} weights {:?}", d.points(), d.weights()))
}

fn c3_equivalence_certificate() -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for name in ["mm41.json", "re42.json"] {
        let (m, c, r, _) = solved(name);
        let cert = verify_design(&m, &r.design, &c, 10_000, 1e-4).map_err(|e| e.to_string())?;
        let worst = cert.support_residuals.iter().fold(0.0f64, |a, b| a.max(*b));
        ok &= cert.max_sensitivity <= 1.0 + 1e-4 && worst <= 1e-4;
        detail.push(format!("{name}: max phi {:.8}, support residual {worst:.1e}", cert.max_sensitivity));
    }
    ensure(ok, detail.join("; "))
}

fn c4_duality_identity() -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for name in ["mm41.json", "re42.json"] {
        let (_, _, r, _) = solved(name);
        let gap = (r.gamma * r.gamma * r.criterion_value - 1.0).abs();
        ok &= gap <= 1e-6;
        detail.push(format!("{name}: |gamma^2 crit - 1| = {gap:.1e}"));
    }
    ensure(ok, detail.join("; "))
}

fn c5_link_reduction() -> Check {
    let (m2, c) = fixture("link_quadratic.json");
    let m1 = m2.with_reduced(true).ok_or("not a link model")?;
    let opts = SolveOptions::default();
    let r2 = solve(&m2, &c, &opts).map_err(|e| e.to_string())?;
    let r1 = solve(&m1, &c, &opts).map_err(|e| e.to_string())?;
    let rel = (r2.criterion_value - r1.criterion_value).abs() / r1.criterion_value;
    let ok = rel <= 1e-6 && close(r1.design.points(), r2.design.points(), 1e-3);
    ensure(
        ok,
        format!(
            "k=2 {:.10} at {:?}, k=1 {:.10} at {:?}",
            r2.criterion_value,
            r2.design.points(),
            r1.criterion_value,
            r1.design.points()
        ),
    )
}

/// `cᵀM⁻¹c` for `M = w f(a)f(a)ᵀ + (1-w) f(b)f(b)ᵀ` with `f(x) = (1, x)`, written out by hand.
fn linear_two_point(a: f64, b: f64, w: f64, c: [f64; 2]) -> f64 {
    let m00 = 1.0;
    let m01 = w * a + (1.0 - w) * b;
    let m11 = w * a * a + (1.0 - w) * b * b;
    let det = m00 * m11 - m01 * m01;
    if det <= 1e-14 {
        return f64::INFINITY;
    }
    (c[0] * c[0] * m11 - 2.0 * c[0] * c[1] * m01 + c[1] * c[1] * m00) / det
}

fn c6_classical_elfving() -> Check {
    let (m, c) = fixture("linear_slope.json");
    let r = solve(&m, &c, &SolveOptions::default()).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (0..200).map(|i| -1.0 + 2.0 * i as f64 / 199.0).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            // the criterion is convex in w: ternary search
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..100 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if linear_two_point(grid[i], grid[j], m1, [0.0, 1.0])
                    < linear_two_point(grid[i], grid[j], m2, [0.0, 1.0])
                {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let v = linear_two_point(grid[i], grid[j], 0.5 * (lo + hi), [0.0, 1.0]);
            if v < best.0 {
                best = (v, grid[i], grid[j]);
            }
        }
    }
    let ok = r.design.points() == [-1.0, 1.0]
        && close(r.design.weights(), &[0.5, 0.5], 1e-8)
        && (r.criterion_value - 1.0).abs() <= 1e-8
        && (best.0 - 1.0).abs() <= 1e-8
        && (best.1, best.2) == (-1.0, 1.0);
    ensure(
        ok,
        format!(
            "solver {:?} crit {}, brute force {:.10} at ({}, {})",
            r.design.weights(),
            r.criterion_value,
            best.0,
            best.1,
            best.2
        ),
    )
}

/// Largest `t` with `t·c` on some segment between two points; the hull of the points
/// is the union of such segments' convex combinations, so this equals the ray exit.
fn ray_polygon(points: &[[f64; 2]], c: [f64; 2]) -> f64 {
    let mut best = 0.0f64;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i..] {
            // t c = p + s (q - p), 0 <= s <= 1
            let e = [q[0] - p[0], q[1] - p[1]];
            let det = c[0] * (-e[1]) - c[1] * (-e[0]);
            if det.abs() < 1e-14 {
                // segment parallel to the ray: check endpoints on the ray
                for v in [p, q] {
                    let cross = c[0] * v[1] - c[1] * v[0];
                    let t = (v[0] * c[0] + v[1] * c[1]) / (c[0] * c[0] + c[1] * c[1]);
                    if cross.abs() < 1e-12 && t > best {
                        best = t;
                    }
                }
                continue;
            }
            let t = (p[0] * (-e[1]) - p[1] * (-e[0])) / det;
            let s = (c[0] * p[1] - c[1] * p[0]) / det;
            if (-1e-12..=1.0 + 1e-12).contains(&s) && t > best {
                best = t;
            }
        }
    }
    best
}

fn c7_lp_versus_hull() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let half = rng.random_range(1..=25);
        let mut pts: Vec<[f64; 2]> = (0..half)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let negated: Vec<[f64; 2]> = pts.iter().map(|p| [-p[0], -p[1]]).collect();
        pts.extend(negated);
        let c = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let gens: Vec<Generator> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| Generator {
                x: i as f64,
                eps: vec![1.0],
                g: DVector::from_column_slice(p),
            })
            .collect();
        let target = TargetVector::new(c.to_vec()).map_err(|e| e.to_string())?;
        let oracle = ray_polygon(&pts, c);
        match max_scaling_lp(&gens, &target) {
            Ok(rep) => worst = worst.max((rep.gamma - oracle).abs()),
            Err(e) => {
                if oracle > 1e-9 {
                    return Err(format!("LP failed ({e}) where the hull gives {oracle}"));
                }
            }
        }
    }
    ensure(worst <= 1e-8, format!("max |gamma - oracle| = {worst:.1e} over 100 sets"))
}

fn c8_gradcheck() -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for name in ["mm41.json", "re42.json", "linear_slope.json", "link_quadratic.json"] {
        let (m, _) = fixture(name);
        let r = gradcheck_model(&m, 100, 1, 1e-5);
        ok &= r.pass && r.grad_rel_err <= 1e-6 && r.hess_rel_err <= 1e-4;
        detail.push(format!("{name}: {:.1e}/{:.1e}", r.grad_rel_err, r.hess_rel_err));
    }
    ensure(ok, detail.join("; "))
}

fn c9_information_equality() -> Check {
    let (m2, _) = fixture("link_quadratic.json");
    let m1 = m2.with_reduced(true).ok_or("not a link model")?;
    let mut worst = 0.0f64;
    for x in m2.grid(1000) {
        let a = information_at(&m2, x).map_err(|e| e.to_string())?;
        let b = information_at(&m1, x).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).amax());
    }
    ensure(worst <= 1e-10, format!("max entrywise deviation {worst:.1e} over 1000 points"))
}

fn c10_monte_carlo() -> Check {
    let (m, c, r, _) = solved("mm41.json");
    let start = Instant::now();
    let opt = covariance_check(&m, &r.design, &c, 200, 2000, 42).map_err(|e| e.to_string())?;
    let uniform = Design::uniform(0.0, 10.0, 3);
    let comp = covariance_check(&m, &uniform, &c, 200, 2000, 42).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let ok = (0.85..=1.15).contains(&opt.ratio)
        && opt.empirical_var < comp.empirical_var
        && t < Duration::from_secs(300);
    ensure(
        ok,
        format!(
            "ratio {:.4}, empirical var {:.3e} vs uniform {:.3e}, {:.2?}",
            opt.ratio, opt.empirical_var, comp.empirical_var, t
        ),
    )
}

/// Smallest achievable `max_j p_j / r_j` over all `r_j >= 1` summing to `n`.
fn best_loss(p: &[f64], n: usize) -> f64 {
    fn rec(p: &[f64], left: usize, acc: f64) -> f64 {
        if p.len() == 1 {
            return acc.max(p[0] / left as f64);
        }
        (1..=left - (p.len() - 1))
            .map(|r| rec(&p[1..], left - r, acc.max(p[0] / r as f64)))
            .fold(f64::INFINITY, f64::min)
    }
    rec(p, n, 0.0)
}

fn c11_apportionment() -> Check {
    let example = apportion(&[0.967, 0.033], 10).map_err(|e| e.to_string())?;
    if example != [9, 1] {
        return Err(format!("apportion((0.967, 0.033), 10) = {example:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for m in 1..=3usize {
        for n in m..=30 {
            for _ in 0..20 {
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let r = apportion(&p, n).map_err(|e| e.to_string())?;
                let loss = p.iter().zip(&r).map(|(p, r)| p / *r as f64).fold(0.0, f64::max);
                let best = best_loss(&p, n);
                if r.iter().sum::<usize>() != n || r.contains(&0) || loss > best * (1.0 + 1e-12) {
                    return Err(format!("p {p:?}, N {n}: got {r:?} (loss {loss}, best {best})"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("(9, 1) reproduced; {cases} random cases match exhaustive enumeration"))
}

fn main() {
    let checks: [(&str, fn() -> Check); 11] = [
        ("enzyme kinetics minimum effective dose design", c1_enzyme_med),
        ("elimination model area-under-curve design", c2_elimination_auc),
        ("equivalence certificate on 10^4 grid", c3_equivalence_certificate),
        ("duality identity gamma^2 * criterion = 1", c4_duality_identity),
        ("link model k=2 and reduced k=1 paths agree", c5_link_reduction),
        ("classical Elfving oracle for the linear slope", c6_classical_elfving),
        ("LP scaling matches ray-polygon intersection", c7_lp_versus_hull),
        ("forward-mode derivatives match finite differences", c8_gradcheck),
        ("link information equals reduced information", c9_information_equality),
        ("Monte Carlo variance matches asymptotics", c10_monte_carlo),
        ("efficient apportionment", c11_apportionment),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
