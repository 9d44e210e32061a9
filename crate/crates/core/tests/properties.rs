use cdesign::design::{criterion, Design, TargetVector};
use cdesign::elfving::{max_scaling_lp, Generator};
use cdesign::model::{Link, ModelSpec};
use cdesign::simulate::covariance_check;
use cdesign::solver::{solve, SolveOptions};
use cdesign::verify::{sensitivity, verify_design};
use nalgebra::DVector;
use proptest::prelude::*;

fn line() -> ModelSpec {
    ModelSpec::link("t1 + t2*x", Link::Power { q: 0.0 }, true, vec![1.0, 1.0], (-1.0, 1.0)).unwrap()
}

fn decay() -> ModelSpec {
    ModelSpec::link("t1*exp(-t2*x)", Link::Power { q: 2.0 }, false, vec![2.0, 1.0], (0.0, 5.0)).unwrap()
}

fn quick() -> SolveOptions {
    SolveOptions {
        n_x: 101,
        n_eps: 16,
        ..SolveOptions::default()
    }
}

fn target() -> impl Strategy<Value = TargetVector> {
    (0.0..std::f64::consts::TAU).prop_map(|a| TargetVector::new(vec![a.cos(), a.sin()]).unwrap())
}

fn design_on(a: f64, b: f64) -> impl Strategy<Value = Design> {
    prop::collection::vec((0.0..1.0f64, 0.05..1.0f64), 2..5).prop_map(move |mut pts| {
        pts.sort_by(|p, q| p.0.total_cmp(&q.0));
        pts.dedup_by(|p, q| p.0 == q.0);
        let total: f64 = pts.iter().map(|p| p.1).sum();
        let (x, w): (Vec<f64>, Vec<f64>) = pts.iter().map(|(u, w)| (a + (b - a) * u, w / total)).unzip();
        Design::new(x, w).unwrap().merged(1e-3)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sensitivity_averages_to_one_over_the_design(xi in design_on(0.0, 5.0), c in target()) {
        let m = decay();
        prop_assume!(criterion(&m, &xi, &c).is_ok());
        let mean: f64 = xi
            .points()
            .iter()
            .zip(xi.weights())
            .map(|(x, w)| w * sensitivity(&m, &xi, &c, *x).unwrap())
            .sum();
        prop_assert!((mean - 1.0).abs() <= 1e-8, "mean {}", mean);
    }

    #[test]
    fn efficiency_bound_is_sound(xi in design_on(0.0, 5.0), c in target()) {
        let m = decay();
        prop_assume!(criterion(&m, &xi, &c).is_ok());
        let cert = verify_design(&m, &xi, &c, 2001, 1e-4).unwrap();
        let best = solve(&m, &c, &quick()).unwrap();
        let efficiency = best.criterion_value / cert.criterion;
        prop_assert!(efficiency >= cert.efficiency_lower_bound - 1e-9,
            "efficiency {} below bound {}", efficiency, cert.efficiency_lower_bound);
        prop_assert!(efficiency <= 1.0 + 1e-6);
    }

    #[test]
    fn solver_output_passes_both_certificates(c in target(), use_line in any::<bool>()) {
        let m = if use_line { line() } else { decay() };
        let r = solve(&m, &c, &quick()).unwrap();
        let p = m.p();
        prop_assert!(r.design.len() <= p * (p + 1) / 2 + 1);
        prop_assert!((r.gamma * r.gamma * r.criterion_value - 1.0).abs() <= 1e-6);
        let cert = &r.certificate;
        prop_assert!(cert.pass);
        let plane = cert.hyperplane.as_ref().expect("hyperplane check attached");
        prop_assert!(plane.max_value <= 1.0 + 1e-4);
        let sens_ok = cert.max_sensitivity <= 1.0 + 1e-4;
        prop_assert!(sens_ok || cert.note.is_some());
    }

    #[test]
    fn scaling_is_centrally_symmetric_and_monotone(
        pts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..20),
        c in target(),
    ) {
        let mut gens: Vec<Generator> = pts
            .iter()
            .flat_map(|&(a, b)| [[a, b], [-a, -b]])
            .enumerate()
            .map(|(i, g)| Generator { x: i as f64, eps: vec![1.0], g: DVector::from_column_slice(&g) })
            .collect();
        let neg = TargetVector::new(c.as_slice().iter().map(|v| -v).collect()).unwrap();
        let full = max_scaling_lp(&gens, &c);
        let flipped = max_scaling_lp(&gens, &neg);
        match (&full, &flipped) {
            (Ok(a), Ok(b)) => prop_assert!((a.gamma - b.gamma).abs() <= 1e-9),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "symmetric problems disagree on feasibility"),
        }
        if gens.len() > 2 {
            gens.truncate(gens.len() - 2);
            if let (Ok(sub), Ok(all)) = (max_scaling_lp(&gens, &c), &full) {
                prop_assert!(sub.gamma <= all.gamma + 1e-9);
            }
        }
    }
}

#[test]
fn simulation_does_not_depend_on_thread_count() {
    let m = ModelSpec::heteroscedastic("t1*x/(t2+x)", "exp(-t3*x)", vec![3.0, 1.7, 0.1], (0.0, 10.0)).unwrap();
    let c = TargetVector::new(vec![-0.425, 0.5, 0.0]).unwrap();
    let xi = Design::new(vec![1.0909, 10.0], vec![0.9687, 0.0313]).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| covariance_check(&m, &xi, &c, 100, 150, 9).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.estimates, four.estimates);
    assert_eq!(one.empirical_var.to_bits(), four.empirical_var.to_bits());
}
