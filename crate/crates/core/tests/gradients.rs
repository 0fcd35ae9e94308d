mod common;

use common::gradcheck::{model_check, op_cases, SEEDS};
use ssunet::backbone::Stage;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let worst = (0..SEEDS).map(case.run).fold(0.0, f64::max);
        println!("{:<34} worst rel err {worst:.2e}", case.name);
        if worst >= 1e-3 {
            failures.push(format!("{}: {worst:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn ssu_model_matches_finite_differences() {
    for seed in 0..2 {
        let (worst, n) = model_check(Stage::Ssu, seed, 0.01);
        println!("ssu seed {seed}: {worst:.2e} over {n} parameters");
        assert!(worst < 1e-2, "seed {seed}: worst {worst:.3e} over {n} parameters");
    }
}

#[test]
fn bayesian_model_matches_finite_differences() {
    let (worst, n) = model_check(Stage::Bayesian, 7, 0.01);
    assert!(worst < 1e-2, "worst {worst:.3e} over {n} parameters");
}
