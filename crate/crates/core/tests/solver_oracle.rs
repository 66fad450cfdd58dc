mod support;

use spectempo::solver::{solve, SolverOptions};
use support::lp_oracle;

#[test]
fn weighted_l1_matches_vertex_enumeration() {
    let o = SolverOptions::default();
    for seed in 0..100 {
        let p = lp_oracle::random_instance(seed);
        let oracle = lp_oracle::to_lp(&p).solve().expect("instances are feasible by construction");
        let sol = solve(&p, &o).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            (sol.objective_value - oracle).abs() <= 1e-6,
            "seed {seed}: solver {} vs oracle {oracle}",
            sol.objective_value
        );
    }
}

#[test]
fn oracle_solves_a_hand_lp() {
    use nalgebra::DMatrix;
    use spectempo::solver::{LinearEquality, Sign, SparseRecoveryProblem};
    // min |s0| + 2|s1| + 3|s2| with s ≥ 0, Σs = 1, s0 = s1: optimum s = (½, ½, 0), value 1.5
    let mut p = SparseRecoveryProblem::new(DMatrix::identity(3, 3));
    p.sign = vec![Sign::NonNegative; 3];
    p.weights = vec![1.0, 2.0, 3.0];
    p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 1.0));
    p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, -1.0)], 0.0));
    let v = lp_oracle::to_lp(&p).solve().unwrap();
    assert!((v - 1.5).abs() < 1e-12);
}
