mod support;

use proptest::prelude::*;
use support::properties::*;

fn check(r: Result<(), String>) -> Result<(), TestCaseError> {
    r.map_err(TestCaseError::fail)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn certificates_ignore_template_signs_and_order(seed in any::<u64>()) {
        check(certificate_invariance(seed))?;
    }

    #[test]
    fn antisymmetry_matrix_kills_symmetric_matrices(seed in any::<u64>()) {
        check(symmetry_annihilation(seed))?;
    }

    #[test]
    fn deconvolution_inverts_the_indirect_map(seed in any::<u64>()) {
        check(deconvolution_round_trip(seed))?;
    }

    #[test]
    fn polynomial_filters_commute_and_factor(seed in any::<u64>()) {
        check(filter_invariants(seed))?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn benchmarks_replay_bitwise(seed in any::<u64>()) {
        check(benchmark_determinism(seed))?;
    }
}
