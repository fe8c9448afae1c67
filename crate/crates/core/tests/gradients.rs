use s2adet::gradsuite::{detector_suite, op_suite, ssa_suite};
use s2adet::tensor::GradCheckOptions;

fn assert_all_pass(cases: Vec<s2adet::gradsuite::CaseResult>, seed: u64) {
    for c in cases {
        assert!(c.report.passed, "seed {seed}, {}: {:?}", c.name, c.report);
    }
}

#[test]
fn ops_pass_over_twenty_seeds() {
    let opts = GradCheckOptions::default();
    for seed in 0..20 {
        assert_all_pass(op_suite(seed, &opts).unwrap(), seed);
    }
}

#[test]
fn attention_block_passes_over_twenty_seeds() {
    let opts = GradCheckOptions::default();
    for seed in 100..120 {
        assert_all_pass(ssa_suite(seed, &opts).unwrap(), seed);
    }
}

#[test]
fn worst_error_is_far_below_tolerance() {
    let opts = GradCheckOptions::default();
    let worst = (0..5)
        .flat_map(|s| op_suite(s, &opts).unwrap())
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn detector_end_to_end_passes() {
    for seed in 0..5 {
        for case in detector_suite(seed, &GradCheckOptions::default()).unwrap() {
            assert!(case.report.passed, "seed {seed} {}: {:?}", case.name, case.report);
        }
    }
}
