use lightseg::train::gradcheck::{suite_blocks, suite_model, suite_ops};
use lightseg::train::{GradCheckConfig, GradCheckReport};

fn assert_all(reports: &[GradCheckReport]) {
    for r in reports {
        println!("{}", r.summary_line());
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "failing checks: {failed:#?}");
}

#[test]
fn every_op_vjp_matches_finite_differences() {
    for seed in 0..5 {
        assert_all(&suite_ops(seed, &GradCheckConfig::default()));
    }
}

#[test]
fn composite_blocks_match_finite_differences() {
    for seed in 0..5 {
        assert_all(&suite_blocks(seed, &GradCheckConfig::default()));
    }
}

#[test]
fn toy_models_match_finite_differences() {
    for seed in 0..5 {
        assert_all(&suite_model(seed, &GradCheckConfig::default()));
    }
}
