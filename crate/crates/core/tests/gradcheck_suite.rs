//! Runs the finite-difference verification registry end to end.

use incrseg_core::gradcheck::{self, Tolerance};

#[test]
fn every_registered_case_passes() {
    let outcomes = gradcheck::run_suite(None, false, 20, &Tolerance::default());
    assert!(!outcomes.is_empty());
    let mut failures = Vec::new();
    for o in &outcomes {
        assert!(o.elements_checked > 0 || o.case.contains("detach"));
        if !o.pass {
            failures.push(format!("{}: {:?}", o.case, o.failure));
        }
    }
    assert!(failures.is_empty(), "failing cases:\n{}", failures.join("\n"));
}

#[test]
fn registry_covers_all_primitives_and_losses() {
    let names: Vec<String> = gradcheck::cases().iter().map(|c| c.name.to_string()).collect();
    for expected in [
        "op_add",
        "op_sub",
        "op_mul",
        "op_sigmoid",
        "op_relu",
        "op_hinge",
        "op_clamp_nonpositive",
        "op_log_guarded",
        "op_conv2d",
        "op_sum_mean",
        "op_masked_mean",
        "op_upsample_nearest_2x",
        "op_max_pool_2x",
        "op_concat_slice",
        "op_spatial_mask",
        "op_detach_composite",
        "loss_pb_bce",
        "loss_bga_plus",
        "loss_bga_minus",
        "loss_gkd",
        "loss_bfd",
        "loss_total",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing case {expected}");
    }
}

#[test]
fn sabotaged_case_is_caught() {
    let spec = gradcheck::bugged_case();
    let outcome = gradcheck::run_case(&spec, 5, &Tolerance::default());
    assert!(!outcome.pass, "the sign-flipped gradient must not verify");
    let detail = outcome.failure.expect("failure detail recorded");
    assert_eq!(detail.tensor, "adapt");
}

#[test]
fn suite_filter_selects_by_substring() {
    let outcomes = gradcheck::run_suite(Some("conv2d"), false, 3, &Tolerance::default());
    assert_eq!(outcomes.len(), 2);
    assert!(outcomes.iter().all(|o| o.case.contains("conv2d")));
}

#[test]
fn injected_bug_appears_in_suite_results() {
    let outcomes = gradcheck::run_suite(Some("injected_bug"), true, 3, &Tolerance::default());
    assert_eq!(outcomes.len(), 1);
    assert!(!outcomes[0].pass);
}
