//! Loss components against hand-computed constants on tiny inputs.

use incrseg_core::label::LabelMap;
use incrseg_core::losses::{
    self, LossComponents, LossWeights, RegionMasks,
};
use incrseg_core::pseudo::PseudoLabel;
use incrseg_core::{ops, Shape, Tape, Tensor};

fn assert_close(actual: f32, expected: f32, tol: f32) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual}"
    );
}

const LN2: f32 = std::f32::consts::LN_2;

#[test]
fn pb_bce_single_pixel_at_half_confidence() {
    // One pixel labeled with the sole new class; both the background and
    // the class channel sit at probability one half, so each contributes
    // ln 2: the background target is 0 against p = 0.5, the class target is
    // 1 against p = 0.5.
    let tape = Tape::new();
    let labels = LabelMap::new(1, 1, vec![1]).unwrap();
    let pseudo = PseudoLabel::from_ground_truth(&labels);
    let probs = Tensor::from_vec(Shape::chw(2, 1, 1), vec![0.5, 0.5]).unwrap();
    probs.set_requires_grad(true);
    let loss = losses::pb_bce(&tape, &probs, &pseudo, &[1]).unwrap();
    assert_close(loss.item().unwrap(), 2.0 * LN2, 1e-6);
}

#[test]
fn pb_bce_perfect_prediction_is_near_zero() {
    let tape = Tape::new();
    let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
    let pseudo = PseudoLabel::from_ground_truth(&labels);
    // Background channel: [~1, ~0]; class channel: [~0, ~1].
    let probs = Tensor::from_vec(
        Shape::chw(2, 1, 2),
        vec![0.9999, 0.0001, 0.0001, 0.9999],
    )
    .unwrap();
    let loss = losses::pb_bce(&tape, &probs, &pseudo, &[1]).unwrap();
    assert!(loss.item().unwrap() < 1e-3);
}

#[test]
fn pb_bce_teacher_labeled_old_class_targets_all_channels_off() {
    // Pixel labeled 1 (an old class) while the new class is 2: neither the
    // background channel nor the new-class channel should be on, so the
    // loss at probabilities (0.5, 0.5) is again 2 ln 2.
    let tape = Tape::new();
    let labels = LabelMap::new(1, 1, vec![1]).unwrap();
    let pseudo = PseudoLabel::from_ground_truth(&labels);
    let probs = Tensor::from_vec(Shape::chw(2, 1, 1), vec![0.5, 0.5]).unwrap();
    let loss = losses::pb_bce(&tape, &probs, &pseudo, &[2]).unwrap();
    assert_close(loss.item().unwrap(), 2.0 * LN2, 1e-6);
}

#[test]
fn pb_bce_rejects_wrong_channel_count() {
    let tape = Tape::new();
    let labels = LabelMap::new(1, 1, vec![1]).unwrap();
    let pseudo = PseudoLabel::from_ground_truth(&labels);
    let probs = Tensor::from_vec(Shape::chw(3, 1, 1), vec![0.5; 3]).unwrap();
    assert!(losses::pb_bce(&tape, &probs, &pseudo, &[1]).is_err());
}

#[test]
fn bga_plus_zero_logit_on_novel_pixel_is_ln_two() {
    let tape = Tape::new();
    let labels = LabelMap::new(1, 2, vec![1, 0]).unwrap();
    let masks = RegionMasks::from_labels(&labels, &[1]);
    let aggregate = Tensor::from_vec(Shape::chw(1, 1, 2), vec![0.0, 3.0]).unwrap();
    aggregate.set_requires_grad(true);
    let loss = losses::bga_plus(&tape, &aggregate, &masks).unwrap();
    // Only the novel pixel counts: -log sigmoid(-0) = ln 2.
    assert_close(loss.item().unwrap(), LN2, 1e-6);
}

#[test]
fn bga_plus_strongly_negative_logit_vanishes() {
    let tape = Tape::new();
    let labels = LabelMap::new(1, 1, vec![1]).unwrap();
    let masks = RegionMasks::from_labels(&labels, &[1]);
    let aggregate = Tensor::from_vec(Shape::chw(1, 1, 1), vec![-12.0]).unwrap();
    let loss = losses::bga_plus(&tape, &aggregate, &masks).unwrap();
    assert!(loss.item().unwrap() < 1e-4);
}

#[test]
fn bga_minus_hand_value_at_prob_point_two() {
    // (1 - 0.2)^2 - 0.2^2 = 0.64 - 0.04 = 0.60, positive so the hinge
    // passes it through.
    let tape = Tape::new();
    let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
    let masks = RegionMasks::from_labels(&labels, &[1]);
    let prob = Tensor::from_vec(Shape::chw(1, 1, 2), vec![0.2, 0.9]).unwrap();
    prob.set_requires_grad(true);
    let loss = losses::bga_minus(&tape, &prob, &masks).unwrap();
    assert_close(loss.item().unwrap(), 0.60, 1e-6);
}

#[test]
fn bga_minus_vanishes_above_half() {
    let tape = Tape::new();
    let labels = LabelMap::new(1, 1, vec![0]).unwrap();
    let masks = RegionMasks::from_labels(&labels, &[1]);
    let prob = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.8]).unwrap();
    let loss = losses::bga_minus(&tape, &prob, &masks).unwrap();
    assert_close(loss.item().unwrap(), 0.0, 1e-7);
}

#[test]
fn bga_minus_equals_simplified_margin_form() {
    // (1-p)^2 - p^2 simplifies to 1 - 2p, so the hinge term must match
    // max(0, 1 - 2p) everywhere.
    let tape = Tape::new();
    let labels = LabelMap::new(1, 1, vec![0]).unwrap();
    let masks = RegionMasks::from_labels(&labels, &[1]);
    for i in 0..=100 {
        let p = i as f32 / 100.0;
        let prob = Tensor::from_vec(Shape::chw(1, 1, 1), vec![p]).unwrap();
        let loss = losses::bga_minus(&tape, &prob, &masks).unwrap();
        let simplified = (1.0 - 2.0 * p).max(0.0);
        assert_close(loss.item().unwrap(), simplified, 1e-6);
    }
}

#[test]
fn gkd_hand_value_at_half() {
    let tape = Tape::new();
    let student = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.5]).unwrap();
    student.set_requires_grad(true);
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.5]).unwrap();
    let loss = losses::gkd(&tape, &[(student, teacher)]).unwrap();
    assert_close(loss.item().unwrap(), LN2, 1e-6);
}

#[test]
fn gkd_rejects_live_teacher() {
    let tape = Tape::new();
    let student = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.5]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.5]).unwrap();
    teacher.set_requires_grad(true);
    assert!(losses::gkd(&tape, &[(student, teacher)]).is_err());
}

#[test]
fn gkd_rejects_empty_pair_list() {
    let tape = Tape::new();
    assert!(losses::gkd(&tape, &[]).is_err());
}

#[test]
fn bfd_hand_value_single_masked_element() {
    // Student 2.0 vs teacher 0.5 on a masked pixel: (1.5)^2 = 2.25; the
    // unmasked pixel contributes nothing.
    let tape = Tape::new();
    let student = Tensor::from_vec(Shape::chw(1, 1, 2), vec![2.0, 7.0]).unwrap();
    student.set_requires_grad(true);
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 2), vec![0.5, 1.0]).unwrap();
    let mask = Tensor::from_vec(Shape::chw(1, 1, 2), vec![1.0, 0.0]).unwrap();
    let loss = losses::bfd(&tape, &[(student, teacher)], &mask).unwrap();
    assert_close(loss.item().unwrap(), 2.25, 1e-6);
}

#[test]
fn bfd_sums_without_normalization() {
    // Two identical masked differences of 1.5 must give exactly twice the
    // single-element value: the component is a sum, not a mean.
    let tape = Tape::new();
    let student = Tensor::from_vec(Shape::chw(1, 1, 2), vec![2.0, 2.0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 2), vec![0.5, 0.5]).unwrap();
    let mask = Tensor::from_vec(Shape::chw(1, 1, 2), vec![1.0, 1.0]).unwrap();
    let loss = losses::bfd(&tape, &[(student, teacher)], &mask).unwrap();
    assert_close(loss.item().unwrap(), 4.5, 1e-6);
}

#[test]
fn bfd_rejects_live_teacher() {
    let tape = Tape::new();
    let student = Tensor::from_vec(Shape::chw(1, 1, 1), vec![1.0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![1.0]).unwrap();
    teacher.set_requires_grad(true);
    let mask = Tensor::from_vec(Shape::chw(1, 1, 1), vec![1.0]).unwrap();
    assert!(losses::bfd(&tape, &[(student, teacher)], &mask).is_err());
}

#[test]
fn total_objective_weighted_sum_of_units() {
    // Components all equal to one with the default weights
    // (1, 5, 1, 4): 1 + 1 + 5 + 1 + 4 = 12.
    let tape = Tape::new();
    let unit = || Tensor::scalar(1.0);
    let comps = LossComponents {
        pb_bce: unit(),
        bga_plus: Some(unit()),
        bga_minus: Some(unit()),
        gkd: Some(unit()),
        bfd: Some(unit()),
    };
    let total =
        losses::total_objective(&tape, &comps, &LossWeights::default()).unwrap();
    assert_close(total.item().unwrap(), 12.0, 1e-6);
}

#[test]
fn total_objective_skips_absent_components() {
    let tape = Tape::new();
    let comps = LossComponents {
        pb_bce: Tensor::scalar(0.75),
        bga_plus: None,
        bga_minus: None,
        gkd: None,
        bfd: None,
    };
    let total =
        losses::total_objective(&tape, &comps, &LossWeights::default()).unwrap();
    assert_close(total.item().unwrap(), 0.75, 1e-7);
}

#[test]
fn total_objective_rejects_non_scalar_component() {
    let tape = Tape::new();
    let comps = LossComponents {
        pb_bce: Tensor::from_vec(Shape::new(&[2]), vec![1.0, 2.0]).unwrap(),
        bga_plus: None,
        bga_minus: None,
        gkd: None,
        bfd: None,
    };
    assert!(losses::total_objective(&tape, &comps, &LossWeights::default()).is_err());
}

#[test]
fn loss_weights_reject_negative_values() {
    assert!(LossWeights::new(1.0, -0.1, 1.0, 4.0).is_err());
    assert!(LossWeights::new(f32::NAN, 5.0, 1.0, 4.0).is_err());
    assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).is_ok());
}

#[test]
fn empty_novel_region_gives_zero_plus_loss_and_a_warning() {
    let tape = Tape::new();
    let labels = LabelMap::new(1, 2, vec![0, 0]).unwrap();
    let masks = RegionMasks::from_labels(&labels, &[1]);
    let aggregate = Tensor::from_vec(Shape::chw(1, 1, 2), vec![1.0, -1.0]).unwrap();
    let loss = losses::bga_plus(&tape, &aggregate, &masks).unwrap();
    assert_eq!(loss.item().unwrap(), 0.0);
    assert!(!tape.take_warnings().is_empty());
}

#[test]
fn losses_backpropagate_through_composition() {
    // End-to-end: raw logits -> sigmoid -> component -> total; backward
    // must reach the logits.
    let tape = Tape::new();
    let labels = LabelMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let pseudo = PseudoLabel::from_ground_truth(&labels);
    let masks = RegionMasks::from_labels(&labels, &[1]);
    let logits = Tensor::from_vec(
        Shape::chw(2, 2, 2),
        vec![0.3, -0.4, 0.9, -1.2, 0.1, 0.5, -0.6, 0.2],
    )
    .unwrap();
    logits.set_requires_grad(true);
    let probs = ops::sigmoid(&tape, &logits);
    let bg = ops::slice_channels(&tape, &logits, 0, 1).unwrap();
    let bg_prob = ops::sigmoid(&tape, &bg);
    let comps = LossComponents {
        pb_bce: losses::pb_bce(&tape, &probs, &pseudo, &[1]).unwrap(),
        bga_plus: Some(losses::bga_plus(&tape, &bg, &masks).unwrap()),
        bga_minus: Some(losses::bga_minus(&tape, &bg_prob, &masks).unwrap()),
        gkd: None,
        bfd: None,
    };
    let total =
        losses::total_objective(&tape, &comps, &LossWeights::default()).unwrap();
    tape.backward(&total).unwrap();
    let grad = logits.grad().expect("gradient reaches the logits");
    assert!(grad.iter().any(|&g| g != 0.0));
    assert!(grad.iter().all(|g| g.is_finite()));
}
