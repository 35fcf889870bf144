//! Decision-table coverage for pseudo-label generation.

use incrseg_core::label::LabelMap;
use incrseg_core::pseudo::{self, SourceFlag};
use incrseg_core::{Error, Shape, Tensor};

/// One old class (id 1), a 1x4 image exercising all four outcomes:
///   pixel 0: annotated new class         -> ground truth
///   pixel 1: background, confident old   -> teacher
///   pixel 2: background, unconfident     -> background
///   pixel 3: annotated new class again   -> ground truth
fn four_way_fixture() -> (LabelMap, Tensor) {
    let gt = LabelMap::new(1, 4, vec![2, 0, 0, 2]).unwrap();
    let teacher =
        Tensor::from_vec(Shape::chw(1, 1, 4), vec![0.99, 0.95, 0.10, 0.01]).unwrap();
    (gt, teacher)
}

#[test]
fn four_way_decision_table() {
    let (gt, teacher) = four_way_fixture();
    let out = pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 2).unwrap();
    assert_eq!(out.labels().data(), &[2, 1, 0, 2]);
    assert_eq!(
        out.sources(),
        &[
            SourceFlag::GroundTruth,
            SourceFlag::Teacher,
            SourceFlag::Background,
            SourceFlag::GroundTruth,
        ]
    );
}

#[test]
fn threshold_is_inclusive() {
    // Probability exactly at the threshold adopts the class.
    let gt = LabelMap::new(1, 1, vec![0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.7]).unwrap();
    let out = pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 1).unwrap();
    assert_eq!(out.labels().get(0, 0), 1);
    assert_eq!(out.source(0, 0), SourceFlag::Teacher);
}

#[test]
fn just_below_threshold_stays_background() {
    let gt = LabelMap::new(1, 1, vec![0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.699]).unwrap();
    let out = pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 1).unwrap();
    assert_eq!(out.labels().get(0, 0), 0);
    assert_eq!(out.source(0, 0), SourceFlag::Background);
}

#[test]
fn tie_picks_lowest_class_id() {
    let gt = LabelMap::new(1, 1, vec![0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(3, 1, 1), vec![0.9, 0.9, 0.9]).unwrap();
    let out = pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 3).unwrap();
    assert_eq!(out.labels().get(0, 0), 1);
}

#[test]
fn annotation_beats_confident_teacher() {
    let gt = LabelMap::new(1, 1, vec![3]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(2, 1, 1), vec![0.99, 0.98]).unwrap();
    let out = pseudo::generate_pseudo_label(&gt, &teacher, 0.5, 3).unwrap();
    assert_eq!(out.labels().get(0, 0), 3);
    assert_eq!(out.source(0, 0), SourceFlag::GroundTruth);
}

#[test]
fn out_of_range_annotation_is_rejected_with_location() {
    let gt = LabelMap::new(2, 2, vec![0, 0, 0, 9]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 2, 2), vec![0.0; 4]).unwrap();
    match pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 4) {
        Err(Error::UnknownClass { id, y, x, known }) => {
            assert_eq!((id, y, x, known), (9, 1, 1, 4));
        }
        other => panic!("expected an unknown-class error, got {other:?}"),
    }
}

#[test]
fn threshold_must_be_strictly_inside_unit_interval() {
    let gt = LabelMap::new(1, 1, vec![0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.5]).unwrap();
    for bad in [0.0, 1.0, -0.2, 1.5] {
        assert!(pseudo::generate_pseudo_label(&gt, &teacher, bad, 1).is_err());
    }
    assert!(pseudo::generate_pseudo_label(&gt, &teacher, 0.5, 1).is_ok());
}

#[test]
fn live_teacher_tensor_is_rejected() {
    let gt = LabelMap::new(1, 1, vec![0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![0.5]).unwrap();
    teacher.set_requires_grad(true);
    assert!(pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 1).is_err());
}

#[test]
fn probabilities_outside_unit_interval_are_rejected() {
    let gt = LabelMap::new(1, 1, vec![0]).unwrap();
    let teacher = Tensor::from_vec(Shape::chw(1, 1, 1), vec![1.2]).unwrap();
    assert!(pseudo::generate_pseudo_label(&gt, &teacher, 0.7, 1).is_err());
}

#[test]
fn ground_truth_wrapper_marks_sources() {
    let gt = LabelMap::new(1, 3, vec![0, 2, 0]).unwrap();
    let out = pseudo::PseudoLabel::from_ground_truth(&gt);
    assert_eq!(out.labels(), &gt);
    assert_eq!(out.source_counts(), (1, 0, 2));
}

#[test]
fn raising_threshold_never_adds_teacher_pixels() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (h, w) = (6, 6);
        let gt_data: Vec<u16> = (0..h * w)
            .map(|_| if rng.gen_bool(0.3) { 3 } else { 0 })
            .collect();
        let gt = LabelMap::new(h, w, gt_data).unwrap();
        let probs: Vec<f32> = (0..2 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let teacher = Tensor::from_vec(Shape::chw(2, h, w), probs).unwrap();
        let low = pseudo::generate_pseudo_label(&gt, &teacher, 0.3, 3).unwrap();
        let high = pseudo::generate_pseudo_label(&gt, &teacher, 0.8, 3).unwrap();
        let count = |p: &pseudo::PseudoLabel| p.source_counts().1;
        assert!(count(&high) <= count(&low));
        // Every teacher pixel surviving the high threshold keeps its label.
        for i in 0..h * w {
            if high.sources()[i] == SourceFlag::Teacher {
                assert_eq!(low.sources()[i], SourceFlag::Teacher);
                assert_eq!(low.labels().data()[i], high.labels().data()[i]);
            }
        }
    }
}

#[test]
fn binary_maps_partition_the_grid() {
    let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
    let bg = pseudo::binary_class_map(&labels, 0);
    let c1 = pseudo::binary_class_map(&labels, 1);
    let both = pseudo::binary_membership_map(&labels, &[1, 2]);
    assert_eq!(bg.value_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(c1.value_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    assert_eq!(both.value_vec(), vec![0.0, 1.0, 1.0, 1.0]);
}
