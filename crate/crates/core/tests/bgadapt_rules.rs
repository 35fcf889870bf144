//! Aggregation semantics of residual background maps.

use incrseg_core::{bgadapt, ops, Shape, Tape, Tensor};

fn map(values: &[f32]) -> Tensor {
    Tensor::from_vec(Shape::chw(1, 1, values.len()), values.to_vec()).unwrap()
}

#[test]
fn filter_keeps_only_nonpositive_part() {
    let tape = Tape::new();
    let t = map(&[-2.0, -0.5, 0.0, 0.5, 2.0]);
    let f = bgadapt::filter(&tape, &t);
    assert_eq!(f.value_vec(), vec![-2.0, -0.5, 0.0, 0.0, 0.0]);
}

#[test]
fn inference_aggregate_matches_manual_sum() {
    let tape = Tape::new();
    let base = map(&[1.0, -1.0, 0.5]);
    let a2 = map(&[-0.5, 2.0, -0.25]);
    let a3 = map(&[0.75, -0.25, -0.5]);
    let agg = bgadapt::aggregate_inference(&tape, &base, &[&a2, &a3]).unwrap();
    // Positive residual parts are discarded; negative parts add up.
    assert_eq!(agg.value_vec(), vec![1.0 - 0.5, -1.0 - 0.25, 0.5 - 0.25 - 0.5]);
}

#[test]
fn inference_aggregate_with_no_residuals_is_the_base() {
    let tape = Tape::new();
    let base = map(&[0.25, -0.75]);
    let agg = bgadapt::aggregate_inference(&tape, &base, &[]).unwrap();
    assert_eq!(agg.value_vec(), base.value_vec());
}

#[test]
fn aggregate_never_exceeds_base() {
    // Each filtered residual is non-positive, so the aggregate is
    // monotonically non-increasing in the number of heads.
    let tape = Tape::new();
    let base = map(&[0.3, -0.2, 1.4, 0.0]);
    let residuals = [
        map(&[0.9, -0.1, 0.0, 0.4]),
        map(&[-0.3, 0.2, -1.0, 0.0]),
        map(&[0.1, 0.1, 0.1, -0.7]),
    ];
    let mut prev = bgadapt::aggregate_inference(&tape, &base, &[]).unwrap();
    for upto in 1..=residuals.len() {
        let refs: Vec<&Tensor> = residuals[..upto].iter().collect();
        let agg = bgadapt::aggregate_inference(&tape, &base, &refs).unwrap();
        for (p, a) in prev.value_vec().iter().zip(agg.value_vec()) {
            assert!(a <= *p);
        }
        prev = agg;
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let tape = Tape::new();
    let base = map(&[0.0, 0.0]);
    let bad = map(&[0.0, 0.0, 0.0]);
    assert!(bgadapt::aggregate_inference(&tape, &base, &[&bad]).is_err());
}

#[test]
fn training_aggregate_adds_live_residual_unfiltered() {
    let tape = Tape::new();
    let base = map(&[1.0, 1.0]);
    let frozen = map(&[-0.5, 0.5]);
    let live = map(&[2.0, -3.0]);
    live.set_requires_grad(true);
    let agg = bgadapt::aggregate_training(&tape, &base, &[&frozen], &live).unwrap();
    // Frozen residual is filtered (+0.5 dropped); the live one is not.
    assert_eq!(agg.value_vec(), vec![1.0 - 0.5 + 2.0, 1.0 - 3.0]);
}

#[test]
fn training_aggregate_rejects_live_base() {
    let tape = Tape::new();
    let base = map(&[0.0]);
    base.set_requires_grad(true);
    let live = map(&[0.0]);
    assert!(bgadapt::aggregate_training(&tape, &base, &[], &live).is_err());
}

#[test]
fn training_aggregate_rejects_live_frozen_residual() {
    let tape = Tape::new();
    let base = map(&[0.0]);
    let frozen = map(&[0.0]);
    frozen.set_requires_grad(true);
    let live = map(&[0.0]);
    assert!(bgadapt::aggregate_training(&tape, &base, &[&frozen], &live).is_err());
}

#[test]
fn training_gradient_reaches_only_the_live_residual() {
    let tape = Tape::new();
    let base = map(&[1.0, 2.0]);
    let frozen = map(&[-1.0, -2.0]);
    let live = map(&[0.5, -0.5]);
    live.set_requires_grad(true);
    let agg = bgadapt::aggregate_training(&tape, &base, &[&frozen], &live).unwrap();
    let loss = ops::sum(&tape, &agg);
    tape.backward(&loss).unwrap();
    assert_eq!(live.grad().unwrap(), vec![1.0, 1.0]);
    assert!(base.grad().is_none());
    assert!(frozen.grad().is_none());
}

#[test]
fn inference_gradient_is_blocked_on_positive_residuals() {
    // Where the residual is positive the filter output is constant zero,
    // so no gradient flows there; where negative it passes through.
    let tape = Tape::new();
    let base = map(&[0.0, 0.0]);
    let residual = map(&[1.5, -1.5]);
    residual.set_requires_grad(true);
    let agg = bgadapt::aggregate_inference(&tape, &base, &[&residual]).unwrap();
    let loss = ops::sum(&tape, &agg);
    tape.backward(&loss).unwrap();
    assert_eq!(residual.grad().unwrap(), vec![0.0, 1.0]);
}
