//! Model architecture: shapes, silent initialization, head growth,
//! freezing, snapshots, and scoring layout.

use incrseg_core::net::{ModelKind, SegmentationModel};
use incrseg_core::{ops, Shape, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(h: usize, w: usize, fill: f32) -> Tensor {
    Tensor::full(Shape::chw(3, h, w), fill)
}

fn adaptation_model(steps: usize) -> SegmentationModel {
    let mut r = rng(5);
    let mut m = SegmentationModel::new(ModelKind::Adaptation, 8, 16, 4, &mut r).unwrap();
    for _ in 1..steps {
        m.add_step_head(1, &mut r).unwrap();
    }
    m
}

#[test]
fn forward_shapes_follow_the_architecture() {
    let m = adaptation_model(2);
    let tape = Tape::inference();
    let (features, outs) = m.forward(&tape, &image(32, 32, 0.5)).unwrap();
    assert_eq!(features.encoder.shape().dims(), &[8, 16, 16]);
    assert_eq!(features.decoder.shape().dims(), &[8, 32, 32]);
    assert_eq!(outs.len(), 2);
    assert_eq!(outs[0].class_logits.shape().dims(), &[4, 32, 32]);
    assert_eq!(outs[1].class_logits.shape().dims(), &[1, 32, 32]);
    assert_eq!(
        outs[0].extra.as_ref().unwrap().shape().dims(),
        &[1, 32, 32]
    );
    assert!(outs[1].extra.is_some());
}

#[test]
fn fresh_heads_are_exactly_silent() {
    let m = adaptation_model(3);
    let tape = Tape::inference();
    let (_, outs) = m.forward(&tape, &image(32, 32, 0.7)).unwrap();
    for out in &outs {
        assert!(out.class_logits.value_vec().iter().all(|&v| v == 0.0));
        let extra = out.extra.as_ref().unwrap();
        assert!(extra.value_vec().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn silent_residuals_leave_the_background_unchanged() {
    let m = adaptation_model(3);
    let tape = Tape::inference();
    let (_, outs) = m.forward(&tape, &image(32, 32, 0.3)).unwrap();
    let bg = m.background_logit(&tape, &outs).unwrap();
    assert_eq!(
        bg.value_vec(),
        outs[0].extra.as_ref().unwrap().value_vec()
    );
}

#[test]
fn shared_background_heads_have_no_extra_channel() {
    let mut r = rng(9);
    let mut m = SegmentationModel::new(ModelKind::SharedBackground, 8, 16, 2, &mut r).unwrap();
    m.add_step_head(2, &mut r).unwrap();
    let tape = Tape::inference();
    let (_, outs) = m.forward(&tape, &image(16, 16, 0.5)).unwrap();
    assert!(outs[0].extra.is_some());
    assert!(outs[1].extra.is_none());
    assert!(m.background_logit(&tape, &outs).is_ok());
}

#[test]
fn score_stack_has_one_channel_per_class_plus_background() {
    let m = adaptation_model(3); // classes 4 + 1 + 1
    let tape = Tape::inference();
    let (_, outs) = m.forward(&tape, &image(32, 32, 0.4)).unwrap();
    let scores = m.inference_scores(&tape, &outs).unwrap();
    assert_eq!(scores.shape().dims(), &[7, 32, 32]);
    // Everything is silent, so every channel sits at sigmoid(0) = 0.5.
    assert!(scores.value_vec().iter().all(|&v| v == 0.5));
}

#[test]
fn named_params_form_a_stable_catalog() {
    let m = adaptation_model(2);
    let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        vec![
            "encoder_in.weight",
            "encoder_in.bias",
            "encoder_mid.weight",
            "encoder_mid.bias",
            "encoder_out.weight",
            "encoder_out.bias",
            "decoder.weight",
            "decoder.bias",
            "head1.hidden.weight",
            "head1.hidden.bias",
            "head1.classes.weight",
            "head1.classes.bias",
            "head1.extra.weight",
            "head1.extra.bias",
            "head2.hidden.weight",
            "head2.hidden.bias",
            "head2.classes.weight",
            "head2.classes.bias",
            "head2.extra.weight",
            "head2.extra.bias",
        ]
    );

    let mut r = rng(2);
    let mut shared =
        SegmentationModel::new(ModelKind::SharedBackground, 8, 16, 2, &mut r).unwrap();
    shared.add_step_head(1, &mut r).unwrap();
    let shared_names: Vec<String> =
        shared.named_params().into_iter().map(|(n, _)| n).collect();
    assert!(shared_names.contains(&"head1.extra.weight".to_string()));
    assert!(!shared_names.contains(&"head2.extra.weight".to_string()));
}

#[test]
fn freezing_controls_the_trainable_set() {
    let m = adaptation_model(2);
    let all = m.trainable_params().len();
    assert_eq!(all, m.named_params().len());
    m.set_backbone_trainable(false);
    assert_eq!(m.trainable_params().len(), all - 8);
    m.set_head_trainable(1, false).unwrap();
    assert_eq!(m.trainable_params().len(), 6); // head2 hidden/classes/extra
    m.set_backbone_trainable(true);
    m.set_head_trainable(1, true).unwrap();
    assert_eq!(m.trainable_params().len(), all);
    assert!(m.set_head_trainable(7, false).is_err());
}

#[test]
fn snapshot_is_detached_and_value_identical() {
    let m = adaptation_model(2);
    let teacher = m.snapshot();
    let a = m.named_params();
    let b = teacher.named_params();
    assert_eq!(a.len(), b.len());
    for ((name_a, t_a), (name_b, t_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(t_a.value_vec(), t_b.value_vec());
        assert!(!t_b.requires_grad(), "{name_b} must be frozen");
    }
    // The teacher runs without recording anything suspicious.
    let tape = Tape::new();
    let (_, outs) = teacher.forward(&tape, &image(32, 32, 0.5)).unwrap();
    assert_eq!(tape.num_records(), 0);
    assert!(!outs[0].class_logits.requires_grad());
}

#[test]
fn old_class_probs_concatenate_in_head_order() {
    let m = adaptation_model(3);
    let probs = m.old_class_probs(&image(32, 32, 0.6)).unwrap();
    assert_eq!(probs.shape().dims(), &[6, 32, 32]);
    assert!(!probs.requires_grad());
    assert!(probs.value_vec().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn initialization_is_seed_deterministic() {
    let build = |seed| {
        let mut r = rng(seed);
        SegmentationModel::new(ModelKind::Adaptation, 8, 16, 4, &mut r).unwrap()
    };
    let a = build(11);
    let b = build(11);
    let c = build(12);
    for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params()) {
        assert_eq!(ta.value_vec(), tb.value_vec());
    }
    let differs = a
        .named_params()
        .iter()
        .zip(c.named_params())
        .any(|((_, ta), (_, tc))| ta.value_vec() != tc.value_vec());
    assert!(differs);
}

#[test]
fn hidden_init_scale_is_plausible() {
    let mut r = rng(3);
    let m = SegmentationModel::new(ModelKind::Adaptation, 8, 64, 4, &mut r).unwrap();
    let (_, w) = m
        .named_params()
        .into_iter()
        .find(|(n, _)| n == "encoder_mid.weight")
        .unwrap();
    let vals = w.value_vec();
    let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
    let var: f32 =
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / vals.len() as f32;
    let expected = 2.0 / (8.0 * 9.0);
    assert!(var > expected * 0.5 && var < expected * 2.0, "var {var}");
}

#[test]
fn gradients_from_a_new_head_skip_old_head_parameters() {
    let m = adaptation_model(2);
    let tape = Tape::new();
    let (_, outs) = m.forward(&tape, &image(32, 32, 0.5)).unwrap();
    let loss = ops::mean(&tape, &outs[1].class_logits);
    tape.backward(&loss).unwrap();
    let zero_or_none = |name: &str| {
        let (_, t) = m
            .named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap();
        t.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0))
    };
    assert!(zero_or_none("head1.classes.weight"));
    assert!(zero_or_none("head1.extra.weight"));
    assert!(zero_or_none("head1.hidden.weight"));
    // The shared backbone does receive gradient through head 2's hidden
    // layer; with zero-initialized head outputs the chain is cut at the
    // output convolution, so only head2's own output weights see signal.
    let (_, h2w) = m
        .named_params()
        .into_iter()
        .find(|(n, _)| n == "head2.classes.weight")
        .unwrap();
    assert!(h2w.grad().is_some());
}

#[test]
fn odd_sized_images_are_rejected() {
    let m = adaptation_model(1);
    let tape = Tape::inference();
    assert!(m.forward(&tape, &image(31, 32, 0.5)).is_err());
    let not_rgb = Tensor::full(Shape::chw(1, 32, 32), 0.5);
    assert!(m.forward(&tape, &not_rgb).is_err());
}
