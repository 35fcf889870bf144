use incrseg_core::net::{ModelKind, SegmentationModel};
use incrseg_core::ops;
use incrseg_core::{Shape, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn backbone_gets_gradients_through_a_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = SegmentationModel::new(ModelKind::Adaptation, 4, 8, 2, &mut rng).unwrap();
    model.add_step_head(1, &mut rng).unwrap();

    let image = Tensor::from_vec(
        Shape::chw(3, 16, 16),
        (0..3 * 256).map(|i| (i % 89) as f32 / 88.0).collect(),
    )
    .unwrap();

    let tape = Tape::new();
    let (features, outs) = model.forward(&tape, &image).unwrap();
    let enc_vals = features.encoder.value_vec();
    let dec_vals = features.decoder.value_vec();
    let logit_vals = outs[1].class_logits.value_vec();
    println!(
        "encoder nonzero={} decoder nonzero={} logits nonzero={}",
        enc_vals.iter().filter(|&&v| v != 0.0).count(),
        dec_vals.iter().filter(|&&v| v != 0.0).count(),
        logit_vals.iter().filter(|&&v| v != 0.0).count(),
    );
    // Linear loss: gradient w.r.t. the logits is 1/N everywhere, never zero.
    let loss = ops::mean(&tape, &outs[1].class_logits);
    tape.backward(&loss).unwrap();

    let named = model.named_params();
    for (name, t) in &named {
        let g = t.grad();
        let nonzero = g.as_ref().map_or(false, |g| g.iter().any(|&v| v != 0.0));
        println!("{name}: grad={} nonzero={}", g.is_some(), nonzero);
    }
    let enc = named.iter().find(|(n, _)| n == "encoder_in.weight").unwrap();
    assert!(
        enc.1.grad().map_or(false, |g| g.iter().any(|&v| v != 0.0)),
        "no gradient reached the encoder"
    );
    drop(features);
}
