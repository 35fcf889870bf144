//! Randomized invariants: filter algebra, residual aggregation, pseudo-label
//! partitioning, loss-value bounds, and scene generation.

use proptest::prelude::*;

use incrseg_core::bgadapt;
use incrseg_core::label::LabelMap;
use incrseg_core::losses::{self, LossWeights, RegionMasks};
use incrseg_core::ops;
use incrseg_core::pseudo::{self, PseudoLabel, SourceFlag};
use incrseg_core::synthdata::{self, SceneConfig, Split, TaskProtocol};
use incrseg_core::{Shape, Tape, Tensor};

const H: usize = 4;
const W: usize = 4;

fn map_from(values: Vec<f32>) -> Tensor {
    Tensor::from_vec(Shape::chw(1, H, W), values).unwrap()
}

/// Map values that are exact in f32 and whose partial sums stay exact:
/// signed multiples of 2^-10 with magnitude in [0.01, 4].
fn quantized_value() -> impl Strategy<Value = f32> {
    (11i32..=4096, proptest::bool::ANY)
        .prop_map(|(ticks, neg)| {
            let v = ticks as f32 / 1024.0;
            if neg {
                -v
            } else {
                v
            }
        })
}

fn quantized_map() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(quantized_value(), H * W)
}

fn small_value() -> impl Strategy<Value = f32> {
    (-4.0f32..4.0).prop_map(|v| (v * 64.0).round() / 64.0)
}

fn small_map() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(small_value(), H * W)
}

fn unit_map() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(0.0f32..=1.0, H * W)
}

fn label_grid() -> impl Strategy<Value = Vec<u16>> {
    proptest::collection::vec(0u16..=4, H * W)
}

proptest! {
    // --- filter algebra -------------------------------------------------

    #[test]
    fn filter_output_is_never_positive(values in small_map()) {
        let tape = Tape::inference();
        let out = bgadapt::filter(&tape, &map_from(values));
        prop_assert!(out.value_vec().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn filter_is_idempotent_bitwise(values in small_map()) {
        let tape = Tape::inference();
        let once = bgadapt::filter(&tape, &map_from(values));
        let twice = bgadapt::filter(&tape, &once);
        prop_assert_eq!(
            once.value_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            twice.value_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn filter_passes_nonpositive_values_through(values in small_map()) {
        let tape = Tape::inference();
        let input = map_from(values.clone());
        let out = bgadapt::filter(&tape, &input).value_vec();
        for (x, y) in values.iter().zip(&out) {
            if *x < 0.0 {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            } else {
                // Positive values and either signed zero clamp to +0.0.
                prop_assert_eq!(y.to_bits(), 0.0f32.to_bits());
            }
        }
    }

    // --- aggregation ----------------------------------------------------

    /// On quantized inputs every partial sum is exact in f32, so the
    /// aggregate is invariant under any reordering of the residual list,
    /// bit for bit.
    #[test]
    fn aggregation_is_permutation_invariant_on_quantized_maps(
        base in quantized_map(),
        residuals in proptest::collection::vec(quantized_map(), 1..6),
        seed in any::<u64>(),
    ) {
        let tape = Tape::inference();
        let base = map_from(base);
        let maps: Vec<Tensor> = residuals.into_iter().map(map_from).collect();

        let refs: Vec<&Tensor> = maps.iter().collect();
        let straight = bgadapt::aggregate_inference(&tape, &base, &refs).unwrap();

        let mut order: Vec<usize> = (0..maps.len()).collect();
        // Deterministic shuffle driven by the generated seed.
        let mut state = seed;
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<&Tensor> = order.iter().map(|&i| &maps[i]).collect();
        let permuted = bgadapt::aggregate_inference(&tape, &base, &shuffled).unwrap();

        prop_assert_eq!(
            straight.value_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            permuted.value_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adding_a_residual_never_raises_the_aggregate(
        base in small_map(),
        residuals in proptest::collection::vec(small_map(), 1..5),
    ) {
        let tape = Tape::inference();
        let base = map_from(base);
        let maps: Vec<Tensor> = residuals.into_iter().map(map_from).collect();
        let mut previous = bgadapt::aggregate_inference(&tape, &base, &[]).unwrap();
        for k in 1..=maps.len() {
            let refs: Vec<&Tensor> = maps[..k].iter().collect();
            let next = bgadapt::aggregate_inference(&tape, &base, &refs).unwrap();
            for (p, n) in previous.value_vec().iter().zip(next.value_vec()) {
                prop_assert!(n <= *p + 1e-6);
            }
            previous = next;
        }
    }

    // --- pseudo-labels --------------------------------------------------

    #[test]
    fn pseudo_label_partitions_every_pixel(
        grid in label_grid(),
        probs in proptest::collection::vec(unit_map(), 3),
        confidence in 0.05f32..0.95,
    ) {
        let gt = LabelMap::new(H, W, grid).unwrap();
        let flat: Vec<f32> = probs.into_iter().flatten().collect();
        let teacher = Tensor::from_vec(Shape::chw(3, H, W), flat).unwrap();
        let out = pseudo::generate_pseudo_label(&gt, &teacher, confidence, 4).unwrap();

        let (from_gt, from_teacher, background) = out.source_counts();
        prop_assert_eq!(from_gt + from_teacher + background, H * W);
        for y in 0..H {
            for x in 0..W {
                let src = out.source(y, x);
                let label = out.labels().get(y, x);
                match src {
                    SourceFlag::GroundTruth => {
                        prop_assert_eq!(label, gt.get(y, x));
                        prop_assert!(gt.get(y, x) != 0);
                    }
                    SourceFlag::Teacher => {
                        prop_assert_eq!(gt.get(y, x), 0);
                        prop_assert!((1..=3).contains(&label));
                    }
                    SourceFlag::Background => {
                        prop_assert_eq!(gt.get(y, x), 0);
                        prop_assert_eq!(label, 0);
                    }
                }
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_teacher_pixels(
        grid in label_grid(),
        probs in proptest::collection::vec(unit_map(), 3),
        lo in 0.05f32..0.5,
        hi in 0.5f32..0.95,
    ) {
        let gt = LabelMap::new(H, W, grid).unwrap();
        let flat: Vec<f32> = probs.into_iter().flatten().collect();
        let teacher = Tensor::from_vec(Shape::chw(3, H, W), flat).unwrap();
        let loose = pseudo::generate_pseudo_label(&gt, &teacher, lo, 4).unwrap();
        let strict = pseudo::generate_pseudo_label(&gt, &teacher, hi, 4).unwrap();
        prop_assert!(strict.source_counts().1 <= loose.source_counts().1);
    }

    // --- loss bounds ----------------------------------------------------

    #[test]
    fn losses_stay_nonnegative_and_finite(
        grid in label_grid(),
        logits in proptest::collection::vec(small_value(), 3 * H * W),
        student in small_map(),
        teacher in small_map(),
    ) {
        let tape = Tape::new();
        let labels = LabelMap::new(H, W, grid).unwrap();
        let pseudo = PseudoLabel::from_ground_truth(&labels);
        let masks = RegionMasks::from_labels(pseudo.labels(), &[3, 4]);

        let raw = Tensor::from_vec(Shape::chw(3, H, W), logits).unwrap();
        let probs = ops::sigmoid(&tape, &raw);
        let pb = losses::pb_bce(&tape, &probs, &pseudo, &[3, 4]).unwrap();
        prop_assert!(pb.item().unwrap() >= -1e-6);
        prop_assert!(pb.item().unwrap().is_finite());

        let aggregate = map_from(student.clone());
        let plus = losses::bga_plus(&tape, &aggregate, &masks).unwrap();
        prop_assert!(plus.item().unwrap() >= -1e-6);

        let phi = ops::sigmoid(&tape, &aggregate);
        let minus = losses::bga_minus(&tape, &phi, &masks).unwrap();
        prop_assert!(minus.item().unwrap() >= -1e-6);

        let s = ops::sigmoid(&tape, &map_from(student.clone()));
        let t = ops::sigmoid(&tape, &map_from(teacher.clone())).detach();
        let kd = losses::gkd(&tape, &[(s, t)]).unwrap();
        prop_assert!(kd.item().unwrap() >= -1e-6);

        let pairs = [(map_from(student), map_from(teacher).detach())];
        let fd = losses::bfd(&tape, &pairs, masks.background()).unwrap();
        prop_assert!(fd.item().unwrap() >= 0.0);

        let comps = losses::LossComponents {
            pb_bce: pb,
            bga_plus: Some(plus),
            bga_minus: Some(minus),
            gkd: Some(kd),
            bfd: Some(fd),
        };
        let total = losses::total_objective(&tape, &comps, &LossWeights::default()).unwrap();
        prop_assert!(total.item().unwrap() >= -1e-5);
        prop_assert!(total.item().unwrap().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // --- scenes ---------------------------------------------------------

    #[test]
    fn generated_scenes_always_satisfy_the_visibility_contract(
        seed in any::<u64>(),
        step in 1usize..=3,
    ) {
        let protocol = TaskProtocol::new(2, 2, 3).unwrap();
        let cfg = SceneConfig::default();
        let scenes = synthdata::build_split(&protocol, step, Split::Train, 3, seed, &cfg).unwrap();
        prop_assert_eq!(scenes.len(), 3);
        for scene in &scenes {
            for v in scene.image.value_vec() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let counts: Vec<usize> = (0..=6u16)
                .map(|id| scene.labels.count(id))
                .collect();
            for (id, count) in counts.iter().enumerate().skip(1) {
                prop_assert!(
                    *count == 0 || *count >= 8,
                    "class {id} present with only {count} pixels"
                );
            }
            prop_assert!(counts.iter().skip(1).sum::<usize>() > 0, "empty scene");
        }
    }
}
