use incrseg_core::archive;
use incrseg_core::pseudo::{self, SourceFlag};
use incrseg_core::synthdata::{self, Split, TaskProtocol};
use incrseg_core::trainer::{self, TrainConfig};

fn teacher_quality(epochs: usize, min_size: usize, max_size: usize, lr: f32) {
    // Real 3-step protocol: step-1 scenes carry future classes as clutter.
    let protocol = TaskProtocol::new(2, 2, 3).unwrap();
    let mut cfg = TrainConfig::new(protocol);
    cfg.width = 8;
    cfg.head_hidden = 32;
    cfg.train_scenes = 24;
    cfg.val_scenes = 8;
    cfg.batch_size = 8;
    cfg.epochs_initial = epochs;
    cfg.epochs_incremental = 1;
    cfg.lr_initial = lr;
    cfg.scene.min_size = min_size;
    cfg.scene.max_size = max_size;
    cfg.seed = 1;
    let variant = trainer::variant("bga").unwrap();

    // Train only step 1 by truncating by hand: run on a 1-step view of the
    // same class pool is impossible, so run the full sequence but read the
    // step-1 checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let _ = trainer::run_sequence(&cfg, &variant, None, Some(dir.path())).unwrap();
    let (model, _) = archive::load_checkpoint(&dir.path().join("model_step1.ckpt")).unwrap();

    // Step-1 mIoU on its own classes.
    let miou = {
        let val = synthdata::build_split(&protocol, 1, Split::Val, 8, 99, &cfg.scene).unwrap();
        trainer::evaluate(&model, &protocol, 1, &val).unwrap().all
    };

    // Teacher view: step-2 training scenes, as the pseudo-labeler sees them.
    let scenes = synthdata::build_split(&protocol, 2, Split::Train, 8, 1, &cfg.scene).unwrap();
    let mut old_px = 0usize;
    let mut confident = 0usize;
    let mut sum_p = 0.0f64;
    let mut src_counts = [0usize; 3];
    for scene in &scenes {
        let gt = synthdata::training_labels(&protocol, 2, scene).unwrap();
        let full = synthdata::eval_labels(&protocol, 3, scene).unwrap();
        let probs = model.old_class_probs(&scene.image).unwrap();
        let v = probs.value_vec();
        let n = gt.data().len();
        let pl = pseudo::generate_pseudo_label(&gt, &probs, 0.7, 4).unwrap();
        for src in pl.sources() {
            src_counts[match src {
                SourceFlag::GroundTruth => 0,
                SourceFlag::Teacher => 1,
                SourceFlag::Background => 2,
            }] += 1;
        }
        // Confidence on pixels that truly belong to classes 1..2.
        for (i, &t) in full.data().iter().enumerate() {
            if t == 1 || t == 2 {
                let p = v[(t as usize - 1) * n + i];
                old_px += 1;
                sum_p += p as f64;
                if p >= 0.7 {
                    confident += 1;
                }
            }
        }
    }
    println!(
        "epochs={epochs:3} size={min_size}..{max_size} lr={lr}: s1 miou={miou:.3} | old px={} mean p={:.3} conf={:.1}% | pseudo gt/teacher/bg = {}/{}/{}",
        old_px,
        sum_p / old_px.max(1) as f64,
        100.0 * confident as f64 / old_px.max(1) as f64,
        src_counts[0],
        src_counts[1],
        src_counts[2]
    );
}

#[test]
fn teacher_confidence_grid() {
    teacher_quality(10, 4, 8, 0.1);
    teacher_quality(30, 4, 8, 0.1);
    teacher_quality(30, 6, 12, 0.1);
    teacher_quality(60, 6, 12, 0.1);
    teacher_quality(30, 6, 12, 0.2);
}
