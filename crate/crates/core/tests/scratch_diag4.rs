use incrseg_core::synthdata::TaskProtocol;
use incrseg_core::trainer::{self, TrainConfig};

fn run2(variant_id: &str, seed: u64, einc: usize, bbm: f32) {
    let protocol = TaskProtocol::new(4, 1, 5).unwrap();
    let mut cfg = TrainConfig::new(protocol);
    cfg.seed = seed;
    cfg.width = 16;
    cfg.epochs_initial = 90;
    cfg.epochs_incremental = einc;
    cfg.backbone_lr_mult = bbm;
    cfg.scene.min_size = 6;
    cfg.scene.max_size = 10;
    let variant = trainer::variant(variant_id).unwrap();
    let t0 = std::time::Instant::now();
    let report = trainer::run_sequence(&cfg, &variant, None, None).unwrap();
    let traj: Vec<String> = report
        .steps
        .iter()
        .map(|st| {
            format!(
                "s{}:i{:.2}/n{:.2}",
                st.step,
                st.miou_initial,
                st.miou_incremental.unwrap_or(f64::NAN)
            )
        })
        .collect();
    println!(
        "{variant_id:>8} s{seed} ei={einc} bbm={bbm}: initial={:.3} incr={:.3} all={:.3} drift={:.3} ({:.0}s) [{}]",
        report.final_miou_initial,
        report.final_miou_incremental.unwrap_or(f64::NAN),
        report.final_miou_all,
        report.max_probe_drift.unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64(),
        traj.join(" ")
    );
}

fn run(variant_id: &str, seed: u64, zero_distill: bool) {
    let protocol = TaskProtocol::new(4, 1, 5).unwrap();
    let mut cfg = TrainConfig::new(protocol);
    cfg.seed = seed;
    cfg.width = 16;
    cfg.epochs_initial = 90;
    cfg.epochs_incremental = 24;
    cfg.scene.min_size = 6;
    cfg.scene.max_size = 10;
    if zero_distill {
        cfg.weights.gkd = 0.0;
        cfg.weights.bfd = 0.0;
    }
    let variant = trainer::variant(variant_id).unwrap();
    let t0 = std::time::Instant::now();
    let report = trainer::run_sequence(&cfg, &variant, None, None).unwrap();
    let traj: Vec<String> = report
        .steps
        .iter()
        .map(|st| {
            format!(
                "s{}:i{:.2}/n{:.2}",
                st.step,
                st.miou_initial,
                st.miou_incremental.unwrap_or(f64::NAN)
            )
        })
        .collect();
    println!(
        "{variant_id:>8} s{seed} zd={zero_distill}: initial={:.3} incr={:.3} all={:.3} drift={:.3} ({:.0}s) [{}]",
        report.final_miou_initial,
        report.final_miou_incremental.unwrap_or(f64::NAN),
        report.final_miou_all,
        report.max_probe_drift.unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64(),
        traj.join(" ")
    );
}

#[test]
fn incremental_capacity_sweep() {
    run2("full", 1, 24, 0.15);
    run2("full", 1, 24, 0.3);
    run2("full", 1, 36, 0.15);
}
