//! Implementations of the six subcommands.

use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use incrseg_core::gradcheck::{self, Tolerance};
use incrseg_core::imageio;
use incrseg_core::losses::LossWeights;
use incrseg_core::metrics;
use incrseg_core::net::SegmentationModel;
use incrseg_core::synthdata::{self, SceneConfig, Split, TaskProtocol};
use incrseg_core::trainer::{self, RunReport, TrainConfig, VariantSpec, VARIANT_IDS};
use incrseg_core::{archive, Error, Result, Tape};
use serde::Serialize;

use crate::manifest::Manifest;
use crate::{
    AblateArgs, DumpLogitsArgs, EvalArgs, GenDataArgs, GradCheckArgs, SplitArg, TrainArgs,
    TrainKnobs,
};

fn config_from(protocol: TaskProtocol, knobs: &TrainKnobs, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(protocol);
    cfg.width = knobs.width;
    cfg.head_hidden = knobs.head_hidden;
    cfg.train_scenes = knobs.train_scenes;
    cfg.val_scenes = knobs.val_scenes;
    cfg.batch_size = knobs.batch_size;
    cfg.epochs_initial = knobs.epochs_initial;
    cfg.epochs_incremental = knobs.epochs_incremental;
    cfg.lr_initial = knobs.lr_initial;
    cfg.lr_incremental = knobs.lr_incremental;
    cfg.momentum = knobs.momentum;
    cfg.weight_decay = knobs.weight_decay;
    cfg.clip_norm = knobs.clip_norm;
    cfg.backbone_lr_mult = knobs.backbone_lr_mult;
    cfg.confidence = knobs.confidence;
    cfg.weights = LossWeights::new(knobs.w_plus, knobs.w_minus, knobs.w_gkd, knobs.w_bfd)?;
    cfg.seed = seed;
    Ok(cfg)
}

fn knobs_json(knobs: &TrainKnobs) -> serde_json::Value {
    serde_json::json!({
        "width": knobs.width,
        "head_hidden": knobs.head_hidden,
        "train_scenes": knobs.train_scenes,
        "val_scenes": knobs.val_scenes,
        "batch_size": knobs.batch_size,
        "epochs_initial": knobs.epochs_initial,
        "epochs_incremental": knobs.epochs_incremental,
        "lr_initial": knobs.lr_initial,
        "lr_incremental": knobs.lr_incremental,
        "momentum": knobs.momentum,
        "weight_decay": knobs.weight_decay,
        "clip_norm": knobs.clip_norm,
        "backbone_lr_mult": knobs.backbone_lr_mult,
        "confidence": knobs.confidence,
        "w_plus": knobs.w_plus,
        "w_minus": knobs.w_minus,
        "w_gkd": knobs.w_gkd,
        "w_bfd": knobs.w_bfd,
    })
}

/// Check that a checkpoint's head layout is the one the protocol implies,
/// so group metrics line up with the right class ids.
fn check_layout(model: &SegmentationModel, protocol: &TaskProtocol, step: usize) -> Result<()> {
    if model.num_steps() != step {
        return Err(Error::Config(format!(
            "checkpoint carries {} heads but claims step {step}",
            model.num_steps()
        )));
    }
    if step > protocol.steps() {
        return Err(Error::Config(format!(
            "checkpoint step {step} exceeds the protocol's {} steps",
            protocol.steps()
        )));
    }
    for s in 1..=step {
        let expected = protocol.classes_at(s)?.len();
        let actual = model.heads()[s - 1].num_classes();
        if actual != expected {
            return Err(Error::Config(format!(
                "head {s} covers {actual} classes but the protocol defines {expected}"
            )));
        }
    }
    Ok(())
}

// --- gen-data -----------------------------------------------------------

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let protocol = args.protocol.resolve();
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    if args.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let scene_cfg = SceneConfig::default();
    let scenes = synthdata::build_split(&protocol, args.step, split, args.count, args.seed, &scene_cfg)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    synthdata::write_dataset(&args.out, &scenes)?;

    let root = args
        .out
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ".".into());
    let config = serde_json::json!({
        "protocol": args.protocol.label(),
        "split": format!("{split:?}").to_lowercase(),
        "step": args.step,
        "count": args.count,
        "seed": args.seed,
        "canvas": [scene_cfg.height, scene_cfg.width],
    });
    let mut manifest = Manifest::new("gen-data", config.clone(), &config.to_string());
    manifest.push_output(&root, &args.out)?;

    if let Some(dir) = &args.preview_dir {
        std::fs::create_dir_all(dir)?;
        let max_id = protocol.total_classes() as u16;
        for (i, scene) in scenes.iter().take(4).enumerate() {
            let image_path = dir.join(format!("scene{i}.ppm"));
            let label_path = dir.join(format!("scene{i}_labels.pgm"));
            imageio::write_ppm(&image_path, &scene.image)?;
            imageio::write_label_pgm(&label_path, &scene.labels, max_id)?;
        }
    }

    manifest.write(&args.out.with_extension("manifest.json"))?;
    println!(
        "wrote {} scenes to {}",
        scenes.len(),
        args.out.display()
    );
    Ok(())
}

// --- train --------------------------------------------------------------

pub fn train(args: TrainArgs) -> Result<()> {
    let protocol = args.protocol.resolve();
    let spec = trainer::variant(&args.variant)?;
    let cfg = config_from(protocol, &args.knobs, args.seed)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let report = {
        let file = std::fs::File::create(&metrics_path)?;
        let mut sink = std::io::BufWriter::new(file);
        let report = trainer::run_sequence(&cfg, &spec, Some(&mut sink), Some(&args.out_dir))?;
        sink.flush()?;
        report
    };

    let report_path = args.out_dir.join("report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(&report_path, text + "\n")?;

    let mut config = knobs_json(&args.knobs);
    let extra = config.as_object_mut().expect("knobs are an object");
    extra.insert("protocol".into(), args.protocol.label().into());
    extra.insert("variant".into(), spec.id.clone().into());
    extra.insert("seed".into(), args.seed.into());
    let mut manifest = Manifest::new("train", config, &cfg.canonical_string(&spec));
    manifest.push_output(&args.out_dir, &metrics_path)?;
    manifest.push_output(&args.out_dir, &report_path)?;
    for step in 1..=protocol.steps() {
        manifest.push_output(&args.out_dir, &args.out_dir.join(format!("model_step{step}.ckpt")))?;
    }
    manifest.write(&args.out_dir.join("manifest.json"))?;

    for step in &report.steps {
        match step.miou_incremental {
            Some(inc) => println!(
                "step {}: mIoU initial {:.4} incremental {:.4} all {:.4}",
                step.step, step.miou_initial, inc, step.miou_all
            ),
            None => println!(
                "step {}: mIoU initial {:.4} all {:.4}",
                step.step, step.miou_initial, step.miou_all
            ),
        }
    }
    Ok(())
}

// --- eval ---------------------------------------------------------------

pub fn eval(args: EvalArgs) -> Result<()> {
    let (model, meta) = archive::load_checkpoint(&args.checkpoint)?;
    let protocol = args.protocol.resolve();
    check_layout(&model, &protocol, meta.step_index)?;

    let scenes = synthdata::build_split(
        &protocol,
        1,
        Split::Val,
        args.scenes,
        args.seed,
        &SceneConfig::default(),
    )?;
    let miou = trainer::evaluate(&model, &protocol, meta.step_index, &scenes)?;

    let mut line = serde_json::Map::new();
    line.insert("step".into(), meta.step_index.into());
    line.insert("miou_initial".into(), miou.initial.into());
    if let Some(inc) = miou.incremental {
        line.insert("miou_incremental".into(), inc.into());
    }
    line.insert("miou_all".into(), miou.all.into());
    println!("{}", serde_json::Value::Object(line));
    Ok(())
}

// --- ablate -------------------------------------------------------------

#[derive(Serialize)]
struct VariantAggregate {
    variant: String,
    seeds: Vec<u64>,
    mean_miou_initial: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_miou_incremental: Option<f64>,
    mean_miou_all: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_probe_drift: Option<f64>,
}

#[derive(Serialize)]
struct AblationReport {
    protocol: String,
    runs: Vec<RunReport>,
    aggregates: Vec<VariantAggregate>,
}

fn aggregate(variant: &str, seeds: &[u64], runs: &[&RunReport]) -> VariantAggregate {
    let n = runs.len() as f64;
    let mean = |get: &dyn Fn(&RunReport) -> f64| runs.iter().map(|r| get(r)).sum::<f64>() / n;
    let mean_opt = |get: &dyn Fn(&RunReport) -> Option<f64>| {
        runs.iter()
            .map(|r| get(r))
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    VariantAggregate {
        variant: variant.to_string(),
        seeds: seeds.to_vec(),
        mean_miou_initial: mean(&|r| r.final_miou_initial),
        mean_miou_incremental: mean_opt(&|r| r.final_miou_incremental),
        mean_miou_all: mean(&|r| r.final_miou_all),
        mean_probe_drift: mean_opt(&|r| r.max_probe_drift),
    }
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let protocol = args.protocol.resolve();
    let variant_ids: Vec<String> = match &args.variants {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => VARIANT_IDS.iter().map(|s| s.to_string()).collect(),
    };
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    if variant_ids.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one variant and one seed".into()));
    }
    // Resolve everything up front so typos fail before any training.
    let specs: Vec<VariantSpec> = variant_ids
        .iter()
        .map(|id| trainer::variant(id))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut slots: Vec<Option<Result<RunReport>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);
    let slots = Mutex::new(slots);
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(2)
        .min(jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (v, seed) = jobs[i];
                let result = config_from(protocol, &args.knobs, seed)
                    .and_then(|cfg| trainer::run_sequence(&cfg, &specs[v], None, None));
                slots.lock().expect("result lock")[i] = Some(result);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for slot in slots.into_inner().expect("result lock") {
        runs.push(slot.expect("every job ran")?);
    }

    for run in &runs {
        match run.final_miou_incremental {
            Some(inc) => println!(
                "{:<20} seed {:<3} mIoU initial {:.4} incremental {:.4} all {:.4}",
                run.variant, run.seed, run.final_miou_initial, inc, run.final_miou_all
            ),
            None => println!(
                "{:<20} seed {:<3} mIoU initial {:.4} all {:.4}",
                run.variant, run.seed, run.final_miou_initial, run.final_miou_all
            ),
        }
    }

    let mut aggregates = Vec::new();
    for (v, id) in variant_ids.iter().enumerate() {
        let group: Vec<&RunReport> = runs
            .iter()
            .enumerate()
            .filter(|(i, _)| jobs[*i].0 == v)
            .map(|(_, r)| r)
            .collect();
        let agg = aggregate(id, &seeds, &group);
        match agg.mean_miou_incremental {
            Some(inc) => println!(
                "mean {:<15} mIoU initial {:.4} incremental {:.4} all {:.4}",
                agg.variant, agg.mean_miou_initial, inc, agg.mean_miou_all
            ),
            None => println!(
                "mean {:<15} mIoU initial {:.4} all {:.4}",
                agg.variant, agg.mean_miou_initial, agg.mean_miou_all
            ),
        }
        aggregates.push(agg);
    }

    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let report = AblationReport {
            protocol: args.protocol.label().to_string(),
            runs,
            aggregates,
        };
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        std::fs::write(out, text + "\n")?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

// --- grad-check ---------------------------------------------------------

pub fn grad_check(args: GradCheckArgs) -> Result<()> {
    let tol = Tolerance::default();
    if args.seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let outcomes = gradcheck::run_suite(args.filter.as_deref(), args.inject_bug, args.seeds, &tol);
    if outcomes.is_empty() {
        return Err(Error::Config(format!(
            "no gradient cases match filter '{}'",
            args.filter.as_deref().unwrap_or("")
        )));
    }

    let mut failures = 0usize;
    for outcome in &outcomes {
        if !outcome.pass {
            failures += 1;
        }
        if args.json {
            let line = serde_json::to_string(outcome)
                .map_err(|e| Error::Config(format!("outcome serialization: {e}")))?;
            println!("{line}");
        } else {
            let status = if outcome.pass { "PASS" } else { "FAIL" };
            let mut line = format!(
                "{status} {:<32} seeds={:<3} elements={:<6} worst_abs={:.3e} worst_rel={:.3e}",
                outcome.case, outcome.seeds, outcome.elements_checked,
                outcome.worst_abs, outcome.worst_rel
            );
            if let Some(f) = &outcome.failure {
                line.push_str(&format!(
                    "  (seed {}, '{}'[{}]: analytic {:.6e} vs numeric {:.6e})",
                    f.seed, f.tensor, f.index, f.analytic, f.numeric
                ));
            }
            println!("{line}");
        }
    }
    if failures > 0 {
        return Err(Error::GradCheck(format!(
            "{failures} of {} gradient cases failed",
            outcomes.len()
        )));
    }
    println!("all {} gradient cases passed", outcomes.len());
    Ok(())
}

// --- dump-logits --------------------------------------------------------

pub fn dump_logits(args: DumpLogitsArgs) -> Result<()> {
    let (model, meta) = archive::load_checkpoint(&args.checkpoint)?;
    let protocol = args.protocol.resolve();
    let step = meta.step_index;
    check_layout(&model, &protocol, step)?;

    let scenes = synthdata::build_split(
        &protocol,
        1,
        Split::Val,
        args.index + 1,
        args.seed,
        &SceneConfig::default(),
    )?;
    let scene = scenes.last().expect("count >= 1");
    let truth = synthdata::eval_labels(&protocol, step, scene)?;

    let tape = Tape::inference();
    let (_, outs) = model.forward(&tape, &scene.image)?;
    let bg = model.background_logit(&tape, &outs)?;
    let scores = model.inference_scores(&tape, &outs)?;
    let pred = metrics::predict_from_scores(&scores)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    let (h, w) = (truth.height(), truth.width());
    let max_id = protocol.num_known(step)? as u16;

    let mut written = vec![
        dir.join("scene.ppm"),
        dir.join("labels.pgm"),
        dir.join("pred.pgm"),
        dir.join("bg_logit.txt"),
    ];
    imageio::write_ppm(&written[0], &scene.image)?;
    imageio::write_label_pgm(&written[1], &truth, max_id)?;
    imageio::write_label_pgm(&written[2], &pred, max_id)?;
    imageio::write_text_grid(&written[3], &bg.value_vec(), h, w)?;

    for (i, out) in outs.iter().enumerate() {
        let head = i + 1;
        let ids = protocol.classes_at(head)?;
        let values = out.class_logits.value_vec();
        for (c, id) in ids.iter().enumerate() {
            let path = dir.join(format!("class{id}_logit.txt"));
            imageio::write_text_grid(&path, &values[c * h * w..(c + 1) * h * w], h, w)?;
            written.push(path);
        }
        if let Some(extra) = &out.extra {
            let name = if head == 1 {
                "bg_base.txt".to_string()
            } else {
                format!("residual_step{head}.txt")
            };
            let path = dir.join(name);
            imageio::write_text_grid(&path, &extra.value_vec(), h, w)?;
            written.push(path);
        }
    }

    let config = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "protocol": args.protocol.label(),
        "seed": args.seed,
        "index": args.index,
        "step": step,
    });
    let mut manifest = Manifest::new("dump-logits", config.clone(), &config.to_string());
    for path in &written {
        manifest.push_output(dir, path)?;
    }
    manifest.write(&dir.join("manifest.json"))?;
    println!("wrote {} files to {}", written.len() + 1, dir.display());
    Ok(())
}
