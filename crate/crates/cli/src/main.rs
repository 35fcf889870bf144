//! `incrseg` — train, evaluate, and inspect incremental segmentation
//! models on synthetic shape scenes.
//!
//! Exit codes: 0 success, 1 verification failure (gradient checks, audits,
//! diverged runs), 2 usage errors, 3 I/O or corrupt artifacts.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use incrseg_core::Error;

#[derive(Parser)]
#[command(name = "incrseg", version, about = "Incremental segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of synthetic scenes and write it to disk.
    GenData(GenDataArgs),
    /// Train one variant through all steps of a protocol.
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly generated validation scenes.
    Eval(EvalArgs),
    /// Train a matrix of variants and seeds and summarize the results.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Write per-channel logit grids and predictions for one scene.
    DumpLogits(DumpLogitsArgs),
}

/// Class-schedule presets: `initial-increment` over a fixed step count.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolPreset {
    /// 4 initial classes, then 1 new class in each of 4 further steps.
    #[value(name = "4-1")]
    FourOne,
    /// 2 initial classes, then 2 new classes in each of 2 further steps.
    #[value(name = "2-2")]
    TwoTwo,
    /// 6 initial classes, then 1 new class in each of 2 further steps.
    #[value(name = "6-1")]
    SixOne,
}

impl ProtocolPreset {
    fn resolve(self) -> incrseg_core::synthdata::TaskProtocol {
        use incrseg_core::synthdata::TaskProtocol;
        let (initial, increment, steps) = match self {
            ProtocolPreset::FourOne => (4, 1, 5),
            ProtocolPreset::TwoTwo => (2, 2, 3),
            ProtocolPreset::SixOne => (6, 1, 3),
        };
        TaskProtocol::new(initial, increment, steps).expect("presets are valid")
    }

    fn label(self) -> &'static str {
        match self {
            ProtocolPreset::FourOne => "4-1",
            ProtocolPreset::TwoTwo => "2-2",
            ProtocolPreset::SixOne => "6-1",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct GenDataArgs {
    /// Class schedule preset.
    #[arg(long, value_enum)]
    protocol: ProtocolPreset,
    /// Which split's sampling rules to follow.
    #[arg(long, value_enum)]
    split: SplitArg,
    /// Step whose scenes to draw (1-based).
    #[arg(long, default_value_t = 1)]
    step: usize,
    /// Number of scenes.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Destination dataset file.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Also write image/label previews of the first scenes here.
    #[arg(long)]
    preview_dir: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct TrainKnobs {
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    head_hidden: usize,
    #[arg(long, default_value_t = 24)]
    train_scenes: usize,
    #[arg(long, default_value_t = 16)]
    val_scenes: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 60)]
    epochs_initial: usize,
    #[arg(long, default_value_t = 36)]
    epochs_incremental: usize,
    #[arg(long, default_value_t = 0.1)]
    lr_initial: f32,
    #[arg(long, default_value_t = 0.05)]
    lr_incremental: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    /// Ceiling on the global L2 norm of each batch gradient.
    #[arg(long, default_value_t = 2.0)]
    clip_norm: f32,
    /// Backbone learning-rate scale during incremental steps.
    #[arg(long, default_value_t = 0.05)]
    backbone_lr_mult: f32,
    /// Confidence needed before a teacher prediction labels a pixel.
    #[arg(long, default_value_t = 0.7)]
    confidence: f32,
    /// Weight of the background push-off term.
    #[arg(long, default_value_t = 1.0)]
    w_plus: f32,
    /// Weight of the background hinge term.
    #[arg(long, default_value_t = 5.0)]
    w_minus: f32,
    /// Weight of the output distillation term.
    #[arg(long, default_value_t = 1.0)]
    w_gkd: f32,
    /// Weight of the feature distillation term.
    #[arg(long, default_value_t = 4.0)]
    w_bfd: f32,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    protocol: ProtocolPreset,
    /// Variant id from the ablation registry.
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory for checkpoints, the metrics stream, and the manifest.
    #[arg(long)]
    out_dir: std::path::PathBuf,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolPreset,
    /// Number of validation scenes.
    #[arg(long, default_value_t = 48)]
    scenes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    protocol: ProtocolPreset,
    /// Comma-separated variant ids (default: the whole registry).
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Only run cases whose name contains this substring.
    #[arg(long)]
    filter: Option<String>,
    /// Random restarts per case.
    #[arg(long, default_value_t = 20)]
    seeds: u32,
    /// Add a deliberately wrong backward rule; the run must then fail.
    #[arg(long)]
    inject_bug: bool,
    /// Emit one JSON object per case instead of text lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DumpLogitsArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolPreset,
    /// Seed of the validation stream the scene is drawn from.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Index of the scene within that stream.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out_dir: std::path::PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Archive(_) | Error::Dataset(_) => 3,
        Error::Config(_) | Error::UnknownVariant(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Clap reports usage problems on code 2 and help/version on 0.
        Err(err) => err.exit(),
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::GradCheck(args) => commands::grad_check(args),
        Command::DumpLogits(args) => commands::dump_logits(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
