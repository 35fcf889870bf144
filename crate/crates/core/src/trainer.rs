//! Incremental training orchestration.
//!
//! A run walks the steps of a protocol in order.  The first step trains the
//! backbone and first head on the initial classes.  Each later step
//! snapshots the model as a frozen teacher, adds a head for the new
//! classes, rebuilds pseudo-labels from the teacher's confident old-class
//! predictions, and trains under the configured combination of losses,
//! freezing, and background scheme.
//!
//! Determinism is a hard requirement: given equal configuration and seed,
//! two runs produce byte-identical metrics streams and checkpoints.
//! Nothing here reads clocks, iterates hash maps into output, or samples
//! outside the seeded generators.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archive;
use crate::bgadapt;
use crate::error::{Error, Result};
use crate::losses::{self, ComponentValues, LossComponents, LossWeights, RegionMasks};
use crate::metrics::{self, ConfusionCounts, GroupedMiou};
use crate::net::{HeadOutput, ModelKind, SegmentationModel};
use crate::ops;
use crate::pseudo::{self, PseudoLabel};
use crate::synthdata::{self, Scene, SceneConfig, Split, TaskProtocol};
use crate::tensor::{Shape, Tape, Tensor};

// --- optimizer and schedule --------------------------------------------

/// Stochastic gradient descent with classical momentum and coupled weight
/// decay: `v <- m*v + g + wd*p; p <- p - lr*v`.  Parameters join in groups;
/// each group scales the step's learning rate by its own factor, so a
/// backbone can crawl while fresh heads train at full speed.
pub struct Sgd {
    params: Vec<Tensor>,
    lr_scales: Vec<f32>,
    velocities: Vec<Vec<f32>>,
    momentum: f32,
    weight_decay: f32,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f32, weight_decay: f32) -> Result<Sgd> {
        Sgd::with_groups(vec![(params, 1.0)], momentum, weight_decay)
    }

    /// Groups of `(parameters, learning-rate scale)`.
    pub fn with_groups(
        groups: Vec<(Vec<Tensor>, f32)>,
        momentum: f32,
        weight_decay: f32,
    ) -> Result<Sgd> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        let mut params = Vec::new();
        let mut lr_scales = Vec::new();
        for (group, scale) in groups {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::Config(format!(
                    "learning-rate scale must be positive, got {scale}"
                )));
            }
            for p in group {
                if !p.requires_grad() {
                    return Err(Error::ContractViolation {
                        op: "sgd",
                        reason: "optimizer given a tensor that tracks no gradient".into(),
                    });
                }
                params.push(p);
                lr_scales.push(scale);
            }
        }
        let velocities = params
            .iter()
            .map(|p| vec![0.0f32; p.shape().numel()])
            .collect();
        Ok(Sgd {
            params,
            lr_scales,
            velocities,
            momentum,
            weight_decay,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// One update with the given learning rate.  A parameter without a
    /// gradient this round still feels weight decay.
    pub fn step(&mut self, lr: f32) {
        for ((p, scale), v) in self
            .params
            .iter()
            .zip(self.lr_scales.iter())
            .zip(self.velocities.iter_mut())
        {
            let grad = p.grad();
            let mut values = p.values_mut();
            let rate = lr * scale;
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + self.weight_decay * values[i];
                v[i] = self.momentum * v[i] + g;
                values[i] -= rate * v[i];
            }
        }
    }

    /// Rescale all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.  Sum-shaped objectives can emit
    /// updates that scale with pixel count; without a ceiling a single batch
    /// can throw the backbone arbitrarily far.
    pub fn clip_grad_norm(&self, max_norm: f32) -> f32 {
        let mut sq = 0.0f64;
        for p in &self.params {
            if let Some(g) = p.grad() {
                for v in g {
                    sq += (v as f64) * (v as f64);
                }
            }
        }
        let norm = sq.sqrt() as f32;
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for p in &self.params {
                p.scale_grad(factor);
            }
        }
        norm
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Polynomial decay: `base * (1 - iter/max_iter)^0.9`.
#[derive(Clone, Copy, Debug)]
pub struct PolySchedule {
    base: f32,
    max_iter: usize,
}

impl PolySchedule {
    pub fn new(base: f32, max_iter: usize) -> Result<PolySchedule> {
        if max_iter == 0 {
            return Err(Error::Config(
                "schedule needs at least one iteration".into(),
            ));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Config(format!(
                "base learning rate must be positive, got {base}"
            )));
        }
        Ok(PolySchedule { base, max_iter })
    }

    pub fn lr_at(&self, iter: usize) -> f32 {
        let frac = 1.0 - (iter.min(self.max_iter) as f32 / self.max_iter as f32);
        self.base * frac.powf(0.9)
    }
}

// --- variants -----------------------------------------------------------

/// Objective acting on the background map during incremental steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgaScheme {
    None,
    /// Push background off over new-class pixels.
    Plus,
    /// Hinge keeping background on over pseudo-background pixels.
    Minus,
    Both,
    /// Alternative: drive the aggregate logit itself to zero over
    /// pseudo-background.
    MseZero,
    /// Alternative: plain per-pixel classification of the background
    /// probability (on where the label says background, off where it says
    /// a new class).
    BceOne,
}

/// Feature-space distillation flavor during incremental steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdScheme {
    None,
    /// Cross-entropy between sigmoid-squashed features, unmasked.
    Kd,
    /// Mean squared feature distance, unmasked.
    Mse,
    /// Squared feature distance summed over pseudo-background pixels only.
    Bfd,
}

/// What stays trainable during incremental steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Everything adapts; only the losses protect old knowledge.
    None,
    /// Backbone and previous heads are frozen (a shared-background model
    /// keeps its background classifier trainable, since that channel must
    /// keep absorbing the new classes' disappearance from background).
    BackboneAndOldHeads,
}

/// One configuration of the ablation space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub id: String,
    pub kind: ModelKind,
    pub bga: BgaScheme,
    pub fd: FdScheme,
    pub use_gkd: bool,
    pub freeze: FreezePolicy,
}

/// All registered variant ids, in presentation order.
pub const VARIANT_IDS: [&str; 12] = [
    "baseline",
    "bga",
    "bga-bfd",
    "bga-bfd-gkd",
    "bga-bfd-gkd-minus",
    "bga-bfd-gkd-plus",
    "full",
    "mse0",
    "bce1",
    "fd-none",
    "fd-kd",
    "fd-mse",
];

/// Resolve a variant id.
pub fn variant(id: &str) -> Result<VariantSpec> {
    use BgaScheme as B;
    use FdScheme as F;
    use FreezePolicy as Z;
    use ModelKind as K;
    let (kind, bga, fd, use_gkd, freeze) = match id {
        // Additive chain from the shared-background baseline to the full
        // configuration.
        "baseline" => (K::SharedBackground, B::None, F::None, false, Z::BackboneAndOldHeads),
        "bga" => (K::Adaptation, B::None, F::None, false, Z::BackboneAndOldHeads),
        "bga-bfd" => (K::Adaptation, B::None, F::Bfd, false, Z::None),
        "bga-bfd-gkd" => (K::Adaptation, B::None, F::Bfd, true, Z::None),
        "bga-bfd-gkd-minus" => (K::Adaptation, B::Minus, F::Bfd, true, Z::None),
        "bga-bfd-gkd-plus" => (K::Adaptation, B::Plus, F::Bfd, true, Z::None),
        "full" => (K::Adaptation, B::Both, F::Bfd, true, Z::None),
        // Background-objective alternatives, otherwise as "full".
        "mse0" => (K::Adaptation, B::MseZero, F::Bfd, true, Z::None),
        "bce1" => (K::Adaptation, B::BceOne, F::Bfd, true, Z::None),
        // Feature-distillation alternatives, otherwise as "full".
        "fd-none" => (K::Adaptation, B::Both, F::None, true, Z::None),
        "fd-kd" => (K::Adaptation, B::Both, F::Kd, true, Z::None),
        "fd-mse" => (K::Adaptation, B::Both, F::Mse, true, Z::None),
        other => return Err(Error::UnknownVariant(other.to_string())),
    };
    Ok(VariantSpec {
        id: id.to_string(),
        kind,
        bga,
        fd,
        use_gkd,
        freeze,
    })
}

// --- configuration ------------------------------------------------------

/// Numeric knobs of one run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub protocol: TaskProtocol,
    pub scene: SceneConfig,
    pub width: usize,
    pub head_hidden: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub batch_size: usize,
    pub epochs_initial: usize,
    pub epochs_incremental: usize,
    pub lr_initial: f32,
    pub lr_incremental: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    /// Learning-rate scale for backbone parameters during incremental
    /// steps; the first step always trains the backbone at full rate.
    pub backbone_lr_mult: f32,
    pub weights: LossWeights,
    pub confidence: f32,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a protocol.
    pub fn new(protocol: TaskProtocol) -> TrainConfig {
        TrainConfig {
            protocol,
            scene: SceneConfig::default(),
            width: 8,
            head_hidden: 32,
            train_scenes: 24,
            val_scenes: 16,
            batch_size: 8,
            epochs_initial: 60,
            epochs_incremental: 36,
            lr_initial: 0.1,
            lr_incremental: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 2.0,
            backbone_lr_mult: 0.05,
            weights: LossWeights::default(),
            confidence: 0.7,
            seed: 42,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.val_scenes == 0 || self.batch_size == 0 {
            return Err(Error::Config("scene and batch counts must be positive".into()));
        }
        if self.epochs_initial == 0 || self.epochs_incremental == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "confidence must lie strictly between 0 and 1, got {}",
                self.confidence
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "gradient clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.backbone_lr_mult > 0.0 && self.backbone_lr_mult <= 1.0) {
            return Err(Error::Config(format!(
                "backbone learning-rate scale must lie in (0, 1], got {}",
                self.backbone_lr_mult
            )));
        }
        self.scene.validate()?;
        Ok(())
    }

    /// Canonical one-line snapshot of everything that shapes a run; hashed
    /// into checkpoints and manifests.
    pub fn canonical_string(&self, variant: &VariantSpec) -> String {
        format!(
            "variant={} kind={:?} bga={:?} fd={:?} gkd={} freeze={:?} \
             protocol={}-{}x{} canvas={}x{} width={} head_hidden={} \
             train_scenes={} val_scenes={} batch={} epochs={}+{} \
             lr={}+{} momentum={} wd={} clip={} bb_mult={} weights={},{},{},{} conf={} seed={}",
            variant.id,
            variant.kind,
            variant.bga,
            variant.fd,
            variant.use_gkd,
            variant.freeze,
            self.protocol.initial(),
            self.protocol.increment(),
            self.protocol.steps(),
            self.scene.height,
            self.scene.width,
            self.width,
            self.head_hidden,
            self.train_scenes,
            self.val_scenes,
            self.batch_size,
            self.epochs_initial,
            self.epochs_incremental,
            self.lr_initial,
            self.lr_incremental,
            self.momentum,
            self.weight_decay,
            self.clip_norm,
            self.backbone_lr_mult,
            self.weights.bga_plus,
            self.weights.bga_minus,
            self.weights.gkd,
            self.weights.bfd,
            self.confidence,
            self.seed,
        )
    }
}

// --- metrics stream -----------------------------------------------------

#[derive(Serialize)]
struct EpochRecord<'a> {
    event: &'static str,
    variant: &'a str,
    step: usize,
    epoch: usize,
    lr: f32,
    loss_pbbce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_bga_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_bga_minus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_gkd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_bfd: Option<f64>,
    loss_total: f64,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    event: &'static str,
    variant: &'a str,
    step: usize,
    miou_initial: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    miou_incremental: Option<f64>,
    miou_all: f64,
}

#[derive(Serialize)]
struct DriftRecord<'a> {
    event: &'static str,
    variant: &'a str,
    step: usize,
    drift: f64,
}

fn emit(sink: &mut Option<&mut dyn Write>, record: &impl Serialize) -> Result<()> {
    if let Some(out) = sink {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

// --- reports ------------------------------------------------------------

/// Mean component values over one epoch.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct EpochLosses {
    pub pbbce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bga_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bga_minus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gkd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bfd: Option<f64>,
    pub total: f64,
}

/// Outcome of one step.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub classes: Vec<u16>,
    pub final_losses: EpochLosses,
    pub miou_initial: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou_incremental: Option<f64>,
    pub miou_all: f64,
    /// Largest absolute change of any old-class probability on the probe
    /// batch relative to the step's teacher; absent on the first step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_drift: Option<f64>,
}

/// Outcome of a whole run.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub steps: Vec<StepReport>,
    pub final_miou_initial: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_miou_incremental: Option<f64>,
    pub final_miou_all: f64,
    /// Maximum probe drift over all incremental steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_probe_drift: Option<f64>,
}

// --- context of one step -------------------------------------------------

struct PreparedScene {
    image: Tensor,
    pseudo: PseudoLabel,
    masks: RegionMasks,
    /// Pseudo-background mask downsampled to the encoder resolution.
    coarse_background: Tensor,
}

struct StepContext<'a> {
    step: usize,
    novel: Vec<u16>,
    teacher: Option<&'a SegmentationModel>,
    variant: &'a VariantSpec,
    weights: &'a LossWeights,
}

/// Nearest 2x downsampling of a binary mask: a coarse cell is background
/// only when all four fine cells are.
fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = mask.shape().as_chw("downsample_mask")?;
    if c != 1 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "downsample_mask",
            shape: mask.shape().to_string(),
            reason: "expected a single-channel mask with even sides".into(),
        });
    }
    let values = mask.value_vec();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let all = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .all(|&(dy, dx)| values[(2 * y + dy) * w + 2 * x + dx] == 1.0);
            out[y * ow + x] = all as u32 as f32;
        }
    }
    Tensor::from_vec(Shape::chw(1, oh, ow), out)
}

/// Per-head student probability maps for distillation: class channels plus
/// the head's extra channel when present, squashed through a sigmoid.
fn head_prob_stack(tape: &Tape, out: &HeadOutput) -> Result<Tensor> {
    let stack = match &out.extra {
        Some(extra) => ops::concat_channels(tape, &[&out.class_logits, extra])?,
        None => out.class_logits.clone(),
    };
    Ok(ops::sigmoid(tape, &stack))
}

/// The background logit entering this step's losses: previous maps join as
/// detached constants, the current step's residual (or the shared map)
/// stays live.
fn training_background(
    tape: &Tape,
    ctx: &StepContext<'_>,
    outs: &[HeadOutput],
) -> Result<Tensor> {
    let first = outs[0]
        .extra
        .as_ref()
        .ok_or(Error::ContractViolation {
            op: "training_background",
            reason: "first head must carry the base background channel".into(),
        })?;
    match ctx.variant.kind {
        ModelKind::SharedBackground => Ok(first.clone()),
        ModelKind::Adaptation => {
            if ctx.step == 1 {
                return Ok(first.clone());
            }
            let base = first.detach();
            let frozen: Vec<Tensor> = outs[1..ctx.step - 1]
                .iter()
                .map(|o| {
                    o.extra.as_ref().map(|e| e.detach()).ok_or(Error::ContractViolation {
                        op: "training_background",
                        reason: "adaptation heads must carry residual channels".into(),
                    })
                })
                .collect::<Result<_>>()?;
            let frozen_refs: Vec<&Tensor> = frozen.iter().collect();
            let live = outs[ctx.step - 1]
                .extra
                .as_ref()
                .ok_or(Error::ContractViolation {
                    op: "training_background",
                    reason: "the current head must carry a residual channel".into(),
                })?;
            bgadapt::aggregate_training(tape, &base, &frozen_refs, live)
        }
    }
}

/// The alternative background objectives that can replace the residual
/// pair in ablations.
fn alternative_bga(
    tape: &Tape,
    scheme: BgaScheme,
    bg_logit: &Tensor,
    masks: &RegionMasks,
) -> Result<Option<Tensor>> {
    match scheme {
        BgaScheme::MseZero => {
            let sq = ops::square(tape, bg_logit);
            Ok(Some(ops::masked_mean(tape, &sq, masks.background())?))
        }
        BgaScheme::BceOne => {
            let prob = ops::sigmoid(tape, bg_logit);
            let on = ops::mul(tape, masks.background(), &ops::log_guarded(tape, &prob))?;
            let off_prob = ops::add_scalar(tape, &ops::neg(tape, &prob), 1.0);
            let off = ops::mul(tape, masks.novel(), &ops::log_guarded(tape, &off_prob))?;
            let union = ops::add(tape, masks.background(), masks.novel())?;
            let score = ops::add(tape, &on, &off)?;
            let mean = ops::masked_mean(tape, &score, &union)?;
            Ok(Some(ops::neg(tape, &mean)))
        }
        _ => Ok(None),
    }
}

/// One feature-distillation site: the masked squared-difference sum scaled
/// down to a per-element mean, so the term is comparable across feature
/// resolutions and channel counts.  An empty mask contributes zero.
fn scaled_bfd_site(
    tape: &Tape,
    student: &Tensor,
    teacher: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let raw = losses::bfd(tape, &[(student.clone(), teacher.detach())], mask)?;
    let channels = student.shape().dims()[0] as f32;
    let covered: f32 = mask.value_vec().iter().sum();
    let denom = covered * channels;
    if denom > 0.0 {
        Ok(ops::mul_scalar(tape, &raw, 1.0 / denom))
    } else {
        Ok(raw)
    }
}

/// All loss components for one image.  `include_fd_and_gkd` is switched
/// off during the gradient audit, which exercises only the background
/// objectives.
fn image_components(
    tape: &Tape,
    model: &SegmentationModel,
    ctx: &StepContext<'_>,
    scene: &PreparedScene,
    include_fd_and_gkd: bool,
) -> Result<LossComponents> {
    let (features, outs) = model.forward(tape, &scene.image)?;
    let head_idx = ctx.step - 1;
    let bg_logit = training_background(tape, ctx, &outs)?;

    // Pseudo-background cross-entropy over [background; new classes].
    let stacked = ops::concat_channels(tape, &[&bg_logit, &outs[head_idx].class_logits])?;
    let probs = ops::sigmoid(tape, &stacked);
    let pb = losses::pb_bce(tape, &probs, &scene.pseudo, &ctx.novel)?;

    let mut comps = LossComponents {
        pb_bce: pb,
        bga_plus: None,
        bga_minus: None,
        gkd: None,
        bfd: None,
    };

    if ctx.step >= 2 {
        match ctx.variant.bga {
            BgaScheme::Plus | BgaScheme::Both => {
                comps.bga_plus = Some(losses::bga_plus(tape, &bg_logit, &scene.masks)?);
            }
            _ => {}
        }
        match ctx.variant.bga {
            BgaScheme::Minus | BgaScheme::Both => {
                let prob = ops::sigmoid(tape, &bg_logit);
                comps.bga_minus = Some(losses::bga_minus(tape, &prob, &scene.masks)?);
            }
            _ => {}
        }
        if comps.bga_plus.is_none() {
            comps.bga_plus = alternative_bga(tape, ctx.variant.bga, &bg_logit, &scene.masks)?;
        }
    }

    let wants_teacher = ctx.variant.use_gkd || ctx.variant.fd != FdScheme::None;
    if include_fd_and_gkd && ctx.step >= 2 && wants_teacher {
        let teacher = ctx.teacher.expect("incremental steps carry a teacher");
        let t_tape = Tape::inference();
        let (t_features, t_outs) = teacher.forward(&t_tape, &scene.image)?;

        if ctx.variant.use_gkd {
            let mut pairs = Vec::new();
            for (s_out, t_out) in outs.iter().zip(&t_outs) {
                let s = head_prob_stack(tape, s_out)?;
                let t = head_prob_stack(&t_tape, t_out)?.detach();
                pairs.push((s, t));
            }
            comps.gkd = Some(losses::gkd(tape, &pairs)?);
        }

        match ctx.variant.fd {
            FdScheme::None => {}
            FdScheme::Bfd => {
                // The raw distillation term is a sum over masked feature
                // elements, so its magnitude scales with resolution and
                // width.  Normalize per site before weighting so the
                // objective stays balanced across canvas sizes.
                let coarse = scaled_bfd_site(
                    tape,
                    &features.encoder,
                    &t_features.encoder,
                    &scene.coarse_background,
                )?;
                let fine = scaled_bfd_site(
                    tape,
                    &features.decoder,
                    &t_features.decoder,
                    scene.masks.background(),
                )?;
                comps.bfd = Some(ops::add(tape, &coarse, &fine)?);
            }
            FdScheme::Mse => {
                let mut acc: Option<Tensor> = None;
                for (s, t) in [
                    (&features.encoder, t_features.encoder.detach()),
                    (&features.decoder, t_features.decoder.detach()),
                ] {
                    let diff = ops::sub(tape, s, &t)?;
                    let m = ops::mean(tape, &ops::square(tape, &diff));
                    acc = Some(match acc {
                        None => m,
                        Some(prev) => ops::add(tape, &prev, &m)?,
                    });
                }
                comps.bfd = acc;
            }
            FdScheme::Kd => {
                let mut acc: Option<Tensor> = None;
                for (s, t) in [
                    (&features.encoder, t_features.encoder.detach()),
                    (&features.decoder, t_features.decoder.detach()),
                ] {
                    let sp = ops::sigmoid(tape, s);
                    let tp = ops::sigmoid(&t_tape, &t).detach();
                    let on = ops::mul(tape, &tp, &ops::log_guarded(tape, &sp))?;
                    let one_minus_tp = ops::add_scalar(&t_tape, &ops::neg(&t_tape, &tp), 1.0);
                    let one_minus_sp = ops::add_scalar(tape, &ops::neg(tape, &sp), 1.0);
                    let off = ops::mul(
                        tape,
                        &one_minus_tp,
                        &ops::log_guarded(tape, &one_minus_sp),
                    )?;
                    let m = ops::mean(tape, &ops::add(tape, &on, &off)?);
                    let m = ops::neg(tape, &m);
                    acc = Some(match acc {
                        None => m,
                        Some(prev) => ops::add(tape, &prev, &m)?,
                    });
                }
                comps.bfd = acc;
            }
        }
    }

    Ok(comps)
}

/// Mean of each available component over a batch, then the weighted total.
fn batch_objective(
    tape: &Tape,
    model: &SegmentationModel,
    ctx: &StepContext<'_>,
    batch: &[PreparedScene],
    include_fd_and_gkd: bool,
) -> Result<(Tensor, LossComponents)> {
    let mut sums: Option<LossComponents> = None;
    for scene in batch {
        let c = image_components(tape, model, ctx, scene, include_fd_and_gkd)?;
        sums = Some(match sums {
            None => c,
            Some(prev) => {
                let join = |a: Option<Tensor>, b: Option<Tensor>| -> Result<Option<Tensor>> {
                    match (a, b) {
                        (Some(x), Some(y)) => Ok(Some(ops::add(tape, &x, &y)?)),
                        (None, None) => Ok(None),
                        _ => Err(Error::ContractViolation {
                            op: "batch_objective",
                            reason: "inconsistent component availability within a batch".into(),
                        }),
                    }
                };
                LossComponents {
                    pb_bce: ops::add(tape, &prev.pb_bce, &c.pb_bce)?,
                    bga_plus: join(prev.bga_plus, c.bga_plus)?,
                    bga_minus: join(prev.bga_minus, c.bga_minus)?,
                    gkd: join(prev.gkd, c.gkd)?,
                    bfd: join(prev.bfd, c.bfd)?,
                }
            }
        });
    }
    let sums = sums.ok_or(Error::Config("empty batch".into()))?;
    let inv = 1.0 / batch.len() as f32;
    let scale = |t: Option<Tensor>| t.map(|t| ops::mul_scalar(tape, &t, inv));
    let comps = LossComponents {
        pb_bce: ops::mul_scalar(tape, &sums.pb_bce, inv),
        bga_plus: scale(sums.bga_plus),
        bga_minus: scale(sums.bga_minus),
        gkd: scale(sums.gkd),
        bfd: scale(sums.bfd),
    };
    let total = losses::total_objective(tape, &comps, ctx.weights)?;
    Ok((total, comps))
}

fn check_finite(values: &ComponentValues, total: f32) -> Result<()> {
    let checks: [(&'static str, Option<f32>); 6] = [
        ("pb_bce", Some(values.pb_bce)),
        ("bga_plus", values.bga_plus),
        ("bga_minus", values.bga_minus),
        ("gkd", values.gkd),
        ("bfd", values.bfd),
        ("total", Some(total)),
    ];
    for (name, v) in checks {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: name,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Verify that the background objectives alone cannot touch previously
/// learned output layers or the base background classifier.
fn gradient_audit(
    model: &SegmentationModel,
    ctx: &StepContext<'_>,
    batch: &[PreparedScene],
) -> Result<()> {
    let tape = Tape::new();
    let (total, _) = batch_objective(&tape, model, ctx, batch, false)?;
    tape.backward(&total)?;
    let mut offenders = Vec::new();
    {
        let clean = |t: &Tensor| t.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0));
        for (i, head) in model.heads().iter().enumerate().take(ctx.step - 1) {
            let n = i + 1;
            if !clean(head.out_classes().weight()) || !clean(head.out_classes().bias()) {
                offenders.push(format!("head{n}.classes"));
            }
            if let Some(extra) = head.out_extra() {
                if !clean(extra.weight()) || !clean(extra.bias()) {
                    offenders.push(format!("head{n}.extra"));
                }
            }
        }
    }
    for (_, t) in model.named_params() {
        t.zero_grad();
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::AuditFailure(format!(
            "background objectives leaked gradient into {}",
            offenders.join(", ")
        )))
    }
}

// --- evaluation ---------------------------------------------------------

/// Grouped mean-IoU of a model over scenes, with annotations collapsed to
/// the classes known by `step`.
pub fn evaluate(
    model: &SegmentationModel,
    protocol: &TaskProtocol,
    step: usize,
    scenes: &[Scene],
) -> Result<GroupedMiou> {
    let num_ids = protocol.num_known(step)? + 1;
    let mut counts = ConfusionCounts::new(num_ids);
    for scene in scenes {
        let tape = Tape::inference();
        let (_, outs) = model.forward(&tape, &scene.image)?;
        let scores = model.inference_scores(&tape, &outs)?;
        let pred = metrics::predict_from_scores(&scores)?;
        let truth = synthdata::eval_labels(protocol, step, scene)?;
        counts.update(&truth, &pred)?;
    }
    let (initial, incremental) = metrics::groups_for(protocol, step)?;
    metrics::grouped_miou(&counts, &initial, &incremental)
}

/// Largest absolute difference between student and teacher old-class
/// probabilities over the probe scenes.
fn probe_drift(
    student: &SegmentationModel,
    teacher: &SegmentationModel,
    probes: &[Scene],
) -> Result<f64> {
    let old_channels = teacher.num_classes();
    let mut worst = 0.0f64;
    for scene in probes {
        let s = student.old_class_probs(&scene.image)?;
        let t = teacher.old_class_probs(&scene.image)?;
        let (c, h, w) = s.shape().as_chw("probe_drift")?;
        if c < old_channels {
            return Err(Error::ContractViolation {
                op: "probe_drift",
                reason: "student lost old class channels".into(),
            });
        }
        let sv = s.value_vec();
        let tv = t.value_vec();
        for i in 0..old_channels * h * w {
            let d = (sv[i] as f64 - tv[i] as f64).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    Ok(worst)
}

// --- the run ------------------------------------------------------------

/// Trainable parameters split into optimizer groups.  Incremental steps
/// scale the backbone's learning rate down: fresh heads need full-rate
/// training while the shared features should only drift as far as the
/// distillation terms allow.
fn optimizer_groups(
    model: &SegmentationModel,
    cfg: &TrainConfig,
    step: usize,
) -> Vec<(Vec<Tensor>, f32)> {
    let mut backbone = Vec::new();
    let mut heads = Vec::new();
    for (name, t) in model.named_params() {
        if !t.requires_grad() {
            continue;
        }
        if name.starts_with("encoder") || name.starts_with("decoder") {
            backbone.push(t);
        } else {
            heads.push(t);
        }
    }
    let scale = if step == 1 { 1.0 } else { cfg.backbone_lr_mult };
    let mut groups = Vec::new();
    if !backbone.is_empty() {
        groups.push((backbone, scale));
    }
    if !heads.is_empty() {
        groups.push((heads, 1.0));
    }
    groups
}

fn apply_freeze(model: &SegmentationModel, variant: &VariantSpec, step: usize) -> Result<()> {
    // Start from everything trainable, then restrict.
    model.set_backbone_trainable(true);
    for h in 1..=model.num_steps() {
        model.set_head_trainable(h, true)?;
    }
    if step >= 2 && variant.freeze == FreezePolicy::BackboneAndOldHeads {
        model.set_backbone_trainable(false);
        for h in 1..step {
            model.set_head_trainable(h, false)?;
        }
        if variant.kind == ModelKind::SharedBackground {
            // The shared background classifier keeps learning: new classes
            // keep vanishing from background and the single map must
            // absorb that.
            if let Some(extra) = model.heads()[0].out_extra() {
                extra.set_trainable(true);
            }
        }
    }
    Ok(())
}

fn prepare_scenes(
    cfg: &TrainConfig,
    ctx_step: usize,
    novel: &[u16],
    teacher: Option<&SegmentationModel>,
    scenes: &[Scene],
) -> Result<Vec<PreparedScene>> {
    let max_known = *novel.iter().max().expect("non-empty class list");
    let mut prepared = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let gt = synthdata::training_labels(&cfg.protocol, ctx_step, scene)?;
        let pseudo = match teacher {
            None => PseudoLabel::from_ground_truth(&gt),
            Some(t) => {
                let probs = t.old_class_probs(&scene.image)?;
                pseudo::generate_pseudo_label(&gt, &probs, cfg.confidence, max_known)?
            }
        };
        let masks = RegionMasks::from_labels(pseudo.labels(), novel);
        let coarse_background = downsample_mask(masks.background())?;
        prepared.push(PreparedScene {
            image: scene.image.clone(),
            pseudo,
            masks,
            coarse_background,
        });
    }
    Ok(prepared)
}

fn losses_to_epoch(values: &[ComponentValues], totals: &[f32]) -> EpochLosses {
    let n = values.len().max(1) as f64;
    let mean_opt = |get: fn(&ComponentValues) -> Option<f32>| -> Option<f64> {
        if values.iter().all(|v| get(v).is_some()) && !values.is_empty() {
            Some(values.iter().map(|v| get(v).unwrap() as f64).sum::<f64>() / n)
        } else {
            None
        }
    };
    EpochLosses {
        pbbce: values.iter().map(|v| v.pb_bce as f64).sum::<f64>() / n,
        bga_plus: mean_opt(|v| v.bga_plus),
        bga_minus: mean_opt(|v| v.bga_minus),
        gkd: mean_opt(|v| v.gkd),
        bfd: mean_opt(|v| v.bfd),
        total: totals.iter().map(|&t| t as f64).sum::<f64>() / n,
    }
}

/// Train one variant through every step of the protocol.
///
/// `sink` receives one JSON object per line as training progresses;
/// `checkpoint_dir` (when given) gets one checkpoint per step.
pub fn run_sequence(
    cfg: &TrainConfig,
    variant: &VariantSpec,
    mut sink: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    let protocol = cfg.protocol;
    let config_hash = archive::config_hash(&cfg.canonical_string(variant));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x6C62_272E_07BB_0142));
    let mut model = SegmentationModel::new(
        variant.kind,
        cfg.width,
        cfg.head_hidden,
        protocol.classes_at(1)?.len(),
        &mut rng,
    )?;

    let val = synthdata::build_split(&protocol, 1, Split::Val, cfg.val_scenes, cfg.seed, &cfg.scene)?;
    let probes = &val[..val.len().min(4)];

    let mut steps = Vec::new();
    let mut max_drift: Option<f64> = None;

    for step in 1..=protocol.steps() {
        let novel = protocol.classes_at(step)?;
        let teacher = if step >= 2 {
            let t = model.snapshot();
            model.add_step_head(novel.len(), &mut rng)?;
            Some(t)
        } else {
            None
        };
        apply_freeze(&model, variant, step)?;

        let train = synthdata::build_split(
            &protocol,
            step,
            Split::Train,
            cfg.train_scenes,
            cfg.seed,
            &cfg.scene,
        )?;
        let prepared = prepare_scenes(cfg, step, &novel, teacher.as_ref(), &train)?;

        let ctx = StepContext {
            step,
            novel: novel.clone(),
            teacher: teacher.as_ref(),
            variant,
            weights: &cfg.weights,
        };

        let epochs = if step == 1 {
            cfg.epochs_initial
        } else {
            cfg.epochs_incremental
        };
        let batches: Vec<&[PreparedScene]> = prepared.chunks(cfg.batch_size).collect();
        let schedule = PolySchedule::new(
            if step == 1 {
                cfg.lr_initial
            } else {
                cfg.lr_incremental
            },
            epochs * batches.len(),
        )?;
        let mut sgd = Sgd::with_groups(
            optimizer_groups(&model, cfg, step),
            cfg.momentum,
            cfg.weight_decay,
        )?;

        if step >= 2 && variant.kind == ModelKind::Adaptation {
            gradient_audit(&model, &ctx, batches[0])?;
        }

        let mut final_losses = EpochLosses::default();
        for epoch in 0..epochs {
            let mut batch_values = Vec::with_capacity(batches.len());
            let mut batch_totals = Vec::with_capacity(batches.len());
            let mut epoch_lr = 0.0f32;
            for (b, batch) in batches.iter().enumerate() {
                let tape = Tape::new();
                let (total, comps) = batch_objective(&tape, &model, &ctx, batch, true)?;
                let values = comps.values()?;
                let total_value = total.item()?;
                check_finite(&values, total_value)?;
                tape.backward(&total)?;
                sgd.clip_grad_norm(cfg.clip_norm);
                let lr = schedule.lr_at(epoch * batches.len() + b);
                epoch_lr = lr;
                sgd.step(lr);
                sgd.zero_grads();
                batch_values.push(values);
                batch_totals.push(total_value);
            }
            final_losses = losses_to_epoch(&batch_values, &batch_totals);
            emit(
                &mut sink,
                &EpochRecord {
                    event: "epoch",
                    variant: &variant.id,
                    step,
                    epoch,
                    lr: epoch_lr,
                    loss_pbbce: final_losses.pbbce,
                    loss_bga_plus: final_losses.bga_plus,
                    loss_bga_minus: final_losses.bga_minus,
                    loss_gkd: final_losses.gkd,
                    loss_bfd: final_losses.bfd,
                    loss_total: final_losses.total,
                },
            )?;
        }

        let miou = evaluate(&model, &protocol, step, &val)?;
        emit(
            &mut sink,
            &EvalRecord {
                event: "step_eval",
                variant: &variant.id,
                step,
                miou_initial: miou.initial,
                miou_incremental: miou.incremental,
                miou_all: miou.all,
            },
        )?;

        let drift = match &teacher {
            Some(t) => {
                let d = probe_drift(&model, t, probes)?;
                emit(
                    &mut sink,
                    &DriftRecord {
                        event: "probe_drift",
                        variant: &variant.id,
                        step,
                        drift: d,
                    },
                )?;
                max_drift = Some(max_drift.map_or(d, |m: f64| m.max(d)));
                Some(d)
            }
            None => None,
        };

        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("model_step{step}.ckpt"));
            archive::save_checkpoint(&path, &model, step, &config_hash)?;
        }

        steps.push(StepReport {
            step,
            classes: novel,
            final_losses,
            miou_initial: miou.initial,
            miou_incremental: miou.incremental,
            miou_all: miou.all,
            probe_drift: drift,
        });
    }

    let last = steps.last().expect("at least one step");
    Ok(RunReport {
        variant: variant.id.clone(),
        seed: cfg.seed,
        final_miou_initial: last.miou_initial,
        final_miou_incremental: last.miou_incremental,
        final_miou_all: last.miou_all,
        max_probe_drift: max_drift,
        steps,
    })
}

/// Run several variants concurrently, one OS thread each (tensor state is
/// thread-local by construction, so each run stays on its thread).
/// Results come back in the order of `ids`.
pub fn run_variants(cfg: &TrainConfig, ids: &[&str]) -> Result<Vec<RunReport>> {
    let specs: Vec<VariantSpec> = ids.iter().map(|id| variant(id)).collect::<Result<_>>()?;
    let mut slots: Vec<Option<Result<RunReport>>> = Vec::new();
    slots.resize_with(specs.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for spec in &specs {
            let cfg = cfg.clone();
            handles.push(scope.spawn(move || run_sequence(&cfg, spec, None, None)));
        }
        for (slot, handle) in slots.iter_mut().zip(handles) {
            *slot = Some(handle.join().unwrap_or_else(|_| {
                Err(Error::Config("a variant run panicked".into()))
            }));
        }
    });
    slots.into_iter().map(|s| s.expect("joined")).collect()
}
