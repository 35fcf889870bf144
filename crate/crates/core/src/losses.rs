//! Training objectives.
//!
//! Five components, each composed purely from the differentiable primitives
//! in [`crate::ops`] so the reverse pass needs no loss-specific rules:
//!
//! * [`pb_bce`] — per-channel binary cross-entropy of the background and
//!   new-class probabilities against the pseudo-label.
//! * [`bga_plus`] — pushes the current residual map strongly negative
//!   wherever a new class is annotated, so background retreats there.
//! * [`bga_minus`] — a hinge that keeps the residual from suppressing
//!   background where the pseudo-label still says background.
//! * [`gkd`] — distillation of every previous head's sigmoid outputs
//!   (including their residual channels) toward the frozen teacher's.
//! * [`bfd`] — squared feature drift against the teacher, restricted to
//!   pseudo-background pixels, summed without normalization so the penalty
//!   scales with the amount of background evidence.
//!
//! Probabilities are guarded through [`crate::ops::log_guarded`] at the
//! loss sites only; nothing else in the engine clamps.

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND};
use crate::ops;
use crate::pseudo::{self, PseudoLabel};
use crate::tensor::{Shape, Tape, Tensor};

/// Non-negative weights for the four auxiliary components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bga_plus: f32,
    pub bga_minus: f32,
    pub gkd: f32,
    pub bfd: f32,
}

impl LossWeights {
    pub fn new(bga_plus: f32, bga_minus: f32, gkd: f32, bfd: f32) -> Result<LossWeights> {
        for (name, v) in [
            ("bga_plus", bga_plus),
            ("bga_minus", bga_minus),
            ("gkd", gkd),
            ("bfd", bfd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight '{name}' must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            bga_plus,
            bga_minus,
            gkd,
            bfd,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bga_plus: 1.0,
            bga_minus: 5.0,
            gkd: 1.0,
            bfd: 4.0,
        }
    }
}

/// Constant pixel partitions of one training image, derived from its
/// pseudo-label: where the new classes are annotated, and where the label
/// still says background.
#[derive(Clone, Debug)]
pub struct RegionMasks {
    background: Tensor,
    novel: Tensor,
}

impl RegionMasks {
    /// Derive both masks from a label grid.  `novel_ids` are this step's
    /// annotated classes.
    pub fn from_labels(labels: &LabelMap, novel_ids: &[u16]) -> RegionMasks {
        RegionMasks {
            background: pseudo::binary_class_map(labels, BACKGROUND),
            novel: pseudo::binary_membership_map(labels, novel_ids),
        }
    }

    /// `1 x h x w` indicator of pseudo-background pixels.
    pub fn background(&self) -> &Tensor {
        &self.background
    }

    /// `1 x h x w` indicator of pixels annotated with a new class.
    pub fn novel(&self) -> &Tensor {
        &self.novel
    }
}

/// `1 - t`, built from recorded primitives.
fn one_minus(tape: &Tape, t: &Tensor) -> Tensor {
    ops::add_scalar(tape, &ops::neg(tape, t), 1.0)
}

/// Binary cross-entropy of the stacked background + new-class probability
/// channels against the pseudo-label, averaged over pixels (channel terms
/// summed).  `probs` is `(1 + n) x h x w` with the background channel
/// first, then one channel per id in `novel_ids`, in order.
pub fn pb_bce(
    tape: &Tape,
    probs: &Tensor,
    pseudo: &PseudoLabel,
    novel_ids: &[u16],
) -> Result<Tensor> {
    let (c, h, w) = probs.shape().as_chw("pb_bce")?;
    let labels = pseudo.labels();
    if c != 1 + novel_ids.len() {
        return Err(Error::InvalidShape {
            op: "pb_bce",
            shape: probs.shape().to_string(),
            reason: format!("expected {} channels", 1 + novel_ids.len()),
        });
    }
    if h != labels.height() || w != labels.width() {
        return Err(Error::ShapeMismatch {
            op: "pb_bce",
            left: probs.shape().to_string(),
            right: format!("[{}, {}]", labels.height(), labels.width()),
        });
    }

    // Constant channel-stacked targets: background first, then each new
    // class.  A teacher-labeled old-class pixel matches no channel, so all
    // of its targets are zero.
    let mut targets = Vec::with_capacity(c * h * w);
    for &id in std::iter::once(&BACKGROUND).chain(novel_ids.iter()) {
        targets.extend(labels.data().iter().map(|&v| (v == id) as u32 as f32));
    }
    let target = Tensor::from_vec(Shape::chw(c, h, w), targets)?;

    let pos = ops::mul(tape, &target, &ops::log_guarded(tape, probs))?;
    let neg_term = ops::mul(
        tape,
        &one_minus(tape, &target),
        &ops::log_guarded(tape, &one_minus(tape, probs)),
    )?;
    let acc = ops::sum(tape, &ops::add(tape, &pos, &neg_term)?);
    Ok(ops::mul_scalar(tape, &acc, -1.0 / (h * w) as f32))
}

/// Mean negative log-probability that the background aggregate is *off*
/// over the pixels annotated with a new class: drives the live residual
/// strongly negative exactly where new objects live.  `aggregate` is the
/// raw background map (a logit), `1 x h x w`.
pub fn bga_plus(tape: &Tape, aggregate: &Tensor, masks: &RegionMasks) -> Result<Tensor> {
    aggregate.shape().as_chw("bga_plus")?;
    let off_prob = ops::sigmoid(tape, &ops::neg(tape, aggregate));
    let log_off = ops::log_guarded(tape, &off_prob);
    let mean = ops::masked_mean(tape, &log_off, masks.novel())?;
    Ok(ops::neg(tape, &mean))
}

/// Hinge penalty on pseudo-background pixels for letting the background
/// probability drop below one half: `max(0, (1 - p)^2 - p^2)` averaged over
/// the background region.  `prob` is the background probability map,
/// `1 x h x w`.
pub fn bga_minus(tape: &Tape, prob: &Tensor, masks: &RegionMasks) -> Result<Tensor> {
    prob.shape().as_chw("bga_minus")?;
    let off = one_minus(tape, prob);
    let margin = ops::sub(tape, &ops::square(tape, &off), &ops::square(tape, prob))?;
    let hinged = ops::hinge(tape, &margin);
    ops::masked_mean(tape, &hinged, masks.background())
}

/// Distillation of previous heads: binary cross-entropy of each student
/// probability channel against the matching frozen-teacher channel, summed
/// over channels and pairs, averaged over pixels.  Every pair is
/// `(student, teacher)` with identical shapes; teachers must be detached.
pub fn gkd(tape: &Tape, pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::ContractViolation {
            op: "gkd",
            reason: "at least one head pair is required".into(),
        });
    }
    let (_, h, w) = pairs[0].0.shape().as_chw("gkd")?;
    let mut acc: Option<Tensor> = None;
    for (student, teacher) in pairs {
        if teacher.requires_grad() {
            return Err(Error::ContractViolation {
                op: "gkd",
                reason: "teacher probabilities must be detached".into(),
            });
        }
        if student.shape() != teacher.shape() {
            return Err(Error::ShapeMismatch {
                op: "gkd",
                left: student.shape().to_string(),
                right: teacher.shape().to_string(),
            });
        }
        let (_, sh, sw) = student.shape().as_chw("gkd")?;
        if (sh, sw) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "gkd",
                left: pairs[0].0.shape().to_string(),
                right: student.shape().to_string(),
            });
        }
        let pos = ops::mul(tape, teacher, &ops::log_guarded(tape, student))?;
        let neg_term = ops::mul(
            tape,
            &one_minus(tape, teacher),
            &ops::log_guarded(tape, &one_minus(tape, student)),
        )?;
        let s = ops::sum(tape, &ops::add(tape, &pos, &neg_term)?);
        acc = Some(match acc {
            None => s,
            Some(prev) => ops::add(tape, &prev, &s)?,
        });
    }
    Ok(ops::mul_scalar(
        tape,
        &acc.expect("non-empty pairs"),
        -1.0 / (h * w) as f32,
    ))
}

/// Squared student-teacher feature distance on pseudo-background pixels,
/// summed over every element of every pair with no normalization.
/// `background_mask` is the `1 x h x w` pseudo-background indicator at the
/// feature resolution.
pub fn bfd(
    tape: &Tape,
    pairs: &[(Tensor, Tensor)],
    background_mask: &Tensor,
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::ContractViolation {
            op: "bfd",
            reason: "at least one feature pair is required".into(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (student, teacher) in pairs {
        if teacher.requires_grad() {
            return Err(Error::ContractViolation {
                op: "bfd",
                reason: "teacher features must be detached".into(),
            });
        }
        let diff = ops::sub(tape, student, teacher)?;
        let masked = ops::spatial_mask(tape, &diff, background_mask)?;
        let s = ops::sum(tape, &ops::square(tape, &masked));
        acc = Some(match acc {
            None => s,
            Some(prev) => ops::add(tape, &prev, &s)?,
        });
    }
    Ok(acc.expect("non-empty pairs"))
}

/// The five scalar components of one training image's objective.  Absent
/// entries (first step, or ablated variants) simply contribute nothing.
#[derive(Clone, Debug)]
pub struct LossComponents {
    pub pb_bce: Tensor,
    pub bga_plus: Option<Tensor>,
    pub bga_minus: Option<Tensor>,
    pub gkd: Option<Tensor>,
    pub bfd: Option<Tensor>,
}

impl LossComponents {
    /// The component values as plain numbers, for logging.
    pub fn values(&self) -> Result<ComponentValues> {
        let get = |t: &Option<Tensor>| -> Result<Option<f32>> {
            t.as_ref().map(|t| t.item()).transpose()
        };
        Ok(ComponentValues {
            pb_bce: self.pb_bce.item()?,
            bga_plus: get(&self.bga_plus)?,
            bga_minus: get(&self.bga_minus)?,
            gkd: get(&self.gkd)?,
            bfd: get(&self.bfd)?,
        })
    }
}

/// Plain-number snapshot of [`LossComponents`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ComponentValues {
    pub pb_bce: f32,
    pub bga_plus: Option<f32>,
    pub bga_minus: Option<f32>,
    pub gkd: Option<f32>,
    pub bfd: Option<f32>,
}

/// Weighted sum of the available components.  Every present component must
/// be a scalar.
pub fn total_objective(
    tape: &Tape,
    components: &LossComponents,
    weights: &LossWeights,
) -> Result<Tensor> {
    let check = |t: &Tensor| -> Result<()> {
        if t.shape().numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: t.shape().to_string(),
            });
        }
        Ok(())
    };
    check(&components.pb_bce)?;
    let mut total = components.pb_bce.clone();
    for (part, weight) in [
        (&components.bga_plus, weights.bga_plus),
        (&components.bga_minus, weights.bga_minus),
        (&components.gkd, weights.gkd),
        (&components.bfd, weights.bfd),
    ] {
        if let Some(t) = part {
            check(t)?;
            let weighted = ops::mul_scalar(tape, t, weight);
            total = ops::add(tape, &total, &weighted)?;
        }
    }
    Ok(total)
}
