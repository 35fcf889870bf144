//! Pseudo-labels for unannotated background pixels.
//!
//! During an incremental step the ground truth only names the step's new
//! classes; everything else is labeled background, including objects of
//! previously-learned classes.  The previous model fills that gap: where it
//! is confident about an old class on a background pixel, the pixel is
//! relabeled with that class.  Every pixel records where its label came
//! from, which downstream losses and audits rely on.

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND};
use crate::tensor::{Shape, Tensor};

/// Provenance of one pixel's training label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFlag {
    /// Annotated in this step's ground truth.
    GroundTruth,
    /// Filled in by the previous model's confident prediction.
    Teacher,
    /// Left as background (no annotation, no confident old class).
    Background,
}

/// A label grid plus per-pixel provenance.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    labels: LabelMap,
    sources: Vec<SourceFlag>,
}

impl PseudoLabel {
    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn sources(&self) -> &[SourceFlag] {
        &self.sources
    }

    pub fn source(&self, y: usize, x: usize) -> SourceFlag {
        self.sources[y * self.labels.width() + x]
    }

    /// `(ground_truth, teacher, background)` pixel counts.
    pub fn source_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0usize, 0usize, 0usize);
        for s in &self.sources {
            match s {
                SourceFlag::GroundTruth => counts.0 += 1,
                SourceFlag::Teacher => counts.1 += 1,
                SourceFlag::Background => counts.2 += 1,
            }
        }
        counts
    }

    /// Wrap a plain annotation with no teacher: every labeled pixel is
    /// ground truth, the rest stay background.  This is the first step's
    /// degenerate case.
    pub fn from_ground_truth(gt: &LabelMap) -> PseudoLabel {
        let sources = gt
            .data()
            .iter()
            .map(|&id| {
                if id == BACKGROUND {
                    SourceFlag::Background
                } else {
                    SourceFlag::GroundTruth
                }
            })
            .collect();
        PseudoLabel {
            labels: gt.clone(),
            sources,
        }
    }
}

/// Merge a step's annotation with the previous model's confident old-class
/// predictions.
///
/// `teacher_probs` holds one probability channel per previously-learned
/// class, channel `j` for class id `j + 1`, detached from any tape.  A
/// background pixel adopts the most probable old class when that
/// probability reaches `confidence`; ties pick the lowest class id.
/// `max_known_id` is the largest class id defined so far — any annotation
/// beyond it is corrupt input.
pub fn generate_pseudo_label(
    gt: &LabelMap,
    teacher_probs: &Tensor,
    confidence: f32,
    max_known_id: u16,
) -> Result<PseudoLabel> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!(
            "confidence threshold must lie strictly between 0 and 1, got {confidence}"
        )));
    }
    if teacher_probs.requires_grad() {
        return Err(Error::ContractViolation {
            op: "generate_pseudo_label",
            reason: "teacher probabilities must be detached".into(),
        });
    }
    let (num_old, h, w) = teacher_probs.shape().as_chw("generate_pseudo_label")?;
    if h != gt.height() || w != gt.width() {
        return Err(Error::ShapeMismatch {
            op: "generate_pseudo_label",
            left: format!("[{}, {}]", gt.height(), gt.width()),
            right: format!("[{h}, {w}]"),
        });
    }
    let probs = teacher_probs.value_vec();
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::ContractViolation {
            op: "generate_pseudo_label",
            reason: "teacher probabilities must lie in [0, 1]".into(),
        });
    }

    let mut labels = LabelMap::filled(gt.height(), gt.width(), BACKGROUND);
    let mut sources = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let g = gt.get(y, x);
            if g != BACKGROUND {
                if g > max_known_id {
                    return Err(Error::UnknownClass {
                        id: g,
                        y,
                        x,
                        known: max_known_id,
                    });
                }
                labels.set(y, x, g);
                sources.push(SourceFlag::GroundTruth);
                continue;
            }
            let mut best_channel = 0usize;
            let mut best_prob = f32::NEG_INFINITY;
            for j in 0..num_old {
                let p = probs[j * h * w + y * w + x];
                if p > best_prob {
                    best_prob = p;
                    best_channel = j;
                }
            }
            if num_old > 0 && best_prob >= confidence {
                labels.set(y, x, (best_channel + 1) as u16);
                sources.push(SourceFlag::Teacher);
            } else {
                sources.push(SourceFlag::Background);
            }
        }
    }
    Ok(PseudoLabel { labels, sources })
}

/// Constant `1 x h x w` indicator of `label == id`.
pub fn binary_class_map(labels: &LabelMap, id: u16) -> Tensor {
    let values = labels
        .data()
        .iter()
        .map(|&v| (v == id) as u32 as f32)
        .collect();
    Tensor::from_vec(Shape::chw(1, labels.height(), labels.width()), values)
        .expect("indicator shape")
}

/// Constant `1 x h x w` indicator of `label` being any of `ids`.
pub fn binary_membership_map(labels: &LabelMap, ids: &[u16]) -> Tensor {
    let values = labels
        .data()
        .iter()
        .map(|&v| ids.contains(&v) as u32 as f32)
        .collect();
    Tensor::from_vec(Shape::chw(1, labels.height(), labels.width()), values)
        .expect("indicator shape")
}
