//! Prediction and grouped mean-IoU evaluation.
//!
//! Predictions argmax a stacked score map whose channel index *is* the
//! class id: channel 0 carries the aggregated background score, channel
//! `j >= 1` the score of class `j`.  Ties resolve to the lowest id, so
//! results never depend on float traversal order.
//!
//! IoU accumulates per class over whole splits; classes absent from both
//! the truth and the prediction are excluded from group means rather than
//! diluting them.

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::synthdata::TaskProtocol;
use crate::tensor::Tensor;

/// Argmax a `(1 + num_classes) x h x w` score stack into a label grid.
pub fn predict_from_scores(scores: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = scores.shape().as_chw("predict_from_scores")?;
    if c < 2 {
        return Err(Error::InvalidShape {
            op: "predict_from_scores",
            shape: scores.shape().to_string(),
            reason: "need a background channel plus at least one class".into(),
        });
    }
    let values = scores.values();
    let mut out = LabelMap::filled(h, w, 0);
    for pix in 0..h * w {
        let mut best_id = 0u16;
        let mut best = f32::NEG_INFINITY;
        for ch in 0..c {
            let v = values[ch * h * w + pix];
            if v > best {
                best = v;
                best_id = ch as u16;
            }
        }
        out.set(pix / w, pix % w, best_id);
    }
    Ok(out)
}

/// Per-class intersection/union tallies over any number of images.
#[derive(Clone, Debug)]
pub struct ConfusionCounts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionCounts {
    /// Track ids `0..num_ids` (background included).
    pub fn new(num_ids: usize) -> ConfusionCounts {
        ConfusionCounts {
            tp: vec![0; num_ids],
            fp: vec![0; num_ids],
            missed: vec![0; num_ids],
        }
    }

    pub fn num_ids(&self) -> usize {
        self.tp.len()
    }

    /// Accumulate one image pair.
    pub fn update(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.height() != pred.height() || truth.width() != pred.width() {
            return Err(Error::ShapeMismatch {
                op: "confusion_update",
                left: format!("[{}, {}]", truth.height(), truth.width()),
                right: format!("[{}, {}]", pred.height(), pred.width()),
            });
        }
        let w = truth.width();
        for (i, (&t, &p)) in truth.data().iter().zip(pred.data()).enumerate() {
            for (name, v) in [("truth", t), ("prediction", p)] {
                if v as usize >= self.tp.len() {
                    let _ = name;
                    return Err(Error::UnknownClass {
                        id: v,
                        y: i / w,
                        x: i % w,
                        known: (self.tp.len() - 1) as u16,
                    });
                }
            }
            if t == p {
                self.tp[t as usize] += 1;
            } else {
                self.missed[t as usize] += 1;
                self.fp[p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Whether the class occurs in the truth or the prediction at all.
    pub fn present(&self, id: u16) -> bool {
        let i = id as usize;
        self.tp[i] + self.fp[i] + self.missed[i] > 0
    }

    /// Intersection over union; `None` for a class absent from both sides.
    pub fn iou(&self, id: u16) -> Option<f64> {
        let i = id as usize;
        let denom = self.tp[i] + self.fp[i] + self.missed[i];
        if denom == 0 {
            None
        } else {
            Some(self.tp[i] as f64 / denom as f64)
        }
    }

    fn group_mean(&self, ids: &[u16], group: &'static str) -> Result<f64> {
        let ious: Vec<f64> = ids.iter().filter_map(|&id| self.iou(id)).collect();
        if ious.is_empty() {
            return Err(Error::EmptyGroup { group });
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Group means over one evaluation: the first step's classes (plus
/// background), the incrementally-added classes, and everything together.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupedMiou {
    pub initial: f64,
    /// `None` before any incremental step exists.
    pub incremental: Option<f64>,
    pub all: f64,
}

/// Class-id groups for evaluating after `step` of a protocol:
/// `(initial-with-background, incremental)`.
pub fn groups_for(protocol: &TaskProtocol, step: usize) -> Result<(Vec<u16>, Vec<u16>)> {
    let mut initial = vec![0u16];
    initial.extend(protocol.classes_at(1)?);
    let mut incremental = Vec::new();
    for s in 2..=step {
        incremental.extend(protocol.classes_at(s)?);
    }
    Ok((initial, incremental))
}

/// Compute the three group means from accumulated counts.
pub fn grouped_miou(
    counts: &ConfusionCounts,
    initial_ids: &[u16],
    incremental_ids: &[u16],
) -> Result<GroupedMiou> {
    let initial = counts.group_mean(initial_ids, "initial")?;
    let incremental = if incremental_ids.is_empty() {
        None
    } else {
        Some(counts.group_mean(incremental_ids, "incremental")?)
    };
    let all_ids: Vec<u16> = initial_ids
        .iter()
        .chain(incremental_ids.iter())
        .copied()
        .collect();
    let all = counts.group_mean(&all_ids, "all")?;
    Ok(GroupedMiou {
        initial,
        incremental,
        all,
    })
}
