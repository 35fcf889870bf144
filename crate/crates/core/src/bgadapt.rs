//! Residual modeling of the background channel across incremental steps.
//!
//! The first head owns a base background map `b`.  Every later head emits a
//! residual adaptation map; only its non-positive part may touch the
//! aggregate, so a new step can *suppress* background where it claims a new
//! class but can never inflate background confidence elsewhere.
//!
//! Two aggregation flavors exist:
//!
//! * [`aggregate_inference`]: base plus the filtered residual of **every**
//!   later head, in head order.  Used for prediction.
//! * [`aggregate_training`]: the base map and all *previous* residuals enter
//!   as detached constants (they belong to the frozen past), while the
//!   current step's residual enters raw and live — the losses of the current
//!   step shape it directly, and the filter is only imposed at inference.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Tape, Tensor};

/// Non-positive part of a residual map: `min(x, 0)`, elementwise.
pub fn filter(tape: &Tape, residual: &Tensor) -> Tensor {
    ops::clamp_nonpositive(tape, residual)
}

fn check_map_shapes(op: &'static str, base: &Tensor, rest: &[&Tensor]) -> Result<()> {
    for t in rest {
        if t.shape() != base.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: base.shape().to_string(),
                right: t.shape().to_string(),
            });
        }
    }
    Ok(())
}

/// Background map used at prediction time: `base + sum_i min(adapt_i, 0)`,
/// accumulated in list order.
pub fn aggregate_inference(tape: &Tape, base: &Tensor, adapts: &[&Tensor]) -> Result<Tensor> {
    check_map_shapes("aggregate_inference", base, adapts)?;
    let mut acc = base.clone();
    for adapt in adapts {
        let filtered = filter(tape, adapt);
        acc = ops::add(tape, &acc, &filtered)?;
    }
    Ok(acc)
}

/// Background map used inside the current step's losses.
///
/// `base` and every entry of `frozen_adapts` must be detached (they are
/// teacher-side constants); violating that is a wiring bug, not a numerical
/// choice, so it fails loudly.  `live_adapt` joins unfiltered.
pub fn aggregate_training(
    tape: &Tape,
    base: &Tensor,
    frozen_adapts: &[&Tensor],
    live_adapt: &Tensor,
) -> Result<Tensor> {
    if base.requires_grad() {
        return Err(Error::ContractViolation {
            op: "aggregate_training",
            reason: "base background map must be detached".into(),
        });
    }
    for (i, adapt) in frozen_adapts.iter().enumerate() {
        if adapt.requires_grad() {
            return Err(Error::ContractViolation {
                op: "aggregate_training",
                reason: format!("frozen adaptation map {i} must be detached"),
            });
        }
    }
    let mut rest: Vec<&Tensor> = frozen_adapts.to_vec();
    rest.push(live_adapt);
    check_map_shapes("aggregate_training", base, &rest)?;

    let mut acc = base.clone();
    for adapt in frozen_adapts {
        let filtered = filter(tape, adapt);
        acc = ops::add(tape, &acc, &filtered)?;
    }
    ops::add(tape, &acc, live_adapt)
}
