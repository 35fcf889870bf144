//! Differentiable operations over [`Tensor`].
//!
//! Every function computes its result eagerly and records itself on the
//! supplied [`Tape`] when recording is on and at least one input tracks
//! gradients.  Backward rules live in [`apply_backward`], which the tape
//! calls while replaying records in reverse.
//!
//! Subgradient conventions at kinks: `relu`/`hinge` and `clamp_nonpositive`
//! use derivative 0 at exactly 0, and the guarded `log` uses derivative 0
//! wherever the guard clamps.

use crate::error::{Error, Result};
use crate::tensor::{Op, Record, ReduceKind, Shape, Tape, Tensor, Warning};

/// Epsilon used by the guarded logarithm at loss call sites.
pub const LOG_GUARD_EPS: f32 = 1e-12;

fn shape_mismatch(op: &'static str, a: &Shape, b: &Shape) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_string(),
        right: b.to_string(),
    }
}

/// How a binary elementwise op pairs its operands.
enum Pairing {
    Elementwise,
    ScalarLeft,
    ScalarRight,
}

fn pairing(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Pairing, Shape)> {
    if a.shape() == b.shape() {
        Ok((Pairing::Elementwise, a.shape().clone()))
    } else if a.shape().is_scalar() {
        Ok((Pairing::ScalarLeft, b.shape().clone()))
    } else if b.shape().is_scalar() {
        Ok((Pairing::ScalarRight, a.shape().clone()))
    } else {
        Err(shape_mismatch(op, a.shape(), b.shape()))
    }
}

fn binary(
    tape: &Tape,
    op: Op,
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let (pairing, out_shape) = pairing(name, a, b)?;
    let av = a.values();
    let bv = b.values();
    let values: Vec<f32> = match pairing {
        Pairing::Elementwise => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Pairing::ScalarLeft => bv.iter().map(|&y| f(av[0], y)).collect(),
        Pairing::ScalarRight => av.iter().map(|&x| f(x, bv[0])).collect(),
    };
    drop(av);
    drop(bv);
    let out = Tensor::op_output(out_shape, values, false);
    tape.record(op, vec![a.clone(), b.clone()], &out);
    Ok(out)
}

/// Elementwise sum.  Operands must share a shape, or one must be a scalar.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, Op::Add, "add", a, b, |x, y| x + y)
}

/// Elementwise difference (`a - b`); same pairing rules as [`add`].
pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, Op::Sub, "sub", a, b, |x, y| x - y)
}

/// Elementwise product; same pairing rules as [`add`].
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, Op::Mul, "mul", a, b, |x, y| x * y)
}

fn unary(tape: &Tape, op: Op, a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let values: Vec<f32> = a.values().iter().map(|&x| f(x)).collect();
    let out = Tensor::op_output(a.shape().clone(), values, false);
    tape.record(op, vec![a.clone()], &out);
    out
}

/// Add a constant to every element.
pub fn add_scalar(tape: &Tape, a: &Tensor, c: f32) -> Tensor {
    unary(tape, Op::AddScalar, a, |x| x + c)
}

/// Multiply every element by a constant.
pub fn mul_scalar(tape: &Tape, a: &Tensor, c: f32) -> Tensor {
    unary(tape, Op::MulScalar(c), a, |x| x * c)
}

/// Elementwise negation.
pub fn neg(tape: &Tape, a: &Tensor) -> Tensor {
    unary(tape, Op::Neg, a, |x| -x)
}

/// Elementwise square.
pub fn square(tape: &Tape, a: &Tensor) -> Tensor {
    unary(tape, Op::Square, a, |x| x * x)
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function, numerically stable at large magnitudes.
pub fn sigmoid(tape: &Tape, a: &Tensor) -> Tensor {
    unary(tape, Op::Sigmoid, a, sigmoid_scalar)
}

/// Elementwise `max(x, 0)`; subgradient 0 at 0.
pub fn relu(tape: &Tape, a: &Tensor) -> Tensor {
    unary(tape, Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
}

/// Elementwise `max(x, 0)` under its loss-side name; identical to [`relu`].
pub fn hinge(tape: &Tape, a: &Tensor) -> Tensor {
    relu(tape, a)
}

/// Elementwise `min(x, 0)`; subgradient 0 at 0.  This is the filter applied
/// to residual background channels, keeping only their negative part.
pub fn clamp_nonpositive(tape: &Tape, a: &Tensor) -> Tensor {
    unary(tape, Op::ClampNonPositive, a, |x| if x < 0.0 { x } else { 0.0 })
}

/// Natural logarithm with the opt-in epsilon guard `ln(max(x, 1e-12))`.
///
/// Intended for loss call sites where probabilities can underflow; the
/// gradient is 0 wherever the guard clamps.
pub fn log_guarded(tape: &Tape, a: &Tensor) -> Tensor {
    unary(tape, Op::Log { guard: true }, a, |x| x.max(LOG_GUARD_EPS).ln())
}

/// Natural logarithm without a guard; errors on any non-positive element.
pub fn log_strict(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    if let Some((index, &value)) = a
        .values()
        .iter()
        .enumerate()
        .find(|(_, &v)| v <= 0.0)
    {
        return Err(Error::LogDomain { index, value });
    }
    Ok(unary(tape, Op::Log { guard: false }, a, |x| x.ln()))
}

/// Identity forward whose backward multiplies the incoming gradient by `c`
/// (gradient scaling / reversal).
pub fn grad_scale(tape: &Tape, a: &Tensor, c: f32) -> Tensor {
    unary(tape, Op::GradScale(c), a, |x| x)
}

/// 2D convolution over a channels-height-width input.
///
/// `weight` is laid out `[out_c, in_c, k, k]`, `bias` has `out_c` elements,
/// and the output spatial size is `(dim + 2*padding - k) / stride + 1`.
/// Inner products accumulate in 64-bit floats.
pub fn conv2d(
    tape: &Tape,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (in_c, h, w) = input.shape().as_chw("conv2d")?;
    let wd = weight.shape().dims();
    if wd.len() != 4 || wd[2] != wd[3] {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: weight.shape().to_string(),
            reason: "expected square [out_c, in_c, k, k] weights".into(),
        });
    }
    let (out_c, w_in_c, k) = (wd[0], wd[1], wd[2]);
    if w_in_c != in_c {
        return Err(shape_mismatch("conv2d", input.shape(), weight.shape()));
    }
    if bias.shape().dims() != [out_c] {
        return Err(shape_mismatch("conv2d", weight.shape(), bias.shape()));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: input.shape().to_string(),
            reason: format!("kernel {k} exceeds padded input"),
        });
    }
    let out_h = (h + 2 * padding - k) / stride + 1;
    let out_w = (w + 2 * padding - k) / stride + 1;

    let x = input.values();
    let wt = weight.values();
    let b = bias.values();
    let mut out = vec![0.0f32; out_c * out_h * out_w];
    for oc in 0..out_c {
        let w_oc = &wt[oc * in_c * k * k..(oc + 1) * in_c * k * k];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b[oc] as f64;
                for ic in 0..in_c {
                    let x_ic = &x[ic * h * w..(ic + 1) * h * w];
                    let w_ic = &w_oc[ic * k * k..(ic + 1) * k * k];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &x_ic[iy as usize * w..(iy as usize + 1) * w];
                        let wrow = &w_ic[ky * k..(ky + 1) * k];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += row[ix as usize] as f64 * wv as f64;
                        }
                    }
                }
                out[oc * out_h * out_w + oy * out_w + ox] = acc as f32;
            }
        }
    }
    drop(x);
    drop(wt);
    drop(b);
    let out = Tensor::op_output(Shape::chw(out_c, out_h, out_w), out, false);
    tape.record(
        Op::Conv2d { stride, padding },
        vec![input.clone(), weight.clone(), bias.clone()],
        &out,
    );
    Ok(out)
}

fn reduce(tape: &Tape, kind: ReduceKind, a: &Tensor) -> Tensor {
    let acc: f64 = a.values().iter().map(|&v| v as f64).sum();
    let value = match kind {
        ReduceKind::Sum => acc,
        ReduceKind::Mean => acc / a.shape().numel() as f64,
    };
    let out = Tensor::op_output(Shape::scalar(), vec![value as f32], false);
    tape.record(Op::Reduce(kind), vec![a.clone()], &out);
    out
}

/// Sum of all elements, accumulated in 64-bit floats.
pub fn sum(tape: &Tape, a: &Tensor) -> Tensor {
    reduce(tape, ReduceKind::Sum, a)
}

/// Mean of all elements, accumulated in 64-bit floats.
pub fn mean(tape: &Tape, a: &Tensor) -> Tensor {
    reduce(tape, ReduceKind::Mean, a)
}

fn check_binary_mask(op: &'static str, mask: &Tensor) -> Result<usize> {
    let mut ones = 0usize;
    for &v in mask.values().iter() {
        if v == 1.0 {
            ones += 1;
        } else if v != 0.0 {
            return Err(Error::ContractViolation {
                op,
                reason: format!("mask values must be exactly 0 or 1, found {v}"),
            });
        }
    }
    Ok(ones)
}

/// Mean over the elements selected by a binary mask of the same shape.
///
/// An all-zero mask yields 0 and pushes [`Warning::EmptyMask`] onto the
/// tape.  The mask itself never receives gradient.
pub fn masked_mean(tape: &Tape, a: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.shape() != mask.shape() {
        return Err(shape_mismatch("masked_mean", a.shape(), mask.shape()));
    }
    let ones = check_binary_mask("masked_mean", mask)?;
    let value = if ones == 0 {
        tape.push_warning(Warning::EmptyMask { op: "masked_mean" });
        0.0
    } else {
        let acc: f64 = a
            .values()
            .iter()
            .zip(mask.values().iter())
            .filter(|(_, &m)| m == 1.0)
            .map(|(&v, _)| v as f64)
            .sum();
        (acc / ones as f64) as f32
    };
    let out = Tensor::op_output(Shape::scalar(), vec![value], false);
    tape.record(
        Op::MaskedMean { ones },
        vec![a.clone(), mask.clone()],
        &out,
    );
    Ok(out)
}

/// Nearest-neighbor ×2 spatial upsampling of a channels-height-width tensor.
pub fn upsample_nearest_2x(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let (c, h, w) = a.shape().as_chw("upsample_nearest_2x")?;
    let x = a.values();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src_row = &x[ch * h * w + (oy / 2) * w..][..w];
            let dst_row = &mut out[ch * oh * ow + oy * ow..][..ow];
            for (ox, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[ox / 2];
            }
        }
    }
    drop(x);
    let out = Tensor::op_output(Shape::chw(c, oh, ow), out, false);
    tape.record(Op::Upsample2x, vec![a.clone()], &out);
    Ok(out)
}

/// 2×2 max pooling with stride 2; spatial dims must be even.  Ties pick the
/// first element in row-major window order, deterministically.
pub fn max_pool_2x(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let (c, h, w) = a.shape().as_chw("max_pool_2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "max_pool_2x",
            shape: a.shape().to_string(),
            reason: "spatial dims must be even".into(),
        });
    }
    let x = a.values();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = ch * h * w + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    drop(x);
    let out = Tensor::op_output(Shape::chw(c, oh, ow), out, false);
    tape.record(Op::MaxPool2x { argmax }, vec![a.clone()], &out);
    Ok(out)
}

/// Concatenate channels-height-width tensors along the channel axis.
pub fn concat_channels(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Config("concat_channels needs at least one part".into()));
    }
    let (_, h, w) = parts[0].shape().as_chw("concat_channels")?;
    let mut total_c = 0usize;
    let mut sizes = Vec::with_capacity(parts.len());
    for p in parts {
        let (c, ph, pw) = p.shape().as_chw("concat_channels")?;
        if (ph, pw) != (h, w) {
            return Err(shape_mismatch(
                "concat_channels",
                parts[0].shape(),
                p.shape(),
            ));
        }
        total_c += c;
        sizes.push(c);
    }
    let mut out = Vec::with_capacity(total_c * h * w);
    for p in parts {
        out.extend_from_slice(&p.values());
    }
    let out = Tensor::op_output(Shape::chw(total_c, h, w), out, false);
    tape.record(
        Op::ConcatChannels { parts: sizes },
        parts.iter().map(|p| (*p).clone()).collect(),
        &out,
    );
    Ok(out)
}

/// Copy of the channel range `from..to` of a channels-height-width tensor.
pub fn slice_channels(tape: &Tape, a: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (c, h, w) = a.shape().as_chw("slice_channels")?;
    if from >= to || to > c {
        return Err(Error::InvalidShape {
            op: "slice_channels",
            shape: a.shape().to_string(),
            reason: format!("invalid channel range {from}..{to}"),
        });
    }
    let out: Vec<f32> = a.values()[from * h * w..to * h * w].to_vec();
    let out = Tensor::op_output(Shape::chw(to - from, h, w), out, false);
    tape.record(Op::SliceChannels { from, to }, vec![a.clone()], &out);
    Ok(out)
}

/// Multiply every channel of a C×H×W tensor by a binary 1×H×W mask.
/// The mask is constant data and never receives gradient.
pub fn spatial_mask(tape: &Tape, a: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = a.shape().as_chw("spatial_mask")?;
    let (mc, mh, mw) = mask.shape().as_chw("spatial_mask")?;
    if mc != 1 || mh != h || mw != w {
        return Err(shape_mismatch("spatial_mask", a.shape(), mask.shape()));
    }
    check_binary_mask("spatial_mask", mask)?;
    let x = a.values();
    let m = mask.values();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[ch * h * w + i] = x[ch * h * w + i] * m[i];
        }
    }
    drop(x);
    drop(m);
    let out = Tensor::op_output(Shape::chw(c, h, w), out, false);
    tape.record(Op::SpatialMask, vec![a.clone(), mask.clone()], &out);
    Ok(out)
}

/// Dispatch one record's backward rule, handing each input's gradient
/// contribution to `sink` (which skips non-tracking tensors).
pub(crate) fn apply_backward(rec: &Record, gout: &[f32], sink: &mut dyn FnMut(&Tensor, Vec<f32>)) {
    match &rec.op {
        Op::Add | Op::Sub => {
            let (a, b) = (&rec.inputs[0], &rec.inputs[1]);
            let sign = if matches!(rec.op, Op::Sub) { -1.0 } else { 1.0 };
            if a.requires_grad() {
                sink(a, spread_to(a, gout, 1.0));
            }
            if b.requires_grad() {
                sink(b, spread_to(b, gout, sign));
            }
        }
        Op::Mul => {
            let (a, b) = (&rec.inputs[0], &rec.inputs[1]);
            if a.requires_grad() {
                sink(a, mul_grad(a, b, gout));
            }
            if b.requires_grad() {
                sink(b, mul_grad(b, a, gout));
            }
        }
        Op::AddScalar => sink(&rec.inputs[0], gout.to_vec()),
        Op::MulScalar(c) => sink(&rec.inputs[0], gout.iter().map(|&g| g * c).collect()),
        Op::Neg => sink(&rec.inputs[0], gout.iter().map(|&g| -g).collect()),
        Op::Square => {
            let x = rec.inputs[0].values();
            sink(
                &rec.inputs[0],
                gout.iter().zip(x.iter()).map(|(&g, &v)| 2.0 * v * g).collect(),
            );
        }
        Op::Sigmoid => {
            let y = rec.output.values();
            sink(
                &rec.inputs[0],
                gout.iter().zip(y.iter()).map(|(&g, &s)| g * s * (1.0 - s)).collect(),
            );
        }
        Op::Relu => {
            let x = rec.inputs[0].values();
            sink(
                &rec.inputs[0],
                gout.iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            );
        }
        Op::ClampNonPositive => {
            let x = rec.inputs[0].values();
            sink(
                &rec.inputs[0],
                gout.iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v < 0.0 { g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Log { guard } => {
            let x = rec.inputs[0].values();
            let guard = *guard;
            sink(
                &rec.inputs[0],
                gout.iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| {
                        if guard && v < LOG_GUARD_EPS {
                            0.0
                        } else {
                            g / v
                        }
                    })
                    .collect(),
            );
        }
        Op::GradScale(c) => sink(&rec.inputs[0], gout.iter().map(|&g| g * c).collect()),
        Op::Conv2d { stride, padding } => {
            conv2d_backward(rec, gout, *stride, *padding, sink);
        }
        Op::Reduce(kind) => {
            let a = &rec.inputs[0];
            let n = a.shape().numel();
            let g = match kind {
                ReduceKind::Sum => gout[0],
                ReduceKind::Mean => (gout[0] as f64 / n as f64) as f32,
            };
            sink(a, vec![g; n]);
        }
        Op::MaskedMean { ones } => {
            let a = &rec.inputs[0];
            if a.requires_grad() {
                let m = rec.inputs[1].values();
                let g = if *ones == 0 {
                    0.0
                } else {
                    (gout[0] as f64 / *ones as f64) as f32
                };
                sink(a, m.iter().map(|&mv| if mv == 1.0 { g } else { 0.0 }).collect());
            }
        }
        Op::Upsample2x => {
            let a = &rec.inputs[0];
            let (c, h, w) = a.shape().as_chw("upsample_nearest_2x").expect("recorded shape");
            let (oh, ow) = (2 * h, 2 * w);
            let mut ga = vec![0.0f32; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        ga[ch * h * w + (oy / 2) * w + ox / 2] +=
                            gout[ch * oh * ow + oy * ow + ox];
                    }
                }
            }
            sink(a, ga);
        }
        Op::MaxPool2x { argmax } => {
            let a = &rec.inputs[0];
            let mut ga = vec![0.0f32; a.shape().numel()];
            for (o, &src) in argmax.iter().enumerate() {
                ga[src as usize] += gout[o];
            }
            sink(a, ga);
        }
        Op::ConcatChannels { parts } => {
            let (_, h, w) = rec.output.shape().as_chw("concat_channels").expect("recorded shape");
            let mut offset = 0usize;
            for (part, &c) in rec.inputs.iter().zip(parts.iter()) {
                if part.requires_grad() {
                    sink(part, gout[offset..offset + c * h * w].to_vec());
                }
                offset += c * h * w;
            }
        }
        Op::SliceChannels { from, to } => {
            let a = &rec.inputs[0];
            let (_, h, w) = a.shape().as_chw("slice_channels").expect("recorded shape");
            let mut ga = vec![0.0f32; a.shape().numel()];
            ga[from * h * w..to * h * w].copy_from_slice(gout);
            sink(a, ga);
        }
        Op::SpatialMask => {
            let a = &rec.inputs[0];
            if a.requires_grad() {
                let (c, h, w) = a.shape().as_chw("spatial_mask").expect("recorded shape");
                let m = rec.inputs[1].values();
                let mut ga = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for i in 0..h * w {
                        ga[ch * h * w + i] = gout[ch * h * w + i] * m[i];
                    }
                }
                sink(a, ga);
            }
        }
    }
}

/// Gradient of a binary op for operand `target`: either a copy of the output
/// gradient (matching shapes) or its sum (scalar operand).
fn spread_to(target: &Tensor, gout: &[f32], scale: f32) -> Vec<f32> {
    if target.shape().numel() == gout.len() {
        gout.iter().map(|&g| g * scale).collect()
    } else {
        let acc: f64 = gout.iter().map(|&g| g as f64).sum();
        vec![(acc * scale as f64) as f32]
    }
}

/// Gradient of `mul` for `target`, whose partner operand is `other`.
fn mul_grad(target: &Tensor, other: &Tensor, gout: &[f32]) -> Vec<f32> {
    let ov = other.values();
    if target.shape().numel() == gout.len() {
        if ov.len() == gout.len() {
            gout.iter().zip(ov.iter()).map(|(&g, &o)| g * o).collect()
        } else {
            let s = ov[0];
            gout.iter().map(|&g| g * s).collect()
        }
    } else {
        let acc: f64 = gout
            .iter()
            .zip(ov.iter())
            .map(|(&g, &o)| g as f64 * o as f64)
            .sum();
        vec![acc as f32]
    }
}

fn conv2d_backward(
    rec: &Record,
    gout: &[f32],
    stride: usize,
    padding: usize,
    sink: &mut dyn FnMut(&Tensor, Vec<f32>),
) {
    let input = &rec.inputs[0];
    let weight = &rec.inputs[1];
    let bias = &rec.inputs[2];
    let (in_c, h, w) = input.shape().as_chw("conv2d").expect("recorded shape");
    let wd = weight.shape().dims();
    let (out_c, k) = (wd[0], wd[2]);
    let (_, out_h, out_w) = rec.output.shape().as_chw("conv2d").expect("recorded shape");

    if bias.requires_grad() {
        let mut gb = vec![0.0f32; out_c];
        for (oc, slot) in gb.iter_mut().enumerate() {
            let acc: f64 = gout[oc * out_h * out_w..(oc + 1) * out_h * out_w]
                .iter()
                .map(|&g| g as f64)
                .sum();
            *slot = acc as f32;
        }
        sink(bias, gb);
    }

    if weight.requires_grad() {
        let x = input.values();
        let mut gw = vec![0.0f64; out_c * in_c * k * k];
        for oc in 0..out_c {
            let g_oc = &gout[oc * out_h * out_w..(oc + 1) * out_h * out_w];
            for ic in 0..in_c {
                let x_ic = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0f64;
                        for oy in 0..out_h {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &x_ic[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &g_oc[oy * out_w..(oy + 1) * out_w];
                            for (ox, &g) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += g as f64 * row[ix as usize] as f64;
                            }
                        }
                        gw[oc * in_c * k * k + ic * k * k + ky * k + kx] += acc;
                    }
                }
            }
        }
        sink(weight, gw.into_iter().map(|v| v as f32).collect());
    }

    if input.requires_grad() {
        let wt = weight.values();
        let mut gx = vec![0.0f64; in_c * h * w];
        for oc in 0..out_c {
            let g_oc = &gout[oc * out_h * out_w..(oc + 1) * out_h * out_w];
            let w_oc = &wt[oc * in_c * k * k..(oc + 1) * in_c * k * k];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let g = g_oc[oy * out_w + ox] as f64;
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..in_c {
                        let w_ic = &w_oc[ic * k * k..(ic + 1) * k * k];
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[ic * h * w + iy as usize * w + ix as usize] +=
                                    g * w_ic[ky * k + kx] as f64;
                            }
                        }
                    }
                }
            }
        }
        sink(input, gx.into_iter().map(|v| v as f32).collect());
    }
}
