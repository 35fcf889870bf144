//! Finite-difference verification of analytic gradients.
//!
//! Every differentiable primitive (and, further down, every loss) has a
//! named case here.  A case builds random small tensors from a seed, runs
//! the engine forward + backward, and compares each analytic gradient
//! element against central finite differences of an *independent* 64-bit
//! reference evaluation of the same function.  The reference path never
//! touches the tape, so a broken backward rule cannot hide.
//!
//! Generators keep sample points away from subgradient kinks (relu / clamp /
//! hinge at 0, pool ties) by construction; at a kink the one-sided
//! derivatives disagree and finite differences are meaningless.
//!
//! Two operations are exempt from finite differences by their very
//! contracts and are verified analytically in the unit tests instead:
//! `detach` (gradient is defined to be absent) and `grad_scale` (backward is
//! defined to differ from the forward function's derivative).  The detach
//! composite case below still runs, checking the tracked operand and
//! asserting the detached one receives exactly nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::label::LabelMap;
use crate::losses::{self, LossComponents, LossWeights, RegionMasks};
use crate::ops;
use crate::pseudo::PseudoLabel;
use crate::tensor::{Shape, Tape, Tensor};

/// Comparison thresholds and the finite-difference step.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Absolute slack used when both gradients are near zero.
    pub abs: f64,
    /// Relative slack elsewhere.
    pub rel: f64,
    /// Central-difference step size.
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: 1e-5,
            rel: 1e-3,
            step: 1e-3,
        }
    }
}

/// Location and values of the worst disagreement in a failing case.
#[derive(Clone, Debug, Serialize)]
pub struct FailureDetail {
    pub seed: u64,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Result of running one case over all its seeds.
#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub case: String,
    pub seeds: u32,
    pub elements_checked: usize,
    pub worst_abs: f64,
    pub worst_rel: f64,
    pub pass: bool,
    pub failure: Option<FailureDetail>,
}

/// One named tensor fed to a case, with gradient tracking on.
pub struct NamedInput {
    pub name: &'static str,
    pub tensor: Tensor,
    /// Skip finite differences for this input (its gradient is checked to be
    /// exactly absent/zero instead).
    pub expect_no_grad: bool,
}

impl NamedInput {
    fn checked(name: &'static str, tensor: Tensor) -> NamedInput {
        tensor.set_requires_grad(true);
        NamedInput {
            name,
            tensor,
            expect_no_grad: false,
        }
    }

    fn no_grad_expected(name: &'static str, tensor: Tensor) -> NamedInput {
        tensor.set_requires_grad(true);
        NamedInput {
            name,
            tensor,
            expect_no_grad: true,
        }
    }
}

/// A concrete instance of a case for one seed.
pub struct CaseInstance {
    pub inputs: Vec<NamedInput>,
    /// Forward through the engine; must produce a scalar.
    pub engine: Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>,
    /// Independent 64-bit forward of the same function over the inputs'
    /// values, in the same order.
    pub reference: Box<dyn Fn(&[Vec<f64>]) -> f64>,
}

/// A named, seedable verification case.
pub struct CaseSpec {
    pub name: &'static str,
    pub build: fn(u64) -> CaseInstance,
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_guarded64(x: f64) -> f64 {
    x.max(ops::LOG_GUARD_EPS as f64).ln()
}

/// Reference 2D convolution matching the engine's layout conventions.
#[allow(clippy::too_many_arguments)]
fn conv2d64(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    in_c: usize,
    h: usize,
    wd: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let out_h = (h + 2 * padding - k) / stride + 1;
    let out_w = (wd + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f64; out_c * out_h * out_w];
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b[oc];
                for ic in 0..in_c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[ic * h * wd + iy as usize * wd + ix as usize]
                                * w[oc * in_c * k * k + ic * k * k + ky * k + kx];
                        }
                    }
                }
                out[oc * out_h * out_w + oy * out_w + ox] = acc;
            }
        }
    }
    out
}

fn dot64(a: &[f64], r: &[f64]) -> f64 {
    a.iter().zip(r).map(|(&x, &y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform magnitudes in `[min_mag, hi]` with random signs: keeps values
/// away from the kink at zero.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize, min_mag: f32, hi: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(min_mag..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Fixed random projection weights (shaped like the tensor they multiply)
/// so reductions exercise non-uniform output gradients.
fn projection_shaped(rng: &mut ChaCha8Rng, shape: Shape) -> (Tensor, Vec<f64>) {
    let v = uniform(rng, shape.numel(), 0.5, 1.5);
    let v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    (Tensor::from_vec(shape, v).expect("projection shape"), v64)
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<f64>) {
    projection_shaped(rng, Shape::new(&[n]))
}

fn flat_param(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::from_vec(Shape::new(&[n]), uniform(rng, n, lo, hi)).expect("shape")
}

/// Project a tensor against constant weights of the same shape and sum:
/// the standard scalarization used by all multi-output cases.
fn project_and_sum(tape: &Tape, t: &Tensor, r: &Tensor) -> Result<Tensor> {
    let prod = ops::mul(tape, t, r)?;
    Ok(ops::sum(tape, &prod))
}

// --- primitive cases ---------------------------------------------------

fn case_add(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xadd);
    let n = 24;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let b = flat_param(&mut rng, n, -2.0, 2.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a), NamedInput::checked("b", b)],
        engine: Box::new(move |tape, ins| {
            let y = ops::add(tape, &ins[0], &ins[1])?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().zip(&ins[1]).map(|(&x, &y)| x + y).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_sub(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x5b);
    let n = 24;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let b = flat_param(&mut rng, n, -2.0, 2.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a), NamedInput::checked("b", b)],
        engine: Box::new(move |tape, ins| {
            let y = ops::sub(tape, &ins[0], &ins[1])?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().zip(&ins[1]).map(|(&x, &y)| x - y).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_mul(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x30c);
    let n = 24;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let b = flat_param(&mut rng, n, -2.0, 2.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a), NamedInput::checked("b", b)],
        engine: Box::new(move |tape, ins| {
            let y = ops::mul(tape, &ins[0], &ins[1])?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().zip(&ins[1]).map(|(&x, &y)| x * y).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_scalar_operand(seed: u64) -> CaseInstance {
    // Scalar-vs-tensor pairing: loss = sum((a * s) + s2) with scalar tensors.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x5ca1a);
    let n = 16;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let s = Tensor::from_vec(Shape::scalar(), vec![rng.gen_range(0.5f32..1.5)]).unwrap();
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a), NamedInput::checked("s", s)],
        engine: Box::new(move |tape, ins| {
            let y = ops::mul(tape, &ins[0], &ins[1])?;
            Ok(ops::sum(tape, &y))
        }),
        reference: Box::new(move |ins| {
            let s = ins[1][0];
            ins[0].iter().map(|&x| x * s).sum()
        }),
    }
}

fn case_add_mul_scalar_const(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xc0);
    let n = 16;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let c1 = rng.gen_range(-1.0f32..1.0);
    let c2 = rng.gen_range(0.5f32..2.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::add_scalar(tape, &ins[0], c1);
            let z = ops::mul_scalar(tape, &y, c2);
            project_and_sum(tape, &z, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0]
                .iter()
                .map(|&x| (x + c1 as f64) * c2 as f64)
                .collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_neg_square(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x9e9);
    let n = 16;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::square(tape, &ops::neg(tape, &ins[0]));
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| (-x) * (-x)).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_sigmoid(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x516);
    let n = 32;
    let a = flat_param(&mut rng, n, -4.0, 4.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::sigmoid(tape, &ins[0]);
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| sigmoid64(x)).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_relu(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x7e1);
    let n = 32;
    let a = Tensor::from_vec(
        Shape::new(&[n]),
        signed_away_from_zero(&mut rng, n, 0.05, 2.0),
    )
    .unwrap();
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::relu(tape, &ins[0]);
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| x.max(0.0)).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_hinge(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x417e);
    let n = 32;
    let a = Tensor::from_vec(
        Shape::new(&[n]),
        signed_away_from_zero(&mut rng, n, 0.05, 2.0),
    )
    .unwrap();
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::hinge(tape, &ins[0]);
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| x.max(0.0)).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_clamp_nonpositive(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xc1a);
    let n = 32;
    let a = Tensor::from_vec(
        Shape::new(&[n]),
        signed_away_from_zero(&mut rng, n, 0.05, 2.0),
    )
    .unwrap();
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::clamp_nonpositive(tape, &ins[0]);
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| x.min(0.0)).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_log_guarded(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x106);
    let n = 24;
    let a = flat_param(&mut rng, n, 0.1, 3.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::log_guarded(tape, &ins[0]);
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| log_guarded64(x)).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_conv2d(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xc07);
    let (in_c, h, w, out_c, k) = (2usize, 4usize, 4usize, 3usize, 3usize);
    let x = Tensor::from_vec(Shape::chw(in_c, h, w), uniform(&mut rng, in_c * h * w, -1.0, 1.0))
        .unwrap();
    let wt = Tensor::from_vec(
        Shape::new(&[out_c, in_c, k, k]),
        uniform(&mut rng, out_c * in_c * k * k, -0.6, 0.6),
    )
    .unwrap();
    let b = flat_param(&mut rng, out_c, -0.3, 0.3);
    let (r, r64) = projection_shaped(&mut rng, Shape::chw(out_c, h, w));
    CaseInstance {
        inputs: vec![
            NamedInput::checked("input", x),
            NamedInput::checked("weight", wt),
            NamedInput::checked("bias", b),
        ],
        engine: Box::new(move |tape, ins| {
            let y = ops::conv2d(tape, &ins[0], &ins[1], &ins[2], 1, 1)?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y = conv2d64(&ins[0], &ins[1], &ins[2], in_c, h, w, out_c, k, 1, 1);
            dot64(&y, &r64)
        }),
    }
}

fn case_conv2d_strided(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xc075);
    let (in_c, h, w, out_c, k) = (2usize, 6usize, 6usize, 2usize, 3usize);
    let x = Tensor::from_vec(Shape::chw(in_c, h, w), uniform(&mut rng, in_c * h * w, -1.0, 1.0))
        .unwrap();
    let wt = Tensor::from_vec(
        Shape::new(&[out_c, in_c, k, k]),
        uniform(&mut rng, out_c * in_c * k * k, -0.6, 0.6),
    )
    .unwrap();
    let b = flat_param(&mut rng, out_c, -0.3, 0.3);
    let out_h = (h - k) / 2 + 1;
    let (r, r64) = projection_shaped(&mut rng, Shape::chw(out_c, out_h, out_h));
    CaseInstance {
        inputs: vec![
            NamedInput::checked("input", x),
            NamedInput::checked("weight", wt),
            NamedInput::checked("bias", b),
        ],
        engine: Box::new(move |tape, ins| {
            let y = ops::conv2d(tape, &ins[0], &ins[1], &ins[2], 2, 0)?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y = conv2d64(&ins[0], &ins[1], &ins[2], in_c, h, w, out_c, k, 2, 0);
            dot64(&y, &r64)
        }),
    }
}

fn case_sum_mean(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x5d);
    let n = 40;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let s = ops::sum(tape, &ins[0]);
            let m = ops::mean(tape, &ins[0]);
            ops::add(tape, &s, &m)
        }),
        reference: Box::new(move |ins| {
            let s: f64 = ins[0].iter().sum();
            s + s / ins[0].len() as f64
        }),
    }
}

fn case_masked_mean(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x3a5);
    let n = 36;
    let a = flat_param(&mut rng, n, -2.0, 2.0);
    let mut mask_bits: Vec<f32> = (0..n).map(|_| rng.gen_bool(0.4) as u32 as f32).collect();
    // Guarantee a non-empty mask so the degenerate zero branch (tested
    // separately) is not hit.
    mask_bits[0] = 1.0;
    let mask64: Vec<f64> = mask_bits.iter().map(|&m| m as f64).collect();
    let mask = Tensor::from_vec(Shape::new(&[n]), mask_bits).unwrap();
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| ops::masked_mean(tape, &ins[0], &mask)),
        reference: Box::new(move |ins| {
            let ones: f64 = mask64.iter().sum();
            let acc: f64 = ins[0]
                .iter()
                .zip(&mask64)
                .map(|(&v, &m)| v * m)
                .sum();
            acc / ones
        }),
    }
}

fn case_upsample(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x2f);
    let (c, h, w) = (2usize, 3usize, 3usize);
    let a = Tensor::from_vec(Shape::chw(c, h, w), uniform(&mut rng, c * h * w, -1.0, 1.0)).unwrap();
    let (r, r64) = projection_shaped(&mut rng, Shape::chw(c, 2 * h, 2 * w));
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::upsample_nearest_2x(tape, &ins[0])?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let (oh, ow) = (2 * h, 2 * w);
            let mut y = vec![0.0f64; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        y[ch * oh * ow + oy * ow + ox] =
                            ins[0][ch * h * w + (oy / 2) * w + ox / 2];
                    }
                }
            }
            dot64(&y, &r64)
        }),
    }
}

fn case_max_pool(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xb001);
    let (c, h, w) = (2usize, 4usize, 4usize);
    // Separate the four values of every 2x2 window by at least ~0.2 so a
    // 1e-3 perturbation can never flip the argmax (kink avoidance).
    let mut values = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for wy in 0..h / 2 {
            for wx in 0..w / 2 {
                let base = rng.gen_range(-1.0f32..0.5);
                let mut offsets = [0.0f32, 0.3, 0.6, 0.9];
                for i in (1..4).rev() {
                    let j = rng.gen_range(0..=i);
                    offsets.swap(i, j);
                }
                for (pos, &off) in offsets.iter().enumerate() {
                    let (dy, dx) = (pos / 2, pos % 2);
                    values[ch * h * w + (2 * wy + dy) * w + 2 * wx + dx] =
                        base + off + rng.gen_range(0.0f32..0.05);
                }
            }
        }
    }
    let a = Tensor::from_vec(Shape::chw(c, h, w), values).unwrap();
    let (r, r64) = projection_shaped(&mut rng, Shape::chw(c, h / 2, w / 2));
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::max_pool_2x(tape, &ins[0])?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let (oh, ow) = (h / 2, w / 2);
            let mut y = vec![0.0f64; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                best = best
                                    .max(ins[0][ch * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                            }
                        }
                        y[ch * oh * ow + oy * ow + ox] = best;
                    }
                }
            }
            dot64(&y, &r64)
        }),
    }
}

fn case_concat_slice(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xcc);
    let (h, w) = (3usize, 3usize);
    let a = Tensor::from_vec(Shape::chw(1, h, w), uniform(&mut rng, h * w, -1.0, 1.0)).unwrap();
    let b = Tensor::from_vec(Shape::chw(2, h, w), uniform(&mut rng, 2 * h * w, -1.0, 1.0)).unwrap();
    let (r, r64) = projection_shaped(&mut rng, Shape::chw(2, h, w));
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a), NamedInput::checked("b", b)],
        engine: Box::new(move |tape, ins| {
            let cat = ops::concat_channels(tape, &[&ins[0], &ins[1]])?;
            let mid = ops::slice_channels(tape, &cat, 1, 3)?;
            project_and_sum(tape, &mid, &r)
        }),
        reference: Box::new(move |ins| {
            // Channels 1..3 of the concatenation are exactly input b.
            dot64(&ins[1], &r64)
        }),
    }
}

fn case_spatial_mask(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x5a3);
    let (c, h, w) = (3usize, 4usize, 4usize);
    let a = Tensor::from_vec(Shape::chw(c, h, w), uniform(&mut rng, c * h * w, -1.0, 1.0)).unwrap();
    let mask_bits: Vec<f32> = (0..h * w).map(|_| rng.gen_bool(0.5) as u32 as f32).collect();
    let mask64: Vec<f64> = mask_bits.iter().map(|&m| m as f64).collect();
    let mask = Tensor::from_vec(Shape::chw(1, h, w), mask_bits).unwrap();
    let (r, r64) = projection_shaped(&mut rng, Shape::chw(c, h, w));
    CaseInstance {
        inputs: vec![NamedInput::checked("a", a)],
        engine: Box::new(move |tape, ins| {
            let y = ops::spatial_mask(tape, &ins[0], &mask)?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = (0..c * h * w)
                .map(|i| ins[0][i] * mask64[i % (h * w)])
                .collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_detach_composite(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xde7);
    let n = 16;
    let x = flat_param(&mut rng, n, -2.0, 2.0);
    let y = flat_param(&mut rng, n, -2.0, 2.0);
    let x64: Vec<f64> = x.values().iter().map(|&v| v as f64).collect();
    CaseInstance {
        inputs: vec![
            NamedInput::no_grad_expected("detached", x),
            NamedInput::checked("tracked", y),
        ],
        engine: Box::new(move |tape, ins| {
            let xd = ins[0].detach();
            let prod = ops::mul(tape, &xd, &ins[1])?;
            Ok(ops::sum(tape, &prod))
        }),
        reference: Box::new(move |ins| {
            // The detached operand is a constant for differentiation; only
            // the tracked operand varies in the reference.
            ins[1].iter().zip(&x64).map(|(&y, &x)| x * y).sum()
        }),
    }
}

fn case_reuse_composite(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x2e5e);
    let n = 16;
    let x = flat_param(&mut rng, n, -2.0, 2.0);
    let (r, r64) = projection(&mut rng, n);
    CaseInstance {
        inputs: vec![NamedInput::checked("x", x)],
        engine: Box::new(move |tape, ins| {
            // x appears on two paths: x*x and +x.
            let sq = ops::mul(tape, &ins[0], &ins[0])?;
            let y = ops::add(tape, &sq, &ins[0])?;
            project_and_sum(tape, &y, &r)
        }),
        reference: Box::new(move |ins| {
            let y: Vec<f64> = ins[0].iter().map(|&x| x * x + x).collect();
            dot64(&y, &r64)
        }),
    }
}

fn case_deep_composite(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xdee9);
    let (c1, h, w, c2, k) = (2usize, 4usize, 4usize, 3usize, 3usize);
    let x = Tensor::from_vec(Shape::chw(c1, h, w), uniform(&mut rng, c1 * h * w, -1.0, 1.0))
        .unwrap();
    let w1 = Tensor::from_vec(
        Shape::new(&[c2, c1, k, k]),
        uniform(&mut rng, c2 * c1 * k * k, -0.5, 0.5),
    )
    .unwrap();
    let b1 = flat_param(&mut rng, c2, 0.05, 0.4);
    CaseInstance {
        inputs: vec![
            NamedInput::checked("input", x),
            NamedInput::checked("weight", w1),
            NamedInput::checked("bias", b1),
        ],
        engine: Box::new(move |tape, ins| {
            let y = ops::conv2d(tape, &ins[0], &ins[1], &ins[2], 1, 1)?;
            let a = ops::sigmoid(tape, &y);
            Ok(ops::mean(tape, &a))
        }),
        reference: Box::new(move |ins| {
            let y = conv2d64(&ins[0], &ins[1], &ins[2], c1, h, w, c2, k, 1, 1);
            y.iter().map(|&v| sigmoid64(v)).sum::<f64>() / y.len() as f64
        }),
    }
}

// --- loss cases --------------------------------------------------------

/// Random label map over {0} ∪ novel ids with at least one pixel of each
/// kind, which keeps both region masks non-empty.
fn random_labels(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    novel: std::ops::RangeInclusive<u16>,
) -> LabelMap {
    let ids: Vec<u16> = novel.collect();
    let mut map = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(0.45) {
                map.set(y, x, ids[rng.gen_range(0..ids.len())]);
            }
        }
    }
    map.set(0, 0, ids[0]);
    map.set(h - 1, w - 1, 0);
    map
}

fn case_loss_pb_bce(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x9bbce);
    let (h, w) = (6usize, 6usize);
    let novel = 5u16..=6;
    let n_novel = 2usize;
    let labels = random_labels(&mut rng, h, w, novel.clone());
    let pseudo = PseudoLabel::from_ground_truth(&labels);
    let logits = Tensor::from_vec(
        Shape::chw(1 + n_novel, h, w),
        uniform(&mut rng, (1 + n_novel) * h * w, -2.5, 2.5),
    )
    .unwrap();
    let novel_ids: Vec<u16> = novel.collect();
    let pseudo_ref = pseudo.clone();
    let novel_ref = novel_ids.clone();
    CaseInstance {
        inputs: vec![NamedInput::checked("logits", logits)],
        engine: Box::new(move |tape, ins| {
            let probs = ops::sigmoid(tape, &ins[0]);
            losses::pb_bce(tape, &probs, &pseudo, &novel_ids)
        }),
        reference: Box::new(move |ins| {
            let hw = (h * w) as f64;
            let mut acc = 0.0f64;
            for (pix, &lab) in pseudo_ref.labels().data().iter().enumerate() {
                for (ch, &id) in std::iter::once(&0u16).chain(novel_ref.iter()).enumerate() {
                    let target = if lab == id { 1.0 } else { 0.0 };
                    let p = sigmoid64(ins[0][ch * h * w + pix]);
                    acc += target * log_guarded64(p) + (1.0 - target) * log_guarded64(1.0 - p);
                }
            }
            -acc / hw
        }),
    }
}

fn case_loss_bga_plus(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xb9a9);
    let (h, w) = (6usize, 6usize);
    let labels = random_labels(&mut rng, h, w, 3..=4);
    let masks = RegionMasks::from_labels(&labels, &[3, 4]);
    let novel64: Vec<f64> = masks.novel().value_vec().iter().map(|&v| v as f64).collect();
    let count = novel64.iter().sum::<f64>();
    let adapt = Tensor::from_vec(Shape::chw(1, h, w), uniform(&mut rng, h * w, -4.0, 4.0)).unwrap();
    CaseInstance {
        inputs: vec![NamedInput::checked("adapt", adapt)],
        engine: Box::new(move |tape, ins| losses::bga_plus(tape, &ins[0], &masks)),
        reference: Box::new(move |ins| {
            let acc: f64 = ins[0]
                .iter()
                .zip(&novel64)
                .filter(|(_, &m)| m == 1.0)
                .map(|(&mu, _)| log_guarded64(sigmoid64(-mu)))
                .sum();
            -acc / count
        }),
    }
}

fn case_loss_bga_minus(seed: u64) -> CaseInstance {
    instance_bga_minus(seed, false)
}

/// The deliberately-broken variant used as the verification tool's negative
/// control: forward is identical, but the gradient through the probability
/// map is sign-flipped via `grad_scale(-1)`.
fn case_loss_bga_minus_bugged(seed: u64) -> CaseInstance {
    instance_bga_minus(seed, true)
}

fn instance_bga_minus(seed: u64, sabotage: bool) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xb9a3);
    let (h, w) = (6usize, 6usize);
    let labels = random_labels(&mut rng, h, w, 3..=4);
    let masks = RegionMasks::from_labels(&labels, &[3, 4]);
    let bg64: Vec<f64> = masks
        .background()
        .value_vec()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let count = bg64.iter().sum::<f64>();
    // Keep |mu| away from 0: the per-pixel term has its hinge kink exactly
    // at probability one half.
    let adapt = Tensor::from_vec(
        Shape::chw(1, h, w),
        signed_away_from_zero(&mut rng, h * w, 0.05, 4.0),
    )
    .unwrap();
    CaseInstance {
        inputs: vec![NamedInput::checked("adapt", adapt)],
        engine: Box::new(move |tape, ins| {
            let phi = ops::sigmoid(tape, &ins[0]);
            let phi = if sabotage {
                ops::grad_scale(tape, &phi, -1.0)
            } else {
                phi
            };
            losses::bga_minus(tape, &phi, &masks)
        }),
        reference: Box::new(move |ins| {
            let acc: f64 = ins[0]
                .iter()
                .zip(&bg64)
                .filter(|(_, &m)| m == 1.0)
                .map(|(&mu, _)| {
                    let p = sigmoid64(mu);
                    ((1.0 - p) * (1.0 - p) - p * p).max(0.0)
                })
                .sum();
            acc / count
        }),
    }
}

fn case_loss_gkd(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x96d);
    let (h, w) = (5usize, 5usize);
    let c1 = 3usize; // one old head: two classes + its residual channel
    let c2 = 2usize;
    let student = Tensor::from_vec(
        Shape::chw(c1 + c2, h, w),
        uniform(&mut rng, (c1 + c2) * h * w, -2.5, 2.5),
    )
    .unwrap();
    let t1 = Tensor::from_vec(Shape::chw(c1, h, w), uniform(&mut rng, c1 * h * w, 0.05, 0.95))
        .unwrap();
    let t2 = Tensor::from_vec(Shape::chw(c2, h, w), uniform(&mut rng, c2 * h * w, 0.05, 0.95))
        .unwrap();
    let t1_64: Vec<f64> = t1.values().iter().map(|&v| v as f64).collect();
    let t2_64: Vec<f64> = t2.values().iter().map(|&v| v as f64).collect();
    CaseInstance {
        inputs: vec![NamedInput::checked("student_logits", student)],
        engine: Box::new(move |tape, ins| {
            let s1 = ops::slice_channels(tape, &ins[0], 0, c1)?;
            let s2 = ops::slice_channels(tape, &ins[0], c1, c1 + c2)?;
            let p1 = ops::sigmoid(tape, &s1);
            let p2 = ops::sigmoid(tape, &s2);
            losses::gkd(tape, &[(p1, t1.clone()), (p2, t2.clone())])
        }),
        reference: Box::new(move |ins| {
            let hw = (h * w) as f64;
            let mut acc = 0.0f64;
            for (i, &t) in t1_64.iter().chain(t2_64.iter()).enumerate() {
                let s = sigmoid64(ins[0][i]);
                acc += t * log_guarded64(s) + (1.0 - t) * log_guarded64(1.0 - s);
            }
            -acc / hw
        }),
    }
}

fn case_loss_bfd(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0xbfd);
    let (c, h, w) = (3usize, 5usize, 5usize);
    let labels = random_labels(&mut rng, h, w, 2..=2);
    let masks = RegionMasks::from_labels(&labels, &[2]);
    let bg64: Vec<f64> = masks
        .background()
        .value_vec()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let student = Tensor::from_vec(Shape::chw(c, h, w), uniform(&mut rng, c * h * w, -1.5, 1.5))
        .unwrap();
    let teacher = Tensor::from_vec(Shape::chw(c, h, w), uniform(&mut rng, c * h * w, -1.5, 1.5))
        .unwrap();
    let teacher64: Vec<f64> = teacher.values().iter().map(|&v| v as f64).collect();
    CaseInstance {
        inputs: vec![NamedInput::checked("student_features", student)],
        engine: Box::new(move |tape, ins| {
            losses::bfd(
                tape,
                &[(ins[0].clone(), teacher.clone())],
                masks.background(),
            )
        }),
        reference: Box::new(move |ins| {
            (0..c * h * w)
                .map(|i| {
                    let d = (ins[0][i] - teacher64[i]) * bg64[i % (h * w)];
                    d * d
                })
                .sum()
        }),
    }
}

fn case_loss_total(seed: u64) -> CaseInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37) ^ 0x707a1);
    let comps: Vec<f32> = uniform(&mut rng, 5, 0.1, 2.0);
    let weights = LossWeights::new(1.0, 5.0, 1.0, 4.0).unwrap();
    let wref = [1.0f64, 1.0, 5.0, 1.0, 4.0];
    CaseInstance {
        inputs: vec![NamedInput::checked(
            "components",
            Tensor::from_vec(Shape::chw(5, 1, 1), comps).unwrap(),
        )],
        engine: Box::new(move |tape, ins| {
            let one = |i: usize| ops::slice_channels(tape, &ins[0], i, i + 1);
            let parts = LossComponents {
                pb_bce: one(0)?,
                bga_plus: Some(one(1)?),
                bga_minus: Some(one(2)?),
                gkd: Some(one(3)?),
                bfd: Some(one(4)?),
            };
            losses::total_objective(tape, &parts, &weights)
        }),
        reference: Box::new(move |ins| {
            ins[0]
                .iter()
                .zip(wref.iter())
                .map(|(&v, &w)| v * w)
                .sum()
        }),
    }
}

/// The full registry in a stable order.
pub fn cases() -> Vec<CaseSpec> {
    vec![
        CaseSpec { name: "op_add", build: case_add },
        CaseSpec { name: "op_sub", build: case_sub },
        CaseSpec { name: "op_mul", build: case_mul },
        CaseSpec { name: "op_scalar_operand", build: case_scalar_operand },
        CaseSpec { name: "op_add_mul_scalar", build: case_add_mul_scalar_const },
        CaseSpec { name: "op_neg_square", build: case_neg_square },
        CaseSpec { name: "op_sigmoid", build: case_sigmoid },
        CaseSpec { name: "op_relu", build: case_relu },
        CaseSpec { name: "op_hinge", build: case_hinge },
        CaseSpec { name: "op_clamp_nonpositive", build: case_clamp_nonpositive },
        CaseSpec { name: "op_log_guarded", build: case_log_guarded },
        CaseSpec { name: "op_conv2d", build: case_conv2d },
        CaseSpec { name: "op_conv2d_strided", build: case_conv2d_strided },
        CaseSpec { name: "op_sum_mean", build: case_sum_mean },
        CaseSpec { name: "op_masked_mean", build: case_masked_mean },
        CaseSpec { name: "op_upsample_nearest_2x", build: case_upsample },
        CaseSpec { name: "op_max_pool_2x", build: case_max_pool },
        CaseSpec { name: "op_concat_slice", build: case_concat_slice },
        CaseSpec { name: "op_spatial_mask", build: case_spatial_mask },
        CaseSpec { name: "op_detach_composite", build: case_detach_composite },
        CaseSpec { name: "op_reuse_composite", build: case_reuse_composite },
        CaseSpec { name: "op_deep_composite", build: case_deep_composite },
        CaseSpec { name: "loss_pb_bce", build: case_loss_pb_bce },
        CaseSpec { name: "loss_bga_plus", build: case_loss_bga_plus },
        CaseSpec { name: "loss_bga_minus", build: case_loss_bga_minus },
        CaseSpec { name: "loss_gkd", build: case_loss_gkd },
        CaseSpec { name: "loss_bfd", build: case_loss_bfd },
        CaseSpec { name: "loss_total", build: case_loss_total },
    ]
}

/// The sabotaged case wired in by the `--inject-bug` negative control.
pub fn bugged_case() -> CaseSpec {
    CaseSpec {
        name: "loss_bga_minus_injected_bug",
        build: case_loss_bga_minus_bugged,
    }
}

/// Run one case over `seeds` seeds.  Never panics on tolerance failures;
/// the outcome carries the worst disagreement for replay.
pub fn run_case(spec: &CaseSpec, seeds: u32, tol: &Tolerance) -> CaseOutcome {
    let mut outcome = CaseOutcome {
        case: spec.name.to_string(),
        seeds,
        elements_checked: 0,
        worst_abs: 0.0,
        worst_rel: 0.0,
        pass: true,
        failure: None,
    };
    for seed in 0..seeds as u64 {
        let inst = (spec.build)(seed);
        let tensors: Vec<Tensor> = inst.inputs.iter().map(|i| i.tensor.clone()).collect();
        let tape = Tape::new();
        let loss = match (inst.engine)(&tape, &tensors) {
            Ok(l) => l,
            Err(e) => {
                outcome.pass = false;
                outcome.failure = Some(FailureDetail {
                    seed,
                    tensor: format!("engine error: {e}"),
                    index: 0,
                    analytic: f64::NAN,
                    numeric: f64::NAN,
                });
                return outcome;
            }
        };
        if tape.backward(&loss).is_err() {
            outcome.pass = false;
            return outcome;
        }

        let base: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| t.values().iter().map(|&v| v as f64).collect())
            .collect();

        // Value sanity: the 32-bit engine forward must agree with the 64-bit
        // reference to within float rounding.
        let ref_value = (inst.reference)(&base);
        let engine_value = loss.item().unwrap_or(f32::NAN) as f64;
        if (engine_value - ref_value).abs() > 1e-4 + 1e-3 * ref_value.abs() {
            outcome.pass = false;
            outcome.failure = Some(FailureDetail {
                seed,
                tensor: "forward value".into(),
                index: 0,
                analytic: engine_value,
                numeric: ref_value,
            });
            return outcome;
        }

        for (inp_idx, input) in inst.inputs.iter().enumerate() {
            let grad = input.tensor.grad();
            if input.expect_no_grad {
                let clean = match &grad {
                    None => true,
                    Some(g) => g.iter().all(|&v| v == 0.0),
                };
                if !clean {
                    outcome.pass = false;
                    outcome.failure = Some(FailureDetail {
                        seed,
                        tensor: input.name.into(),
                        index: 0,
                        analytic: grad.unwrap()[0] as f64,
                        numeric: 0.0,
                    });
                    return outcome;
                }
                continue;
            }
            let n = input.tensor.shape().numel();
            let grad = grad.unwrap_or_else(|| vec![0.0; n]);
            for j in 0..n {
                let mut plus = base.clone();
                plus[inp_idx][j] += tol.step;
                let mut minus = base.clone();
                minus[inp_idx][j] -= tol.step;
                let fd = ((inst.reference)(&plus) - (inst.reference)(&minus)) / (2.0 * tol.step);
                let ad = grad[j] as f64;
                let abs_err = (ad - fd).abs();
                let scale = ad.abs().max(fd.abs());
                let rel_err = abs_err / scale.max(1e-9);
                if scale > tol.abs && rel_err > outcome.worst_rel {
                    outcome.worst_rel = rel_err;
                }
                if abs_err > outcome.worst_abs {
                    outcome.worst_abs = abs_err;
                }
                outcome.elements_checked += 1;
                if abs_err > tol.abs.max(tol.rel * scale) {
                    outcome.pass = false;
                    if outcome.failure.is_none() {
                        outcome.failure = Some(FailureDetail {
                            seed,
                            tensor: input.name.into(),
                            index: j,
                            analytic: ad,
                            numeric: fd,
                        });
                    }
                }
            }
        }
    }
    outcome
}

/// Run every registered case (optionally filtered by substring), plus the
/// sabotaged negative-control case when `inject_bug` is set.
pub fn run_suite(
    filter: Option<&str>,
    inject_bug: bool,
    seeds: u32,
    tol: &Tolerance,
) -> Vec<CaseOutcome> {
    let mut specs = cases();
    if inject_bug {
        specs.push(bugged_case());
    }
    specs
        .iter()
        .filter(|s| filter.map_or(true, |f| s.name.contains(f)))
        .map(|s| run_case(s, seeds, tol))
        .collect()
}
