//! Desk-scale engine for exemplar-free class-incremental semantic
//! segmentation with residual background adaptation.
//!
//! The crate provides, bottom-up:
//!
//! * [`tensor`] / [`ops`] — a minimal reverse-mode autodiff engine over
//!   dense `f32` tensors;
//! * [`net`] — a toy convolutional encoder/decoder with one output head per
//!   training step, each emitting class logits plus one extra
//!   background/residual channel;
//! * [`bgadapt`] — the filtered aggregation of residual background channels
//!   into a single background logit;
//! * [`pseudo`] — teacher-confidence pseudo-labeling of background pixels;
//! * [`losses`] — the training objective (pseudo-background BCE, the two
//!   residual regularizers, per-channel knowledge distillation, masked
//!   feature distillation);
//! * [`synthdata`] — deterministic synthetic shape scenes and dataset files;
//! * [`metrics`] — prediction and grouped mean-IoU evaluation;
//! * [`trainer`] — SGD with a polynomial schedule, the incremental step
//!   orchestration, checkpoints, and the ablation registry;
//! * [`gradcheck`] — finite-difference verification of every primitive and
//!   loss against an independent 64-bit reference.

pub mod archive;
pub mod bgadapt;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod pseudo;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Warning};
