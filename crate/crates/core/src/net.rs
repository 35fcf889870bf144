//! A small convolutional segmentation network that grows one head per
//! training step.
//!
//! The shared backbone is an encoder (3x3 convolutions around one 2x
//! pooling) and a decoder (2x nearest upsampling plus a 3x3 convolution)
//! producing a feature map at input resolution.  Each step head reads that
//! map through a hidden 1x1 convolution and emits one logit channel per
//! class introduced at its step, plus — depending on the model kind — one
//! *extra* channel: the first head's extra channel is the base background
//! map, and later heads' extras are residual adaptation maps.
//!
//! The extra channel is its own 1x1 convolution rather than an extra row of
//! the class convolution, so freezing, auditing, and serialization can
//! address it independently.  Head output convolutions start at zero:
//! a freshly added head is exactly silent, and a new residual map starts as
//! the neutral element of the background aggregation.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bgadapt;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Shape, Tape, Tensor};

/// How the network models background across steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// First head owns a base background map; every later head adds a
    /// residual adaptation map, filtered into the aggregate at inference.
    Adaptation,
    /// Single shared background map on the first head, kept trainable
    /// forever; later heads have no extra channel.
    SharedBackground,
}

/// One convolution with its filter bank and bias.
#[derive(Debug)]
pub struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    /// Kaiming-style initialization for layers followed by a rectifier.
    fn kaiming(
        rng: &mut ChaCha8Rng,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvLayer {
        let std = (2.0 / (in_c * k * k) as f32).sqrt();
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let w: Vec<f32> = (0..out_c * in_c * k * k)
            .map(|_| dist.sample(rng))
            .collect();
        let weight = Tensor::from_vec(Shape::new(&[out_c, in_c, k, k]), w).expect("weight shape");
        weight.set_requires_grad(true);
        let bias = Tensor::zeros(Shape::new(&[out_c]));
        bias.set_requires_grad(true);
        ConvLayer {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// All-zero initialization, for head outputs that must start silent.
    fn silent(out_c: usize, in_c: usize, k: usize) -> ConvLayer {
        let weight = Tensor::zeros(Shape::new(&[out_c, in_c, k, k]));
        weight.set_requires_grad(true);
        let bias = Tensor::zeros(Shape::new(&[out_c]));
        bias.set_requires_grad(true);
        ConvLayer {
            weight,
            bias,
            stride: 1,
            padding: 0,
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(tape, x, &self.weight, &self.bias, self.stride, self.padding)
    }

    fn detached_copy(&self) -> ConvLayer {
        ConvLayer {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub(crate) fn set_trainable(&self, trainable: bool) {
        self.weight.set_requires_grad(trainable);
        self.bias.set_requires_grad(trainable);
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// One training step's output head.
#[derive(Debug)]
pub struct StepHead {
    hidden: ConvLayer,
    out_classes: ConvLayer,
    out_extra: Option<ConvLayer>,
    num_classes: usize,
}

impl StepHead {
    fn new(
        rng: &mut ChaCha8Rng,
        width: usize,
        head_hidden: usize,
        num_classes: usize,
        with_extra: bool,
    ) -> StepHead {
        StepHead {
            hidden: ConvLayer::kaiming(rng, head_hidden, width, 1, 1, 0),
            out_classes: ConvLayer::silent(num_classes, head_hidden, 1),
            out_extra: with_extra.then(|| ConvLayer::silent(1, head_hidden, 1)),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_extra(&self) -> bool {
        self.out_extra.is_some()
    }

    pub fn hidden(&self) -> &ConvLayer {
        &self.hidden
    }

    pub fn out_classes(&self) -> &ConvLayer {
        &self.out_classes
    }

    pub fn out_extra(&self) -> Option<&ConvLayer> {
        self.out_extra.as_ref()
    }
}

/// Logits produced by one head on one image.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `num_classes x h x w`.
    pub class_logits: Tensor,
    /// `1 x h x w` base background or residual adaptation map.
    pub extra: Option<Tensor>,
}

/// Backbone feature maps at the two distillation sites.
#[derive(Clone, Debug)]
pub struct Features {
    /// After the encoder, at half resolution.
    pub encoder: Tensor,
    /// After the decoder, at input resolution.
    pub decoder: Tensor,
}

/// The full network state.
#[derive(Debug)]
pub struct SegmentationModel {
    kind: ModelKind,
    width: usize,
    head_hidden: usize,
    enc_in: ConvLayer,
    enc_mid: ConvLayer,
    enc_out: ConvLayer,
    dec: ConvLayer,
    heads: Vec<StepHead>,
}

impl SegmentationModel {
    /// Fresh model with the first head (always carrying the base
    /// background channel).
    pub fn new(
        kind: ModelKind,
        width: usize,
        head_hidden: usize,
        initial_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SegmentationModel> {
        if width == 0 || head_hidden == 0 || initial_classes == 0 {
            return Err(Error::Config(
                "model width, hidden size, and class count must be positive".into(),
            ));
        }
        Ok(SegmentationModel {
            kind,
            width,
            head_hidden,
            enc_in: ConvLayer::kaiming(rng, width, 3, 3, 1, 1),
            enc_mid: ConvLayer::kaiming(rng, width, width, 3, 1, 1),
            enc_out: ConvLayer::kaiming(rng, width, width, 3, 1, 1),
            dec: ConvLayer::kaiming(rng, width, width, 3, 1, 1),
            heads: vec![StepHead::new(rng, width, head_hidden, initial_classes, true)],
        })
    }

    /// Append the head for a new step.  Adaptation models give it a
    /// residual background channel; shared-background models do not.
    pub fn add_step_head(&mut self, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("a step must add at least one class".into()));
        }
        let with_extra = matches!(self.kind, ModelKind::Adaptation);
        self.heads.push(StepHead::new(
            rng,
            self.width,
            self.head_hidden,
            num_classes,
            with_extra,
        ));
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden
    }

    pub fn heads(&self) -> &[StepHead] {
        &self.heads
    }

    pub fn num_steps(&self) -> usize {
        self.heads.len()
    }

    /// Total class channels across all heads.
    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.num_classes).sum()
    }

    /// Backbone pass: image `3 x h x w` with even `h`, `w`.
    pub fn forward_features(&self, tape: &Tape, image: &Tensor) -> Result<Features> {
        let (c, _, _) = image.shape().as_chw("forward_features")?;
        if c != 3 {
            return Err(Error::InvalidShape {
                op: "forward_features",
                shape: image.shape().to_string(),
                reason: "expected an RGB image".into(),
            });
        }
        let x = ops::relu(tape, &self.enc_in.forward(tape, image)?);
        let x = ops::max_pool_2x(tape, &x)?;
        let x = ops::relu(tape, &self.enc_mid.forward(tape, &x)?);
        let encoder = ops::relu(tape, &self.enc_out.forward(tape, &x)?);
        let up = ops::upsample_nearest_2x(tape, &encoder)?;
        let decoder = ops::relu(tape, &self.dec.forward(tape, &up)?);
        Ok(Features { encoder, decoder })
    }

    /// Run every head on a decoder feature map.
    pub fn forward_heads(&self, tape: &Tape, decoder: &Tensor) -> Result<Vec<HeadOutput>> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let hidden = ops::relu(tape, &head.hidden.forward(tape, decoder)?);
            let class_logits = head.out_classes.forward(tape, &hidden)?;
            let extra = match &head.out_extra {
                Some(conv) => Some(conv.forward(tape, &hidden)?),
                None => None,
            };
            outs.push(HeadOutput {
                class_logits,
                extra,
            });
        }
        Ok(outs)
    }

    /// Full pass: features plus every head's logits.
    pub fn forward(&self, tape: &Tape, image: &Tensor) -> Result<(Features, Vec<HeadOutput>)> {
        let features = self.forward_features(tape, image)?;
        let heads = self.forward_heads(tape, &features.decoder)?;
        Ok((features, heads))
    }

    /// The background logit used for prediction: the base map plus every
    /// residual map's non-positive part.
    pub fn background_logit(&self, tape: &Tape, outs: &[HeadOutput]) -> Result<Tensor> {
        let base = outs
            .first()
            .and_then(|o| o.extra.clone())
            .ok_or(Error::ContractViolation {
                op: "background_logit",
                reason: "first head must carry the base background channel".into(),
            })?;
        let residuals: Vec<Tensor> = outs[1..]
            .iter()
            .filter_map(|o| o.extra.clone())
            .collect();
        let refs: Vec<&Tensor> = residuals.iter().collect();
        bgadapt::aggregate_inference(tape, &base, &refs)
    }

    /// Stacked per-pixel scores for prediction: channel 0 is the sigmoid of
    /// the aggregated background logit, channel `j >= 1` the sigmoid of
    /// class `j`'s logit.
    pub fn inference_scores(&self, tape: &Tape, outs: &[HeadOutput]) -> Result<Tensor> {
        let bg = ops::sigmoid(tape, &self.background_logit(tape, outs)?);
        let mut parts: Vec<Tensor> = vec![bg];
        for out in outs {
            parts.push(ops::sigmoid(tape, &out.class_logits));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat_channels(tape, &refs)
    }

    /// Stable `(name, tensor)` listing of every parameter, in architecture
    /// order.  The order is part of the checkpoint format.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, layer: &ConvLayer| {
            out.push((format!("{name}.weight"), layer.weight.clone()));
            out.push((format!("{name}.bias"), layer.bias.clone()));
        };
        push("encoder_in".into(), &self.enc_in);
        push("encoder_mid".into(), &self.enc_mid);
        push("encoder_out".into(), &self.enc_out);
        push("decoder".into(), &self.dec);
        for (i, head) in self.heads.iter().enumerate() {
            let n = i + 1;
            push(format!("head{n}.hidden"), &head.hidden);
            push(format!("head{n}.classes"), &head.out_classes);
            if let Some(extra) = &head.out_extra {
                push(format!("head{n}.extra"), extra);
            }
        }
        out
    }

    /// Parameters that currently track gradients.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t)
            .filter(|t| t.requires_grad())
            .collect()
    }

    /// Toggle gradient tracking for the whole backbone.
    pub fn set_backbone_trainable(&self, trainable: bool) {
        for layer in [&self.enc_in, &self.enc_mid, &self.enc_out, &self.dec] {
            layer.set_trainable(trainable);
        }
    }

    /// Toggle gradient tracking for every parameter of one head
    /// (1-based index).
    pub fn set_head_trainable(&self, head: usize, trainable: bool) -> Result<()> {
        let h = self
            .heads
            .get(head - 1)
            .ok_or_else(|| Error::Config(format!("no head {head}")))?;
        h.hidden.set_trainable(trainable);
        h.out_classes.set_trainable(trainable);
        if let Some(extra) = &h.out_extra {
            extra.set_trainable(trainable);
        }
        Ok(())
    }

    /// Detached deep copy: identical values, nothing trainable.  This is
    /// the teacher snapshot taken before an incremental step.
    pub fn snapshot(&self) -> SegmentationModel {
        SegmentationModel {
            kind: self.kind,
            width: self.width,
            head_hidden: self.head_hidden,
            enc_in: self.enc_in.detached_copy(),
            enc_mid: self.enc_mid.detached_copy(),
            enc_out: self.enc_out.detached_copy(),
            dec: self.dec.detached_copy(),
            heads: self
                .heads
                .iter()
                .map(|h| StepHead {
                    hidden: h.hidden.detached_copy(),
                    out_classes: h.out_classes.detached_copy(),
                    out_extra: h.out_extra.as_ref().map(|e| e.detached_copy()),
                    num_classes: h.num_classes,
                })
                .collect(),
        }
    }

    /// Teacher probabilities of every *old class* channel (no extra
    /// channels), concatenated in class-id order: channel `j` is class
    /// `j + 1`.  Runs on a non-recording tape internally.
    pub fn old_class_probs(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let (_, outs) = self.forward(&tape, image)?;
        let parts: Vec<Tensor> = outs
            .iter()
            .map(|o| ops::sigmoid(&tape, &o.class_logits))
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let probs = ops::concat_channels(&tape, &refs)?;
        Ok(probs.detach())
    }
}
