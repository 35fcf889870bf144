//! Dense `f32` tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a cheaply clonable handle to an immutable value buffer
//! (the optimizer's in-place parameter update is the one sanctioned
//! exception).  Operations live in [`crate::ops`]; each one computes its
//! forward result eagerly and, when a recording [`Tape`] is supplied and at
//! least one input tracks gradients, appends a record so that
//! [`Tape::backward`] can replay the pass in reverse.
//!
//! Values are stored in 32-bit floats.  Reductions and convolution inner
//! loops accumulate in 64-bit intermediates so that gradient checks against
//! central finite differences stay well inside tolerance.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Ordered list of dimensions.  The empty list is a scalar.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }

    /// Rank-0 shape holding exactly one element.
    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    /// Channels-height-width layout used for feature maps and logit planes.
    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        Shape(vec![c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// True when the tensor holds exactly one element (rank 0 or all dims 1).
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Interpret as (channels, height, width); errors on other ranks.
    pub fn as_chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.0.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.to_string(),
                reason: "expected a rank-3 channels-height-width tensor".into(),
            }),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

struct TensorInner {
    id: u64,
    shape: Shape,
    values: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
}

/// Handle to a dense `f32` buffer, optionally tracking gradients.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl Tensor {
    fn build(shape: Shape, values: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.numel(), values.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
            }),
        }
    }

    /// Constant (non-tracking) tensor from explicit values.
    pub fn from_vec(shape: Shape, values: Vec<f32>) -> Result<Tensor> {
        if shape.numel() != values.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_string(),
                reason: format!("{} values supplied", values.len()),
            });
        }
        Ok(Tensor::build(shape, values, false))
    }

    /// Gradient-tracking tensor (leaf parameter) from explicit values.
    pub fn param(shape: Shape, values: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, values)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Shape) -> Tensor {
        let n = shape.numel();
        Tensor::build(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        let n = shape.numel();
        Tensor::build(shape, vec![value; n], false)
    }

    /// Rank-0 constant.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(Shape::scalar(), vec![value], false)
    }

    pub(crate) fn op_output(shape: Shape, values: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor::build(shape, values, requires_grad)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    /// Borrow the value buffer.
    pub fn values(&self) -> Ref<'_, Vec<f32>> {
        self.inner.values.borrow()
    }

    /// Clone the value buffer out.
    pub fn value_vec(&self) -> Vec<f32> {
        self.inner.values.borrow().clone()
    }

    /// Mutable access for the optimizer's in-place parameter update.
    pub(crate) fn values_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.values.borrow_mut()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if !self.shape().is_scalar() {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape().to_string(),
                reason: "expected a scalar".into(),
            });
        }
        Ok(self.inner.values.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Enable or disable gradient tracking (used by freeze policies and
    /// teacher snapshots).  Does not touch any stored gradient.
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    /// Clone of the accumulated gradient, if any backward pass reached this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn scale_grad(&self, factor: f32) {
        if let Some(buf) = self.inner.grad.borrow_mut().as_mut() {
            for g in buf.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// New leaf with copied values and gradient tracking off.  Forward values
    /// are bit-identical to the source.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.value_vec(), false)
    }

    /// Deep copy preserving the `requires_grad` flag (fresh buffers, no
    /// shared state, no gradient).
    pub fn deep_copy(&self) -> Tensor {
        Tensor::build(
            self.inner.shape.clone(),
            self.value_vec(),
            self.requires_grad(),
        )
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// Reduction flavors shared by the reduce operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Recorded operation kinds with the metadata their backward rules need.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(f32),
    Neg,
    Square,
    Sigmoid,
    Relu,
    ClampNonPositive,
    Log { guard: bool },
    /// Identity forward whose backward multiplies the incoming gradient by a
    /// constant (gradient reversal / scaling; also the verification fixture
    /// for the deliberately-broken gradient case).
    GradScale(f32),
    Conv2d { stride: usize, padding: usize },
    Reduce(ReduceKind),
    /// Mean over elements where the mask (inputs[1]) is one.
    MaskedMean { ones: usize },
    Upsample2x,
    MaxPool2x { argmax: Vec<u32> },
    ConcatChannels { parts: Vec<usize> },
    SliceChannels { from: usize, to: usize },
    /// Elementwise multiply of a C×H×W tensor (inputs[0]) by a constant
    /// 1×H×W mask (inputs[1]) broadcast over channels.
    SpatialMask,
}

pub(crate) struct Record {
    pub op: Op,
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

/// Non-fatal conditions noticed during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Warning {
    /// A masked reduction saw a mask with no selected elements and returned 0.
    EmptyMask { op: &'static str },
}

/// Ordered record of executed operations for one forward pass.
///
/// Operations append themselves when recording is enabled and at least one
/// input tracks gradients; [`Tape::backward`] then replays the list in
/// reverse, producing a gradient for every gradient-tracking tensor the
/// computation reached, exactly once per call.  Repeated backward calls
/// accumulate into `grad` until [`Tensor::zero_grad`].
///
/// A tape and the tensors recorded on it belong to one logical thread.
pub struct Tape {
    records: RefCell<Vec<Record>>,
    warnings: RefCell<Vec<Warning>>,
    recording: bool,
}

impl Tape {
    /// Recording tape for a training pass.
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            warnings: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Non-recording tape for inference; operations run forward only.
    pub fn inference() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            warnings: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn record(&self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if self.recording && inputs.iter().any(|t| t.requires_grad()) {
            output.inner.requires_grad.set(true);
            self.records.borrow_mut().push(Record {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    pub(crate) fn push_warning(&self, w: Warning) {
        self.warnings.borrow_mut().push(w);
    }

    /// Drain warnings gathered since the last call.
    pub fn take_warnings(&self) -> Vec<Warning> {
        std::mem::take(&mut *self.warnings.borrow_mut())
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    /// Reverse-mode gradient pass seeded with `d loss / d loss = 1`.
    ///
    /// The pass keeps its own scratch buffers; at the end every reached
    /// tensor with gradient tracking has the pass's contribution added to its
    /// persistent `grad`.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.shape().is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_string(),
            });
        }
        let records = self.records.borrow();
        let mut flowing: std::collections::HashMap<u64, Vec<f32>> =
            std::collections::HashMap::new();
        flowing.insert(loss.id(), vec![1.0]);
        let mut finished: Vec<(Tensor, Vec<f32>)> = Vec::new();

        for rec in records.iter().rev() {
            let Some(gout) = flowing.remove(&rec.output.id()) else {
                continue;
            };
            crate::ops::apply_backward(rec, &gout, &mut |input: &Tensor, delta: Vec<f32>| {
                if input.requires_grad() {
                    flowing
                        .entry(input.id())
                        .and_modify(|buf| {
                            for (g, d) in buf.iter_mut().zip(&delta) {
                                *g += *d;
                            }
                        })
                        .or_insert(delta);
                }
            });
            finished.push((rec.output.clone(), gout));
        }

        for (tensor, buf) in finished {
            if tensor.requires_grad() {
                tensor.accumulate_grad(&buf);
            }
        }
        for rec in records.iter() {
            for input in &rec.inputs {
                if input.requires_grad() {
                    if let Some(buf) = flowing.remove(&input.id()) {
                        input.accumulate_grad(&buf);
                    }
                }
            }
        }
        if let Some(buf) = flowing.remove(&loss.id()) {
            if loss.requires_grad() {
                loss.accumulate_grad(&buf);
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
