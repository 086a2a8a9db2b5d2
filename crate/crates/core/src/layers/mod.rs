//! Layer zoo: forward rules, saved-context handling, backward rules.
//!
//! Every layer computes its forward pass in full precision. What differs
//! between modes is only the saved context: the full input tensor, a packed
//! quantization of it, or a cheap discrete record (masks, argmax indices).
//! Backward consumes the context, so each forward pays for exactly one
//! backward.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod relu;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm;
pub use pool::{AvgPool2d, MaxPool2d};
pub use relu::Relu;

use crate::quantize::{measure_group_ranges, quantize_tensor, PackedActivation};
use crate::rng::QuantRng;
use crate::tensor::Tensor;
use crate::{alloc, Error, Result};

/// How a compressible layer should store its input for backward.
#[derive(Debug, Clone)]
pub enum SaveMode {
    Full,
    Quantized(BitsChoice),
}

/// Bit-width policy for one quantized save.
#[derive(Debug, Clone)]
pub enum BitsChoice {
    /// Same width for every sample.
    Uniform(u8),
    /// Caller-fixed width per sample.
    PerSample(Vec<u8>),
    /// Allocate widths on the spot from per-sample sensitivities, spending
    /// at most `total` bits across the batch (in per-sample width units).
    /// `grad_sq` carries the gradient-magnitude estimates for this batch.
    Budget { total: u64, grad_sq: Vec<f64> },
}

/// Per-forward quantization environment, provided by the executor.
#[derive(Debug, Clone, Copy)]
pub struct QuantSetting<'a> {
    pub rng: &'a QuantRng,
    pub step: u64,
    pub layer: u32,
    pub group_size: usize,
    /// True when any layer in the net stores a lossy context this step.
    /// Discrete side-records (the relu mask) are free in a full-precision
    /// pipeline, where they can be recovered from the neighboring saved
    /// tensor, but must be charged for once that neighbor is quantized.
    pub net_compressed: bool,
}

/// Gradients flowing out of one backward call.
#[derive(Debug)]
pub struct Backprop {
    pub input_grad: Tensor,
    pub param_grads: Vec<Tensor>,
}

/// Context storage cost of one layer after a forward pass, in bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContextBits {
    /// What a full-precision pipeline stores for this layer: 32 bits per
    /// element of each retained float tensor, nothing for recomputable
    /// side-records.
    pub fp_reference: u64,
    /// Packed code payload, or the full-precision tensor when stored as-is.
    pub payload: u64,
    /// Per-group range/offset metadata.
    pub metadata: u64,
    /// Masks and argmax indices actually charged for.
    pub discrete: u64,
    /// Number of saved elements the per-element figures divide by.
    pub elements: u64,
}

impl ContextBits {
    pub fn compressed_total(&self) -> u64 {
        self.payload + self.metadata + self.discrete
    }
}

/// What a compressible layer learned about its input at forward time.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub group_size: usize,
    /// Per-sample sum of squared group ranges, measured before bfloat16.
    pub range_sq: Vec<f64>,
    /// Widths actually used, one per sample; `None` for a full save.
    pub bits: Option<Vec<u8>>,
    /// Elements per sample of the saved tensor.
    pub dim: usize,
}

/// Saved input of a compressible layer.
#[derive(Debug)]
pub(crate) enum Stored {
    Full(Tensor),
    Packed(PackedActivation),
    /// Two independent quantizations of the same tensor.
    Pair(PackedActivation, PackedActivation),
}

impl Stored {
    pub(crate) fn primary(&self) -> Result<Tensor> {
        match self {
            Stored::Full(t) => Ok(t.clone()),
            Stored::Packed(p) | Stored::Pair(p, _) => p.dequantize(),
        }
    }

    pub(crate) fn secondary(&self) -> Result<Tensor> {
        match self {
            Stored::Full(t) => Ok(t.clone()),
            Stored::Packed(p) => p.dequantize(),
            Stored::Pair(_, p) => p.dequantize(),
        }
    }

    fn bits(&self, elements: u64) -> (u64, u64) {
        match self {
            Stored::Full(_) => (32 * elements, 0),
            Stored::Packed(p) => (p.payload_bits(), p.metadata_bits()),
            Stored::Pair(a, b) => {
                (a.payload_bits() + b.payload_bits(), a.metadata_bits() + b.metadata_bits())
            }
        }
    }
}

/// Saves `x` according to `mode`, measuring ranges either way. Returns the
/// stored context plus the forward record. `copies` is 2 for the two-copy
/// batchnorm mode, 1 otherwise.
pub(crate) fn store_input(
    x: &Tensor,
    mode: &SaveMode,
    q: &QuantSetting,
    copies: u32,
    sensitivity: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<(Stored, ForwardRecord)> {
    let stats = measure_group_ranges(x, q.group_size)?;
    let n = x.samples();
    let record = |bits: Option<Vec<u8>>| ForwardRecord {
        group_size: q.group_size,
        range_sq: stats.sq_norms.clone(),
        bits,
        dim: x.sample_len(),
    };
    match mode {
        SaveMode::Full => Ok((Stored::Full(x.clone()), record(None))),
        SaveMode::Quantized(choice) => {
            let bits = match choice {
                BitsChoice::Uniform(b) => vec![*b; n],
                BitsChoice::PerSample(v) => {
                    if v.len() != n {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{n} per-sample widths"),
                            got: format!("{}", v.len()),
                        });
                    }
                    v.clone()
                }
                BitsChoice::Budget { total, grad_sq } => {
                    if grad_sq.len() != n {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{n} gradient magnitudes"),
                            got: format!("{}", grad_sq.len()),
                        });
                    }
                    let w = sensitivity(&stats.sq_norms, grad_sq);
                    alloc::allocate_row(&w, *total)?
                }
            };
            let pack = |copy: u32| quantize_tensor(x, &bits, q.group_size, q.rng, q.step, q.layer, copy);
            let stored = if copies == 2 {
                Stored::Pair(pack(0)?, pack(1)?)
            } else {
                Stored::Packed(pack(0)?)
            };
            Ok((stored, record(Some(bits))))
        }
    }
}

/// One node of the straight-line network.
#[derive(Debug)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    Relu(Relu),
    BatchNorm(BatchNorm),
    MaxPool2d(MaxPool2d),
    AvgPool2d(AvgPool2d),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MaxPool2d(_) => "maxpool",
            Layer::AvgPool2d(_) => "avgpool",
        }
    }

    /// Whether this layer saves a float tensor that quantization can shrink.
    pub fn compressible(&self) -> bool {
        matches!(self, Layer::Linear(_) | Layer::Conv2d(_) | Layer::BatchNorm(_))
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear(l) => l.out_shape(in_shape),
            Layer::Conv2d(l) => l.out_shape(in_shape),
            Layer::Relu(_) => Ok(in_shape.to_vec()),
            Layer::BatchNorm(l) => l.out_shape(in_shape),
            Layer::MaxPool2d(l) => l.out_shape(in_shape),
            Layer::AvgPool2d(l) => l.out_shape(in_shape),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: &SaveMode, q: &QuantSetting) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x, mode, q),
            Layer::Conv2d(l) => l.forward(x, mode, q),
            Layer::Relu(l) => l.forward(x, q),
            Layer::BatchNorm(l) => l.forward(x, mode, q),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::AvgPool2d(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        match self {
            Layer::Linear(l) => l.backward(gy),
            Layer::Conv2d(l) => l.backward(gy),
            Layer::Relu(l) => l.backward(gy),
            Layer::BatchNorm(l) => l.backward(gy),
            Layer::MaxPool2d(l) => l.backward(gy),
            Layer::AvgPool2d(l) => l.backward(gy),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear(l) => vec![&l.weight],
            Layer::Conv2d(l) => vec![&l.weight],
            Layer::BatchNorm(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight],
            Layer::Conv2d(l) => vec![&mut l.weight],
            Layer::BatchNorm(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Per-sample contribution of this layer's context to the quantization
    /// variance objective, given squared group-range sums and gradient
    /// magnitude (estimates or observations). Empty for lossless layers.
    pub fn sensitivity(&self, range_sq: &[f64], grad_sq: &[f64]) -> Vec<f64> {
        match self {
            Layer::Linear(l) => l.sensitivity(range_sq, grad_sq),
            Layer::Conv2d(l) => l.sensitivity(range_sq, grad_sq),
            Layer::BatchNorm(l) => l.sensitivity(range_sq, grad_sq),
            _ => Vec::new(),
        }
    }

    /// Measurements from the most recent forward; `None` for lossless
    /// layers or before any forward.
    pub fn forward_record(&self) -> Option<&ForwardRecord> {
        match self {
            Layer::Linear(l) => l.record.as_ref(),
            Layer::Conv2d(l) => l.record.as_ref(),
            Layer::BatchNorm(l) => l.record.as_ref(),
            _ => None,
        }
    }

    /// Storage cost of the currently held context.
    pub fn context_bits(&self) -> ContextBits {
        match self {
            Layer::Linear(l) => l.context_bits(),
            Layer::Conv2d(l) => l.context_bits(),
            Layer::Relu(l) => l.context_bits(),
            Layer::BatchNorm(l) => l.context_bits(),
            Layer::MaxPool2d(l) => l.context_bits(),
            Layer::AvgPool2d(l) => l.context_bits(),
        }
    }
}

pub(crate) fn no_context(layer: &'static str) -> Error {
    Error::BadArgument { what: layer, detail: "backward called without a saved context".into() }
}

pub(crate) fn grad_shape_error(expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch { expected: format!("{expected:?}"), got: format!("{got:?}") }
}
