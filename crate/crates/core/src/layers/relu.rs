//! Rectifier. The saved context is one bit per element (`input > 0`), so
//! the backward pass is exact no matter what the rest of the net does.

use super::{grad_shape_error, no_context, Backprop, ContextBits, QuantSetting};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Default)]
pub struct Relu {
    ctx: Option<Ctx>,
}

#[derive(Debug)]
struct Ctx {
    mask: Vec<u64>,
    shape: Vec<usize>,
    /// Whether the mask is charged for in memory accounting. A pure
    /// full-precision pipeline recovers it from the adjacent saved tensor.
    counted: bool,
}

impl Relu {
    pub fn new() -> Relu {
        Relu::default()
    }

    pub fn forward(&mut self, x: &Tensor, q: &QuantSetting) -> Result<Tensor> {
        let n = x.len();
        let mut mask = vec![0u64; n.div_ceil(64)];
        let mut y = vec![0.0f32; n];
        for (i, (&v, o)) in x.data().iter().zip(&mut y).enumerate() {
            if v > 0.0 {
                mask[i / 64] |= 1 << (i % 64);
                *o = v;
            }
        }
        self.ctx = Some(Ctx { mask, shape: x.shape().to_vec(), counted: q.net_compressed });
        Tensor::new(x.shape().to_vec(), y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        let ctx = self.ctx.take().ok_or_else(|| no_context("relu"))?;
        if gy.shape() != ctx.shape.as_slice() {
            return Err(grad_shape_error(&ctx.shape, gy.shape()));
        }
        let gx = gy
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| if ctx.mask[i / 64] >> (i % 64) & 1 == 1 { g } else { 0.0 })
            .collect();
        Ok(Backprop { input_grad: Tensor::new(ctx.shape.clone(), gx)?, param_grads: Vec::new() })
    }

    pub fn context_bits(&self) -> ContextBits {
        let Some(ctx) = &self.ctx else { return ContextBits::default() };
        let elements: u64 = ctx.shape.iter().product::<usize>() as u64;
        ContextBits {
            fp_reference: 0,
            payload: 0,
            metadata: 0,
            discrete: if ctx.counted { elements } else { 0 },
            elements,
        }
    }
}
