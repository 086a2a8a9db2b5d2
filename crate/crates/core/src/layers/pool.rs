//! Spatial pooling. Max pooling saves one byte per output (the argmax
//! position inside the window); average pooling saves nothing but shapes.

use super::{grad_shape_error, no_context, Backprop, ContextBits};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn pooled_extent(h: usize, w: usize, k: (usize, usize), s: (usize, usize)) -> Result<(usize, usize)> {
    if k.0 == 0 || k.1 == 0 || s.0 == 0 || s.1 == 0 {
        return Err(Error::BadArgument { what: "pool", detail: "kernel and stride must be positive".into() });
    }
    if h < k.0 || w < k.1 {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial extent of at least {}x{}", k.0, k.1),
            got: format!("{h}x{w}"),
        });
    }
    Ok(((h - k.0) / s.0 + 1, (w - k.1) / s.1 + 1))
}

fn check_nchw(in_shape: &[usize]) -> Result<()> {
    if in_shape.len() != 4 {
        return Err(Error::ShapeMismatch { expected: "[N, C, H, W]".into(), got: format!("{in_shape:?}") });
    }
    Ok(())
}

#[derive(Debug)]
pub struct MaxPool2d {
    kernel: (usize, usize),
    stride: (usize, usize),
    ctx: Option<MaxCtx>,
}

#[derive(Debug)]
struct MaxCtx {
    argmax: Vec<u8>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MaxPool2d {
    /// Window `kernel`, stride defaulting to the window. The window may
    /// hold at most 256 elements so the argmax fits one byte.
    pub fn new(kernel: (usize, usize), stride: Option<(usize, usize)>) -> Result<MaxPool2d> {
        if kernel.0 * kernel.1 > 256 {
            return Err(Error::BadArgument {
                what: "kernel",
                detail: format!("{}x{} window exceeds 256 elements", kernel.0, kernel.1),
            });
        }
        Ok(MaxPool2d { kernel, stride: stride.unwrap_or(kernel), ctx: None })
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        check_nchw(in_shape)?;
        let (ho, wo) = pooled_extent(in_shape[2], in_shape[3], self.kernel, self.stride)?;
        Ok(vec![in_shape[0], in_shape[1], ho, wo])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.out_shape(x.shape())?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;

        let mut y = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u8; y.len()];
        for s in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut at = 0u8;
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let v = plane[(oh * sh + dh) * w + ow * sw + dw];
                                if v > best {
                                    best = v;
                                    at = (dh * kw + dw) as u8;
                                }
                            }
                        }
                        let o = ((s * c + ch) * ho + oh) * wo + ow;
                        y[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        self.ctx = Some(MaxCtx { argmax, in_shape: x.shape().to_vec(), out_shape: out_shape.clone() });
        Tensor::new(out_shape, y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        let ctx = self.ctx.take().ok_or_else(|| no_context("maxpool"))?;
        if gy.shape() != ctx.out_shape.as_slice() {
            return Err(grad_shape_error(&ctx.out_shape, gy.shape()));
        }
        let (n, c, h, w) = (ctx.in_shape[0], ctx.in_shape[1], ctx.in_shape[2], ctx.in_shape[3]);
        let (ho, wo) = (ctx.out_shape[2], ctx.out_shape[3]);
        let (kw, sh, sw) = (self.kernel.1, self.stride.0, self.stride.1);

        let mut gx = vec![0.0f32; n * c * h * w];
        for s in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let o = ((s * c + ch) * ho + oh) * wo + ow;
                        let at = usize::from(ctx.argmax[o]);
                        let (dh, dw) = (at / kw, at % kw);
                        let i = ((s * c + ch) * h + oh * sh + dh) * w + ow * sw + dw;
                        gx[i] += gy.data()[o];
                    }
                }
            }
        }
        Ok(Backprop { input_grad: Tensor::new(ctx.in_shape.clone(), gx)?, param_grads: Vec::new() })
    }

    pub fn context_bits(&self) -> ContextBits {
        let Some(ctx) = &self.ctx else { return ContextBits::default() };
        let outputs: u64 = ctx.out_shape.iter().product::<usize>() as u64;
        // The index byte is needed to run backward at any precision, so it
        // appears on both sides of the ledger.
        ContextBits { fp_reference: 8 * outputs, payload: 0, metadata: 0, discrete: 8 * outputs, elements: outputs }
    }
}

#[derive(Debug)]
pub struct AvgPool2d {
    kernel: (usize, usize),
    stride: (usize, usize),
    ctx: Option<AvgCtx>,
}

#[derive(Debug)]
struct AvgCtx {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl AvgPool2d {
    pub fn new(kernel: (usize, usize), stride: Option<(usize, usize)>) -> Result<AvgPool2d> {
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::BadArgument { what: "kernel", detail: "must be positive".into() });
        }
        Ok(AvgPool2d { kernel, stride: stride.unwrap_or(kernel), ctx: None })
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        check_nchw(in_shape)?;
        let (ho, wo) = pooled_extent(in_shape[2], in_shape[3], self.kernel, self.stride)?;
        Ok(vec![in_shape[0], in_shape[1], ho, wo])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.out_shape(x.shape())?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let inv = 1.0 / (kh * kw) as f32;

        let mut y = vec![0.0f32; n * c * ho * wo];
        for s in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f32;
                        for dh in 0..kh {
                            for dw in 0..kw {
                                acc += plane[(oh * sh + dh) * w + ow * sw + dw];
                            }
                        }
                        y[((s * c + ch) * ho + oh) * wo + ow] = acc * inv;
                    }
                }
            }
        }
        self.ctx = Some(AvgCtx { in_shape: x.shape().to_vec(), out_shape: out_shape.clone() });
        Tensor::new(out_shape, y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        let ctx = self.ctx.take().ok_or_else(|| no_context("avgpool"))?;
        if gy.shape() != ctx.out_shape.as_slice() {
            return Err(grad_shape_error(&ctx.out_shape, gy.shape()));
        }
        let (n, c, h, w) = (ctx.in_shape[0], ctx.in_shape[1], ctx.in_shape[2], ctx.in_shape[3]);
        let (ho, wo) = (ctx.out_shape[2], ctx.out_shape[3]);
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let inv = 1.0 / (kh * kw) as f32;

        let mut gx = vec![0.0f32; n * c * h * w];
        for s in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gy.data()[((s * c + ch) * ho + oh) * wo + ow] * inv;
                        for dh in 0..kh {
                            for dw in 0..kw {
                                gx[((s * c + ch) * h + oh * sh + dh) * w + ow * sw + dw] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(Backprop { input_grad: Tensor::new(ctx.in_shape.clone(), gx)?, param_grads: Vec::new() })
    }

    pub fn context_bits(&self) -> ContextBits {
        let Some(ctx) = &self.ctx else { return ContextBits::default() };
        let outputs: u64 = ctx.out_shape.iter().product::<usize>() as u64;
        ContextBits { fp_reference: 0, payload: 0, metadata: 0, discrete: 0, elements: outputs }
    }
}
