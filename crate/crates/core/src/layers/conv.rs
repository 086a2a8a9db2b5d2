//! 2-d convolution over NCHW tensors with stride, zero padding, and
//! channel groups. Dilation is fixed at 1.

use super::{grad_shape_error, no_context, store_input, Backprop, ContextBits, ForwardRecord, QuantSetting, SaveMode, Stored};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug)]
pub struct Conv2d {
    /// `[c_out, c_in / groups, kh, kw]`.
    pub weight: Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
    /// Input spatial size of the last forward, for the sensitivity rule.
    spatial: usize,
    pub(crate) record: Option<ForwardRecord>,
    ctx: Option<Ctx>,
}

#[derive(Debug)]
struct Ctx {
    stored: Stored,
    in_shape: Vec<usize>,
}

impl Conv2d {
    pub fn with_weight(
        weight: Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Conv2d> {
        if weight.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                expected: "4-d kernel [c_out, c_in/groups, kh, kw]".into(),
                got: format!("{:?}", weight.shape()),
            });
        }
        if groups == 0 || weight.shape()[0] % groups != 0 {
            return Err(Error::BadArgument {
                what: "groups",
                detail: format!("{groups} does not divide c_out {}", weight.shape()[0]),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::BadArgument { what: "stride", detail: "must be positive".into() });
        }
        Ok(Conv2d { weight, stride, pad, groups, spatial: 0, record: None, ctx: None })
    }

    /// Square-kernel constructor with fan-in scaled uniform init.
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut StreamRng,
    ) -> Result<Conv2d> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::BadArgument {
                what: "groups",
                detail: format!("{groups} must divide c_in {c_in} and c_out {c_out}"),
            });
        }
        let fan_in = (c_in / groups) * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(vec![c_out, c_in / groups, k, k], |_| {
            ((rng.next_unit() * 2.0 - 1.0) * bound) as f32
        });
        Conv2d::with_weight(weight, (stride, stride), (pad, pad), groups)
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let (c_out, c_in_g, kh, kw) = self.dims();
        let c_in = c_in_g * self.groups;
        if in_shape.len() != 4 || in_shape[1] != c_in {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {c_in}, H, W]"),
                got: format!("{in_shape:?}"),
            });
        }
        let (h, w) = (in_shape[2], in_shape[3]);
        let (ph, pw) = self.pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::ShapeMismatch {
                expected: format!("spatial extent of at least {kh}x{kw} after padding"),
                got: format!("{}x{}", h + 2 * ph, w + 2 * pw),
            });
        }
        let ho = (h + 2 * ph - kh) / self.stride.0 + 1;
        let wo = (w + 2 * pw - kw) / self.stride.1 + 1;
        Ok(vec![in_shape[0], c_out, ho, wo])
    }

    pub fn forward(&mut self, x: &Tensor, mode: &SaveMode, q: &QuantSetting) -> Result<Tensor> {
        let out_shape = self.out_shape(x.shape())?;
        let (c_out, c_in_g, kh, kw) = self.dims();
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let co_per_g = c_out / self.groups;

        self.spatial = h * w;
        let pref = self.prefactor(q.group_size);
        let (stored, record) = store_input(x, mode, q, 1, |range_sq, grad_sq| {
            scaled_sensitivity(pref, range_sq, grad_sq)
        })?;
        self.ctx = Some(Ctx { stored, in_shape: x.shape().to_vec() });
        self.record = Some(record);

        let (xs, ws) = (x.data(), self.weight.data());
        let mut y = vec![0.0f32; n * c_out * ho * wo];
        for s in 0..n {
            for co in 0..c_out {
                let ci_base = (co / co_per_g) * c_in_g;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f32;
                        for cil in 0..c_in_g {
                            let ci = ci_base + cil;
                            for dh in 0..kh {
                                let ih = oh * sh + dh;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let iw = ow * sw + dw;
                                    if iw < pw || iw - pw >= w {
                                        continue;
                                    }
                                    let xv = xs[((s * c_in + ci) * h + ih - ph) * w + iw - pw];
                                    let wv = ws[((co * c_in_g + cil) * kh + dh) * kw + dw];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((s * c_out + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        Tensor::new(out_shape, y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        let ctx = self.ctx.take().ok_or_else(|| no_context("conv"))?;
        let out_shape = self.out_shape(&ctx.in_shape)?;
        if gy.shape() != out_shape.as_slice() {
            return Err(grad_shape_error(&out_shape, gy.shape()));
        }
        let (c_out, c_in_g, kh, kw) = self.dims();
        let (n, c_in, h, w) = (ctx.in_shape[0], ctx.in_shape[1], ctx.in_shape[2], ctx.in_shape[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let co_per_g = c_out / self.groups;

        let xhat = ctx.stored.primary()?;
        let (xs, gs, ws) = (xhat.data(), gy.data(), self.weight.data());
        let mut gw = vec![0.0f32; self.weight.len()];
        let mut gx = vec![0.0f32; n * c_in * h * w];

        for s in 0..n {
            for co in 0..c_out {
                let ci_base = (co / co_per_g) * c_in_g;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gs[((s * c_out + co) * ho + oh) * wo + ow];
                        if g == 0.0 {
                            continue;
                        }
                        for cil in 0..c_in_g {
                            let ci = ci_base + cil;
                            for dh in 0..kh {
                                let ih = oh * sh + dh;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let iw = ow * sw + dw;
                                    if iw < pw || iw - pw >= w {
                                        continue;
                                    }
                                    let xi = ((s * c_in + ci) * h + ih - ph) * w + iw - pw;
                                    let wi = ((co * c_in_g + cil) * kh + dh) * kw + dw;
                                    gw[wi] += g * xs[xi];
                                    gx[xi] += g * ws[wi];
                                }
                            }
                        }
                    }
                }
            }
        }

        Ok(Backprop {
            input_grad: Tensor::new(ctx.in_shape.clone(), gx)?,
            param_grads: vec![Tensor::new(self.weight.shape().to_vec(), gw)?],
        })
    }

    /// `G K / (6 I A)`: kernel locations over input locations and groups.
    fn prefactor(&self, group_size: usize) -> f64 {
        let (_, _, kh, kw) = self.dims();
        let k = (kh * kw) as f64;
        let i = self.spatial.max(1) as f64;
        group_size as f64 * k / (6.0 * i * self.groups as f64)
    }

    pub fn sensitivity(&self, range_sq: &[f64], grad_sq: &[f64]) -> Vec<f64> {
        let g = self.record.as_ref().map_or(1, |r| r.group_size);
        scaled_sensitivity(self.prefactor(g), range_sq, grad_sq)
    }

    pub fn context_bits(&self) -> ContextBits {
        let Some(ctx) = &self.ctx else { return ContextBits::default() };
        let elements: u64 = ctx.in_shape.iter().product::<usize>() as u64;
        let (payload, metadata) = ctx.stored.bits(elements);
        ContextBits { fp_reference: 32 * elements, payload, metadata, discrete: 0, elements }
    }
}

fn scaled_sensitivity(pref: f64, range_sq: &[f64], grad_sq: &[f64]) -> Vec<f64> {
    range_sq.iter().zip(grad_sq).map(|(&r, &g)| pref * g * r).collect()
}
