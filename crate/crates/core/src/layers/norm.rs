//! Batch normalization over the channel axis.
//!
//! Forward always uses the exact batch statistics of the full-precision
//! input; only the input tensor saved for backward is ever quantized. The
//! per-channel mean and deviation ride along at full precision (they are
//! vectors, negligible next to the activation and not charged for).
//!
//! The default mode saves one copy of the input. Because the backward rule
//! is quadratic in the saved tensor, one shared noisy copy leaves a small
//! bias that shrinks like 1/batch; the two-copy mode quantizes the input
//! twice with independent draws and splits the two occurrences between the
//! copies, which removes the bias at the price of storing both.

use super::{grad_shape_error, no_context, store_input, Backprop, ContextBits, ForwardRecord, QuantSetting, SaveMode, Stored};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Channels with deviation at or below this are degenerate input.
pub const MIN_STD: f32 = 1e-5;

#[derive(Debug)]
pub struct BatchNorm {
    /// Per-channel scale, initialized to 1.
    pub weight: Tensor,
    /// Per-channel shift, initialized to 0.
    pub bias: Tensor,
    two_copy: bool,
    /// Mean over channels of `(weight / deviation)^2` from the latest
    /// forward; the factor the backward applies to saved-input noise.
    gain_sq: f64,
    pub(crate) record: Option<ForwardRecord>,
    ctx: Option<Ctx>,
}

#[derive(Debug)]
struct Ctx {
    stored: Stored,
    in_shape: Vec<usize>,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            weight: Tensor::from_fn(vec![channels], |_| 1.0),
            bias: Tensor::zeros(vec![channels]),
            two_copy: false,
            gain_sq: 1.0,
            record: None,
            ctx: None,
        }
    }

    /// Switches between the biased single-copy save and the unbiased
    /// two-copy save.
    pub fn set_two_copy(&mut self, on: bool) {
        self.two_copy = on;
    }

    pub fn two_copy(&self) -> bool {
        self.two_copy
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        if in_shape.len() < 2 || in_shape[1] != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {}, ..]", self.channels()),
                got: format!("{in_shape:?}"),
            });
        }
        Ok(in_shape.to_vec())
    }

    pub fn forward(&mut self, x: &Tensor, mode: &SaveMode, q: &QuantSetting) -> Result<Tensor> {
        self.out_shape(x.shape())?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let sp: usize = x.shape()[2..].iter().product();
        let reduce = (n * sp) as f64;

        let mut mean = vec![0.0f32; c];
        let mut std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * sp;
                for p in 0..sp {
                    sum += f64::from(x.data()[base + p]);
                }
            }
            let m = sum / reduce;
            let mut var = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * sp;
                for p in 0..sp {
                    let d = f64::from(x.data()[base + p]) - m;
                    var += d * d;
                }
            }
            let sd = (var / reduce).sqrt() as f32;
            if sd <= MIN_STD {
                return Err(Error::Degenerate {
                    what: format!("channel {ch} deviation {sd:e} is at or below {MIN_STD:e}"),
                });
            }
            mean[ch] = m as f32;
            std[ch] = sd;
        }

        let gain_sq = (0..c)
            .map(|ch| {
                let r = f64::from(self.weight.data()[ch]) / f64::from(std[ch]);
                r * r
            })
            .sum::<f64>()
            / c as f64;
        let pref = gain_sq * q.group_size as f64 / (6.0 * x.sample_len().max(1) as f64);
        let (stored, record) = store_input(x, mode, q, if self.two_copy { 2 } else { 1 }, |range_sq, grad_sq| {
            range_sq.iter().zip(grad_sq).map(|(&r, &g)| pref * g * r).collect()
        })?;
        self.gain_sq = gain_sq;
        self.ctx = Some(Ctx { stored, in_shape: x.shape().to_vec(), mean: mean.clone(), std: std.clone() });
        self.record = Some(record);

        let mut y = vec![0.0f32; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let scale = self.weight.data()[ch] / std[ch];
                let shift = self.bias.data()[ch];
                let base = (s * c + ch) * sp;
                for p in 0..sp {
                    y[base + p] = (x.data()[base + p] - mean[ch]) * scale + shift;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        let ctx = self.ctx.take().ok_or_else(|| no_context("batchnorm"))?;
        if gy.shape() != ctx.in_shape.as_slice() {
            return Err(grad_shape_error(&ctx.in_shape, gy.shape()));
        }
        let (n, c) = (ctx.in_shape[0], ctx.in_shape[1]);
        let sp: usize = ctx.in_shape[2..].iter().product();
        let reduce = (n * sp) as f64;

        // Primary copy takes the standalone occurrence, secondary the one
        // inside the batch sum; identical in single-copy mode.
        let x1 = ctx.stored.primary()?;
        let x2 = ctx.stored.secondary()?;
        let gs = gy.data();

        let mut gw = vec![0.0f32; c];
        let mut gb = vec![0.0f32; c];
        let mut gx = vec![0.0f32; gy.len()];
        for ch in 0..c {
            let (m, sd) = (ctx.mean[ch], ctx.std[ch]);
            let w = self.weight.data()[ch];
            let mut sum_g = 0.0f64;
            let mut sum_gx2 = 0.0f64;
            let mut sum_gx1 = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * sp;
                for p in 0..sp {
                    let g = f64::from(gs[base + p]);
                    sum_g += g;
                    sum_gx2 += g * f64::from(x2.data()[base + p] - m);
                    sum_gx1 += g * f64::from(x1.data()[base + p] - m);
                }
            }
            gb[ch] = sum_g as f32;
            gw[ch] = (sum_gx1 / f64::from(sd)) as f32;

            let scale = f64::from(w) / f64::from(sd);
            let mean_g = sum_g / reduce;
            let curv = sum_gx2 / (reduce * f64::from(sd) * f64::from(sd));
            for s in 0..n {
                let base = (s * c + ch) * sp;
                for p in 0..sp {
                    let g = f64::from(gs[base + p]);
                    let centered = f64::from(x1.data()[base + p] - m);
                    gx[base + p] = (scale * (g - mean_g - centered * curv)) as f32;
                }
            }
        }

        Ok(Backprop {
            input_grad: Tensor::new(ctx.in_shape.clone(), gx)?,
            param_grads: vec![
                Tensor::new(vec![c], gw)?,
                Tensor::new(vec![c], gb)?,
            ],
        })
    }

    /// Per-sample sensitivity on the same absolute scale as the other
    /// compressible layers. The saved input couples to the incoming
    /// gradient element by element, so the linear-layer form is divided by
    /// the per-sample element count and weighted by the squared
    /// gain-to-deviation ratio the backward applies.
    pub fn sensitivity(&self, range_sq: &[f64], grad_sq: &[f64]) -> Vec<f64> {
        let (g, d) = self.record.as_ref().map_or((1, 1), |r| (r.group_size, r.dim.max(1)));
        let pref = self.gain_sq * g as f64 / (6.0 * d as f64);
        range_sq.iter().zip(grad_sq).map(|(&r, &gs)| pref * gs * r).collect()
    }

    pub fn context_bits(&self) -> ContextBits {
        let Some(ctx) = &self.ctx else { return ContextBits::default() };
        let elements: u64 = ctx.in_shape.iter().product::<usize>() as u64;
        let (payload, metadata) = ctx.stored.bits(elements);
        ContextBits { fp_reference: 32 * elements, payload, metadata, discrete: 0, elements }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::QuantRng;

    fn plain(q: &QuantRng) -> QuantSetting<'_> {
        QuantSetting { rng: q, step: 0, layer: 0, group_size: 256, net_compressed: false }
    }

    #[test]
    fn normalizes_to_zero_mean_unit_scale() {
        let qr = QuantRng::new(0);
        let mut bn = BatchNorm::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let y = bn.forward(&x, &SaveMode::Full, &plain(&qr)).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let qr = QuantRng::new(0);
        let mut bn = BatchNorm::new(2);
        let x = Tensor::new(vec![2, 2], vec![5.0, 1.0, 5.0, 2.0]).unwrap();
        let err = bn.forward(&x, &SaveMode::Full, &plain(&qr)).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }), "{err}");
    }

    #[test]
    fn input_gradient_is_orthogonal_to_ones_and_input() {
        let qr = QuantRng::new(0);
        let mut bn = BatchNorm::new(2);
        let x = Tensor::new(vec![3, 2, 2, 1], (0..12).map(|i| (i * i % 7) as f32).collect()).unwrap();
        bn.forward(&x, &SaveMode::Full, &plain(&qr)).unwrap();
        let gy = Tensor::from_fn(vec![3, 2, 2, 1], |i| (i as f32 * 0.3).sin());
        let b = bn.backward(&gy).unwrap();
        // Per channel, sum of input grads and its projection on the
        // centered input both vanish.
        for ch in 0..2 {
            let mut s = 0.0f64;
            let mut sx = 0.0f64;
            for n in 0..3 {
                for p in 0..2 {
                    let i = ((n * 2 + ch) * 2 + p) as usize;
                    s += f64::from(b.input_grad.data()[i]);
                    sx += f64::from(b.input_grad.data()[i]) * f64::from(x.data()[i]);
                }
            }
            assert!(s.abs() < 1e-5, "channel {ch} drift {s}");
            assert!(sx.abs() < 1e-4, "channel {ch} projection {sx}");
        }
    }

    #[test]
    fn two_copy_mode_doubles_stored_payload() {
        let qr = QuantRng::new(3);
        let q = QuantSetting { rng: &qr, step: 0, layer: 0, group_size: 4, net_compressed: true };
        let x = Tensor::from_fn(vec![2, 8], |i| (i % 5) as f32 * 0.7);
        let mode = SaveMode::Quantized(crate::layers::BitsChoice::Uniform(2));

        let mut single = BatchNorm::new(8);
        single.forward(&x, &mode, &q).unwrap();
        let one = single.context_bits();

        let mut dual = BatchNorm::new(8);
        dual.set_two_copy(true);
        dual.forward(&x, &mode, &q).unwrap();
        let two = dual.context_bits();

        assert_eq!(two.payload, 2 * one.payload);
        assert_eq!(two.metadata, 2 * one.metadata);
    }
}
