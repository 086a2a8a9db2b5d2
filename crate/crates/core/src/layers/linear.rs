//! Fully connected layer without bias: `y = x W`.

use super::{grad_shape_error, no_context, store_input, Backprop, ContextBits, ForwardRecord, QuantSetting, SaveMode, Stored};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug)]
pub struct Linear {
    /// `[d_in, d_out]`, row-major.
    pub weight: Tensor,
    pub(crate) record: Option<ForwardRecord>,
    ctx: Option<Ctx>,
}

#[derive(Debug)]
struct Ctx {
    stored: Stored,
    in_shape: Vec<usize>,
}

impl Linear {
    pub fn with_weight(weight: Tensor) -> Result<Linear> {
        if weight.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "2-d weight".into(),
                got: format!("{:?}", weight.shape()),
            });
        }
        Ok(Linear { weight, record: None, ctx: None })
    }

    /// Fresh layer with uniform init scaled by fan-in and fan-out.
    pub fn new(d_in: usize, d_out: usize, rng: &mut StreamRng) -> Linear {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = Tensor::from_fn(vec![d_in, d_out], |_| {
            ((rng.next_unit() * 2.0 - 1.0) * bound) as f32
        });
        Linear { weight, record: None, ctx: None }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let flat: usize = in_shape.iter().skip(1).product();
        if in_shape.is_empty() || flat != self.d_in() {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, ..] flattening to {}", self.d_in()),
                got: format!("{in_shape:?}"),
            });
        }
        Ok(vec![in_shape[0], self.d_out()])
    }

    pub fn forward(&mut self, x: &Tensor, mode: &SaveMode, q: &QuantSetting) -> Result<Tensor> {
        self.out_shape(x.shape())?;
        let (n, d, m) = (x.samples(), self.d_in(), self.d_out());
        let g = q.group_size as f64;
        let (stored, record) = store_input(x, mode, q, 1, |range_sq, grad_sq| {
            sensitivity_from(g, range_sq, grad_sq)
        })?;
        self.ctx = Some(Ctx { stored, in_shape: x.shape().to_vec() });
        self.record = Some(record);

        let mut y = vec![0.0f32; n * m];
        let (xs, ws) = (x.data(), self.weight.data());
        for s in 0..n {
            for i in 0..d {
                let xv = xs[s * d + i];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &ws[i * m..(i + 1) * m];
                let yrow = &mut y[s * m..(s + 1) * m];
                for (yj, wj) in yrow.iter_mut().zip(wrow) {
                    *yj += xv * wj;
                }
            }
        }
        Tensor::new(vec![n, m], y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Backprop> {
        let ctx = self.ctx.take().ok_or_else(|| no_context("linear"))?;
        let (d, m) = (self.d_in(), self.d_out());
        let n = ctx.in_shape[0];
        if gy.shape() != [n, m] {
            return Err(grad_shape_error(&[n, m], gy.shape()));
        }
        let xhat = ctx.stored.primary()?;
        let (xs, gs, ws) = (xhat.data(), gy.data(), self.weight.data());

        let mut gw = vec![0.0f32; d * m];
        for s in 0..n {
            for i in 0..d {
                let xv = xs[s * d + i];
                if xv == 0.0 {
                    continue;
                }
                let grow = &gs[s * m..(s + 1) * m];
                let wrow = &mut gw[i * m..(i + 1) * m];
                for (wj, gj) in wrow.iter_mut().zip(grow) {
                    *wj += xv * gj;
                }
            }
        }

        let mut gx = vec![0.0f32; n * d];
        for s in 0..n {
            let grow = &gs[s * m..(s + 1) * m];
            for i in 0..d {
                let wrow = &ws[i * m..(i + 1) * m];
                let mut acc = 0.0f32;
                for (gj, wj) in grow.iter().zip(wrow) {
                    acc += gj * wj;
                }
                gx[s * d + i] = acc;
            }
        }

        Ok(Backprop {
            input_grad: Tensor::new(ctx.in_shape.clone(), gx)?,
            param_grads: vec![Tensor::new(vec![d, m], gw)?],
        })
    }

    pub fn sensitivity(&self, range_sq: &[f64], grad_sq: &[f64]) -> Vec<f64> {
        let g = self.record.as_ref().map_or(1, |r| r.group_size) as f64;
        sensitivity_from(g, range_sq, grad_sq)
    }

    pub fn context_bits(&self) -> ContextBits {
        let Some(ctx) = &self.ctx else { return ContextBits::default() };
        let elements: u64 = ctx.in_shape.iter().product::<usize>() as u64;
        let (payload, metadata) = ctx.stored.bits(elements);
        ContextBits { fp_reference: 32 * elements, payload, metadata, discrete: 0, elements }
    }
}

fn sensitivity_from(group: f64, range_sq: &[f64], grad_sq: &[f64]) -> Vec<f64> {
    range_sq
        .iter()
        .zip(grad_sq)
        .map(|(&r, &g)| group / 6.0 * g * r)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::QuantRng;

    fn plain(q: &QuantRng) -> QuantSetting<'_> {
        QuantSetting { rng: q, step: 0, layer: 0, group_size: 256, net_compressed: false }
    }

    #[test]
    fn one_by_one_gradients() {
        let rng = QuantRng::new(0);
        let mut l = Linear::with_weight(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let y = l.forward(&x, &SaveMode::Full, &plain(&rng)).unwrap();
        assert_eq!(y.data(), &[6.0]);
        let b = l.backward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(b.param_grads[0].data(), &[2.0]);
        assert_eq!(b.input_grad.data(), &[3.0]);
    }

    #[test]
    fn backward_twice_fails() {
        let rng = QuantRng::new(0);
        let mut l = Linear::with_weight(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        l.forward(&x, &SaveMode::Full, &plain(&rng)).unwrap();
        let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        l.backward(&g).unwrap();
        assert!(l.backward(&g).is_err());
    }

    #[test]
    fn flattens_trailing_axes() {
        let rng = QuantRng::new(0);
        let mut l = Linear::with_weight(Tensor::new(vec![4, 2], vec![1.0; 8]).unwrap()).unwrap();
        let x = Tensor::from_fn(vec![3, 2, 2], |i| i as f32);
        let y = l.forward(&x, &SaveMode::Full, &plain(&rng)).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        let b = l.backward(&Tensor::zeros(vec![3, 2])).unwrap();
        assert_eq!(b.input_grad.shape(), &[3, 2, 2]);
    }

    #[test]
    fn sensitivity_combines_group_grad_and_range() {
        assert_eq!(sensitivity_from(2.0, &[9.0], &[1.0]), vec![3.0]);
    }

    #[test]
    fn rejects_mismatched_input() {
        let mut l = Linear::with_weight(Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap()).unwrap();
        let rng = QuantRng::new(0);
        let x = Tensor::zeros(vec![2, 4]);
        assert!(l.forward(&x, &SaveMode::Full, &plain(&rng)).is_err());
    }
}
