//! Straight-line network executor: one forward, one backward, one update.
//!
//! The executor owns the layers and the quantization RNG. Callers pick a
//! save mode per layer per forward, which is how the level policies, the
//! bit allocator, and the variance profiler all drive the same machinery.

use crate::layers::{ContextBits, Layer, QuantSetting, SaveMode};
use crate::rng::QuantRng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug)]
pub struct GraphExecutor {
    layers: Vec<Layer>,
    rng: QuantRng,
    group_size: usize,
    step: u64,
    grads: Vec<Vec<Tensor>>,
    out_grad_sq: Vec<Vec<f64>>,
}

impl GraphExecutor {
    pub fn new(layers: Vec<Layer>, group_size: usize, seed: u64) -> Result<GraphExecutor> {
        if group_size == 0 {
            return Err(Error::BadArgument { what: "group_size", detail: "must be positive".into() });
        }
        if layers.is_empty() {
            return Err(Error::BadArgument { what: "layers", detail: "empty network".into() });
        }
        let n = layers.len();
        Ok(GraphExecutor {
            layers,
            rng: QuantRng::new(seed),
            group_size,
            step: 0,
            grads: vec![Vec::new(); n],
            out_grad_sq: vec![Vec::new(); n],
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sets the step counter that keys quantization draws. Distinct steps
    /// give independent draws; repeating a step replays them.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Shape the network produces for a given input shape, without running.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let mut s = in_shape.to_vec();
        for l in &self.layers {
            s = l.out_shape(&s)?;
        }
        Ok(s)
    }

    /// Runs the chain in full precision, saving contexts per `modes`.
    /// The output is bit-identical across save modes; compression only
    /// affects what backward will see.
    pub fn forward(&mut self, x: &Tensor, modes: &[SaveMode]) -> Result<Tensor> {
        if modes.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} save modes", self.layers.len()),
                got: format!("{}", modes.len()),
            });
        }
        let net_compressed = self
            .layers
            .iter()
            .zip(modes)
            .any(|(l, m)| l.compressible() && matches!(m, SaveMode::Quantized(_)));
        let mut h = x.clone();
        for (i, (layer, mode)) in self.layers.iter_mut().zip(modes).enumerate() {
            let q = QuantSetting {
                rng: &self.rng,
                step: self.step,
                layer: i as u32,
                group_size: self.group_size,
                net_compressed,
            };
            h = layer.forward(&h, mode, &q)?;
        }
        Ok(h)
    }

    /// Full-precision forward: every context saved as-is.
    pub fn forward_fp(&mut self, x: &Tensor) -> Result<Tensor> {
        let modes = vec![SaveMode::Full; self.layers.len()];
        self.forward(x, &modes)
    }

    /// Propagates `out_grad` back through the chain, consuming saved
    /// contexts. Parameter gradients are stored per layer; the return
    /// value is the gradient with respect to the network input. Also
    /// records each layer's observed per-sample output-gradient norms,
    /// which feed the bit allocator.
    pub fn backward(&mut self, out_grad: &Tensor) -> Result<Tensor> {
        let mut g = out_grad.clone();
        for i in (0..self.layers.len()).rev() {
            self.out_grad_sq[i] = per_sample_sq(&g);
            let bp = self.layers[i].backward(&g)?;
            self.grads[i] = bp.param_grads;
            g = bp.input_grad;
        }
        Ok(g)
    }

    /// Parameter gradients of the most recent backward, outermost index
    /// matching `layers()`.
    pub fn param_grads(&self) -> &[Vec<Tensor>] {
        &self.grads
    }

    /// Per-sample squared norms of the gradient flowing into each layer's
    /// backward, from the most recent backward pass.
    pub fn out_grad_sq(&self) -> &[Vec<f64>] {
        &self.out_grad_sq
    }

    /// Plain SGD: `theta <- theta - lr * grad`. Consumes the stored
    /// gradients so a stale double-apply is impossible.
    pub fn sgd_step(&mut self, lr: f32) -> Result<()> {
        if self.grads.iter().zip(&self.layers).any(|(g, l)| g.len() != l.params().len()) {
            return Err(Error::BadArgument {
                what: "gradients",
                detail: "sgd_step called without a completed backward".into(),
            });
        }
        for (layer, grads) in self.layers.iter_mut().zip(&mut self.grads) {
            for (p, g) in layer.params_mut().into_iter().zip(grads.drain(..)) {
                if p.shape() != g.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?}", p.shape()),
                        got: format!("{:?}", g.shape()),
                    });
                }
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        Ok(())
    }

    /// Storage cost of every currently saved context.
    pub fn context_report(&self) -> Vec<(&'static str, ContextBits)> {
        self.layers.iter().map(|l| (l.name(), l.context_bits())).collect()
    }

    /// All parameter gradients of one layer, flattened end to end.
    pub fn layer_grad_flat(&self, layer: usize) -> Vec<f32> {
        self.grads[layer].iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

fn per_sample_sq(t: &Tensor) -> Vec<f64> {
    let n = t.samples();
    let d = t.sample_len();
    (0..n)
        .map(|s| t.data()[s * d..(s + 1) * d].iter().map(|&v| f64::from(v) * f64::from(v)).sum())
        .collect()
}
