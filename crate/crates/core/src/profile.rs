//! Measurement of where gradient noise comes from.
//!
//! Everything here re-runs a fixed network on fixed data while varying one
//! thing at a time: the quantization draws (fresh randomness per trial), the
//! set of layers compressed, or the batch itself. Variances are taken over
//! parameter gradients in f64, against the first trial as a pivot so a
//! deterministic run reports exactly zero.

use crate::graph::GraphExecutor;
use crate::layers::SaveMode;
use crate::loss::{Loss, Target};
use crate::quantize::measure_group_ranges;
use crate::rng::QuantRng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-layer gradient variance, summed over parameter components:
/// `E||g||^2 - ||E g||^2`. Layers without parameters report zero.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub per_layer: Vec<f64>,
    pub total: f64,
    pub trials: u32,
}

fn variance_over<F>(layers: usize, trials: u32, mut run: F) -> Result<VarianceReport>
where
    F: FnMut(u32, &mut dyn FnMut(usize, &[f32])) -> Result<()>,
{
    if trials < 2 {
        return Err(Error::BadArgument {
            what: "trials",
            detail: format!("need at least 2 to estimate a variance, got {trials}"),
        });
    }
    let mut pivot: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut sum: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut sum_sq = vec![0.0f64; layers];
    for t in 0..trials {
        run(t, &mut |l, flat| {
            if t == 0 {
                pivot[l] = flat.iter().map(|&v| f64::from(v)).collect();
                sum[l] = vec![0.0; flat.len()];
                return;
            }
            for (i, &v) in flat.iter().enumerate() {
                let d = f64::from(v) - pivot[l][i];
                sum[l][i] += d;
                sum_sq[l] += d * d;
            }
        })?;
    }
    let n = f64::from(trials);
    let per_layer: Vec<f64> = (0..layers)
        .map(|l| {
            let mean_sq: f64 = sum[l].iter().map(|s| (s / n) * (s / n)).sum();
            (sum_sq[l] / n - mean_sq).max(0.0)
        })
        .collect();
    let total = per_layer.iter().sum();
    Ok(VarianceReport { per_layer, total, trials })
}

/// Gradient variance induced by compression alone: same batch, same
/// weights, fresh quantization draws each trial. Leaves the executor's
/// step advanced past the steps consumed.
pub fn empirical_variance(
    exec: &mut GraphExecutor,
    x: &Tensor,
    loss: &Loss,
    target: &Target,
    modes: &[SaveMode],
    trials: u32,
) -> Result<VarianceReport> {
    let layers = exec.layers().len();
    let base = exec.step();
    let report = variance_over(layers, trials, |t, sink| {
        exec.set_step(base + u64::from(t));
        let y = exec.forward(x, modes)?;
        let g = loss.grad(&y, target)?;
        exec.backward(&g)?;
        for l in 0..layers {
            sink(l, &exec.layer_grad_flat(l));
        }
        Ok(())
    })?;
    exec.set_step(base + u64::from(trials));
    Ok(report)
}

/// Gradient variance from the data itself: full-precision gradients across
/// different batches. This is the noise floor compression competes with.
pub fn sampling_variance(
    exec: &mut GraphExecutor,
    batches: &[(Tensor, Target)],
    loss: &Loss,
) -> Result<VarianceReport> {
    let layers = exec.layers().len();
    variance_over(layers, batches.len() as u32, |t, sink| {
        let (x, target) = &batches[t as usize];
        let y = exec.forward_fp(x)?;
        let g = loss.grad(&y, target)?;
        exec.backward(&g)?;
        for l in 0..layers {
            sink(l, &exec.layer_grad_flat(l));
        }
        Ok(())
    })
}

/// Which layer's compression hurts which layer's gradient. `rows[i]` is the
/// full variance report with only `source_layers[i]` compressed.
#[derive(Debug, Clone)]
pub struct NoiseDecomposition {
    pub source_layers: Vec<usize>,
    pub rows: Vec<VarianceReport>,
}

pub fn quantization_noise_matrix(
    exec: &mut GraphExecutor,
    x: &Tensor,
    loss: &Loss,
    target: &Target,
    bits: u8,
    trials: u32,
) -> Result<NoiseDecomposition> {
    let n = exec.layers().len();
    let sources: Vec<usize> =
        (0..n).filter(|&i| exec.layers()[i].compressible()).collect();
    let mut rows = Vec::with_capacity(sources.len());
    for &m in &sources {
        let modes: Vec<SaveMode> = (0..n)
            .map(|i| {
                if i == m {
                    SaveMode::Quantized(crate::layers::BitsChoice::Uniform(bits))
                } else {
                    SaveMode::Full
                }
            })
            .collect();
        rows.push(empirical_variance(exec, x, loss, target, &modes, trials)?);
    }
    Ok(NoiseDecomposition { source_layers: sources, rows })
}

/// The closed-form variance proxy the allocator minimizes, evaluated on the
/// state left behind by the latest forward/backward pair: per-sample
/// sensitivities divided by the squared level count of the widths actually
/// used. Layers saved in full contribute nothing.
pub fn approx_objective(exec: &GraphExecutor) -> Result<f64> {
    let grad_sq = exec.out_grad_sq();
    if grad_sq.iter().all(|per_sample| per_sample.is_empty()) {
        return Err(Error::BadArgument {
            what: "executor",
            detail: "run a backward pass before asking for the objective".into(),
        });
    }
    let mut total = 0.0;
    for (l, layer) in exec.layers().iter().enumerate() {
        let Some(rec) = layer.forward_record() else { continue };
        let Some(bits) = &rec.bits else { continue };
        let w = layer.sensitivity(&rec.range_sq, &grad_sq[l]);
        for (wv, &b) in w.iter().zip(bits) {
            let levels = f64::from((1u32 << b) - 1);
            total += wv / (levels * levels);
        }
    }
    Ok(total)
}

/// Summary statistics of a positive-valued population, for judging how
/// uneven ranges and sensitivities are.
#[derive(Debug, Clone)]
pub struct Spread {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    /// `max / min`, infinite when the smallest value is zero.
    pub ratio_max_min: f64,
}

/// Nearest-rank percentiles over a copy of `values`.
pub fn spread(values: &[f64]) -> Result<Spread> {
    if values.is_empty() {
        return Err(Error::BadArgument { what: "values", detail: "empty population".into() });
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::BadArgument {
            what: "values",
            detail: format!("population must be finite and nonnegative, found {v}"),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    Ok(Spread {
        count: sorted.len(),
        min,
        max,
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50: pick(0.50),
        p90: pick(0.90),
        p99: pick(0.99),
        ratio_max_min: if min > 0.0 { max / min } else { f64::INFINITY },
    })
}

/// Heterogeneity of one compressible layer's saved input: the per-group
/// dynamic ranges, and the per-sample sensitivities once gradients exist.
#[derive(Debug, Clone)]
pub struct LayerSpreads {
    pub layer: usize,
    pub name: &'static str,
    pub group_ranges: Spread,
    pub sample_sensitivity: Spread,
}

/// Runs one full-precision forward/backward on `x` and reports, for every
/// compressible layer, how spread out its group ranges and per-sample
/// sensitivities are.
pub fn heterogeneity(
    exec: &mut GraphExecutor,
    x: &Tensor,
    loss: &Loss,
    target: &Target,
) -> Result<Vec<LayerSpreads>> {
    let n = exec.layers().len();
    let group_size = exec.group_size();
    // Walk the chain once to capture each compressible layer's input.
    let rng = QuantRng::new(0);
    let mut inputs: Vec<Option<Tensor>> = vec![None; n];
    let mut cur = x.clone();
    for i in 0..n {
        let layer = &mut exec.layers_mut()[i];
        if layer.compressible() {
            inputs[i] = Some(cur.clone());
        }
        let q = crate::layers::QuantSetting {
            rng: &rng,
            step: 0,
            layer: i as u32,
            group_size,
            net_compressed: false,
        };
        cur = layer.forward(&cur, &SaveMode::Full, &q)?;
    }
    let g = loss.grad(&cur, target)?;
    exec.backward(&g)?;
    let mut out = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let Some(input) = input else { continue };
        let stats = measure_group_ranges(input, group_size)?;
        let ranges: Vec<f64> =
            stats.ranges.iter().flatten().map(|&r| f64::from(r)).collect();
        let layer = &exec.layers()[i];
        let rec = layer.forward_record().ok_or(Error::BadArgument {
            what: "layer",
            detail: format!("layer {i} kept no record of its input"),
        })?;
        let w = layer.sensitivity(&rec.range_sq, &exec.out_grad_sq()[i]);
        out.push(LayerSpreads {
            layer: i,
            name: layer.name(),
            group_ranges: spread(&ranges)?,
            sample_sensitivity: spread(&w)?,
        });
    }
    Ok(out)
}
