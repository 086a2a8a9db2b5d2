//! Reporting commands: memory accounting, bit sweeps, variance
//! decomposition, and heterogeneity summaries.

use packgrad::alloc::GradMagEstimator;
use packgrad::graph::GraphExecutor;
use packgrad::layers::{Layer, SaveMode};
use packgrad::loss::Target;
use packgrad::profile::{self, spread, Spread};
use packgrad::quantize::{measure_group_ranges, quantize_tensor};
use packgrad::rng::{QuantRng, StreamRng};
use packgrad::tensor::Tensor;

use crate::config::{run_err, CliError, TrainConfig};
use crate::dataset::{self, Dataset};
use crate::train::batch_target_for;
use crate::{domains, levels, train};

#[derive(Debug, Clone)]
pub struct MemRow {
    pub layer: usize,
    pub name: &'static str,
    pub elements: u64,
    pub fp_bits: u64,
    pub payload_bits: u64,
    pub metadata_bits: u64,
    pub discrete_bits: u64,
    /// Exact length of the packed context on disk, when one exists.
    pub serialized_bytes: Option<u64>,
}

impl MemRow {
    pub fn compressed_bits(&self) -> u64 {
        self.payload_bits + self.metadata_bits + self.discrete_bits
    }
}

#[derive(Debug, Clone)]
pub struct MemReport {
    pub rows: Vec<MemRow>,
    pub batch: usize,
    /// Elements in one batch of network input.
    pub input_elements: u64,
    pub fp_total_bits: u64,
    pub compressed_total_bits: u64,
    /// fp / compressed.
    pub ratio: f64,
    /// Total saved bits per network-input element, both ways.
    pub fp_per_input_element: f64,
    pub compressed_per_input_element: f64,
    /// Mean width of quantized elements, metadata excluded.
    pub avg_payload_bits: f64,
    /// Same, with the per-group metadata amortized in.
    pub avg_bits_with_metadata: f64,
}

/// Runs one forward pass at the configured level and prices every saved
/// context. Packed sizes come from serializing the same packs the layers
/// hold: the counter-keyed rounding makes the re-encoding bit-identical.
pub fn memreport(cfg: &TrainConfig) -> Result<MemReport, CliError> {
    let data = dataset::load(cfg)?;
    train::steps_per_epoch(cfg, &data)?;
    let (mut exec, x, _target) = prepared_executor(cfg, &data)?;
    let estimator = GradMagEstimator::new(cfg.estimator, cfg.ema_decay, exec.layers().len())
        .map_err(run_err)?;
    let budgets = levels::initial_budgets(cfg.bits, cfg.batch_size, exec.layers());
    let ids: Vec<u64> = (0..cfg.batch_size as u64).collect();
    let modes = levels::save_modes(cfg.level, cfg.bits, exec.layers(), &budgets, &estimator, &ids);

    // First walk the chain in full precision to capture each compressible
    // layer's input, then run the real pass that stores packed contexts.
    let mut inputs: Vec<Option<Tensor>> = vec![None; exec.layers().len()];
    let mut cur = x.clone();
    for i in 0..exec.layers().len() {
        if exec.layers()[i].compressible() && matches!(modes[i], SaveMode::Quantized(_)) {
            inputs[i] = Some(cur.clone());
        }
        cur = forward_one(&mut exec, i, &cur, &SaveMode::Full)?;
    }
    exec.forward(&x, &modes).map_err(run_err)?;

    let rng = QuantRng::new(cfg.seed);
    let step = exec.step();
    let mut rows = Vec::new();
    for (i, (name, cb)) in exec.context_report().into_iter().enumerate() {
        let serialized = match (&inputs[i], exec.layers()[i].forward_record()) {
            (Some(input), Some(rec)) => {
                let bits = rec.bits.as_ref().expect("quantized save always records widths");
                let copies = match &exec.layers()[i] {
                    Layer::BatchNorm(bn) if bn.two_copy() => 2u32,
                    _ => 1,
                };
                let mut total = 0u64;
                for copy in 0..copies {
                    let pack =
                        quantize_tensor(input, bits, cfg.group_size, &rng, step, i as u32, copy)
                            .map_err(run_err)?;
                    total += pack.serialize().len() as u64;
                }
                Some(total)
            }
            _ => None,
        };
        rows.push(MemRow {
            layer: i,
            name,
            elements: cb.elements,
            fp_bits: cb.fp_reference,
            payload_bits: cb.payload,
            metadata_bits: cb.metadata,
            discrete_bits: cb.discrete,
            serialized_bytes: serialized,
        });
    }

    let fp_total_bits: u64 = rows.iter().map(|r| r.fp_bits).sum();
    let compressed_total_bits: u64 = rows.iter().map(|r| r.compressed_bits()).sum();
    let input_elements = x.len() as u64;
    let (mut qbits, mut qelems, mut qmeta) = (0u64, 0u64, 0u64);
    for r in &rows {
        if r.serialized_bytes.is_some() {
            // A dual-copy context stores each element twice.
            let copies = (r.fp_bits / 32) / r.elements.max(1);
            qbits += r.payload_bits;
            qmeta += r.metadata_bits;
            qelems += r.elements * copies.max(1);
        }
    }
    Ok(MemReport {
        rows,
        batch: cfg.batch_size,
        input_elements,
        fp_total_bits,
        compressed_total_bits,
        ratio: fp_total_bits as f64 / compressed_total_bits.max(1) as f64,
        fp_per_input_element: fp_total_bits as f64 / input_elements as f64,
        compressed_per_input_element: compressed_total_bits as f64 / input_elements as f64,
        avg_payload_bits: qbits as f64 / qelems.max(1) as f64,
        avg_bits_with_metadata: (qbits + qmeta) as f64 / qelems.max(1) as f64,
    })
}

pub fn memreport_csv(r: &MemReport) -> String {
    let mut s = String::from(
        "layer,name,elements,fp_bits,payload_bits,metadata_bits,discrete_bits,bits_per_element,serialized_bytes\n",
    );
    for row in &r.rows {
        let bpe = if row.elements == 0 {
            0.0
        } else {
            row.compressed_bits() as f64 / row.elements as f64
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.4},{}\n",
            row.layer,
            row.name,
            row.elements,
            row.fp_bits,
            row.payload_bits,
            row.metadata_bits,
            row.discrete_bits,
            bpe,
            row.serialized_bytes.map(|b| b.to_string()).unwrap_or_default(),
        ));
    }
    s.push_str(&format!(
        "total,,,{},{},{},{},{:.4},\n",
        r.fp_total_bits,
        r.rows.iter().map(|x| x.payload_bits).sum::<u64>(),
        r.rows.iter().map(|x| x.metadata_bits).sum::<u64>(),
        r.rows.iter().map(|x| x.discrete_bits).sum::<u64>(),
        r.compressed_per_input_element,
    ));
    s
}

pub fn memreport_summary(r: &MemReport) -> String {
    format!(
        "batch {}: {} -> {} bits saved ({:.2}x), {:.4} -> {:.4} bits per input element\n\
         quantized widths: {:.4} bits mean payload, {:.4} with metadata\n",
        r.batch,
        r.fp_total_bits,
        r.compressed_total_bits,
        r.ratio,
        r.fp_per_input_element,
        r.compressed_per_input_element,
        r.avg_payload_bits,
        r.avg_bits_with_metadata,
    )
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub level: crate::config::Level,
    pub bits: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub avg_bits: f64,
}

/// Trains once per (level, bits) pair on a shared dataset, measuring the
/// quantization-induced gradient variance at the configured point of each
/// run. Variance comes in `blocks` independent Monte-Carlo estimates whose
/// spread yields the standard error.
pub fn sweep(cfg: &TrainConfig) -> Result<Vec<SweepRow>, CliError> {
    let data = dataset::load(cfg)?;
    let spe = train::steps_per_epoch(cfg, &data)?;
    let total_steps = (spe * cfg.epochs) as u64;
    let at_step = ((total_steps as f64 * cfg.variance_point).round() as u64).clamp(1, total_steps);
    let mut rows = Vec::new();
    for &level in &cfg.sweep_levels {
        for &bits in &cfg.sweep_bits {
            let mut c = cfg.clone();
            c.level = level;
            c.bits = bits;
            c.validate()?;
            let plan =
                train::MeasurePlan { at_step, blocks: 8, trials: cfg.variance_trials };
            let out = train::train_on(&c, &data, Some(&plan))?;
            let v = out.measured_variance.as_ref().expect("plan step is always reached");
            let last = out.final_row();
            rows.push(SweepRow {
                level,
                bits,
                variance: v.mean,
                variance_se: v.se,
                final_loss: last.train_loss,
                eval_accuracy: last.eval_accuracy,
                avg_bits: last.avg_bits,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("level,bits,grad_variance,variance_se,final_loss,eval_accuracy,avg_bits\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6e},{:.6e},{:.6},{:.4},{:.4}\n",
            r.level, r.bits, r.variance, r.variance_se, r.final_loss, r.eval_accuracy, r.avg_bits
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct VarianceTable {
    /// Column names, one per network layer.
    pub columns: Vec<String>,
    /// (source label, per-layer variance, total).
    pub rows: Vec<(String, Vec<f64>, f64)>,
}

/// Cross-layer noise decomposition on one fixed batch: one row per
/// compressible layer with only that layer quantized, a sampling row from
/// resampled full-precision batches, and an everything-quantized row.
pub fn profile_variance(cfg: &TrainConfig) -> Result<VarianceTable, CliError> {
    let data = dataset::load(cfg)?;
    train::steps_per_epoch(cfg, &data)?;
    let (mut exec, x, target) = prepared_executor(cfg, &data)?;
    let bits = (cfg.bits.round() as u8).clamp(1, 8);
    let columns: Vec<String> = exec
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}:{}", i, l.name()))
        .collect();
    let mut rows = Vec::new();

    let dec = profile::quantization_noise_matrix(
        &mut exec,
        &x,
        &cfg.loss,
        &target,
        bits,
        cfg.variance_trials,
    )
    .map_err(run_err)?;
    for (src, rep) in dec.source_layers.iter().zip(&dec.rows) {
        rows.push((columns[*src].clone(), rep.per_layer.clone(), rep.total));
    }

    let batches = resampled_batches(cfg, &data, 100);
    let s = profile::sampling_variance(&mut exec, &batches, &cfg.loss).map_err(run_err)?;
    rows.push(("sampling".to_string(), s.per_layer.clone(), s.total));

    let modes: Vec<SaveMode> = exec
        .layers()
        .iter()
        .map(|l| {
            if l.compressible() {
                SaveMode::Quantized(packgrad::layers::BitsChoice::Uniform(bits))
            } else {
                SaveMode::Full
            }
        })
        .collect();
    let all = profile::empirical_variance(
        &mut exec,
        &x,
        &cfg.loss,
        &target,
        &modes,
        cfg.variance_trials,
    )
    .map_err(run_err)?;
    rows.push(("all_quantized".to_string(), all.per_layer.clone(), all.total));

    Ok(VarianceTable { columns, rows })
}

pub fn variance_csv(t: &VarianceTable) -> String {
    let mut s = String::from("source");
    for c in &t.columns {
        s.push(',');
        s.push_str(c);
    }
    s.push_str(",total\n");
    for (src, per_layer, total) in &t.rows {
        s.push_str(src);
        for v in per_layer {
            s.push_str(&format!(",{v:.6e}"));
        }
        s.push_str(&format!(",{total:.6e}\n"));
    }
    s
}

#[derive(Debug, Clone)]
pub struct HetRow {
    pub layer: usize,
    pub name: &'static str,
    pub kind: &'static str,
    pub spread: Spread,
}

/// How uneven one batch is, per compressible layer: the per-group dynamic
/// ranges, the per-sample sensitivities, and the per-group sensitivities
/// (each sample's sensitivity split over its groups by squared range).
pub fn heterogeneity(cfg: &TrainConfig) -> Result<Vec<HetRow>, CliError> {
    let data = dataset::load(cfg)?;
    train::steps_per_epoch(cfg, &data)?;
    let (mut exec, x, target) = prepared_executor(cfg, &data)?;

    let n = exec.layers().len();
    let mut inputs: Vec<Option<Tensor>> = vec![None; n];
    let mut cur = x.clone();
    for i in 0..n {
        if exec.layers()[i].compressible() {
            inputs[i] = Some(cur.clone());
        }
        cur = forward_one(&mut exec, i, &cur, &SaveMode::Full)?;
    }
    let g = cfg.loss.grad(&cur, &target).map_err(run_err)?;
    exec.backward(&g).map_err(run_err)?;

    let mut rows = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let Some(input) = input else { continue };
        let stats = measure_group_ranges(input, cfg.group_size).map_err(run_err)?;
        let layer = &exec.layers()[i];
        let name = layer.name();
        let ranges: Vec<f64> =
            stats.ranges.iter().flatten().map(|&r| f64::from(r)).collect();
        let sens = layer.sensitivity(&stats.sq_norms, &exec.out_grad_sq()[i]);
        let mut group_sens = Vec::new();
        for (s, per_group) in stats.ranges.iter().enumerate() {
            let total_sq: f64 = per_group.iter().map(|&r| f64::from(r) * f64::from(r)).sum();
            if total_sq <= 0.0 {
                continue;
            }
            for &r in per_group {
                group_sens.push(sens[s] * f64::from(r) * f64::from(r) / total_sq);
            }
        }
        rows.push(HetRow { layer: i, name, kind: "group_range", spread: spread(&ranges).map_err(run_err)? });
        rows.push(HetRow { layer: i, name, kind: "sample_sensitivity", spread: spread(&sens).map_err(run_err)? });
        rows.push(HetRow { layer: i, name, kind: "group_sensitivity", spread: spread(&group_sens).map_err(run_err)? });
    }
    Ok(rows)
}

pub fn heterogeneity_csv(rows: &[HetRow]) -> String {
    let mut s = String::from("layer,name,kind,count,min,p50,p90,p99,max,mean,ratio_max_min\n");
    for r in rows {
        let v = &r.spread;
        s.push_str(&format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.4}\n",
            r.layer, r.name, r.kind, v.count, v.min, v.p50, v.p90, v.p99, v.max, v.mean, v.ratio_max_min
        ));
    }
    s
}

/// Builds the executor and the first deterministic batch (leading samples,
/// unshuffled) plus its loss target.
fn prepared_executor(
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(GraphExecutor, Tensor, Target), CliError> {
    let layers = crate::config::build_net(&cfg.model, cfg.seed)?;
    let exec = GraphExecutor::new(layers, cfg.group_size, cfg.seed)
        .map_err(|e| crate::config::config_err(e.to_string()))?;
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let x = train::gather_batch(&data.train_x, &idx, cfg);
    let labels: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
    let target = batch_target_for(cfg.loss, &labels, data.classes);
    Ok((exec, x, target))
}

fn forward_one(
    exec: &mut GraphExecutor,
    i: usize,
    x: &Tensor,
    mode: &SaveMode,
) -> Result<Tensor, CliError> {
    // Mirrors the executor's own per-layer environment; mode is always
    // Full here, so no draws are consumed and net_compressed is moot.
    let rng = QuantRng::new(0);
    let group_size = exec.group_size();
    let q = packgrad::layers::QuantSetting {
        rng: &rng,
        step: 0,
        layer: i as u32,
        group_size,
        net_compressed: false,
    };
    exec.layers_mut()[i].forward(x, mode, &q).map_err(run_err)
}

fn resampled_batches(cfg: &TrainConfig, data: &Dataset, count: usize) -> Vec<(Tensor, Target)> {
    let mut rng = StreamRng::new(cfg.seed, domains::RESAMPLE);
    (0..count)
        .map(|_| {
            let idx: Vec<usize> =
                (0..cfg.batch_size).map(|_| rng.next_below(data.train_len())).collect();
            let x = train::gather_batch(&data.train_x, &idx, cfg);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
            (x, batch_target_for(cfg.loss, &labels, data.classes))
        })
        .collect()
}
