//! The training loop: batching, level policy, width allocation, metrics.

use std::time::Instant;

use packgrad::alloc::GradMagEstimator;
use packgrad::graph::GraphExecutor;
use packgrad::loss::{Loss, Target};
use packgrad::profile;
use packgrad::rng::StreamRng;
use packgrad::tensor::Tensor;

use crate::config::{config_err, run_err, CliError, Level, TrainConfig};
use crate::dataset::{self, Dataset};
use crate::{domains, levels};

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// Total gradient variance under this step's save modes; present only
    /// on snapshot steps.
    pub grad_variance: Option<f64>,
    /// Bits per element actually spent on saved float contexts this step,
    /// metadata excluded; 32 when nothing was compressed.
    pub avg_bits: f64,
}

/// Instruction to measure gradient variance once, partway through a run.
#[derive(Debug, Clone)]
pub struct MeasurePlan {
    /// 1-based step to measure before.
    pub at_step: u64,
    /// Independent repetitions; their spread gives the standard error.
    pub blocks: u32,
    /// Monte-Carlo trials inside each repetition.
    pub trials: u32,
}

#[derive(Debug, Clone)]
pub struct VarianceAtPoint {
    pub mean: f64,
    pub se: f64,
    pub at_step: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub wall_seconds: f64,
    /// Element-weighted (spent, ceiling) of every cross-layer
    /// reallocation, in order.
    pub stage2_spend: Vec<(u64, u64)>,
    pub measured_variance: Option<VarianceAtPoint>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &MetricRow {
        self.rows.last().expect("training always produces at least one step")
    }
}

pub fn steps_per_epoch(cfg: &TrainConfig, data: &Dataset) -> Result<usize, CliError> {
    let spe = data.train_len() / cfg.batch_size;
    if spe == 0 {
        return Err(config_err(format!(
            "batch_size {} exceeds the {}-sample training set",
            cfg.batch_size,
            data.train_len()
        )));
    }
    Ok(spe)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, CliError> {
    let data = dataset::load(cfg)?;
    train_on(cfg, &data, None)
}

pub fn train_on(
    cfg: &TrainConfig,
    data: &Dataset,
    measure: Option<&MeasurePlan>,
) -> Result<TrainOutcome, CliError> {
    let t0 = Instant::now();
    let d = data.feature_len();
    if let Some([c, h, w]) = cfg.model.input {
        if c * h * w != d {
            return Err(config_err(format!(
                "model input {c}x{h}x{w} does not match the {d}-dimensional dataset"
            )));
        }
    }
    let layers = crate::config::build_net(&cfg.model, cfg.seed)?;
    let mut exec = GraphExecutor::new(layers, cfg.group_size, cfg.seed)
        .map_err(|e| config_err(e.to_string()))?;
    let out = exec
        .out_shape(&batch_shape(cfg, 1, d))
        .map_err(|e| config_err(format!("model: {e}")))?;
    if out != vec![1, data.classes] {
        return Err(config_err(format!(
            "model ends in shape {out:?} per sample, dataset has {} classes",
            data.classes
        )));
    }

    let n_layers = exec.layers().len();
    let mut estimator = GradMagEstimator::new(cfg.estimator, cfg.ema_decay, n_layers)
        .map_err(|e| config_err(e.to_string()))?;
    let spe = steps_per_epoch(cfg, data)?;
    let mut budgets = levels::initial_budgets(cfg.bits, cfg.batch_size, exec.layers());
    let mut shuffle = StreamRng::new(cfg.seed, domains::SHUFFLE);
    let mut rows = Vec::with_capacity(spe * cfg.epochs);
    let mut stage2_spend = Vec::new();
    let mut measured = None;
    let mut step_no = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train_len()).collect();
        shuffle.shuffle(&mut order);
        for b in 0..spe {
            step_no += 1;
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let x = gather_batch(&data.train_x, idx, cfg);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
            let target = batch_target_for(cfg.loss, &labels, data.classes);
            let modes =
                levels::save_modes(cfg.level, cfg.bits, exec.layers(), &budgets, &estimator, &ids);

            // Variance estimates run before the real pass so the pass's own
            // gradients are the ones the update consumes.
            if let Some(plan) = measure {
                if step_no == plan.at_step {
                    measured =
                        Some(variance_blocks(&mut exec, &x, &cfg.loss, &target, &modes, plan)?);
                }
            }
            let snapshot = cfg.variance_every != 0 && step_no % cfg.variance_every as u64 == 0;
            let grad_variance = if snapshot {
                let rep = profile::empirical_variance(
                    &mut exec,
                    &x,
                    &cfg.loss,
                    &target,
                    &modes,
                    cfg.variance_trials,
                )
                .map_err(run_err)?;
                Some(rep.total)
            } else {
                None
            };

            let y = exec.forward(&x, &modes).map_err(run_err)?;
            // Contexts are gone once backward consumes them, so price them
            // while they are still stored.
            let avg_bits = avg_saved_bits(&exec);
            let train_loss = cfg.loss.value(&y, &target).map_err(run_err)?;
            let g = cfg.loss.grad(&y, &target).map_err(run_err)?;
            exec.backward(&g).map_err(run_err)?;

            for l in 0..n_layers {
                if exec.layers()[l].compressible() {
                    let grad_sq = exec.out_grad_sq()[l].clone();
                    estimator.observe(l, &ids, &grad_sq);
                }
            }
            if cfg.level == Level::L3 {
                let r = levels::restage(cfg.bits, &exec)?;
                stage2_spend.push((r.spent, r.ceiling));
                budgets = r.budgets;
            }
            exec.sgd_step(cfg.lr).map_err(run_err)?;
            exec.set_step(exec.step() + 1);

            let eval_accuracy = accuracy(&mut exec, data, cfg)?;
            rows.push(MetricRow { step: step_no, epoch, train_loss, eval_accuracy, grad_variance, avg_bits });
        }
        estimator.end_epoch();
    }

    Ok(TrainOutcome {
        rows,
        wall_seconds: t0.elapsed().as_secs_f64(),
        stage2_spend,
        measured_variance: measured,
    })
}

fn batch_shape(cfg: &TrainConfig, n: usize, d: usize) -> Vec<usize> {
    match cfg.model.input {
        Some([c, h, w]) => vec![n, c, h, w],
        None => vec![n, d],
    }
}

pub fn gather_batch(x: &Tensor, idx: &[usize], cfg: &TrainConfig) -> Tensor {
    let d = x.sample_len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(batch_shape(cfg, idx.len(), d), data).unwrap()
}

pub fn batch_target_for(loss: Loss, labels: &[usize], classes: usize) -> Target {
    match loss {
        Loss::SoftmaxCrossEntropy => Target::Classes(labels.to_vec()),
        Loss::MeanSquared => {
            let n = labels.len();
            let mut one_hot = vec![0.0f32; n * classes];
            for (i, &c) in labels.iter().enumerate() {
                one_hot[i * classes + c] = 1.0;
            }
            Target::Values(Tensor::new(vec![n, classes], one_hot).unwrap())
        }
    }
}

/// Payload bits per element across the float contexts saved this step.
/// Full-precision saves count 32; a dual-copy context counts both copies.
fn avg_saved_bits(exec: &GraphExecutor) -> f64 {
    let mut bits = 0u64;
    let mut elements = 0u64;
    for layer in exec.layers() {
        if !layer.compressible() {
            continue;
        }
        let cb = layer.context_bits();
        bits += cb.payload;
        elements += cb.elements;
    }
    if elements == 0 {
        return 32.0;
    }
    bits as f64 / elements as f64
}

fn accuracy(exec: &mut GraphExecutor, data: &Dataset, cfg: &TrainConfig) -> Result<f64, CliError> {
    let all: Vec<usize> = (0..data.eval_x.samples()).collect();
    let x = gather_batch(&data.eval_x, &all, cfg);
    let y = exec.forward_fp(&x).map_err(run_err)?;
    let k = y.sample_len();
    let mut hits = 0usize;
    for (i, &label) in data.eval_y.iter().enumerate() {
        let row = &y.data()[i * k..(i + 1) * k];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap();
        hits += usize::from(pred == label);
    }
    Ok(hits as f64 / data.eval_y.len() as f64)
}

fn variance_blocks(
    exec: &mut GraphExecutor,
    x: &Tensor,
    loss: &Loss,
    target: &Target,
    modes: &[packgrad::layers::SaveMode],
    plan: &MeasurePlan,
) -> Result<VarianceAtPoint, CliError> {
    let mut totals = Vec::with_capacity(plan.blocks as usize);
    for _ in 0..plan.blocks {
        let rep = profile::empirical_variance(exec, x, loss, target, modes, plan.trials)
            .map_err(run_err)?;
        totals.push(rep.total);
    }
    let k = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / k;
    let var = totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (k - 1.0).max(1.0);
    Ok(VarianceAtPoint { mean, se: (var / k).sqrt(), at_step: plan.at_step })
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,epoch,train_loss,eval_accuracy,grad_variance,avg_bits\n");
    for r in rows {
        let var = r.grad_variance.map(|v| format!("{v:.6e}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{:.6},{:.4},{},{:.4}\n",
            r.step, r.epoch, r.train_loss, r.eval_accuracy, var, r.avg_bits
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_str;

    fn base_cfg(extra: &str) -> TrainConfig {
        parse_str(&format!(
            "model = linear:8:6, relu, linear:6:3\n\
             dataset = synthetic:48:8:3\n\
             batch_size = 8\nepochs = 2\nlr = 0.05\nseed = 4\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn full_precision_training_learns_the_mixture() {
        let out = train(&base_cfg("")).unwrap();
        assert_eq!(out.rows.len(), 12);
        assert_eq!(out.rows[0].step, 1);
        assert_eq!(out.rows[11].epoch, 1);
        let first = out.rows[0].train_loss;
        let last = out.final_row().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
        assert!(out.final_row().eval_accuracy > 0.6);
        assert_eq!(out.final_row().avg_bits, 32.0);
        assert!(out.stage2_spend.is_empty());
    }

    #[test]
    fn identical_configs_produce_identical_metrics() {
        let cfg = base_cfg("level = L3\nbits = 2\n");
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
    }

    #[test]
    fn compressed_steps_report_their_spend() {
        let out = train(&base_cfg("level = L2\nbits = 2\n")).unwrap();
        for r in &out.rows {
            assert!((r.avg_bits - 2.0).abs() < 1e-12, "uniform 2-bit run spent {}", r.avg_bits);
        }
        let out = train(&base_cfg("level = L3\nbits = 2\n")).unwrap();
        assert_eq!(out.stage2_spend.len(), 12);
        for &(spent, ceiling) in &out.stage2_spend {
            assert!(spent <= ceiling);
        }
        // Average spend stays at or under the requested 2 bits while the
        // allocator shifts widths between layers and samples.
        for r in &out.rows {
            assert!(r.avg_bits <= 2.0 + 1e-12);
            assert!(r.avg_bits >= 1.0);
        }
    }

    #[test]
    fn variance_snapshots_appear_on_schedule() {
        let out = train(&base_cfg("level = L2\nbits = 1\nvariance_every = 4\nvariance_trials = 8\n"))
            .unwrap();
        for r in &out.rows {
            assert_eq!(r.grad_variance.is_some(), r.step % 4 == 0, "step {}", r.step);
        }
        let snap = out.rows[3].grad_variance.unwrap();
        assert!(snap > 0.0, "1-bit noise measured as {snap}");
    }

    #[test]
    fn measure_plan_reports_mean_and_error() {
        let cfg = base_cfg("level = L2\nbits = 1\n");
        let data = dataset::load(&cfg).unwrap();
        let plan = MeasurePlan { at_step: 3, blocks: 4, trials: 8 };
        let out = train_on(&cfg, &data, Some(&plan)).unwrap();
        let v = out.measured_variance.unwrap();
        assert_eq!(v.at_step, 3);
        assert!(v.mean > 0.0);
        assert!(v.se > 0.0 && v.se < v.mean);
    }

    #[test]
    fn oversized_batch_is_a_config_error() {
        let mut cfg = base_cfg("");
        cfg.batch_size = 64;
        let err = train(&cfg).unwrap_err();
        assert_eq!(err.kind, crate::config::FailKind::Config);
    }

    #[test]
    fn model_head_must_match_class_count() {
        let cfg = parse_str(
            "model = linear:8:5\ndataset = synthetic:32:8:3\nbatch_size = 8\n",
        )
        .unwrap();
        let err = train(&cfg).unwrap_err();
        assert!(err.msg.contains("classes"), "{}", err.msg);
    }
}
