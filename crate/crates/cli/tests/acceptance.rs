//! Release gate: ten checks covering the compression arithmetic, the
//! estimator guarantees, the allocator, end-to-end training behavior, the
//! storage format, and determinism. Each check prints one `acceptance N:
//! PASS` line with its measured numbers; tolerances are pinned constants so
//! a regression fails loudly instead of drifting.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use packgrad::alloc::{self, AllocProblem};
use packgrad::graph::GraphExecutor;
use packgrad::layers::{BitsChoice, SaveMode};

use packgrad::profile;
use packgrad::quantize::{measure_group_ranges, quantize_tensor, PackedActivation};
use packgrad::rng::{QuantRng, StreamRng};
use packgrad::tensor::Tensor;

use packgrad_cli::config::{self, parse_str, TrainConfig};
use packgrad_cli::report;
use packgrad_cli::train::{self, MeasurePlan};

const RATIO_EXPECTED: f64 = 12.19;
const RATIO_TOL: f64 = 0.01;
const BITS_PER_ELEMENT_EXPECTED: f64 = 5.25;

const BIAS_DRAWS: u32 = 10_000;
const BIAS_SIGMA: f64 = 4.0;
const BIAS_ABS: f64 = 1e-6;

const VARIANCE_TRIALS: u32 = 10_000;
const VARIANCE_REL_TOL: f64 = 0.10;

const RANDOM_ALLOC_INSTANCES: usize = 100;
const GREEDY_SUBOPTIMALITY: f64 = 1.05;

const ORDERING_SE_MARGIN: f64 = 2.0;

const CONVERGENCE_SEEDS: u64 = 10;
const PLATEAU_WINS_REQUIRED: usize = 9;

const PARITY_TOL: f64 = 0.02;

const DECOMP_REL_TOL: f64 = 0.20;
const DIAGONAL_DOMINANCE: f64 = 2.0;

const FORMAT_TENSORS: usize = 1000;

fn normal_tensor(shape: Vec<usize>, seed: u64, domain: u64) -> Tensor {
    let mut rng = StreamRng::new(seed, domain);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.next_normal() as f32).collect()).unwrap()
}

fn quantized_modes(exec: &GraphExecutor, bits: u8) -> Vec<SaveMode> {
    exec.layers()
        .iter()
        .map(|l| {
            if l.compressible() {
                SaveMode::Quantized(BitsChoice::Uniform(bits))
            } else {
                SaveMode::Full
            }
        })
        .collect()
}

fn model_only(model: &str) -> TrainConfig {
    parse_str(&format!("model = {model}\ndataset = synthetic:8:8:2\n")).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Reference CNN used by the training-behavior checks: two conv blocks on an
/// 8x8 input, pooled down to a 4-way linear head.
fn reference_cnn(samples: usize, extra: &str) -> TrainConfig {
    parse_str(&format!(
        "model = input:1x8x8, conv:1:8:3:1:1, bn:8, relu, maxpool:2, \
         conv:8:16:3:1:1, bn:16, relu, avgpool:2, linear:64:4\n\
         dataset = synthetic:{samples}:64:4\n\
         batch_size = 32\nlr = 0.05\nseed = 11\ngroup_size = 64\n{extra}"
    ))
    .unwrap()
}

#[test]
fn acceptance_01_compression_ratio() {
    let cfg = parse_str(
        "model = input:4x8x8, conv:4:4:3:1:1, bn:4, relu\n\
         dataset = synthetic:16:256:4\n\
         level = L2\nbits = 2\ngroup_size = 256\nbatch_size = 4\n",
    )
    .unwrap();
    let r = report::memreport(&cfg).unwrap();
    assert!(
        (r.compressed_per_input_element - BITS_PER_ELEMENT_EXPECTED).abs() < 1e-9,
        "acceptance 1: FAIL (got {} bits per input element)",
        r.compressed_per_input_element
    );
    assert!(
        (r.ratio - RATIO_EXPECTED).abs() <= RATIO_TOL,
        "acceptance 1: FAIL (ratio {} outside {RATIO_EXPECTED} +- {RATIO_TOL})",
        r.ratio
    );
    println!(
        "acceptance 1: PASS ({} bits/element, ratio {:.4})",
        r.compressed_per_input_element, r.ratio
    );
}

/// Worst deviation of the Monte-Carlo mean gradient from the full-precision
/// gradient, expressed as a fraction of the allowed band.
fn worst_bias(model: &str, xshape: &[usize], bits: u8, seed: u64) -> (f64, usize) {
    let cfg = model_only(model);
    let layers = config::build_net(&cfg.model, seed).unwrap();
    let n_layers = layers.len();
    let mut exec = GraphExecutor::new(layers, 16, seed).unwrap();
    let x = normal_tensor(xshape.to_vec(), seed, 0xA1);
    let oshape = exec.out_shape(xshape).unwrap();
    let g = normal_tensor(oshape, seed, 0xA2);

    let collect = |exec: &GraphExecutor, gin: &Tensor| -> Vec<f64> {
        let mut flat = Vec::new();
        for l in 0..n_layers {
            flat.extend(exec.layer_grad_flat(l).iter().map(|&v| f64::from(v)));
        }
        flat.extend(gin.data().iter().map(|&v| f64::from(v)));
        flat
    };

    exec.forward_fp(&x).unwrap();
    let gin = exec.backward(&g).unwrap();
    let reference = collect(&exec, &gin);

    let modes = quantized_modes(&exec, bits);
    let mut sum = vec![0.0f64; reference.len()];
    let mut sum_sq = vec![0.0f64; reference.len()];
    for t in 0..BIAS_DRAWS {
        exec.set_step(1 + u64::from(t));
        exec.forward(&x, &modes).unwrap();
        let gin = exec.backward(&g).unwrap();
        for (i, v) in collect(&exec, &gin).into_iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }

    let n = f64::from(BIAS_DRAWS);
    let mut worst = 0.0f64;
    for i in 0..reference.len() {
        let m = sum[i] / n;
        let var = (sum_sq[i] / n - m * m).max(0.0);
        let se = (var / n).sqrt();
        let excess = (m - reference[i]).abs() / (BIAS_SIGMA * se + BIAS_ABS);
        worst = worst.max(excess);
    }
    (worst, reference.len())
}

#[test]
fn acceptance_02_unbiased_gradients() {
    let cases: [(&str, &str, &[usize]); 6] = [
        ("linear", "linear:6:5", &[4, 6]),
        ("conv", "input:2x5x5, conv:2:3:3:1:1", &[4, 2, 5, 5]),
        ("relu", "relu", &[4, 10]),
        ("maxpool", "input:2x4x4, maxpool:2", &[4, 2, 4, 4]),
        ("avgpool", "input:2x4x4, avgpool:2", &[4, 2, 4, 4]),
        ("batchnorm", "input:3x4x4, bn:3:two", &[4, 3, 4, 4]),
    ];
    let mut summary = Vec::new();
    for (name, model, xshape) in cases {
        let (worst, components) = worst_bias(model, xshape, 2, 19);
        assert!(
            worst <= 1.0,
            "acceptance 2: FAIL ({name}: mean gradient {worst:.2}x outside \
             the {BIAS_SIGMA}-sigma band over {components} components)"
        );
        summary.push(format!("{name} {worst:.2}"));
    }
    println!(
        "acceptance 2: PASS (worst deviation as fraction of {BIAS_SIGMA}-sigma band: {})",
        summary.join(", ")
    );
}

#[test]
fn acceptance_03_variance_formula() {
    let seed = 23;
    let (batch, d_in, d_out, group) = (16usize, 128usize, 8usize, 128usize);
    let mut rng = StreamRng::new(seed, 0xB1);
    let x = Tensor::new(
        vec![batch, d_in],
        (0..batch * d_in).map(|_| rng.next_unit() as f32).collect(),
    )
    .unwrap();
    let g = normal_tensor(vec![batch, d_out], seed, 0xB2);

    let cfg = model_only(&format!("linear:{d_in}:{d_out}"));
    let layers = config::build_net(&cfg.model, seed).unwrap();
    let mut exec = GraphExecutor::new(layers, group, seed).unwrap();

    exec.forward_fp(&x).unwrap();
    exec.backward(&g).unwrap();
    let reference: Vec<f64> =
        exec.layer_grad_flat(0).iter().map(|&v| f64::from(v)).collect();

    let stats = measure_group_ranges(&x, group).unwrap();
    let grad_sq: Vec<f64> = (0..batch)
        .map(|n| {
            g.data()[n * d_out..(n + 1) * d_out]
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum()
        })
        .collect();

    let mut summary = Vec::new();
    for bits in [1u8, 2, 4] {
        let levels = f64::from((1u32 << bits) - 1);
        let predicted: f64 = (0..batch)
            .map(|n| grad_sq[n] * stats.sq_norms[n])
            .sum::<f64>()
            * group as f64
            / (6.0 * levels * levels);

        let modes = vec![SaveMode::Quantized(BitsChoice::Uniform(bits))];
        let mut acc = 0.0f64;
        for t in 0..VARIANCE_TRIALS {
            exec.set_step(1 + u64::from(t));
            exec.forward(&x, &modes).unwrap();
            exec.backward(&g).unwrap();
            acc += exec
                .layer_grad_flat(0)
                .iter()
                .zip(&reference)
                .map(|(&v, &r)| {
                    let d = f64::from(v) - r;
                    d * d
                })
                .sum::<f64>();
        }
        let empirical = acc / f64::from(VARIANCE_TRIALS);
        let rel = (empirical - predicted).abs() / predicted;
        assert!(
            rel <= VARIANCE_REL_TOL,
            "acceptance 3: FAIL ({bits}-bit: empirical {empirical:.4e} vs \
             predicted {predicted:.4e}, off by {:.1}%)",
            rel * 100.0
        );
        summary.push(format!("{bits}-bit {:.1}%", rel * 100.0));
    }
    println!("acceptance 3: PASS (relative error vs closed form: {})", summary.join(", "));
}

#[test]
fn acceptance_04_allocator_optimality() {
    let pinned = AllocProblem { w: vec![vec![16.0], vec![1.0]], dims: vec![1, 1], budget: 6 };
    let g = alloc::greedy(&pinned, true).unwrap();
    let e = alloc::exact(&pinned).unwrap();
    assert_eq!(
        g, e,
        "acceptance 4: FAIL (greedy {g:?} differs from exact {e:?} on the pinned instance)"
    );

    let mut rng = StreamRng::new(41, 0xC1);
    let mut worst_ratio = 1.0f64;
    for i in 0..RANDOM_ALLOC_INSTANCES {
        let layers = 1 + rng.next_below(3);
        let samples = 1 + rng.next_below(12 / layers);
        let w: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..samples).map(|_| 10f64.powf(3.0 * rng.next_unit() - 1.0)).collect())
            .collect();
        let dims: Vec<u64> = (0..layers).map(|_| 1 + rng.next_below(4) as u64).collect();
        let unit_cost: u64 = dims.iter().map(|d| d * samples as u64).sum();
        let budget = unit_cost + rng.next_below((unit_cost * 7) as usize + 1) as u64;
        let p = AllocProblem { w: w.clone(), dims, budget };

        let greedy_obj = alloc::objective(&w, &alloc::greedy(&p, true).unwrap());
        let exact_obj = alloc::objective(&w, &alloc::exact(&p).unwrap());
        let ratio = greedy_obj / exact_obj;
        assert!(
            ratio <= GREEDY_SUBOPTIMALITY + 1e-12,
            "acceptance 4: FAIL (instance {i}: greedy {greedy_obj:.6e} is \
             {ratio:.4}x exact {exact_obj:.6e})"
        );
        worst_ratio = worst_ratio.max(ratio);
    }
    println!(
        "acceptance 4: PASS (pinned instance exact, worst greedy/exact ratio {worst_ratio:.4} \
         over {RANDOM_ALLOC_INSTANCES} instances)"
    );
}

#[test]
fn acceptance_05_two_stage_budget_and_ordering() {
    let run = |level: &str| {
        let cfg = reference_cnn(256, &format!("level = {level}\nbits = 2\nepochs = 2\n"));
        let data = packgrad_cli::dataset::load(&cfg).unwrap();
        let plan = MeasurePlan { at_step: 8, blocks: 8, trials: 10 };
        train::train_on(&cfg, &data, Some(&plan)).unwrap()
    };

    let l3 = run("L3");
    assert!(
        !l3.stage2_spend.is_empty(),
        "acceptance 5: FAIL (no reallocation happened at L3)"
    );
    for &(spent, ceiling) in &l3.stage2_spend {
        assert!(
            spent <= ceiling,
            "acceptance 5: FAIL (reallocation spent {spent} of {ceiling})"
        );
    }

    let l2 = run("L2");
    let l2_5 = run("L2.5");
    let v2 = l2.measured_variance.unwrap();
    let v25 = l2_5.measured_variance.unwrap();
    let v3 = l3.measured_variance.unwrap();
    let band_hi = (v2.se * v2.se + v25.se * v25.se).sqrt() * ORDERING_SE_MARGIN;
    let band_lo = (v25.se * v25.se + v3.se * v3.se).sqrt() * ORDERING_SE_MARGIN;
    assert!(
        v2.mean + band_hi >= v25.mean,
        "acceptance 5: FAIL (uniform variance {:.4e} below per-sample {:.4e} by more than {band_hi:.1e})",
        v2.mean,
        v25.mean
    );
    assert!(
        v25.mean + band_lo >= v3.mean,
        "acceptance 5: FAIL (per-sample variance {:.4e} below joint {:.4e} by more than {band_lo:.1e})",
        v25.mean,
        v3.mean
    );
    println!(
        "acceptance 5: PASS (spend within ceiling on {} steps; variance L2 {:.4e} >= L2.5 {:.4e} >= L3 {:.4e})",
        l3.stage2_spend.len(),
        v2.mean,
        v25.mean,
        v3.mean
    );
}

#[test]
fn acceptance_06_convergence_and_noise_floor() {
    let quadratic = |seed: u64, extra: &str| {
        let cfg = parse_str(&format!(
            "model = linear:16:4\ndataset = synthetic:256:16:4\nloss = mse\n\
             batch_size = 32\nepochs = 10\nlr = 0.05\nseed = {seed}\n{extra}"
        ))
        .unwrap();
        train::train(&cfg).unwrap()
    };
    let decile = |rows: &[train::MetricRow], last: bool| {
        let k = rows.len() / 10;
        let slice =
            if last { &rows[rows.len() - k..] } else { &rows[..k] };
        mean(&slice.iter().map(|r| r.train_loss).collect::<Vec<_>>())
    };

    let mut descents = 0;
    let mut plateau_wins = 0;
    for s in 0..CONVERGENCE_SEEDS {
        let seed = 1000 + s;
        let out = quadratic(seed, "level = L3\nbits = 2\n");
        if decile(&out.rows, true) < decile(&out.rows, false) {
            descents += 1;
        }
        let coarse = quadratic(seed, "level = L2\nbits = 1\n");
        let fine = quadratic(seed, "level = L2\nbits = 4\n");
        if decile(&coarse.rows, true) >= decile(&fine.rows, true) {
            plateau_wins += 1;
        }
    }
    assert_eq!(
        descents, CONVERGENCE_SEEDS,
        "acceptance 6: FAIL (loss descended on {descents}/{CONVERGENCE_SEEDS} seeds)"
    );
    assert!(
        plateau_wins >= PLATEAU_WINS_REQUIRED,
        "acceptance 6: FAIL (1-bit plateau above 4-bit on {plateau_wins}/{CONVERGENCE_SEEDS} seeds)"
    );
    println!(
        "acceptance 6: PASS (descent {descents}/{CONVERGENCE_SEEDS}, \
         plateau ordering {plateau_wins}/{CONVERGENCE_SEEDS})"
    );
}

#[test]
fn acceptance_07_accuracy_parity() {
    let run = |extra: &str| {
        let cfg = reference_cnn(1000, &format!("epochs = 5\n{extra}"));
        train::train(&cfg).unwrap().final_row().eval_accuracy
    };
    let full = run("level = L0\n");
    let compressed = run("level = L3\nbits = 2\n");
    let gap = (full - compressed).abs();
    assert!(
        gap <= PARITY_TOL + 1e-9,
        "acceptance 7: FAIL (accuracy {full:.4} full vs {compressed:.4} compressed)"
    );
    println!(
        "acceptance 7: PASS (accuracy {full:.4} full vs {compressed:.4} compressed, gap {gap:.4})"
    );
}

#[test]
fn acceptance_08_variance_decomposition() {
    let seed = 31;
    let cfg = parse_str(
        "model = linear:16:8, bn:8, linear:8:4\ndataset = synthetic:512:16:4\n\
         batch_size = 32\nseed = 31\n",
    )
    .unwrap();
    let data = packgrad_cli::dataset::load(&cfg).unwrap();
    let layers = config::build_net(&cfg.model, seed).unwrap();
    let n_layers = layers.len();
    let mut exec = GraphExecutor::new(layers, 16, seed).unwrap();
    let loss = cfg.loss;

    let batch_of = |idx: &[usize]| {
        let x = train::gather_batch(&data.train_x, idx, &cfg);
        let labels: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
        let target = train::batch_target_for(loss, &labels, data.classes);
        (x, target)
    };
    let mut rng = StreamRng::new(seed, 0xD1);
    let mut resampled = Vec::new();
    for _ in 0..200 {
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.next_below(data.train_len())).collect();
        resampled.push(batch_of(&idx));
    }

    // Measure mid-training; at a raw init the gradient is still aligned
    // with the activations, which exaggerates how far batchnorm noise
    // travels downstream.
    let mut warm = StreamRng::new(seed, 0xD2);
    for step in 0..48u64 {
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| warm.next_below(data.train_len())).collect();
        let (wx, wt) = batch_of(&idx);
        exec.set_step(step);
        let y = exec.forward_fp(&wx).unwrap();
        let g = loss.grad(&y, &wt).unwrap();
        exec.backward(&g).unwrap();
        exec.sgd_step(cfg.lr).unwrap();
    }

    let bits = 2u8;
    // Per-source variances averaged over several batches, since the joint
    // measurement below redraws the batch too.
    let v_batches = 8usize;
    let mut source_layers: Vec<usize> = Vec::new();
    let mut per_source: Vec<Vec<f64>> = Vec::new();
    for b in 0..v_batches {
        let (bx, bt) = &resampled[b];
        let m = profile::quantization_noise_matrix(&mut exec, bx, &loss, bt, bits, 150).unwrap();
        if per_source.is_empty() {
            source_layers = m.source_layers.clone();
            per_source = vec![vec![0.0; n_layers]; m.rows.len()];
        }
        for (i, row) in m.rows.iter().enumerate() {
            for l in 0..n_layers {
                per_source[i][l] += row.per_layer[l] / v_batches as f64;
            }
        }
    }
    let sampling = profile::sampling_variance(&mut exec, &resampled, &loss).unwrap();

    // Joint measurement: every layer compressed and the batch redrawn each
    // trial, so the total carries both noise sources at once.
    let modes = quantized_modes(&exec, bits);
    let joint_trials = 800usize;
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut sq_sums = vec![0.0f64; n_layers];
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for t in 0..joint_trials {
        let (bx, btarget) = &resampled[t % resampled.len()];
        exec.set_step(1000 + t as u64);
        let y = exec.forward(bx, &modes).unwrap();
        let g = loss.grad(&y, btarget).unwrap();
        exec.backward(&g).unwrap();
        for l in 0..n_layers {
            let flat = exec.layer_grad_flat(l);
            if means[l].is_empty() {
                means[l] = vec![0.0; flat.len()];
                sums[l] = vec![0.0; flat.len()];
            }
            for (i, &v) in flat.iter().enumerate() {
                let v = f64::from(v);
                sums[l][i] += v;
                sq_sums[l] += v * v;
            }
        }
    }
    let joint: Vec<f64> = (0..n_layers)
        .map(|l| {
            let n = joint_trials as f64;
            let mean_sq: f64 = sums[l].iter().map(|s| (s / n) * (s / n)).sum();
            (sq_sums[l] / n - mean_sq).max(0.0)
        })
        .collect();

    let mut summary = Vec::new();
    for l in 0..n_layers {
        let from_sources: f64 =
            per_source.iter().map(|row| row[l]).sum::<f64>() + sampling.per_layer[l];
        let rel = (from_sources - joint[l]).abs() / joint[l];
        assert!(
            rel <= DECOMP_REL_TOL,
            "acceptance 8: FAIL (layer {l}: summed terms {from_sources:.4e} vs \
             joint {joint:.4e}, off by {:.1}%)",
            rel * 100.0,
            joint = joint[l]
        );
        summary.push(format!("layer {l} {:.1}%", rel * 100.0));
    }

    let mut worst_dominance = f64::INFINITY;
    for (i, &m) in source_layers.iter().enumerate() {
        let own = per_source[i][m];
        let leaked: f64 = source_layers
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, _)| per_source[j][m])
            .sum();
        assert!(
            own >= DIAGONAL_DOMINANCE * leaked,
            "acceptance 8: FAIL (layer {m}: own-source variance {own:.4e} vs \
             {leaked:.4e} leaked from other layers)"
        );
        if leaked > 0.0 {
            worst_dominance = worst_dominance.min(own / leaked);
        }
    }
    let dominance = if worst_dominance.is_finite() {
        format!("{worst_dominance:.1}x")
    } else {
        "no measurable leak".to_string()
    };
    println!(
        "acceptance 8: PASS (decomposition error {}; worst own-to-leaked ratio {dominance}, \
         {DIAGONAL_DOMINANCE}x required)",
        summary.join(", ")
    );
}

#[test]
fn acceptance_09_bit_exact_format() {
    let mut rng = StreamRng::new(53, 0xE1);
    let mut widths_seen = BTreeSet::new();
    for i in 0..FORMAT_TENSORS {
        let samples = 1 + rng.next_below(4);
        let d = 1 + rng.next_below(40);
        let group = 1 + rng.next_below(d + 4);
        let constant = i % 7 == 0;
        let data: Vec<f32> = (0..samples * d)
            .map(|_| if constant { 0.75 } else { (rng.next_unit() * 4.0 - 2.0) as f32 })
            .collect();
        let x = Tensor::new(vec![samples, d], data).unwrap();
        let bits: Vec<u8> = (0..samples).map(|n| ((i + n) % 8) as u8 + 1).collect();
        widths_seen.extend(bits.iter().copied());

        let pack =
            quantize_tensor(&x, &bits, group, &QuantRng::new(53), i as u64, 0, 0).unwrap();
        let bytes = pack.serialize();
        let back = PackedActivation::deserialize(&bytes)
            .unwrap_or_else(|e| panic!("acceptance 9: FAIL (tensor {i} failed to parse: {e})"));
        assert_eq!(
            back.serialize(),
            bytes,
            "acceptance 9: FAIL (tensor {i} re-serialized differently)"
        );
        assert_eq!(
            back.dequantize().unwrap().data(),
            pack.dequantize().unwrap().data(),
            "acceptance 9: FAIL (tensor {i} decoded differently after the round trip)"
        );
    }
    assert_eq!(widths_seen.len(), 8, "acceptance 9: FAIL (not all widths exercised)");

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let mut golden_files = 0;
    for entry in std::fs::read_dir(&golden).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        let pack = PackedActivation::deserialize(&bytes).unwrap_or_else(|e| {
            panic!("acceptance 9: FAIL (golden {} failed to parse: {e})", path.display())
        });
        assert_eq!(
            pack.serialize(),
            bytes,
            "acceptance 9: FAIL (golden {} re-serialized differently)",
            path.display()
        );
        golden_files += 1;
    }
    assert!(golden_files >= 3, "acceptance 9: FAIL (only {golden_files} golden files)");
    println!(
        "acceptance 9: PASS ({FORMAT_TENSORS} round trips over widths 1-8, \
         {golden_files} golden buffers stable)"
    );
}

#[test]
fn acceptance_10_determinism() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.conf");
    std::fs::write(
        &cfg_path,
        "model = linear:32:16, relu, linear:16:4\ndataset = synthetic:256:32:4\n\
         batch_size = 32\nepochs = 2\nlr = 0.05\nseed = 5\n\
         level = L3\nbits = 2\nvariance_every = 5\n",
    )
    .unwrap();

    let run = |tag: &str, threads: Option<&str>| {
        let out_path = dir.path().join(format!("{tag}.csv"));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_packgrad"));
        cmd.args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        if let Some(n) = threads {
            cmd.env("RAYON_NUM_THREADS", n);
        }
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "acceptance 10: FAIL (run {tag}: {})",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(&out_path).unwrap()
    };

    let first = run("first", None);
    let second = run("second", None);
    let serial = run("serial", Some("1"));
    let wide = run("wide", Some("4"));
    assert_eq!(first, second, "acceptance 10: FAIL (repeat run differed)");
    assert_eq!(first, serial, "acceptance 10: FAIL (single-threaded run differed)");
    assert_eq!(first, wide, "acceptance 10: FAIL (4-thread run differed)");
    println!(
        "acceptance 10: PASS ({} byte metrics identical across reruns and 1/4 threads)",
        first.len()
    );
}
