//! Compression-level policy: which saved contexts get quantized, at what
//! widths, and how the per-layer bit budgets evolve between steps.

use packgrad::alloc::{self, AllocProblem, GradMagEstimator};
use packgrad::graph::GraphExecutor;
use packgrad::layers::{BitsChoice, Layer, SaveMode};

use crate::config::{run_err, CliError, Level};

/// Stage-one budgets: every compressible layer starts with the same
/// `bits * batch` allowance, in per-sample width units. Non-compressible
/// layers carry zero.
pub fn initial_budgets(bits: f64, batch: usize, layers: &[Layer]) -> Vec<u64> {
    layers
        .iter()
        .map(|l| if l.compressible() { (bits * batch as f64).floor() as u64 } else { 0 })
        .collect()
}

/// Per-layer save modes for one step.
pub fn save_modes(
    level: Level,
    bits: f64,
    layers: &[Layer],
    budgets: &[u64],
    estimator: &GradMagEstimator,
    ids: &[u64],
) -> Vec<SaveMode> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| match level {
            Level::L0 => SaveMode::Full,
            Level::L1 => {
                if matches!(l, Layer::Conv2d(_)) {
                    SaveMode::Quantized(BitsChoice::Uniform(4))
                } else {
                    SaveMode::Full
                }
            }
            Level::L2 => {
                if l.compressible() {
                    SaveMode::Quantized(BitsChoice::Uniform(bits as u8))
                } else {
                    SaveMode::Full
                }
            }
            Level::L2_5 | Level::L3 => {
                if l.compressible() {
                    SaveMode::Quantized(BitsChoice::Budget {
                        total: budgets[i],
                        grad_sq: estimator.estimate(i, ids),
                    })
                } else {
                    SaveMode::Full
                }
            }
        })
        .collect()
}

/// Outcome of one cross-layer reallocation.
pub struct Restage {
    /// Next step's per-layer budgets, in per-sample width units.
    pub budgets: Vec<u64>,
    /// Element-weighted bits the joint solution actually uses.
    pub spent: u64,
    /// Element-weighted ceiling it had to stay under.
    pub ceiling: u64,
}

/// Re-solves the width allocation across all compressible layers at once,
/// using the sensitivities the finished backward pass just measured. The
/// row totals of the joint solution become the per-layer stage-one budgets
/// for the next step.
pub fn restage(bits: f64, exec: &GraphExecutor) -> Result<Restage, CliError> {
    let grad_sq = exec.out_grad_sq();
    let mut entries = Vec::new();
    let mut w = Vec::new();
    let mut dims = Vec::new();
    for (i, layer) in exec.layers().iter().enumerate() {
        if !layer.compressible() {
            continue;
        }
        let Some(rec) = layer.forward_record() else { continue };
        w.push(layer.sensitivity(&rec.range_sq, &grad_sq[i]));
        dims.push(rec.dim as u64);
        entries.push(i);
    }
    if entries.is_empty() {
        return Err(run_err(packgrad::Error::BadArgument {
            what: "restage",
            detail: "no compressible layer has a forward record".into(),
        }));
    }
    let batch = w[0].len() as u64;
    let ceiling = (bits * dims.iter().map(|&d| (d * batch) as f64).sum::<f64>()).floor() as u64;
    let p = AllocProblem { w, dims: dims.clone(), budget: ceiling };
    let sol = alloc::greedy(&p, true).map_err(run_err)?;
    let spent = sol
        .iter()
        .zip(&dims)
        .map(|(row, &d)| d * row.iter().map(|&b| u64::from(b)).sum::<u64>())
        .sum();
    let mut budgets = vec![0u64; exec.layers().len()];
    for (slot, &i) in entries.iter().enumerate() {
        budgets[i] = sol[slot].iter().map(|&b| u64::from(b)).sum();
    }
    Ok(Restage { budgets, spent, ceiling })
}
