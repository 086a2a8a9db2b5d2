//! Bit-width allocation across layers and samples.
//!
//! The objective being minimized is the summed quantization variance proxy
//! `sum w / (2^b - 1)^2` subject to a total bit budget, with every width in
//! 1..=8. The workhorse is a greedy heap solver that starts everything at 8
//! bits and repeatedly takes back the cheapest bit; a dynamic-programming
//! solver provides exact answers on small instances so the greedy can be
//! held to account in tests.

use crate::{Error, Result};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

pub const BIT_MIN: u8 = 1;
pub const BIT_MAX: u8 = 8;

/// One joint allocation instance. `w[l][n]` weighs layer `l`, sample `n`;
/// `dims[l]` is the per-sample element count of layer `l`, which is what a
/// width unit costs there.
#[derive(Debug, Clone)]
pub struct AllocProblem {
    pub w: Vec<Vec<f64>>,
    pub dims: Vec<u64>,
    pub budget: u64,
}

impl AllocProblem {
    fn validate(&self) -> Result<()> {
        if self.w.len() != self.dims.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weight rows", self.dims.len()),
                got: format!("{}", self.w.len()),
            });
        }
        for (l, row) in self.w.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::BadArgument { what: "w", detail: format!("layer {l} has no samples") });
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::BadArgument {
                    what: "w",
                    detail: format!("layer {l} has invalid weight {v}"),
                });
            }
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::BadArgument { what: "dims", detail: "zero-dimensional layer".into() });
        }
        let need = self.min_cost();
        if need > self.budget {
            return Err(Error::Infeasible { need, budget: self.budget });
        }
        Ok(())
    }

    fn min_cost(&self) -> u64 {
        self.w
            .iter()
            .zip(&self.dims)
            .map(|(row, &d)| row.len() as u64 * d * u64::from(BIT_MIN))
            .sum()
    }

    fn max_cost(&self) -> u64 {
        self.w
            .iter()
            .zip(&self.dims)
            .map(|(row, &d)| row.len() as u64 * d * u64::from(BIT_MAX))
            .sum()
    }
}

/// Variance proxy of one assignment: `sum w / (2^b - 1)^2`.
pub fn objective(w: &[Vec<f64>], bits: &[Vec<u8>]) -> f64 {
    w.iter()
        .zip(bits)
        .flat_map(|(wr, br)| wr.iter().zip(br))
        .map(|(&wv, &b)| wv / levels_sq(b))
        .sum()
}

fn levels_sq(bits: u8) -> f64 {
    let lv = f64::from((1u32 << bits) - 1);
    lv * lv
}

/// Extra variance incurred by dropping one entry from `bits` to `bits - 1`.
fn step_cost(w: f64, bits: u8) -> f64 {
    w * (1.0 / levels_sq(bits - 1) - 1.0 / levels_sq(bits))
}

#[derive(Debug, PartialEq)]
struct Move {
    priority: f64,
    layer: u32,
    sample: u32,
    from: u8,
}

impl Eq for Move {}

impl Ord for Move {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| self.layer.cmp(&other.layer))
            .then_with(|| self.sample.cmp(&other.sample))
            .then_with(|| self.from.cmp(&other.from))
    }
}

impl PartialOrd for Move {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy descent from all-8-bit. Each round removes the bit whose loss of
/// precision costs the least variance; with `normalize` set (the default
/// policy) the cost is divided by the bits freed, so wide layers are not
/// unfairly spared. Ties break toward the lowest (layer, sample). Unequal
/// layer costs can make the final removal overshoot the budget; a refill
/// pass then spends the leftover units back, largest variance saving first.
/// A closing exchange pass funds one more bit on a heavy entry by taking
/// cheaper bits elsewhere whenever that lowers the objective, which covers
/// budget splits no sequence of single moves reaches.
pub fn greedy(p: &AllocProblem, normalize: bool) -> Result<Vec<Vec<u8>>> {
    p.validate()?;
    let mut bits: Vec<Vec<u8>> = p.w.iter().map(|row| vec![BIT_MAX; row.len()]).collect();
    let mut consumed = p.max_cost();
    if consumed <= p.budget {
        return Ok(bits);
    }
    let mut heap: BinaryHeap<Reverse<Move>> = BinaryHeap::new();
    let make = |l: usize, n: usize, from: u8| {
        let cost = step_cost(p.w[l][n], from);
        Reverse(Move {
            priority: if normalize { cost / p.dims[l] as f64 } else { cost },
            layer: l as u32,
            sample: n as u32,
            from,
        })
    };
    for (l, row) in p.w.iter().enumerate() {
        for n in 0..row.len() {
            heap.push(make(l, n, BIT_MAX));
        }
    }
    while consumed > p.budget {
        let Some(Reverse(mv)) = heap.pop() else {
            return Err(Error::Infeasible { need: consumed, budget: p.budget });
        };
        let (l, n) = (mv.layer as usize, mv.sample as usize);
        bits[l][n] = mv.from - 1;
        consumed -= p.dims[l];
        if mv.from - 1 > BIT_MIN {
            heap.push(make(l, n, mv.from - 1));
        }
    }

    let mut slack = p.budget - consumed;
    if slack > 0 {
        let regain = |l: usize, n: usize, at: u8| {
            let g = step_cost(p.w[l][n], at + 1);
            Move {
                priority: if normalize { g / p.dims[l] as f64 } else { g },
                layer: l as u32,
                sample: n as u32,
                from: at,
            }
        };
        let mut back: BinaryHeap<Move> = BinaryHeap::new();
        for (l, row) in bits.iter().enumerate() {
            for (n, &b) in row.iter().enumerate() {
                if b < BIT_MAX && p.dims[l] <= slack {
                    back.push(regain(l, n, b));
                }
            }
        }
        while slack > 0 {
            let Some(mv) = back.pop() else { break };
            let (l, n) = (mv.layer as usize, mv.sample as usize);
            if p.dims[l] > slack {
                continue;
            }
            bits[l][n] = mv.from + 1;
            slack -= p.dims[l];
            if bits[l][n] < BIT_MAX && p.dims[l] <= slack {
                back.push(regain(l, n, bits[l][n]));
            }
        }
    }

    let entries: usize = bits.iter().map(Vec::len).sum();
    for _ in 0..entries * 8 {
        let mut best: Option<(f64, usize, usize, Vec<(usize, usize)>)> = None;
        for (l, row) in bits.iter().enumerate() {
            for (n, &b) in row.iter().enumerate() {
                if b == BIT_MAX {
                    continue;
                }
                let gain = step_cost(p.w[l][n], b + 1);
                let need = p.dims[l].saturating_sub(slack);
                let Some((loss, funding)) = cheapest_funding(p, &bits, (l, n), need) else {
                    continue;
                };
                let net = gain - loss;
                if net > 1e-12 * gain.max(1.0) && best.as_ref().is_none_or(|t| net > t.0) {
                    best = Some((net, l, n, funding));
                }
            }
        }
        let Some((_, l, n, funding)) = best else { break };
        let mut freed = slack;
        for &(ll, nn) in &funding {
            bits[ll][nn] -= 1;
            freed += p.dims[ll];
        }
        bits[l][n] += 1;
        slack = freed - p.dims[l];
    }
    Ok(bits)
}

/// One candidate width reduction inside a funding search: lowering entry
/// `(l, n)` from `from` to `from - 1` frees `dims` units at `cost` extra
/// variance.
#[derive(Debug, Clone, Copy)]
struct FundStep {
    per_unit: f64,
    cost: f64,
    dims: u64,
    l: usize,
    n: usize,
    from: u8,
}

/// Cheapest set of width reductions freeing at least `need` units without
/// touching `skip`. Steps are taken cheapest-per-unit first, then the pick
/// is repaired: reductions whose units turned out unnecessary are dropped,
/// and the most expensive one is swapped for a cheaper same-coverage step
/// while that lowers the total. Entries may be lowered several widths; the
/// returned list repeats an entry once per width taken.
fn cheapest_funding(
    p: &AllocProblem,
    bits: &[Vec<u8>],
    skip: (usize, usize),
    need: u64,
) -> Option<(f64, Vec<(usize, usize)>)> {
    if need == 0 {
        return Some((0.0, Vec::new()));
    }
    let mut pool: Vec<FundStep> = Vec::new();
    for (l, row) in bits.iter().enumerate() {
        for (n, &b) in row.iter().enumerate() {
            if (l, n) == skip {
                continue;
            }
            for from in (BIT_MIN + 1..=b).rev() {
                let cost = step_cost(p.w[l][n], from);
                pool.push(FundStep {
                    per_unit: cost / p.dims[l] as f64,
                    cost,
                    dims: p.dims[l],
                    l,
                    n,
                    from,
                });
            }
        }
    }
    // Per-entry costs grow as the width drops, so this order visits every
    // entry's shallow steps before its deeper ones.
    pool.sort_by(|a, b| {
        a.per_unit.total_cmp(&b.per_unit).then(a.l.cmp(&b.l)).then(a.n.cmp(&b.n))
    });
    let mut taken: Vec<bool> = vec![false; pool.len()];
    let mut freed = 0u64;
    let mut loss = 0.0;
    for (i, s) in pool.iter().enumerate() {
        if freed >= need {
            break;
        }
        taken[i] = true;
        freed += s.dims;
        loss += s.cost;
    }
    if freed < need {
        return None;
    }

    // A taken step is a tail when it is its entry's deepest taken width, the
    // only position where it can be undone on its own.
    let tails = |taken: &[bool]| -> Vec<usize> {
        let mut deepest: Vec<(usize, usize, u8)> = Vec::new();
        for (i, s) in pool.iter().enumerate() {
            if !taken[i] {
                continue;
            }
            match deepest.iter_mut().find(|(l, n, _)| (*l, *n) == (s.l, s.n)) {
                Some(e) if s.from < e.2 => e.2 = s.from,
                Some(_) => {}
                None => deepest.push((s.l, s.n, s.from)),
            }
        }
        pool.iter()
            .enumerate()
            .filter(|(i, s)| taken[*i] && deepest.contains(&(s.l, s.n, s.from)))
            .map(|(i, _)| i)
            .collect()
    };

    loop {
        let mut dropped = false;
        loop {
            let t = tails(&taken)
                .into_iter()
                .filter(|&i| freed - pool[i].dims >= need)
                .max_by(|&a, &b| pool[a].cost.total_cmp(&pool[b].cost));
            let Some(i) = t else { break };
            taken[i] = false;
            freed -= pool[i].dims;
            loss -= pool[i].cost;
            dropped = true;
        }
        let Some(worst) = tails(&taken)
            .into_iter()
            .max_by(|&a, &b| pool[a].cost.total_cmp(&pool[b].cost))
        else {
            break;
        };
        let short = need - (freed - pool[worst].dims);
        let next_untaken = |l: usize, n: usize| -> Option<usize> {
            pool.iter().enumerate().position(|(i, s)| !taken[i] && (s.l, s.n) == (l, n))
        };
        let mut swap: Option<usize> = None;
        for (l, row) in bits.iter().enumerate() {
            for n in 0..row.len() {
                if (l, n) == skip || (l, n) == (pool[worst].l, pool[worst].n) {
                    continue;
                }
                let Some(c) = next_untaken(l, n) else { continue };
                if pool[c].dims >= short
                    && pool[c].cost < pool[worst].cost
                    && swap.is_none_or(|s| pool[c].cost < pool[s].cost)
                {
                    swap = Some(c);
                }
            }
        }
        let Some(c) = swap else {
            if dropped {
                continue;
            }
            break;
        };
        taken[worst] = false;
        taken[c] = true;
        freed = freed - pool[worst].dims + pool[c].dims;
        loss = loss - pool[worst].cost + pool[c].cost;
    }

    let list = pool
        .iter()
        .enumerate()
        .filter(|(i, _)| taken[*i])
        .map(|(_, s)| (s.l, s.n))
        .collect();
    Some((loss, list))
}

/// Exact solver by dynamic programming over the budget. Only for small
/// instances; the table is `entries x budget` wide.
pub fn exact(p: &AllocProblem) -> Result<Vec<Vec<u8>>> {
    p.validate()?;
    let budget = p.budget.min(p.max_cost());
    let entries: Vec<(usize, usize)> = p
        .w
        .iter()
        .enumerate()
        .flat_map(|(l, row)| (0..row.len()).map(move |n| (l, n)))
        .collect();
    if budget > 100_000 || entries.len() as u64 * (budget + 1) > 20_000_000 {
        return Err(Error::BadArgument {
            what: "budget",
            detail: format!(
                "instance too large for the exact solver: {} entries x {} budget states",
                entries.len(),
                budget + 1
            ),
        });
    }
    let states = (budget + 1) as usize;
    // best[r] = minimal objective for the remaining entries given r budget
    // left; sweep entries from the back so the choice table lines up.
    let mut best = vec![f64::INFINITY; states];
    let mut next = vec![f64::INFINITY; states];
    let mut choice = vec![vec![0u8; states]; entries.len()];
    for r in 0..states {
        best[r] = 0.0;
    }
    for (e, &(l, n)) in entries.iter().enumerate().rev() {
        let d = p.dims[l] as usize;
        let wv = p.w[l][n];
        for r in 0..states {
            let mut bv = f64::INFINITY;
            let mut bb = 0u8;
            for b in BIT_MIN..=BIT_MAX {
                let cost = d * b as usize;
                if cost > r {
                    break;
                }
                let v = wv / levels_sq(b) + best[r - cost];
                if v < bv {
                    bv = v;
                    bb = b;
                }
            }
            next[r] = bv;
            choice[e][r] = bb;
        }
        std::mem::swap(&mut best, &mut next);
    }
    if !best[states - 1].is_finite() {
        return Err(Error::Infeasible { need: p.min_cost(), budget: p.budget });
    }
    let mut bits: Vec<Vec<u8>> = p.w.iter().map(|row| vec![0u8; row.len()]).collect();
    let mut r = states - 1;
    for (e, &(l, n)) in entries.iter().enumerate() {
        let b = choice[e][r];
        debug_assert!(b >= BIT_MIN);
        bits[l][n] = b;
        r -= p.dims[l] as usize * b as usize;
    }
    Ok(bits)
}

/// Stage-one helper: allocate widths across the samples of a single layer,
/// where every width unit costs the same. `budget` is in per-sample width
/// units (so `2 * n` means a 2-bit average).
pub fn allocate_row(w: &[f64], budget: u64) -> Result<Vec<u8>> {
    let p = AllocProblem { w: vec![w.to_vec()], dims: vec![1], budget };
    Ok(greedy(&p, true)?.remove(0))
}

/// How gradient magnitudes are guessed at compress time, before the true
/// backward gradients exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Remember each sample's gradient norm from the previous epoch.
    Stale,
    /// One exponential moving average per layer, shared by all samples.
    Moving,
}

/// Per-layer gradient magnitude estimates, fed by observations from each
/// backward pass. Unseen samples and fresh averages report 1.0.
#[derive(Debug)]
pub struct GradMagEstimator {
    mode: EstimatorMode,
    decay: f64,
    layers: Vec<LayerEstimate>,
}

#[derive(Debug, Default)]
struct LayerEstimate {
    average: Option<f64>,
    prev_epoch: std::collections::HashMap<u64, f64>,
    this_epoch: std::collections::HashMap<u64, f64>,
}

impl GradMagEstimator {
    pub fn new(mode: EstimatorMode, decay: f64, layers: usize) -> Result<GradMagEstimator> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::BadArgument {
                what: "decay",
                detail: format!("must be in [0, 1), got {decay}"),
            });
        }
        Ok(GradMagEstimator {
            mode,
            decay,
            layers: (0..layers).map(|_| LayerEstimate::default()).collect(),
        })
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    /// Estimates for the given dataset sample ids at one layer.
    pub fn estimate(&self, layer: usize, ids: &[u64]) -> Vec<f64> {
        let le = &self.layers[layer];
        match self.mode {
            EstimatorMode::Moving => vec![le.average.unwrap_or(1.0); ids.len()],
            EstimatorMode::Stale => {
                ids.iter().map(|id| le.prev_epoch.get(id).copied().unwrap_or(1.0)).collect()
            }
        }
    }

    /// Feeds back observed squared gradient norms for one batch.
    pub fn observe(&mut self, layer: usize, ids: &[u64], grad_sq: &[f64]) {
        debug_assert_eq!(ids.len(), grad_sq.len());
        let le = &mut self.layers[layer];
        match self.mode {
            EstimatorMode::Moving => {
                let mean = grad_sq.iter().sum::<f64>() / grad_sq.len().max(1) as f64;
                let old = le.average.unwrap_or(1.0);
                le.average = Some(self.decay * old + (1.0 - self.decay) * mean);
            }
            EstimatorMode::Stale => {
                for (id, &g) in ids.iter().zip(grad_sq) {
                    le.this_epoch.insert(*id, g);
                }
            }
        }
    }

    /// Rolls the stale store over: what was recorded this epoch becomes
    /// what next epoch's estimates read.
    pub fn end_epoch(&mut self) {
        for le in &mut self.layers {
            if !le.this_epoch.is_empty() {
                le.prev_epoch = std::mem::take(&mut le.this_epoch);
            }
        }
    }
}
