//! Counter-based random number generation.
//!
//! Quantization draws are pure functions of (seed, step, layer, group,
//! element), so results do not depend on evaluation order or on how work is
//! split across threads, and any draw can be reproduced in isolation.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from splitmix64; decorrelates consecutive counters.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn absorb(key: u64, field: u64) -> u64 {
    mix(key.wrapping_add(GAMMA).wrapping_add(field))
}

/// Root generator for one training run.
#[derive(Debug, Clone, Copy)]
pub struct QuantRng {
    seed: u64,
}

impl QuantRng {
    pub fn new(seed: u64) -> QuantRng {
        QuantRng { seed }
    }

    /// Draw source for one quantization group. `copy` distinguishes
    /// independent quantizations of the same data (the two-copy batchnorm
    /// mode); everything else passes 0.
    pub fn group(&self, step: u64, layer: u32, group: u64, copy: u32) -> GroupDraws {
        let mut k = absorb(self.seed, step);
        k = absorb(k, (u64::from(layer) << 32) | u64::from(copy));
        k = absorb(k, group);
        GroupDraws { key: k }
    }
}

/// Uniform draws for the elements of a single group.
#[derive(Debug, Clone, Copy)]
pub struct GroupDraws {
    key: u64,
}

impl GroupDraws {
    /// Uniform value in [0, 1) for element `i`, independent across `i`.
    pub fn unit(&self, i: usize) -> f32 {
        let bits = mix(self.key.wrapping_add((i as u64).wrapping_mul(GAMMA)));
        ((bits >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
    }
}

/// Sequential seeded stream for everything that is not a quantization draw:
/// weight initialization, synthetic data, shuffling. Deterministic for a
/// given seed, but order-dependent by design.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, domain: u64) -> StreamRng {
        StreamRng { key: absorb(absorb(seed, domain), 0x5eed), counter: 0, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_unit() * n as f64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = loop {
            let u = self.next_unit();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}
