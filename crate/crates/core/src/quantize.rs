//! Per-group stochastic quantization of saved activations.
//!
//! A tensor is split per sample into contiguous groups of `group_size`
//! elements (the last group of a sample may be shorter). Each group stores
//! its range and minimum as bfloat16, rounded outward so the stored
//! interval covers every element, plus one code per element. Codes are
//! produced by stochastic rounding, so the dequantized group is an unbiased
//! estimate of the original values; the stored range/minimum are used on
//! both sides of the round trip, which is what keeps the estimate centered.
//!
//! Wire format (little-endian): magic `ACTN`, version byte, group size u32,
//! sample count u32, elements-per-sample u32, one width byte per sample,
//! then per group range and minimum as bfloat16, then the code payload
//! packed LSB-first with no padding between samples.

use crate::rng::{GroupDraws, QuantRng};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rayon::prelude::*;

pub const MAGIC: [u8; 4] = *b"ACTN";
pub const VERSION: u8 = 0x01;

/// Largest bfloat16 value not above `x`.
#[inline]
pub fn bf16_floor(x: f32) -> f32 {
    let t = f32::from_bits(x.to_bits() & 0xFFFF_0000);
    if t > x { f32::from_bits(t.to_bits() + (1 << 16)) } else { t }
}

/// Smallest bfloat16 value not below `x`.
#[inline]
pub fn bf16_ceil(x: f32) -> f32 {
    let t = f32::from_bits(x.to_bits() & 0xFFFF_0000);
    if t < x { f32::from_bits(t.to_bits() + (1 << 16)) } else { t }
}

/// Range and offset of one quantized group, both bfloat16-representable.
/// `zero` sits at or below the group minimum and `zero + range` at or above
/// the maximum, so every element lands inside the code grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMeta {
    pub range: f32,
    pub zero: f32,
}

fn check_width(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::BadArgument {
            what: "bits",
            detail: format!("width must be in 1..=8, got {bits}"),
        });
    }
    Ok(())
}

/// Appends fixed-width codes to a byte stream, low bit first.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    fill: u32,
}

impl BitWriter {
    pub fn new() -> BitWriter {
        BitWriter::default()
    }

    pub fn push(&mut self, code: u8, width: u8) {
        debug_assert!((1..=8).contains(&width));
        debug_assert!(width == 8 || code < (1 << width));
        self.acc |= u64::from(code) << self.fill;
        self.fill += u32::from(width);
        while self.fill >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.fill -= 8;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bytes.len() as u64 * 8 + u64::from(self.fill)
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.fill > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

/// Reads fixed-width codes back out of a byte stream.
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    fill: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> BitReader<'a> {
        BitReader { bytes, pos: 0, acc: 0, fill: 0 }
    }

    pub fn read(&mut self, width: u8) -> Result<u8> {
        debug_assert!((1..=8).contains(&width));
        while self.fill < u32::from(width) {
            let Some(&b) = self.bytes.get(self.pos) else {
                return Err(Error::Corrupt {
                    offset: self.pos,
                    what: "code stream ends mid-read".into(),
                });
            };
            self.acc |= u64::from(b) << self.fill;
            self.pos += 1;
            self.fill += 8;
        }
        let v = (self.acc & ((1u64 << width) - 1)) as u8;
        self.acc >>= width;
        self.fill -= u32::from(width);
        Ok(v)
    }
}

/// Packs `codes` at `bits` per code into the minimal number of bytes.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_width(bits)?;
    let mut w = BitWriter::new();
    for (i, &c) in codes.iter().enumerate() {
        if bits < 8 && c >= (1 << bits) {
            return Err(Error::BadArgument {
                what: "codes",
                detail: format!("code {c} at index {i} does not fit in {bits} bits"),
            });
        }
        w.push(c, bits);
    }
    Ok(w.finish())
}

/// Exact inverse of [`pack_codes`]: the byte length must match `count`.
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_width(bits)?;
    let need = (count as u64 * u64::from(bits)).div_ceil(8) as usize;
    if bytes.len() != need {
        return Err(Error::Corrupt {
            offset: bytes.len().min(need),
            what: format!("expected {need} bytes for {count} codes at {bits} bits, got {}", bytes.len()),
        });
    }
    let mut r = BitReader::new(bytes);
    (0..count).map(|_| r.read(bits)).collect()
}

/// Quantizes one group against externally supplied metadata. `meta` must
/// hold bfloat16-representable values; scaled values falling outside [0, B]
/// are clamped to the nearest code.
pub fn quantize_group_with(
    values: &[f32],
    meta: GroupMeta,
    bits: u8,
    draws: &GroupDraws,
) -> Result<Vec<u8>> {
    check_width(bits)?;
    if meta.range == 0.0 {
        return Ok(vec![0; values.len()]);
    }
    let levels = ((1u32 << bits) - 1) as f32;
    let scale = levels / meta.range;
    let codes = values
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let u = ((h - meta.zero) * scale).clamp(0.0, levels);
            let floor = u.floor();
            let frac = u - floor;
            floor as u8 + u8::from(draws.unit(i) < frac)
        })
        .collect();
    Ok(codes)
}

/// Measures the group's bounds, rounds them outward to bfloat16, and
/// quantizes with stochastic rounding. Constant groups at a representable
/// value come back as all-zero codes with `range == 0`.
pub fn quantize_group(values: &[f32], bits: u8, draws: &GroupDraws) -> Result<(Vec<u8>, GroupMeta)> {
    check_width(bits)?;
    if values.is_empty() {
        return Err(Error::BadArgument { what: "values", detail: "empty group".into() });
    }
    let (mut lo, mut hi) = (values[0], values[0]);
    for &v in &values[1..] {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi - lo).is_finite() {
        return Err(Error::Degenerate { what: format!("group range {} overflows f32", hi - lo) });
    }
    let zero = bf16_floor(lo);
    let range = bf16_ceil(hi - zero);
    if !zero.is_finite() || !range.is_finite() {
        return Err(Error::Degenerate {
            what: format!("group bounds [{lo}, {hi}] overflow bfloat16"),
        });
    }
    let meta = GroupMeta { range, zero };
    let codes = quantize_group_with(values, meta, bits, draws)?;
    Ok((codes, meta))
}

/// Reconstructs one group: `code * range / levels + zero`.
pub fn dequantize_group(codes: &[u8], meta: GroupMeta, bits: u8, out: &mut [f32]) {
    debug_assert_eq!(codes.len(), out.len());
    let levels = ((1u32 << bits) - 1) as f32;
    let step = meta.range / levels;
    for (o, &c) in out.iter_mut().zip(codes) {
        *o = f32::from(c) * step + meta.zero;
    }
}

/// Exact per-group ranges of a tensor, before any bfloat16 truncation.
/// `sq_norms[n]` is the sum of squared group ranges of sample `n`, the
/// quantity the sensitivity formulas consume.
#[derive(Debug, Clone)]
pub struct RangeStats {
    pub group_size: usize,
    pub ranges: Vec<Vec<f32>>,
    pub sq_norms: Vec<f64>,
}

pub fn measure_group_ranges(x: &Tensor, group_size: usize) -> Result<RangeStats> {
    if group_size == 0 {
        return Err(Error::BadArgument { what: "group_size", detail: "must be positive".into() });
    }
    let n = x.samples();
    let d = x.sample_len();
    if n == 0 || d == 0 {
        return Err(Error::ShapeMismatch {
            expected: "non-empty batch".into(),
            got: format!("{:?}", x.shape()),
        });
    }
    let mut ranges = Vec::with_capacity(n);
    let mut sq_norms = Vec::with_capacity(n);
    for s in 0..n {
        let row = &x.data()[s * d..(s + 1) * d];
        let mut rs = Vec::with_capacity(d.div_ceil(group_size));
        let mut sq = 0.0f64;
        for g in row.chunks(group_size) {
            let (mut lo, mut hi) = (g[0], g[0]);
            for &v in &g[1..] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let r = hi - lo;
            rs.push(r);
            sq += f64::from(r) * f64::from(r);
        }
        ranges.push(rs);
        sq_norms.push(sq);
    }
    Ok(RangeStats { group_size, ranges, sq_norms })
}

/// A tensor stored as per-group quantized codes plus group metadata.
///
/// Payload bits are exactly `sum(bits[n] * elements_per_sample)`; metadata
/// costs 32 bits per group on top of that.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedActivation {
    group_size: usize,
    shape: Vec<usize>,
    bits: Vec<u8>,
    metas: Vec<GroupMeta>,
    payload: Vec<u8>,
}

impl PackedActivation {
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits_per_sample(&self) -> &[u8] {
        &self.bits
    }

    pub fn metas(&self) -> &[GroupMeta] {
        &self.metas
    }

    pub fn samples(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn groups_per_sample(&self) -> usize {
        self.sample_len().div_ceil(self.group_size)
    }

    pub fn payload_bits(&self) -> u64 {
        let d = self.sample_len() as u64;
        self.bits.iter().map(|&b| u64::from(b) * d).sum()
    }

    pub fn metadata_bits(&self) -> u64 {
        self.metas.len() as u64 * 32
    }
}

/// Quantizes `x` sample by sample at `bits[n]` bits per element. The RNG is
/// keyed by `(step, layer, global group index)`, so the result is the same
/// no matter how the per-group work is scheduled.
pub fn quantize_tensor(
    x: &Tensor,
    bits: &[u8],
    group_size: usize,
    rng: &QuantRng,
    step: u64,
    layer: u32,
    copy: u32,
) -> Result<PackedActivation> {
    if group_size == 0 {
        return Err(Error::BadArgument { what: "group_size", detail: "must be positive".into() });
    }
    let n = x.samples();
    let d = x.sample_len();
    if n == 0 || d == 0 {
        return Err(Error::ShapeMismatch {
            expected: "non-empty batch".into(),
            got: format!("{:?}", x.shape()),
        });
    }
    if bits.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} per-sample widths"),
            got: format!("{}", bits.len()),
        });
    }
    for &b in bits {
        check_width(b)?;
    }
    let gps = d.div_ceil(group_size);
    let per_sample: Vec<Vec<(Vec<u8>, GroupMeta)>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let row = &x.data()[s * d..(s + 1) * d];
            row.chunks(group_size)
                .enumerate()
                .map(|(g, chunk)| {
                    let draws = rng.group(step, layer, (s * gps + g) as u64, copy);
                    quantize_group(chunk, bits[s], &draws)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut metas = Vec::with_capacity(n * gps);
    let mut w = BitWriter::new();
    for (s, groups) in per_sample.iter().enumerate() {
        for (codes, meta) in groups {
            metas.push(*meta);
            for &c in codes {
                w.push(c, bits[s]);
            }
        }
    }
    Ok(PackedActivation {
        group_size,
        shape: x.shape().to_vec(),
        bits: bits.to_vec(),
        metas,
        payload: w.finish(),
    })
}

impl PackedActivation {
    /// Reconstructs the stored tensor. Deterministic; all randomness lives
    /// on the quantize side.
    pub fn dequantize(&self) -> Result<Tensor> {
        let n = self.samples();
        let d = self.sample_len();
        let gps = self.groups_per_sample();
        let mut out = vec![0.0f32; n * d];
        let mut r = BitReader::new(&self.payload);
        let mut codes = vec![0u8; self.group_size];
        for s in 0..n {
            let row = &mut out[s * d..(s + 1) * d];
            for (g, chunk) in row.chunks_mut(self.group_size).enumerate() {
                for c in codes[..chunk.len()].iter_mut() {
                    *c = r.read(self.bits[s])?;
                }
                dequantize_group(&codes[..chunk.len()], self.metas[s * gps + g], self.bits[s], chunk);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let n = self.samples();
        let d = self.sample_len();
        let mut out = Vec::with_capacity(18 + n + self.metas.len() * 4 + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.bits);
        for m in &self.metas {
            out.extend_from_slice(&((m.range.to_bits() >> 16) as u16).to_le_bytes());
            out.extend_from_slice(&((m.zero.to_bits() >> 16) as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a serialized context. The original multi-axis shape is not
    /// stored, so the result always comes back as `[samples, elements]`.
    pub fn deserialize(bytes: &[u8]) -> Result<PackedActivation> {
        fn take<'a>(bytes: &'a [u8], offset: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
            let end = offset.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Corrupt {
                offset: bytes.len(),
                what: format!("truncated while reading {what}"),
            })?;
            let s = &bytes[*offset..end];
            *offset = end;
            Ok(s)
        }
        fn read_u32(bytes: &[u8], offset: &mut usize, what: &str) -> Result<u32> {
            let s = take(bytes, offset, 4, what)?;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        }

        let mut off = 0;
        let magic = take(bytes, &mut off, 4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Corrupt { offset: 0, what: format!("bad magic {magic:02x?}") });
        }
        let version = take(bytes, &mut off, 1, "version")?[0];
        if version != VERSION {
            return Err(Error::Corrupt { offset: 4, what: format!("unsupported version {version}") });
        }
        let group_size = read_u32(bytes, &mut off, "group size")? as usize;
        let n = read_u32(bytes, &mut off, "sample count")? as usize;
        let d = read_u32(bytes, &mut off, "elements per sample")? as usize;
        if group_size == 0 || n == 0 || d == 0 {
            return Err(Error::Corrupt {
                offset: 5,
                what: format!("degenerate dimensions g={group_size} n={n} d={d}"),
            });
        }
        let bits_off = off;
        let bits = take(bytes, &mut off, n, "per-sample widths")?.to_vec();
        for (i, &b) in bits.iter().enumerate() {
            if !(1..=8).contains(&b) {
                return Err(Error::Corrupt {
                    offset: bits_off + i,
                    what: format!("width {b} out of range"),
                });
            }
        }
        let gps = d.div_ceil(group_size);
        let mut metas = Vec::with_capacity(n * gps);
        for i in 0..n * gps {
            let at = off;
            let raw = take(bytes, &mut off, 4, "group metadata")?;
            let range = f32::from_bits(u32::from(u16::from_le_bytes([raw[0], raw[1]])) << 16);
            let zero = f32::from_bits(u32::from(u16::from_le_bytes([raw[2], raw[3]])) << 16);
            if !range.is_finite() || !zero.is_finite() || range < 0.0 {
                return Err(Error::Corrupt {
                    offset: at,
                    what: format!("invalid group {i} metadata range={range} zero={zero}"),
                });
            }
            metas.push(GroupMeta { range, zero });
        }
        let payload_bits: u64 = bits.iter().map(|&b| u64::from(b) * d as u64).sum();
        let payload_len = payload_bits.div_ceil(8) as usize;
        let payload_off = off;
        let payload = take(bytes, &mut off, payload_len, "payload")?.to_vec();
        if off != bytes.len() {
            return Err(Error::Corrupt {
                offset: off,
                what: format!("{} trailing bytes", bytes.len() - off),
            });
        }
        let tail = payload_bits % 8;
        if tail != 0 {
            let last = payload[payload_len - 1];
            if last >> tail != 0 {
                return Err(Error::Corrupt {
                    offset: payload_off + payload_len - 1,
                    what: "nonzero padding bits in final payload byte".into(),
                });
            }
        }
        Ok(PackedActivation { group_size, shape: vec![n, d], bits, metas, payload })
    }
}
