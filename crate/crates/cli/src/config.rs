//! Run configuration: a flat `key = value` file plus command-line overrides.
//!
//! Recognized keys (one per line, `#` starts a comment):
//!
//! ```text
//! model         = conv:1:8:3:1:1, bn:8, relu, maxpool:2, linear:128:10
//! dataset       = synthetic:1000:64:4 | idx:images:labels | csv:path
//! loss          = ce | mse
//! level         = L0 | L1 | L2 | L2.5 | L3
//! bits          = average bits per element, in [1, 8]
//! group_size    = elements per quantization group
//! lr            = SGD learning rate
//! epochs        = passes over the training set
//! batch_size    = samples per step (a ragged final batch is dropped)
//! seed          = master seed for init, data, shuffling and rounding
//! estimator     = stale | ema
//! ema_decay     = decay of the ema gradient estimator, in [0, 1)
//! eval_fraction = held-out fraction, in [0, 1)
//! variance_every  = log a gradient-variance snapshot every k steps (0 = off)
//! variance_trials = Monte-Carlo trials per variance estimate
//! variance_point  = where in training `sweep` measures variance, in [0, 1]
//! sweep_bits    = comma list of bit widths for `sweep`
//! sweep_levels  = comma list of levels for `sweep`
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use packgrad::alloc::EstimatorMode;
use packgrad::layers::{AvgPool2d, BatchNorm, Conv2d, Layer, Linear, MaxPool2d, Relu};
use packgrad::loss::Loss;
use packgrad::rng::StreamRng;

use crate::domains;

/// What went wrong, mapped to the process exit code at the top level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailKind {
    /// Unusable configuration or flags (exit 2).
    Config,
    /// Unreadable or malformed dataset (exit 3).
    Data,
    /// Failure while executing an otherwise valid job (exit 1).
    Run,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: FailKind,
    pub msg: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.msg)
    }
}

impl std::error::Error for CliError {}

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError { kind: FailKind::Config, msg: msg.into() }
}

pub fn data_err(msg: impl Into<String>) -> CliError {
    CliError { kind: FailKind::Data, msg: msg.into() }
}

pub fn run_err(e: packgrad::Error) -> CliError {
    CliError { kind: FailKind::Run, msg: e.to_string() }
}

/// How much of the network stores compressed contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// Everything full precision.
    L0,
    /// Convolution inputs at a fixed 4 bits, everything else full.
    L1,
    /// Every compressible context at one uniform width.
    L2,
    /// Per-sample widths, allocated within each layer's own budget.
    L2_5,
    /// Per-sample widths with the budget itself reallocated across
    /// layers after every step.
    L3,
}

impl Level {
    pub fn parse(s: &str) -> Result<Level, CliError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L0" => Ok(Level::L0),
            "L1" => Ok(Level::L1),
            "L2" => Ok(Level::L2),
            "L2.5" => Ok(Level::L2_5),
            "L3" => Ok(Level::L3),
            other => Err(config_err(format!(
                "unknown level {other:?} (expected L0, L1, L2, L2.5 or L3)"
            ))),
        }
    }

    /// Whether the `bits` setting applies at this level.
    pub fn uses_bits(self) -> bool {
        matches!(self, Level::L2 | Level::L2_5 | Level::L3)
    }

    /// Whether fractional average widths are meaningful at this level.
    pub fn fractional_ok(self) -> bool {
        matches!(self, Level::L2_5 | Level::L3)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::L0 => "L0",
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L2_5 => "L2.5",
            Level::L3 => "L3",
        };
        write!(f, "{s}")
    }
}

/// One item of the `model =` list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { d_in: usize, d_out: usize },
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, groups: usize },
    Relu,
    BatchNorm { channels: usize, two_copy: bool },
    MaxPool { k: usize, stride: usize },
    AvgPool { k: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Channel/height/width each flat sample is reshaped to before the
    /// first layer; absent for models that take flat vectors.
    pub input: Option<[usize; 3]>,
    pub layers: Vec<LayerSpec>,
}

fn num(item: &str, what: &str, v: &str) -> Result<usize, CliError> {
    v.parse::<usize>()
        .map_err(|_| config_err(format!("{item:?}: {what} must be a non-negative integer, got {v:?}")))
}

fn parse_model(text: &str) -> Result<ModelSpec, CliError> {
    let mut input = None;
    let mut layers = Vec::new();
    for (i, raw) in text.split(',').enumerate() {
        let item = raw.trim();
        if item.is_empty() {
            return Err(config_err("model: empty item in the layer list"));
        }
        let mut parts = item.split(':');
        let head = parts.next().unwrap();
        let args: Vec<&str> = parts.collect();
        let argc = |lo: usize, hi: usize| -> Result<(), CliError> {
            if args.len() < lo || args.len() > hi {
                let want = if lo == hi {
                    format!("{lo}")
                } else {
                    format!("{lo} to {hi}")
                };
                return Err(config_err(format!(
                    "{item:?}: {head} takes {want} arguments, got {}",
                    args.len()
                )));
            }
            Ok(())
        };
        match head {
            "input" => {
                if i != 0 {
                    return Err(config_err("model: input:CxHxW must be the first item"));
                }
                argc(1, 1)?;
                let dims: Vec<&str> = args[0].split('x').collect();
                if dims.len() != 3 {
                    return Err(config_err(format!("{item:?}: expected input:CxHxW")));
                }
                let c = num(item, "channels", dims[0])?;
                let h = num(item, "height", dims[1])?;
                let w = num(item, "width", dims[2])?;
                if c * h * w == 0 {
                    return Err(config_err(format!("{item:?}: input shape must be non-empty")));
                }
                input = Some([c, h, w]);
            }
            "linear" => {
                argc(2, 2)?;
                layers.push(LayerSpec::Linear {
                    d_in: num(item, "d_in", args[0])?,
                    d_out: num(item, "d_out", args[1])?,
                });
            }
            "conv" => {
                argc(3, 6)?;
                layers.push(LayerSpec::Conv {
                    c_in: num(item, "c_in", args[0])?,
                    c_out: num(item, "c_out", args[1])?,
                    k: num(item, "kernel", args[2])?,
                    stride: args.get(3).map_or(Ok(1), |v| num(item, "stride", v))?,
                    pad: args.get(4).map_or(Ok(0), |v| num(item, "pad", v))?,
                    groups: args.get(5).map_or(Ok(1), |v| num(item, "groups", v))?,
                });
            }
            "relu" => {
                argc(0, 0)?;
                layers.push(LayerSpec::Relu);
            }
            "bn" => {
                argc(1, 2)?;
                let two_copy = match args.get(1) {
                    None => false,
                    Some(&"two") => true,
                    Some(other) => {
                        return Err(config_err(format!(
                            "{item:?}: bn modifier {other:?} not recognized (only `two`)"
                        )))
                    }
                };
                layers.push(LayerSpec::BatchNorm {
                    channels: num(item, "channels", args[0])?,
                    two_copy,
                });
            }
            "maxpool" | "avgpool" => {
                argc(1, 2)?;
                let k = num(item, "kernel", args[0])?;
                let stride = args.get(1).map_or(Ok(k), |v| num(item, "stride", v))?;
                if head == "maxpool" {
                    layers.push(LayerSpec::MaxPool { k, stride });
                } else {
                    layers.push(LayerSpec::AvgPool { k, stride });
                }
            }
            other => {
                return Err(config_err(format!("model: unknown layer kind {other:?}")));
            }
        }
    }
    if layers.is_empty() {
        return Err(config_err("model: at least one layer is required"));
    }
    Ok(ModelSpec { input, layers })
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    /// Seeded Gaussian mixture: `synthetic:samples:dims:classes`.
    Synthetic { samples: usize, dims: usize, classes: usize },
    /// IDX image/label file pair: `idx:images_path:labels_path`.
    Idx { images: String, labels: String },
    /// Comma-separated features with an integer label last: `csv:path`.
    Csv { path: String },
}

fn parse_dataset(text: &str) -> Result<DatasetSpec, CliError> {
    let item = text.trim();
    let (head, rest) = item.split_once(':').unwrap_or((item, ""));
    match head {
        "synthetic" => {
            let args: Vec<&str> = rest.split(':').collect();
            if args.len() != 3 {
                return Err(config_err(format!(
                    "{item:?}: expected synthetic:samples:dims:classes"
                )));
            }
            let samples = num(item, "samples", args[0])?;
            let dims = num(item, "dims", args[1])?;
            let classes = num(item, "classes", args[2])?;
            if samples == 0 || dims == 0 || classes == 0 {
                return Err(config_err(format!("{item:?}: all counts must be positive")));
            }
            Ok(DatasetSpec::Synthetic { samples, dims, classes })
        }
        "idx" => {
            let Some((images, labels)) = rest.split_once(':') else {
                return Err(config_err(format!("{item:?}: expected idx:images_path:labels_path")));
            };
            if images.is_empty() || labels.is_empty() {
                return Err(config_err(format!("{item:?}: both paths must be non-empty")));
            }
            Ok(DatasetSpec::Idx { images: images.to_string(), labels: labels.to_string() })
        }
        "csv" => {
            if rest.is_empty() {
                return Err(config_err(format!("{item:?}: expected csv:path")));
            }
            Ok(DatasetSpec::Csv { path: rest.to_string() })
        }
        other => Err(config_err(format!("dataset: unknown source {other:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub loss: Loss,
    pub level: Level,
    pub bits: f64,
    pub group_size: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub estimator: EstimatorMode,
    pub ema_decay: f64,
    pub eval_fraction: f64,
    pub variance_every: usize,
    pub variance_trials: u32,
    pub variance_point: f64,
    pub sweep_bits: Vec<f64>,
    pub sweep_levels: Vec<Level>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse::<T>().map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_str(text: &str) -> Result<TrainConfig, CliError> {
    let mut model = None;
    let mut dataset = None;
    let mut loss = Loss::SoftmaxCrossEntropy;
    let mut level = Level::L0;
    let mut bits = 2.0f64;
    let mut group_size = 256usize;
    let mut lr = 0.1f32;
    let mut epochs = 1usize;
    let mut batch_size = 32usize;
    let mut seed = 0u64;
    let mut estimator = EstimatorMode::Stale;
    let mut ema_decay = 0.9f64;
    let mut eval_fraction = 0.2f64;
    let mut variance_every = 0usize;
    let mut variance_trials = 30u32;
    let mut variance_point = 1.0f64;
    let mut sweep_bits = vec![1.0, 2.0, 4.0, 8.0];
    let mut sweep_levels = vec![Level::L2, Level::L3];
    let mut seen = std::collections::HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let Some((k, v)) = line.split_once('=') else {
            return Err(config_err(format!("line {lineno}: expected `key = value`")));
        };
        let key = k.trim();
        let val = v.trim();
        if !seen.insert(key.to_string()) {
            return Err(config_err(format!("line {lineno}: duplicate key {key:?}")));
        }
        match key {
            "model" => model = Some(parse_model(val)?),
            "dataset" => dataset = Some(parse_dataset(val)?),
            "loss" => {
                loss = match val {
                    "ce" => Loss::SoftmaxCrossEntropy,
                    "mse" => Loss::MeanSquared,
                    other => {
                        return Err(config_err(format!("loss: {other:?} is not ce or mse")))
                    }
                }
            }
            "level" => level = Level::parse(val)?,
            "bits" => bits = parse_value(key, val)?,
            "group_size" => group_size = parse_value(key, val)?,
            "lr" => lr = parse_value(key, val)?,
            "epochs" => epochs = parse_value(key, val)?,
            "batch_size" => batch_size = parse_value(key, val)?,
            "seed" => seed = parse_value(key, val)?,
            "estimator" => estimator = parse_estimator(val)?,
            "ema_decay" => ema_decay = parse_value(key, val)?,
            "eval_fraction" => eval_fraction = parse_value(key, val)?,
            "variance_every" => variance_every = parse_value(key, val)?,
            "variance_trials" => variance_trials = parse_value(key, val)?,
            "variance_point" => variance_point = parse_value(key, val)?,
            "sweep_bits" => {
                sweep_bits = val
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "sweep_levels" => {
                sweep_levels =
                    val.split(',').map(|s| Level::parse(s)).collect::<Result<_, _>>()?
            }
            other => {
                return Err(config_err(format!("line {lineno}: unknown key {other:?}")));
            }
        }
    }

    let cfg = TrainConfig {
        model: model.ok_or_else(|| config_err("missing required key `model`"))?,
        dataset: dataset.ok_or_else(|| config_err("missing required key `dataset`"))?,
        loss,
        level,
        bits,
        group_size,
        lr,
        epochs,
        batch_size,
        seed,
        estimator,
        ema_decay,
        eval_fraction,
        variance_every,
        variance_trials,
        variance_point,
        sweep_bits,
        sweep_levels,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_file(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_str(&text)
}

pub fn parse_estimator(s: &str) -> Result<EstimatorMode, CliError> {
    match s.trim() {
        "stale" => Ok(EstimatorMode::Stale),
        "ema" => Ok(EstimatorMode::Moving),
        other => Err(config_err(format!("estimator: {other:?} is not stale or ema"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let check_bits = |b: f64, level: Level| -> Result<(), CliError> {
            if !(1.0..=8.0).contains(&b) {
                return Err(config_err(format!("bits: {b} outside [1, 8]")));
            }
            if level.uses_bits() && !level.fractional_ok() && b.fract() != 0.0 {
                return Err(config_err(format!(
                    "bits: {level} needs a whole number of bits; fractional averages need L2.5 or L3"
                )));
            }
            Ok(())
        };
        check_bits(self.bits, self.level)?;
        if self.group_size == 0 {
            return Err(config_err("group_size: must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size: must be positive"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs: must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err(format!("lr: {} is not a positive finite number", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err(format!("ema_decay: {} outside [0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(config_err(format!(
                "eval_fraction: {} outside [0, 1)",
                self.eval_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.variance_point) {
            return Err(config_err(format!(
                "variance_point: {} outside [0, 1]",
                self.variance_point
            )));
        }
        if self.variance_trials < 2 {
            return Err(config_err("variance_trials: at least 2 trials are needed"));
        }
        if self.sweep_bits.is_empty() || self.sweep_levels.is_empty() {
            return Err(config_err("sweep_bits and sweep_levels must be non-empty"));
        }
        for &level in &self.sweep_levels {
            for &b in &self.sweep_bits {
                if level.uses_bits() {
                    check_bits(b, level).map_err(|e| {
                        config_err(format!("sweep_bits: {}", e.msg))
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub level: Option<Level>,
    pub bits: Option<f64>,
    pub group_size: Option<usize>,
    pub seed: Option<u64>,
    pub estimator: Option<EstimatorMode>,
    pub ema_decay: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<(), CliError> {
        if let Some(v) = self.level {
            cfg.level = v;
        }
        if let Some(v) = self.bits {
            cfg.bits = v;
        }
        if let Some(v) = self.group_size {
            cfg.group_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.estimator {
            cfg.estimator = v;
        }
        if let Some(v) = self.ema_decay {
            cfg.ema_decay = v;
        }
        cfg.validate()
    }
}

/// Instantiates the layer list with seeded parameter init.
pub fn build_net(spec: &ModelSpec, seed: u64) -> Result<Vec<Layer>, CliError> {
    let mut rng = StreamRng::new(seed, domains::INIT);
    let mut out = Vec::with_capacity(spec.layers.len());
    for ls in &spec.layers {
        let layer = match *ls {
            LayerSpec::Linear { d_in, d_out } => {
                if d_in == 0 || d_out == 0 {
                    return Err(config_err("linear: dimensions must be positive"));
                }
                Layer::Linear(Linear::new(d_in, d_out, &mut rng))
            }
            LayerSpec::Conv { c_in, c_out, k, stride, pad, groups } => {
                if k == 0 || stride == 0 {
                    return Err(config_err("conv: kernel and stride must be positive"));
                }
                let conv = Conv2d::new(c_in, c_out, k, stride, pad, groups, &mut rng)
                    .map_err(|e| config_err(format!("conv: {e}")))?;
                Layer::Conv2d(conv)
            }
            LayerSpec::Relu => Layer::Relu(Relu::new()),
            LayerSpec::BatchNorm { channels, two_copy } => {
                if channels == 0 {
                    return Err(config_err("bn: channels must be positive"));
                }
                let mut bn = BatchNorm::new(channels);
                bn.set_two_copy(two_copy);
                Layer::BatchNorm(bn)
            }
            LayerSpec::MaxPool { k, stride } => {
                let pool = MaxPool2d::new((k, k), Some((stride, stride)))
                    .map_err(|e| config_err(format!("maxpool: {e}")))?;
                Layer::MaxPool2d(pool)
            }
            LayerSpec::AvgPool { k, stride } => {
                let pool = AvgPool2d::new((k, k), Some((stride, stride)))
                    .map_err(|e| config_err(format!("avgpool: {e}")))?;
                Layer::AvgPool2d(pool)
            }
        };
        out.push(layer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model = linear:4:2\ndataset = synthetic:16:4:2\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_str(MINIMAL).unwrap();
        assert_eq!(cfg.level, Level::L0);
        assert_eq!(cfg.group_size, 256);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.model.layers.len(), 1);
        assert!(cfg.model.input.is_none());
    }

    #[test]
    fn full_model_grammar_round_trips() {
        let cfg = parse_str(
            "model = input:1x8x8, conv:1:8:3:1:1, bn:8:two, relu, maxpool:2, avgpool:2:1, linear:72:4\n\
             dataset = synthetic:64:64:4\n",
        )
        .unwrap();
        assert_eq!(cfg.model.input, Some([1, 8, 8]));
        assert_eq!(
            cfg.model.layers[0],
            LayerSpec::Conv { c_in: 1, c_out: 8, k: 3, stride: 1, pad: 1, groups: 1 }
        );
        assert_eq!(cfg.model.layers[1], LayerSpec::BatchNorm { channels: 8, two_copy: true });
        assert_eq!(cfg.model.layers[3], LayerSpec::MaxPool { k: 2, stride: 2 });
        assert_eq!(cfg.model.layers[4], LayerSpec::AvgPool { k: 2, stride: 1 });
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_str(&format!("# header\n\n{MINIMAL}seed = 9 # trailing\n")).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_str(&format!("{MINIMAL}momentum = 0.9\n")).unwrap_err();
        assert_eq!(err.kind, FailKind::Config);
        assert!(err.msg.contains("momentum"), "{}", err.msg);
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_str(&format!("{MINIMAL}seed = 1\nseed = 2\n")).unwrap_err();
        assert!(err.msg.contains("duplicate"), "{}", err.msg);
    }

    #[test]
    fn fractional_bits_need_an_allocating_level() {
        let err = parse_str(&format!("{MINIMAL}level = L2\nbits = 2.5\n")).unwrap_err();
        assert!(err.msg.contains("L2.5 or L3"), "{}", err.msg);
        parse_str(&format!("{MINIMAL}level = L2.5\nbits = 2.5\n")).unwrap();
    }

    #[test]
    fn bits_outside_the_width_range_fail() {
        assert!(parse_str(&format!("{MINIMAL}bits = 0.5\n")).is_err());
        assert!(parse_str(&format!("{MINIMAL}bits = 9\n")).is_err());
    }

    #[test]
    fn dataset_grammar_covers_all_sources() {
        let s = parse_dataset("synthetic:100:8:3").unwrap();
        assert_eq!(s, DatasetSpec::Synthetic { samples: 100, dims: 8, classes: 3 });
        let s = parse_dataset("idx:data/images.idx:data/labels.idx").unwrap();
        assert_eq!(
            s,
            DatasetSpec::Idx {
                images: "data/images.idx".into(),
                labels: "data/labels.idx".into()
            }
        );
        let s = parse_dataset("csv:runs/table.csv").unwrap();
        assert_eq!(s, DatasetSpec::Csv { path: "runs/table.csv".into() });
        assert!(parse_dataset("parquet:x").is_err());
    }

    #[test]
    fn overrides_take_precedence_and_revalidate() {
        let mut cfg = parse_str(MINIMAL).unwrap();
        let o = Overrides { level: Some(Level::L2), bits: Some(3.0), ..Overrides::default() };
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.level, Level::L2);
        let bad = Overrides { bits: Some(2.5), ..Overrides::default() };
        assert!(bad.apply(&mut cfg).is_err());
    }

    #[test]
    fn build_net_is_seed_deterministic() {
        let spec = parse_model("linear:6:3, relu, linear:3:2").unwrap();
        let a = build_net(&spec, 5).unwrap();
        let b = build_net(&spec, 5).unwrap();
        let (pa, pb) = (a[0].params(), b[0].params());
        assert_eq!(pa[0].data(), pb[0].data());
        let c = build_net(&spec, 6).unwrap();
        assert_ne!(a[0].params()[0].data(), c[0].params()[0].data());
    }

    #[test]
    fn bad_conv_grouping_is_a_config_error() {
        let spec = parse_model("conv:3:4:3:1:1:2").unwrap();
        let err = build_net(&spec, 0).unwrap_err();
        assert_eq!(err.kind, FailKind::Config);
    }
}
