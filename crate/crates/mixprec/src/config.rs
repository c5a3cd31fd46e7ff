//! Flat `key = value` experiment configuration.
//!
//! Keys use dotted section prefixes (`model.layers`, `train.epochs`, ...).
//! A file is parsed into [`Settings`], overrides are layered on top, and the
//! result is interpreted as an [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use mixprec_core::assign::DemotionOrder;
use mixprec_core::engine::TrainConfig;
use mixprec_core::fpnum::FpFormat;
use mixprec_core::graph::{LayerSpec, OpKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {message}")]
    Value { key: String, message: String },
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "model.input_shape",
    "model.layers",
    "data.kind",
    "data.n",
    "data.dim",
    "data.classes",
    "data.spread",
    "data.noise",
    "data.seed",
    "data.path",
    "data.label_column",
    "scheme.kind",
    "scheme.r",
    "scheme.order",
    "scheme.force_weight_grads_hi",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.theta",
    "train.loss_scale_init",
    "train.growth_factor",
    "train.backoff_factor",
    "train.growth_interval",
    "train.seed",
    "sweep.repeats",
    "sweep.r_values",
    "sweep.schemes",
    "output.dir",
];

/// Raw key/value pairs, later entries overriding earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut settings = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Malformed { line: i + 1 })?;
            settings.set(key.trim(), value.trim())?;
        }
        Ok(settings)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| bad(assignment, "expected key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| bad(key, format!("`{v}`: {e}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Gaussian clusters around uniformly drawn centers.
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        spread: f64,
        seed: u64,
    },
    /// Two interleaving half circles.
    Moons { n: usize, noise: f64, seed: u64 },
    /// Headered numeric CSV; `seed` drives the train/eval split.
    Csv {
        path: PathBuf,
        label_column: String,
        seed: u64,
    },
}

/// A precision assignment scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Fp32,
    Unif,
    Op,
    OpPrime,
    Ours { r: f64, order: OrderKind },
    OursNoPromo { r: f64, order: OrderKind },
}

/// Demotion order; the random order is seeded with the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderKind {
    Decreasing,
    Increasing,
    Random,
}

impl OrderKind {
    pub fn with_seed(self, seed: u64) -> DemotionOrder {
        match self {
            OrderKind::Decreasing => DemotionOrder::Decreasing,
            OrderKind::Increasing => DemotionOrder::Increasing,
            OrderKind::Random => DemotionOrder::Random { seed },
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "decreasing" => Some(OrderKind::Decreasing),
            "increasing" => Some(OrderKind::Increasing),
            "random" => Some(OrderKind::Random),
            _ => None,
        }
    }
}

impl Scheme {
    /// Parses a scheme name, taking `r` and `order` for the demotion schemes.
    pub fn parse(kind: &str, r: f64, order: OrderKind) -> Option<Self> {
        Some(match kind {
            "fp32" => Scheme::Fp32,
            "unif" => Scheme::Unif,
            "op" => Scheme::Op,
            "op_prime" => Scheme::OpPrime,
            "ours" => Scheme::Ours { r, order },
            "ours_no_promo" => Scheme::OursNoPromo { r, order },
            _ => return None,
        })
    }

    /// Label used in tables, e.g. `ours`, `ours_no_promo`, `ours@increasing`.
    pub fn label(&self) -> String {
        let with_order = |base: &str, order: &OrderKind| match order {
            OrderKind::Decreasing => base.to_string(),
            OrderKind::Increasing => format!("{base}@increasing"),
            OrderKind::Random => format!("{base}@random"),
        };
        match self {
            Scheme::Fp32 => "fp32".into(),
            Scheme::Unif => "unif".into(),
            Scheme::Op => "op".into(),
            Scheme::OpPrime => "op_prime".into(),
            Scheme::Ours { order, .. } => with_order("ours", order),
            Scheme::OursNoPromo { order, .. } => with_order("ours_no_promo", order),
        }
    }

    /// The demotion target, for the schemes that have one.
    pub fn ratio(&self) -> Option<f64> {
        match self {
            Scheme::Ours { r, .. } | Scheme::OursNoPromo { r, .. } => Some(*r),
            _ => None,
        }
    }

    pub fn with_ratio(self, r: f64) -> Self {
        match self {
            Scheme::Ours { order, .. } => Scheme::Ours { r, order },
            Scheme::OursNoPromo { order, .. } => Scheme::OursNoPromo { r, order },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub dataset: DatasetSpec,
    pub scheme: Scheme,
    /// Keep every weight gradient in high precision.
    pub force_weight_grads_hi: bool,
    pub train: TrainConfig,
    pub sweep_repeats: usize,
    pub sweep_r_values: Vec<f64>,
    pub sweep_schemes: Vec<Scheme>,
    pub output_dir: PathBuf,
}

pub const DEFAULT_LAYERS: &str =
    "conv2d(out=4,kernel=3,padding=1); relu; conv2d(out=8,kernel=3,stride=2,padding=1); relu; gap; dense(out=3); softmax_ce";

/// `0.0, 0.1, ..., 1.0`.
pub fn deciles() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(|v| v.trim().parse().map_err(|e| bad(key, format!("`{v}`: {e}"))))
        .collect()
}

fn parse_layer(item: &str) -> Result<LayerSpec, String> {
    let (name, args) = match item.split_once('(') {
        Some((name, rest)) => {
            let args = rest
                .strip_suffix(')')
                .ok_or_else(|| format!("`{item}`: missing `)`"))?;
            (name.trim(), args)
        }
        None => (item.trim(), ""),
    };
    let mut named = BTreeMap::new();
    for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| format!("`{item}`: argument `{arg}` is not key=value"))?;
        named.insert(k.trim(), v.trim());
    }
    let from = named
        .remove("from")
        .map(|v| {
            v.split('|')
                .map(|a| a.trim().parse::<usize>().map_err(|e| format!("`{item}`: from: {e}")))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let mut int = |k: &str, default: Option<usize>| -> Result<usize, String> {
        match named.remove(k) {
            Some(v) => v.parse().map_err(|e| format!("`{item}`: {k}: {e}")),
            None => default.ok_or_else(|| format!("`{item}`: missing `{k}`")),
        }
    };
    let kind = match name {
        "dense" => OpKind::Dense { out: int("out", None)? },
        "conv2d" => OpKind::Conv2d {
            out_channels: int("out", None)?,
            kernel: int("kernel", None)?,
            stride: int("stride", Some(1))?,
            padding: int("padding", Some(0))?,
        },
        "split" => OpKind::Split {
            offset: int("offset", None)?,
            len: int("len", None)?,
        },
        "relu" => OpKind::Relu,
        "gap" | "global_avg_pool" => OpKind::GlobalAvgPool,
        "softmax_ce" => OpKind::SoftmaxCrossEntropy,
        "add" => OpKind::Add,
        "reduce_sum" => OpKind::ReduceSum,
        "scale" | "abs_loss" => {
            let key = if name == "scale" { "factor" } else { "scale" };
            let v: f64 = named
                .remove(key)
                .ok_or_else(|| format!("`{item}`: missing `{key}`"))?
                .parse()
                .map_err(|e| format!("`{item}`: {key}: {e}"))?;
            if name == "scale" {
                OpKind::Scale { factor: v }
            } else {
                OpKind::AbsLoss { scale: v }
            }
        }
        other => return Err(format!("unknown layer `{other}`")),
    };
    if let Some(k) = named.keys().next() {
        return Err(format!("`{item}`: unexpected argument `{k}`"));
    }
    Ok(match from {
        Some(from) => LayerSpec::reading(kind, from),
        None => LayerSpec::new(kind),
    })
}

/// Parses `layer; layer; ...`.
pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|item| !item.is_empty())
        .map(parse_layer)
        .collect()
}

impl ExperimentConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let input_shape = parse_list("model.input_shape", s.get("model.input_shape").unwrap_or("1,4,4"))?;
        let layers = parse_layers(s.get("model.layers").unwrap_or(DEFAULT_LAYERS))
            .map_err(|m| bad("model.layers", m))?;

        let data_seed = s.parsed("data.seed", 7u64)?;
        let dataset = match s.get("data.kind").unwrap_or("blobs") {
            "blobs" => DatasetSpec::Blobs {
                n: s.parsed("data.n", 400)?,
                dim: s.parsed("data.dim", input_shape.iter().product())?,
                classes: s.parsed("data.classes", 3)?,
                spread: s.parsed("data.spread", 3.0)?,
                seed: data_seed,
            },
            "moons" => DatasetSpec::Moons {
                n: s.parsed("data.n", 400)?,
                noise: s.parsed("data.noise", 0.1)?,
                seed: data_seed,
            },
            "csv" => DatasetSpec::Csv {
                path: PathBuf::from(
                    s.get("data.path")
                        .ok_or_else(|| bad("data.path", "required for csv data"))?,
                ),
                label_column: s.get("data.label_column").unwrap_or("label").to_string(),
                seed: data_seed,
            },
            other => return Err(bad("data.kind", format!("unknown dataset `{other}`"))),
        };

        let order_name = s.get("scheme.order").unwrap_or("decreasing");
        let order = OrderKind::parse(order_name)
            .ok_or_else(|| bad("scheme.order", format!("unknown order `{order_name}`")))?;
        let r: f64 = s.parsed("scheme.r", 0.5)?;
        if !(0.0..=1.0).contains(&r) {
            return Err(bad("scheme.r", "must lie in [0, 1]"));
        }
        let scheme_name = s.get("scheme.kind").unwrap_or("ours");
        let scheme = Scheme::parse(scheme_name, r, order)
            .ok_or_else(|| bad("scheme.kind", format!("unknown scheme `{scheme_name}`")))?;
        let sweep_schemes = match s.get("sweep.schemes") {
            None => vec![scheme],
            Some(list) => list
                .split(',')
                .map(|name| {
                    Scheme::parse(name.trim(), r, order)
                        .ok_or_else(|| bad("sweep.schemes", format!("unknown scheme `{name}`")))
                })
                .collect::<Result<_, _>>()?,
        };
        let sweep_r_values = match s.get("sweep.r_values") {
            None | Some("deciles") => deciles(),
            Some(list) => parse_list("sweep.r_values", list)?,
        };
        if sweep_r_values.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(bad("sweep.r_values", "values must lie in [0, 1]"));
        }

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: s.parsed("train.epochs", 20)?,
            batch_size: s.parsed("train.batch_size", defaults.batch_size)?,
            learning_rate: s.parsed("train.learning_rate", defaults.learning_rate)?,
            theta: s.parsed("train.theta", defaults.theta)?,
            loss_scale_init: s.parsed("train.loss_scale_init", defaults.loss_scale_init)?,
            growth_factor: s.parsed("train.growth_factor", defaults.growth_factor)?,
            backoff_factor: s.parsed("train.backoff_factor", defaults.backoff_factor)?,
            growth_interval: s.parsed("train.growth_interval", defaults.growth_interval)?,
            seed: s.parsed("train.seed", 0)?,
            master_format: FpFormat::FP32,
            ..defaults
        };
        train.validate().map_err(|e| bad("train", e.to_string()))?;

        let sweep_repeats = s.parsed("sweep.repeats", 4)?;
        if sweep_repeats == 0 {
            return Err(bad("sweep.repeats", "must be at least 1"));
        }
        Ok(ExperimentConfig {
            input_shape,
            layers,
            dataset,
            scheme,
            force_weight_grads_hi: s.parsed("scheme.force_weight_grads_hi", true)?,
            train,
            sweep_repeats,
            sweep_r_values,
            sweep_schemes,
            output_dir: PathBuf::from(s.get("output.dir").unwrap_or("out")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_comments() {
        let s = Settings::parse(
            "# model\nmodel.input_shape = 4\nmodel.layers = dense(out=8); relu; dense(out=2); softmax_ce\n\ntrain.epochs = 3 # short\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_settings(&s).unwrap();
        assert_eq!(cfg.input_shape, vec![4]);
        assert_eq!(cfg.layers.len(), 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.layers[0].kind, OpKind::Dense { out: 8 });
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(
            Settings::parse("a\n"),
            Err(ConfigError::Malformed { line: 1 })
        ));
        assert!(matches!(
            Settings::parse("model.width = 3"),
            Err(ConfigError::UnknownKey(_))
        ));
        let s = Settings::parse("train.epochs = many").unwrap();
        let err = ExperimentConfig::from_settings(&s).unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
        let s = Settings::parse("scheme.r = 1.5").unwrap();
        assert!(ExperimentConfig::from_settings(&s).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut s = Settings::parse("train.seed = 1").unwrap();
        s.apply("train.seed=9").unwrap();
        assert_eq!(ExperimentConfig::from_settings(&s).unwrap().train.seed, 9);
    }

    #[test]
    fn layer_syntax() {
        let layers = parse_layers("conv2d(out=4, kernel=3, padding=1); relu; add(from=2|3); gap").unwrap();
        assert_eq!(
            layers[0].kind,
            OpKind::Conv2d {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1
            }
        );
        assert_eq!(layers[2].from, Some(vec![2, 3]));
        assert!(parse_layers("dense").is_err());
        assert!(parse_layers("dense(out=2, bias=1)").is_err());
        assert!(parse_layers("pool").is_err());
    }

    #[test]
    fn scheme_labels() {
        let s = Settings::parse("scheme.kind = ours\nscheme.order = random\nscheme.r = 0.3").unwrap();
        let cfg = ExperimentConfig::from_settings(&s).unwrap();
        assert_eq!(cfg.scheme.label(), "ours@random");
        assert_eq!(cfg.scheme.ratio(), Some(0.3));
        assert_eq!(cfg.sweep_r_values.len(), 11);
        assert_eq!(Scheme::Fp32.ratio(), None);
    }
}
