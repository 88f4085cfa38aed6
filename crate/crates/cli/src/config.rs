//! Run configuration: flat `key=value` files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use ttl_core::{Activation, LossKind, TrainConfig};

use crate::CliError;

/// Every key accepted in a config file; each mirrors a `--flag`.
pub const KEYS: &[&str] = &[
    "dataset",
    "images",
    "labels",
    "test-images",
    "test-labels",
    "count",
    "test-count",
    "shape",
    "ranks",
    "hidden",
    "output",
    "samples",
    "activation",
    "epochs",
    "lr",
    "batch",
    "seed",
    "loss",
    "trace",
    "out",
    "model",
    "corrupt",
];

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; unknown or repeated keys are errors.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("line {}: unknown key {key:?}", n + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: key {key:?} given twice", n + 1)));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Sd1,
    Sd2,
    Idx,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "sd1" => Ok(DatasetKind::Sd1),
            "sd2" => Ok(DatasetKind::Sd2),
            "idx" => Ok(DatasetKind::Idx),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(CliError::Config(format!("unknown dataset {other:?} (sd1, sd2, idx, cifar10)"))),
        }
    }
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Sd1 => "sd1",
            DatasetKind::Sd2 => "sd2",
            DatasetKind::Idx => "idx",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<DatasetKind>,
    /// Image files; CIFAR-10 accepts several batch files.
    pub images: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Vec<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub count: usize,
    pub test_count: usize,
    pub shape: Option<Vec<usize>>,
    pub ranks: Option<Vec<usize>>,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub samples: usize,
    pub activation: Activation,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub corrupt: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            images: Vec::new(),
            labels: None,
            test_images: Vec::new(),
            test_labels: None,
            count: 5000,
            test_count: 0,
            shape: None,
            ranks: None,
            hidden: vec![300],
            output: 3,
            samples: 1,
            activation: Activation::Relu,
            train: TrainConfig::default(),
            out: PathBuf::from("runs/latest"),
            model: None,
            corrupt: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    let list = value
        .split(',')
        .map(|v| parse_value::<usize>(key, v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if list.contains(&0) {
        return Err(CliError::Config(format!("{key} entries must be positive")));
    }
    Ok(list)
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn join_paths(list: &[PathBuf]) -> String {
    list.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies `key=value` settings on top of the defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "dataset" => c.dataset = Some(v.parse()?),
                "images" => c.images = v.split(',').map(PathBuf::from).collect(),
                "labels" => c.labels = Some(PathBuf::from(v)),
                "test-images" => c.test_images = v.split(',').map(PathBuf::from).collect(),
                "test-labels" => c.test_labels = Some(PathBuf::from(v)),
                "count" => c.count = parse_value(key, v)?,
                "test-count" => c.test_count = parse_value(key, v)?,
                "shape" => c.shape = Some(parse_list(key, v)?),
                "ranks" => c.ranks = Some(parse_list(key, v)?),
                "hidden" => c.hidden = parse_list(key, v)?,
                "output" => c.output = parse_value(key, v)?,
                "samples" => c.samples = parse_value(key, v)?,
                "activation" => {
                    c.activation = match v {
                        "relu" => Activation::Relu,
                        "sigmoid" => Activation::Sigmoid,
                        "identity" => Activation::Identity,
                        other => return Err(CliError::Config(format!("unknown activation {other:?}"))),
                    }
                }
                "epochs" => c.train.epochs = parse_value(key, v)?,
                "lr" => {
                    c.train.learning_rate = parse_value(key, v)?;
                    if !c.train.learning_rate.is_finite() {
                        return Err(CliError::Config(format!("lr must be finite, got {v}")));
                    }
                }
                "batch" => c.train.batch_size = parse_value(key, v)?,
                "seed" => c.train.seed = parse_value(key, v)?,
                "loss" => {
                    c.train.loss = match v {
                        "mse" => LossKind::Mse,
                        "xent" => LossKind::SoftmaxCrossEntropy,
                        other => return Err(CliError::Config(format!("unknown loss {other:?} (mse, xent)"))),
                    }
                }
                "trace" => c.train.trace = v.parse().map_err(|e: ttl_core::Error| CliError::Config(e.to_string()))?,
                "out" => c.out = PathBuf::from(v),
                "model" => c.model = Some(PathBuf::from(v)),
                "corrupt" => c.corrupt = parse_value(key, v)?,
                other => return Err(CliError::Config(format!("unknown key {other:?}"))),
            }
        }
        Ok(c)
    }

    /// `key=value` text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        if let Some(d) = self.dataset {
            put("dataset", d.name().to_string());
        }
        if !self.images.is_empty() {
            put("images", join_paths(&self.images));
        }
        if let Some(p) = &self.labels {
            put("labels", p.display().to_string());
        }
        if !self.test_images.is_empty() {
            put("test-images", join_paths(&self.test_images));
        }
        if let Some(p) = &self.test_labels {
            put("test-labels", p.display().to_string());
        }
        put("count", self.count.to_string());
        put("test-count", self.test_count.to_string());
        if let Some(v) = &self.shape {
            put("shape", join(v));
        }
        if let Some(v) = &self.ranks {
            put("ranks", join(v));
        }
        put("hidden", join(&self.hidden));
        put("output", self.output.to_string());
        put("samples", self.samples.to_string());
        put(
            "activation",
            match self.activation {
                Activation::Relu => "relu",
                Activation::Sigmoid => "sigmoid",
                Activation::Identity => "identity",
            }
            .to_string(),
        );
        put("epochs", self.train.epochs.to_string());
        put("lr", format!("{:?}", self.train.learning_rate));
        put("batch", self.train.batch_size.to_string());
        put("seed", self.train.seed.to_string());
        put(
            "loss",
            match self.train.loss {
                LossKind::Mse => "mse",
                LossKind::SoftmaxCrossEntropy => "xent",
            }
            .to_string(),
        );
        put("trace", self.train.trace.to_string());
        put("out", self.out.display().to_string());
        if let Some(p) = &self.model {
            put("model", p.display().to_string());
        }
        put("corrupt", self.corrupt.to_string());
        s
    }
}
