//! Command implementations behind the `ttl` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use ttl_core::data::{load_cifar10, load_idx, write_idx};
use ttl_core::gradcheck::{GradCheckSummary, Schedule};
use ttl_core::insight::write_trace_csv;
use ttl_core::{
    compression_factor, evaluate, gen_synthetic, load_model, save_model, train, ClassifierSpec, GradCheckSetup,
    LabeledDataset, Layer, NetworkModel, SyntheticKind, Tolerances, TraceMode,
};

pub use config::{parse_config_text, DatasetKind, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ttl_core::Error),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 0 success, 1 configuration or data error, 2 failed verification,
    /// 3 training diverged.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 2,
            CliError::Core(ttl_core::Error::Diverged { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "ttl", version, about = "Tucker tensor layer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify analytic gradients of a single Tucker layer.
    Gradcheck(Flags),
    /// Train a Tucker-layer classifier.
    Train(Flags),
    /// Report the accuracy of a saved model on a dataset.
    Eval(Flags),
    /// Print compression factors for a weight shape and core ranks, or for a saved model.
    Compress(Flags),
    /// Write a synthetic dataset as IDX files.
    Gen(Flags),
}

/// Flags shared by all subcommands. Each one overrides the config-file key
/// of the same name.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Flat `key=value` file; keys are the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sd1, sd2, idx or cifar10.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Image file (IDX), or comma-separated CIFAR-10 batch files.
    #[arg(long)]
    pub images: Option<String>,
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub test_images: Option<String>,
    #[arg(long)]
    pub test_labels: Option<String>,
    /// Synthetic sample count.
    #[arg(long)]
    pub count: Option<String>,
    /// Synthetic test sample count; 0 disables the test set.
    #[arg(long)]
    pub test_count: Option<String>,
    /// Comma-separated input shape, e.g. 28,28.
    #[arg(long)]
    pub shape: Option<String>,
    /// Comma-separated core ranks, one per input mode plus the output mode.
    #[arg(long)]
    pub ranks: Option<String>,
    /// Comma-separated widths: Tucker layer output, then dense hidden layers.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Output size of the gradient-check layer.
    #[arg(long)]
    pub output: Option<String>,
    /// Sample count for the gradient check.
    #[arg(long)]
    pub samples: Option<String>,
    /// relu, sigmoid or identity.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// mse or xent.
    #[arg(long)]
    pub loss: Option<String>,
    /// off, batch, epoch or epoch-mean.
    #[arg(long)]
    pub trace: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Model artifact path.
    #[arg(long)]
    pub model: Option<String>,
    /// Perturb the analytic gradient before checking it.
    #[arg(long)]
    pub corrupt: bool,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let opts = [
            ("dataset", &self.dataset),
            ("images", &self.images),
            ("labels", &self.labels),
            ("test-images", &self.test_images),
            ("test-labels", &self.test_labels),
            ("count", &self.count),
            ("test-count", &self.test_count),
            ("shape", &self.shape),
            ("ranks", &self.ranks),
            ("hidden", &self.hidden),
            ("output", &self.output),
            ("samples", &self.samples),
            ("activation", &self.activation),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("seed", &self.seed),
            ("loss", &self.loss),
            ("trace", &self.trace),
            ("out", &self.out),
            ("model", &self.model),
        ];
        let mut pairs: Vec<_> = opts.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect();
        if self.corrupt {
            pairs.push(("corrupt", "true".into()));
        }
        pairs
    }

    /// Config file values overlaid by explicit flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut map = match &self.config {
            Some(path) => parse_config_text(&fs::read_to_string(path).map_err(io_err(path))?)?,
            None => BTreeMap::new(),
        };
        for (k, v) in self.pairs() {
            map.insert(k.to_string(), v);
        }
        RunConfig::from_pairs(&map)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gradcheck(f) => cmd_gradcheck(&f.resolve()?),
        Command::Train(f) => cmd_train(&f.resolve()?),
        Command::Eval(f) => cmd_eval(&f.resolve()?),
        Command::Compress(f) => cmd_compress(&f.resolve()?),
        Command::Gen(f) => cmd_gen(&f.resolve()?),
    }
}

fn create_out_dir(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    let path = config.out.join("config.txt");
    fs::write(&path, config.to_text()).map_err(io_err(&path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn dims(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn cmd_gradcheck(config: &RunConfig) -> Result<(), CliError> {
    let input_shape = config.shape.clone().unwrap_or_else(|| vec![5, 5, 5]);
    let ranks = config.ranks.clone().unwrap_or_else(|| {
        let mut r = input_shape.clone();
        r.push(config.output);
        r
    });
    let setup = GradCheckSetup {
        input_shape,
        output: config.output,
        ranks,
        samples: config.samples,
        seed: config.train.seed,
    };
    let ctx = setup.build()?;
    create_out_dir(config)?;
    let reports =
        ctx.check_all(config.train.seed, &Schedule::default(), Tolerances::default(), config.corrupt)?;
    for r in &reports {
        let path = config.out.join(format!("gradcheck_{}.csv", r.parameter.replace('@', "_")));
        r.write_csv(create(&path)?)?;
        println!(
            "{:<6} {}  decay {:.3e}  slope {:.3}  fd {:.2e}  resolved {}/{}",
            r.parameter,
            if r.passed { "PASS" } else { "FAIL" },
            r.decay,
            r.slope,
            r.fd_max_rel_error,
            r.resolved,
            r.scales.len()
        );
    }
    let summary = GradCheckSummary::new(reports);
    let path = config.out.join("summary.json");
    serde_json::to_writer_pretty(create(&path)?, &summary).map_err(ttl_core::Error::from)?;
    if summary.passed {
        println!("all parameters passed");
        Ok(())
    } else {
        let failed: Vec<&str> =
            summary.reports.iter().filter(|r| !r.passed).map(|r| r.parameter.as_str()).collect();
        Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Sample shape for a dataset, known without reading the pixels where possible.
fn expected_shape(config: &RunConfig) -> Option<Vec<usize>> {
    match config.dataset? {
        DatasetKind::Sd1 | DatasetKind::Sd2 => Some(vec![28, 28]),
        DatasetKind::Cifar10 => Some(vec![32, 32, 3]),
        DatasetKind::Idx => None,
    }
}

fn synthetic_kind(kind: DatasetKind) -> Option<SyntheticKind> {
    match kind {
        DatasetKind::Sd1 => Some(SyntheticKind::Sd1),
        DatasetKind::Sd2 => Some(SyntheticKind::Sd2),
        _ => None,
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Config(format!("{key} is required for this dataset")))
}

fn load_train_set(config: &RunConfig) -> Result<LabeledDataset, CliError> {
    let kind = config.dataset.ok_or_else(|| CliError::Config("dataset is required".into()))?;
    if let Some(s) = synthetic_kind(kind) {
        return Ok(gen_synthetic(s, config.count, config.train.seed)?);
    }
    if config.images.is_empty() {
        return Err(CliError::Config("images is required for this dataset".into()));
    }
    Ok(match kind {
        DatasetKind::Idx => load_idx(&config.images[0], required(&config.labels, "labels")?)?,
        _ => load_cifar10(&config.images)?,
    })
}

fn load_test_set(config: &RunConfig) -> Result<Option<LabeledDataset>, CliError> {
    let Some(kind) = config.dataset else { return Ok(None) };
    if let Some(s) = synthetic_kind(kind) {
        if config.test_count == 0 {
            return Ok(None);
        }
        // Offset the seed so the test draw is independent of the training draw.
        return Ok(Some(gen_synthetic(s, config.test_count, config.train.seed.wrapping_add(1))?));
    }
    if config.test_images.is_empty() {
        return Ok(None);
    }
    Ok(Some(match kind {
        DatasetKind::Idx => load_idx(&config.test_images[0], required(&config.test_labels, "test-labels")?)?,
        _ => load_cifar10(&config.test_images)?,
    }))
}

/// Checks ranks against the input shape and the Tucker layer output size.
fn check_ranks(shape: &[usize], ranks: &[usize], hidden: &[usize]) -> Result<(), CliError> {
    let mut full = shape.to_vec();
    full.push(hidden[0]);
    ttl_core::ttl::validate_ranks(&full, ranks)
        .map_err(|e| CliError::Config(format!("ranks {} for weight shape {}: {e}", dims(ranks), dims(&full))))
}

pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    config.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let ranks = config.ranks.clone().ok_or_else(|| CliError::Config("ranks is required".into()))?;
    if config.hidden.is_empty() {
        return Err(CliError::Config("hidden needs at least the Tucker layer width".into()));
    }
    if let Some(shape) = config.shape.as_ref().or(expected_shape(config).as_ref()) {
        check_ranks(shape, &ranks, &config.hidden)?;
    }
    let train_set = load_train_set(config)?;
    if let Some(shape) = &config.shape {
        if shape.iter().product::<usize>() != train_set.feature_dim() {
            return Err(CliError::Config(format!(
                "shape {} does not match {} features per sample",
                dims(shape),
                train_set.feature_dim()
            )));
        }
    }
    let shape = config.shape.clone().unwrap_or_else(|| train_set.sample_shape().to_vec());
    check_ranks(&shape, &ranks, &config.hidden)?;
    let test_set = load_test_set(config)?;

    let spec = ClassifierSpec {
        input_shape: shape.clone(),
        ranks,
        hidden: config.hidden.clone(),
        classes: train_set.class_count(),
        activation: config.activation,
    };
    let mut model = NetworkModel::classifier(&spec, config.train.seed)?;
    create_out_dir(config)?;
    println!(
        "training on {} samples of shape {}, {} classes",
        train_set.len(),
        dims(&shape),
        train_set.class_count()
    );
    let history = train(&mut model, &train_set, test_set.as_ref(), &config.train)?;

    let path = config.out.join("history.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["epoch", "loss", "train_acc", "test_acc"]).map_err(ttl_core::Error::from)?;
    w.write_record(["0".to_string(), history.initial_loss.to_string(), history.initial_accuracy.to_string(), String::new()])
        .map_err(ttl_core::Error::from)?;
    for e in &history.epochs {
        let test = e.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([e.epoch.to_string(), e.loss.to_string(), e.train_accuracy.to_string(), test])
            .map_err(ttl_core::Error::from)?;
        println!(
            "epoch {:>3}  loss {:.5}  train_acc {:.4}{}",
            e.epoch,
            e.loss,
            e.train_accuracy,
            e.test_accuracy.map(|a| format!("  test_acc {a:.4}")).unwrap_or_default()
        );
    }
    w.flush().map_err(io_err(&path))?;

    if config.train.trace != TraceMode::Off {
        let path = config.out.join("trace.csv");
        write_trace_csv(create(&path)?, &history.traces)?;
    }
    let path = config.model.clone().unwrap_or_else(|| config.out.join("model.ttl"));
    save_model(&model, &path)?;
    report_compression(&model);
    println!("model written to {}", path.display());
    Ok(())
}

fn report_compression(model: &NetworkModel) {
    for (l, layer) in model.layers().iter().enumerate() {
        if let Layer::Tucker(t) = layer {
            let w = t.weights();
            println!(
                "compression: layer {} weight {} core {} CF {:.4}",
                l + 1,
                dims(&w.shape()),
                dims(&w.ranks()),
                t.compression_factor()
            );
        }
    }
}

pub fn cmd_eval(config: &RunConfig) -> Result<(), CliError> {
    let path = required(&config.model, "model")?;
    let model = load_model(path)?;
    let data = match load_test_set(config)? {
        Some(t) => t,
        None => load_train_set(config)?,
    };
    if data.feature_dim() != model.input_dim() {
        return Err(CliError::Config(format!(
            "model expects {} features per sample, dataset has {}",
            model.input_dim(),
            data.feature_dim()
        )));
    }
    let accuracy = evaluate(&model, &data)?;
    println!("accuracy {accuracy:.4}");
    Ok(())
}

pub fn cmd_compress(config: &RunConfig) -> Result<(), CliError> {
    if let Some(path) = &config.model {
        report_compression(&load_model(path)?);
        return Ok(());
    }
    let shape = config.shape.as_ref().ok_or_else(|| CliError::Config("shape or model is required".into()))?;
    let ranks = config.ranks.as_ref().ok_or_else(|| CliError::Config("ranks is required".into()))?;
    ttl_core::ttl::validate_ranks(shape, ranks).map_err(|e| CliError::Config(e.to_string()))?;
    println!("compression: weight {} core {} CF {:.4}", dims(shape), dims(ranks), compression_factor(shape, ranks));
    Ok(())
}

pub fn cmd_gen(config: &RunConfig) -> Result<(), CliError> {
    let kind = config
        .dataset
        .and_then(synthetic_kind)
        .ok_or_else(|| CliError::Config("gen needs dataset sd1 or sd2".into()))?;
    let data = gen_synthetic(kind, config.count, config.train.seed)?;
    create_out_dir(config)?;
    let name = config.dataset.expect("checked above").name();
    let images = config.out.join(format!("{name}-images-idx3-ubyte"));
    let labels = config.out.join(format!("{name}-labels-idx1-ubyte"));
    write_idx(&data, &images, &labels)?;
    println!("wrote {} samples to {} and {}", data.len(), images.display(), labels.display());
    Ok(())
}
