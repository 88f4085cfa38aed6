//! Multi-layer models mixing Tucker and dense layers, losses, and the
//! forward/back-propagation training loop.
//!
//! Back-propagation follows the usual recursion on preactivation errors:
//! `D_L = ∂L/∂Z_L ⊙ σ'(F_L)` and `D_l = W_{l+1}ᵀ D_{l+1} ⊙ σ'(F_l)`, where
//! `W_{l+1}ᵀ D_{l+1}` is the input gradient reported by layer `l + 1`.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::insight::{GradientTrace, TraceMode};
use crate::tensor::Matrix;
use crate::ttl::{GradBundle, TuckerLayer};

/// Columns evaluated at once when predicting over a whole dataset.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weight: Matrix,
    bias: DVector<f64>,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: DVector<f64>,
    pub input: Matrix,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() || weight.ncols() == 0 || weight.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "dense layer {}x{} with bias of length {}",
                weight.nrows(),
                weight.ncols(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    /// He-initialized weights, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::InvalidShape("dense layer sizes must be positive".into()));
        }
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
        let weight = Matrix::from_fn(output, input, |_, _| normal.sample(rng));
        Self::new(weight, DVector::zeros(output), activation)
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut DVector<f64> {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        if z.nrows() != self.weight.ncols() || z.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "dense layer expects {} x M input, got {} x {}",
                self.weight.ncols(),
                z.nrows(),
                z.ncols()
            )));
        }
        let mut f = &self.weight * z;
        for mut col in f.column_iter_mut() {
            col += &self.bias;
        }
        Ok(f)
    }

    pub fn backward(&self, z: &Matrix, d: &Matrix) -> Result<DenseGrads> {
        if d.nrows() != self.weight.nrows() || d.ncols() != z.ncols() || z.nrows() != self.weight.ncols() {
            return Err(Error::DimensionMismatch("dense backward shapes".into()));
        }
        Ok(DenseGrads {
            weight: d * z.transpose(),
            bias: DVector::from_iterator(d.nrows(), d.row_iter().map(|r| r.sum())),
            input: self.weight.transpose() * d,
        })
    }

    pub fn apply_update(&mut self, grads: &DenseGrads, eta: f64) -> Result<()> {
        if grads.weight.shape() != self.weight.shape() || grads.bias.len() != self.bias.len() {
            return Err(Error::DimensionMismatch("dense gradient does not match layer".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("step size must be finite and non-negative, got {eta}")));
        }
        self.weight.zip_apply(&grads.weight, |a, b| *a -= eta * b);
        self.bias.axpy(-eta, &grads.bias, 1.0);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Tucker(TuckerLayer),
    Dense(DenseLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Tucker(GradBundle),
    Dense(DenseGrads),
}

impl LayerGrads {
    pub fn input(&self) -> &Matrix {
        match self {
            LayerGrads::Tucker(g) => &g.input,
            LayerGrads::Dense(g) => &g.input,
        }
    }

    /// Flat gradient of one named parameter, in the parameter's storage order.
    pub fn param(&self, p: Param) -> Option<Vec<f64>> {
        match (self, p) {
            (LayerGrads::Tucker(g), Param::Factor(n)) => g.factors.get(n).map(|m| m.as_slice().to_vec()),
            (LayerGrads::Tucker(g), Param::Core) => Some(g.core.data().to_vec()),
            (LayerGrads::Tucker(g), Param::Bias) => Some(g.bias.as_slice().to_vec()),
            (LayerGrads::Dense(g), Param::Weight) => Some(g.weight.as_slice().to_vec()),
            (LayerGrads::Dense(g), Param::Bias) => Some(g.bias.as_slice().to_vec()),
            _ => None,
        }
    }
}

/// A trainable parameter of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Factor(usize),
    Core,
    Bias,
    Weight,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Tucker(l) => l.input_dim(),
            Layer::Dense(l) => l.weight.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Tucker(l) => l.output_dim(),
            Layer::Dense(l) => l.weight.nrows(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Tucker(l) => l.activation(),
            Layer::Dense(l) => l.activation(),
        }
    }

    pub fn preactivation(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Tucker(l) => l.forward(z),
            Layer::Dense(l) => l.forward(z),
        }
    }

    pub fn backward(&self, z: &Matrix, d: &Matrix) -> Result<LayerGrads> {
        match self {
            Layer::Tucker(l) => l.backward(z, d).map(LayerGrads::Tucker),
            Layer::Dense(l) => l.backward(z, d).map(LayerGrads::Dense),
        }
    }

    pub fn apply_update(&mut self, grads: &LayerGrads, eta: f64) -> Result<()> {
        match (self, grads) {
            (Layer::Tucker(l), LayerGrads::Tucker(g)) => l.apply_update(g, eta),
            (Layer::Dense(l), LayerGrads::Dense(g)) => l.apply_update(g, eta),
            _ => Err(Error::DimensionMismatch("gradient kind does not match layer kind".into())),
        }
    }

    /// Copy of one parameter's storage.
    pub fn param(&self, p: Param) -> Option<Vec<f64>> {
        match (self, p) {
            (Layer::Tucker(l), Param::Factor(n)) => l.weights().factors().get(n).map(|m| m.as_slice().to_vec()),
            (Layer::Tucker(l), Param::Core) => Some(l.weights().core().data().to_vec()),
            (Layer::Tucker(l), Param::Bias) => Some(l.bias().as_slice().to_vec()),
            (Layer::Dense(l), Param::Weight) => Some(l.weight.as_slice().to_vec()),
            (Layer::Dense(l), Param::Bias) => Some(l.bias.as_slice().to_vec()),
            _ => None,
        }
    }

    /// Overwrites one parameter's storage; `values` must have its length.
    pub fn set_param(&mut self, p: Param, values: &[f64]) -> Result<()> {
        let target: &mut [f64] = match (self, p) {
            (Layer::Tucker(l), Param::Factor(n)) => match l.weights_mut().factors_mut().get_mut(n) {
                Some(m) => m.as_mut_slice(),
                None => return Err(Error::ModeOutOfRange { mode: n, order: 0 }),
            },
            (Layer::Tucker(l), Param::Core) => l.weights_mut().core_mut().data_mut(),
            (Layer::Tucker(l), Param::Bias) => l.bias_mut().as_mut_slice(),
            (Layer::Dense(l), Param::Weight) => l.weight.as_mut_slice(),
            (Layer::Dense(l), Param::Bias) => l.bias.as_mut_slice(),
            (_, p) => return Err(Error::Config(format!("layer has no parameter {p:?}"))),
        };
        if target.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter has {} entries, got {}",
                target.len(),
                values.len()
            )));
        }
        target.copy_from_slice(values);
        Ok(())
    }

    /// Every trainable parameter of the layer.
    pub fn params(&self) -> Vec<Param> {
        match self {
            Layer::Tucker(l) => (0..l.weights().order())
                .map(Param::Factor)
                .chain([Param::Core, Param::Bias])
                .collect(),
            Layer::Dense(_) => vec![Param::Weight, Param::Bias],
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    slope: Matrix,
}

/// An ordered stack of layers plus the caches recorded by the last forward
/// pass. Any parameter change drops the caches.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    layers: Vec<Layer>,
    caches: Option<Vec<LayerCache>>,
}

impl PartialEq for NetworkModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Layout of the standard classifier: a Tucker layer over the sample tensor,
/// optional dense hidden layers, and a dense output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_shape: Vec<usize>,
    /// Multilinear rank of the Tucker layer; one entry per input mode plus
    /// one for its output mode.
    pub ranks: Vec<usize>,
    /// Hidden sizes; the first is the Tucker layer's output.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
}

impl NetworkModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("a network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    l,
                    pair[0].output_dim(),
                    l + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, caches: None })
    }

    /// Builds and initializes the classifier described by `spec`.
    pub fn classifier(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        let first = *spec
            .hidden
            .first()
            .ok_or_else(|| Error::Config("at least one hidden size is required".into()))?;
        if spec.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::Tucker(TuckerLayer::random(
            &spec.input_shape,
            first,
            &spec.ranks,
            spec.activation,
            &mut rng,
        )?)];
        for pair in spec.hidden.windows(2) {
            layers.push(Layer::Dense(DenseLayer::random(pair[0], pair[1], spec.activation, &mut rng)?));
        }
        let last = *spec.hidden.last().expect("non-empty");
        layers.push(Layer::Dense(DenseLayer::random(last, spec.classes, Activation::Identity, &mut rng)?));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Layer {
        self.caches = None;
        &mut self.layers[l]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn has_caches(&self) -> bool {
        self.caches.is_some()
    }

    /// Forward pass that records every layer's input and `σ'(F)`.
    pub fn forward(&mut self, batch: &Matrix) -> Result<Matrix> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut z = batch.clone();
        for layer in &self.layers {
            let pre = layer.preactivation(&z)?;
            let slope = layer.activation().derivative(&pre);
            let out = layer.activation().apply(&pre);
            caches.push(LayerCache { input: z, slope });
            z = out;
        }
        self.caches = Some(caches);
        Ok(z)
    }

    /// Forward pass without caches.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        let mut z = batch.clone();
        for layer in &self.layers {
            z = layer.activation().apply(&layer.preactivation(&z)?);
        }
        Ok(z)
    }

    /// Back-propagates `∂L/∂Z_L` through the cached forward pass.
    pub fn backward(&self, d_loss: &Matrix) -> Result<Vec<LayerGrads>> {
        let caches = self.caches.as_ref().ok_or(Error::StaleCache)?;
        let last = caches.last().expect("non-empty");
        if d_loss.shape() != last.slope.shape() {
            return Err(Error::StaleCache);
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_loss.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let d = upstream.component_mul(&cache.slope);
            let g = layer.backward(&cache.input, &d)?;
            upstream = g.input().clone();
            grads.push(g);
        }
        grads.reverse();
        Ok(grads)
    }

    /// Synchronous descent step on every layer.
    pub fn apply_updates(&mut self, grads: &[LayerGrads], eta: f64) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::DimensionMismatch("one gradient per layer is required".into()));
        }
        self.caches = None;
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.apply_update(g, eta)?;
        }
        Ok(())
    }

    /// Predictions over a dataset, in column chunks.
    pub fn predict_dataset(&self, ds: &LabeledDataset) -> Result<Matrix> {
        if ds.feature_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, dataset has {}",
                self.input_dim(),
                ds.feature_dim()
            )));
        }
        let m = ds.len();
        let mut out = Matrix::zeros(self.output_dim(), m);
        let mut start = 0;
        while start < m {
            let width = EVAL_CHUNK.min(m - start);
            let z = self.predict(&ds.samples().columns(start, width).into_owned())?;
            out.columns_mut(start, width).copy_from(&z);
            start += width;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    #[serde(rename = "xent")]
    SoftmaxCrossEntropy,
}

/// Loss targets: a real matrix for MSE or class indices for cross-entropy.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Real(&'a Matrix),
    Classes(&'a [usize]),
}

/// One-hot encoding, `classes x M`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(classes, labels.len());
    for (j, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        m[(label, j)] = 1.0;
    }
    Ok(m)
}

/// Batch-mean loss and its gradient with respect to `output`.
///
/// MSE: `L = (1/2M) Σ ||f_m - d_m||²`, gradient `(F - D)/M`. Class targets
/// are one-hot encoded first. Cross-entropy: `L = -(1/M) Σ log softmax(f_m)[y_m]`,
/// gradient `(softmax - onehot)/M`.
pub fn loss_and_grad(kind: LossKind, output: &Matrix, targets: Targets<'_>) -> Result<(f64, Matrix)> {
    let m = output.ncols();
    if m == 0 {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    let scale = 1.0 / m as f64;
    match kind {
        LossKind::Mse => {
            let encoded;
            let desired = match targets {
                Targets::Real(d) => d,
                Targets::Classes(c) => {
                    encoded = one_hot(c, output.nrows())?;
                    &encoded
                }
            };
            if desired.shape() != output.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "targets {:?} vs output {:?}",
                    desired.shape(),
                    output.shape()
                )));
            }
            let diff = output - desired;
            let loss = 0.5 * scale * diff.norm_squared();
            Ok((loss, diff * scale))
        }
        LossKind::SoftmaxCrossEntropy => {
            let labels = match targets {
                Targets::Classes(c) => c,
                Targets::Real(_) => {
                    return Err(Error::Config("cross-entropy needs class targets".into()));
                }
            };
            if labels.len() != m {
                return Err(Error::DimensionMismatch(format!("{} labels for {m} outputs", labels.len())));
            }
            let classes = output.nrows();
            let mut grad = Matrix::zeros(classes, m);
            let mut loss = 0.0;
            for (j, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
                let col = output.column(j);
                let max = col.max();
                let sum: f64 = col.iter().map(|v| (v - max).exp()).sum();
                let log_sum = max + sum.ln();
                loss -= col[label] - log_sum;
                for c in 0..classes {
                    grad[(c, j)] = (col[c] - log_sum).exp() * scale;
                }
                grad[(label, j)] -= scale;
            }
            Ok((loss * scale, grad))
        }
    }
}

/// Index of the largest entry of each column; ties go to the lowest index.
pub fn argmax_columns(output: &Matrix) -> Vec<usize> {
    output
        .column_iter()
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of samples whose argmax output equals the label.
pub fn evaluate(model: &NetworkModel, ds: &LabeledDataset) -> Result<f64> {
    let out = model.predict_dataset(ds)?;
    Ok(accuracy(&out, ds.labels()))
}

fn accuracy(output: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_columns(output).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Mean loss and accuracy over a whole dataset.
pub fn assess(model: &NetworkModel, ds: &LabeledDataset, kind: LossKind) -> Result<(f64, f64)> {
    let out = model.predict_dataset(ds)?;
    let (loss, _) = loss_and_grad(kind, &out, Targets::Classes(ds.labels()))?;
    Ok((loss, accuracy(&out, ds.labels())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub trace: TraceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 128,
            seed: 0,
            loss: LossKind::SoftmaxCrossEntropy,
            trace: TraceMode::Off,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the full training set after the epoch's updates.
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub traces: Vec<GradientTrace>,
}

/// Per-layer factor gradient norms for one batch.
fn factor_norms(grads: &[LayerGrads]) -> Vec<(usize, Vec<f64>)> {
    grads
        .iter()
        .enumerate()
        .filter_map(|(l, g)| match g {
            LayerGrads::Tucker(b) => {
                Some((l, b.factors.iter().map(crate::insight::normalized_grad_norm).collect()))
            }
            LayerGrads::Dense(_) => None,
        })
        .collect()
}

/// Mini-batch gradient descent. Shuffling is seeded per `(seed, epoch)`, so
/// identical configurations give bit-identical histories.
pub fn train(
    model: &mut NetworkModel,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train_set.feature_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            train_set.feature_dim()
        )));
    }
    if train_set.class_count() > model.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} classes but the model outputs {}",
            train_set.class_count(),
            model.output_dim()
        )));
    }
    let (initial_loss, initial_accuracy) = assess(model, train_set, config.loss)?;
    let mut history = History { initial_loss, initial_accuracy, epochs: Vec::new(), traces: Vec::new() };

    for epoch in 1..=config.epochs {
        let mut last_norms = Vec::new();
        let mut sums: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut batch_count = 0usize;
        for idx in batches(train_set.len(), config.batch_size, config.seed, epoch as u64) {
            let (x, labels) = train_set.gather(&idx);
            let out = model.forward(&x)?;
            let (loss, d_loss) = loss_and_grad(config.loss, &out, Targets::Classes(&labels))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let grads = model.backward(&d_loss)?;
            if config.trace != TraceMode::Off {
                let norms = factor_norms(&grads);
                match config.trace {
                    TraceMode::PerBatch => push_traces(&mut history.traces, epoch, &norms),
                    TraceMode::EpochMean => {
                        if sums.is_empty() {
                            sums = norms.iter().map(|(l, v)| (*l, vec![0.0; v.len()])).collect();
                        }
                        for ((_, acc), (_, v)) in sums.iter_mut().zip(&norms) {
                            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                        }
                    }
                    _ => {}
                }
                last_norms = norms;
            }
            batch_count += 1;
            model.apply_updates(&grads, config.learning_rate)?;
        }
        match config.trace {
            TraceMode::LastBatch => push_traces(&mut history.traces, epoch, &last_norms),
            TraceMode::EpochMean => {
                let means: Vec<(usize, Vec<f64>)> = sums
                    .into_iter()
                    .map(|(l, v)| (l, v.into_iter().map(|s| s / batch_count as f64).collect()))
                    .collect();
                push_traces(&mut history.traces, epoch, &means);
            }
            _ => {}
        }
        let (loss, train_accuracy) = assess(model, train_set, config.loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let test_accuracy = test_set.map(|t| evaluate(model, t)).transpose()?;
        history.epochs.push(EpochRecord { epoch, loss, train_accuracy, test_accuracy });
    }
    Ok(history)
}

fn push_traces(out: &mut Vec<GradientTrace>, epoch: usize, norms: &[(usize, Vec<f64>)]) {
    for (layer, values) in norms {
        for (factor, &value) in values.iter().enumerate() {
            out.push(GradientTrace { epoch, layer: *layer, factor, value });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
    }

    #[test]
    fn mse_zero_at_target() {
        let out = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (loss, grad) = loss_and_grad(LossKind::Mse, &out, Targets::Real(&out)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_classes() {
        let out = Matrix::from_element(7, 3, 0.25);
        let (loss, _) = loss_and_grad(LossKind::SoftmaxCrossEntropy, &out, Targets::Classes(&[0, 3, 6])).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = gaussian(3, 4, &mut rng);
        let target = gaussian(3, 4, &mut rng);
        let labels = [2usize, 0, 1, 1];
        for (kind, t) in [
            (LossKind::Mse, Targets::Real(&target)),
            (LossKind::SoftmaxCrossEntropy, Targets::Classes(&labels)),
        ] {
            let (_, grad) = loss_and_grad(kind, &out, t).unwrap();
            for k in 0..out.len() {
                let h = 1e-6 * (1.0 + out[k].abs());
                let mut plus = out.clone();
                plus[k] += h;
                let mut minus = out.clone();
                minus[k] -= h;
                let fd = (loss_and_grad(kind, &plus, t).unwrap().0 - loss_and_grad(kind, &minus, t).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-8, "{kind:?} entry {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn class_index_out_of_range() {
        let out = Matrix::zeros(3, 1);
        assert!(matches!(
            loss_and_grad(LossKind::SoftmaxCrossEntropy, &out, Targets::Classes(&[3])),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(loss_and_grad(LossKind::Mse, &out, Targets::Classes(&[5])).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let out = Matrix::from_column_slice(3, 2, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(argmax_columns(&out), vec![0, 1]);
    }

    #[test]
    fn relu_on_negative_preactivation_gives_zero() {
        let layer = DenseLayer::new(Matrix::from_element(2, 3, -1.0), DVector::from_element(2, -0.5), Activation::Relu)
            .unwrap();
        let mut model = NetworkModel::new(vec![Layer::Dense(layer)]).unwrap();
        let out = model.forward(&Matrix::from_element(3, 4, 1.0)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_relu_layer_zeroes_earlier_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let first = TuckerLayer::random(&[3, 2], 4, &[2, 2, 3], Activation::Identity, &mut rng).unwrap();
        let dead = DenseLayer::new(gaussian(5, 4, &mut rng), DVector::from_element(5, -1e6), Activation::Relu).unwrap();
        let head = DenseLayer::random(5, 2, Activation::Identity, &mut rng).unwrap();
        let mut model =
            NetworkModel::new(vec![Layer::Tucker(first), Layer::Dense(dead), Layer::Dense(head)]).unwrap();
        let x = gaussian(6, 3, &mut rng);
        let out = model.forward(&x).unwrap();
        let (_, d) = loss_and_grad(LossKind::SoftmaxCrossEntropy, &out, Targets::Classes(&[0, 1, 1])).unwrap();
        let grads = model.backward(&d).unwrap();
        for p in model.layers()[0].params() {
            assert!(grads[0].param(p).unwrap().iter().all(|&v| v == 0.0));
        }
        assert!(grads[1].param(Param::Weight).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads[2].param(Param::Bias).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_without_forward_is_stale() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = NetworkModel::new(vec![Layer::Dense(DenseLayer::random(3, 2, Activation::Relu, &mut rng).unwrap())])
            .unwrap();
        assert!(matches!(model.backward(&Matrix::zeros(2, 1)), Err(Error::StaleCache)));
        model.forward(&Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(model.backward(&Matrix::zeros(2, 1)), Err(Error::StaleCache)));
        let grads = model.backward(&Matrix::zeros(2, 2)).unwrap();
        model.apply_updates(&grads, 0.1).unwrap();
        assert!(!model.has_caches());
    }

    #[test]
    fn mismatched_layer_chain_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = DenseLayer::random(3, 4, Activation::Relu, &mut rng).unwrap();
        let b = DenseLayer::random(5, 2, Activation::Relu, &mut rng).unwrap();
        assert!(NetworkModel::new(vec![Layer::Dense(a), Layer::Dense(b)]).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(config.validate().is_err());
    }
}
