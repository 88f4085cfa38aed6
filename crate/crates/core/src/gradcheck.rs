//! Gradient verification: first-order remainder curves and central finite
//! differences.
//!
//! For a loss `L`, parameter `θ` and claimed gradient `g`, the remainder at a
//! perturbation `E` is `R(E) = L(θ + E) - L(θ) - <g, E>`. `g` is the gradient
//! exactly when `|R(sE)| / ||sE||_F -> 0` as `s -> 0`.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::network::{loss_and_grad, Layer, LossKind, NetworkModel, Param, Targets};
use crate::tensor::{DenseTensor, Matrix};
use crate::ttl::TuckerLayer;
use crate::tucker::hosvd;

/// Remainders below `NOISE_FLOOR * eps * max|L|` are indistinguishable from
/// rounding in `L(θ + E) - L(θ)` and are not used for the verdict.
pub const NOISE_FLOOR: f64 = 10.0;

/// Fewest resolved points a remainder curve needs to count as evidence.
pub const MIN_RESOLVED: usize = 3;

/// `1, 1/2, ..., 2^-10`.
pub fn default_scales() -> Vec<f64> {
    (0..=10).map(|k| 0.5f64.powi(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Bound on the finite-difference max relative error.
    pub fd_relative: f64,
    /// Bound on terminal ratio / initial ratio.
    pub decay: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { fd_relative: 1e-5, decay: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameter: String,
    /// `||sE||_F`, decreasing.
    pub scales: Vec<f64>,
    pub remainders: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Least-squares slope of `log ratio` against `log ||sE||`.
    pub slope: f64,
    /// Leading points whose remainder is above the rounding floor.
    pub resolved: usize,
    /// Some scheduled points fell below the rounding floor.
    pub floor_limited: bool,
    pub monotone: bool,
    pub decay: f64,
    pub fd_max_rel_error: f64,
    pub tolerances: Tolerances,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale", "remainder", "ratio"])?;
        for ((s, r), q) in self.scales.iter().zip(&self.remainders).zip(&self.ratios) {
            w.write_record([format!("{s:e}"), format!("{r:e}"), format!("{q:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("loss at {what}")))
    }
}

/// Central differences with step `1e-6 (1 + |θ_k|)` per entry.
pub fn finite_diff<F>(mut loss: F, theta: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[k].abs());
        point[k] = theta[k] + h;
        let plus = finite(loss(&point)?, "a perturbed point")?;
        point[k] = theta[k] - h;
        let minus = finite(loss(&point)?, "a perturbed point")?;
        point[k] = theta[k];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderCurve {
    /// `||sE||_F` per scale.
    pub norms: Vec<f64>,
    pub remainders: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Largest `|L|` seen, which sets the rounding floor.
    pub loss_magnitude: f64,
}

impl RemainderCurve {
    /// Number of leading points whose remainder clears the rounding floor.
    pub fn resolved(&self) -> usize {
        let floor = NOISE_FLOOR * f64::EPSILON * self.loss_magnitude;
        self.remainders.iter().take_while(|&&r| r > floor).count()
    }
}

/// Remainder curve along one seeded `N(0, 1)` direction, rescaled by each
/// entry of `scales`.
pub fn remainder_curve<F>(
    mut loss: F,
    theta: &[f64],
    grad: &[f64],
    seed: u64,
    scales: &[f64],
) -> Result<RemainderCurve>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if grad.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, parameter has {}",
            grad.len(),
            theta.len()
        )));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("scales must be positive and strictly decreasing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let dir_norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let slope_along: f64 = grad.iter().zip(&direction).map(|(g, e)| g * e).sum();
    let base = finite(loss(theta)?, "the base point")?;
    let mut loss_magnitude = base.abs();
    let mut norms = Vec::with_capacity(scales.len());
    let mut remainders = Vec::with_capacity(scales.len());
    let mut ratios = Vec::with_capacity(scales.len());
    let mut point = vec![0.0; theta.len()];
    for &s in scales {
        for ((p, t), e) in point.iter_mut().zip(theta).zip(&direction) {
            *p = t + s * e;
        }
        let moved = finite(loss(&point)?, "a perturbed point")?;
        loss_magnitude = loss_magnitude.max(moved.abs());
        let r = (moved - base - s * slope_along).abs();
        let norm = s * dir_norm;
        norms.push(norm);
        remainders.push(r);
        ratios.push(r / norm);
    }
    Ok(RemainderCurve { norms, remainders, ratios, loss_magnitude })
}

/// Halvings tried when searching for the asymptotic regime.
const MAX_START_HALVINGS: usize = 40;

/// Finds a starting scale inside the regime where the ratio halves with the
/// scale (to within 10% over two steps), then returns `points` halvings from
/// it. For a loss quadratic in `θ` this is the plain `1, 1/2, ...` schedule.
pub fn asymptotic_scales<F>(mut loss: F, theta: &[f64], grad: &[f64], seed: u64, points: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut start = 1.0f64;
    for _ in 0..MAX_START_HALVINGS {
        let probe = remainder_curve(&mut loss, theta, grad, seed, &[start, start / 2.0, start / 4.0])?;
        let halving = |a: f64, b: f64| a > 0.0 && (b / a - 0.5).abs() <= 0.05;
        if probe.resolved() == 3 && halving(probe.ratios[0], probe.ratios[1]) && halving(probe.ratios[1], probe.ratios[2]) {
            break;
        }
        start /= 2.0;
    }
    Ok((0..points).map(|k| start * 0.5f64.powi(k as i32)).collect())
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `max |a - n| / max(||a||_inf, ||n||_inf)`; zero when both are zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

/// Runs both tests on one parameter.
pub fn check_parameter<F>(
    name: &str,
    mut loss: F,
    theta: &[f64],
    grad: &[f64],
    seed: u64,
    scales: &[f64],
    tolerances: Tolerances,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let curve = remainder_curve(&mut loss, theta, grad, seed, scales)?;
    let numeric = finite_diff(&mut loss, theta)?;
    let fd_max_rel_error = max_relative_error(grad, &numeric);
    let resolved = curve.resolved();
    let judged = &curve.ratios[..resolved];
    let monotone = resolved >= MIN_RESOLVED && judged.windows(2).all(|w| w[1] < w[0]);
    let decay = match (judged.first(), judged.last()) {
        (Some(&first), Some(&last)) if first > 0.0 => last / first,
        _ => f64::INFINITY,
    };
    let passed = monotone && decay < tolerances.decay && fd_max_rel_error <= tolerances.fd_relative;
    Ok(GradCheckReport {
        parameter: name.to_string(),
        slope: log_slope(&curve.norms[..resolved], judged),
        scales: curve.norms,
        remainders: curve.remainders,
        ratios: curve.ratios,
        resolved,
        floor_limited: resolved < scales.len(),
        monotone,
        decay,
        fd_max_rel_error,
        tolerances,
        passed,
    })
}

/// Label of a model parameter in reports: `U1`, `G`, `b`, `W`, with a layer
/// suffix when the model has more than one layer.
pub fn parameter_label(layer: usize, layers: usize, p: Param) -> String {
    let base = match p {
        Param::Factor(n) => format!("U{}", n + 1),
        Param::Core => "G".to_string(),
        Param::Bias => "b".to_string(),
        Param::Weight => "W".to_string(),
    };
    if layers > 1 {
        format!("{base}@{}", layer + 1)
    } else {
        base
    }
}

/// Perturbation scales used by [`LossContext::check_all`].
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Fixed(Vec<f64>),
    /// `points` halvings from a start found by [`asymptotic_scales`].
    Asymptotic { points: usize },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Fixed(default_scales())
    }
}

/// Model, batch and targets with every parameter frozen except the one under
/// test.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub model: NetworkModel,
    pub input: Matrix,
    pub loss: LossKind,
    pub real_targets: Option<Matrix>,
    pub class_targets: Vec<usize>,
}

impl LossContext {
    fn targets(&self) -> Targets<'_> {
        match &self.real_targets {
            Some(m) => Targets::Real(m),
            None => Targets::Classes(&self.class_targets),
        }
    }

    pub fn value(&self) -> Result<f64> {
        let out = self.model.predict(&self.input)?;
        Ok(loss_and_grad(self.loss, &out, self.targets())?.0)
    }

    fn value_with(&self, layer: usize, p: Param, values: &[f64]) -> Result<f64> {
        let mut model = self.model.clone();
        model.layer_mut(layer).set_param(p, values)?;
        let out = model.predict(&self.input)?;
        Ok(loss_and_grad(self.loss, &out, self.targets())?.0)
    }

    fn value_at_input(&self, values: &[f64]) -> Result<f64> {
        let x = Matrix::from_column_slice(self.input.nrows(), self.input.ncols(), values);
        let out = self.model.predict(&x)?;
        Ok(loss_and_grad(self.loss, &out, self.targets())?.0)
    }

    /// Checks every parameter of every layer, then the input. When `corrupt`
    /// is set, the largest-magnitude entry of each analytic gradient is
    /// scaled by 1.1 before checking.
    pub fn check_all(
        &self,
        seed: u64,
        schedule: &Schedule,
        tolerances: Tolerances,
        corrupt: bool,
    ) -> Result<Vec<GradCheckReport>> {
        let mut model = self.model.clone();
        let out = model.forward(&self.input)?;
        let (_, d_loss) = loss_and_grad(self.loss, &out, self.targets())?;
        let grads = model.backward(&d_loss)?;
        let layers = model.layers().len();
        let mut reports = Vec::new();
        let mut stream = seed;
        for (l, layer) in model.layers().iter().enumerate() {
            for p in layer.params() {
                let theta = layer.param(p).expect("listed parameter");
                let mut grad = grads[l].param(p).expect("listed parameter");
                if corrupt {
                    corrupt_largest(&mut grad);
                }
                stream = stream.wrapping_add(1);
                let loss = |v: &[f64]| self.value_with(l, p, v);
                let scales = resolve_schedule(schedule, loss, &theta, &grad, stream)?;
                reports.push(check_parameter(
                    &parameter_label(l, layers, p),
                    loss,
                    &theta,
                    &grad,
                    stream,
                    &scales,
                    tolerances,
                )?);
            }
        }
        let mut grad = grads[0].input().as_slice().to_vec();
        if corrupt {
            corrupt_largest(&mut grad);
        }
        stream = stream.wrapping_add(1);
        let loss = |v: &[f64]| self.value_at_input(v);
        let scales = resolve_schedule(schedule, loss, self.input.as_slice(), &grad, stream)?;
        reports.push(check_parameter("X", loss, self.input.as_slice(), &grad, stream, &scales, tolerances)?);
        Ok(reports)
    }
}

fn resolve_schedule<F>(schedule: &Schedule, loss: F, theta: &[f64], grad: &[f64], seed: u64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    match schedule {
        Schedule::Fixed(scales) => Ok(scales.clone()),
        Schedule::Asymptotic { points } => asymptotic_scales(loss, theta, grad, seed, *points),
    }
}

fn corrupt_largest(grad: &mut [f64]) {
    if let Some(k) = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())) {
        grad[k] *= 1.1;
    }
}

/// Single-layer verification setup: Gaussian dense weights of shape
/// `(input_shape..., output)` decomposed by HOSVD at `ranks`, Gaussian bias,
/// one Gaussian input sample and Gaussian targets, identity activation, MSE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckSetup {
    pub input_shape: Vec<usize>,
    pub output: usize,
    pub ranks: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self { input_shape: vec![5, 5, 5], output: 3, ranks: vec![5, 5, 5, 3], samples: 1, seed: 0 }
    }
}

impl GradCheckSetup {
    pub fn build(&self) -> Result<LossContext> {
        if self.samples == 0 {
            return Err(Error::Config("gradient check needs at least one sample".into()));
        }
        let mut shape = self.input_shape.clone();
        shape.push(self.output);
        crate::ttl::validate_ranks(&shape, &self.ranks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let len: usize = shape.iter().product();
        let dense = DenseTensor::new(shape.clone(), gaussian(len))?;
        let weights = hosvd(&dense, &self.ranks)?;
        let bias = DVector::from_vec(gaussian(self.output));
        let layer = TuckerLayer::new(weights, bias, Activation::Identity)?;
        let dim: usize = self.input_shape.iter().product();
        let input = Matrix::from_vec(dim, self.samples, gaussian(dim * self.samples));
        let targets = Matrix::from_vec(self.output, self.samples, gaussian(self.output * self.samples));
        Ok(LossContext {
            model: NetworkModel::new(vec![Layer::Tucker(layer)])?,
            input,
            loss: LossKind::Mse,
            real_targets: Some(targets),
            class_targets: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub reports: Vec<GradCheckReport>,
}

impl GradCheckSummary {
    pub fn new(reports: Vec<GradCheckReport>) -> Self {
        Self { passed: reports.iter().all(|r| r.passed), reports }
    }
}
