//! Gradient-norm traces and modal covariance features.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Matrix};

/// How factor gradient norms are recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    #[default]
    Off,
    /// One record per batch.
    PerBatch,
    /// One record per epoch, from its last batch.
    LastBatch,
    /// One record per epoch, averaged over its batches.
    EpochMean,
}

impl std::str::FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(TraceMode::Off),
            "batch" => Ok(TraceMode::PerBatch),
            "epoch" => Ok(TraceMode::LastBatch),
            "epoch-mean" => Ok(TraceMode::EpochMean),
            other => Err(Error::Config(format!("unknown trace mode {other:?} (off, batch, epoch, epoch-mean)"))),
        }
    }
}

impl std::fmt::Display for TraceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TraceMode::Off => "off",
            TraceMode::PerBatch => "batch",
            TraceMode::LastBatch => "epoch",
            TraceMode::EpochMean => "epoch-mean",
        })
    }
}

/// Normalized gradient norm of one factor of one layer. `layer` and `factor`
/// are 0-based; `epoch` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub epoch: usize,
    pub layer: usize,
    pub factor: usize,
    pub value: f64,
}

/// `||g||_F / (I R)` for an `I x R` gradient.
pub fn normalized_grad_norm(g: &Matrix) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.norm() / g.len() as f64
}

/// Mean trace value per factor of `layer`, indexed by factor.
pub fn mean_by_factor(traces: &[GradientTrace], layer: usize) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for t in traces.iter().filter(|t| t.layer == layer) {
        if sums.len() <= t.factor {
            sums.resize(t.factor + 1, (0.0, 0));
        }
        sums[t.factor].0 += t.value;
        sums[t.factor].1 += 1;
    }
    sums.into_iter().map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

/// Writes `epoch,layer,factor,normalized_grad_norm`; layer and factor are
/// written 1-based to match the usual `U(1), U(2), ...` labels.
pub fn write_trace_csv<W: Write>(out: W, traces: &[GradientTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "layer", "factor", "normalized_grad_norm"])?;
    for t in traces {
        w.write_record([
            t.epoch.to_string(),
            (t.layer + 1).to_string(),
            (t.factor + 1).to_string(),
            format!("{:e}", t.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `vec(X_(n) X_(n)ᵀ)`, the `I_n x I_n` Gram matrix of the mode-`n` unfolding.
pub fn modal_covariance_features(t: &DenseTensor, n: usize) -> Result<DVector<f64>> {
    let x = t.unfold(n)?;
    let gram = &x * x.transpose();
    Ok(DVector::from_column_slice(gram.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_norm_examples() {
        assert_eq!(normalized_grad_norm(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(normalized_grad_norm(&Matrix::from_element(2, 2, 1.0)), 0.5);
        let g = Matrix::from_row_slice(2, 1, &[3.0, -4.0]);
        assert_eq!(normalized_grad_norm(&(&g * -2.0)), 2.0 * normalized_grad_norm(&g));
    }

    #[test]
    fn ones_image_channel_gram() {
        let t = DenseTensor::from_fn(&[32, 32, 3], |_| 1.0).unwrap();
        let x = modal_covariance_features(&t, 2).unwrap();
        assert_eq!(x.len(), 9);
        assert!(x.iter().all(|&v| v == 1024.0));
        let zero = DenseTensor::zeros(&[4, 4, 3]).unwrap();
        assert!(modal_covariance_features(&zero, 0).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(modal_covariance_features(&zero, 3), Err(Error::ModeOutOfRange { .. })));
    }

    #[test]
    fn trace_mode_parsing() {
        for m in [TraceMode::Off, TraceMode::PerBatch, TraceMode::LastBatch, TraceMode::EpochMean] {
            assert_eq!(m.to_string().parse::<TraceMode>().unwrap(), m);
        }
        assert!("sometimes".parse::<TraceMode>().is_err());
    }

    #[test]
    fn trace_csv_and_means() {
        let traces = [
            GradientTrace { epoch: 1, layer: 0, factor: 0, value: 1.0 },
            GradientTrace { epoch: 1, layer: 0, factor: 1, value: 0.5 },
            GradientTrace { epoch: 2, layer: 0, factor: 0, value: 3.0 },
            GradientTrace { epoch: 2, layer: 0, factor: 1, value: 0.25 },
        ];
        assert_eq!(mean_by_factor(&traces, 0), vec![2.0, 0.375]);
        assert!(mean_by_factor(&traces, 1).is_empty());
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,layer,factor,normalized_grad_norm\n1,1,1,"));
        assert_eq!(text.lines().count(), 5);
    }
}
