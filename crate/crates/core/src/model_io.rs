//! Binary model artifacts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TTLMODEL"  version:u8  layers:u32
//! per layer:   kind:u8 (0 tucker, 1 dense)  activation:u8
//!   tucker:    order:u32  sizes:[u32; order]  ranks:[u32; order]
//!   dense:     rows:u32  cols:u32
//! parameters:  f64 values, layer by layer
//!   tucker:    core, factors 1..order (column-major), bias
//!   dense:     weight (column-major), bias
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::network::{DenseLayer, Layer, NetworkModel};
use crate::tensor::{DenseTensor, Matrix};
use crate::ttl::TuckerLayer;
use crate::tucker::TuckerWeights;

pub const MAGIC: &[u8; 8] = b"TTLMODEL";
pub const VERSION: u8 = 1;
const KIND_TUCKER: u8 = 0;
const KIND_DENSE: u8 = 1;
/// Limits that keep a hostile header from requesting absurd allocations.
const MAX_LAYERS: usize = 1024;
const MAX_ORDER: usize = 32;

enum Descriptor {
    Tucker { activation: Activation, sizes: Vec<usize>, ranks: Vec<usize> },
    Dense { activation: Activation, rows: usize, cols: usize },
}

impl Descriptor {
    fn parameter_count(&self) -> Option<usize> {
        match self {
            Descriptor::Tucker { sizes, ranks, .. } => {
                let core = ranks.iter().try_fold(1usize, |a, &r| a.checked_mul(r))?;
                let factors = sizes
                    .iter()
                    .zip(ranks)
                    .try_fold(0usize, |a, (&i, &r)| a.checked_add(i.checked_mul(r)?))?;
                core.checked_add(factors)?.checked_add(*sizes.last()?)
            }
            Descriptor::Dense { rows, cols, .. } => rows.checked_mul(*cols)?.checked_add(*rows),
        }
    }
}

pub fn encode_model(model: &NetworkModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for layer in model.layers() {
        match layer {
            Layer::Tucker(l) => {
                out.extend([KIND_TUCKER, l.activation().code()]);
                let w = l.weights();
                put(&mut out, w.order());
                w.shape().into_iter().for_each(|v| put(&mut out, v));
                w.ranks().into_iter().for_each(|v| put(&mut out, v));
            }
            Layer::Dense(l) => {
                out.extend([KIND_DENSE, l.activation().code()]);
                put(&mut out, l.weight().nrows());
                put(&mut out, l.weight().ncols());
            }
        }
    }
    let mut floats = |values: &[f64]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for layer in model.layers() {
        match layer {
            Layer::Tucker(l) => {
                floats(l.weights().core().data());
                l.weights().factors().iter().for_each(|u| floats(u.as_slice()));
                floats(l.bias().as_slice());
            }
            Layer::Dense(l) => {
                floats(l.weight().as_slice());
                floats(l.bias().as_slice());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.at.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        raw.chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().expect("chunk of eight"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite("model parameter".into()))
                }
            })
            .collect()
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<NetworkModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Malformed("not a model artifact".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Malformed(format!("unsupported model version {version}")));
    }
    let count = r.u32()?;
    if count == 0 || count > MAX_LAYERS {
        return Err(Error::Malformed(format!("layer count {count}")));
    }
    let mut descriptors = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.u8()?;
        let code = r.u8()?;
        let activation =
            Activation::from_code(code).ok_or_else(|| Error::Malformed(format!("activation code {code}")))?;
        descriptors.push(match kind {
            KIND_TUCKER => {
                let order = r.u32()?;
                if !(2..=MAX_ORDER).contains(&order) {
                    return Err(Error::Malformed(format!("Tucker layer of order {order}")));
                }
                let sizes = (0..order).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let ranks = (0..order).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                crate::ttl::validate_ranks(&sizes, &ranks)?;
                Descriptor::Tucker { activation, sizes, ranks }
            }
            KIND_DENSE => {
                let rows = r.u32()?;
                let cols = r.u32()?;
                if rows == 0 || cols == 0 {
                    return Err(Error::Malformed("empty dense layer".into()));
                }
                Descriptor::Dense { activation, rows, cols }
            }
            other => return Err(Error::Malformed(format!("layer kind {other}"))),
        });
    }
    let total = descriptors
        .iter()
        .try_fold(0usize, |a, d| a.checked_add(d.parameter_count()?))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Malformed("parameter count overflows".into()))?;
    let remaining = bytes.len() - r.at;
    if remaining != total {
        return Err(if remaining < total {
            Error::Truncated { needed: r.at + total, found: bytes.len() }
        } else {
            Error::Malformed(format!("{} trailing bytes", remaining - total))
        });
    }
    let mut layers = Vec::with_capacity(count);
    for d in descriptors {
        layers.push(match d {
            Descriptor::Tucker { activation, sizes, ranks } => {
                let core = DenseTensor::new(ranks.clone(), r.floats(ranks.iter().product())?)?;
                let factors = sizes
                    .iter()
                    .zip(&ranks)
                    .map(|(&i, &k)| Ok(Matrix::from_vec(i, k, r.floats(i * k)?)))
                    .collect::<Result<Vec<_>>>()?;
                let out = *sizes.last().expect("order >= 2");
                let bias = DVector::from_vec(r.floats(out)?);
                Layer::Tucker(TuckerLayer::new(TuckerWeights::new(core, factors)?, bias, activation)?)
            }
            Descriptor::Dense { activation, rows, cols } => {
                let weight = Matrix::from_vec(rows, cols, r.floats(rows * cols)?);
                let bias = DVector::from_vec(r.floats(rows)?);
                Layer::Dense(DenseLayer::new(weight, bias, activation)?)
            }
        });
    }
    NetworkModel::new(layers)
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ClassifierSpec;

    fn small_model() -> NetworkModel {
        let spec = ClassifierSpec {
            input_shape: vec![4, 3],
            ranks: vec![2, 3, 4],
            hidden: vec![5, 6],
            classes: 3,
            activation: Activation::Sigmoid,
        };
        NetworkModel::classifier(&spec, 21).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let model = small_model();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode_model(&small_model());
        for cut in [0, 5, 9, 13, 20, bytes.len() - 1] {
            assert!(decode_model(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Malformed(_))));
    }

    #[test]
    fn bad_header_fields_rejected() {
        let bytes = encode_model(&small_model());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(decode_model(&wrong_version).is_err());
        let mut wrong_kind = bytes.clone();
        wrong_kind[13] = 7;
        assert!(decode_model(&wrong_kind).is_err());
        let mut wrong_activation = bytes;
        wrong_activation[14] = 200;
        assert!(decode_model(&wrong_activation).is_err());
    }

    #[test]
    fn huge_declared_sizes_do_not_allocate() {
        let mut bytes = MAGIC.to_vec();
        bytes.push(VERSION);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend([KIND_DENSE, 0]);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_model(&bytes).is_err());
    }
}
