use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Point-wise activation applied to a layer's preactivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Relu => pre.map(|x| x.max(0.0)),
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Identity => pre.clone(),
        }
    }

    /// Element-wise derivative at the preactivation. ReLU'(0) is 0.
    pub fn derivative(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Relu => pre.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Activation::Sigmoid => pre.map(|x| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }),
            Activation::Identity => Matrix::from_element(pre.nrows(), pre.ncols(), 1.0),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
