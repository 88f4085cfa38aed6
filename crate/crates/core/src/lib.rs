//! Tucker tensor layers: fully connected layers whose weight matrix is an
//! unfolding of a Tucker-format weight tensor, trained with analytic
//! tensor-valued back-propagation.

pub mod activation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod insight;
pub mod linalg;
pub mod model_io;
pub mod network;
pub mod tensor;
pub mod ttl;
pub mod tucker;

pub use activation::Activation;
pub use data::{gen_synthetic, LabeledDataset, SyntheticKind};
pub use error::{Error, Result};
pub use gradcheck::{GradCheckReport, GradCheckSetup, Tolerances};
pub use insight::{modal_covariance_features, normalized_grad_norm, GradientTrace, TraceMode};
pub use network::{
    evaluate, loss_and_grad, train, ClassifierSpec, DenseLayer, History, Layer, LayerGrads, LossKind,
    NetworkModel, Param, Targets, TrainConfig,
};
pub use model_io::{decode_model, encode_model, load_model, save_model};
pub use tensor::{kronecker, mode_permutation, DenseTensor, IndexPermutation, Matrix};
pub use ttl::{GradBundle, TuckerLayer};
pub use tucker::{compression_factor, hosvd, TuckerWeights};
