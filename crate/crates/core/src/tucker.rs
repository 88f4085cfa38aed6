//! Weight tensors held in Tucker format: a core `G` of shape `(R1, ..., R_K)`
//! and one factor matrix `U_n` of size `I_n x R_n` per mode, so that
//! `W = G x_1 U_1 x_2 ... x_K U_K`.

use crate::error::{Error, Result};
use crate::linalg::leading_left_singular_vectors;
use crate::tensor::{DenseTensor, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerWeights {
    core: DenseTensor,
    factors: Vec<Matrix>,
}

impl TuckerWeights {
    pub fn new(core: DenseTensor, factors: Vec<Matrix>) -> Result<Self> {
        if factors.len() != core.order() {
            return Err(Error::DimensionMismatch(format!(
                "core of order {} needs as many factors, got {}",
                core.order(),
                factors.len()
            )));
        }
        for (n, (u, &r)) in factors.iter().zip(core.shape()).enumerate() {
            if u.ncols() != r {
                return Err(Error::DimensionMismatch(format!(
                    "factor {n} has {} columns but core mode {n} has size {r}",
                    u.ncols()
                )));
            }
            if u.nrows() == 0 || r > u.nrows() {
                return Err(Error::RankOutOfRange { mode: n, rank: r, size: u.nrows() });
            }
        }
        Ok(Self { core, factors })
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn factor(&self, n: usize) -> &Matrix {
        &self.factors[n]
    }

    pub fn core_mut(&mut self) -> &mut DenseTensor {
        &mut self.core
    }

    pub fn factors_mut(&mut self) -> &mut [Matrix] {
        &mut self.factors
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    /// Mode sizes `(I_1, ..., I_K)` of the represented tensor.
    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|u| u.nrows()).collect()
    }

    /// Multilinear rank `(R_1, ..., R_K)`.
    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    /// Number of stored parameters: core plus factor entries.
    pub fn parameter_count(&self) -> usize {
        self.core.len() + self.factors.iter().map(|u| u.len()).sum::<usize>()
    }

    /// `W = G x_1 U_1 ... x_K U_K` as a dense tensor.
    pub fn reconstruct(&self) -> DenseTensor {
        self.core
            .multi_mode_product(self.factors.iter().enumerate())
            .expect("factor shapes validated at construction")
    }

    /// Mode-`n` unfolding of the represented tensor,
    /// `U_n G_(n) (U_K ⊗ ... ⊗ U_{n+1} ⊗ U_{n-1} ⊗ ... ⊗ U_1)ᵀ`, with the
    /// Kronecker factor applied as a sequence of mode products.
    pub fn unfold(&self, n: usize) -> Result<Matrix> {
        if n >= self.order() {
            return Err(Error::ModeOutOfRange { mode: n, order: self.order() });
        }
        let partial = self
            .core
            .multi_mode_product(self.factors.iter().enumerate().filter(|(k, _)| *k != n))?;
        Ok(&self.factors[n] * partial.unfold(n)?)
    }

    /// Dense element count divided by stored parameter count.
    pub fn compression_factor(&self) -> f64 {
        compression_factor(&self.shape(), &self.ranks())
    }
}

/// `prod I_n / (prod R_n + sum I_n R_n)`.
pub fn compression_factor(shape: &[usize], ranks: &[usize]) -> f64 {
    let dense: f64 = shape.iter().map(|&i| i as f64).product();
    let core: f64 = ranks.iter().map(|&r| r as f64).product();
    let factors: f64 = shape.iter().zip(ranks).map(|(&i, &r)| (i * r) as f64).sum();
    dense / (core + factors)
}

/// Truncated higher-order SVD: factor `n` holds the `R_n` leading left
/// singular vectors of the mode-`n` unfolding and the core is the tensor
/// projected onto them.
pub fn hosvd(t: &DenseTensor, ranks: &[usize]) -> Result<TuckerWeights> {
    if ranks.len() != t.order() {
        return Err(Error::DimensionMismatch(format!(
            "{} ranks given for a tensor of order {}",
            ranks.len(),
            t.order()
        )));
    }
    for (n, (&r, &size)) in ranks.iter().zip(t.shape()).enumerate() {
        if r == 0 || r > size {
            return Err(Error::RankOutOfRange { mode: n, rank: r, size });
        }
    }
    let factors = ranks
        .iter()
        .enumerate()
        .map(|(n, &r)| leading_left_singular_vectors(&t.unfold(n)?, r))
        .collect::<Result<Vec<_>>>()?;
    let transposed: Vec<Matrix> = factors.iter().map(|u| u.transpose()).collect();
    let core = t.multi_mode_product(transposed.iter().enumerate())?;
    TuckerWeights::new(core, factors)
}
