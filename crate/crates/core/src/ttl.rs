//! The Tucker tensor layer: a fully connected layer whose weight matrix is
//! the last-mode unfolding `W_(N+1)` of a weight tensor held in Tucker format.
//!
//! A batch is a matrix `Z` of size `I_1 * ... * I_N x M` whose column `m` is
//! `vec(X_m)`. Because matrices are column-major, the storage of `Z` is also
//! the Little-Endian storage of an `(I_1, ..., I_N, M)` tensor, which is what
//! the contracted forward and backward passes operate on.
//!
//! Two gradient paths exist. [`TuckerLayer::backward`] contracts the
//! Kronecker structure away and is what training uses.
//! [`TuckerLayer::backward_naive`] materializes every Jacobian literally
//! (`vec(X)ᵀ ⊗ I`, `(K G_(n)ᵀ) ⊗ I`, the mode permutation, ...) and exists
//! to cross-check the first on small shapes.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{kronecker, kronecker_chain, mode_permutation, mode_product_raw, DenseTensor, Matrix};
use crate::tucker::{hosvd, TuckerWeights};

/// Default element budget for any single Jacobian built by the naive path.
pub const DEFAULT_NAIVE_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerLayer {
    weights: TuckerWeights,
    bias: DVector<f64>,
    activation: Activation,
}

/// Gradients of a loss with respect to every parameter of a [`TuckerLayer`]
/// and with respect to its input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub factors: Vec<Matrix>,
    pub core: DenseTensor,
    pub bias: DVector<f64>,
    pub input: Matrix,
}

impl GradBundle {
    pub fn is_finite(&self) -> bool {
        self.factors.iter().all(|f| f.iter().all(|v| v.is_finite()))
            && self.core.data().iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
            && self.input.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry-wise difference relative to the largest entry.
    pub fn max_relative_difference(&self, other: &GradBundle) -> f64 {
        fn pair(a: &[f64], b: &[f64]) -> f64 {
            let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if scale == 0.0 {
                diff
            } else {
                diff / scale
            }
        }
        let mut worst = pair(self.core.data(), other.core.data())
            .max(pair(self.bias.as_slice(), other.bias.as_slice()))
            .max(pair(self.input.as_slice(), other.input.as_slice()));
        for (a, b) in self.factors.iter().zip(&other.factors) {
            worst = worst.max(pair(a.as_slice(), b.as_slice()));
        }
        worst
    }
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl TuckerLayer {
    pub fn new(weights: TuckerWeights, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if weights.order() < 2 {
            return Err(Error::InvalidShape("a Tucker layer needs at least one input mode".into()));
        }
        let out = weights.factors().last().map(|u| u.nrows()).unwrap_or(0);
        if bias.len() != out {
            return Err(Error::DimensionMismatch(format!(
                "bias of length {} for an output of size {out}",
                bias.len()
            )));
        }
        Ok(Self { weights, bias, activation })
    }

    /// Random initialization. Factors are drawn from `N(0, 1/R_n)` and the
    /// core from `N(0, 2/fan_in)`, so each entry of the implied dense weight
    /// has variance `2/fan_in`. Biases start at zero.
    pub fn random<R: Rng + ?Sized>(
        input_shape: &[usize],
        output: usize,
        ranks: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        shape.push(output);
        validate_ranks(&shape, ranks)?;
        let fan_in: usize = input_shape.iter().product();
        let factors = shape
            .iter()
            .zip(ranks)
            .map(|(&i, &r)| {
                let normal = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("positive std");
                Matrix::from_fn(i, r, |_, _| normal.sample(rng))
            })
            .collect();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let core_len: usize = ranks.iter().product();
        let core = DenseTensor::new(ranks.to_vec(), (0..core_len).map(|_| normal.sample(rng)).collect())?;
        Self::new(TuckerWeights::new(core, factors)?, DVector::zeros(output), activation)
    }

    /// Decomposes a dense weight tensor of shape `(I_1, ..., I_N, I_{N+1})`
    /// with truncated HOSVD at the given multilinear rank.
    pub fn from_dense(weight: &DenseTensor, ranks: &[usize], bias: DVector<f64>, activation: Activation) -> Result<Self> {
        Self::new(hosvd(weight, ranks)?, bias, activation)
    }

    pub fn weights(&self) -> &TuckerWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut TuckerWeights {
        &mut self.weights
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

    /// Number of input modes `N`.
    pub fn input_order(&self) -> usize {
        self.weights.order() - 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = self.weights.shape();
        s.pop();
        s
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn compression_factor(&self) -> f64 {
        self.weights.compression_factor()
    }

    /// `W_(N+1)`, the dense weight matrix this layer represents.
    pub fn dense_weight(&self) -> Matrix {
        self.weights.unfold(self.input_order()).expect("last mode is valid")
    }

    fn check_batch(&self, z: &Matrix) -> Result<()> {
        if z.nrows() != self.input_dim() || z.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "layer expects {} x M input with M >= 1, got {} x {}",
                self.input_dim(),
                z.nrows(),
                z.ncols()
            )));
        }
        Ok(())
    }

    /// Applies `U_kᵀ` along every input mode except `skip`; the batch mode is
    /// carried along as the last mode. Returns `(data, shape)`.
    fn project(&self, z: &Matrix, skip: Option<usize>) -> (Vec<f64>, Vec<usize>) {
        let mut shape = self.input_shape();
        shape.push(z.ncols());
        let mut data = z.as_slice().to_vec();
        for n in 0..self.input_order() {
            if Some(n) == skip {
                continue;
            }
            let ut = self.weights.factor(n).transpose();
            let (d, s) = mode_product_raw(&data, &shape, &ut, n).expect("shapes checked");
            data = d;
            shape = s;
        }
        (data, shape)
    }

    /// `Y = (U_N ⊗ ... ⊗ U_1)ᵀ Z`, of size `R_1...R_N x M`.
    fn projected_input(&self, z: &Matrix) -> Matrix {
        let (data, _) = self.project(z, None);
        let rows: usize = self.weights.ranks()[..self.input_order()].iter().product();
        Matrix::from_vec(rows, z.ncols(), data)
    }

    fn core_last_unfolding(&self) -> Matrix {
        self.weights.core().unfold(self.input_order()).expect("last mode is valid")
    }

    /// Preactivation `U_{N+1} G_(N+1) vec(X x_1 U_1ᵀ ... x_N U_Nᵀ) + b`,
    /// column by column.
    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        self.check_batch(z)?;
        let y = self.projected_input(z);
        let h = self.core_last_unfolding() * y;
        let mut f = self.weights.factor(self.input_order()) * h;
        for mut col in f.column_iter_mut() {
            col += &self.bias;
        }
        Ok(f)
    }

    fn check_backward(&self, z: &Matrix, d: &Matrix) -> Result<()> {
        self.check_batch(z)?;
        if d.nrows() != self.output_dim() || d.ncols() != z.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "output gradient must be {} x {}, got {} x {}",
                self.output_dim(),
                z.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        ensure_finite(z, "layer input")?;
        ensure_finite(d, "output gradient")
    }

    /// Gradients given `d = ∂L/∂F` for the batch `z`, by contraction.
    pub fn backward(&self, z: &Matrix, d: &Matrix) -> Result<GradBundle> {
        self.check_backward(z, d)?;
        let n_in = self.input_order();
        let core_shape = self.weights.ranks();
        let u_out = self.weights.factor(n_in);
        let g_last = self.core_last_unfolding();

        let y = self.projected_input(z);
        let e = u_out.transpose() * d;

        // ∂L/∂G_(N+1) = U_{N+1}ᵀ D Zᵀ (U_N ⊗ ... ⊗ U_1) = E Yᵀ
        let d_core = DenseTensor::fold(&(&e * y.transpose()), n_in, &core_shape)?;

        let mut factors = Vec::with_capacity(n_in + 1);
        for n in 0..n_in {
            // (∂L/∂W x_{k != n} U_kᵀ) as an (R_1..I_n..R_N, R_{N+1}) tensor.
            let (t, mut t_shape) = self.project(z, Some(n));
            let rows = t.len() / z.ncols();
            let t = Matrix::from_vec(rows, z.ncols(), t);
            let s = &t * e.transpose();
            t_shape.pop();
            t_shape.push(e.nrows());
            let s = DenseTensor::new(t_shape, s.as_slice().to_vec())?;
            let g_n = self.weights.core().unfold(n)?;
            factors.push(s.unfold(n)? * g_n.transpose());
        }
        // ∂L/∂U_{N+1} = D Zᵀ (U_N ⊗ ... ⊗ U_1) G_(N+1)ᵀ
        let h = &g_last * &y;
        factors.push(d * h.transpose());

        let bias = DVector::from_iterator(d.nrows(), d.row_iter().map(|r| r.sum()));

        // ∂L/∂Z = W_(N+1)ᵀ D, with the Kronecker factor applied mode by mode.
        let v = g_last.transpose() * &e;
        let mut shape: Vec<usize> = core_shape[..n_in].to_vec();
        shape.push(z.ncols());
        let mut data = v.as_slice().to_vec();
        for n in 0..n_in {
            let (dd, s) = mode_product_raw(&data, &shape, self.weights.factor(n), n)?;
            data = dd;
            shape = s;
        }
        let input = Matrix::from_vec(z.nrows(), z.ncols(), data);

        Ok(GradBundle { factors, core: d_core, bias, input })
    }

    /// Gradients by the literal Jacobian products, with every Kronecker
    /// product and the mode permutation materialized. Refuses shapes whose
    /// largest Jacobian exceeds `budget` elements.
    pub fn backward_naive(&self, z: &Matrix, d: &Matrix, budget: usize) -> Result<GradBundle> {
        self.check_backward(z, d)?;
        let n_in = self.input_order();
        let shape = self.weights.shape();
        let ranks = self.weights.ranks();
        let total: usize = shape.iter().product();
        let m = z.ncols();
        let out = self.output_dim();

        let check = |rows: usize, cols: usize| -> Result<()> {
            let needed = rows.saturating_mul(cols);
            if needed > budget {
                Err(Error::BudgetExceeded { needed, budget })
            } else {
                Ok(())
            }
        };
        check(m * out, total)?;
        check(total, ranks.iter().product())?;
        for n in 0..=n_in {
            check(total, shape[n] * ranks[n])?;
        }

        let u = self.weights.factors();
        let core = self.weights.core();
        // U_N ⊗ ... ⊗ U_1
        let k_in = kronecker_chain(u[..n_in].iter().rev());
        let g_last = core.unfold(n_in)?;
        let w_last = &u[n_in] * &g_last * k_in.transpose();

        // ∂F/∂W_(N+1) = Zᵀ ⊗ I
        let df_dw = kronecker(&z.transpose(), &Matrix::identity(out, out));
        let vec_d = Matrix::from_column_slice(out * m, 1, d.as_slice());
        let g = df_dw.transpose() * &vec_d;

        let mut factors = Vec::with_capacity(n_in + 1);
        for n in 0..=n_in {
            // ∂vec(W_(n))/∂vec(U_n) = (K_{-n} G_(n)ᵀ) ⊗ I_{I_n}
            let k_rest = kronecker_chain((0..=n_in).rev().filter(|&k| k != n).map(|k| &u[k]));
            let g_n = core.unfold(n)?;
            let dwn_du = kronecker(&(k_rest * g_n.transpose()), &Matrix::identity(shape[n], shape[n]));
            // Rows reordered from vec(W_(n)) to vec(W_(N+1)).
            let perm = mode_permutation(&shape, n_in, n)?;
            let dwl_du = perm.permute_rows(&dwn_du)?;
            let grad = dwl_du.transpose() * &g;
            factors.push(Matrix::from_column_slice(shape[n], ranks[n], grad.as_slice()));
        }

        // ∂vec(W_(N+1))/∂vec(G_(N+1)) = (U_N ⊗ ... ⊗ U_1) ⊗ U_{N+1}
        let dw_dg = kronecker(&k_in, &u[n_in]);
        let grad_core = dw_dg.transpose() * &g;
        let core_rows = ranks[n_in];
        let core_grad = Matrix::from_column_slice(core_rows, grad_core.len() / core_rows, grad_core.as_slice());
        let d_core = DenseTensor::fold(&core_grad, n_in, &ranks)?;

        // ∂L/∂b = (1_Mᵀ ⊗ I) vec(D)
        let ones = Matrix::from_element(1, m, 1.0);
        let bias_grad = kronecker(&ones, &Matrix::identity(out, out)) * &vec_d;
        let bias = DVector::from_column_slice(bias_grad.as_slice());

        let input = w_last.transpose() * d;
        Ok(GradBundle { factors, core: d_core, bias, input })
    }

    fn check_grads(&self, grads: &GradBundle) -> Result<()> {
        let ok = grads.factors.len() == self.weights.order()
            && grads.factors.iter().zip(self.weights.factors()).all(|(g, u)| g.shape() == u.shape())
            && grads.core.shape() == self.weights.core().shape()
            && grads.bias.len() == self.bias.len();
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("gradient bundle does not match layer parameters".into()))
        }
    }

    /// One synchronous descent step: every factor, the core and the bias move
    /// by `-eta` times their gradient.
    pub fn apply_update(&mut self, grads: &GradBundle, eta: f64) -> Result<()> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("step size must be finite and non-negative, got {eta}")));
        }
        self.check_grads(grads)?;
        for (u, g) in self.weights.factors_mut().iter_mut().zip(&grads.factors) {
            u.zip_apply(g, |a, b| *a -= eta * b);
        }
        for (c, g) in self.weights.core_mut().data_mut().iter_mut().zip(grads.core.data()) {
            *c -= eta * g;
        }
        self.bias.axpy(-eta, &grads.bias, 1.0);
        Ok(())
    }
}

/// Checks `1 <= R_n <= I_n` for every mode.
pub fn validate_ranks(shape: &[usize], ranks: &[usize]) -> Result<()> {
    if shape.len() != ranks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ranks for {} modes",
            ranks.len(),
            shape.len()
        )));
    }
    for (n, (&i, &r)) in shape.iter().zip(ranks).enumerate() {
        if i == 0 {
            return Err(Error::InvalidShape(format!("mode {n} has size 0")));
        }
        if r == 0 || r > i {
            return Err(Error::RankOutOfRange { mode: n, rank: r, size: i });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
    }

    fn random_layer(input: &[usize], out: usize, ranks: &[usize], seed: u64) -> TuckerLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = TuckerLayer::random(input, out, ranks, Activation::Identity, &mut rng).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for b in layer.bias_mut().iter_mut() {
            *b = normal.sample(&mut rng);
        }
        layer
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut layer = random_layer(&[3, 2], 4, &[2, 2, 3], 1);
        layer.bias_mut().fill(0.0);
        let f = layer.forward(&Matrix::zeros(6, 3)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_dense_weight() {
        let layer = random_layer(&[3, 4, 2], 5, &[2, 3, 2, 4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = gaussian_matrix(24, 7, &mut rng);
        let f = layer.forward(&z).unwrap();
        let mut dense = layer.dense_weight() * &z;
        for mut col in dense.column_iter_mut() {
            col += layer.bias();
        }
        assert!((f - dense).abs().max() < 1e-12);
    }

    #[test]
    fn zero_output_gradient_gives_zero_bundle() {
        let layer = random_layer(&[3, 3], 2, &[2, 3, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian_matrix(9, 4, &mut rng);
        let d = Matrix::zeros(2, 4);
        for g in [layer.backward(&z, &d).unwrap(), layer.backward_naive(&z, &d, DEFAULT_NAIVE_BUDGET).unwrap()] {
            assert!(g.factors.iter().all(|f| f.iter().all(|&v| v == 0.0)));
            assert!(g.core.data().iter().all(|&v| v == 0.0));
            assert!(g.bias.iter().all(|&v| v == 0.0));
            assert!(g.input.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn efficient_and_naive_paths_agree() {
        let layer = random_layer(&[3, 3, 2], 2, &[2, 3, 2, 2], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = gaussian_matrix(18, 3, &mut rng);
        let d = gaussian_matrix(2, 3, &mut rng);
        let fast = layer.backward(&z, &d).unwrap();
        let slow = layer.backward_naive(&z, &d, DEFAULT_NAIVE_BUDGET).unwrap();
        assert!(fast.max_relative_difference(&slow) < 1e-10);
    }

    #[test]
    fn vector_input_reduces_to_dense_layer_gradients() {
        // Order-1 input, full rank, identity factors: W_(2) is the core unfolding.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = gaussian_matrix(4, 3, &mut rng);
        let core = DenseTensor::from_matrix(&w);
        let weights = TuckerWeights::new(core, vec![Matrix::identity(4, 4), Matrix::identity(3, 3)]).unwrap();
        let layer = TuckerLayer::new(weights, DVector::zeros(3), Activation::Identity).unwrap();
        let z = gaussian_matrix(4, 5, &mut rng);
        let d = gaussian_matrix(3, 5, &mut rng);
        let dense_grad = &d * z.transpose();
        for g in [layer.backward(&z, &d).unwrap(), layer.backward_naive(&z, &d, DEFAULT_NAIVE_BUDGET).unwrap()] {
            // The core is W_(1) = W_(2)ᵀ, so its gradient is (D Zᵀ)ᵀ.
            assert!((g.core.unfold(1).unwrap() - &dense_grad).abs().max() < 1e-12);
            assert!((&g.input - &w * &d).abs().max() < 1e-12);
        }
    }

    #[test]
    fn naive_path_respects_budget() {
        let layer = random_layer(&[4, 4], 3, &[2, 2, 2], 8);
        let z = Matrix::zeros(16, 2);
        let d = Matrix::zeros(3, 2);
        assert!(matches!(layer.backward_naive(&z, &d, 50), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn backward_rejects_bad_shapes_and_non_finite() {
        let layer = random_layer(&[2, 2], 2, &[2, 2, 2], 9);
        assert!(layer.backward(&Matrix::zeros(3, 1), &Matrix::zeros(2, 1)).is_err());
        assert!(layer.backward(&Matrix::zeros(4, 1), &Matrix::zeros(2, 2)).is_err());
        let mut z = Matrix::zeros(4, 1);
        z[(0, 0)] = f64::INFINITY;
        assert!(matches!(layer.backward(&z, &Matrix::zeros(2, 1)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn update_rules() {
        let layer = random_layer(&[2, 3], 2, &[2, 2, 2], 10);
        let zero = GradBundle {
            factors: layer.weights().factors().iter().map(|u| Matrix::zeros(u.nrows(), u.ncols())).collect(),
            core: DenseTensor::zeros(layer.weights().core().shape()).unwrap(),
            bias: DVector::zeros(2),
            input: Matrix::zeros(6, 1),
        };
        let mut unchanged = layer.clone();
        unchanged.apply_update(&zero, 0.3).unwrap();
        assert_eq!(unchanged, layer);

        let itself = GradBundle {
            factors: layer.weights().factors().to_vec(),
            core: layer.weights().core().clone(),
            bias: layer.bias().clone(),
            input: Matrix::zeros(6, 1),
        };
        let mut zeroed = layer.clone();
        zeroed.apply_update(&itself, 1.0).unwrap();
        assert!(zeroed.weights().factors().iter().all(|u| u.iter().all(|&v| v == 0.0)));
        assert!(zeroed.weights().core().data().iter().all(|&v| v == 0.0));
        assert!(zeroed.bias().iter().all(|&v| v == 0.0));

        let mut twice = layer.clone();
        twice.apply_update(&itself, 0.25).unwrap();
        twice.apply_update(&zero, 0.25).unwrap();
        let mut once = layer.clone();
        once.apply_update(&itself, 0.25).unwrap();
        assert_eq!(twice, once);

        assert!(once.apply_update(&itself, -1.0).is_err());
    }

    #[test]
    fn random_init_rejects_bad_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TuckerLayer::random(&[4, 4], 3, &[5, 2, 2], Activation::Relu, &mut rng).is_err());
        assert!(TuckerLayer::random(&[4, 4], 3, &[2, 2], Activation::Relu, &mut rng).is_err());
    }
}
