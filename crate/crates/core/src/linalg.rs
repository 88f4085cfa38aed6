//! Leading left singular vectors, the one decomposition HOSVD needs.

use nalgebra::linalg::SymmetricEigen;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Unfoldings whose short side is at most this long go through a Gram matrix.
pub const GRAM_ROUTE_MAX_DIM: usize = 64;

/// Singular values below `ZERO_TOLERANCE * sigma_max` are treated as zero.
pub const ZERO_TOLERANCE: f64 = 1e-12;

const MAX_ITERATIONS: usize = 10_000;

/// The `rank` leading left singular vectors of `a`, as orthonormal columns of
/// a `rows x rank` matrix. Signs are fixed so the largest-magnitude entry of
/// each column is positive.
pub fn leading_left_singular_vectors(a: &Matrix, rank: usize) -> Result<Matrix> {
    let (rows, cols) = a.shape();
    if rank == 0 || rank > rows {
        return Err(Error::Decomposition(format!("cannot take {rank} singular vectors of a {rows}-row matrix")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to SVD".into()));
    }
    let mut u = if rows <= GRAM_ROUTE_MAX_DIM {
        gram_rows(a, rank)?
    } else if cols <= GRAM_ROUTE_MAX_DIM {
        gram_cols(a, rank)?
    } else {
        full_svd(a, rank)?
    };
    fix_signs(&mut u);
    Ok(u)
}

fn sorted_eigen(gram: Matrix) -> Result<(Vec<f64>, Matrix)> {
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, MAX_ITERATIONS)
        .ok_or_else(|| Error::Decomposition("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = Matrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Eigenvectors of `A Aᵀ` are the left singular vectors directly.
fn gram_rows(a: &Matrix, rank: usize) -> Result<Matrix> {
    let (_, vectors) = sorted_eigen(a * a.transpose())?;
    Ok(vectors.columns(0, rank).into_owned())
}

/// Right singular vectors from `Aᵀ A`, mapped back through `A`.
fn gram_cols(a: &Matrix, rank: usize) -> Result<Matrix> {
    let (values, v) = sorted_eigen(a.transpose() * a)?;
    let sigma_max = values.first().copied().unwrap_or(0.0).sqrt();
    let mut u = Matrix::zeros(a.nrows(), rank);
    let mut filled = 0;
    for (k, &lambda) in values.iter().enumerate().take(rank) {
        let sigma = lambda.sqrt();
        if sigma <= ZERO_TOLERANCE * sigma_max || sigma == 0.0 {
            break;
        }
        let col = (a * v.column(k)) / sigma;
        u.set_column(k, &col);
        filled += 1;
    }
    // Re-orthonormalize (the Gram route loses some accuracy) and complete.
    complete_basis(&mut u, filled);
    Ok(u)
}

fn full_svd(a: &Matrix, rank: usize) -> Result<Matrix> {
    let svd = a
        .clone()
        .try_svd(true, false, f64::EPSILON, MAX_ITERATIONS)
        .ok_or_else(|| Error::Decomposition("SVD did not converge".into()))?;
    let full_u = svd.u.ok_or_else(|| Error::Decomposition("SVD returned no left vectors".into()))?;
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let usable = svd
        .singular_values
        .iter()
        .take_while(|&&s| s > ZERO_TOLERANCE * sigma_max && s > 0.0)
        .count()
        .min(rank);
    let mut u = Matrix::zeros(a.nrows(), rank);
    for k in 0..usable {
        u.set_column(k, &full_u.column(k));
    }
    complete_basis(&mut u, usable);
    Ok(u)
}

/// Modified Gram-Schmidt over the first `filled` columns, then fills the rest
/// with canonical basis vectors orthogonalized against what is already there.
fn complete_basis(u: &mut Matrix, filled: usize) {
    let (rows, cols) = u.shape();
    let mut k = 0;
    while k < filled {
        for j in 0..k {
            let proj = u.column(j).dot(&u.column(k));
            let qj = u.column(j).into_owned();
            let mut ck = u.column_mut(k);
            ck.axpy(-proj, &qj, 1.0);
        }
        let norm = u.column(k).norm();
        u.column_mut(k).unscale_mut(norm);
        k += 1;
    }
    let mut candidate = 0;
    while k < cols && candidate < rows {
        let mut e = nalgebra::DVector::<f64>::zeros(rows);
        e[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for j in 0..k {
                let proj = u.column(j).dot(&e);
                e.axpy(-proj, &u.column(j), 1.0);
            }
        }
        let norm = e.norm();
        if norm > 1e-8 {
            u.set_column(k, &(e / norm));
            k += 1;
        }
    }
}

fn fix_signs(u: &mut Matrix) {
    for mut col in u.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}
