//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Force symmetry by averaging with the transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization of a symmetric matrix, failing with a descriptive
/// error when the matrix is not positive definite.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::HessianNotSpd(what.to_string()))
}

/// `H^{ -1} V H^{-1}` for symmetric positive-definite `H`.
pub fn sandwich_with(chol: &Cholesky<f64, Dyn>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let inner = chol.solve(v);
    symmetrize(&chol.solve(&inner.transpose()))
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Clip tiny negative eigenvalues (floating-point dust) to zero; reject
/// anything more negative than `floor`.
pub fn clip_psd(m: &DMatrix<f64>, floor: f64, what: &str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let mut eig = sym.clone().symmetric_eigen();
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < floor {
        return Err(Error::Singular(format!(
            "{what}: eigenvalue {min:e} below PSD repair floor {floor:e}"
        )));
    }
    for ev in eig.eigenvalues.iter_mut() {
        if *ev < 0.0 {
            *ev = 0.0;
        }
    }
    Ok(symmetrize(&eig.recompose()))
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean of `f` over an iterator of items, accumulated into a vector.
pub fn mean_vector<I, T, F>(items: I, dim: usize, mut f: F) -> DVector<f64>
where
    I: IntoIterator<Item = T>,
    F: FnMut(T) -> DVector<f64>,
{
    let mut acc = DVector::zeros(dim);
    let mut count = 0usize;
    for item in items {
        acc += f(item);
        count += 1;
    }
    acc / count as f64
}
