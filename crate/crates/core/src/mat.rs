//! Dense matrix alias and the handful of norms the rest of the crate needs.

use nalgebra::DMatrix;

/// Dense real matrix. Every matrix in the simulator (plant, weights, gains,
/// estimates, regression moments) is one of these.
pub type Mat = DMatrix<f64>;

/// Dense real column vector.
pub type Vector = nalgebra::DVector<f64>;

/// Squared Frobenius norm.
pub fn frob_sq(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.singular_values().max()
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Build a matrix from row-major entries.
pub fn from_rows(rows: usize, cols: usize, entries: &[f64]) -> Mat {
    assert_eq!(entries.len(), rows * cols, "entries length must equal rows*cols");
    Mat::from_row_slice(rows, cols, entries)
}

/// Horizontal concatenation `[A B]`.
pub fn hstack(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    out
}

/// Split `Θ = [A B]` back into `(A, B)` given the state dimension.
pub fn split_theta(theta: &Mat, dx: usize) -> (Mat, Mat) {
    let a = theta.columns(0, dx).into_owned();
    let b = theta.columns(dx, theta.ncols() - dx).into_owned();
    (a, b)
}
