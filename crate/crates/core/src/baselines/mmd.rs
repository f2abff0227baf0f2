use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nplm::kernel_matrix;

/// Eigenvalues of the center kernel below this fraction of the largest are
/// treated as zero in the inverse square root.
pub const EIGEN_FLOOR: f64 = 1e-10;

fn mean_kernel_row(points: &DMatrix<f64>, centers: &DMatrix<f64>, width: f64) -> DVector<f64> {
    let k = kernel_matrix(points, centers, width);
    DVector::from_iterator(k.ncols(), k.column_iter().map(|c| c.mean()))
}

/// `‖φ̄(R) − φ̄(D)‖²` with the Nyström feature map
/// `φ(x) = K_c^{-1/2}·k(x, centers)`.
pub fn nystrom_mmd(
    reference: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    width: f64,
    centers: &DMatrix<f64>,
) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::invalid("kernel width must be positive"));
    }
    if centers.nrows() == 0 {
        return Err(Error::invalid("need at least one center"));
    }
    if reference.nrows() == 0 || observed.nrows() == 0 {
        return Err(Error::invalid("samples must be non-empty"));
    }
    if reference.ncols() != centers.ncols() || observed.ncols() != centers.ncols() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let kc = kernel_matrix(centers, centers, width);
    let eig = kc.symmetric_eigen();
    let top = eig.eigenvalues.max();
    let diff = mean_kernel_row(reference, centers, width) - mean_kernel_row(observed, centers, width);
    let mut total = 0.0;
    let mut rank = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > EIGEN_FLOOR * top && lambda > 0.0 {
            let proj = eig.eigenvectors.column(i).dot(&diff);
            total += proj * proj / lambda;
            rank += 1;
        }
    }
    if rank == 0 {
        return Err(Error::DegenerateData("center kernel matrix has rank zero".into()));
    }
    Ok(total)
}
