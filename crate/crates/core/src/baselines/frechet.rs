use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check_symmetric(name: &str, s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::invalid(format!("{name} is not square")));
    }
    let asym = (s - s.transpose()).amax();
    if asym > 1e-9 {
        return Err(Error::invalid(format!("{name} is not symmetric (asymmetry {asym:e})")));
    }
    Ok(())
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(S₁ + S₂ − 2(S₁S₂)^{1/2})`, with the trace of the root
/// taken from the eigenvalues of `S₁^{1/2} S₂ S₁^{1/2}`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::invalid("Fréchet inputs have inconsistent dimensions"));
    }
    check_symmetric("first covariance", s1)?;
    check_symmetric("second covariance", s2)?;
    let r1 = psd_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross)
}

/// Sample mean and (n − 1) covariance of the rows of `x`.
pub fn sample_moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least two rows for a covariance"));
    }
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Fréchet distance between Gaussian fits of two samples.
pub fn frechet_statistic(reference: &DMatrix<f64>, observed: &DMatrix<f64>) -> Result<f64> {
    let (m1, s1) = sample_moments(reference)?;
    let (m2, s2) = sample_moments(observed)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn one_dimensional_closed_forms() {
        assert_eq!(frechet_distance(&vec1(0.0), &one(1.0), &vec1(1.0), &one(1.0)).unwrap(), 1.0);
        assert!((frechet_distance(&vec1(0.0), &one(4.0), &vec1(0.0), &one(1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_zero_on_identity() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, -0.4, 0.0, -0.4, 3.0, 0.6, 0.0, 0.6, 0.8]);
        let ma = DVector::from_row_slice(&[0.1, 0.2, 0.3]);
        let mb = DVector::from_row_slice(&[-1.0, 0.0, 2.0]);
        let ab = frechet_distance(&ma, &a, &mb, &b).unwrap();
        let ba = frechet_distance(&mb, &b, &ma, &a).unwrap();
        assert!((ab - ba).abs() < 1e-10);
        assert!(frechet_distance(&ma, &a, &ma, &a).unwrap().abs() < 1e-10);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let ok = DMatrix::identity(2, 2);
        let m = DVector::zeros(2);
        assert!(matches!(frechet_distance(&m, &bad, &m, &ok), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn commuting_covariances_match_diagonal_formula() {
        let a = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 9.0]));
        let b = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 1.0]));
        let m = DVector::zeros(2);
        // (2−1)² + (3−1)² = 5
        assert!((frechet_distance(&m, &a, &m, &b).unwrap() - 5.0).abs() < 1e-12);
    }
}
