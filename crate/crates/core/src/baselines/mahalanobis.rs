use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Mean and covariance of one background class.
#[derive(Debug, Clone)]
pub struct ClassMoment {
    pub label: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Ridge added to the diagonal (0 when the sample was large enough).
    pub ridge: f64,
    chol: Cholesky<f64, Dyn>,
}

/// Per-class Gaussian moments of a reference sample.
#[derive(Debug, Clone)]
pub struct ClassMoments {
    pub classes: Vec<ClassMoment>,
}

impl ClassMoments {
    /// Estimates moments for every class present in `reference`.
    ///
    /// Classes with fewer than `5·d` samples get a ridge of
    /// `1e-6 · trace(Σ) / d` on the diagonal.
    pub fn estimate(reference: &LabeledDataset) -> Result<Self> {
        let d = reference.dim();
        let mut classes = Vec::new();
        for (label, idx) in reference.class_indices() {
            let n = idx.len();
            if n < 2 {
                return Err(Error::Numerical(format!(
                    "class {label}: need at least two samples for a covariance"
                )));
            }
            let mut mean = DVector::zeros(d);
            for &i in &idx {
                mean += reference.points().row(i).transpose();
            }
            mean /= n as f64;
            let mut centered = DMatrix::zeros(n, d);
            for (r, &i) in idx.iter().enumerate() {
                for k in 0..d {
                    centered[(r, k)] = reference.points()[(i, k)] - mean[k];
                }
            }
            let cov = centered.transpose() * &centered / (n as f64 - 1.0);
            classes.push(Self::class(label, mean, cov, n)?);
        }
        Ok(Self { classes })
    }

    /// Builds one class from given moments; `n_samples` controls the ridge rule.
    pub fn class(label: usize, mean: DVector<f64>, cov: DMatrix<f64>, n_samples: usize) -> Result<ClassMoment> {
        let d = mean.len();
        let mut cov = (&cov + cov.transpose()) * 0.5;
        let ridge = if n_samples < 5 * d {
            1e-6 * cov.trace() / d as f64
        } else {
            0.0
        };
        for k in 0..d {
            cov[(k, k)] += ridge;
        }
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
            Error::Numerical(format!("class {label}: covariance is not positive definite"))
        })?;
        Ok(ClassMoment {
            label,
            mean,
            cov,
            ridge,
            chol,
        })
    }

    pub fn from_classes(classes: Vec<ClassMoment>) -> Self {
        Self { classes }
    }

    pub fn ridged(&self) -> bool {
        self.classes.iter().any(|c| c.ridge > 0.0)
    }

    /// Squared Mahalanobis distance of every row of `x` to every class:
    /// an `n × n_classes` matrix.
    pub fn distances(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = x.nrows();
        let mut out = DMatrix::zeros(n, self.classes.len());
        for (c, class) in self.classes.iter().enumerate() {
            if class.mean.len() != x.ncols() {
                return Err(Error::invalid("dimension mismatch against class moments"));
            }
            let mut diff = x.transpose();
            for mut col in diff.column_iter_mut() {
                col -= &class.mean;
            }
            let l = class.chol.l();
            let solved = l
                .solve_lower_triangular(&diff)
                .ok_or_else(|| Error::Numerical(format!("class {}: singular factor", class.label)))?;
            for (i, col) in solved.column_iter().enumerate() {
                out[(i, c)] = col.norm_squared();
            }
        }
        Ok(out)
    }

    /// Per-row minimum over classes of the squared Mahalanobis distance.
    pub fn min_distances(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let d = self.distances(x)?;
        Ok(d.row_iter().map(|r| r.min()).collect())
    }

    /// Label of the closest class for every row.
    pub fn classify(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let d = self.distances(x)?;
        Ok(d
            .row_iter()
            .map(|r| {
                let best = (0..r.len()).fold(0, |b, k| if r[k] < r[b] { k } else { b });
                self.classes[best].label
            })
            .collect())
    }
}

/// `t = Σ_{x∈D} min_i (x − μ_i)ᵀ Σ_i⁻¹ (x − μ_i)`.
pub fn mahalanobis_statistic(moments: &ClassMoments, observed: &DMatrix<f64>) -> Result<f64> {
    Ok(moments.min_distances(observed)?.iter().sum())
}
