//! Gaussian-mixture benchmark with calibrated cluster separation, uniform
//! noise dimensions, and a random rotation of the full space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_named, rng_from_seed};
use crate::stats::normal_cdf;

pub const MEAN_RANGE: (f64, f64) = (0.0, 1.0);
pub const SIGMA_RANGE: (f64, f64) = (0.02, 0.5);

/// Default injection scenario used to pin the separation: 1% of 10k events.
pub const DEFAULT_TARGET_Z: f64 = 3.5;
pub const DEFAULT_N_BKG: usize = 10_000;
pub const DEFAULT_F_INJ: f64 = 0.01;

/// Means and per-axis standard deviations of `n_clusters` diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl ClusterParams {
    pub fn new(means: Vec<Vec<f64>>, sigmas: Vec<Vec<f64>>) -> Result<Self> {
        if means.len() != sigmas.len() || means.is_empty() {
            return Err(Error::invalid("means and sigmas must be non-empty and equally long"));
        }
        let dim = means[0].len();
        if dim == 0
            || means.iter().any(|m| m.len() != dim)
            || sigmas.iter().any(|s| s.len() != dim)
        {
            return Err(Error::invalid("inconsistent cluster dimensions"));
        }
        if sigmas.iter().flatten().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("sigmas must be positive and finite"));
        }
        Ok(Self { means, sigmas })
    }

    pub fn n_clusters(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn centroid(&self) -> Vec<f64> {
        let n = self.n_clusters() as f64;
        (0..self.dim())
            .map(|k| self.means.iter().map(|m| m[k]).sum::<f64>() / n)
            .collect()
    }

    /// Means rescaled about their centroid by `factor`; sigmas untouched.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.centroid();
        let means = self
            .means
            .iter()
            .map(|m| m.iter().zip(&c).map(|(v, ck)| ck + factor * (v - ck)).collect())
            .collect();
        Self {
            means,
            sigmas: self.sigmas.clone(),
        }
    }

    /// Smallest significance over all ordered pairs `(i, j)`, `i ≠ j`.
    pub fn min_pairwise_significance(&self, n_bkg: usize, f_inj: f64) -> Result<f64> {
        let mut min = f64::INFINITY;
        for i in 0..self.n_clusters() {
            for j in 0..self.n_clusters() {
                if i != j {
                    min = min.min(pairwise_injection_significance(self, i, j, n_bkg, f_inj)?);
                }
            }
        }
        Ok(min)
    }
}

/// Draws means from U(0,1) and sigmas from U(0.02, 0.5), coordinate by coordinate.
pub fn sample_cluster_params(n_clusters: usize, dim: usize, seed: u64) -> Result<ClusterParams> {
    if n_clusters < 2 {
        return Err(Error::invalid("need at least two clusters for pairwise calibration"));
    }
    if dim < 1 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let mut means = Vec::with_capacity(n_clusters);
    let mut sigmas = Vec::with_capacity(n_clusters);
    for _ in 0..n_clusters {
        means.push((0..dim).map(|_| rng.random_range(MEAN_RANGE.0..MEAN_RANGE.1)).collect());
        sigmas.push((0..dim).map(|_| rng.random_range(SIGMA_RANGE.0..SIGMA_RANGE.1)).collect());
    }
    ClusterParams::new(means, sigmas)
}

/// Projection of clusters `i` and `j` onto the unit axis from `μ_i` to `μ_j`:
/// returns `((mean_i, sd_i), (mean_j, sd_j))`.
pub fn project_pair(params: &ClusterParams, i: usize, j: usize) -> ((f64, f64), (f64, f64)) {
    let (mi, mj) = (&params.means[i], &params.means[j]);
    let diff: Vec<f64> = mj.iter().zip(mi).map(|(a, b)| a - b).collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let axis: Vec<f64> = if norm > 0.0 {
        diff.iter().map(|v| v / norm).collect()
    } else {
        let mut e = vec![0.0; diff.len()];
        e[0] = 1.0;
        e
    };
    let project = |m: &[f64], s: &[f64]| {
        let mean = m.iter().zip(&axis).map(|(a, u)| a * u).sum::<f64>();
        let var = s.iter().zip(&axis).map(|(a, u)| a * a * u * u).sum::<f64>();
        (mean, var.sqrt())
    };
    (
        project(mi, &params.sigmas[i]),
        project(mj, &params.sigmas[j]),
    )
}

const MIN_BKG: f64 = 1e-9;

/// Threshold-optimised `s/√b` for injecting `f_inj·n_bkg` points of cluster
/// `j` on top of `n_bkg` points of cluster `i`.
///
/// Both clusters are projected onto the axis joining their means and a
/// one-sided cut `x > c` is scanned; expected counts come from the exact
/// 1-D Gaussian tails. Cuts leaving less than `1e-9` expected background are
/// excluded.
pub fn pairwise_injection_significance(
    params: &ClusterParams,
    i: usize,
    j: usize,
    n_bkg: usize,
    f_inj: f64,
) -> Result<f64> {
    if i == j {
        return Err(Error::invalid("significance needs two distinct clusters"));
    }
    if i >= params.n_clusters() || j >= params.n_clusters() {
        return Err(Error::invalid("cluster index out of range"));
    }
    if n_bkg == 0 || !(f_inj > 0.0 && f_inj < 1.0) {
        return Err(Error::invalid("need n_bkg > 0 and 0 < f_inj < 1"));
    }
    let ((m_b, s_b), (m_s, s_s)) = project_pair(params, i, j);
    let n = n_bkg as f64;
    let sig = |c: f64| -> f64 {
        let b = n * normal_cdf(-(c - m_b) / s_b);
        if b < MIN_BKG {
            return f64::NEG_INFINITY;
        }
        let s = f_inj * n * normal_cdf(-(c - m_s) / s_s);
        s / b.sqrt()
    };
    let s_max = s_b.max(s_s);
    let lo = m_b.min(m_s) - 12.0 * s_max;
    let hi = m_b.max(m_s) + 12.0 * s_max;
    Ok(maximize_scan(sig, lo, hi, 4000))
}

/// Grid scan followed by golden-section refinement around the best cell.
/// The left end acts as the `c → −∞` limit.
fn maximize_scan(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let h = (hi - lo) / steps as f64;
    let (mut best_k, mut best) = (0usize, f(lo));
    for k in 1..=steps {
        let v = f(lo + h * k as f64);
        if v > best {
            best = v;
            best_k = k;
        }
    }
    let mut a = lo + h * best_k.saturating_sub(1) as f64;
    let mut b = (lo + h * (best_k + 1) as f64).min(hi);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
    }
    best.max(f1).max(f2)
}

/// Result of pinning the minimum pairwise significance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: ClusterParams,
    /// Common factor applied to the means about their centroid.
    pub scale: f64,
    pub min_significance: f64,
}

/// Rescales all means about their centroid by one factor, found by bisection
/// in log-space over `[1e-3, 1e3]`, so the minimum pairwise significance hits
/// `target_z`.
pub fn calibrate_separation(
    params: &ClusterParams,
    target_z: f64,
    n_bkg: usize,
    f_inj: f64,
) -> Result<Calibration> {
    let eval = |scale: f64| params.scaled(scale).min_pairwise_significance(n_bkg, f_inj);
    let (mut lo, mut hi) = (1e-3_f64.ln(), 1e3_f64.ln());
    let g_lo = eval(lo.exp())? - target_z;
    let g_hi = eval(hi.exp())? - target_z;
    if g_lo > 0.0 || g_hi < 0.0 {
        return Err(Error::CalibrationFailure(format!(
            "target {target_z} not bracketed by scale factors [1e-3, 1e3] (residuals {g_lo:.3}, {g_hi:.3})"
        )));
    }
    let mut mid = 0.0;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let g = eval(mid.exp())? - target_z;
        if g.abs() < 1e-6 || hi - lo < 1e-12 {
            break;
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = mid.exp();
    let out = params.scaled(scale);
    let min_significance = out.min_pairwise_significance(n_bkg, f_inj)?;
    if (min_significance - target_z).abs() > 0.05 {
        return Err(Error::CalibrationFailure(format!(
            "bisection ended at significance {min_significance:.4}"
        )));
    }
    Ok(Calibration {
        params: out,
        scale,
        min_significance,
    })
}

/// Haar-random orthogonal matrix: the Q factor of a Gaussian matrix with the
/// sign convention `diag(R) > 0`.
pub fn random_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..dim {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// Everything needed to regenerate one synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub cluster_params: ClusterParams,
    pub n_noise_dims: usize,
    pub n_per_class: usize,
    /// Orthogonal `(D+M) × (D+M)` matrix applied to every generated point.
    pub rotation: DMatrix<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Samples and calibrates cluster parameters, then draws the rotation,
    /// all from sub-streams of `seed`.
    pub fn calibrated(
        n_clusters: usize,
        dim: usize,
        n_noise_dims: usize,
        n_per_class: usize,
        seed: u64,
    ) -> Result<(Self, Calibration)> {
        let raw = sample_cluster_params(n_clusters, dim, derive_named(seed, "clusters"))?;
        let cal = calibrate_separation(&raw, DEFAULT_TARGET_Z, DEFAULT_N_BKG, DEFAULT_F_INJ)?;
        let rotation = random_rotation(dim + n_noise_dims, derive_named(seed, "rotation"));
        let spec = Self {
            cluster_params: cal.params.clone(),
            n_noise_dims,
            n_per_class,
            rotation,
            seed,
        };
        Ok((spec, cal))
    }

    pub fn total_dim(&self) -> usize {
        self.cluster_params.dim() + self.n_noise_dims
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.total_dim();
        if self.rotation.shape() != (d, d) {
            return Err(Error::invalid(format!(
                "rotation is {:?}, expected {d}×{d}",
                self.rotation.shape()
            )));
        }
        let err = (self.rotation.transpose() * &self.rotation - DMatrix::identity(d, d)).amax();
        if err >= 1e-10 {
            return Err(Error::invalid(format!("rotation not orthogonal (error {err:e})")));
        }
        if self.n_per_class == 0 {
            return Err(Error::invalid("n_per_class must be positive"));
        }
        Ok(())
    }
}

/// Draws `n_per_class` points per cluster, appends `U(0,1)` noise coordinates,
/// and rotates. The held-out cluster (if any) is returned as the second set.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    held_out_class: Option<usize>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let params = &spec.cluster_params;
    let n_classes = params.n_clusters();
    if let Some(h) = held_out_class {
        if h >= n_classes {
            return Err(Error::invalid(format!("held-out class {h} ≥ {n_classes} clusters")));
        }
    }
    let d = params.dim();
    let total = spec.total_dim();
    let mut rng = rng_from_seed(spec.seed);
    let mut bg_rows: Vec<f64> = Vec::new();
    let mut bg_labels = Vec::new();
    let mut sig_rows: Vec<f64> = Vec::new();
    let mut sig_labels = Vec::new();
    let mut raw = DVector::zeros(total);
    for class in 0..n_classes {
        let (rows, labels) = if Some(class) == held_out_class {
            (&mut sig_rows, &mut sig_labels)
        } else {
            (&mut bg_rows, &mut bg_labels)
        };
        for _ in 0..spec.n_per_class {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                raw[k] = params.means[class][k] + params.sigmas[class][k] * z;
            }
            for k in d..total {
                raw[k] = rng.random::<f64>();
            }
            let rotated = &spec.rotation * &raw;
            rows.extend(rotated.iter());
            labels.push(class);
        }
    }
    let background = LabeledDataset::new(
        DMatrix::from_row_slice(bg_labels.len(), total, &bg_rows),
        bg_labels,
        n_classes,
    )?;
    let signal = LabeledDataset::new(
        DMatrix::from_row_slice(sig_labels.len(), total, &sig_rows),
        sig_labels,
        n_classes,
    )?;
    Ok((background, signal))
}
