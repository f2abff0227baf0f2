use nalgebra::DMatrix;
use rand::seq::index::sample;

use crate::data::select_rows;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::stats::quantile_sorted;

pub const DEFAULT_WIDTH_SUBSAMPLE: usize = 2000;
pub const WIDTH_QUANTILES: [f64; 5] = [0.01, 0.25, 0.50, 0.75, 0.99];

/// Six Gaussian widths from the pairwise-distance distribution of a
/// subsample: the 1st, 25th, 50th, 75th and 99th percentiles of the nonzero
/// distances, plus twice the 99th.
pub fn select_kernel_widths(points: &DMatrix<f64>, subsample: usize, seed: u64) -> Result<Vec<f64>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least two points to select widths"));
    }
    let m = subsample.min(n).max(2);
    let mut rng = rng_from_seed(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    let sub = select_rows(points, &idx);
    let t = sub.transpose();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        let a = t.column(i);
        for j in (i + 1)..m {
            let d = (a - t.column(j)).norm();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::DegenerateData("all sampled points coincide".into()));
    }
    dists.sort_by(f64::total_cmp);
    let mut widths: Vec<f64> = WIDTH_QUANTILES
        .iter()
        .map(|&q| quantile_sorted(&dists, q))
        .collect();
    widths.push(2.0 * widths[4]);
    Ok(widths)
}

/// Default number of centers, `round(√(n_ref + n_data))`.
pub fn default_n_centers(n_ref: usize, n_data: usize) -> usize {
    ((n_ref + n_data) as f64).sqrt().round().max(1.0) as usize
}

/// `m` rows of `pool` drawn uniformly without replacement.
pub fn build_centers(pool: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    if m == 0 || m > pool.nrows() {
        return Err(Error::invalid(format!(
            "cannot draw {m} centers from {} points",
            pool.nrows()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let idx = sample(&mut rng, pool.nrows(), m).into_vec();
    Ok(select_rows(pool, &idx))
}

/// `K[a, i] = exp(−‖x_a − c_i‖² / (2σ²))`.
pub fn kernel_matrix(points: &DMatrix<f64>, centers: &DMatrix<f64>, width: f64) -> DMatrix<f64> {
    assert_eq!(points.ncols(), centers.ncols(), "dimension mismatch");
    let n = points.nrows();
    let m = centers.nrows();
    let scale = -0.5 / (width * width);
    let mut k = DMatrix::zeros(n, m);
    if n == 0 || m == 0 {
        return k;
    }
    let xs = points.as_slice();
    for (i, out) in k.as_mut_slice().chunks_exact_mut(n).enumerate() {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (dim, col) in xs.chunks_exact(n).enumerate() {
            let c = centers[(i, dim)];
            for (o, x) in out.iter_mut().zip(col) {
                let diff = x - c;
                *o += diff * diff;
            }
        }
        for o in out.iter_mut() {
            *o = (*o * scale).exp();
        }
    }
    k
}
