//! Scalar distribution helpers shared by the calibration and baseline code.

use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::checked_gamma_ur;
use std::f64::consts::SQRT_2;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper-tail standard normal quantile: the `z` with `1 - Φ(z) = p`.
///
/// Evaluated through `erfc⁻¹(2p)` so small `p` keeps full relative precision,
/// then polished with one Newton step on the tail probability.
pub fn upper_normal_quantile(p: f64) -> f64 {
    let z = SQRT_2 * erfc_inv(2.0 * p);
    if !z.is_finite() {
        return z;
    }
    let tail = 0.5 * erfc(z / SQRT_2);
    let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if density > 0.0 {
        z + (tail - p) / density
    } else {
        z
    }
}

/// Survival function of the χ² distribution with (possibly fractional) `dof`.
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    checked_gamma_ur(0.5 * dof, 0.5 * x).unwrap_or(f64::NAN)
}

/// Linear-interpolation quantile of an ascending sample (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Quantile of an unsorted sample; NaNs are not expected.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

/// Asymptotic Kolmogorov survival probability `P(√n·D > λ)` with the
/// Stephens small-sample correction applied by the caller's `n_eff`.
pub fn kolmogorov_sf(d: f64, n_eff: f64) -> f64 {
    let sqrt_n = n_eff.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov statistic of `sample` against a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0_f64, |d, (i, &x)| {
        let f = cdf(x);
        let lo = f - i as f64 / n;
        let hi = (i + 1) as f64 / n - f;
        d.max(lo).max(hi)
    })
}

/// One-sample KS test; returns `(D, p-value)`.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let d = ks_statistic(sample, cdf);
    (d, kolmogorov_sf(d, sample.len() as f64))
}

/// Discrete KS test of toy exceedance counts against the discrete uniform law.
///
/// `counts[i]` is the number of reference-ensemble statistics strictly above
/// test statistic `i`, out of `ensemble_size`. Under the null each count is
/// uniform on `{0, …, ensemble_size}`. All test counts share one ensemble, so
/// the KS p-value uses the two-sample effective size `n·m/(n+m)`.
/// Returns `(D, p-value)`.
pub fn discrete_uniform_ks(counts: &[usize], ensemble_size: usize) -> (f64, f64) {
    let n = counts.len() as f64;
    let m = ensemble_size;
    let mut hist = vec![0usize; m + 1];
    for &c in counts {
        hist[c.min(m)] += 1;
    }
    let mut cum = 0usize;
    let mut d = 0.0_f64;
    for (k, &h) in hist.iter().enumerate() {
        let before = cum as f64 / n;
        cum += h;
        let after = cum as f64 / n;
        let f_before = k as f64 / (m + 1) as f64;
        let f_after = (k + 1) as f64 / (m + 1) as f64;
        d = d.max((after - f_after).abs()).max((before - f_before).abs());
    }
    let mf = m as f64;
    let n_eff = n * mf / (n + mf);
    (d, kolmogorov_sf(d, n_eff))
}

/// Area under the ROC curve: `P(pos > neg) + ½·P(pos = neg)`.
pub fn auroc(negatives: &[f64], positives: &[f64]) -> f64 {
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&v| v < p);
        let tied = neg.partition_point(|&v| v <= p) - below;
        wins += below as f64 + 0.5 * tied as f64;
    }
    wins / (negatives.len() as f64 * positives.len() as f64)
}
