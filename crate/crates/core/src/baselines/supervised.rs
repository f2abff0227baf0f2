use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{column_moments, select_rows, standardize_with, LabeledDataset};
use crate::embedding::train::momentum_step;
use crate::embedding::mlp::{Mlp, MlpGrad};
use crate::error::{Error, Result};
use crate::rng::{derive_named, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Score bins of the Δχ² templates.
    pub n_bins: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
            n_bins: DEFAULT_BINS,
        }
    }
}

/// Signal-vs-background classifier; scores are logistic outputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreClassifier {
    net: Mlp,
    means: Vec<f64>,
    stds: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ScoreClassifier {
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::invalid("score input dimension mismatch"));
        }
        let z = standardize_with(x, &self.means, &self.stds);
        Ok(self.net.forward(&z).column(0).iter().map(|&v| sigmoid(v)).collect())
    }
}

/// Trains a small MLP with binary cross-entropy, signal labelled 1.
pub fn train_score_classifier(
    background: &LabeledDataset,
    signal: &LabeledDataset,
    config: &ScoreConfig,
) -> Result<ScoreClassifier> {
    if background.is_empty() || signal.is_empty() {
        return Err(Error::invalid("score classifier needs both background and signal samples"));
    }
    if background.dim() != signal.dim() {
        return Err(Error::invalid("background and signal dimensions differ"));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let d = background.dim();
    let n_b = background.len();
    let mut x = DMatrix::zeros(n_b + signal.len(), d);
    x.rows_mut(0, n_b).copy_from(background.points());
    x.rows_mut(n_b, signal.len()).copy_from(signal.points());
    let y: Vec<f64> = (0..x.nrows()).map(|i| if i < n_b { 0.0 } else { 1.0 }).collect();
    let (means, stds) = column_moments(&x);
    let x = standardize_with(&x, &means, &stds);

    let mut sizes = vec![d];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut net = Mlp::new(&sizes, &mut rng_from_seed(derive_named(config.seed, "init")));
    let mut velocity = MlpGrad::zeros_like(&net);
    let mut rng = rng_from_seed(derive_named(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let xb = select_rows(&x, idx);
            let (logits, trace) = net.forward_traced(&xb);
            let scale = 1.0 / idx.len() as f64;
            let d_out = DMatrix::from_fn(idx.len(), 1, |r, _| (sigmoid(logits[(r, 0)]) - y[idx[r]]) * scale);
            let (grad, _) = net.backward(&trace, &d_out);
            momentum_step(&mut net, &mut velocity, &grad, config.learning_rate, config.momentum);
        }
    }
    if net.layers.iter().any(|l| l.weight.iter().any(|v| !v.is_finite())) {
        return Err(Error::TrainingDiverged {
            epoch: config.epochs,
            batch: 0,
            loss: f64::NAN,
        });
    }
    Ok(ScoreClassifier { net, means, stds })
}

/// Background and signal probability per uniform score bin on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTemplates {
    pub bin_edges: Vec<f64>,
    pub f_r: Vec<f64>,
    pub f_s: Vec<f64>,
}

pub const DEFAULT_BINS: usize = 20;
const BACKGROUND_FLOOR: f64 = 1e-6;

fn bin_of(score: f64, n_bins: usize) -> usize {
    ((score * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1)
}

fn histogram(scores: &[f64], n_bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    for &s in scores {
        h[bin_of(s, n_bins)] += 1.0;
    }
    h
}

fn normalized(mut h: Vec<f64>) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

impl ScoreTemplates {
    pub fn new(bin_edges: Vec<f64>, f_r: Vec<f64>, f_s: Vec<f64>) -> Result<Self> {
        let t = Self { bin_edges, f_r, f_s };
        t.validate()?;
        Ok(t)
    }

    pub fn n_bins(&self) -> usize {
        self.f_r.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f_r.len();
        if n < 2 || self.f_s.len() != n || self.bin_edges.len() != n + 1 {
            return Err(Error::invalid("templates need matching bins (at least two)"));
        }
        if !self.bin_edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("bin edges must increase"));
        }
        for (name, f) in [("background", &self.f_r), ("signal", &self.f_s)] {
            if f.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::invalid(format!("{name} template has a negative bin")));
            }
            if (f.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("{name} template does not sum to 1")));
            }
        }
        if self.f_r.iter().any(|&v| v == 0.0) {
            return Err(Error::invalid("background template has an empty bin"));
        }
        Ok(())
    }

    pub fn counts(&self, scores: &[f64]) -> Vec<f64> {
        histogram(scores, self.n_bins())
    }
}

/// Uniform-bin templates; empty background bins get a `1e-6` floor before
/// renormalization.
pub fn build_templates(scores_ref: &[f64], scores_sig: &[f64], n_bins: usize) -> Result<ScoreTemplates> {
    if n_bins < 2 {
        return Err(Error::invalid("need at least two bins"));
    }
    if scores_ref.is_empty() {
        return Err(Error::invalid("no reference scores"));
    }
    if scores_sig.is_empty() {
        return Err(Error::invalid("no signal scores"));
    }
    let mut f_r = normalized(histogram(scores_ref, n_bins));
    f_r.iter_mut().for_each(|v| *v = v.max(BACKGROUND_FLOOR));
    let f_r = normalized(f_r);
    let f_s = normalized(histogram(scores_sig, n_bins));
    let bin_edges = (0..=n_bins).map(|k| k as f64 / n_bins as f64).collect();
    ScoreTemplates::new(bin_edges, f_r, f_s)
}

/// Outcome of the two nested Poisson template fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinnedFit {
    pub delta_chi2: f64,
    /// Background amplitude under the alternative, in expected counts.
    pub a_background: f64,
    /// Signal amplitude under the alternative, constrained non-negative.
    pub a_signal: f64,
}

/// Poisson binned likelihood fits of `a₁·f_R` against `a₁·f_R + a₂·f_S`
/// with `a₁, a₂ ≥ 0`.
///
/// Both templates sum to one, so the total amplitude profiles out at the
/// observed count `N`; what remains is the signal share `π = a₂/N`, whose
/// score is monotone and is solved by bisection on `[0, 1]`.
pub fn binned_fit(counts: &[f64], templates: &ScoreTemplates) -> Result<BinnedFit> {
    templates.validate()?;
    if counts.len() != templates.n_bins() || counts.iter().any(|&c| !(c >= 0.0)) {
        return Err(Error::invalid("counts must be non-negative, one per bin"));
    }
    let total: f64 = counts.iter().sum();
    let used: Vec<(f64, f64, f64)> = counts
        .iter()
        .zip(templates.f_r.iter().zip(&templates.f_s))
        .filter(|(&n, _)| n > 0.0)
        .map(|(&n, (&r, &s))| (n, r, s))
        .collect();
    let score = |pi: f64| -> f64 {
        used.iter()
            .map(|&(n, r, s)| n * (s - r) / ((1.0 - pi) * r + pi * s))
            .sum()
    };
    let log_ratio = |pi: f64| -> f64 {
        used.iter()
            .map(|&(n, r, s)| n * (((1.0 - pi) * r + pi * s) / r).ln())
            .sum()
    };
    let pi = if used.is_empty() || score(0.0) <= 0.0 {
        0.0
    } else if score(1.0) >= 0.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let delta_chi2 = 2.0 * log_ratio(pi);
    if !delta_chi2.is_finite() {
        let bins: Vec<String> = counts.iter().map(|c| format!("{c}")).collect();
        return Err(Error::FitFailure(format!(
            "non-finite likelihood ratio at signal share {pi}; counts [{}]",
            bins.join(", ")
        )));
    }
    Ok(BinnedFit {
        delta_chi2,
        a_background: (1.0 - pi) * total,
        a_signal: pi * total,
    })
}

/// `Δχ² = 2·(log L_{H₁} − log L_{H₀})` of the observed scores.
pub fn binned_delta_chi2(observed_scores: &[f64], templates: &ScoreTemplates) -> Result<f64> {
    Ok(binned_fit(&templates.counts(observed_scores), templates)?.delta_chi2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::stats::auroc;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, center: f64, seed: u64) -> LabeledDataset {
        let mut rng = rng_from_seed(seed);
        let p = DMatrix::from_fn(n, 2, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            center + 0.5 * z
        });
        LabeledDataset::new(p, vec![0; n], 1).unwrap()
    }

    #[test]
    fn separable_blobs_score_well() {
        let config = ScoreConfig { epochs: 10, ..ScoreConfig::default() };
        let clf = train_score_classifier(&blobs(1000, 0.0, 1), &blobs(300, 3.0, 2), &config).unwrap();
        let neg = clf.scores(blobs(500, 0.0, 3).points()).unwrap();
        let pos = clf.scores(blobs(500, 3.0, 4).points()).unwrap();
        assert!(auroc(&neg, &pos) > 0.95);
        assert!(neg.iter().chain(&pos).all(|s| (0.0..=1.0).contains(s)));
        let again = train_score_classifier(&blobs(1000, 0.0, 1), &blobs(300, 3.0, 2), &config).unwrap();
        assert_eq!(again.scores(blobs(50, 1.0, 5).points()).unwrap(), clf.scores(blobs(50, 1.0, 5).points()).unwrap());
    }

    #[test]
    fn empty_class_is_rejected() {
        let empty = LabeledDataset::new(DMatrix::zeros(0, 2), vec![], 1).unwrap();
        assert!(train_score_classifier(&blobs(10, 0.0, 1), &empty, &ScoreConfig::default()).is_err());
    }

    #[test]
    fn point_mass_templates() {
        let t = build_templates(&[0.5; 40], &[0.5; 10], 10).unwrap();
        assert_eq!(t.f_s[5], 1.0);
        assert!((t.f_r[5] - 1.0).abs() < 1e-5);
        assert!((t.f_r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.f_r.iter().all(|&v| v > 0.0));
        assert!(build_templates(&[], &[0.5], 10).is_err());
        assert!(build_templates(&[0.5], &[0.5], 1).is_err());
        let edge = build_templates(&[0.0, 1.0], &[1.0], 4).unwrap();
        assert!(edge.f_r[0] > 0.4 && edge.f_r[3] > 0.4);
    }

    #[test]
    fn two_bin_closed_form() {
        let t = ScoreTemplates::new(vec![0.0, 0.5, 1.0], vec![0.5, 0.5], vec![0.0, 1.0]).unwrap();
        let fit = binned_fit(&[100.0, 150.0], &t).unwrap();
        assert!((fit.a_signal - 50.0).abs() < 1e-9);
        let expected = 2.0 * (100.0 * (0.4f64 / 0.5).ln() + 150.0 * (0.6f64 / 0.5).ln());
        assert!((fit.delta_chi2 - expected).abs() < 1e-9);
        let bigger = binned_fit(&[100.0, 200.0], &t).unwrap();
        assert!(bigger.delta_chi2 > fit.delta_chi2);
        let deficit = binned_fit(&[100.0, 80.0], &t).unwrap();
        assert_eq!(deficit.a_signal, 0.0);
        assert_eq!(deficit.delta_chi2, 0.0);
    }

    #[test]
    fn background_shaped_data_fits_no_signal() {
        let t = ScoreTemplates::new(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![0.4, 0.3, 0.2, 0.1], vec![0.0, 0.0, 0.2, 0.8]).unwrap();
        let fit = binned_fit(&[400.0, 300.0, 200.0, 100.0], &t).unwrap();
        assert!(fit.a_signal < 1e-6 && fit.delta_chi2.abs() < 1e-9);
    }

    #[test]
    fn delta_chi2_is_never_negative() {
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let raw_r: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            let raw_s: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = ScoreTemplates::new(
                (0..=6).map(|k| k as f64 / 6.0).collect(),
                normalized(raw_r),
                normalized(raw_s),
            )
            .unwrap();
            let counts: Vec<f64> = (0..6).map(|_| rng.random_range(0..50) as f64).collect();
            assert!(binned_fit(&counts, &t).unwrap().delta_chi2 >= -1e-9);
        }
    }
}
