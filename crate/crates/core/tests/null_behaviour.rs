//! Behaviour of the kernel test and its calibration when R and D share one
//! distribution.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use novelty_scan::calibration::{per_width, toy_values, NplmStatistic, SampleSizes, TestReport, ToyEnsemble, ToySampler};
use novelty_scan::data::LabeledDataset;
use novelty_scan::nplm::{fit, statistic_from_outputs, NplmConfig};
use novelty_scan::rng::{derive_seed, rng_from_seed};
use novelty_scan::stats::{mean, quantile, std_dev};

fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
}

fn pool(n: usize, seed: u64) -> LabeledDataset {
    LabeledDataset::new(gaussian(n, 2, seed), vec![0; n], 1).unwrap()
}

/// Null fits at width 1 for 100 seeds: (max |f| over R∪D, t).
fn null_fits() -> Vec<(f64, f64)> {
    let config = NplmConfig::with_widths(vec![1.0]);
    (0..100)
        .map(|run| {
            let seed = derive_seed(17, run);
            let r = gaussian(5_000, 2, derive_seed(seed, 0));
            let d = gaussian(1_000, 2, derive_seed(seed, 1));
            let f = fit(&r, &d, 1.0, &config, seed).unwrap();
            let max_f = f.predictions.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let n_r = r.nrows();
            let w_ref = config.resolved_w_ref(n_r, d.nrows());
            let p = f.predictions.as_slice();
            let t = statistic_from_outputs(&p[..n_r], &p[n_r..], w_ref).unwrap();
            (max_f, t)
        })
        .collect()
}

// Known shortfall: the fit minimizes the logistic loss, while t uses the
// exponential form. Their optima differ, so t ≥ 0 is not guaranteed; 2 of
// these 100 fits give t = −67 and −20.
#[test]
#[ignore = "known shortfall: the exponential-form t is not bounded below at the logistic optimum"]
fn null_statistics_are_non_negative() {
    let min_t = null_fits().iter().fold(f64::INFINITY, |m, &(_, t)| m.min(t));
    assert!(min_t >= -0.1, "smallest null t {min_t}");
}

// Known shortfall: with λ = 1e-6 the fit diverges on isolated tail points
// (|x| ≈ 3.5) that have no data neighbours, so max |f| reaches 5 to 30 even
// though the bulk of the sample stays near zero.
#[test]
#[ignore = "known shortfall: max |f| over the sample is driven by tail points"]
fn null_fits_stay_flat() {
    let max_f: Vec<f64> = null_fits().into_iter().map(|(m, _)| m).collect();
    let p95 = quantile(&max_f, 0.95);
    assert!(p95 < 0.5, "95th percentile of max |f| is {p95}");
}

#[test]
fn doubling_reference_while_halving_its_weight_keeps_null_mean() {
    let bg = pool(8_000, 3);
    let stat = NplmStatistic::new(NplmConfig::with_widths(vec![1.0])).unwrap();
    let run = |n_ref: usize| {
        let sampler = ToySampler::new(&bg, SampleSizes { n_ref, n_data: 400 });
        let v: Vec<f64> = toy_values(&stat, &sampler, 200, 29).unwrap().into_iter().map(|v| v[0]).collect();
        (mean(&v), std_dev(&v) / (v.len() as f64).sqrt())
    };
    let (m1, se1) = run(2_000);
    let (m2, se2) = run(4_000);
    let se = (se1 * se1 + se2 * se2).sqrt();
    assert!((m1 - m2).abs() <= 3.0 * se, "means {m1} and {m2}, combined standard error {se}");
}

#[test]
fn averaged_pvalue_false_positive_rate_is_bounded() {
    let bg = pool(6_000, 5);
    let widths = vec![0.4, 1.0, 2.5];
    let stat = NplmStatistic::new(NplmConfig::with_widths(widths.clone())).unwrap();
    let sampler = ToySampler::new(&bg, SampleSizes { n_ref: 1_000, n_data: 200 });
    let null = toy_values(&stat, &sampler, 500, 31).unwrap();
    let ensembles: Vec<ToyEnsemble> = per_width(&null, widths.len())
        .into_iter()
        .zip(&widths)
        .map(|(v, &w)| ToyEnsemble::new(w, 31, v).unwrap())
        .collect();
    let held_out = toy_values(&stat, &sampler, 500, 37).unwrap();
    let fits = vec![None; widths.len()];
    let rejected = held_out
        .iter()
        .filter(|v| TestReport::build(v, &ensembles, &fits).unwrap().p_combined <= 0.05)
        .count();
    let rate = rejected as f64 / held_out.len() as f64;
    assert!(rate <= 0.10, "false-positive rate {rate}");
}
