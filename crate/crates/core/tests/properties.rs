//! Property tests for the invariances of the statistics.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use novelty_scan::baselines::{
    binned_fit, frechet_distance, mahalanobis_statistic, nystrom_mmd, ClassMoments, ScoreTemplates,
};
use novelty_scan::calibration::{empirical_pvalue, ToyEnsemble};
use novelty_scan::data::LabeledDataset;
use novelty_scan::embedding::supcon_loss;
use novelty_scan::nplm::{run_test, NplmConfig};
use novelty_scan::pipeline::{ExperimentConfig, Method};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mahalanobis_is_affine_invariant(
        pts in matrix(60, 3, 3.0),
        obs in matrix(15, 3, 3.0),
        a in matrix(3, 3, 1.0),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let a = a + DMatrix::identity(3, 3) * 2.5;
        prop_assume!(a.determinant().abs() > 0.5);
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let reference = LabeledDataset::new(pts, labels, 2).unwrap();
        let b = DVector::from_vec(shift);
        let map = |m: &DMatrix<f64>| {
            let mut y = m * a.transpose();
            for mut row in y.row_iter_mut() {
                row += b.transpose();
            }
            y
        };
        let t1 = mahalanobis_statistic(&ClassMoments::estimate(&reference).unwrap(), &obs).unwrap();
        let moved = reference.with_points(map(reference.points())).unwrap();
        let t2 = mahalanobis_statistic(&ClassMoments::estimate(&moved).unwrap(), &map(&obs)).unwrap();
        prop_assert!((t1 - t2).abs() <= 1e-8 * t1.abs().max(1.0), "{t1} vs {t2}");
    }

    #[test]
    fn mmd_is_non_negative_and_zero_on_identical_samples(
        x in matrix(30, 2, 2.0),
        y in matrix(25, 2, 2.0),
        width in 0.3f64..3.0,
    ) {
        let centers = x.rows(0, 8).into_owned();
        let mmd = nystrom_mmd(&x, &y, width, &centers).unwrap();
        prop_assert!(mmd >= -1e-12, "{mmd}");
        prop_assert!(nystrom_mmd(&x, &x, width, &centers).unwrap().abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        m1 in prop::collection::vec(-3.0f64..3.0, 3),
        m2 in prop::collection::vec(-3.0f64..3.0, 3),
        a in matrix(3, 3, 1.5),
        b in matrix(3, 3, 1.5),
    ) {
        let (mu1, mu2) = (DVector::from_vec(m1), DVector::from_vec(m2));
        let (s1, s2) = (spd(&a), spd(&b));
        let d12 = frechet_distance(&mu1, &s1, &mu2, &s2).unwrap();
        let d21 = frechet_distance(&mu2, &s2, &mu1, &s1).unwrap();
        prop_assert!(d12 >= -1e-9);
        prop_assert!((d12 - d21).abs() <= 1e-8 * d12.abs().max(1.0), "{d12} vs {d21}");
        prop_assert!(frechet_distance(&mu1, &s1, &mu1, &s1).unwrap().abs() < 1e-8);
    }

    #[test]
    fn delta_chi2_is_non_negative(
        f_r in prop::collection::vec(0.01f64..1.0, 6),
        f_s in prop::collection::vec(0.0f64..1.0, 6),
        counts in prop::collection::vec(0u32..300, 6),
    ) {
        prop_assume!(f_s.iter().sum::<f64>() > 0.0 && counts.iter().any(|&c| c > 0));
        let edges = (0..=6).map(|k| k as f64 / 6.0).collect();
        let t = ScoreTemplates::new(edges, normalized(f_r), normalized(f_s)).unwrap();
        let counts: Vec<f64> = counts.into_iter().map(f64::from).collect();
        let fit = binned_fit(&counts, &t).unwrap();
        prop_assert!(fit.delta_chi2 >= 0.0, "{}", fit.delta_chi2);
    }

    #[test]
    fn supcon_ignores_projection_scale(z in matrix(8, 3, 2.0), scale in 0.05f64..20.0) {
        prop_assume!(z.row_iter().all(|r| r.norm() > 1e-3));
        let labels = [0, 0, 1, 1, 2, 2, 0, 1];
        let a = supcon_loss(&z, &labels, 0.2).unwrap().loss;
        let b = supcon_loss(&(&z * scale), &labels, 0.2).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn empirical_pvalues_stay_in_range(values in prop::collection::vec(-50.0f64..50.0, 1..80), t in -60.0f64..60.0) {
        let e = ToyEnsemble::new(1.0, 0, values).unwrap();
        let p = empirical_pvalue(t, &e);
        let floor = 1.0 / (e.n_toys as f64 + 1.0);
        prop_assert!(p.p >= floor && p.p <= 1.0);
        prop_assert_eq!(p.saturated, e.count_above(t) == 0);
    }

    #[test]
    fn config_survives_toml_round_trip(
        seed in any::<u64>(),
        noise in 0usize..40,
        n_toys in 1usize..1000,
        label_noise in 0.0f64..0.5,
        embed_dim in 1usize..64,
        fixed in any::<bool>(),
        mask in 1u8..64,
    ) {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.synthetic.n_noise_dims = noise;
        c.scan.n_toys = n_toys;
        c.scan.fixed_reference = fixed;
        c.embedding.label_noise = label_noise;
        c.embedding.embed_dim = embed_dim;
        c.scan.methods = Method::ALL.iter().enumerate().filter(|(k, _)| mask & (1 << k) != 0).map(|(_, m)| *m).collect();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn nplm_statistic_ignores_translation(
        r in matrix(120, 2, 2.0),
        d in matrix(40, 2, 2.0),
        shift in prop::collection::vec(-4.0f64..4.0, 2),
    ) {
        let config = NplmConfig::with_widths(vec![0.7, 2.0]);
        let moved = |m: &DMatrix<f64>| {
            let mut y = m.clone();
            for mut row in y.row_iter_mut() {
                row[0] += shift[0];
                row[1] += shift[1];
            }
            y
        };
        let a = run_test(&r, &d, &config, 5).unwrap();
        let b = run_test(&moved(&r), &moved(&d), &config, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            // Translation changes rounding of the squared distances only.
            prop_assert!((x.t - y.t).abs() <= 1e-6 * x.t.abs().max(1.0), "{} vs {}", x.t, y.t);
        }
    }
}
