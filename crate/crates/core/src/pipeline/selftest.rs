use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::baselines::{binned_fit, frechet_distance, mahalanobis_statistic, nystrom_mmd, ClassMoments, ScoreTemplates};
use crate::calibration::{asymptotic_pvalue, empirical_pvalue, z_score, ToyEnsemble};
use crate::data::LabeledDataset;
use crate::embedding::supcon_loss;
use crate::error::Result;
use crate::nplm::{kernel_matrix, nplm_objective, test_statistic, KernelModel, Problem};
use crate::rng::rng_from_seed;
use crate::synthetic::{calibrate_separation, sample_cluster_params, DEFAULT_F_INJ, DEFAULT_N_BKG, DEFAULT_TARGET_Z};

/// Outcome of one built-in invariant check.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> SelfCheck {
    match outcome {
        Ok((passed, detail)) => SelfCheck { name, passed, detail },
        Err(e) => SelfCheck {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn gaussian(n: usize, d: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
}

fn objective_gradient() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = rng_from_seed(seed);
        let x = gaussian(40, 2, &mut rng);
        let c = gaussian(8, 2, &mut rng);
        let k = kernel_matrix(&x, &c, 1.0);
        let kc = kernel_matrix(&c, &c, 1.0);
        let is_data: Vec<bool> = (0..40).map(|i| i >= 25).collect();
        let p = Problem {
            k: &k,
            kc: &kc,
            is_data: &is_data,
            w_ref: 0.6,
            lambda: 1e-3,
        };
        let w = DVector::from_fn(8, |_, _| rng.random_range(-0.5..0.5));
        let (_, g) = nplm_objective(&p, &w)?;
        for i in 0..8 {
            let h = 1e-6;
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (nplm_objective(&p, &wp)?.0 - nplm_objective(&p, &wm)?.0) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8));
        }
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.2e}")))
}

fn zero_weight_loss() -> Result<(bool, String)> {
    let mut rng = rng_from_seed(7);
    let x = gaussian(30, 2, &mut rng);
    let c = gaussian(5, 2, &mut rng);
    let k = kernel_matrix(&x, &c, 1.0);
    let kc = kernel_matrix(&c, &c, 1.0);
    let is_data: Vec<bool> = (0..30).map(|i| i >= 20).collect();
    let p = Problem {
        k: &k,
        kc: &kc,
        is_data: &is_data,
        w_ref: 0.5,
        lambda: 1e-6,
    };
    let (loss, _) = nplm_objective(&p, &DVector::zeros(5))?;
    let want = (0.5 * 20.0 + 10.0) * 2f64.ln();
    Ok(((loss - want).abs() < 1e-10, format!("{loss} vs {want}")))
}

fn hand_statistic() -> Result<(bool, String)> {
    let model = KernelModel::new(DMatrix::from_element(1, 1, 0.0), 1.0, DVector::from_element(1, 0.8))?;
    let r = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
    let d = DMatrix::from_element(1, 1, 1.0);
    let f0: f64 = 0.8;
    let f2 = 0.8 * (-2.0f64).exp();
    let f1 = 0.8 * (-0.5f64).exp();
    let want = -2.0 * (0.5 * (f0.exp_m1() + f2.exp_m1()) - f1);
    let got = test_statistic(&model, &r, &d, 0.5)?;
    let zero = KernelModel::new(DMatrix::from_element(1, 1, 0.0), 1.0, DVector::zeros(1))?;
    let t0 = test_statistic(&zero, &r, &d, 0.5)?;
    Ok(((got - want).abs() < 1e-12 && t0 == 0.0, format!("t = {got}, zero-weight t = {t0}")))
}

fn empirical_cap() -> Result<(bool, String)> {
    let e = ToyEnsemble::new(1.0, 0, (0..500).map(f64::from).collect())?;
    let pv = empirical_pvalue(1e9, &e);
    let z = z_score(pv.p)?;
    Ok((pv.saturated && (z - 2.878).abs() < 1e-3, format!("Z = {z:.4}")))
}

fn chi2_reference() -> Result<(bool, String)> {
    let p = asymptotic_pvalue(3.841, 1.0);
    Ok(((p - 0.05).abs() < 1e-4, format!("p = {p:.6}")))
}

fn baseline_closed_forms() -> Result<(bool, String)> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let fd = frechet_distance(&DVector::zeros(1), &one, &DVector::from_element(1, 1.0), &one)?;
    let mut rng = rng_from_seed(3);
    let x = gaussian(50, 3, &mut rng);
    let mmd = nystrom_mmd(&x, &x, 1.0, &x.rows(0, 6).into_owned())?;
    let mut min_dchi2 = f64::INFINITY;
    for _ in 0..200 {
        let raw_r: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
        let raw_s: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let t = ScoreTemplates::new((0..=5).map(|k| k as f64 / 5.0).collect(), norm(&raw_r), norm(&raw_s))?;
        let counts: Vec<f64> = (0..5).map(|_| f64::from(rng.random_range(0..50u32))).collect();
        if counts.iter().sum::<f64>() > 0.0 {
            min_dchi2 = min_dchi2.min(binned_fit(&counts, &t)?.delta_chi2);
        }
    }
    let ok = fd == 1.0 && mmd.abs() < 1e-12 && min_dchi2 >= -1e-9;
    Ok((ok, format!("fd² = {fd}, mmd²(X,X) = {mmd:.1e}, min Δχ² = {min_dchi2:.2e}")))
}

fn mahalanobis_affine() -> Result<(bool, String)> {
    let mut rng = rng_from_seed(11);
    let pts = gaussian(200, 3, &mut rng);
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let reference = LabeledDataset::new(pts, labels, 2)?;
    let observed = gaussian(40, 3, &mut rng);
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, -0.4, 1.0, 0.5, 0.1, 0.0, 3.0]);
    let b = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
    let map = |x: &DMatrix<f64>| {
        let mut y = x * a.transpose();
        for mut row in y.row_iter_mut() {
            row += b.transpose();
        }
        y
    };
    let t1 = mahalanobis_statistic(&ClassMoments::estimate(&reference)?, &observed)?;
    let moved = reference.with_points(map(reference.points()))?;
    let t2 = mahalanobis_statistic(&ClassMoments::estimate(&moved)?, &map(&observed))?;
    let rel = (t1 - t2).abs() / t1.abs();
    Ok((rel < 1e-8, format!("relative change {rel:.1e}")))
}

fn supcon_scale() -> Result<(bool, String)> {
    let mut rng = rng_from_seed(5);
    let z = gaussian(12, 4, &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let a = supcon_loss(&z, &labels, 0.1)?.loss;
    let b = supcon_loss(&(&z * 3.7), &labels, 0.1)?.loss;
    Ok(((a - b).abs() < 1e-9, format!("|ΔL| = {:.1e}", (a - b).abs())))
}

fn synthetic_calibration() -> Result<(bool, String)> {
    let raw = sample_cluster_params(5, 4, 1)?;
    let cal = calibrate_separation(&raw, DEFAULT_TARGET_Z, DEFAULT_N_BKG, DEFAULT_F_INJ)?;
    let z = cal.min_significance;
    Ok(((z - 3.5).abs() <= 0.05, format!("minimum pairwise significance {z:.4}")))
}

/// Fast invariant checks over every module.
pub fn run_selftest() -> Vec<SelfCheck> {
    vec![
        check("nplm objective gradient", objective_gradient()),
        check("nplm zero-weight loss", zero_weight_loss()),
        check("nplm test statistic", hand_statistic()),
        check("empirical Z cap", empirical_cap()),
        check("chi2 p-value", chi2_reference()),
        check("baseline closed forms", baseline_closed_forms()),
        check("mahalanobis affine invariance", mahalanobis_affine()),
        check("supcon scale invariance", supcon_scale()),
        check("synthetic separation", synthetic_calibration()),
    ]
}
