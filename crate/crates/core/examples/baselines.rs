//! Mahalanobis, Nyström-MMD, Fréchet and supervised binned-fit statistics on
//! one reference/data pair.
//!
//! cargo run --release --example baselines

use nalgebra::DMatrix;
use novelty_scan::baselines::{
    binned_delta_chi2, build_templates, frechet_statistic, mahalanobis_statistic, nystrom_mmd, train_score_classifier,
    ClassMoments, ScoreConfig,
};
use novelty_scan::data::LabeledDataset;
use novelty_scan::rng::rng_from_seed;
use rand_distr::{Distribution, StandardNormal};

fn cluster(n: usize, center: [f64; 2], seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(n, 2, |_, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        center[j] + 0.5 * z
    })
}

fn two_classes(n: usize, seed: u64) -> LabeledDataset {
    let a = cluster(n, [0.0, 0.0], seed);
    let b = cluster(n, [3.0, 0.0], seed + 1);
    let labels = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    LabeledDataset::new(
        DMatrix::from_fn(2 * n, 2, |i, j| if i < n { a[(i, j)] } else { b[(i - n, j)] }),
        labels,
        2,
    )
    .expect("consistent shapes")
}

fn main() -> novelty_scan::Result<()> {
    let reference = two_classes(2_000, 1);
    let background = two_classes(500, 10);
    let signal = cluster(50, [1.5, 2.0], 20);
    let observed = DMatrix::from_fn(1_050, 2, |i, j| {
        if i < 1_000 {
            background.points()[(i, j)]
        } else {
            signal[(i - 1_000, j)]
        }
    });

    let moments = ClassMoments::estimate(&reference)?;
    println!("Mahalanobis t = {:.1}", mahalanobis_statistic(&moments, &observed)?);
    let centers = reference.points().rows(0, 60).into_owned();
    println!("Nyström MMD² = {:.5}", nystrom_mmd(reference.points(), &observed, 1.0, &centers)?);
    println!("Fréchet distance² = {:.5}", frechet_statistic(reference.points(), &observed)?);

    let train_signal = LabeledDataset::new(cluster(1_000, [1.5, 2.0], 30), vec![2; 1_000], 3)?;
    let train_background = reference.with_labels(reference.labels().to_vec(), 3)?;
    let classifier = train_score_classifier(&train_background, &train_signal, &ScoreConfig::default())?;
    let templates = build_templates(
        &classifier.scores(reference.points())?,
        &classifier.scores(train_signal.points())?,
        20,
    )?;
    let dchi2 = binned_delta_chi2(&classifier.scores(&observed)?, &templates)?;
    println!("supervised Δχ² = {dchi2:.2}");
    Ok(())
}
