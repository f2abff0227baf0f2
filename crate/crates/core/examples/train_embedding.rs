//! Trains the contrastive encoder on a small benchmark and reports how well
//! the embedding separates the known classes.
//!
//! cargo run --release --example train_embedding

use novelty_scan::baselines::ClassMoments;
use novelty_scan::pipeline::{generate_pools, train_encoder, EmbeddedSets, ExperimentConfig, Splits};

fn main() -> novelty_scan::Result<()> {
    let mut config = ExperimentConfig::default();
    config.synthetic.n_per_class = 3_000;
    config.contrastive.epochs = 10;
    let (background, signal, _) = generate_pools(&config)?;
    let splits = Splits::new(&config, &background, &signal)?;
    let trained = train_encoder(&config, &splits, false)?;
    for e in &trained.log {
        println!(
            "epoch {:2}: lr {:.4} train {:.4} val {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_loss
        );
    }
    let sets = EmbeddedSets::new(&trained.encoder, &splits)?;
    let moments = ClassMoments::estimate(&sets.train_background)?;
    let predicted = moments.classify(sets.test_background.points())?;
    let correct = predicted
        .iter()
        .zip(sets.test_background.labels())
        .filter(|(p, l)| p == l)
        .count();
    println!(
        "nearest-class accuracy on held-out background: {:.3}",
        correct as f64 / predicted.len() as f64
    );
    Ok(())
}
