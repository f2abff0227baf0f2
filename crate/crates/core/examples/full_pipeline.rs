//! The command-line workflow end to end in a scratch directory: generate,
//! train, embed, scan and report.
//!
//! cargo run --release --example full_pipeline [-- <dir>]

use std::path::PathBuf;

use novelty_scan::calibration::SampleSizes;
use novelty_scan::pipeline::{cmd_embed, cmd_generate, cmd_report, cmd_scan, cmd_train_embed, ExperimentConfig, Method, Workspace};

fn main() -> novelty_scan::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("novelty-scan-example"));
    let mut config = ExperimentConfig::default();
    config.synthetic.n_per_class = 2_000;
    config.contrastive.epochs = 5;
    config.scan.n_toys = 30;
    config.scan.f_s = vec![0.01, 0.05, 0.1];
    config.scan.sizes = SampleSizes { n_ref: 2_000, n_data: 400 };
    config.scan.methods = Method::parse_list("nplm,mahalanobis,mmd,frechet,supervised,ideal_supervised")?;
    let ws = Workspace::new(&dir);

    let generated = cmd_generate(&config, &ws)?;
    println!("generated pools, content hash {}", generated.content_hash);
    for ideal in [false, true] {
        cmd_train_embed(&config, &ws, ideal)?;
        cmd_embed(&config, &ws, ideal)?;
    }
    let scan = cmd_scan(&config, &ws)?;
    println!("kernel widths {:.3?}", scan.widths);
    let report = cmd_report(&ws)?;
    println!("{}", std::fs::read_to_string(&report.z_vs_fs)?);
    println!("outputs under {}", dir.display());
    Ok(())
}
