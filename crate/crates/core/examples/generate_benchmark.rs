//! Generates the calibrated 5-cluster benchmark and prints its geometry.
//!
//! cargo run --release --example generate_benchmark

use novelty_scan::synthetic::{generate_dataset, SyntheticSpec};

fn main() -> novelty_scan::Result<()> {
    let (spec, cal) = SyntheticSpec::calibrated(5, 4, 10, 2_000, 42)?;
    println!("mean scale factor {:.4}", cal.scale);
    println!("minimum pairwise significance {:.4}", cal.min_significance);
    for (k, (m, s)) in cal.params.means.iter().zip(&cal.params.sigmas).enumerate() {
        println!("cluster {k}: mean {m:.3?} sigma {s:.3?}");
    }
    let (background, signal) = generate_dataset(&spec, Some(4))?;
    println!(
        "background {} × {}, held-out signal {} × {}",
        background.len(),
        background.dim(),
        signal.len(),
        signal.dim()
    );
    Ok(())
}
