use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use novelty_scan::pipeline::{
    cmd_embed, cmd_generate, cmd_report, cmd_scan, cmd_train_embed, run_selftest, ExperimentConfig, Method, Overrides,
    Workspace,
};
use novelty_scan::{Error, Result};

#[derive(Parser)]
#[command(name = "novelty-scan", version, about = "Contrastive embeddings plus kernel two-sample tests")]
struct Cli {
    /// Worker threads for the toy harness (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic background and signal pools.
    Generate(Common),
    /// Train the contrastive encoder.
    TrainEmbed {
        #[command(flatten)]
        common: Common,
        /// Fraction of training labels moved to a random other class.
        #[arg(long)]
        label_noise: Option<f64>,
        #[arg(long)]
        embed_dim: Option<usize>,
        /// Include the held-out signal class in training.
        #[arg(long)]
        ideal: bool,
    },
    /// Embed the dataset splits with a trained encoder.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ideal: bool,
    },
    /// Null and signal toys for NPLM and the baselines.
    Scan {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods, e.g. `nplm,mahalanobis`.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        toys: Option<usize>,
        /// Draw the reference sample once instead of per toy.
        #[arg(long)]
        fixed_reference: bool,
    },
    /// Plot-data tables from a finished scan.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn load_config(common: &Common, mut overrides: Overrides) -> Result<(ExperimentConfig, Workspace)> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    overrides.seed = common.seed;
    Ok((base.apply(&overrides)?, Workspace::new(&common.out)))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(common) => {
            let (cfg, ws) = load_config(&common, Overrides::default())?;
            let out = cmd_generate(&cfg, &ws)?;
            println!(
                "background {} points, signal {} points, minimum pairwise significance {:.4}, hash {}",
                out.background.len(),
                out.signal.len(),
                out.calibration.min_significance,
                out.content_hash
            );
        }
        Command::TrainEmbed {
            common,
            label_noise,
            embed_dim,
            ideal,
        } => {
            let overrides = Overrides {
                label_noise,
                embed_dim,
                ..Overrides::default()
            };
            let (cfg, ws) = load_config(&common, overrides)?;
            let out = cmd_train_embed(&cfg, &ws, ideal)?;
            if let Some(last) = out.log.last() {
                println!(
                    "epoch {}: train loss {:.4}, val loss {:.4}, {} labels relabeled",
                    last.epoch, last.train_loss, last.val_loss, out.relabeled
                );
            }
        }
        Command::Embed { common, ideal } => {
            let (cfg, ws) = load_config(&common, Overrides::default())?;
            let sets = cmd_embed(&cfg, &ws, ideal)?;
            println!("embedded test background: {} points", sets.test_background.len());
        }
        Command::Scan {
            common,
            methods,
            toys,
            fixed_reference,
        } => {
            let overrides = Overrides {
                methods: methods.as_deref().map(Method::parse_list).transpose()?,
                n_toys: toys,
                fixed_reference,
                ..Overrides::default()
            };
            let (cfg, ws) = load_config(&common, overrides)?;
            let out = cmd_scan(&cfg, &ws)?;
            println!("widths {:?}", out.widths);
            for m in &out.methods {
                for s in &m.scan.signal {
                    let z = s.z_combined();
                    println!("{} f_S={} median Z {:.3}", m.method, s.f_s, novelty_scan::stats::median(&z));
                }
            }
        }
        Command::Report { out } => {
            let r = cmd_report(&Workspace::new(out))?;
            println!("{} rows written to {}", r.rows, r.z_vs_fs.display());
        }
        Command::Selftest => {
            let checks = run_selftest();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} self-test checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
