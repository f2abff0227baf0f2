//! Experiment driver behind the command-line tool: dataset generation,
//! encoder training, embedding, the toy scan and plot-data reports.

pub mod config;
pub mod report;
pub mod selftest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baselines::{
    scan_entries, train_score_classifier, write_scan_csv, write_summary_csv, BaselineKind, BaselineStatistic,
    ScanEntry,
};
use crate::calibration::{scan_statistic, stratified_reference, NplmStatistic, Scan, ToySampler, ToyStatistic};
use crate::data::{add_label_noise, column_moments, split, standardize_with, LabeledDataset};
use crate::embedding::{embed_dataset, train, write_log, Architecture, MlpEncoder};
use crate::error::{Error, Result};
use crate::nplm::{select_kernel_widths, NplmConfig, DEFAULT_WIDTH_SUBSAMPLE};
use crate::rng::{derive_named, derive_seed};
use crate::synthetic::{generate_dataset, Calibration, SyntheticSpec};

pub use config::{ExperimentConfig, Method, Overrides};
pub use report::{cmd_report, ReportOutputs};
pub use selftest::{run_selftest, SelfCheck};

/// File layout of one experiment directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn background(&self) -> PathBuf {
        self.root.join("background.bin")
    }

    pub fn signal(&self) -> PathBuf {
        self.root.join("signal.bin")
    }

    fn suffix(ideal: bool) -> &'static str {
        if ideal {
            "_ideal"
        } else {
            ""
        }
    }

    pub fn encoder(&self, ideal: bool) -> PathBuf {
        self.root.join(format!("encoder{}.bin", Self::suffix(ideal)))
    }

    pub fn train_log(&self, ideal: bool) -> PathBuf {
        self.root.join(format!("train_log{}.jsonl", Self::suffix(ideal)))
    }

    pub fn embedded_dir(&self, ideal: bool) -> PathBuf {
        self.root.join(format!("embedded{}", Self::suffix(ideal)))
    }

    pub fn provenance(&self, name: &str) -> PathBuf {
        self.root.join("provenance").join(format!("{name}.json"))
    }

    pub fn scan_dir(&self) -> PathBuf {
        self.root.join("scan")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// SHA-256 of the concatenated file contents, as lowercase hex.
pub fn content_hash(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(fs::read(p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    command: &'a str,
    config: &'a ExperimentConfig,
    content_hash: String,
    details: T,
}

fn write_provenance<T: Serialize>(
    ws: &Workspace,
    name: &str,
    config: &ExperimentConfig,
    hashed: &[PathBuf],
    details: T,
) -> Result<String> {
    let content_hash = content_hash(hashed)?;
    let path = ws.provenance(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let record = Provenance {
        command: name,
        config,
        content_hash: content_hash.clone(),
        details,
    };
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(content_hash)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone)]
pub struct GenerateOutputs {
    pub background: LabeledDataset,
    pub signal: LabeledDataset,
    pub calibration: Calibration,
    pub content_hash: String,
}

/// Synthetic background and held-out signal pools for a config.
pub fn generate_pools(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset, Calibration)> {
    let s = &config.synthetic;
    let (spec, cal) = SyntheticSpec::calibrated(
        s.n_clusters,
        s.dim,
        s.n_noise_dims,
        s.n_per_class,
        derive_named(config.seed, "synthetic"),
    )?;
    let (background, signal) = generate_dataset(&spec, Some(s.held_out_class))?;
    Ok((background, signal, cal))
}

/// Writes `background.bin`, `signal.bin` and their provenance.
pub fn cmd_generate(config: &ExperimentConfig, ws: &Workspace) -> Result<GenerateOutputs> {
    config.validate()?;
    let (background, signal, calibration) = generate_pools(config)?;
    fs::create_dir_all(ws.root())?;
    background.save(&ws.background())?;
    signal.save(&ws.signal())?;
    let content_hash = write_provenance(
        ws,
        "generate",
        config,
        &[ws.background(), ws.signal()],
        &calibration,
    )?;
    Ok(GenerateOutputs {
        background,
        signal,
        calibration,
        content_hash,
    })
}

/// Train, validation and test parts of both pools.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train_background: LabeledDataset,
    pub val_background: LabeledDataset,
    pub test_background: LabeledDataset,
    pub train_signal: LabeledDataset,
    pub val_signal: LabeledDataset,
    pub test_signal: LabeledDataset,
}

fn three(parts: Vec<LabeledDataset>) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    match <[LabeledDataset; 3]>::try_from(parts) {
        Ok([a, b, c]) => Ok((a, b, c)),
        Err(_) => Err(Error::invalid("expected three split parts")),
    }
}

impl Splits {
    pub fn new(config: &ExperimentConfig, background: &LabeledDataset, signal: &LabeledDataset) -> Result<Self> {
        let fr = config.split.fractions();
        let (train_background, val_background, test_background) =
            three(split(background, &fr, derive_named(config.seed, "split-background"))?)?;
        let (train_signal, val_signal, test_signal) =
            three(split(signal, &fr, derive_named(config.seed, "split-signal"))?)?;
        Ok(Self {
            train_background,
            val_background,
            test_background,
            train_signal,
            val_signal,
            test_signal,
        })
    }

    pub fn load(config: &ExperimentConfig, ws: &Workspace) -> Result<Self> {
        let background = LabeledDataset::load(&ws.background()).map_err(|e| e.context("background pool"))?;
        let signal = LabeledDataset::load(&ws.signal()).map_err(|e| e.context("signal pool"))?;
        Self::new(config, &background, &signal)
    }
}

#[derive(Debug, Clone, Serialize)]
struct TrainDetails {
    ideal: bool,
    seed: u64,
    n_train: usize,
    n_relabeled: usize,
    final_train_loss: Option<f64>,
    final_val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub encoder: MlpEncoder,
    pub log: Vec<crate::embedding::EpochLog>,
    pub relabeled: usize,
}

/// Trains the contrastive encoder on the background classes, or on all
/// classes with `ideal`, after applying the configured label noise.
pub fn train_encoder(config: &ExperimentConfig, splits: &Splits, ideal: bool) -> Result<TrainOutputs> {
    let (train_set, val_set) = if ideal {
        (
            splits.train_background.concat(&splits.train_signal)?,
            splits.val_background.concat(&splits.val_signal)?,
        )
    } else {
        (splits.train_background.clone(), splits.val_background.clone())
    };
    let (train_set, flipped) = add_label_noise(
        &train_set,
        config.embedding.label_noise,
        derive_named(config.seed, "label-noise"),
    )?;
    let n_classes = config.synthetic.n_clusters;
    let arch = Architecture::standard(train_set.dim(), n_classes).with_embed_dim(config.embedding.embed_dim);
    let seed = derive_seed(derive_named(config.seed, "contrastive"), config.contrastive.seed);
    let init = MlpEncoder::new(&arch, derive_named(seed, "init"));
    let mut cc = config.contrastive.clone();
    cc.seed = seed;
    let (encoder, log) = train(&init, &train_set, &val_set, &cc)?;
    Ok(TrainOutputs {
        encoder,
        log,
        relabeled: flipped.len(),
    })
}

/// Trains and saves the encoder checkpoint and its JSON-lines log.
pub fn cmd_train_embed(config: &ExperimentConfig, ws: &Workspace, ideal: bool) -> Result<TrainOutputs> {
    config.validate()?;
    let splits = Splits::load(config, ws)?;
    let out = train_encoder(config, &splits, ideal)?;
    out.encoder.save(&ws.encoder(ideal))?;
    let mut log = create(&ws.train_log(ideal))?;
    write_log(&out.log, &mut log)?;
    log.flush()?;
    let details = TrainDetails {
        ideal,
        seed: derive_seed(derive_named(config.seed, "contrastive"), config.contrastive.seed),
        n_train: splits.train_background.len() + if ideal { splits.train_signal.len() } else { 0 },
        n_relabeled: out.relabeled,
        final_train_loss: out.log.last().map(|l| l.train_loss),
        final_val_loss: out.log.last().map(|l| l.val_loss),
    };
    let name = if ideal { "train_embed_ideal" } else { "train_embed" };
    write_provenance(ws, name, config, &[ws.encoder(ideal)], details)?;
    Ok(out)
}

/// Embeddings of the four parts the scan uses.
#[derive(Debug, Clone)]
pub struct EmbeddedSets {
    pub train_background: LabeledDataset,
    pub train_signal: LabeledDataset,
    pub test_background: LabeledDataset,
    pub test_signal: LabeledDataset,
}

impl EmbeddedSets {
    pub const FILES: [&'static str; 4] = ["train_background", "train_signal", "test_background", "test_signal"];

    pub fn new(encoder: &MlpEncoder, splits: &Splits) -> Result<Self> {
        Ok(Self {
            train_background: embed_dataset(encoder, &splits.train_background)?,
            train_signal: embed_dataset(encoder, &splits.train_signal)?,
            test_background: embed_dataset(encoder, &splits.test_background)?,
            test_signal: embed_dataset(encoder, &splits.test_signal)?,
        })
    }

    /// Every part standardized per dimension by the test-background moments,
    /// the population reference samples are drawn from.
    pub fn standardized(&self) -> Result<Self> {
        let (means, stds) = column_moments(self.test_background.points());
        let st = |d: &LabeledDataset| d.with_points(standardize_with(d.points(), &means, &stds));
        Ok(Self {
            train_background: st(&self.train_background)?,
            train_signal: st(&self.train_signal)?,
            test_background: st(&self.test_background)?,
            test_signal: st(&self.test_signal)?,
        })
    }

    fn parts(&self) -> [&LabeledDataset; 4] {
        [
            &self.train_background,
            &self.train_signal,
            &self.test_background,
            &self.test_signal,
        ]
    }
}

/// Embeds the dataset splits with a saved encoder into `embedded[_ideal]/`.
pub fn cmd_embed(config: &ExperimentConfig, ws: &Workspace, ideal: bool) -> Result<EmbeddedSets> {
    config.validate()?;
    let splits = Splits::load(config, ws)?;
    let encoder = MlpEncoder::load(&ws.encoder(ideal)).map_err(|e| e.context("encoder checkpoint"))?;
    let sets = EmbeddedSets::new(&encoder, &splits)?;
    let dir = ws.embedded_dir(ideal);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (name, part) in EmbeddedSets::FILES.iter().zip(sets.parts()) {
        let path = dir.join(format!("{name}.bin"));
        part.save(&path)?;
        files.push(path);
    }
    let name = if ideal { "embed_ideal" } else { "embed" };
    write_provenance(ws, name, config, &files, ideal)?;
    Ok(sets)
}

/// Finished scan of one method.
#[derive(Debug, Clone)]
pub struct MethodScan {
    pub method: Method,
    pub scan: Scan,
}

/// Everything the scan command writes.
#[derive(Debug, Clone)]
pub struct ScanOutputs {
    pub widths: Vec<f64>,
    pub methods: Vec<MethodScan>,
}

/// Kernel widths from the config, or selected on the embedded test
/// background when none are configured.
pub fn resolve_widths(config: &ExperimentConfig, test_background: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !config.nplm.widths.is_empty() {
        return Ok(config.nplm.widths.clone());
    }
    select_kernel_widths(test_background, DEFAULT_WIDTH_SUBSAMPLE, derive_named(config.seed, "widths"))
}

/// Null and signal toys of every configured method on embedded pools.
/// `ideal` supplies the pools embedded by the encoder trained with signal;
/// it is only needed for `ideal_supervised`.
pub fn run_scan(config: &ExperimentConfig, sets: &EmbeddedSets, ideal: Option<&EmbeddedSets>) -> Result<ScanOutputs> {
    config.validate()?;
    let sets = &sets.standardized()?;
    let ideal = ideal.map(EmbeddedSets::standardized).transpose()?;
    let ideal = ideal.as_ref();
    let widths = resolve_widths(config, sets.test_background.points())?;
    let nplm = NplmConfig {
        widths: widths.clone(),
        ..config.nplm.clone()
    };
    nplm.validate()?;
    let null_seed = derive_named(config.seed, "null-toys");
    let signal_seed = derive_named(config.seed, "signal-toys");
    let mut methods: Vec<Method> = Vec::new();
    for &m in &config.scan.methods {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let pools = match method {
            Method::Baseline(BaselineKind::IdealSupervised) => ideal.ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "ideal_supervised needs the encoder from `train-embed --ideal`",
                ))
            })?,
            _ => sets,
        };
        let fixed = if config.scan.fixed_reference {
            Some(stratified_reference(
                &pools.test_background,
                config.scan.sizes.n_ref,
                derive_named(config.seed, "fixed-reference"),
            )?)
        } else {
            None
        };
        let sampler = ToySampler {
            fixed_reference: fixed.as_deref(),
            ..ToySampler::new(&pools.test_background, config.scan.sizes)
        };
        let run = |stat: &dyn ToyStatistic, fit: bool| {
            scan_statistic(
                stat,
                &sampler,
                pools.test_signal.points(),
                &config.scan.f_s,
                config.scan.n_toys,
                null_seed,
                signal_seed,
                fit,
            )
        };
        let scan = match method {
            Method::Nplm => run(&NplmStatistic::new(nplm.clone())?, true),
            Method::Baseline(kind) => match kind {
                BaselineKind::Mahalanobis => run(&BaselineStatistic::Mahalanobis, false),
                BaselineKind::Frechet => run(&BaselineStatistic::Frechet, false),
                BaselineKind::Mmd => run(&BaselineStatistic::Mmd { config: &nplm }, false),
                BaselineKind::Supervised | BaselineKind::IdealSupervised => {
                    let sc = crate::baselines::ScoreConfig {
                        seed: derive_seed(derive_named(config.seed, kind.name()), config.supervised.seed),
                        ..config.supervised.clone()
                    };
                    let classifier = train_score_classifier(&pools.train_background, &pools.train_signal, &sc)?;
                    let signal_scores = classifier.scores(pools.train_signal.points())?;
                    run(
                        &BaselineStatistic::Supervised {
                            classifier: &classifier,
                            signal_scores: &signal_scores,
                            n_bins: sc.n_bins,
                        },
                        false,
                    )
                }
            },
        }
        .map_err(|e| e.context(method.name()))?;
        out.push(MethodScan { method, scan });
    }
    Ok(ScanOutputs { widths, methods: out })
}

#[derive(Debug, Clone, Serialize)]
struct ReportFile<'a> {
    method: &'a str,
    f_s: f64,
    reports: &'a [crate::calibration::TestReport],
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    crate::stats::median(&v)
}

/// Writes the scan tables under `scan/`.
pub fn write_scan_outputs(outputs: &ScanOutputs, config: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let dir = ws.scan_dir();
    fs::create_dir_all(dir.join("reports"))?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());

    let mut null = csv::Writer::from_writer(create(&dir.join("null_toys.csv"))?);
    null.write_record(["kind", "width", "toy", "t"]).map_err(csv_err)?;
    let mut entries: Vec<ScanEntry> = Vec::new();
    let mut summary = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    summary
        .write_record(["method", "f_S", "width", "z_empirical", "z_asymptotic", "z_combined"])
        .map_err(csv_err)?;
    let mut toy_z = csv::Writer::from_writer(create(&dir.join("toy_z.csv"))?);
    toy_z
        .write_record(["method", "f_S", "toy", "width_index", "width", "z_empirical", "z_combined", "saturated"])
        .map_err(csv_err)?;

    for ms in &outputs.methods {
        let name = ms.method.name();
        let scan = &ms.scan;
        let width_label = |k: usize| scan.widths.get(k).map(|w| format!("{w}")).unwrap_or_default();
        for (toy, row) in scan.null_values.iter().enumerate() {
            for (k, t) in row.iter().enumerate() {
                null.write_record([name, &width_label(k), &toy.to_string(), &format!("{t}")])
                    .map_err(csv_err)?;
            }
        }
        entries.extend(scan_entries(name, scan)?);
        for s in &scan.signal {
            let f_s = format!("{}", s.f_s);
            let n_widths = scan.null.len();
            for k in 0..n_widths {
                let z_emp = median_of(s.reports.iter().map(|r| r.per_width[k].z_empirical));
                let asym: Option<Vec<f64>> = s.reports.iter().map(|r| r.per_width[k].z_asymptotic).collect();
                let z_asym = asym.map(|v| crate::stats::median(&v));
                let z_comb = median_of(s.reports.iter().map(|r| r.z_combined));
                summary
                    .write_record([
                        name.to_string(),
                        f_s.clone(),
                        width_label(k),
                        format!("{z_emp}"),
                        fmt_opt(z_asym),
                        format!("{z_comb}"),
                    ])
                    .map_err(csv_err)?;
            }
            for (toy, r) in s.reports.iter().enumerate() {
                for (k, w) in r.per_width.iter().enumerate() {
                    toy_z
                        .write_record([
                            name.to_string(),
                            f_s.clone(),
                            toy.to_string(),
                            k.to_string(),
                            width_label(k),
                            format!("{}", w.z_empirical),
                            format!("{}", r.z_combined),
                            u8::from(w.saturated).to_string(),
                        ])
                        .map_err(csv_err)?;
                }
            }
            let file = ReportFile {
                method: name,
                f_s: s.f_s,
                reports: &s.reports,
            };
            fs::write(
                dir.join("reports").join(format!("{name}_fS_{}.json", s.f_s)),
                serde_json::to_string_pretty(&file)? + "\n",
            )?;
        }
    }
    null.flush()?;
    summary.flush()?;
    toy_z.flush()?;
    write_scan_csv(&entries, create(&dir.join("toys.csv"))?)?;
    write_summary_csv(&entries, create(&dir.join("baseline_summary.csv"))?)?;
    let files: Vec<PathBuf> = ["summary.csv", "toys.csv", "null_toys.csv"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_provenance(ws, "scan", config, &files, &outputs.widths)?;
    Ok(())
}

/// Embeds the test splits, runs every configured method and writes the
/// scan tables.
pub fn cmd_scan(config: &ExperimentConfig, ws: &Workspace) -> Result<ScanOutputs> {
    config.validate()?;
    let splits = Splits::load(config, ws)?;
    let encoder = MlpEncoder::load(&ws.encoder(false)).map_err(|e| e.context("encoder checkpoint"))?;
    let sets = EmbeddedSets::new(&encoder, &splits)?;
    let wants_ideal = config
        .scan
        .methods
        .contains(&Method::Baseline(BaselineKind::IdealSupervised));
    let ideal = if wants_ideal {
        let enc = MlpEncoder::load(&ws.encoder(true)).map_err(|e| e.context("ideal encoder checkpoint"))?;
        Some(EmbeddedSets::new(&enc, &splits)?)
    } else {
        None
    };
    let outputs = run_scan(config, &sets, ideal.as_ref())?;
    write_scan_outputs(&outputs, config, ws)?;
    Ok(outputs)
}
