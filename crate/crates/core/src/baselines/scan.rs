use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::frechet::frechet_statistic;
use crate::baselines::mahalanobis::{mahalanobis_statistic, ClassMoments};
use crate::baselines::mmd::nystrom_mmd;
use crate::baselines::supervised::{binned_delta_chi2, build_templates, ScoreClassifier};
use crate::calibration::{scan_statistic, Scan, ToyDraw, ToySampler, ToyStatistic, ZSummary};
use crate::error::{Error, Result};
use crate::nplm::{centers_for_test, NplmConfig};
use crate::rng::derive_named;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mahalanobis,
    Mmd,
    Frechet,
    Supervised,
    IdealSupervised,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Mahalanobis,
        BaselineKind::Mmd,
        BaselineKind::Frechet,
        BaselineKind::Supervised,
        BaselineKind::IdealSupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mahalanobis => "mahalanobis",
            BaselineKind::Mmd => "mmd",
            BaselineKind::Frechet => "frechet",
            BaselineKind::Supervised => "supervised",
            BaselineKind::IdealSupervised => "ideal_supervised",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline '{s}'")))
    }
}

/// A baseline statistic evaluated on one toy draw. Larger values mean a
/// stronger departure from the reference.
#[derive(Debug, Clone, Copy)]
pub enum BaselineStatistic<'a> {
    Mahalanobis,
    /// One value per NPLM width, with the NPLM centers of the same toy.
    Mmd { config: &'a NplmConfig },
    Frechet,
    /// Binned Δχ² with `f_R` from the toy's reference scores and `f_S` from
    /// the given signal scores.
    Supervised {
        classifier: &'a ScoreClassifier,
        signal_scores: &'a [f64],
        n_bins: usize,
    },
}

impl ToyStatistic for BaselineStatistic<'_> {
    fn widths(&self) -> &[f64] {
        match self {
            BaselineStatistic::Mmd { config } => &config.widths,
            _ => &[],
        }
    }

    /// MMD derives the NPLM center seed from the toy seed.
    fn evaluate(&self, draw: &ToyDraw, seed: u64) -> Result<Vec<f64>> {
        let reference = draw.reference.points();
        let observed = draw.observed();
        match *self {
            BaselineStatistic::Mahalanobis => {
                let moments = ClassMoments::estimate(&draw.reference)?;
                Ok(vec![mahalanobis_statistic(&moments, &observed)?])
            }
            BaselineStatistic::Mmd { config } => {
                let centers = centers_for_test(reference, &observed, config, derive_named(seed, "nplm"))?;
                config
                    .widths
                    .iter()
                    .map(|&w| nystrom_mmd(reference, &observed, w, &centers))
                    .collect()
            }
            BaselineStatistic::Frechet => Ok(vec![frechet_statistic(reference, &observed)?]),
            BaselineStatistic::Supervised {
                classifier,
                signal_scores,
                n_bins,
            } => {
                let templates = build_templates(&classifier.scores(reference)?, signal_scores, n_bins)?;
                Ok(vec![binned_delta_chi2(&classifier.scores(&observed)?, &templates)?])
            }
        }
    }
}

/// Toy results of one method at one signal fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub method: String,
    pub f_s: f64,
    pub widths: Vec<f64>,
    /// Toy-major statistic values.
    pub values: Vec<Vec<f64>>,
    pub z: ZSummary,
}

pub fn write_scan_csv<W: Write>(entries: &[ScanEntry], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["kind", "f_S", "width", "toy", "t"]).map_err(csv_err)?;
    for e in entries {
        for (toy, row) in e.values.iter().enumerate() {
            for (k, t) in row.iter().enumerate() {
                let width = e.widths.get(k).map(|w| format!("{w}")).unwrap_or_default();
                out.write_record([e.method.as_str(), &format!("{}", e.f_s), &width, &toy.to_string(), &format!("{t}")])
                    .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(entries: &[ScanEntry], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["kind", "f_S", "z_empirical_median", "z_low", "z_high"])
        .map_err(csv_err)?;
    for e in entries {
        out.write_record([
            e.method.clone(),
            format!("{}", e.f_s),
            format!("{}", e.z.median),
            format!("{}", e.z.low),
            format!("{}", e.z.high),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Null calibration and signal toys of one baseline through the shared toy
/// harness, summarized per signal fraction.
#[allow(clippy::too_many_arguments)]
pub fn baseline_toy_scan(
    kind: BaselineKind,
    statistic: &BaselineStatistic<'_>,
    sampler: &ToySampler<'_>,
    signal_pool: &DMatrix<f64>,
    fractions: &[f64],
    n_toys: usize,
    null_seed: u64,
    signal_seed: u64,
) -> Result<Vec<ScanEntry>> {
    let scan = scan_statistic(statistic, sampler, signal_pool, fractions, n_toys, null_seed, signal_seed, false)
        .map_err(|e| e.context(kind.name()))?;
    scan_entries(kind.name(), &scan)
}

/// One summary entry per signal fraction of a finished scan.
pub fn scan_entries(method: &str, scan: &Scan) -> Result<Vec<ScanEntry>> {
    scan.signal
        .iter()
        .map(|s| {
            Ok(ScanEntry {
                method: method.to_string(),
                f_s: s.f_s,
                widths: scan.widths.clone(),
                values: s.values.clone(),
                z: ZSummary::from_scores(&s.z_combined())?,
            })
        })
        .collect()
}
