//! Pseudo-experiment harness and p-value machinery: empirical p-values against
//! null ensembles, χ² fits for asymptotic p-values, Z-scores and the
//! average-p combination over kernel widths.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::data::{select_rows, LabeledDataset};
use crate::error::{Error, Result};
use crate::nplm::{run_test, NplmConfig};
use crate::rng::{derive_named, derive_seed, rng_from_seed};
use crate::stats::{chi2_sf, ks_test, mean, quantile, upper_normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub n_ref: usize,
    pub n_data: usize,
}

impl SampleSizes {
    pub const SYNTHETIC: SampleSizes = SampleSizes {
        n_ref: 10_000,
        n_data: 2_000,
    };
}

/// Sorted null-hypothesis test statistics at one kernel width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnsemble {
    pub width: f64,
    pub master_seed: u64,
    pub n_toys: usize,
    pub t_values: Vec<f64>,
}

impl ToyEnsemble {
    pub fn new(width: f64, master_seed: u64, mut t_values: Vec<f64>) -> Result<Self> {
        if t_values.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one toy"));
        }
        if t_values.iter().any(|t| t.is_nan()) {
            return Err(Error::invalid("ensemble contains NaN"));
        }
        t_values.sort_by(f64::total_cmp);
        Ok(Self {
            width,
            master_seed,
            n_toys: t_values.len(),
            t_values,
        })
    }

    /// Number of ensemble values strictly above `t_obs`.
    pub fn count_above(&self, t_obs: f64) -> usize {
        let below_or_equal = self.t_values.partition_point(|&t| t <= t_obs);
        self.n_toys - below_or_equal
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let e: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if e.n_toys != e.t_values.len() || !e.t_values.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::Format(format!("{}: inconsistent ensemble", path.display())));
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub p: f64,
    /// No toy exceeded the observation; `p` is the `1/(N+1)` cap.
    pub saturated: bool,
}

/// Fraction of toys strictly above `t_obs`; a zero count is reported as
/// `1/(N+1)` with the saturation flag set.
pub fn empirical_pvalue(t_obs: f64, ensemble: &ToyEnsemble) -> PValue {
    let above = ensemble.count_above(t_obs);
    if above == 0 {
        PValue {
            p: 1.0 / (ensemble.n_toys as f64 + 1.0),
            saturated: true,
        }
    } else {
        PValue {
            p: above as f64 / ensemble.n_toys as f64,
            saturated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Fit {
    pub dof: f64,
    /// Mean of the positive entries, the moment estimate of the dof.
    pub moment_dof: f64,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    pub n_used: usize,
}

impl Chi2Fit {
    /// MLE and moment estimates agree within 15%.
    pub fn moments_agree(&self) -> bool {
        (self.dof - self.moment_dof).abs() <= 0.15 * self.moment_dof
    }
}

pub const MIN_TOYS_FOR_FIT: usize = 50;

/// Maximum-likelihood χ² degrees of freedom over the positive entries.
///
/// The score equation `ψ(k/2) = mean(ln t) − ln 2` is monotone in `k` and
/// solved by bisection.
pub fn fit_chi2_dof(values: &[f64]) -> Result<Chi2Fit> {
    if values.len() < MIN_TOYS_FOR_FIT {
        return Err(Error::invalid(format!(
            "χ² fit needs at least {MIN_TOYS_FOR_FIT} toys, got {}",
            values.len()
        )));
    }
    let positive: Vec<f64> = values.iter().copied().filter(|&t| t > 0.0).collect();
    if 2 * positive.len() <= values.len() {
        return Err(Error::FitFailure(format!(
            "{} of {} values are not positive",
            values.len() - positive.len(),
            values.len()
        )));
    }
    let m = mean(&positive);
    let spread = positive.iter().map(|t| (t - m).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * m {
        return Err(Error::FitFailure("ensemble has zero variance".into()));
    }
    let target = positive.iter().map(|t| t.ln()).sum::<f64>() / positive.len() as f64 - 2f64.ln();
    let (mut lo, mut hi) = (1e-6f64, 1e7f64);
    if digamma(0.5 * lo) > target || digamma(0.5 * hi) < target {
        return Err(Error::FitFailure("dof outside the searchable range".into()));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if digamma(0.5 * mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    let dof = (lo * hi).sqrt();
    let (ks_statistic, ks_pvalue) = ks_test(&positive, |t| 1.0 - chi2_sf(t, dof));
    Ok(Chi2Fit {
        dof,
        moment_dof: m,
        ks_statistic,
        ks_pvalue,
        n_used: positive.len(),
    })
}

/// `P(χ²_dof > t_obs)`.
pub fn asymptotic_pvalue(t_obs: f64, dof: f64) -> f64 {
    chi2_sf(t_obs, dof)
}

/// One-sided significance `Z = Φ⁻¹(1 − p)`.
pub fn z_score(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p-value {p} outside (0, 1)")));
    }
    Ok(upper_normal_quantile(p))
}

/// Z-score with `p` clamped into `[floor, 1 − floor]` so boundary p-values
/// still map to a finite number.
pub fn bounded_z(p: f64, floor: f64) -> f64 {
    upper_normal_quantile(p.clamp(floor, 1.0 - floor))
}

/// Arithmetic mean of the per-width p-values.
pub fn combine_pvalues(p_values: &[f64]) -> Result<f64> {
    if p_values.is_empty() {
        return Err(Error::invalid("no p-values to combine"));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("p-values must lie in [0, 1]"));
    }
    Ok(mean(p_values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub width: f64,
    pub t_obs: f64,
    pub p_empirical: f64,
    pub p_asymptotic: Option<f64>,
    pub z_empirical: f64,
    pub z_asymptotic: Option<f64>,
    pub chi2_dof: Option<f64>,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub per_width: Vec<WidthReport>,
    pub p_combined: f64,
    pub z_combined: f64,
    /// At least one width hit the empirical p-value cap.
    pub saturated: bool,
}

/// Smallest p-value an asymptotic Z is computed from.
const ASYMPTOTIC_P_FLOOR: f64 = 1e-300;

impl TestReport {
    /// Scores one observation per width against the matching null ensemble.
    /// `fits` holds the χ² fit per width where one was possible.
    pub fn build(t_obs: &[f64], ensembles: &[ToyEnsemble], fits: &[Option<Chi2Fit>]) -> Result<Self> {
        if t_obs.len() != ensembles.len() || fits.len() != ensembles.len() {
            return Err(Error::invalid("need one observation, ensemble and fit per width"));
        }
        let mut per_width = Vec::with_capacity(t_obs.len());
        for ((&t, ens), fit) in t_obs.iter().zip(ensembles).zip(fits) {
            let pv = empirical_pvalue(t, ens);
            let emp_floor = 1.0 / (ens.n_toys as f64 + 1.0);
            let p_asym = fit.map(|f| asymptotic_pvalue(t, f.dof));
            per_width.push(WidthReport {
                width: ens.width,
                t_obs: t,
                p_empirical: pv.p,
                p_asymptotic: p_asym,
                z_empirical: bounded_z(pv.p, emp_floor),
                z_asymptotic: p_asym.map(|p| bounded_z(p, ASYMPTOTIC_P_FLOOR)),
                chi2_dof: fit.map(|f| f.dof),
                saturated: pv.saturated,
            });
        }
        let ps: Vec<f64> = per_width.iter().map(|w| w.p_empirical).collect();
        let p_combined = combine_pvalues(&ps)?;
        let n_min = ensembles.iter().map(|e| e.n_toys).min().unwrap_or(1);
        Ok(Self {
            saturated: per_width.iter().any(|w| w.saturated),
            z_combined: bounded_z(p_combined, 1.0 / (n_min as f64 + 1.0)),
            p_combined,
            per_width,
        })
    }
}

/// Splits `total` across groups proportionally to `weights` with the
/// largest-remainder rule, so the parts sum to `total` exactly.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| total as f64 * w as f64 / sum as f64)
        .collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - parts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        parts[i] += 1;
    }
    parts
}

/// Where the observed sample of a toy comes from.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    pub signal_pool: &'a DMatrix<f64>,
    pub fraction: f64,
}

impl Injection<'_> {
    pub fn n_signal(&self, n_data: usize) -> usize {
        (self.fraction * n_data as f64).round() as usize
    }
}

/// Samples drawn for one pseudo-experiment.
#[derive(Debug, Clone)]
pub struct ToyDraw {
    pub reference: LabeledDataset,
    /// Background part of the observed sample.
    pub background: LabeledDataset,
    pub signal: DMatrix<f64>,
}

impl ToyDraw {
    /// Observed sample: background rows followed by injected signal rows.
    pub fn observed(&self) -> DMatrix<f64> {
        let b = self.background.points();
        let d = b.ncols();
        let mut out = DMatrix::zeros(b.nrows() + self.signal.nrows(), d);
        out.rows_mut(0, b.nrows()).copy_from(b);
        out.rows_mut(b.nrows(), self.signal.nrows()).copy_from(&self.signal);
        out
    }
}

/// Pool sampling for the toy harness.
#[derive(Debug, Clone, Copy)]
pub struct ToySampler<'a> {
    pub background: &'a LabeledDataset,
    pub sizes: SampleSizes,
    pub injection: Option<Injection<'a>>,
    /// Reference indices shared by every toy; `None` re-samples R per toy.
    pub fixed_reference: Option<&'a [usize]>,
}

impl<'a> ToySampler<'a> {
    pub fn new(background: &'a LabeledDataset, sizes: SampleSizes) -> Self {
        Self {
            background,
            sizes,
            injection: None,
            fixed_reference: None,
        }
    }

    pub fn with_injection(self, signal_pool: &'a DMatrix<f64>, fraction: f64) -> Self {
        Self {
            injection: Some(Injection {
                signal_pool,
                fraction,
            }),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let SampleSizes { n_ref, n_data } = self.sizes;
        if n_ref == 0 || n_data == 0 {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        if self.background.len() < n_ref + n_data {
            return Err(Error::invalid(format!(
                "background pool has {} points, toys need {}",
                self.background.len(),
                n_ref + n_data
            )));
        }
        if let Some(r) = self.fixed_reference {
            if r.len() != n_ref {
                return Err(Error::invalid("fixed reference has the wrong size"));
            }
        }
        if let Some(inj) = self.injection {
            if !(0.0..1.0).contains(&inj.fraction) {
                return Err(Error::invalid("signal fraction must lie in [0, 1)"));
            }
            if inj.signal_pool.nrows() < inj.n_signal(n_data) {
                return Err(Error::invalid(format!(
                    "signal pool has {} points, toys need {}",
                    inj.signal_pool.nrows(),
                    inj.n_signal(n_data)
                )));
            }
            if inj.signal_pool.ncols() != self.background.dim() {
                return Err(Error::invalid("signal and background dimensions differ"));
            }
        }
        Ok(())
    }

    /// Stratified draw of disjoint R and D from the background pool plus the
    /// injected signal rows.
    pub fn draw(&self, seed: u64) -> Result<ToyDraw> {
        self.validate()?;
        let mut rng = rng_from_seed(seed);
        let SampleSizes { n_ref, n_data } = self.sizes;
        let (ref_idx, data_idx) = match self.fixed_reference {
            Some(fixed) => {
                let mut taken = vec![false; self.background.len()];
                fixed.iter().for_each(|&i| taken[i] = true);
                let rest: Vec<usize> = (0..self.background.len()).filter(|&i| !taken[i]).collect();
                let rest_ds = self.background.select(&rest);
                let picked = stratified(&rest_ds, &[n_data], &mut rng);
                let data = picked[0].iter().map(|&i| rest[i]).collect();
                (fixed.to_vec(), data)
            }
            None => {
                let mut parts = stratified(self.background, &[n_ref, n_data], &mut rng);
                let data = parts.pop().unwrap_or_default();
                (parts.pop().unwrap_or_default(), data)
            }
        };
        let signal = match self.injection {
            Some(inj) => {
                let k = inj.n_signal(n_data);
                let idx = rand::seq::index::sample(&mut rng, inj.signal_pool.nrows(), k).into_vec();
                select_rows(inj.signal_pool, &idx)
            }
            None => DMatrix::zeros(0, self.background.dim()),
        };
        Ok(ToyDraw {
            reference: self.background.select(&ref_idx),
            background: self.background.select(&data_idx),
            signal,
        })
    }
}

/// Per-class shuffled draws of consecutive disjoint groups with the given
/// sizes; every group follows the pool's class proportions.
fn stratified(pool: &LabeledDataset, sizes: &[usize], rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let classes = pool.class_indices();
    let counts: Vec<usize> = classes.values().map(Vec::len).collect();
    let quotas: Vec<Vec<usize>> = sizes.iter().map(|&s| apportion(s, &counts)).collect();
    let mut groups = vec![Vec::new(); sizes.len()];
    for (c, (_, mut idx)) in classes.into_iter().enumerate() {
        idx.shuffle(rng);
        let mut start = 0;
        for (g, q) in quotas.iter().enumerate() {
            // Rounding can ask for more than a tiny class holds; the shortfall
            // is negligible at the pool sizes used here.
            let end = (start + q[c]).min(idx.len());
            groups[g].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups
}

/// Runs `n_toys` independent evaluations in parallel. Toy `i` receives
/// `derive_seed(master_seed, i)`; results come back in toy order.
pub fn run_toys<T, F>(n_toys: usize, master_seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    (0..n_toys)
        .into_par_iter()
        .map(|i| f(i, derive_seed(master_seed, i as u64)).map_err(|e| e.context(format!("toy {i}"))))
        .collect()
}

/// A test statistic evaluated on one pseudo-experiment.
pub trait ToyStatistic: Sync {
    /// Kernel widths the statistic is evaluated at; empty for a single
    /// width-free value.
    fn widths(&self) -> &[f64];

    /// `seed` is the toy seed; the draw itself came from `derive_named(seed, "draw")`.
    fn evaluate(&self, draw: &ToyDraw, seed: u64) -> Result<Vec<f64>>;

    fn n_values(&self) -> usize {
        self.widths().len().max(1)
    }
}

/// NPLM at every configured width. An unset `w_ref` resolves per toy to
/// `|D_background| / |R|`, the expected background yield of D whatever is
/// injected.
#[derive(Debug, Clone, PartialEq)]
pub struct NplmStatistic {
    pub config: NplmConfig,
}

impl NplmStatistic {
    pub fn new(config: NplmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl ToyStatistic for NplmStatistic {
    fn widths(&self) -> &[f64] {
        &self.config.widths
    }

    fn evaluate(&self, draw: &ToyDraw, seed: u64) -> Result<Vec<f64>> {
        let mut config = self.config.clone();
        if config.w_ref.is_none() {
            config.w_ref = Some(draw.background.len() as f64 / draw.reference.len() as f64);
        }
        let res = run_test(draw.reference.points(), &draw.observed(), &config, derive_named(seed, "nplm"))?;
        Ok(res.into_iter().map(|r| r.t).collect())
    }
}

/// Statistic values for every toy (outer) and width (inner).
pub fn toy_values<S: ToyStatistic + ?Sized>(
    statistic: &S,
    sampler: &ToySampler<'_>,
    n_toys: usize,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    sampler.validate()?;
    run_toys(n_toys, master_seed, |_, seed| {
        let draw = sampler.draw(derive_named(seed, "draw"))?;
        statistic.evaluate(&draw, seed)
    })
}

/// NPLM statistics for every toy (outer) and width (inner).
pub fn nplm_toys(sampler: &ToySampler<'_>, n_toys: usize, config: &NplmConfig, master_seed: u64) -> Result<Vec<Vec<f64>>> {
    toy_values(&NplmStatistic::new(config.clone())?, sampler, n_toys, master_seed)
}

/// Transposes toy-major results into one list per width.
pub fn per_width(values: &[Vec<f64>], n_widths: usize) -> Vec<Vec<f64>> {
    (0..n_widths)
        .map(|w| values.iter().map(|row| row[w]).collect())
        .collect()
}

fn ensembles(values: &[Vec<f64>], widths: &[f64], master_seed: u64) -> Result<Vec<ToyEnsemble>> {
    let n = widths.len().max(1);
    per_width(values, n)
        .into_iter()
        .enumerate()
        .map(|(k, t)| ToyEnsemble::new(widths.get(k).copied().unwrap_or(0.0), master_seed, t))
        .collect()
}

/// Null ensembles, one per configured width.
pub fn run_null_toys(
    background: &LabeledDataset,
    sizes: SampleSizes,
    n_toys: usize,
    config: &NplmConfig,
    master_seed: u64,
) -> Result<Vec<ToyEnsemble>> {
    let sampler = ToySampler::new(background, sizes);
    let values = nplm_toys(&sampler, n_toys, config, master_seed)?;
    ensembles(&values, &config.widths, master_seed)
}

/// Test statistics with `round(f_S·n_data)` signal points added to each D;
/// one list per width, in toy order.
pub fn run_signal_toys(
    background: &LabeledDataset,
    signal: &DMatrix<f64>,
    fraction: f64,
    sizes: SampleSizes,
    n_toys: usize,
    config: &NplmConfig,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let sampler = ToySampler::new(background, sizes).with_injection(signal, fraction);
    let values = nplm_toys(&sampler, n_toys, config, master_seed)?;
    Ok(per_width(&values, config.widths.len()))
}

/// Toy values at one injected signal fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalToys {
    pub f_s: f64,
    /// Toy-major, one value per width.
    pub values: Vec<Vec<f64>>,
    /// Per-toy report against the null ensembles.
    pub reports: Vec<TestReport>,
}

impl SignalToys {
    pub fn z_combined(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.z_combined).collect()
    }
}

/// Null calibration plus signal toys of one statistic over a grid of
/// signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub widths: Vec<f64>,
    pub null_values: Vec<Vec<f64>>,
    pub null: Vec<ToyEnsemble>,
    /// χ² fit per width where the null ensemble allowed one.
    pub fits: Vec<Option<Chi2Fit>>,
    pub signal: Vec<SignalToys>,
}

/// Runs the null toys once under `null_seed`, then the signal toys at each
/// fraction; fraction index `k` uses `derive_seed(signal_seed, k)`. With
/// `fit_chi2` the null ensembles also get χ² fits for asymptotic p-values.
#[allow(clippy::too_many_arguments)]
pub fn scan_statistic<S: ToyStatistic + ?Sized>(
    statistic: &S,
    sampler: &ToySampler<'_>,
    signal_pool: &DMatrix<f64>,
    fractions: &[f64],
    n_toys: usize,
    null_seed: u64,
    signal_seed: u64,
    fit_chi2: bool,
) -> Result<Scan> {
    let null_sampler = ToySampler {
        injection: None,
        ..*sampler
    };
    let null_values = toy_values(statistic, &null_sampler, n_toys, null_seed).map_err(|e| e.context("null toys"))?;
    let widths = statistic.widths().to_vec();
    let null = ensembles(&null_values, &widths, null_seed)?;
    let fits: Vec<Option<Chi2Fit>> = null
        .iter()
        .map(|e| if fit_chi2 { fit_chi2_dof(&e.t_values).ok() } else { None })
        .collect();
    let mut signal = Vec::with_capacity(fractions.len());
    for (k, &f_s) in fractions.iter().enumerate() {
        let injected = null_sampler.with_injection(signal_pool, f_s);
        let values = toy_values(statistic, &injected, n_toys, derive_seed(signal_seed, k as u64))
            .map_err(|e| e.context(format!("f_S={f_s}")))?;
        let reports = values
            .iter()
            .map(|t| TestReport::build(t, &null, &fits))
            .collect::<Result<Vec<_>>>()?;
        signal.push(SignalToys { f_s, values, reports });
    }
    Ok(Scan {
        widths,
        null_values,
        null,
        fits,
        signal,
    })
}

/// Median and 16th/84th percentile band of per-toy Z-scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZSummary {
    pub median: f64,
    pub low: f64,
    pub high: f64,
}

impl ZSummary {
    pub fn from_scores(z: &[f64]) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::invalid("no Z-scores to summarize"));
        }
        Ok(Self {
            median: quantile(z, 0.5),
            low: quantile(z, 0.16),
            high: quantile(z, 0.84),
        })
    }
}

/// Reference indices drawn once, stratified like the per-toy draws.
pub fn stratified_reference(pool: &LabeledDataset, n_ref: usize, seed: u64) -> Result<Vec<usize>> {
    if n_ref == 0 || n_ref > pool.len() {
        return Err(Error::invalid(format!("cannot draw {n_ref} reference points from {}", pool.len())));
    }
    let mut rng = rng_from_seed(seed);
    Ok(stratified(pool, &[n_ref], &mut rng).pop().unwrap_or_default())
}
