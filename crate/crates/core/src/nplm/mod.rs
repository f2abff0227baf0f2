//! Likelihood-ratio two-sample test with a Nyström Gaussian-kernel model of
//! the log density ratio between observed data and a reference sample.

mod kernel;
mod solver;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{read_f64, read_u32};
use crate::error::{Error, Result};
use crate::rng::derive_named;

pub use kernel::{
    build_centers, default_n_centers, kernel_matrix, select_kernel_widths, DEFAULT_WIDTH_SUBSAMPLE,
    WIDTH_QUANTILES,
};
pub use solver::{nplm_objective, solve, Problem, Solution, SolverOptions};

const MODEL_MAGIC: &[u8; 4] = b"NVKM";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NplmConfig {
    /// Number of Nyström centers; `None` means `round(√(n_ref + n_data))`.
    pub n_centers: Option<usize>,
    pub lambda: f64,
    pub widths: Vec<f64>,
    /// Reference weight; `None` means `n_data / n_ref`.
    pub w_ref: Option<f64>,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
}

impl Default for NplmConfig {
    fn default() -> Self {
        Self {
            n_centers: None,
            lambda: 1e-6,
            widths: Vec::new(),
            w_ref: None,
            max_iterations: 100,
            grad_tolerance: 1e-7,
        }
    }
}

impl NplmConfig {
    pub fn with_widths(widths: Vec<f64>) -> Self {
        Self {
            widths,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::invalid("no kernel widths configured"));
        }
        if self.widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("kernel widths must be positive and finite"));
        }
        if self.n_centers == Some(0) {
            return Err(Error::invalid("n_centers must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if let Some(w) = self.w_ref {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid("w_ref must be positive"));
            }
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::invalid("grad_tolerance must be positive"));
        }
        Ok(())
    }

    pub fn resolved_w_ref(&self, n_ref: usize, n_data: usize) -> f64 {
        self.w_ref.unwrap_or(n_data as f64 / n_ref as f64)
    }

    pub fn resolved_n_centers(&self, n_ref: usize, n_data: usize) -> usize {
        self.n_centers.unwrap_or_else(|| default_n_centers(n_ref, n_data))
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            grad_tolerance: self.grad_tolerance,
        }
    }
}

/// `f(x) = Σ_i w_i · exp(−‖x − c_i‖² / 2σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    pub centers: DMatrix<f64>,
    pub width: f64,
    pub weights: DVector<f64>,
}

impl KernelModel {
    pub fn new(centers: DMatrix<f64>, width: f64, weights: DVector<f64>) -> Result<Self> {
        if centers.nrows() == 0 || centers.nrows() != weights.len() {
            return Err(Error::invalid("need one weight per center and at least one center"));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::invalid("kernel width must be positive"));
        }
        Ok(Self {
            centers,
            width,
            weights,
        })
    }

    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn evaluate(&self, points: &DMatrix<f64>) -> DVector<f64> {
        kernel_matrix(points, &self.centers, self.width) * &self.weights
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(self.n_centers() as u32).to_le_bytes())?;
        w.write_all(&(self.centers.ncols() as u32).to_le_bytes())?;
        w.write_all(&self.width.to_le_bytes())?;
        for row in self.centers.row_iter() {
            for v in row.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.weights.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a kernel model file".into()));
        }
        let m = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let width = read_f64(&mut r)?;
        let mut centers = Vec::with_capacity(m * d);
        for _ in 0..m * d {
            centers.push(read_f64(&mut r)?);
        }
        let mut weights = Vec::with_capacity(m);
        for _ in 0..m {
            weights.push(read_f64(&mut r)?);
        }
        Self::new(
            DMatrix::from_row_slice(m, d, &centers),
            width,
            DVector::from_vec(weights),
        )
        .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// A fitted model together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: KernelModel,
    /// Model output on the reference rows followed by the observed rows.
    pub predictions: DVector<f64>,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn stack(reference: &DMatrix<f64>, observed: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if reference.ncols() != observed.ncols() {
        return Err(Error::invalid("reference and observed dimensions differ"));
    }
    if reference.nrows() == 0 || observed.nrows() == 0 {
        return Err(Error::invalid("reference and observed samples must be non-empty"));
    }
    let (nr, nd) = (reference.nrows(), observed.nrows());
    let mut all = DMatrix::zeros(nr + nd, reference.ncols());
    all.rows_mut(0, nr).copy_from(reference);
    all.rows_mut(nr, nd).copy_from(observed);
    Ok(all)
}

fn labels(n_ref: usize, n_data: usize) -> Vec<bool> {
    let mut y = vec![false; n_ref + n_data];
    y[n_ref..].iter_mut().for_each(|v| *v = true);
    y
}

fn fit_stacked(
    pooled: &DMatrix<f64>,
    is_data: &[bool],
    centers: &DMatrix<f64>,
    width: f64,
    w_ref: f64,
    config: &NplmConfig,
) -> Result<Fit> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid("kernel width must be positive"));
    }
    let k = kernel_matrix(pooled, centers, width);
    let kc = kernel_matrix(centers, centers, width);
    let problem = Problem {
        k: &k,
        kc: &kc,
        is_data,
        w_ref,
        lambda: config.lambda,
    };
    let sol = solve(&problem, config.solver_options())?;
    Ok(Fit {
        model: KernelModel::new(centers.clone(), width, sol.weights)?,
        predictions: sol.predictions,
        loss_trace: sol.loss_trace,
        iterations: sol.iterations,
        grad_norm: sol.grad_norm,
    })
}

/// Fits the kernel model at one width with the given centers.
pub fn fit_with_centers(
    reference: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    centers: &DMatrix<f64>,
    width: f64,
    config: &NplmConfig,
) -> Result<Fit> {
    let pooled = stack(reference, observed)?;
    let w_ref = config.resolved_w_ref(reference.nrows(), observed.nrows());
    let y = labels(reference.nrows(), observed.nrows());
    fit_stacked(&pooled, &y, centers, width, w_ref, config)
}

/// Fits the kernel model at one width, drawing centers from `R ∪ D`.
pub fn fit(
    reference: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    width: f64,
    config: &NplmConfig,
    seed: u64,
) -> Result<Fit> {
    let pooled = stack(reference, observed)?;
    let m = config.resolved_n_centers(reference.nrows(), observed.nrows());
    let centers = build_centers(&pooled, m, derive_named(seed, "centers"))?;
    let w_ref = config.resolved_w_ref(reference.nrows(), observed.nrows());
    let y = labels(reference.nrows(), observed.nrows());
    fit_stacked(&pooled, &y, &centers, width, w_ref, config)
}

/// `t = −2·[Σ_R w_R·(e^f − 1) − Σ_D f]` from model outputs on R and D.
pub fn statistic_from_outputs(f_ref: &[f64], f_data: &[f64], w_ref: f64) -> Result<f64> {
    let mut reference = 0.0;
    for (row, &f) in f_ref.iter().enumerate() {
        let e = f.exp_m1();
        if !e.is_finite() {
            return Err(Error::NumericalOverflow {
                row,
                detail: format!("exp overflow of model output {f}"),
            });
        }
        reference += e;
    }
    let data: f64 = f_data.iter().sum();
    // Adding zero turns a −0 from all-zero outputs into +0.
    let t = -2.0 * (w_ref * reference - data) + 0.0;
    if !t.is_finite() {
        return Err(Error::NumericalOverflow {
            row: f_ref.len(),
            detail: "non-finite test statistic".into(),
        });
    }
    Ok(t)
}

pub fn test_statistic(
    model: &KernelModel,
    reference: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    w_ref: f64,
) -> Result<f64> {
    let fr = model.evaluate(reference);
    let fd = model.evaluate(observed);
    statistic_from_outputs(fr.as_slice(), fd.as_slice(), w_ref)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthResult {
    pub width: f64,
    pub t: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Serialized outcome of one test at one width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub width: f64,
    pub t: f64,
    pub n_ref: usize,
    pub n_data: usize,
    pub w_ref: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub seed: u64,
}

impl TestRecord {
    pub fn new(result: &WidthResult, n_ref: usize, n_data: usize, config: &NplmConfig, seed: u64) -> Self {
        Self {
            width: result.width,
            t: result.t,
            n_ref,
            n_data,
            w_ref: config.resolved_w_ref(n_ref, n_data),
            lambda: config.lambda,
            iterations: result.iterations,
            grad_norm: result.grad_norm,
            seed,
        }
    }
}

fn test_centers(pooled: &DMatrix<f64>, nr: usize, nd: usize, config: &NplmConfig, seed: u64) -> Result<DMatrix<f64>> {
    let m = config.resolved_n_centers(nr, nd);
    build_centers(pooled, m, derive_named(seed, "centers"))
}

/// The centers `run_test` uses for the same inputs and seed.
pub fn centers_for_test(
    reference: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    config: &NplmConfig,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let pooled = stack(reference, observed)?;
    test_centers(&pooled, reference.nrows(), observed.nrows(), config, seed)
}

/// Runs the test at every configured width, in order, with one set of
/// centers shared across widths.
pub fn run_test(
    reference: &DMatrix<f64>,
    observed: &DMatrix<f64>,
    config: &NplmConfig,
    seed: u64,
) -> Result<Vec<WidthResult>> {
    config.validate()?;
    let (nr, nd) = (reference.nrows(), observed.nrows());
    let pooled = stack(reference, observed)?;
    let centers = test_centers(&pooled, nr, nd, config, seed)?;
    let w_ref = config.resolved_w_ref(nr, nd);
    let y = labels(nr, nd);
    config
        .widths
        .iter()
        .map(|&width| {
            let tag = |e: Error| Error::AtWidth {
                width,
                source: Box::new(e),
            };
            let fit = fit_stacked(&pooled, &y, &centers, width, w_ref, config).map_err(tag)?;
            let f = fit.predictions.as_slice();
            let t = statistic_from_outputs(&f[..nr], &f[nr..], w_ref).map_err(tag)?;
            Ok(WidthResult {
                width,
                t,
                iterations: fit.iterations,
                grad_norm: fit.grad_norm,
            })
        })
        .collect()
}
