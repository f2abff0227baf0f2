//! Labeled point sets and their on-disk formats.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const BINARY_MAGIC: &[u8; 4] = b"NVLB";
const BINARY_VERSION: u32 = 1;

/// An `n × d` matrix of points, each carrying an integer class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    points: DMatrix<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(points: DMatrix<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} points but {} labels",
                points.nrows(),
                labels.len()
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at row {}",
                pos % points.nrows().max(1)
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside declared {n_classes} classes"
            )));
        }
        Ok(Self {
            points,
            labels,
            n_classes,
        })
    }

    /// Builds a dataset whose class count is inferred as `max(label) + 1`.
    pub fn from_parts(points: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        let n_classes = labels.iter().max().map_or(1, |m| m + 1);
        Self::new(points, labels, n_classes)
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Vec<usize>) {
        (self.points, self.labels)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: select_rows(&self.points, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Row indices grouped by class, in ascending order within each class.
    pub fn class_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// Vertical concatenation; class count is the larger of the two.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::invalid(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let d = if self.is_empty() { other.dim() } else { self.dim() };
        let n = self.len() + other.len();
        let mut points = DMatrix::zeros(n, d);
        points.rows_mut(0, self.len()).copy_from(&self.points);
        points.rows_mut(self.len(), other.len()).copy_from(&other.points);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            points,
            labels,
            n_classes: self.n_classes.max(other.n_classes),
        })
    }

    /// Same points, new labels.
    pub fn with_labels(&self, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(self.points.clone(), labels, n_classes)
    }

    pub fn with_points(&self, points: DMatrix<f64>) -> Result<Self> {
        Self::new(points, self.labels.clone(), self.n_classes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        out.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(self.dim() + 1);
        for i in 0..self.len() {
            record.clear();
            record.extend((0..self.dim()).map(|j| self.points[(i, j)].to_string()));
            record.push(self.labels[i].to_string());
            out.write_record(&record).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::read_csv_from(BufReader::new(File::open(path)?))
    }

    pub fn read_csv_from<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let n_cols = header.len();
        if n_cols < 1 || &header[n_cols - 1] != "label" {
            return Err(Error::Format("last CSV column must be `label`".into()));
        }
        let d = n_cols - 1;
        for (j, name) in header.iter().take(d).enumerate() {
            if name != format!("x{j}") {
                return Err(Error::Format(format!("unexpected column `{name}`")));
            }
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != n_cols {
                return Err(Error::Format(format!("row {row}: wrong field count")));
            }
            for field in rec.iter().take(d) {
                flat.push(field.parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {row}: bad number `{field}`: {e}"))
                })?);
            }
            labels.push(rec[d].parse::<usize>().map_err(|e| {
                Error::Format(format!("row {row}: bad label `{}`: {e}", &rec[d]))
            })?);
        }
        let points = DMatrix::from_row_slice(labels.len(), d, &flat);
        Self::from_parts(points, labels)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_binary_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for j in 0..self.dim() {
                w.write_all(&self.points[(i, j)].to_le_bytes())?;
            }
        }
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        Self::read_binary_from(BufReader::new(File::open(path)?))
    }

    pub fn read_binary_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("not an NVLB dataset file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != BINARY_VERSION {
            return Err(Error::Format(format!("unsupported NVLB version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut flat = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            flat.push(read_f64(&mut r)?);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r)? as usize);
        }
        Self::from_parts(DMatrix::from_row_slice(n, d, &flat), labels)
    }

    /// Reads either format, dispatching on the file extension (`.csv` or `.bin`).
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Self::read_binary(path),
            _ => Self::read_csv(path),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => self.write_binary(path),
            _ => self.write_csv(path),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Copies the listed rows of `m` into a new matrix.
pub fn select_rows(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), m.ncols(), |i, j| m[(indices[i], j)])
}

/// Stratified random partition of `dataset` into parts sized by `fractions`.
///
/// Within each class the rows are shuffled and cut at the rounded cumulative
/// fractions, so per-class counts are exact up to one row. Each part keeps
/// its rows in original order.
pub fn split(dataset: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, not 1")));
    }
    let mut rng = rng_from_seed(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (_, mut idx) in dataset.class_indices() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let mut start = 0usize;
        let mut cum = 0.0;
        for (k, f) in fractions.iter().enumerate() {
            cum += f;
            let end = if k + 1 == fractions.len() {
                idx.len()
            } else {
                ((cum * n).round() as usize).clamp(start, idx.len())
            };
            parts[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            dataset.select(&p)
        })
        .collect())
}

/// Moves `round(fraction·n)` uniformly chosen rows to a uniformly chosen
/// different class among the classes present. Returns the relabeled set and
/// the row indices that changed.
pub fn add_label_noise(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("label noise fraction must lie in [0, 1)"));
    }
    let n_flip = (fraction * dataset.len() as f64).round() as usize;
    if n_flip == 0 {
        return Ok((dataset.clone(), Vec::new()));
    }
    let classes: Vec<usize> = dataset.class_indices().into_keys().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    let mut rng = rng_from_seed(seed);
    let mut rows = rand::seq::index::sample(&mut rng, dataset.len(), n_flip).into_vec();
    rows.sort_unstable();
    let mut labels = dataset.labels().to_vec();
    for &i in &rows {
        let others: Vec<usize> = classes.iter().copied().filter(|&c| c != labels[i]).collect();
        labels[i] = others[rng.random_range(0..others.len())];
    }
    Ok((dataset.with_labels(labels, dataset.n_classes())?, rows))
}

/// Per-column mean and standard deviation of `points`.
pub fn column_moments(points: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = points.nrows() as f64;
    let mut means = Vec::with_capacity(points.ncols());
    let mut stds = Vec::with_capacity(points.ncols());
    for col in points.column_iter() {
        let m = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        means.push(m);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Applies `(x − mean) / std` column-wise; zero-variance columns are only centered.
pub fn standardize_with(points: &DMatrix<f64>, means: &[f64], stds: &[f64]) -> DMatrix<f64> {
    let mut out = points.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let s = if stds[j] > 0.0 { stds[j] } else { 1.0 };
        for v in col.iter_mut() {
            *v = (*v - means[j]) / s;
        }
    }
    out
}
