use std::fs;
use std::path::PathBuf;

use serde::Deserialize;

use crate::calibration::ZSummary;
use crate::error::{Error, Result};
use crate::pipeline::Workspace;

#[derive(Debug, Clone, Deserialize)]
struct ToyZRow {
    method: String,
    #[serde(rename = "f_S")]
    f_s: String,
    toy: usize,
    width_index: usize,
    width: String,
    z_empirical: f64,
    z_combined: f64,
    saturated: u8,
}

/// One (method, f_S) group in first-appearance order.
struct Group {
    method: String,
    f_s: String,
    combined: Vec<f64>,
    saturated: Vec<bool>,
    per_width: Vec<Vec<f64>>,
    widths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub z_vs_fs: PathBuf,
    pub z_per_width: PathBuf,
    pub rows: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Reads `scan/toy_z.csv` and writes the Z-vs-f_S bands and the per-width
/// breakdown under `report/`. Output depends only on the scan files.
pub fn cmd_report(ws: &Workspace) -> Result<ReportOutputs> {
    let input = ws.scan_dir().join("toy_z.csv");
    let text = fs::read(&input).map_err(|e| Error::from(e).context(input.display().to_string()))?;
    let mut reader = csv::Reader::from_reader(text.as_slice());
    let mut groups: Vec<Group> = Vec::new();
    for row in reader.deserialize::<ToyZRow>() {
        let row = row.map_err(csv_err)?;
        let pos = groups.iter().position(|g| g.method == row.method && g.f_s == row.f_s);
        let g = match pos {
            Some(i) => &mut groups[i],
            None => {
                groups.push(Group {
                    method: row.method.clone(),
                    f_s: row.f_s.clone(),
                    combined: Vec::new(),
                    saturated: Vec::new(),
                    per_width: Vec::new(),
                    widths: Vec::new(),
                });
                groups.last_mut().expect("just pushed")
            }
        };
        if row.width_index == 0 {
            if row.toy != g.combined.len() {
                return Err(Error::Format(format!("{}: toys out of order", input.display())));
            }
            g.combined.push(row.z_combined);
            g.saturated.push(false);
        }
        if let Some(s) = g.saturated.last_mut() {
            *s |= row.saturated != 0;
        }
        if g.per_width.len() <= row.width_index {
            g.per_width.resize(row.width_index + 1, Vec::new());
            g.widths.resize(row.width_index + 1, String::new());
        }
        g.per_width[row.width_index].push(row.z_empirical);
        g.widths[row.width_index] = row.width;
    }
    if groups.is_empty() {
        return Err(Error::Format(format!("{} holds no toys", input.display())));
    }

    let dir = ws.report_dir();
    fs::create_dir_all(&dir)?;
    let z_vs_fs = dir.join("z_vs_fs.csv");
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["method", "f_S", "z_median", "z_low", "z_high", "saturated_fraction"])
        .map_err(csv_err)?;
    for g in &groups {
        let z = ZSummary::from_scores(&g.combined)?;
        let sat = g.saturated.iter().filter(|&&s| s).count() as f64 / g.saturated.len() as f64;
        out.write_record([g.method.clone(), g.f_s.clone(), fmt(z.median), fmt(z.low), fmt(z.high), fmt(sat)])
            .map_err(csv_err)?;
    }
    fs::write(&z_vs_fs, out.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;

    let z_per_width = dir.join("z_per_width.csv");
    let n_cols = groups
        .iter()
        .filter(|g| g.widths.iter().any(|w| !w.is_empty()))
        .map(|g| g.per_width.len())
        .max()
        .unwrap_or(0);
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "f_S".to_string()];
    header.extend((1..=n_cols).map(|k| format!("width_{k}")));
    header.extend((1..=n_cols).map(|k| format!("z_width_{k}")));
    out.write_record(&header).map_err(csv_err)?;
    for g in groups.iter().filter(|g| g.widths.iter().any(|w| !w.is_empty())) {
        let mut rec = vec![g.method.clone(), g.f_s.clone()];
        for k in 0..n_cols {
            rec.push(g.widths.get(k).cloned().unwrap_or_default());
        }
        for k in 0..n_cols {
            rec.push(g.per_width.get(k).map(|v| fmt(crate::stats::median(v))).unwrap_or_default());
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    fs::write(&z_per_width, out.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(ReportOutputs {
        z_vs_fs,
        z_per_width,
        rows: groups.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_groups_rows_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        fs::create_dir_all(ws.scan_dir()).unwrap();
        let mut text = String::from("method,f_S,toy,width_index,width,z_empirical,z_combined,saturated\n");
        for toy in 0..3 {
            for k in 0..2 {
                text += &format!("nplm,0.01,{toy},{k},{},{},{},{}\n", k + 1, toy as f64 + k as f64, toy, u8::from(toy == 2));
            }
            text += &format!("mahalanobis,0.01,{toy},0,,{0},{0},0\n", 2 * toy);
        }
        fs::write(ws.scan_dir().join("toy_z.csv"), text).unwrap();
        let out = cmd_report(&ws).unwrap();
        assert_eq!(out.rows, 2);
        let first = fs::read_to_string(&out.z_vs_fs).unwrap();
        assert_eq!(
            first,
            "method,f_S,z_median,z_low,z_high,saturated_fraction\n\
             nplm,0.01,1,0.32,1.68,0.3333333333333333\n\
             mahalanobis,0.01,2,0.64,3.36,0\n"
        );
        let widths = fs::read_to_string(&out.z_per_width).unwrap();
        assert_eq!(widths, "method,f_S,width_1,width_2,z_width_1,z_width_2\nnplm,0.01,1,2,1,2\n");
        cmd_report(&ws).unwrap();
        assert_eq!(fs::read_to_string(&out.z_vs_fs).unwrap(), first);
    }

    #[test]
    fn missing_scan_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_report(&Workspace::new(dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
