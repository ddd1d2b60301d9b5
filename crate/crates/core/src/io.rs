//! Dataset and report serialization.
//!
//! Matrices travel as plain CSV with a `# dt=... dx=...` comment header
//! carrying the grid steps, so each file is self-describing; structured
//! reports travel as JSON. All numeric output uses 17 significant
//! decimal digits, which round-trips every f64 exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::estimate::{EstimationConfig, Stage1Fit, Stage2Fit};
use crate::model::{GridSpec, OrderBookDataset};
use crate::sim::SimulationResult;
use crate::{Error, Result};

/// 17 significant digits: enough to reproduce any f64 bit for bit.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub ask: PathBuf,
    pub bid: PathBuf,
    pub mid: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            ask: dir.join("ask.csv"),
            bid: dir.join("bid.csv"),
            mid: dir.join("mid.csv"),
        }
    }
}

fn render_matrix(rows: usize, cols: usize, value: impl Fn(usize, usize) -> f64, grid: &GridSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# dt={} dx={}",
        format_float(grid.dt),
        format_float(grid.dx)
    );
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format_float(value(r, c))).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// Write ask.csv / bid.csv / mid.csv. The matrix files carry the grid
/// metadata comment; mid.csv holds one value per line.
pub fn save_dataset(dataset: &OrderBookDataset, paths: &DatasetPaths) -> Result<()> {
    let grid = &dataset.grid;
    fs::write(
        &paths.ask,
        render_matrix(grid.n_time, grid.n_price, |r, c| dataset.ask[[r, c]], grid),
    )?;
    fs::write(
        &paths.bid,
        render_matrix(grid.n_time, grid.n_price, |r, c| dataset.bid[[r, c]], grid),
    )?;
    fs::write(
        &paths.mid,
        render_matrix(grid.n_time, 1, |r, _| dataset.mid[r], grid),
    )?;
    Ok(())
}

struct ParsedMatrix {
    values: Vec<Vec<f64>>,
    meta: Option<(f64, f64)>,
}

fn parse_meta(line: &str) -> Option<(f64, f64)> {
    let rest = line.trim_start_matches('#').trim();
    let mut dt = None;
    let mut dx = None;
    for token in rest.split_whitespace() {
        if let Some(v) = token.strip_prefix("dt=") {
            dt = v.parse().ok();
        } else if let Some(v) = token.strip_prefix("dx=") {
            dx = v.parse().ok();
        }
    }
    Some((dt?, dx?))
}

fn parse_matrix(path: &Path) -> Result<ParsedMatrix> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut meta = None;
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if meta.is_none() {
                meta = parse_meta(trimmed);
            }
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in trimmed.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                path: name.clone(),
                line: lineno + 1,
                col: col + 1,
                msg: format!("{e}: {field:?}"),
            })?;
            row.push(v);
        }
        if let Some(first) = values.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    path: name,
                    line: lineno + 1,
                    col: row.len(),
                    msg: format!("row has {} fields, expected {}", row.len(), first.len()),
                });
            }
        }
        values.push(row);
    }
    Ok(ParsedMatrix { values, meta })
}

/// Load and validate a dataset from its three CSV files. The grid steps
/// come from the matrix headers, which must agree between ask and bid.
pub fn load_dataset(paths: &DatasetPaths) -> Result<OrderBookDataset> {
    let ask = parse_matrix(&paths.ask)?;
    let bid = parse_matrix(&paths.bid)?;
    let mid = parse_matrix(&paths.mid)?;

    let (dt, dx) = ask.meta.ok_or_else(|| Error::Parse {
        path: paths.ask.display().to_string(),
        line: 1,
        col: 1,
        msg: "missing '# dt=... dx=...' metadata header".into(),
    })?;
    if let Some((bdt, bdx)) = bid.meta {
        if bdt != dt || bdx != dx {
            return Err(Error::ShapeMismatch(format!(
                "grid metadata disagrees between ask ({dt}, {dx}) and bid ({bdt}, {bdx})"
            )));
        }
    }

    let t = ask.values.len();
    let n = ask.values.first().map_or(0, Vec::len);
    if bid.values.len() != t || bid.values.first().map_or(0, Vec::len) != n {
        return Err(Error::ShapeMismatch(format!(
            "ask is {}x{} but bid is {}x{}",
            t,
            n,
            bid.values.len(),
            bid.values.first().map_or(0, Vec::len)
        )));
    }
    if mid.values.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "ask has {} rows but mid has {} entries",
            t,
            mid.values.len()
        )));
    }
    let mid_vec: Result<Vec<f64>> = mid
        .values
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != 1 {
                Err(Error::Parse {
                    path: paths.mid.display().to_string(),
                    line: i + 1,
                    col: row.len(),
                    msg: "mid.csv must hold one value per line".into(),
                })
            } else {
                Ok(row[0])
            }
        })
        .collect();

    let grid = GridSpec::new(dt, dx, t, n)?;
    let flat_ask: Vec<f64> = ask.values.into_iter().flatten().collect();
    let flat_bid: Vec<f64> = bid.values.into_iter().flatten().collect();
    OrderBookDataset::new(
        Array2::from_shape_vec((t, n), flat_ask).expect("shape checked"),
        Array2::from_shape_vec((t, n), flat_bid).expect("shape checked"),
        Array1::from_vec(mid_vec?),
        grid,
    )
}

/// SHA-256 over the concatenated bytes of the dataset files, for report
/// provenance.
pub fn dataset_checksum(paths: &DatasetPaths) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in [&paths.ask, &paths.bid, &paths.mid] {
        hasher.update(fs::read(p)?);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub estimation: EstimationConfig,
    pub dataset_sha256: String,
}

/// The full estimation report: both stage-1 fits, the stage-2 fit, and
/// enough provenance to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stage1_ask: Stage1Fit,
    pub stage1_bid: Stage1Fit,
    pub stage2: Stage2Fit,
    pub provenance: Provenance,
}

/// One row of a tidy plot series file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

pub fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let mut out = String::from("series,x,y\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.series,
            format_float(row.x),
            format_float(row.y)
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Plot data for a simulation: the boundary path plus the first and
/// last book profiles on both sides.
pub fn simulation_plot_rows(result: &SimulationResult) -> Vec<PlotRow> {
    let grid = &result.dataset.grid;
    let mut rows = Vec::new();
    for (k, s) in result.boundary_path.iter().enumerate() {
        rows.push(PlotRow {
            series: "boundary".into(),
            x: k as f64 * grid.dt,
            y: *s,
        });
    }
    let t_last = result.dataset.n_time() - 1;
    for (name, matrix) in [("ask", &result.dataset.ask), ("bid", &result.dataset.bid)] {
        for (label, row_idx) in [("initial", 0), ("final", t_last)] {
            for k in 0..grid.n_price {
                rows.push(PlotRow {
                    series: format!("{name}_{label}"),
                    x: (k as f64 + 1.0) * grid.dx,
                    y: matrix[[row_idx, k]] / grid.dx,
                });
            }
        }
    }
    rows
}
