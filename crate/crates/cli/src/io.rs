//! CSV ingestion and atomic export of matrices and reports.
//!
//! Point files hold one point per row. A header row is optional; when present, a final
//! column named `weight` carries the point weights and a column named `label` carries class
//! labels. Data rows are numbered from 1 in error messages, not counting the header.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ipm_ot_core::class_ratio::LabeledDataset;
use ipm_ot_core::DiscreteMeasure;
use ndarray::{Array1, Array2};

use crate::error::{CliError, CliResult};

struct Table {
    header: Option<Vec<String>>,
    rows: Vec<Vec<String>>,
}

fn is_number(s: &str) -> bool {
    s.trim().parse::<f64>().is_ok()
}

fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        records.push(record.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let header = match records.first() {
        Some(first) if !first.iter().all(|c| is_number(c)) => Some(records.remove(0)),
        _ => None,
    };
    let expected = header.as_ref().map_or_else(|| records.first().map_or(0, Vec::len), Vec::len);
    for (i, row) in records.iter().enumerate() {
        if row.len() != expected {
            return Err(CliError::RaggedRows { path: path.into(), row: i + 1, found: row.len(), expected });
        }
    }
    Ok(Table { header, rows: records })
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn parse_cell(path: &Path, row: usize, column: &str, value: &str) -> CliResult<f64> {
    value.parse::<f64>().map_err(|_| CliError::Parse {
        path: path.into(),
        row,
        column: column.to_string(),
        value: value.to_string(),
    })
}

/// Column roles of a point file.
struct Layout {
    coords: Vec<usize>,
    weight: Option<usize>,
    label: Option<usize>,
    names: Vec<String>,
}

fn layout(table: &Table) -> CliResult<Layout> {
    let width = table.header.as_ref().map_or_else(|| table.rows.first().map_or(0, Vec::len), Vec::len);
    let names: Vec<String> = match &table.header {
        Some(h) => h.clone(),
        None => (0..width).map(|i| format!("x{i}")).collect(),
    };
    let find = |name: &str| names.iter().position(|n| n.eq_ignore_ascii_case(name));
    let weight = find("weight");
    if let Some(w) = weight {
        if w + 1 != width {
            return Err(CliError::Config("the weight column must be the last column".into()));
        }
    }
    let label = find("label");
    let coords: Vec<usize> = (0..width).filter(|&i| Some(i) != weight && Some(i) != label).collect();
    if coords.is_empty() {
        return Err(CliError::Data("no coordinate columns".into()));
    }
    Ok(Layout { coords, weight, label, names })
}

fn coordinates(path: &Path, table: &Table, lay: &Layout) -> CliResult<Array2<f64>> {
    let mut points = Array2::zeros((table.rows.len(), lay.coords.len()));
    for (i, row) in table.rows.iter().enumerate() {
        for (k, &c) in lay.coords.iter().enumerate() {
            points[[i, k]] = parse_cell(path, i + 1, &lay.names[c], &row[c])?;
        }
    }
    Ok(points)
}

/// Loads a weighted point cloud. Without a `weight` column the points share `total_mass`
/// evenly.
pub fn load_points_csv(path: &Path, total_mass: f64) -> CliResult<DiscreteMeasure> {
    let table = read_table(path)?;
    if table.rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let lay = layout(&table)?;
    let points = coordinates(path, &table, &lay)?;
    let measure = match lay.weight {
        Some(w) => {
            let mut weights = Array1::zeros(table.rows.len());
            for (i, row) in table.rows.iter().enumerate() {
                weights[i] = parse_cell(path, i + 1, "weight", &row[w])?;
            }
            DiscreteMeasure::new(points, weights)?
        }
        None => DiscreteMeasure::uniform(points, total_mass)?,
    };
    Ok(measure)
}

/// Loads a labeled training set. Distinct labels are ordered numerically when they all
/// parse as numbers and lexically otherwise; their names are returned in class order.
pub fn load_labeled_csv(path: &Path) -> CliResult<(LabeledDataset, Vec<String>)> {
    let table = read_table(path)?;
    if table.rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let lay = layout(&table)?;
    let label_col = lay.label.ok_or_else(|| CliError::Data(format!("{}: no column named label", path.display())))?;
    let points = coordinates(path, &table, &lay)?;
    let raw: Vec<&str> = table.rows.iter().map(|r| r[label_col].as_str()).collect();
    let mut names: Vec<String> = raw.iter().map(|s| s.to_string()).collect();
    names.sort();
    names.dedup();
    if names.iter().all(|n| is_number(n)) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = raw.iter().map(|s| index[s]).collect();
    Ok((LabeledDataset::new(points, labels, names.len())?, names))
}

/// Loads a bare numeric matrix (no header).
pub fn load_matrix_csv(path: &Path) -> CliResult<Array2<f64>> {
    let table = read_table(path)?;
    let cols = table.rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((table.rows.len(), cols));
    for (i, row) in table.rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            m[[i, j]] = parse_cell(path, i + 1, &format!("{j}"), cell)?;
        }
    }
    Ok(m)
}

/// 17 significant digits, enough to reproduce any `f64` exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn matrix_text(m: &Array2<f64>, header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in m.outer_iter() {
        let cells: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Dense matrix, one row per line, no header.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> CliResult<()> {
    write_atomic(path, matrix_text(m, None).as_bytes())
}

/// Matrix with a header row.
pub fn write_table_csv(path: &Path, header: &[String], m: &Array2<f64>) -> CliResult<()> {
    write_atomic(path, matrix_text(m, Some(header)).as_bytes())
}

/// Min-max scaling to `[0, 1]`; a constant matrix maps to zeros.
pub fn min_max_normalize(m: &Array2<f64>) -> Array2<f64> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        m.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(m.dim())
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
