//! Dataset ingestion, embedding persistence, run manifests and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affinity::DataMatrix;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Which column of a CSV file holds integer class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    /// Zero-based position.
    Index(usize),
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    /// `last`, a zero-based index, or a header name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "last" {
            LabelColumn::Last
        } else if let Ok(i) = s.parse() {
            LabelColumn::Index(i)
        } else {
            LabelColumn::Name(s.to_string())
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: DataMatrix,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub path: PathBuf,
}

fn parse_err(line: usize, column: Option<usize>, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

/// Read a numeric CSV file. Line and column numbers in errors are 1-based.
pub fn load_csv(path: &Path, has_header: bool, label_column: Option<&LabelColumn>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Option<Vec<String>> = if has_header {
        let h = reader
            .headers()
            .map_err(|e| parse_err(1, None, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        Some(h)
    } else {
        None
    };

    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let mut label_idx: Option<usize> = None;
    let resolve = |w: usize| -> Result<Option<usize>> {
        match label_column {
            None => Ok(None),
            Some(LabelColumn::Last) => Ok(Some(w - 1)),
            Some(LabelColumn::Index(i)) if *i < w => Ok(Some(*i)),
            Some(LabelColumn::Index(i)) => Err(Error::config(format!("label column {i} out of range for {w} columns"))),
            Some(LabelColumn::Name(name)) => header
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == name))
                .map(Some)
                .ok_or_else(|| Error::config(format!("no column named {name:?}"))),
        }
    };
    if let Some(w) = width {
        label_idx = resolve(w)?;
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, None, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(parse_err(
                line,
                None,
                format!("expected {w} fields, found {}", record.len()),
            ));
        }
        if rows == 0 && label_idx.is_none() && label_column.is_some() {
            label_idx = resolve(w)?;
        }
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == label_idx {
                let label = cell
                    .parse::<usize>()
                    .or_else(|_| match cell.parse::<f64>() {
                        Ok(v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
                        _ => Err(()),
                    })
                    .map_err(|_| {
                        parse_err(
                            line,
                            Some(c + 1),
                            format!("label {cell:?} is not a non-negative integer"),
                        )
                    })?;
                labels.push(label);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, Some(c + 1), format!("{cell:?} is not a number")))?;
                values.push(v);
            }
        }
        rows += 1;
    }
    let w = width.unwrap_or(0);
    let d = w - usize::from(label_idx.is_some());
    if rows == 0 || d == 0 {
        return Err(Error::config(format!("{} holds no numeric data", path.display())));
    }
    let matrix = Array2::from_shape_vec((rows, d), values).expect("rectangular by construction");
    Ok(Dataset {
        data: DataMatrix::new(matrix)?,
        labels: label_idx.map(|_| labels),
        name: dataset_name(path),
        path: path.to_path_buf(),
    })
}

/// Sidecar describing a raw little-endian `f64` matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySidecar {
    pub rows: usize,
    pub cols: usize,
    /// Text file with one integer label per line, relative to the sidecar.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

/// Sidecar path for a binary matrix: `<file>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    let side_path = sidecar_path(path);
    let side_text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: BinarySidecar = serde_json::from_str(&side_text)
        .map_err(|e| parse_err(e.line(), Some(e.column()), format!("{}: {e}", side_path.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = side.rows * side.cols * 8;
    if bytes.len() != expected {
        return Err(Error::dims(
            format!("{expected} bytes"),
            format!("{} bytes", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let matrix = Array2::from_shape_vec((side.rows, side.cols), values).expect("sized buffer");
    let labels = match &side.labels {
        None => None,
        Some(rel) => {
            let lp = side_path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            let mut out = Vec::with_capacity(side.rows);
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                out.push(
                    line.trim()
                        .parse()
                        .map_err(|_| parse_err(i + 1, Some(1), format!("bad label {line:?}")))?,
                );
            }
            if out.len() != side.rows {
                return Err(Error::dims(format!("{} labels", side.rows), out.len().to_string()));
            }
            Some(out)
        }
    };
    Ok(Dataset {
        data: DataMatrix::new(matrix)?,
        labels,
        name: dataset_name(path),
        path: path.to_path_buf(),
    })
}

/// Load by extension: `.csv`/`.txt` as CSV, anything else as binary.
pub fn load_dataset(path: &Path, has_header: bool, label_column: Option<&LabelColumn>) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("txt") => load_csv(path, has_header, label_column),
        _ => load_binary(path),
    }
}

/// CSV text with header `y1..yd[,label]` and shortest round-trip floats.
pub fn embedding_csv(y: ArrayView2<'_, f64>, labels: Option<&[usize]>) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != y.nrows() {
            return Err(Error::dims(format!("{} labels", y.nrows()), l.len().to_string()));
        }
    }
    let mut out = String::with_capacity(y.len() * 24);
    let cols: Vec<String> = (1..=y.ncols()).map(|c| format!("y{c}")).collect();
    out.push_str(&cols.join(","));
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in y.rows().into_iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_embedding(y: ArrayView2<'_, f64>, labels: Option<&[usize]>, path: &Path) -> Result<()> {
    std::fs::write(path, embedding_csv(y, labels)?).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    /// SHA-256 of the shape followed by the little-endian matrix entries.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(ds: &Dataset) -> Self {
        let v = ds.data.view();
        let mut bytes = Vec::with_capacity(16 + v.len() * 8);
        bytes.extend_from_slice(&(v.nrows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(v.ncols() as u64).to_le_bytes());
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        Self {
            name: ds.name.clone(),
            path: ds.path.display().to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
            sha256: sha256_hex(&bytes),
        }
    }
}

/// Record of one CLI invocation. Serialized with fields in declaration
/// order and maps sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub dataset: Option<DatasetFingerprint>,
    pub results: BTreeMap<String, serde_json::Value>,
    pub metrics: Option<MetricReport>,
    pub timing_ms: BTreeMap<String, f64>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            tool: "laptsne".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            config: serde_json::Value::Null,
            dataset: None,
            results: BTreeMap::new(),
            metrics: None,
            timing_ms: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is serializable")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Twenty-colour categorical palette.
pub const PALETTE: [&str; 20] = [
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c", "#98df8a", "#d62728", "#ff9896", "#9467bd", "#c5b0d5",
    "#8c564b", "#c49c94", "#e377c2", "#f7b6d2", "#7f7f7f", "#c7c7c7", "#bcbd22", "#dbdb8d", "#17becf", "#9edae5",
];

const SIZE: f64 = 800.0;
const PAD: f64 = 40.0;

/// Axis range widened by 5% on each side; degenerate ranges get unit width.
fn fit_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let center = if hi > lo { None } else { Some(lo) };
    match center {
        Some(c) => (c - 0.5 * span - 0.05 * span, c + 0.5 * span + 0.05 * span),
        None => (lo - 0.05 * span, hi + 0.05 * span),
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", xml_escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#
    );
    let inner = SIZE - 2.0 * PAD;
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{inner}" height="{inner}" fill="none" stroke="#444444" stroke-width="1"/>"##
    );
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Scatter plot of a 2-D embedding, one circle per point.
pub fn scatter_svg(y: ArrayView2<'_, f64>, labels: Option<&[usize]>) -> Result<String> {
    if y.ncols() != 2 {
        return Err(Error::config(format!(
            "scatter plots need d = 2, got d = {}",
            y.ncols()
        )));
    }
    if let Some(l) = labels {
        if l.len() != y.nrows() {
            return Err(Error::dims(format!("{} labels", y.nrows()), l.len().to_string()));
        }
    }
    let (x0, x1) = fit_range(y.column(0).iter().copied());
    let (y0, y1) = fit_range(y.column(1).iter().copied());
    let inner = SIZE - 2.0 * PAD;
    let mut out = String::with_capacity(y.nrows() * 80 + 512);
    svg_open(&mut out, "embedding");
    out.push_str("<g stroke=\"none\">\n");
    for (i, row) in y.rows().into_iter().enumerate() {
        let px = PAD + (row[0] - x0) / (x1 - x0) * inner;
        let py = PAD + (1.0 - (row[1] - y0) / (y1 - y0)) * inner;
        let color = labels.map_or(PALETTE[0], |l| PALETTE[l[i] % PALETTE.len()]);
        let _ = writeln!(out, r#"<circle cx="{px:.3}" cy="{py:.3}" r="2.5" fill="{color}"/>"#);
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

pub fn plot_scatter(y: ArrayView2<'_, f64>, labels: Option<&[usize]>, path: &Path) -> Result<()> {
    std::fs::write(path, scatter_svg(y, labels)?).map_err(|e| Error::io(path, e))
}

/// Eigenvalue sequence against its 1-based index with a marker at `khat`.
pub fn eigvals_svg(values: &[f64], khat_mark: usize) -> Result<String> {
    if values.len() < 2 {
        return Err(Error::config("eigenvalue plot needs at least 2 values"));
    }
    if khat_mark == 0 || khat_mark > values.len() {
        return Err(Error::config(format!(
            "marker {khat_mark} outside 1..={}",
            values.len()
        )));
    }
    let n = values.len();
    let (v0, v1) = fit_range(values.iter().copied());
    let (i0, i1) = fit_range([1.0, n as f64].into_iter());
    let inner = SIZE - 2.0 * PAD;
    let px = |i: f64| PAD + (i - i0) / (i1 - i0) * inner;
    let py = |v: f64| PAD + (1.0 - (v - v0) / (v1 - v0)) * inner;
    let mut out = String::with_capacity(n * 60 + 1024);
    svg_open(&mut out, "eigenvalues");
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.3},{:.3}", px((i + 1) as f64), py(v)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline class="spectrum" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
        pts.join(" ")
    );
    for (i, &v) in values.iter().enumerate() {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.3}" cy="{:.3}" r="3" fill="#1f77b4"/>"##,
            px((i + 1) as f64),
            py(v)
        );
    }
    // The marker sits halfway into the gap that follows eigenvalue khat.
    let mx = px(khat_mark as f64 + 0.5);
    let _ = writeln!(
        out,
        r##"<line class="khat-marker" x1="{mx:.3}" y1="{PAD}" x2="{mx:.3}" y2="{}" stroke="#d62728" stroke-dasharray="6 4"/>"##,
        SIZE - PAD
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="14" fill="#d62728">k = {khat_mark}</text>"##,
        mx + 6.0,
        PAD + 18.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn plot_eigvals(values: &[f64], khat_mark: usize, path: &Path) -> Result<()> {
    std::fs::write(path, eigvals_svg(values, khat_mark)?).map_err(|e| Error::io(path, e))
}

/// Read a one-value-per-line eigenvalue file.
pub fn load_eigenvalues(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(i + 1, Some(1), format!("{l:?} is not a number")))
        })
        .collect()
}
