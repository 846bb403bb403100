//! Panel data: the `T x m` matrix of observed series with names and a time
//! index, plus CSV reading/writing and standardization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};

/// Name of the mandatory time column.
pub const TIME_COLUMN: &str = "time";

/// A time-index label. Integer labels order numerically, text labels
/// (ISO-8601 dates) order lexically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeLabel {
    Int(i64),
    Text(String),
}

impl TimeLabel {
    pub fn parse(raw: &str) -> Self {
        let raw = raw.trim();
        match raw.parse::<i64>() {
            Ok(v) => TimeLabel::Int(v),
            Err(_) => TimeLabel::Text(raw.to_string()),
        }
    }
}

impl fmt::Display for TimeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeLabel::Int(v) => write!(f, "{v}"),
            TimeLabel::Text(s) => f.write_str(s),
        }
    }
}

/// Per-series affine parameters applied by [`standardize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `time,<series 1>,...,<series m>`
    Wide,
    /// `time,series,value`
    Long,
}

/// Observed multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    names: Vec<String>,
    time: Vec<TimeLabel>,
    standardization: Option<Vec<Standardization>>,
}

impl Panel {
    /// Builds a validated panel. All problems are collected before failing.
    pub fn new(values: DMatrix<f64>, names: Vec<String>, time: Vec<TimeLabel>) -> Result<Self> {
        let (t, m) = values.shape();
        if names.len() != m {
            return Err(FlapError::Dimension(format!(
                "{} series names for {m} columns",
                names.len()
            )));
        }
        if time.len() != t {
            return Err(FlapError::Dimension(format!(
                "{} time labels for {t} rows",
                time.len()
            )));
        }
        let mut seen = HashSet::new();
        let dup: Vec<&String> = names.iter().filter(|n| !seen.insert(*n)).collect();
        if !dup.is_empty() {
            return Err(FlapError::InvalidData(format!("duplicate series names: {dup:?}")));
        }
        if let Some(i) = (1..t).find(|&i| time[i] <= time[i - 1]) {
            return Err(FlapError::InvalidData(format!(
                "time index not strictly increasing at row {i} (`{}` after `{}`)",
                time[i],
                time[i - 1]
            )));
        }
        let missing: Vec<(String, String)> = (0..t)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| !values[(i, j)].is_finite())
            .map(|(i, j)| (time[i].to_string(), names[j].clone()))
            .collect();
        if !missing.is_empty() {
            return Err(FlapError::MissingData(missing));
        }
        Ok(Self {
            values,
            names,
            time,
            standardization: None,
        })
    }

    /// Panel with default names `Y1..Ym` and integer time index `1..T`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let names = default_names("Y", values.ncols());
        let time = (1..=values.nrows() as i64).map(TimeLabel::Int).collect();
        Self::new(values, names, time)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn time_index(&self) -> &[TimeLabel] {
        &self.time
    }

    pub fn standardization(&self) -> Option<&[Standardization]> {
        self.standardization.as_deref()
    }

    /// Number of observations `T`.
    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    /// Number of series `m`.
    pub fn n_series(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> DVectorView<'_, f64> {
        self.values.column(j)
    }

    /// The first `rows` observations.
    pub fn head(&self, rows: usize) -> Panel {
        let rows = rows.min(self.n_obs());
        Panel {
            values: self.values.rows(0, rows).into_owned(),
            names: self.names.clone(),
            time: self.time[..rows].to_vec(),
            standardization: self.standardization.clone(),
        }
    }

    /// Replaces the values, keeping names and time index.
    pub(crate) fn with_values(&self, values: DMatrix<f64>, names: Vec<String>) -> Panel {
        debug_assert_eq!(values.nrows(), self.n_obs());
        Panel {
            values,
            names,
            time: self.time.clone(),
            standardization: None,
        }
    }

    /// Undoes [`standardize`] on a matrix whose columns are series of this panel.
    pub fn back_transform(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = values.clone();
        if let Some(params) = &self.standardization {
            for (j, p) in params.iter().enumerate() {
                out.column_mut(j).apply(|v| *v = *v * p.sd + p.mean);
            }
        }
        out
    }
}

pub(crate) fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn parse_cell(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return None;
    }
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn read_panel(path: impl AsRef<Path>, layout: Layout) -> Result<Panel> {
    let file = std::fs::File::open(path)?;
    read_panel_from(file, layout)
}

/// Parses a panel from CSV. Long files are pivoted to wide; rows are sorted
/// by time.
pub fn read_panel_from<R: Read>(reader: R, layout: Layout) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.first().map(String::as_str) != Some(TIME_COLUMN) {
        return Err(FlapError::InvalidData(format!(
            "first column must be `{TIME_COLUMN}`, found {:?}",
            headers.first()
        )));
    }
    match layout {
        Layout::Wide => read_wide(rdr, headers),
        Layout::Long => read_long(rdr, headers),
    }
}

fn read_wide<R: Read>(mut rdr: csv::Reader<R>, headers: Vec<String>) -> Result<Panel> {
    let names = headers[1..].to_vec();
    let m = names.len();
    let mut rows: Vec<(TimeLabel, Vec<Option<f64>>)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != m + 1 {
            return Err(FlapError::InvalidData(format!(
                "row {} has {} fields, expected {}",
                rows.len() + 1,
                record.len(),
                m + 1
            )));
        }
        let time = TimeLabel::parse(&record[0]);
        let cells = record.iter().skip(1).map(parse_cell).collect();
        rows.push((time, cells));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(FlapError::DuplicateCell {
            time: w[0].0.to_string(),
            series: "*".to_string(),
        });
    }
    assemble(rows, names)
}

fn read_long<R: Read>(mut rdr: csv::Reader<R>, headers: Vec<String>) -> Result<Panel> {
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FlapError::InvalidData(format!("long layout requires a `{name}` column")))
    };
    let (series_col, value_col) = (col("series")?, col("value")?);
    let mut names: Vec<String> = Vec::new();
    let mut name_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: BTreeMap<TimeLabel, HashMap<usize, Option<f64>>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let time = TimeLabel::parse(&record[0]);
        let series = record.get(series_col).unwrap_or("").trim().to_string();
        let value = record.get(value_col).and_then(parse_cell);
        let j = *name_pos.entry(series.clone()).or_insert_with(|| {
            names.push(series.clone());
            names.len() - 1
        });
        let row = cells.entry(time.clone()).or_default();
        if row.insert(j, value).is_some() {
            return Err(FlapError::DuplicateCell {
                time: time.to_string(),
                series,
            });
        }
    }
    let m = names.len();
    let rows = cells
        .into_iter()
        .map(|(t, row)| {
            let values = (0..m).map(|j| row.get(&j).copied().flatten()).collect();
            (t, values)
        })
        .collect();
    assemble(rows, names)
}

fn assemble(rows: Vec<(TimeLabel, Vec<Option<f64>>)>, names: Vec<String>) -> Result<Panel> {
    let t = rows.len();
    let m = names.len();
    let mut missing = Vec::new();
    let mut values = DMatrix::zeros(t, m);
    let mut time = Vec::with_capacity(t);
    for (i, (label, cells)) in rows.into_iter().enumerate() {
        for (j, cell) in cells.into_iter().enumerate() {
            match cell {
                Some(v) => values[(i, j)] = v,
                None => missing.push((label.to_string(), names[j].clone())),
            }
        }
        time.push(label);
    }
    if !missing.is_empty() {
        return Err(FlapError::MissingData(missing));
    }
    Panel::new(values, names, time)
}

pub fn write_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_panel_to(panel, file)
}

/// Writes the panel in wide layout. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn write_panel_to<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![TIME_COLUMN.to_string()];
    header.extend(panel.names.iter().cloned());
    wtr.write_record(&header)?;
    for (i, label) in panel.time.iter().enumerate() {
        let mut record = vec![label.to_string()];
        record.extend(panel.values.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Sample mean and standard deviation (divisor `n - 1`) of a column.
pub(crate) fn mean_sd(col: DVectorView<'_, f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Demeans every series and scales it to unit variance.
///
/// The parameters are stored on the returned panel (composed with any
/// earlier standardization) so forecasts can be mapped back.
pub fn standardize(panel: &Panel) -> Result<Panel> {
    if panel.n_obs() < 2 {
        return Err(FlapError::InsufficientData(
            "standardization needs at least 2 observations".into(),
        ));
    }
    let mut values = panel.values.clone();
    let mut params = Vec::with_capacity(panel.n_series());
    for j in 0..panel.n_series() {
        let (mean, sd) = mean_sd(panel.column(j));
        if !(sd > 0.0) {
            return Err(FlapError::DegenerateSeries {
                column: panel.names[j].clone(),
            });
        }
        values.column_mut(j).apply(|v| *v = (*v - mean) / sd);
        let composed = match &panel.standardization {
            Some(prev) => Standardization {
                mean: prev[j].mean + mean * prev[j].sd,
                sd: sd * prev[j].sd,
            },
            None => Standardization { mean, sd },
        };
        params.push(composed);
    }
    Ok(Panel {
        values,
        names: panel.names.clone(),
        time: panel.time.clone(),
        standardization: Some(params),
    })
}

/// Column means of a matrix.
pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}
