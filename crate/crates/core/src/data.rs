//! EMA panel data: loading, validation, missing-value repair and
//! per-individual z-normalization.
//!
//! A series is a `T × V` matrix stored row-major. Missing cells are `NaN`;
//! no other non-finite value is ever accepted from input.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are treated as constant: the variable is
/// centered but not scaled.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSchema {
    names: Vec<String>,
    scale_min: Option<f64>,
    scale_max: Option<f64>,
}

impl VariableSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_scale(names, None, None)
    }

    pub fn with_scale<S: Into<String>>(
        names: impl IntoIterator<Item = S>,
        scale_min: Option<f64>,
        scale_max: Option<f64>,
    ) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Schema("no variables".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(Error::Schema("empty variable name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate variable `{name}`")));
            }
        }
        if let (Some(lo), Some(hi)) = (scale_min, scale_max) {
            if !(lo < hi) {
                return Err(Error::Schema(format!("scale_min {lo} >= scale_max {hi}")));
            }
        }
        Ok(VariableSchema {
            names,
            scale_min,
            scale_max,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scale(&self) -> (Option<f64>, Option<f64>) {
        (self.scale_min, self.scale_max)
    }
}

/// Borrowed, missing-free view of a multivariate series.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    values: &'a [f64],
    dim: usize,
}

impl<'a> SeriesView<'a> {
    /// Wraps a row-major buffer. Panics if `dim` is zero or does not divide
    /// the buffer length.
    pub fn new(values: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0, "series dimension must be positive");
        assert_eq!(values.len() % dim, 0, "buffer length not a multiple of dim");
        SeriesView { values, dim }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, t: usize) -> &'a [f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'a, f64> {
        self.values.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &'a [f64] {
        self.values
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaSeries {
    individual_id: String,
    timestamps: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
}

impl EmaSeries {
    /// Builds a series from row-major values (`NaN` = missing).
    pub fn new(
        individual_id: impl Into<String>,
        timestamps: Vec<f64>,
        values: Vec<f64>,
        dim: usize,
    ) -> Result<Self> {
        let individual_id = individual_id.into();
        let invalid = |reason: String| Error::InvalidSeries {
            id: individual_id.clone(),
            reason,
        };
        if dim == 0 {
            return Err(invalid("zero variables".into()));
        }
        if values.len() != timestamps.len() * dim {
            return Err(invalid(format!(
                "{} values for {} rows of {} variables",
                values.len(),
                timestamps.len(),
                dim
            )));
        }
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(invalid("non-finite timestamp".into()));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("timestamps not strictly increasing".into()));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(invalid("infinite value".into()));
        }
        Ok(EmaSeries {
            individual_id,
            timestamps,
            values,
            dim,
        })
    }

    /// Convenience constructor for a complete series with timestamps `0..T`.
    pub fn from_rows(individual_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let id = individual_id.into();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidSeries {
                id,
                reason: "ragged rows".into(),
            });
        }
        let timestamps = (0..rows.len()).map(|t| t as f64).collect();
        Self::new(id, timestamps, rows.concat(), dim)
    }

    /// Univariate convenience constructor.
    pub fn univariate(individual_id: impl Into<String>, values: &[f64]) -> Result<Self> {
        let timestamps = (0..values.len()).map(|t| t as f64).collect();
        Self::new(individual_id, timestamps, values.to_vec(), 1)
    }

    pub fn id(&self) -> &str {
        &self.individual_id
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Missing-free view for distance and kernel computations.
    pub fn view(&self) -> Result<SeriesView<'_>> {
        if self.is_empty() {
            return Err(Error::EmptySeries);
        }
        if self.has_missing() {
            return Err(Error::MissingValues);
        }
        Ok(SeriesView::new(&self.values, self.dim))
    }

    fn column(&self, v: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(v).step_by(self.dim).copied()
    }
}

/// How missing cells are repaired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Linear interpolation in time between the nearest observed cells of the
    /// same variable; leading/trailing gaps copy the nearest observed value.
    #[default]
    LinearInterpolate,
    /// Drop every row that has at least one missing cell.
    DropRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Per individual, per variable z-score with population standard deviation.
    ZScorePerIndividual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaDataset {
    schema: VariableSchema,
    series: Vec<EmaSeries>,
    normalization: Normalization,
}

impl EmaDataset {
    /// Validates and sorts the series by individual id.
    pub fn new(schema: VariableSchema, mut series: Vec<EmaSeries>) -> Result<Self> {
        if series.len() < 2 {
            return Err(Error::TooFewIndividuals(series.len()));
        }
        for s in &series {
            if s.dim() != schema.len() {
                return Err(Error::DimensionMismatch {
                    left: s.dim(),
                    right: schema.len(),
                });
            }
        }
        series.sort_by(|a, b| a.individual_id.cmp(&b.individual_id));
        if let Some(w) = series.windows(2).find(|w| w[0].id() == w[1].id()) {
            return Err(Error::InvalidSeries {
                id: w[0].id().to_owned(),
                reason: "duplicate individual id".into(),
            });
        }
        Ok(EmaDataset {
            schema,
            series,
            normalization: Normalization::None,
        })
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn series(&self) -> &[EmaSeries] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn ids(&self) -> Vec<String> {
        self.series.iter().map(|s| s.id().to_owned()).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.series.iter().any(EmaSeries::has_missing)
    }

    /// Missing-free views of every series, in dataset order.
    pub fn views(&self) -> Result<Vec<SeriesView<'_>>> {
        self.series.iter().map(EmaSeries::view).collect()
    }

    /// Reads a long-format CSV (`individual_id,timestamp,<vars...>`). The
    /// header's variable columns must match `schema` exactly.
    pub fn load_csv(path: impl AsRef<Path>, schema: VariableSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, Some(schema))
    }

    /// Like [`EmaDataset::load_csv`] but takes the variable names from the header.
    pub fn load_csv_infer_schema(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, None)
    }

    pub fn from_csv_reader<R: Read>(reader: R, schema: Option<VariableSchema>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "individual_id" || &header[1] != "timestamp" {
            return Err(Error::Schema(
                "header must start with `individual_id,timestamp` followed by variables".into(),
            ));
        }
        let header_vars: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
        let schema = match schema {
            Some(schema) => {
                if schema.names() != header_vars.as_slice() {
                    return Err(Error::Schema(format!(
                        "header variables {header_vars:?} do not match schema {:?}",
                        schema.names()
                    )));
                }
                schema
            }
            None => VariableSchema::new(header_vars)?,
        };
        let dim = schema.len();
        let expected = dim + 2;

        // id -> (timestamp, row)
        let mut rows: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != expected {
                return Err(Error::ColumnCount {
                    line,
                    expected,
                    found: record.len(),
                });
            }
            let id = record[0].to_owned();
            if id.is_empty() {
                return Err(Error::InvalidSeries {
                    id,
                    reason: format!("line {line}: empty individual_id"),
                });
            }
            let timestamp = parse_cell(&record[1], line, "timestamp")?.ok_or_else(|| {
                Error::NonNumeric {
                    line,
                    column: "timestamp".into(),
                    value: String::new(),
                }
            })?;
            let mut row = Vec::with_capacity(dim);
            for (v, cell) in record.iter().skip(2).enumerate() {
                row.push(parse_cell(cell, line, &schema.names()[v])?.unwrap_or(f64::NAN));
            }
            rows.entry(id).or_default().push((timestamp, row));
        }

        let mut series = Vec::with_capacity(rows.len());
        for (id, mut obs) in rows {
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::DuplicateTimestamp {
                    id,
                    timestamp: w[0].0,
                });
            }
            obs.retain(|(_, row)| row.iter().any(|v| !v.is_nan()));
            let timestamps = obs.iter().map(|o| o.0).collect();
            let values = obs.into_iter().flat_map(|o| o.1).collect();
            series.push(EmaSeries::new(id, timestamps, values, dim)?);
        }
        Self::new(schema, series)
    }

    /// Writes the dataset back in the long format accepted by
    /// [`EmaDataset::from_csv_reader`]. Missing cells become empty strings and
    /// values use the shortest representation that parses back bit-exactly.
    pub fn export_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["individual_id".to_owned(), "timestamp".to_owned()];
        header.extend(self.schema.names().iter().cloned());
        wtr.write_record(&header)?;
        for s in &self.series {
            for t in 0..s.len() {
                let mut rec = Vec::with_capacity(s.dim() + 2);
                rec.push(s.id().to_owned());
                rec.push(s.timestamps[t].to_string());
                rec.extend(s.row(t).iter().map(|v| {
                    if v.is_nan() {
                        String::new()
                    } else {
                        v.to_string()
                    }
                }));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Fills or removes missing cells according to `policy`.
    pub fn repair_missing(&self, policy: MissingPolicy) -> Result<Self> {
        let series = self
            .series
            .iter()
            .map(|s| repair_series(s, policy, &self.schema))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmaDataset {
            schema: self.schema.clone(),
            series,
            normalization: self.normalization,
        })
    }

    /// Per-individual, per-variable z-scores using the population standard
    /// deviation. Variables with std below [`EPS_STD`] are only centered.
    pub fn znormalize(&self) -> Result<Self> {
        if self.has_missing() {
            return Err(Error::MissingValues);
        }
        let series = self.series.iter().map(znormalize_series).collect();
        Ok(EmaDataset {
            schema: self.schema.clone(),
            series,
            normalization: Normalization::ZScorePerIndividual,
        })
    }

    /// Number of timestamp gaps longer than the individual's smallest gap,
    /// summed over the cohort. A cheap irregularity report.
    pub fn irregular_gap_count(&self) -> usize {
        self.series
            .iter()
            .map(|s| {
                let gaps: Vec<f64> = s.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
                let Some(&min_gap) = gaps.iter().min_by(|a, b| a.total_cmp(b)) else {
                    return 0;
                };
                gaps.iter()
                    .filter(|g| (**g - min_gap).abs() > 1e-9 * min_gap.abs().max(1.0))
                    .count()
            })
            .sum()
    }
}

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::NonNumeric {
            line,
            column: column.to_owned(),
            value: cell.to_owned(),
        }),
    }
}

fn repair_series(s: &EmaSeries, policy: MissingPolicy, schema: &VariableSchema) -> Result<EmaSeries> {
    if !s.has_missing() {
        return Ok(s.clone());
    }
    match policy {
        MissingPolicy::DropRow => {
            let keep: Vec<usize> = (0..s.len())
                .filter(|&t| s.row(t).iter().all(|v| !v.is_nan()))
                .collect();
            if keep.is_empty() {
                return Err(Error::InvalidSeries {
                    id: s.id().to_owned(),
                    reason: "every row has a missing cell; drop_row leaves nothing".into(),
                });
            }
            let timestamps = keep.iter().map(|&t| s.timestamps[t]).collect();
            let values = keep.iter().flat_map(|&t| s.row(t).iter().copied()).collect();
            EmaSeries::new(s.id(), timestamps, values, s.dim)
        }
        MissingPolicy::LinearInterpolate => {
            let mut values = s.values.clone();
            let dim = s.dim;
            for v in 0..dim {
                let observed: Vec<usize> = (0..s.len())
                    .filter(|&t| !values[t * dim + v].is_nan())
                    .collect();
                let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
                    return Err(Error::VariableEntirelyMissing {
                        id: s.id().to_owned(),
                        variable: schema.names()[v].clone(),
                    });
                };
                for t in 0..first {
                    values[t * dim + v] = values[first * dim + v];
                }
                for t in last + 1..s.len() {
                    values[t * dim + v] = values[last * dim + v];
                }
                for pair in observed.windows(2) {
                    let (lo, hi) = (pair[0], pair[1]);
                    let (t0, t1) = (s.timestamps[lo], s.timestamps[hi]);
                    let (y0, y1) = (values[lo * dim + v], values[hi * dim + v]);
                    for t in lo + 1..hi {
                        let w = (s.timestamps[t] - t0) / (t1 - t0);
                        values[t * dim + v] = y0 + w * (y1 - y0);
                    }
                }
            }
            EmaSeries::new(s.id(), s.timestamps.clone(), values, dim)
        }
    }
}

fn znormalize_series(s: &EmaSeries) -> EmaSeries {
    let n = s.len() as f64;
    let mut values = s.values.clone();
    for v in 0..s.dim {
        let mean = s.column(v).sum::<f64>() / n;
        let var = s.column(v).map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for t in 0..s.len() {
            let cell = &mut values[t * s.dim + v];
            *cell -= mean;
            if std >= EPS_STD {
                *cell /= std;
            }
        }
    }
    EmaSeries {
        individual_id: s.individual_id.clone(),
        timestamps: s.timestamps.clone(),
        values,
        dim: s.dim,
    }
}
