//! Tasks, datasets and windowing.
//!
//! A [`TaskSpec`] bundles the task description shown to the planner, a
//! chronological train/test [`DatasetSplit`], and the evaluation criteria.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banks::BankSet;
use crate::scalar::Real;

/// Fraction of rows held out as test when a dataset ships as a single frame.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Forecasting,
    Generation,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Forecasting => f.write_str("forecasting"),
            TaskKind::Generation => f.write_str("generation"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFormat {
    #[serde(rename = "csv-wide")]
    CsvWide,
    #[serde(rename = "json-frame")]
    JsonFrame,
}

impl std::str::FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv-wide" | "csv" => Ok(DataFormat::CsvWide),
            "json-frame" | "json" => Ok(DataFormat::JsonFrame),
            other => Err(format!("unknown data format `{other}`")),
        }
    }
}

impl DataFormat {
    /// Guess from a file extension, defaulting to csv-wide.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => DataFormat::JsonFrame,
            _ => DataFormat::CsvWide,
        }
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("non-numeric cell at line {line}, column `{column}`: {text:?}")]
    NonNumericCell { line: u64, column: String, text: String },
    #[error("non-finite value at line {line}, column `{column}`")]
    NaNDetected { line: u64, column: String },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("frame too short: T={rows} rows but p+q = {input_len}+{horizon}")]
    FrameTooShort { rows: usize, input_len: usize, horizon: usize },
    #[error("invalid task file {path}: {reason}")]
    InvalidTaskFile { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A `T × d` multivariate series with named features.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame<T = f64> {
    values: Array2<T>,
    feature_names: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl<T: Real> TimeSeriesFrame<T> {
    /// Timestamps are compared as strings, which orders ISO-8601 values
    /// correctly as long as they share one format.
    pub fn new(
        values: Array2<T>,
        feature_names: Vec<String>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self, TaskError> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(TaskError::InvalidFrame(format!("empty frame ({rows}x{cols})")));
        }
        if feature_names.len() != cols {
            return Err(TaskError::InvalidFrame(format!(
                "{} feature names for {cols} columns",
                feature_names.len()
            )));
        }
        let unique: BTreeSet<&String> = feature_names.iter().collect();
        if unique.len() != cols {
            return Err(TaskError::InvalidFrame("duplicate feature names".into()));
        }
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(TaskError::NaNDetected {
                line: r as u64,
                column: feature_names[c].clone(),
            });
        }
        if let Some(ts) = &timestamps {
            if ts.len() != rows {
                return Err(TaskError::InvalidFrame(format!(
                    "{} timestamps for {rows} rows",
                    ts.len()
                )));
            }
            if let Some(i) = ts.windows(2).position(|w| w[0] >= w[1]) {
                return Err(TaskError::InvalidFrame(format!(
                    "timestamps not strictly increasing at row {}",
                    i + 1
                )));
            }
        }
        Ok(Self { values, feature_names, timestamps })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Contiguous sub-frame over `rows`.
    pub fn slice_rows(&self, rows: Range<usize>) -> Result<Self, TaskError> {
        if rows.start >= rows.end || rows.end > self.len() {
            return Err(TaskError::InvalidFrame(format!(
                "row range {rows:?} outside 0..{}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.slice(s![rows.clone(), ..]).to_owned(),
            feature_names: self.feature_names.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[rows].to_vec()),
        })
    }

    /// Chronological holdout: the last `test_fraction` of rows become test.
    pub fn split_holdout(&self, test_fraction: f64) -> Result<(Self, Self), TaskError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(TaskError::InvalidFrame(format!(
                "test fraction {test_fraction} outside (0, 1)"
            )));
        }
        let n = self.len();
        let n_test = ((n as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(TaskError::InvalidFrame(format!(
                "cannot hold out {test_fraction} of {n} rows"
            )));
        }
        let cut = n - n_test;
        Ok((self.slice_rows(0..cut)?, self.slice_rows(cut..n)?))
    }
}

/// Input length `p`, horizon `q` and stride of the supervised windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    #[serde(rename = "p")]
    pub input_len: usize,
    #[serde(rename = "q")]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowSpec {
    pub fn new(input_len: usize, horizon: usize, stride: usize) -> Result<Self, TaskError> {
        let spec = Self { input_len, horizon, stride };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<(), TaskError> {
        if self.input_len == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(TaskError::InvalidWindow(format!(
                "p={}, q={}, stride={} must all be positive",
                self.input_len, self.horizon, self.stride
            )));
        }
        Ok(())
    }

    /// Number of windows a frame of `rows` rows yields, if any.
    pub fn count(&self, rows: usize) -> Option<usize> {
        let span = self.input_len + self.horizon;
        (rows >= span).then(|| (rows - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T = f64> {
    pub train: TimeSeriesFrame<T>,
    pub test: TimeSeriesFrame<T>,
    pub window: WindowSpec,
}

impl<T: Real> DatasetSplit<T> {
    pub fn new(
        train: TimeSeriesFrame<T>,
        test: TimeSeriesFrame<T>,
        window: WindowSpec,
    ) -> Result<Self, TaskError> {
        window.check()?;
        if train.feature_names() != test.feature_names() {
            return Err(TaskError::InvalidFrame(
                "train and test feature names differ".into(),
            ));
        }
        if let (Some(a), Some(b)) = (train.timestamps(), test.timestamps()) {
            if a.last() >= b.first() {
                return Err(TaskError::InvalidFrame(
                    "train and test time ranges overlap".into(),
                ));
            }
        }
        Ok(Self { train, test, window })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// One supervised pair: `p × d` input rows and the `q × d` rows that follow.
pub type WindowPair<T> = (Array2<T>, Array2<T>);

/// Contiguous input/target pairs; window `i` starts at row `i * stride`.
pub fn make_windows<T: Real>(
    frame: &TimeSeriesFrame<T>,
    spec: &WindowSpec,
) -> Result<Vec<WindowPair<T>>, TaskError> {
    spec.check()?;
    let count = spec.count(frame.len()).ok_or(TaskError::FrameTooShort {
        rows: frame.len(),
        input_len: spec.input_len,
        horizon: spec.horizon,
    })?;
    let v = frame.values();
    Ok((0..count)
        .map(|i| {
            let start = i * spec.stride;
            let mid = start + spec.input_len;
            let end = mid + spec.horizon;
            (
                v.slice(s![start..mid, ..]).to_owned(),
                v.slice(s![mid..end, ..]).to_owned(),
            )
        })
        .collect())
}

/// Contiguous `len × d` segments for generation tasks.
pub fn make_segments<T: Real>(
    frame: &TimeSeriesFrame<T>,
    len: usize,
    stride: usize,
) -> Result<Vec<Array2<T>>, TaskError> {
    if len == 0 || stride == 0 {
        return Err(TaskError::InvalidWindow("segment length and stride must be positive".into()));
    }
    if frame.len() < len {
        return Err(TaskError::FrameTooShort { rows: frame.len(), input_len: 0, horizon: len });
    }
    let count = (frame.len() - len) / stride + 1;
    let v = frame.values();
    Ok((0..count)
        .map(|i| v.slice(s![i * stride..i * stride + len, ..]).to_owned())
        .collect())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct JsonFrame {
    feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<String>>,
    values: Vec<Vec<f64>>,
}

pub fn load_frame<T: Real>(path: &Path, format: DataFormat) -> Result<TimeSeriesFrame<T>, TaskError> {
    if !path.is_file() {
        return Err(TaskError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        DataFormat::CsvWide => parse_csv_frame(&text),
        DataFormat::JsonFrame => parse_json_frame(&text),
    }
}

pub fn parse_csv_frame<T: Real>(text: &str) -> Result<TimeSeriesFrame<T>, TaskError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| TaskError::MalformedRow { line: 1, reason: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let has_ts = header.first().map(|h| h == "timestamp").unwrap_or(false);
    let names: Vec<String> = header.iter().skip(usize::from(has_ts)).cloned().collect();
    let width = header.len();

    let mut flat = Vec::new();
    let mut stamps = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| TaskError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(TaskError::MalformedRow {
                line,
                reason: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut cells = record.iter();
        if has_ts {
            stamps.push(cells.next().unwrap_or_default().trim().to_string());
        }
        for (cell, name) in cells.zip(&names) {
            let cell = cell.trim();
            let value: T = cell.parse().map_err(|_| TaskError::NonNumericCell {
                line,
                column: name.clone(),
                text: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(TaskError::NaNDetected { line, column: name.clone() });
            }
            flat.push(value);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, names.len()), flat)
        .map_err(|e| TaskError::InvalidFrame(e.to_string()))?;
    TimeSeriesFrame::new(values, names, has_ts.then_some(stamps))
}

pub fn parse_json_frame<T: Real>(text: &str) -> Result<TimeSeriesFrame<T>, TaskError> {
    let raw: JsonFrame = serde_json::from_str(text).map_err(|e| TaskError::MalformedRow {
        line: e.line() as u64,
        reason: e.to_string(),
    })?;
    let d = raw.feature_names.len();
    let mut flat = Vec::with_capacity(raw.values.len() * d);
    for (i, row) in raw.values.iter().enumerate() {
        if row.len() != d {
            return Err(TaskError::MalformedRow {
                line: i as u64,
                reason: format!("row {i} has {} values, expected {d}", row.len()),
            });
        }
        flat.extend(row.iter().map(|&x| T::lit(x)));
    }
    let values = Array2::from_shape_vec((raw.values.len(), d), flat)
        .map_err(|e| TaskError::InvalidFrame(e.to_string()))?;
    TimeSeriesFrame::new(values, raw.feature_names, raw.timestamps)
}

pub fn render_frame<T: Real>(frame: &TimeSeriesFrame<T>, format: DataFormat) -> String {
    match format {
        DataFormat::CsvWide => {
            let mut out = String::new();
            let mut header: Vec<&str> = Vec::new();
            if frame.timestamps().is_some() {
                header.push("timestamp");
            }
            header.extend(frame.feature_names().iter().map(String::as_str));
            out.push_str(&header.join(","));
            out.push('\n');
            for (r, row) in frame.values().rows().into_iter().enumerate() {
                let mut cells: Vec<String> = Vec::with_capacity(row.len() + 1);
                if let Some(ts) = frame.timestamps() {
                    cells.push(ts[r].clone());
                }
                cells.extend(row.iter().map(|v| v.to_string()));
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            out
        }
        DataFormat::JsonFrame => {
            let raw = JsonFrame {
                feature_names: frame.feature_names().to_vec(),
                timestamps: frame.timestamps().map(<[String]>::to_vec),
                values: frame
                    .values()
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|v| v.as_f64()).collect())
                    .collect(),
            };
            serde_json::to_string(&raw).expect("frame serializes")
        }
    }
}

pub fn save_frame<T: Real>(
    frame: &TimeSeriesFrame<T>,
    path: &Path,
    format: DataFormat,
) -> Result<(), TaskError> {
    fs::write(path, render_frame(frame, format)).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load one frame and split it chronologically (last 20% test, no gap).
pub fn load_dataset(path: &Path, format: DataFormat, window: WindowSpec) -> Result<DatasetSplit, TaskError> {
    let frame = load_frame(path, format)?;
    let (train, test) = frame.split_holdout(DEFAULT_TEST_FRACTION)?;
    DatasetSplit::new(train, test, window)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub format: DataFormat,
    /// Separate test file; when absent the main file is split chronologically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
}

/// The on-disk task sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub id: String,
    pub kind: TaskKind,
    pub description: String,
    pub dataset: DatasetRef,
    pub window: WindowSpec,
    pub criteria: Vec<String>,
    pub primary_criterion: String,
    #[serde(default)]
    pub direction: Direction,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub description: String,
    pub dataset: DatasetSplit,
    pub criteria: Vec<String>,
    pub primary_criterion: String,
    pub direction: Direction,
}

impl TaskSpec {
    /// Read a task sidecar; dataset paths resolve relative to the sidecar.
    pub fn load(path: &Path) -> Result<Self, TaskError> {
        if !path.is_file() {
            return Err(TaskError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: TaskFile = serde_json::from_str(&text).map_err(|e| TaskError::InvalidTaskFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_file(file, base)
    }

    pub fn from_file(file: TaskFile, base: &Path) -> Result<Self, TaskError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let main = resolve(&file.dataset.path);
        let dataset = match &file.dataset.test_path {
            Some(test) => DatasetSplit::new(
                load_frame(&main, file.dataset.format)?,
                load_frame(&resolve(test), file.dataset.format)?,
                file.window,
            )?,
            None => {
                let frame = load_frame(&main, file.dataset.format)?;
                let frac = file.dataset.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
                let (train, test) = frame.split_holdout(frac)?;
                DatasetSplit::new(train, test, file.window)?
            }
        };
        Ok(TaskSpec {
            id: file.id,
            kind: file.kind,
            description: file.description,
            dataset,
            criteria: file.criteria,
            primary_criterion: file.primary_criterion,
            direction: file.direction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum TaskViolation {
    UnknownMetric { metric: String },
    KindMismatch { metric: String, kind: TaskKind },
    PrimaryNotInCriteria { metric: String },
    EmptyCriteria,
    WindowTooLong { split: String, rows: usize, needed: usize },
}

impl std::fmt::Display for TaskViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskViolation::UnknownMetric { metric } => write!(f, "unknown metric `{metric}`"),
            TaskViolation::KindMismatch { metric, kind } => {
                write!(f, "metric `{metric}` does not apply to {kind} tasks")
            }
            TaskViolation::PrimaryNotInCriteria { metric } => {
                write!(f, "primary criterion `{metric}` is not among the criteria")
            }
            TaskViolation::EmptyCriteria => f.write_str("no criteria"),
            TaskViolation::WindowTooLong { split, rows, needed } => {
                write!(f, "{split} split has {rows} rows, windows need {needed}")
            }
        }
    }
}

/// Referential and kind checks; an empty violation list means the task is runnable.
pub fn validate_task(spec: &TaskSpec, banks: &BankSet) -> Result<(), Vec<TaskViolation>> {
    let mut out = Vec::new();
    if spec.criteria.is_empty() {
        out.push(TaskViolation::EmptyCriteria);
    }
    let check = |id: &str, out: &mut Vec<TaskViolation>| match banks.metric(id) {
        None => out.push(TaskViolation::UnknownMetric { metric: id.to_string() }),
        Some(m) if !m.task_kinds.contains(&spec.kind) => out.push(TaskViolation::KindMismatch {
            metric: id.to_string(),
            kind: spec.kind,
        }),
        Some(_) => {}
    };
    for c in &spec.criteria {
        check(c, &mut out);
    }
    if !spec.criteria.contains(&spec.primary_criterion) {
        check(&spec.primary_criterion, &mut out);
        out.push(TaskViolation::PrimaryNotInCriteria { metric: spec.primary_criterion.clone() });
    }
    let w = &spec.dataset.window;
    let needed = match spec.kind {
        TaskKind::Forecasting => w.input_len + w.horizon,
        TaskKind::Generation => w.horizon,
    };
    for (name, frame) in [("train", &spec.dataset.train), ("test", &spec.dataset.test)] {
        if frame.len() < needed {
            out.push(TaskViolation::WindowTooLong {
                split: name.into(),
                rows: frame.len(),
                needed,
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
