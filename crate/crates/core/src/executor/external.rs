//! Subprocess executor: one JSON request on stdin, one JSON response on stdout.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{CandidateConfig, RunResult, RunStatus};
use crate::metrics::{evaluate_forecast, evaluate_generation, RiskParams};
use crate::task::{make_segments, make_windows, render_frame, DataFormat, TaskKind, TaskSpec, WindowSpec};

/// Upper bound on captured stdout/stderr text, in bytes.
pub const TAIL_LIMIT: usize = 8 * 1024;

/// Who computes metrics: the child, or the engine from a predictions file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    Child,
    Engine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecTask {
    pub id: String,
    pub kind: TaskKind,
    pub window: WindowSpec,
    pub criteria: Vec<String>,
    pub primary_criterion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecData {
    /// Inline frames in the json-frame layout.
    pub train: serde_json::Value,
    pub test: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecRequest {
    pub v: u32,
    pub task: ExecTask,
    pub data: ExecData,
    pub config: CandidateConfig,
    #[serde(default)]
    pub scoring: Scoring,
}

impl ExecRequest {
    pub fn new(config: &CandidateConfig, task: &TaskSpec, scoring: Scoring) -> Result<Self, String> {
        let frame = |f| -> Result<serde_json::Value, String> {
            serde_json::from_str(&render_frame(f, DataFormat::JsonFrame)).map_err(|e| e.to_string())
        };
        Ok(Self {
            v: 1,
            task: ExecTask {
                id: task.id.clone(),
                kind: task.kind,
                window: task.dataset.window,
                criteria: task.criteria.clone(),
                primary_criterion: task.primary_criterion.clone(),
            },
            data: ExecData { train: frame(&task.dataset.train)?, test: frame(&task.dataset.test)? },
            config: config.clone(),
            scoring,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Success,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecResponse {
    pub v: u32,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Predictions written by the child for engine-side scoring: one `q × d`
/// matrix per test window (forecasting) or per synthetic sample (generation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub windows: Vec<Vec<Vec<f64>>>,
}

/// Last `TAIL_LIMIT` bytes of `bytes`, cut at a character boundary.
pub(crate) fn tail(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= TAIL_LIMIT {
        return text.into_owned();
    }
    let mut cut = text.len() - TAIL_LIMIT;
    while !text.is_char_boundary(cut) {
        cut += 1;
    }
    text[cut..].to_string()
}

fn spawn_reader<R: Read + Send + 'static>(mut source: R) -> mpsc::Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = source.read_to_end(&mut buf);
        let _ = tx.send(buf);
    });
    rx
}

fn score_predictions(path: &str, task: &TaskSpec) -> Result<BTreeMap<String, f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read predictions `{path}`: {e}"))?;
    let file: PredictionsFile = serde_json::from_str(&text).map_err(|e| format!("malformed predictions: {e}"))?;
    let d = task.dataset.dim();
    let q = task.dataset.window.horizon;
    let windows = file
        .windows
        .into_iter()
        .map(|w| {
            let rows = w.len();
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            if rows != q || flat.len() != q * d {
                return Err(format!("prediction window must be {q} x {d}"));
            }
            Array2::from_shape_vec((q, d), flat).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut ids = task.criteria.clone();
    if !ids.contains(&task.primary_criterion) {
        ids.push(task.primary_criterion.clone());
    }
    let params = RiskParams::default();
    match task.kind {
        TaskKind::Forecasting => {
            let truth: Vec<Array2<f64>> = make_windows(&task.dataset.test, &task.dataset.window)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|(_, y)| y)
                .collect();
            evaluate_forecast(&ids, &windows, &truth, &params)
        }
        TaskKind::Generation => {
            let real = make_segments(&task.dataset.test, q, task.dataset.window.stride).map_err(|e| e.to_string())?;
            evaluate_generation(&ids, &real, &windows, &params)
        }
    }
    .map_err(|e| format!("metric evaluation failed: {e}"))
}

/// Run an external model. Every failure is reported through the status.
pub fn run_external(
    config: &CandidateConfig,
    task: &TaskSpec,
    command: &[String],
    timeout: Duration,
    scoring: Scoring,
) -> RunResult {
    let started = Instant::now();
    let Some((program, args)) = command.split_first() else {
        return RunResult::train_error("spawn failure: empty command", started);
    };
    let body = match ExecRequest::new(config, task, scoring).and_then(|r| serde_json::to_vec(&r).map_err(|e| e.to_string())) {
        Ok(b) => b,
        Err(e) => return RunResult::train_error(format!("cannot build request: {e}"), started),
    };
    let mut child = match Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return RunResult::train_error(format!("spawn failure: {program}: {e}"), started),
    };
    let mut stdin = child.stdin.take().expect("stdin piped");
    // a child that never reads its input must not block us
    thread::spawn(move || {
        let _ = stdin.write_all(&body);
    });
    let out_rx = spawn_reader(child.stdout.take().expect("stdout piped"));
    let err_rx = spawn_reader(child.stderr.take().expect("stderr piped"));

    let status = match child.wait_timeout(timeout) {
        Ok(Some(status)) => status,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            let grace = Duration::from_millis(200);
            let mut r = RunResult::failed(RunStatus::Timeout, started);
            r.stdout_tail = out_rx.recv_timeout(grace).map(|b| tail(&b)).unwrap_or_default();
            r.stderr_tail = err_rx.recv_timeout(grace).map(|b| tail(&b)).unwrap_or_default();
            return r;
        }
        Err(e) => {
            let _ = child.kill();
            return RunResult::train_error(format!("wait failed: {e}"), started);
        }
    };
    let stdout = out_rx.recv().unwrap_or_default();
    let stderr_tail = err_rx.recv().map(|b| tail(&b)).unwrap_or_default();
    let stdout_tail = tail(&stdout);

    let fail = |message: String| {
        let mut r = RunResult::failed(
            RunStatus::TrainError { message, log_excerpt: stderr_tail.clone() },
            started,
        );
        r.stdout_tail = stdout_tail.clone();
        r.stderr_tail = stderr_tail.clone();
        r
    };
    if !status.success() {
        return fail(format!("child exited with {status}"));
    }
    let response: ExecResponse = match serde_json::from_slice(&stdout) {
        Ok(r) => r,
        Err(e) => return fail(format!("malformed response: {e}")),
    };
    if response.v != 1 {
        return fail(format!("unsupported response version {}", response.v));
    }
    if response.status == ResponseStatus::Error {
        return fail(response.message.unwrap_or_else(|| "child reported an error".into()));
    }
    let metrics = match (response.metrics, response.predictions_path) {
        (Some(m), _) if !m.is_empty() => m,
        (_, Some(path)) => match score_predictions(&path, task) {
            Ok(m) => m,
            Err(e) => return fail(e),
        },
        _ => return fail("response carries neither metrics nor predictions".into()),
    };
    let mut r = RunResult::success(metrics, task, started);
    if let RunStatus::InvalidOutput { message } = &r.status {
        return fail(format!("missing metrics: {message}"));
    }
    r.stdout_tail = stdout_tail;
    r.stderr_tail = stderr_tail;
    r.artifact_digest = Some(crate::hashing::sha256_hex(&stdout));
    r
}
