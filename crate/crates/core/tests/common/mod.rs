#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use serde_json::{json, Value};
use tsloop::banks::{load_banks, BankSet};
use tsloop::executor::{CandidateConfig, DirectiveKind, Executor, ModelRunner, RunResult};
use tsloop::planner::{Decision, DecisionContext, DecisionPayload, PlannerBackend, PlannerError, Stage};
use tsloop::task::TaskSpec;

pub fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn banks() -> BankSet {
    load_banks(&root().join("banks")).unwrap()
}

pub fn ar2_task() -> TaskSpec {
    TaskSpec::load(&root().join("fixtures/ar2/task.json")).unwrap()
}

pub fn gauss_task() -> TaskSpec {
    TaskSpec::load(&root().join("fixtures/gauss/task.json")).unwrap()
}

/// Plain CSV reader for oracles: header line, then numeric rows.
pub fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().parse().unwrap()).collect())
        .collect()
}

/// |a - b| within `rel` of the larger magnitude, or both (near) zero.
pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    let diff = (a - b).abs();
    diff <= rel * a.abs().max(b.abs()) || diff <= 1e-300
}

/// Wraps a planner, keeping every context it saw and every decision it made.
pub struct Recording<P> {
    pub inner: P,
    pub contexts: Mutex<Vec<DecisionContext>>,
    pub decisions: Mutex<Vec<Decision>>,
}

impl<P> Recording<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, contexts: Mutex::new(Vec::new()), decisions: Mutex::new(Vec::new()) }
    }

    pub fn rationales(&self) -> Vec<String> {
        self.decisions.lock().unwrap().iter().map(|d| d.rationale.clone()).collect()
    }
}

impl<P: PlannerBackend> PlannerBackend for Recording<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn serves(&self, stage: Stage) -> bool {
        self.inner.serves(stage)
    }

    fn decide(&self, ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        self.contexts.lock().unwrap().push(ctx.clone());
        let d = self.inner.decide(ctx)?;
        self.decisions.lock().unwrap().push(d.clone());
        Ok(d)
    }
}

/// Appends a directive of `kind` to every refinement decision, at the
/// regular attempt only or at every attempt.
pub struct Inject<P> {
    pub inner: P,
    pub kind: DirectiveKind,
    pub every_attempt: bool,
}

impl<P: PlannerBackend> PlannerBackend for Inject<P> {
    fn id(&self) -> String {
        format!("inject:{}", self.inner.id())
    }

    fn serves(&self, stage: Stage) -> bool {
        self.inner.serves(stage)
    }

    fn decide(&self, ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        let mut d = self.inner.decide(ctx)?;
        if ctx.stage == Stage::Refinement && (ctx.attempt == 0 || self.every_attempt) {
            if let DecisionPayload::Refinement { directives, .. } = &mut d.payload {
                directives.retain(|x| x.kind() != self.kind);
                directives.push(instance(self.kind));
            }
        }
        Ok(d)
    }
}

pub fn instance(kind: DirectiveKind) -> tsloop::executor::DirectiveInstance {
    let params = kind.params().iter().map(|b| (b.name.to_string(), b.default)).collect();
    tsloop::executor::DirectiveInstance::from_parts(kind, &params).unwrap()
}

pub const INJECTED: &str = "injected fault: directive rejected by the trainer";

/// Fails any run whose configuration carries `poison`.
pub struct Faulty {
    pub inner: ModelRunner,
    pub poison: DirectiveKind,
    pub runs: AtomicUsize,
}

impl Faulty {
    pub fn new(poison: DirectiveKind) -> Self {
        Self { inner: ModelRunner::default(), poison, runs: AtomicUsize::new(0) }
    }
}

impl Executor for Faulty {
    fn run(&self, config: &CandidateConfig, task: &TaskSpec, banks: &BankSet) -> RunResult {
        self.runs.fetch_add(1, Ordering::SeqCst);
        if config.directives.iter().any(|d| d.kind() == self.poison) {
            return RunResult::train_error(format!("{INJECTED} ({})", self.poison), Instant::now());
        }
        self.inner.run(config, task, banks)
    }
}

/// A local chat-completions endpoint answering every stage with a fixed,
/// valid decision. Keeps the raw requests it received.
pub struct StubLlm {
    pub url: String,
    pub requests: Arc<Mutex<Vec<String>>>,
    /// Number of leading requests answered with HTTP 500.
    pub fail_first: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut head = String::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().ok()?;
        }
        head.push_str(&line);
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    Some(head + &String::from_utf8_lossy(&body))
}

fn answer(prompt: &str) -> String {
    let v = if prompt.contains("\"model_id\": one of [") {
        let start = prompt.find("one of [").unwrap() + "one of [".len();
        let first = prompt[start..].split([',', ']']).next().unwrap().trim().to_string();
        json!({ "model_id": first, "rationale": format!("stub picks {first}") })
    } else if prompt.contains("\"directives\":") {
        json!({ "directives": [{ "kind": "normalize_zscore" }], "rationale": "stub standardizes inputs" })
    } else {
        json!({ "hyperparams": {}, "rationale": "stub keeps hyperparameters" })
    };
    v.to_string()
}

pub fn serve_stub() -> StubLlm {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let fail_first = Arc::new(AtomicUsize::new(0));
    let (reqs, fails) = (requests.clone(), fail_first.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(raw) = read_request(&mut stream) else { continue };
            reqs.lock().unwrap().push(raw.clone());
            let (status, body) = if fails.load(Ordering::SeqCst) > 0 {
                fails.fetch_sub(1, Ordering::SeqCst);
                ("500 Internal Server Error", "{}".to_string())
            } else {
                let body_start = raw.find("\r\n\r\n").map(|i| i + 4).unwrap_or(raw.len());
                let req: Value = serde_json::from_str(&raw[body_start..]).unwrap_or(Value::Null);
                let prompt = req["messages"]
                    .as_array()
                    .and_then(|m| m.last())
                    .and_then(|m| m["content"].as_str())
                    .unwrap_or("")
                    .to_string();
                let content = answer(&prompt);
                let body = json!({
                    "choices": [{ "message": { "role": "assistant", "content": content } }],
                    "usage": { "prompt_tokens": prompt.len() / 4, "completion_tokens": content.len() / 4 },
                });
                ("200 OK", body.to_string())
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    StubLlm { url, requests, fail_first }
}
