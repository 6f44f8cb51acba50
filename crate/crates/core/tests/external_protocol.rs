mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use tsloop::banks::{BankSet, ModelDescriptor};
use tsloop::executor::{
    run_external, CandidateConfig, ExecRequest, Executor, ModelRunner, PredictionsFile, RunStatus, Scoring,
};
use tsloop::task::{make_windows, TaskSpec};

use common::*;

fn sh(script: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), script.into()]
}

fn external_model(command: Vec<String>) -> ModelDescriptor {
    serde_json::from_value(serde_json::json!({
        "v": 1,
        "id": "ext_stub",
        "family": "deep",
        "task_kinds": ["forecasting"],
        "hyperparam_schema": [{ "type": "int", "name": "epochs", "min": 1, "max": 10, "default": 3 }],
        "binding": { "kind": "external", "command": command, "timeout_ms": 5000 },
        "summary": "shell stub"
    }))
    .unwrap()
}

fn config() -> CandidateConfig {
    CandidateConfig::defaults_for(&external_model(sh("true")), 11)
}

fn run(script: &str, timeout: Duration) -> tsloop::executor::RunResult {
    run_external(&config(), &ar2_task(), &sh(script), timeout, Scoring::Child)
}

const OK: &str = r#"{"v":1,"status":"success","metrics":{"rmse":0.5,"mae":0.25}}"#;

#[test]
fn child_metrics_are_taken_verbatim() {
    let r = run(&format!("cat > /dev/null; echo '{OK}'"), Duration::from_secs(10));
    assert!(r.is_success(), "{r:?}");
    assert_eq!(r.primary_loss, Some(0.5));
    assert_eq!(r.metrics["mae"], 0.25);
    assert!(r.artifact_digest.is_some());
}

#[test]
fn request_carries_task_data_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let req_path = dir.path().join("req.json");
    let script = format!("cat > '{}'; echo '{OK}'", req_path.display());
    let task = ar2_task();
    let r = run_external(&config(), &task, &sh(&script), Duration::from_secs(10), Scoring::Engine);
    assert!(r.is_success(), "{r:?}");
    let sent: ExecRequest = serde_json::from_slice(&std::fs::read(&req_path).unwrap()).unwrap();
    assert_eq!(sent, ExecRequest::new(&config(), &task, Scoring::Engine).unwrap());
    assert_eq!(sent.v, 1);
    assert_eq!(sent.data.train["values"].as_array().unwrap().len(), task.dataset.train.len());
    assert_eq!(sent.data.test["values"].as_array().unwrap().len(), task.dataset.test.len());
}

#[test]
fn slow_child_times_out() {
    let started = Instant::now();
    let r = run("echo partial; sleep 5", Duration::from_millis(300));
    assert_eq!(r.status, RunStatus::Timeout);
    assert!(started.elapsed() < Duration::from_secs(4));
    assert_eq!(r.error_text().as_deref(), Some("timeout"));
}

#[test]
fn nonzero_exit_is_a_train_error_with_stderr() {
    let r = run("cat > /dev/null; echo boom >&2; exit 1", Duration::from_secs(10));
    match &r.status {
        RunStatus::TrainError { message, log_excerpt } => {
            assert!(message.contains("exited"), "{message}");
            assert!(log_excerpt.contains("boom"));
        }
        other => panic!("{other:?}"),
    }
    assert!(r.error_text().unwrap().contains("boom"));
}

#[test]
fn malformed_and_unsupported_responses() {
    let cases = [
        ("echo not-json", "malformed response"),
        (r#"echo '{"v":2,"status":"success","metrics":{"rmse":1,"mae":1}}'"#, "unsupported response version"),
        (r#"echo '{"v":1,"status":"error","message":"cuda missing"}'"#, "cuda missing"),
        (r#"echo '{"v":1,"status":"success"}'"#, "neither metrics nor predictions"),
    ];
    for (script, want) in cases {
        let r = run(&format!("cat > /dev/null; {script}"), Duration::from_secs(10));
        let text = r.error_text().unwrap_or_default();
        assert!(text.contains(want), "{script}: {text}");
    }
}

#[test]
fn missing_criterion_is_invalid_output() {
    let r = run(r#"cat > /dev/null; echo '{"v":1,"status":"success","metrics":{"rmse":1.0}}'"#, Duration::from_secs(10));
    assert!(r.error_text().unwrap().contains("mae"), "{r:?}");
}

#[test]
fn spawn_failure_is_reported() {
    let r = run_external(
        &config(),
        &ar2_task(),
        &["/nonexistent/tsloop-child".to_string()],
        Duration::from_secs(1),
        Scoring::Child,
    );
    assert!(r.error_text().unwrap().contains("spawn failure"));
}

fn write_predictions(task: &TaskSpec, path: &Path) {
    let windows = make_windows(&task.dataset.test, &task.dataset.window)
        .unwrap()
        .into_iter()
        .map(|(_, y): (Array2<f64>, Array2<f64>)| y.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect();
    std::fs::write(path, serde_json::to_string(&PredictionsFile { windows }).unwrap()).unwrap();
}

#[test]
fn engine_scores_prediction_files() {
    let task = ar2_task();
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.json");
    write_predictions(&task, &preds);
    let script = format!(r#"cat > /dev/null; echo '{{"v":1,"status":"success","predictions_path":"{}"}}'"#, preds.display());
    let r = run_external(&config(), &task, &sh(&script), Duration::from_secs(10), Scoring::Engine);
    assert!(r.is_success(), "{r:?}");
    assert_eq!(r.primary_loss, Some(0.0));

    std::fs::write(&preds, r#"{"windows":[[[1.0]]]}"#).unwrap();
    let r = run_external(&config(), &task, &sh(&script), Duration::from_secs(10), Scoring::Engine);
    assert!(r.error_text().unwrap().contains("prediction window"));
}

#[test]
fn model_runner_dispatches_external_bindings() {
    let real = banks();
    let model = external_model(sh(&format!("cat > /dev/null; echo '{OK}'")));
    let mut models = real.models().to_vec();
    models.push(model.clone());
    let bank = BankSet::from_records(real.cases().to_vec(), real.refinements().to_vec(), models, real.metrics().to_vec())
        .unwrap();
    let cfg = CandidateConfig::defaults_for(&model, 1);
    let r = ModelRunner::default().run(&cfg, &ar2_task(), &bank);
    assert!(r.is_success(), "{r:?}");
    assert_eq!(r.primary_loss, Some(0.5));
}
