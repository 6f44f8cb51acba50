//! Acceptance suite. Runs as a plain binary so every criterion prints one
//! line, pass or fail, and a failing criterion does not hide the others.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

use tsloop::audit::{verify_bytes, verify_chain, Action, AuditLog, ChainVerdict, LogEntry, Verdict};
use tsloop::banks::{BankSet, CaseRecord};
use tsloop::controller::{FinalReport, Phase, PhaseConfig, SearchEngine, TracePoint};
use tsloop::executor::{CandidateConfig, DirectiveKind, Executor, ModelRunner};
use tsloop::llm::{load_transcript, ChatParams, Gateway, LiveConfig};
use tsloop::metrics::{
    autocorrelation_score, correlation_score, covariance_score, evaluate_generation, expected_shortfall, mae, mape,
    marginal_score, metric_difference, rmse, sharpe, smape, value_at_risk, RiskMetric, RiskParams,
};
use tsloop::planner::{LlmPlanner, ModelOrder, ScriptedPlanner, SeededRandomPlanner, Stage, StageOptions};
use tsloop::retrieval::{retrieve, tokenize, top_k_models, CaseIndex};
use tsloop::task::{make_segments, DatasetSplit, TaskKind, TaskSpec, WindowSpec};

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_phase(seed: u64) -> PhaseConfig {
    PhaseConfig { k: 2, warmup_iters: 3, opt_iters: 10, seed, ..PhaseConfig::default() }
}

/// Scripted end-to-end run on the AR(2) fixture, log written to `log_path`.
fn scripted_run(task: &TaskSpec, banks: &BankSet, seed: u64, log_path: &std::path::Path) -> (FinalReport, Vec<String>) {
    let planner = Recording::new(ScriptedPlanner::new(ModelOrder::Votes));
    let executor = ModelRunner::default();
    let log = AuditLog::create(log_path).unwrap();
    let engine = SearchEngine { task, banks, planner: &planner, executor: &executor, log: &log, phase: c1_phase(seed) };
    let report = engine.run_full().unwrap();
    (report, planner.rationales())
}

/// RMSE of predicting the last input row, over every test window of the
/// fixture, computed from the raw CSV.
fn naive_oracle_rmse() -> f64 {
    let rows = read_csv(&root().join("fixtures/ar2/ar2.csv"));
    let n_test = (rows.len() as f64 * 0.2).round() as usize;
    let test = &rows[rows.len() - n_test..];
    let (p, d) = (10, test[0].len());
    let mut sq = vec![0.0; d];
    let mut count = 0usize;
    for i in 0..=test.len() - p - 1 {
        let last = &test[i + p - 1];
        let truth = &test[i + p];
        for j in 0..d {
            sq[j] += (last[j] - truth[j]).powi(2);
        }
        count += 1;
    }
    let mse: f64 = sq.iter().map(|s| s / count as f64).sum::<f64>() / d as f64;
    mse.sqrt()
}

fn criterion_1() -> Outcome {
    let (task, banks) = (ar2_task(), banks());
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let (report, _) = scripted_run(&task, &banks, 42, &dir.path().join("audit.log"));
    let elapsed = started.elapsed();
    ensure(report.is_success(), || format!("outcome {:?}", report.outcome))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let baseline = naive_oracle_rmse();
    let final_rmse = report.final_metrics.as_ref().and_then(|m| m.get("rmse").copied()).ok_or("no final rmse")?;
    ensure(final_rmse <= baseline, || format!("final rmse {final_rmse} > naive {baseline}"))?;

    let mut accepted = 0;
    for id in report.loss_trace.iter().map(|p| p.candidate_id.clone()).collect::<std::collections::BTreeSet<_>>() {
        let losses: Vec<f64> = report
            .loss_trace
            .iter()
            .filter(|p| p.candidate_id == id && p.verdict == Verdict::Accepted)
            .filter_map(|p| p.candidate_loss)
            .collect();
        accepted += losses.len();
        ensure(losses.windows(2).all(|w| w[1] < w[0]), || format!("{id}: accepted losses {losses:?}"))?;
    }
    Ok(format!(
        "final rmse {final_rmse:.5} <= naive {baseline:.5}; {accepted} accepted points strictly decreasing; {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---- criterion 2 oracles ----

fn random_matrix(rng: &mut StdRng, n: usize, d: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(lo..hi))
}

fn away_from_zero(rng: &mut StdRng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| {
        let m = rng.random_range(0.1..10.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn oracle_columnwise(p: &Array2<f64>, t: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> f64 {
    let (n, d) = p.dim();
    let mut total = 0.0;
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..n {
            s += f(p[[i, j]], t[[i, j]]);
        }
        total += s / n as f64;
    }
    total / d as f64
}

fn oracle_sharpe(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    mean / var.sqrt()
}

/// Smallest k with k >= alpha * n, by counting up.
fn oracle_rank(n: usize, alpha: f64) -> usize {
    (1..=n).find(|&k| k as f64 >= alpha * n as f64 - 1e-9).unwrap()
}

fn oracle_var(r: &[f64], alpha: f64) -> f64 {
    let mut s = r.to_vec();
    s.sort_by(f64::total_cmp);
    -s[oracle_rank(r.len(), alpha) - 1]
}

fn oracle_es(r: &[f64], alpha: f64) -> f64 {
    let q = -oracle_var(r, alpha);
    let tail: Vec<f64> = r.iter().copied().filter(|&x| x <= q).collect();
    -tail.iter().sum::<f64>() / tail.len() as f64
}

fn prices_to_returns(p: &[f64]) -> Vec<f64> {
    (1..p.len()).map(|i| p[i] / p[i - 1] - 1.0).collect()
}

fn pooled(set: &[Array2<f64>]) -> DMatrix<f64> {
    let d = set[0].ncols();
    let rows: Vec<f64> = set.iter().flat_map(|w| w.iter().copied().collect::<Vec<_>>()).collect();
    DMatrix::from_row_slice(rows.len() / d, d, &rows)
}

fn oracle_cov(set: &[Array2<f64>]) -> DMatrix<f64> {
    let x = pooled(set);
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c.transpose() * &c / (n - 1.0)
}

fn oracle_corr(set: &[Array2<f64>]) -> DMatrix<f64> {
    let c = oracle_cov(set);
    let inv_sd = DMatrix::from_diagonal(&c.diagonal().map(|v| 1.0 / v.sqrt()));
    &inv_sd * c * &inv_sd
}

fn oracle_marginal(real: &[Array2<f64>], fake: &[Array2<f64>], bins: usize) -> f64 {
    let d = real[0].ncols();
    let mut total = 0.0;
    for j in 0..d {
        let r: Vec<f64> = real.iter().flat_map(|w| w.column(j).to_vec()).collect();
        let f: Vec<f64> = fake.iter().flat_map(|w| w.column(j).to_vec()).collect();
        let lo = r.iter().chain(&f).copied().fold(f64::INFINITY, f64::min);
        let hi = r.iter().chain(&f).copied().fold(f64::NEG_INFINITY, f64::max);
        let hist = |xs: &[f64]| {
            let mut h = vec![0.0; bins];
            for &v in xs {
                let b = if hi > lo { (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1) } else { 0 };
                h[b] += 1.0;
            }
            h.iter().map(|c| c / xs.len() as f64).collect::<Vec<_>>()
        };
        let (hr, hf) = (hist(&r), hist(&f));
        total += hr.iter().zip(&hf).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    }
    total / d as f64
}

fn oracle_acf(x: &[f64], lags: usize) -> Vec<f64> {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    (1..=lags).map(|l| (0..n - l).map(|t| (x[t] - m) * (x[t + l] - m)).sum::<f64>() / c0).collect()
}

fn oracle_autocorr(real: &[Array2<f64>], fake: &[Array2<f64>]) -> f64 {
    let (q, d) = real[0].dim();
    let mean_acf = |set: &[Array2<f64>], j: usize| {
        let mut acc = vec![0.0; q - 1];
        for w in set {
            for (a, v) in acc.iter_mut().zip(oracle_acf(&w.column(j).to_vec(), q - 1)) {
                *a += v;
            }
        }
        acc.into_iter().map(|a| a / set.len() as f64).collect::<Vec<_>>()
    };
    (0..d)
        .map(|j| {
            let (a, b) = (mean_acf(real, j), mean_acf(fake, j));
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / d as f64
}

fn window_set(rng: &mut StdRng, n: usize, q: usize, d: usize) -> Vec<Array2<f64>> {
    (0..n).map(|_| random_matrix(rng, q, d, -3.0, 3.0)).collect()
}

fn criterion_2() -> Outcome {
    const N: usize = 200;
    const TOL: f64 = 1e-9;
    let mut rng = StdRng::seed_from_u64(2024);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut check = |name: &'static str, got: f64, want: f64| -> Result<(), String> {
        let rel = if got == want { 0.0 } else { (got - want).abs() / got.abs().max(want.abs()) };
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(rel);
        ensure(rel_close(got, want, TOL), || format!("{name}: got {got}, oracle {want}"))
    };

    for _ in 0..N {
        let (n, d) = (rng.random_range(1..40), rng.random_range(1..5));
        let p = random_matrix(&mut rng, n, d, -10.0, 10.0);
        let t = away_from_zero(&mut rng, n, d);
        check("rmse", rmse(p.view(), t.view()).unwrap().value, oracle_columnwise(&p, &t, |a, b| (a - b).powi(2)).sqrt())?;
        check("mae", mae(p.view(), t.view()).unwrap().value, oracle_columnwise(&p, &t, |a, b| (a - b).abs()))?;
        check("mape", mape(p.view(), t.view()).unwrap().value, oracle_columnwise(&p, &t, |f, a| 100.0 * ((f - a) / a).abs()))?;
        check(
            "smape",
            smape(p.view(), t.view()).unwrap().value,
            oracle_columnwise(&p, &t, |f, a| 200.0 * (f - a).abs() / (f.abs() + a.abs())),
        )?;
    }

    let params = |alpha: f64| RiskParams { alpha, ..RiskParams::default() };
    for _ in 0..N {
        let n = rng.random_range(20..200);
        let alpha = [0.01, 0.05, 0.1, 0.25, 0.5][rng.random_range(0..5)];
        let prices = |rng: &mut StdRng| {
            let mut p = vec![100.0];
            for _ in 0..n {
                let last = *p.last().unwrap();
                p.push(last * (1.0 + rng.random_range(-0.05..0.05)));
            }
            p
        };
        let (pp, tp) = (prices(&mut rng), prices(&mut rng));
        let (rp, rt) = (prices_to_returns(&pp), prices_to_returns(&tp));
        if alpha * n as f64 >= 1.0 {
            check("var", value_at_risk(&rt, &params(alpha)).unwrap(), oracle_var(&rt, alpha))?;
            check("es", expected_shortfall(&rt, &params(alpha)).unwrap(), oracle_es(&rt, alpha))?;
            check(
                "var",
                metric_difference(RiskMetric::Var, &pp, &tp, &params(alpha)).unwrap().value,
                (oracle_var(&rp, alpha) - oracle_var(&rt, alpha)).abs(),
            )?;
            check(
                "es",
                metric_difference(RiskMetric::Es, &pp, &tp, &params(alpha)).unwrap().value,
                (oracle_es(&rp, alpha) - oracle_es(&rt, alpha)).abs(),
            )?;
        }
        check("sharpe", sharpe(&rt).unwrap(), oracle_sharpe(&rt))?;
        check(
            "sharpe",
            metric_difference(RiskMetric::Sharpe, &pp, &tp, &params(alpha)).unwrap().value,
            (oracle_sharpe(&rp) - oracle_sharpe(&rt)).abs(),
        )?;
    }

    for i in 0..N {
        let (q, d) = (rng.random_range(2..10), rng.random_range(1..5));
        let (nr, nf) = (rng.random_range(2..20), rng.random_range(2..20));
        let real = window_set(&mut rng, nr, q, d);
        // every fourth instance scores a set against itself
        let fake = if i % 4 == 0 { real.clone() } else { window_set(&mut rng, nf, q, d) };
        check("marginal", marginal_score(&real, &fake, 50).unwrap().value, oracle_marginal(&real, &fake, 50))?;
        check("covariance", covariance_score(&real, &fake).unwrap().value, (oracle_cov(&real) - oracle_cov(&fake)).norm())?;
        let corr = if d < 2 { 0.0 } else { (oracle_corr(&real) - oracle_corr(&fake)).norm() };
        check("correlation", correlation_score(&real, &fake).unwrap().value, corr)?;
        check("autocorrelation", autocorrelation_score(&real, &fake, None).unwrap().value, oracle_autocorr(&real, &fake))?;
    }

    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!("{N} instances per metric; worst relative error: {}", summary.join(", ")))
}

// ---- criterion 3 ----

const VOCAB: &[&str] = &[
    "forecast", "energy", "load", "hourly", "retail", "sales", "weekly", "traffic", "sensor", "trend", "seasonal",
    "volatility", "returns", "equity", "linear", "smooth", "noisy", "multivariate", "daily", "demand",
];

fn toy_cases(rng: &mut StdRng, models: &[&str]) -> Vec<CaseRecord> {
    let mut cases = Vec::new();
    for i in 0..20 {
        let description = if i % 5 == 4 {
            // duplicate of the previous description, different model: exact similarity ties
            cases.last().map(|c: &CaseRecord| c.description.clone()).unwrap()
        } else {
            let len = rng.random_range(4..12);
            (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
        };
        cases.push(CaseRecord {
            v: 1,
            id: format!("toy-{i:02}"),
            task_kind: TaskKind::Forecasting,
            domain_tags: vec![],
            description,
            solution_summary: "toy".into(),
            recommended_model: models[i % models.len()].into(),
            outcome: BTreeMap::new(),
        });
    }
    cases
}

/// Dense tf-idf cosine over the whole vocabulary, written from scratch.
fn oracle_similarities(docs: &[String], query: &str) -> Vec<f64> {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
    let mut vocab: Vec<String> = toks.iter().flatten().cloned().collect();
    vocab.sort();
    vocab.dedup();
    let n = docs.len() as f64;
    let idf: Vec<f64> = vocab
        .iter()
        .map(|t| {
            let df = toks.iter().filter(|d| d.contains(t)).count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let vec_of = |tokens: &[String]| {
        let v: Vec<f64> = vocab.iter().zip(&idf).map(|(t, w)| tokens.iter().filter(|x| *x == t).count() as f64 * w).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect::<Vec<_>>()
    };
    let q = vec_of(&tokenize(query));
    toks.iter()
        .map(|d| vec_of(d).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0))
        .collect()
}

fn criterion_3() -> Outcome {
    let real = banks();
    let models = ["exp_smoothing", "gd_linear", "naive_last", "patchtst"];
    let mut rng = StdRng::seed_from_u64(3);
    let cases = toy_cases(&mut rng, &models);
    let bank = BankSet::from_records(
        cases.clone(),
        real.refinements().to_vec(),
        real.models().to_vec(),
        real.metrics().to_vec(),
    )
    .map_err(|e| e.to_string())?;
    let index = CaseIndex::build(&cases.iter().map(|c| (c.id.clone(), c.description.clone())).collect::<Vec<_>>());
    let docs: Vec<String> = cases.iter().map(|c| c.description.clone()).collect();

    let mut queries: Vec<String> = docs.clone();
    for _ in 0..30 {
        let len = rng.random_range(1..8);
        let mut q: Vec<&str> = (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
        q.push("unseenterm");
        queries.push(q.join(" "));
    }
    let (mut checked, mut ties) = (0, 0);
    for q in &queries {
        let sims = oracle_similarities(&docs, q);
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(cases[a].id.cmp(&cases[b].id)));
        ties += order.windows(2).filter(|w| sims[w[0]] == sims[w[1]] && sims[w[0]] > 0.0).count();
        for k_cases in [1, 3, 5, 8, 20] {
            let got = retrieve(&index, q, k_cases);
            let want: Vec<(String, f64)> = order.iter().take(k_cases).map(|&i| (cases[i].id.clone(), sims[i])).collect();
            ensure(got.ranked.len() == want.len(), || format!("{q:?}: {} ranked, want {}", got.ranked.len(), want.len()))?;
            for (g, (id, s)) in got.ranked.iter().zip(&want) {
                ensure(&g.case_id == id && (g.similarity - s).abs() <= 1e-12, || {
                    format!("{q:?} k={k_cases}: got {} {}, oracle {id} {s}", g.case_id, g.similarity)
                })?;
            }

            let mut votes: BTreeMap<&str, f64> = BTreeMap::new();
            for (id, s) in &want {
                let model = &cases.iter().find(|c| &c.id == id).unwrap().recommended_model;
                *votes.entry(model).or_insert(0.0) += s;
            }
            let mut vote_order: Vec<(&str, f64)> = votes.into_iter().collect();
            vote_order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
            for k in 1..=models.len() {
                let got = top_k_models(&got.ranked, &bank, k).map_err(|e| e.to_string())?;
                let want: Vec<_> = vote_order.iter().take(k).collect();
                ensure(got.votes.len() == want.len(), || format!("{q:?}: {} votes, want {}", got.votes.len(), want.len()))?;
                ensure(got.shortfall == (vote_order.len() < k), || format!("{q:?}: shortfall flag"))?;
                for (g, (m, s)) in got.votes.iter().zip(want) {
                    ensure(g.model_id == *m && (g.score - s).abs() <= 1e-12, || {
                        format!("{q:?} k={k}: vote {} {}, oracle {m} {s}", g.model_id, g.score)
                    })?;
                }
                checked += 1;
            }
        }
    }
    ensure(ties > 0, || "fixture produced no similarity ties".into())?;
    Ok(format!("{} queries, {checked} vote checks, {ties} tied neighbours resolved by ascending id", queries.len()))
}

// ---- criterion 4 ----

fn criterion_4() -> Outcome {
    let (task, banks) = (ar2_task(), banks());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    let (report, rationales) = scripted_run(&task, &banks, 42, &path);
    ensure(report.is_success(), || format!("outcome {:?}", report.outcome))?;

    let verdict = verify_chain(&path).map_err(|e| e.to_string())?;
    let ChainVerdict::Ok { entries: n, .. } = verdict else { return Err(format!("chain: {verdict:?}")) };
    let bytes = std::fs::read(&path).unwrap();
    let entries: Vec<LogEntry> = bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect();

    // one flip per sampled offset, every line, both ends included
    let mut flips = 0;
    let mut start = 0;
    for (seq, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let len = line.len();
        let mut offsets: Vec<usize> = (0..24).map(|i| i * (len - 1) / 23).collect();
        offsets.dedup();
        for off in offsets {
            let mut tampered = bytes.clone();
            tampered[start + off] ^= 0x01;
            match verify_bytes(&tampered) {
                ChainVerdict::Bad { first_bad_seq, .. } if first_bad_seq == seq as u64 => flips += 1,
                other => return Err(format!("flip at line {seq} offset {off}: {other:?}")),
            }
        }
        start += len;
    }

    // every decision rationale lands in exactly one entry
    let mut wanted: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rationales {
        *wanted.entry(r.as_str()).or_insert(0) += 1;
    }
    for (r, count) in &wanted {
        let found = entries.iter().filter(|e| e.rationale == *r).count();
        ensure(found == *count, || format!("rationale {r:?}: {count} decisions, {found} entries"))?;
    }
    let distinct = wanted.len() == rationales.len();

    // refine iterations: refinement + fine-tune + logging, plus debug attempts
    let mut groups: BTreeMap<(String, u64), Vec<Action>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.iteration >= 1 && e.action != Action::PhaseMarker) {
        groups.entry((e.candidate_id.clone(), e.iteration)).or_default().push(e.action);
    }
    let expected_iters = (report.phase_config.k as u64 * report.phase_config.warmup_iters + report.phase_config.opt_iters) as usize;
    ensure(groups.len() == expected_iters, || format!("{} refine iterations logged, want {expected_iters}", groups.len()))?;
    for ((c, t), actions) in &groups {
        for needed in [Action::Refinement, Action::FineTune, Action::Logging] {
            ensure(actions.contains(&needed), || format!("{c} t={t} lacks {needed:?}"))?;
        }
        let debug = actions.iter().filter(|a| **a == Action::DebugAttempt).count();
        ensure(actions.len() == 3 + debug, || format!("{c} t={t}: {actions:?}"))?;
    }

    let rebuilt = FinalReport::from_audit_log(&entries)?;
    ensure(rebuilt.digest() == report.digest(), || "report rebuilt from the log differs".into())?;
    Ok(format!(
        "{n} entries verified; {flips}/{flips} single-byte flips caught at their entry; {} rationales matched{}; {} refine iterations with >= 3 entries",
        rationales.len(),
        if distinct { " (all distinct)" } else { "" },
        groups.len()
    ))
}

// ---- criterion 5 ----

fn llm_run(task: &TaskSpec, banks: &BankSet, gateway: Gateway) -> FinalReport {
    let params = ChatParams { model_name: "stub-model".into(), ..ChatParams::default() };
    let planner = LlmPlanner::new(Arc::new(gateway), params);
    let executor = ModelRunner::default();
    let log = AuditLog::in_memory();
    let phase = PhaseConfig { k: 2, warmup_iters: 2, opt_iters: 3, seed: 5, ..PhaseConfig::default() };
    let engine = SearchEngine { task, banks, planner: &planner, executor: &executor, log: &log, phase };
    engine.run_full().unwrap()
}

fn criterion_5() -> Outcome {
    let (task, banks) = (ar2_task(), banks());
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = scripted_run(&task, &banks, 42, &dir.path().join("a.log"));
    let (b, _) = scripted_run(&task, &banks, 42, &dir.path().join("b.log"));
    ensure(a.is_success(), || format!("outcome {:?}", a.outcome))?;
    ensure(a.digest() == b.digest(), || format!("scripted digests differ: {} vs {}", a.digest(), b.digest()))?;

    let stub = serve_stub();
    let transcript = dir.path().join("transcript.jsonl");
    let mut live = LiveConfig::new(&stub.url, "sk-acceptance-secret", "stub-model");
    live.backoff = vec![Duration::from_millis(10); 3];
    let recorded = llm_run(&task, &banks, Gateway::record(live, &transcript));
    ensure(recorded.is_success(), || format!("recorded run: {:?}", recorded.outcome))?;
    let calls = stub.requests.lock().unwrap().len();

    let entries = load_transcript(&transcript).map_err(|e| e.to_string())?;
    let r1 = llm_run(&task, &banks, Gateway::replay(entries.clone(), true));
    let r2 = llm_run(&task, &banks, Gateway::replay(entries, true));
    ensure(stub.requests.lock().unwrap().len() == calls, || "replay reached the network".into())?;
    ensure(r1.digest() == r2.digest(), || "replay digests differ".into())?;
    ensure(r1.digest() == recorded.digest(), || "replay digest differs from the recorded run".into())?;
    Ok(format!(
        "scripted digest {}..; llm record/replay digest {}.. over {calls} recorded calls",
        &a.digest()[..12],
        &r1.digest()[..12]
    ))
}

// ---- criterion 6 ----

fn criterion_6() -> Outcome {
    let (task, banks) = (ar2_task(), banks());
    let poison = DirectiveKind::GradientClip;
    let retries = 2u32;
    let mut details = Vec::new();
    for every_attempt in [true, false] {
        let planner = Recording::new(Inject { inner: ScriptedPlanner::new(ModelOrder::Votes), kind: poison, every_attempt });
        let executor = Faulty::new(poison);
        let log = AuditLog::in_memory();
        let phase = PhaseConfig { k: 1, debug_retries: retries, seed: 6, ..PhaseConfig::default() };
        let engine = SearchEngine { task: &task, banks: &banks, planner: &planner, executor: &executor, log: &log, phase };
        let (candidates, _) = engine.stage1_preselect().map_err(|e| e.to_string())?;
        let mut state = engine.warm_start(&candidates[0]).map_err(|e| e.to_string())?.ok_or("warm start failed")?;
        let before = state.incumbent.digest();
        let runs_before = executor.runs.load(Ordering::SeqCst);
        let seen_before = planner.contexts.lock().unwrap().len();
        engine.refine_iteration(&mut state, Phase::Warmup).map_err(|e| e.to_string())?;
        let runs = executor.runs.load(Ordering::SeqCst) - runs_before;
        let point: &TracePoint = state.trace.last().unwrap();

        let entries: Vec<LogEntry> = log.entries().into_iter().filter(|e| e.iteration == 1).collect();
        let attempts: Vec<&LogEntry> = entries.iter().filter(|e| e.action == Action::DebugAttempt).collect();
        let retry_contexts: Vec<_> = planner.contexts.lock().unwrap()[seen_before..]
            .iter()
            .filter(|c| c.attempt > 0)
            .cloned()
            .collect();
        for ctx in &retry_contexts {
            ensure(ctx.rendered.contains(INJECTED), || format!("{} retry context lacks the error", ctx.stage))?;
            ensure(matches!(&ctx.options, StageOptions::Refinement { error: Some(e), .. } if e.contains(INJECTED)), || "retry options lack the error".into())?;
        }
        ensure(!retry_contexts.is_empty(), || "no retry context was built".into())?;
        ensure(retry_contexts.iter().all(|c| c.stage == Stage::Refinement), || "retries left the refinement stage".into())?;
        ensure(attempts.first().is_some_and(|e| e.payload["attempt"] == 0), || "failed run not logged as attempt 0".into())?;
        ensure(
            attempts.iter().all(|e| e.payload["attempt"] == 0 || e.payload["error"].as_str().is_some_and(|x| x.contains(INJECTED)) || e.payload["status"] == "success"),
            || "attempt entry without its error".into(),
        )?;
        let logging = entries.iter().find(|e| e.action == Action::Logging).ok_or("no logging entry")?;

        if every_attempt {
            ensure(point.debug_attempts == retries, || format!("{} retries, want {retries}", point.debug_attempts))?;
            ensure(runs == 1 + retries as usize, || format!("{runs} executions"))?;
            ensure(retry_contexts.len() == retries as usize, || format!("{} retry contexts", retry_contexts.len()))?;
            ensure(point.verdict == Verdict::Rejected, || "not rejected".into())?;
            ensure(state.incumbent.digest() == before, || "incumbent changed".into())?;
            ensure(point.incumbent_digest.as_deref() == Some(before.as_str()), || "trace digest changed".into())?;
            ensure(logging.payload["reverted_to"] == Value::String(before.clone()), || "revert not logged".into())?;
            ensure(attempts.len() == 1 + retries as usize, || format!("{} attempt entries", attempts.len()))?;
            ensure(logging.payload["error"].as_str().is_some_and(|e| e.contains(INJECTED)), || "final error not logged".into())?;
            details.push(format!("persistent fault: {retries} retries, error in every retry context, reverted, {} attempt entries", attempts.len()));
        } else {
            ensure(point.debug_attempts == 1, || format!("{} retries, want 1", point.debug_attempts))?;
            ensure(point.status == "success", || format!("repair ended with {}", point.status))?;
            ensure(runs == 2, || format!("{runs} executions"))?;
            ensure(attempts.len() == 2, || format!("{} attempt entries", attempts.len()))?;
            details.push("one-off fault: repaired after 1 retry, 2 attempt entries".to_string());
        }
    }
    Ok(details.join("; "))
}

// ---- criterion 7 ----

fn criterion_7() -> Outcome {
    let (task, banks) = (ar2_task(), banks());
    let dir = tempfile::tempdir().unwrap();
    let mut ok = 0;
    let mut losses = Vec::new();
    for seed in 1..=5 {
        let (report, _) = scripted_run(&task, &banks, seed, &dir.path().join(format!("run-{seed}.log")));
        if report.is_success() {
            ok += 1;
            losses.push(format!("{:.4}", report.final_loss.unwrap_or(f64::NAN)));
        }
    }
    ensure(ok == 5, || format!("{ok}/5 runs succeeded"))?;
    Ok(format!("5/5 runs succeeded (final rmse {})", losses.join(", ")))
}

// ---- criterion 8 ----

fn criterion_8() -> Outcome {
    let (task, banks) = (gauss_task(), banks());
    let model = banks.model("gaussian_gen").ok_or("gaussian_gen missing from the bank")?;
    let config = CandidateConfig::defaults_for(model, 8);
    let result = ModelRunner::default().run(&config, &task, &banks);
    ensure(result.is_success(), || format!("run failed: {}", result.summary()))?;

    // two disjoint real samples of the raw file: the last 400 training rows
    // and the 400 test rows, cut into the task's windows
    let rows = read_csv(&root().join("fixtures/gauss/gauss.csv"));
    let (q, d) = (task.dataset.window.horizon, rows[0].len());
    let n_test = (rows.len() as f64 * 0.2).round() as usize;
    let cut = |r: &[Vec<f64>]| -> Vec<Array2<f64>> {
        r.chunks_exact(q).map(|c| Array2::from_shape_fn((q, d), |(i, j)| c[i][j])).collect()
    };
    let test = cut(&rows[rows.len() - n_test..]);
    let other = cut(&rows[rows.len() - 2 * n_test..rows.len() - n_test]);
    let cov_base = (oracle_cov(&test) - oracle_cov(&other)).norm();
    let corr_base = (oracle_corr(&test) - oracle_corr(&other)).norm();

    let cov = result.metrics["covariance_score"];
    let corr = result.metrics["correlation_score"];
    ensure(cov <= 2.0 * cov_base, || format!("covariance {cov} > 2 x {cov_base}"))?;
    ensure(corr <= 2.0 * corr_base, || format!("correlation {corr} > 2 x {corr_base}"))?;

    let segs = make_segments(&task.dataset.test, q, task.dataset.window.stride).map_err(|e| e.to_string())?;
    let ids = vec!["marginal_score".to_string()];
    let self_score = evaluate_generation(&ids, &segs, &segs, &RiskParams::default()).map_err(|e| e.to_string())?;
    ensure(self_score["marginal_score"] == 0.0, || format!("marginal(real, real) = {}", self_score["marginal_score"]))?;
    Ok(format!(
        "covariance {cov:.4} <= 2 x {cov_base:.4}; correlation {corr:.4} <= 2 x {corr_base:.4}; marginal(real, real) = 0"
    ))
}

// ---- criterion 9 ----

fn small_task(seed: u64) -> TaskSpec {
    let frame = tsloop::synth::ar2(240, 2, seed).unwrap();
    let (train, test) = frame.split_holdout(0.25).unwrap();
    TaskSpec {
        id: format!("ar2-small-{seed}"),
        kind: TaskKind::Forecasting,
        description: ar2_task().description,
        dataset: DatasetSplit::new(train, test, WindowSpec::new(5, 1, 1).unwrap()).unwrap(),
        criteria: vec!["rmse".into(), "mae".into()],
        primary_criterion: "rmse".into(),
        direction: Default::default(),
    }
}

fn criterion_9() -> Outcome {
    let banks = banks();
    let (mut rejected, mut points) = (0, 0);
    for run in 0..100u64 {
        let task = small_task(1000 + run);
        let planner = SeededRandomPlanner::new(run);
        let executor = ModelRunner::default();
        let log = AuditLog::in_memory();
        let phase = PhaseConfig { k: 2, warmup_iters: 2, opt_iters: 3, debug_retries: 1, seed: run, ..PhaseConfig::default() };
        let engine = SearchEngine { task: &task, banks: &banks, planner: &planner, executor: &executor, log: &log, phase };
        let report = engine.run_full().map_err(|e| e.to_string())?;
        ensure(report.is_success(), || format!("run {run}: {:?}", report.outcome))?;

        let logs: Vec<LogEntry> = log.entries().into_iter().filter(|e| e.action == Action::Logging).collect();
        let mut by_candidate: BTreeMap<&str, Vec<&TracePoint>> = BTreeMap::new();
        for p in &report.loss_trace {
            by_candidate.entry(&p.candidate_id).or_default().push(p);
        }
        for (id, trace) in by_candidate {
            for w in trace.windows(2) {
                let (prev, cur) = (w[0], w[1]);
                points += 1;
                if let (Some(a), Some(b)) = (prev.incumbent_loss, cur.incumbent_loss) {
                    ensure(b <= a, || format!("run {run} {id} t={}: incumbent loss rose {a} -> {b}", cur.iteration))?;
                }
                if cur.verdict == Verdict::Rejected && prev.incumbent_digest.is_some() {
                    rejected += 1;
                    ensure(cur.incumbent_digest == prev.incumbent_digest, || {
                        format!("run {run} {id} t={}: rejected iteration moved the incumbent", cur.iteration)
                    })?;
                    let entry = logs
                        .iter()
                        .find(|e| e.candidate_id == id && e.iteration == cur.iteration)
                        .ok_or_else(|| format!("run {run} {id} t={}: no logging entry", cur.iteration))?;
                    ensure(entry.payload["reverted_to"].as_str() == prev.incumbent_digest.as_deref(), || {
                        format!("run {run} {id} t={}: reverted_to mismatch", cur.iteration)
                    })?;
                }
            }
        }
    }
    ensure(rejected > 0, || "no rejected iteration exercised".into())?;
    Ok(format!("100 runs, {points} transitions, {rejected} rejected iterations all restored the prior digest"))
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(reason) => {
                failed += 1;
                println!("criterion {n}: FAIL  {reason}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
