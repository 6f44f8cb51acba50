//! In-process reference models.

use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::directives::{apply_directives, EffectiveSettings, Normalization};
use super::linalg::cholesky_jittered;
use super::{CandidateConfig, NativeModel, RunResult, RunStatus};
use crate::metrics::{evaluate_forecast, evaluate_generation, RiskParams};
use crate::task::{make_segments, make_windows, TaskKind, TaskSpec};

/// Per-feature affine transform fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub kind: Normalization,
    offset: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(kind: Normalization, rows: &Array2<f64>) -> Self {
        let d = rows.ncols();
        let mut offset = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for col in rows.columns() {
            let (o, s) = match kind {
                Normalization::Zscore => {
                    let n = col.len().max(1) as f64;
                    let m = col.sum() / n;
                    let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                    (m, var.sqrt())
                }
                Normalization::Minmax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                }
            };
            offset.push(o);
            // constant columns pass through shifted but unscaled
            scale.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        }
        Self { kind, offset, scale }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.offset[j]) / self.scale[j]);
        }
        out
    }

    pub fn inverse(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.scale[j] + self.offset[j]);
        }
        out
    }
}

fn maybe_transform(scaler: Option<&Scaler>, x: &Array2<f64>) -> Array2<f64> {
    scaler.map(|s| s.transform(x)).unwrap_or_else(|| x.clone())
}

fn maybe_inverse(scaler: Option<&Scaler>, x: &Array2<f64>) -> Array2<f64> {
    scaler.map(|s| s.inverse(x)).unwrap_or_else(|| x.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdLinearParams {
    pub lr: f64,
    pub epochs: usize,
    pub val_fraction: f64,
}

/// Loss history of one gradient descent fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitReport {
    /// Training MSE at the start of each epoch, before its update.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub final_lr: f64,
}

#[derive(Debug)]
enum Failure {
    Train(String),
    Timeout,
    Invalid(String),
}

/// Linear map with bias; the last row of `weights` is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GdLinear {
    pub weights: Array2<f64>,
}

fn with_bias(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(s![.., ..x.ncols()]).assign(x);
    out
}

fn mean_sq(r: &Array2<f64>) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
}

impl GdLinear {
    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        with_bias(x).dot(&self.weights)
    }

    /// Full-batch gradient descent on mean squared error. Rows of `x` and `y`
    /// are in chronological order; the validation tail is only carved out when
    /// early stopping or the plateau schedule needs it.
    pub fn fit(
        x: &Array2<f64>,
        y: &Array2<f64>,
        params: &GdLinearParams,
        settings: &EffectiveSettings,
        rng: &mut ChaCha8Rng,
        deadline: Option<Instant>,
    ) -> Result<(Self, FitReport), String> {
        Self::fit_inner(x, y, params, settings, rng, deadline).map_err(|f| match f {
            Failure::Train(m) | Failure::Invalid(m) => m,
            Failure::Timeout => "timeout".into(),
        })
    }

    fn fit_inner(
        x: &Array2<f64>,
        y: &Array2<f64>,
        params: &GdLinearParams,
        settings: &EffectiveSettings,
        rng: &mut ChaCha8Rng,
        deadline: Option<Instant>,
    ) -> Result<(Self, FitReport), Failure> {
        let n = x.nrows();
        if n == 0 || y.nrows() != n {
            return Err(Failure::Train("no training windows".into()));
        }
        let wants_val = settings.early_stopping.is_some() || settings.lr_plateau.is_some();
        let mut n_val = if wants_val { (n as f64 * params.val_fraction).round() as usize } else { 0 };
        if n_val >= n {
            n_val = 0;
        }
        let n_tr = n - n_val;
        let xa = with_bias(&x.slice(s![..n_tr, ..]).to_owned());
        let ya = y.slice(s![..n_tr, ..]).to_owned();
        let xv = with_bias(&x.slice(s![n_tr.., ..]).to_owned());
        let yv = y.slice(s![n_tr.., ..]).to_owned();

        let (rows, cols) = (xa.ncols(), ya.ncols());
        let mut w = Array2::from_shape_fn((rows, cols), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
        let mut lr = params.lr;
        let mut report = FitReport::default();
        let scale = 2.0 / (n_tr * cols) as f64;

        let mut best_val = f64::INFINITY;
        let mut best_w = w.clone();
        let mut since_best = 0u32;
        let mut best_monitor = f64::INFINITY;
        let mut since_monitor = 0u32;

        for epoch in 0..params.epochs {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(Failure::Timeout);
            }
            let input = match settings.jitter {
                Some(sigma) if sigma > 0.0 => {
                    let mut j = xa.clone();
                    j.slice_mut(s![.., ..rows - 1])
                        .mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
                    j
                }
                _ => xa.clone(),
            };
            let resid = input.dot(&w) - &ya;
            let loss = mean_sq(&resid);
            if !loss.is_finite() {
                return Err(Failure::Train(format!("loss diverged to {loss} at epoch {epoch}")));
            }
            report.train_loss.push(loss);

            let mut grad = input.t().dot(&resid) * scale;
            if let Some(lambda) = settings.weight_decay {
                let mut g = grad.slice_mut(s![..rows - 1, ..]);
                g.scaled_add(lambda, &w.slice(s![..rows - 1, ..]));
            }
            if let Some(max_norm) = settings.gradient_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max_norm {
                    grad *= max_norm / norm;
                }
            }
            w.scaled_add(-lr, &grad);
            report.epochs_run = epoch + 1;

            let monitored = if n_val > 0 {
                let v = mean_sq(&(xv.dot(&w) - &yv));
                if !v.is_finite() {
                    return Err(Failure::Train(format!("validation loss diverged at epoch {epoch}")));
                }
                report.val_loss.push(v);
                v
            } else {
                loss
            };

            if let Some((factor, patience)) = settings.lr_plateau {
                if monitored < best_monitor {
                    best_monitor = monitored;
                    since_monitor = 0;
                } else {
                    since_monitor += 1;
                    if since_monitor >= patience {
                        lr *= factor;
                        since_monitor = 0;
                    }
                }
            }
            if let Some(patience) = settings.early_stopping {
                if n_val > 0 {
                    if monitored < best_val {
                        best_val = monitored;
                        best_w.assign(&w);
                        report.best_epoch = Some(epoch);
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= patience {
                            break;
                        }
                    }
                }
            }
        }
        if settings.early_stopping.is_some() && report.best_epoch.is_some() {
            w = best_w;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Failure::Train("weights became non-finite".into()));
        }
        report.final_lr = lr;
        Ok((Self { weights: w }, report))
    }
}

fn flatten(windows: &[Array2<f64>]) -> Array2<f64> {
    let width = windows.first().map(|w| w.len()).unwrap_or(0);
    let mut out = Array2::zeros((windows.len(), width));
    for (i, w) in windows.iter().enumerate() {
        out.row_mut(i).assign(&Array1::from_iter(w.iter().copied()));
    }
    out
}

fn unflatten(row: ndarray::ArrayView1<f64>, rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, d), row.to_vec()).expect("row length is rows * d")
}

fn real_param(config: &CandidateConfig, name: &str) -> Result<f64, Failure> {
    config
        .hyperparams
        .get(name)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Failure::Train(format!("hyperparameter `{name}` missing or not numeric")))
}

fn artifact_digest(windows: &[Array2<f64>]) -> String {
    let mut h = Sha256::new();
    for w in windows {
        h.update((w.nrows() as u64).to_le_bytes());
        h.update((w.ncols() as u64).to_le_bytes());
        for v in w.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn requested(task: &TaskSpec) -> Vec<String> {
    let mut ids = task.criteria.clone();
    if !ids.contains(&task.primary_criterion) {
        ids.push(task.primary_criterion.clone());
    }
    ids
}

fn forecast(
    model: NativeModel,
    config: &CandidateConfig,
    task: &TaskSpec,
    settings: &EffectiveSettings,
    rng: &mut ChaCha8Rng,
    deadline: Instant,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>), Failure> {
    let split = &task.dataset;
    let window = &split.window;
    let test = make_windows(&split.test, window).map_err(|e| Failure::Train(e.to_string()))?;
    let scaler = settings.normalization.map(|k| Scaler::fit(k, split.train.values()));
    let scaler = scaler.as_ref();
    let d = split.dim();

    let preds = match model {
        NativeModel::NaiveLast => test
            .iter()
            .map(|(input, _)| {
                let last = input.row(input.nrows() - 1);
                Array2::from_shape_fn((window.horizon, d), |(_, j)| last[j])
            })
            .collect(),
        NativeModel::ExpSmoothing => {
            let alpha = real_param(config, "alpha")?;
            test.iter()
                .map(|(input, _)| {
                    let level: Vec<f64> = input
                        .columns()
                        .into_iter()
                        .map(|col| col.iter().skip(1).fold(col[0], |l, &x| alpha * x + (1.0 - alpha) * l))
                        .collect();
                    Array2::from_shape_fn((window.horizon, d), |(_, j)| level[j])
                })
                .collect()
        }
        NativeModel::GdLinear => {
            let params = GdLinearParams {
                lr: real_param(config, "lr")?,
                epochs: real_param(config, "epochs")? as usize,
                val_fraction: real_param(config, "val_fraction")?,
            };
            let train = make_windows(&split.train, window).map_err(|e| Failure::Train(e.to_string()))?;
            let xs: Vec<Array2<f64>> = train.iter().map(|(x, _)| maybe_transform(scaler, x)).collect();
            let ys: Vec<Array2<f64>> = train.iter().map(|(_, y)| maybe_transform(scaler, y)).collect();
            let (fitted, _) =
                GdLinear::fit_inner(&flatten(&xs), &flatten(&ys), &params, settings, rng, Some(deadline))?;
            let tx: Vec<Array2<f64>> = test.iter().map(|(x, _)| maybe_transform(scaler, x)).collect();
            let out = fitted.predict(&flatten(&tx));
            out.axis_iter(Axis(0))
                .map(|row| maybe_inverse(scaler, &unflatten(row, window.horizon, d)))
                .collect()
        }
        other => return Err(Failure::Train(format!("{} is not a forecasting model", other.name()))),
    };
    let truth = test.into_iter().map(|(_, y)| y).collect();
    Ok((preds, truth))
}

fn generate(
    model: NativeModel,
    config: &CandidateConfig,
    task: &TaskSpec,
    settings: &EffectiveSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>), Failure> {
    let split = &task.dataset;
    let len = split.window.horizon;
    let stride = split.window.stride;
    let real = make_segments(&split.test, len, stride).map_err(|e| Failure::Train(e.to_string()))?;
    let n_fake = real.len();
    let d = split.dim();
    let train_rows = split.train.values();

    let fake = match model {
        NativeModel::GaussianGen => {
            let scaler = settings.normalization.map(|k| Scaler::fit(k, train_rows));
            let scaler = scaler.as_ref();
            let segs = make_segments(&split.train, len, stride).map_err(|e| Failure::Train(e.to_string()))?;
            if segs.len() < 2 {
                return Err(Failure::Train("need at least two training windows to fit a covariance".into()));
            }
            let segs: Vec<Array2<f64>> = segs.iter().map(|s| maybe_transform(scaler, s)).collect();
            let x = flatten(&segs);
            let n = x.nrows() as f64;
            let mu = x.mean_axis(Axis(0)).expect("non-empty");
            let centered = &x - &mu;
            let mut cov = centered.t().dot(&centered) / (n - 1.0);
            if let Some(lambda) = settings.cov_shrinkage {
                let dim = cov.nrows();
                let target = cov.diag().sum() / dim as f64;
                cov *= 1.0 - lambda;
                for i in 0..dim {
                    cov[[i, i]] += lambda * target;
                }
            }
            let (l, _) = cholesky_jittered(&cov)
                .ok_or_else(|| Failure::Train("covariance is singular even after jitter".into()))?;
            (0..n_fake)
                .map(|_| {
                    let z = Array1::from_shape_fn(mu.len(), |_| rng.sample::<f64, _>(StandardNormal));
                    let v = &mu + &l.dot(&z);
                    maybe_inverse(scaler, &unflatten(v.view(), len, d))
                })
                .collect()
        }
        NativeModel::BlockBootstrapGen => {
            let t = train_rows.nrows();
            let block = (real_param(config, "block_len")? as usize).clamp(1, t);
            let stds: Vec<f64> = train_rows.columns().into_iter().map(|c| c.std(0.0)).collect();
            (0..n_fake)
                .map(|_| {
                    let mut out = Array2::zeros((len, d));
                    let mut filled = 0;
                    while filled < len {
                        let start = rng.random_range(0..=t - block);
                        let take = block.min(len - filled);
                        out.slice_mut(s![filled..filled + take, ..])
                            .assign(&train_rows.slice(s![start..start + take, ..]));
                        filled += take;
                    }
                    if let Some(sigma) = settings.jitter.filter(|s| *s > 0.0) {
                        for ((_, j), v) in out.indexed_iter_mut() {
                            *v += sigma * stds[j] * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    out
                })
                .collect()
        }
        other => return Err(Failure::Train(format!("{} is not a generation model", other.name()))),
    };
    Ok((fake, real))
}

/// Fit and score a native model. Failures come back as a status, never a panic.
pub fn run_native(model: NativeModel, config: &CandidateConfig, task: &TaskSpec, timeout: Duration) -> RunResult {
    let started = Instant::now();
    let settings = apply_directives(&config.directives, model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let produced = match task.kind {
        TaskKind::Forecasting => forecast(model, config, task, &settings, &mut rng, started + timeout),
        TaskKind::Generation => generate(model, config, task, &settings, &mut rng),
    };
    let ids = requested(task);
    let scored = produced.and_then(|(output, reference)| {
        if output.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Failure::Invalid("non-finite values in model output".into()));
        }
        let metrics = match task.kind {
            TaskKind::Forecasting => evaluate_forecast(&ids, &output, &reference, &RiskParams::default()),
            TaskKind::Generation => evaluate_generation(&ids, &reference, &output, &RiskParams::default()),
        }
        .map_err(|e| Failure::Invalid(format!("metric evaluation failed: {e}")))?;
        Ok((metrics, artifact_digest(&output)))
    });
    let mut result = match scored {
        Ok((metrics, digest)) => {
            let mut r = RunResult::success(metrics, task, started);
            r.artifact_digest = Some(digest);
            r
        }
        Err(Failure::Train(message)) => {
            RunResult::failed(RunStatus::TrainError { message, log_excerpt: String::new() }, started)
        }
        Err(Failure::Timeout) => RunResult::failed(RunStatus::Timeout, started),
        Err(Failure::Invalid(message)) => RunResult::failed(RunStatus::InvalidOutput { message }, started),
    };
    result.warnings = settings.warnings;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::banks::HyperValue;
    use crate::task::{DatasetSplit, Direction, TimeSeriesFrame, WindowSpec};

    fn frame(values: Array2<f64>) -> TimeSeriesFrame {
        let names = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        TimeSeriesFrame::new(values, names, None).unwrap()
    }

    fn task(kind: TaskKind, values: Array2<f64>, p: usize, q: usize, criteria: &[&str]) -> TaskSpec {
        let full = frame(values);
        let (train, test) = full.split_holdout(0.2).unwrap();
        TaskSpec {
            id: "t".into(),
            kind,
            description: "test task".into(),
            dataset: DatasetSplit::new(train, test, WindowSpec::new(p, q, 1).unwrap()).unwrap(),
            criteria: criteria.iter().map(|s| s.to_string()).collect(),
            primary_criterion: criteria[0].to_string(),
            direction: Direction::Minimize,
        }
    }

    fn config(model: &str, hp: &[(&str, HyperValue)]) -> CandidateConfig {
        CandidateConfig {
            model_id: model.into(),
            hyperparams: hp.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            directives: vec![],
            freeform_patch: None,
            seed: 3,
        }
    }

    #[test]
    fn naive_last_on_constant_series() {
        let t = task(TaskKind::Forecasting, Array2::from_elem((40, 2), 3.5), 4, 2, &["rmse", "mae"]);
        let r = run_native(NativeModel::NaiveLast, &config("naive_last", &[]), &t, Duration::from_secs(5));
        assert!(r.is_success(), "{r:?}");
        assert_eq!(r.primary_loss, Some(0.0));
    }

    #[test]
    fn exp_smoothing_alpha_one_is_naive() {
        let v = Array2::from_shape_fn((60, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 + 1.0);
        let t = task(TaskKind::Forecasting, v, 5, 1, &["mse"]);
        let a = run_native(
            NativeModel::ExpSmoothing,
            &config("exp_smoothing", &[("alpha", HyperValue::Real(1.0))]),
            &t,
            Duration::from_secs(5),
        );
        let b = run_native(NativeModel::NaiveLast, &config("naive_last", &[]), &t, Duration::from_secs(5));
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn scaler_round_trip() {
        let x = Array2::from_shape_fn((20, 3), |(i, j)| (i as f64).sin() * (j + 1) as f64 + 4.0);
        for kind in [Normalization::Zscore, Normalization::Minmax] {
            let s = Scaler::fit(kind, &x);
            let back = s.inverse(&s.transform(&x));
            let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn nan_loss_is_train_error() {
        let v = Array2::from_shape_fn((60, 1), |(i, _)| i as f64 * 100.0);
        let t = task(TaskKind::Forecasting, v, 3, 1, &["mse"]);
        let c = config(
            "gd_linear",
            &[
                ("lr", HyperValue::Real(1.0)),
                ("epochs", HyperValue::Int(500)),
                ("val_fraction", HyperValue::Real(0.2)),
            ],
        );
        let r = run_native(NativeModel::GdLinear, &c, &t, Duration::from_secs(5));
        assert_eq!(r.status_name(), "train_error");
    }

    #[test]
    fn block_bootstrap_copies_training_rows() {
        let v = Array2::from_shape_fn((50, 2), |(i, j)| (i * 2 + j) as f64 + 1.0);
        let t = task(TaskKind::Generation, v, 1, 4, &["covariance_score"]);
        let c = config("block_bootstrap_gen", &[("block_len", HyperValue::Int(4))]);
        let r = run_native(NativeModel::BlockBootstrapGen, &c, &t, Duration::from_secs(5));
        assert!(r.is_success(), "{r:?}");
    }
}
