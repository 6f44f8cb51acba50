//! Evaluation measure bank: forecasting errors, risk/trading differences and
//! generation fidelity scores. Every metric is a non-negative loss to minimize.

mod fidelity;
mod forecast;
mod risk;

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::scalar::Real;
use crate::task::TaskKind;

pub use fidelity::{autocorrelation_score, correlation_score, covariance_score, marginal_score, DEFAULT_BINS};
pub use forecast::{mae, mape, mse, rmse, smape, MAPE_GUARD, SMAPE_GUARD};
pub use risk::{
    expected_shortfall, metric_difference, returns_from_prices, sharpe, value_at_risk, ReturnKind,
    RiskMetric, RiskParams,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty input")]
    EmptyInput,
    #[error("MAPE undefined: truth entry {0} is (near) zero")]
    MapeDenominatorZero(usize),
    #[error("non-positive price at index {0}")]
    NonPositivePrice(usize),
    #[error("series too short: {0}")]
    TooShort(String),
    #[error("zero volatility")]
    ZeroVolatility,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("feature {0} has zero variance")]
    DegenerateFeature(usize),
    #[error("lag {lag} outside 1..={max}")]
    LagOutOfRange { lag: usize, max: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("metric `{metric}` does not apply to {kind} tasks")]
    KindMismatch { metric: String, kind: TaskKind },
}

/// Result of one metric: the aggregate value and an optional per-feature
/// breakdown whose plain mean equals `value`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValue<T = f64> {
    pub id: String,
    pub value: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Vec<T>>,
}

impl<T: Real> MetricValue<T> {
    pub(crate) fn new(id: &str, value: T) -> Self {
        Self { id: id.to_string(), value, detail: None }
    }

    pub(crate) fn with_detail(id: &str, detail: Vec<T>) -> Self {
        let value = mean(&detail);
        Self { id: id.to_string(), value, detail: Some(detail) }
    }
}

pub(crate) fn mean<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_count(xs.len())
}

/// Static description of one implemented metric.
#[derive(Debug, Clone, Copy)]
pub struct MetricInfo {
    pub id: &'static str,
    pub kind: TaskKind,
    pub summary: &'static str,
}

/// Every metric id the engine can compute.
pub const IMPLEMENTED: &[MetricInfo] = &[
    MetricInfo { id: "mse", kind: TaskKind::Forecasting, summary: "mean squared error over all cells" },
    MetricInfo { id: "rmse", kind: TaskKind::Forecasting, summary: "root mean squared error over all cells" },
    MetricInfo { id: "mae", kind: TaskKind::Forecasting, summary: "mean absolute error over all cells" },
    MetricInfo { id: "mape", kind: TaskKind::Forecasting, summary: "mean absolute percentage error (%)" },
    MetricInfo { id: "smape", kind: TaskKind::Forecasting, summary: "symmetric MAPE on the 0-200 scale" },
    MetricInfo { id: "sharpe_diff", kind: TaskKind::Forecasting, summary: "|Sharpe(pred) - Sharpe(true)| on one-step returns" },
    MetricInfo { id: "var_diff", kind: TaskKind::Forecasting, summary: "|VaR(pred) - VaR(true)| on one-step returns" },
    MetricInfo { id: "es_diff", kind: TaskKind::Forecasting, summary: "|ES(pred) - ES(true)| on one-step returns" },
    MetricInfo { id: "marginal_score", kind: TaskKind::Generation, summary: "l2 distance of per-feature histograms" },
    MetricInfo { id: "correlation_score", kind: TaskKind::Generation, summary: "Frobenius distance of cross-feature correlations" },
    MetricInfo { id: "covariance_score", kind: TaskKind::Generation, summary: "Frobenius distance of covariance matrices" },
    MetricInfo { id: "autocorrelation_score", kind: TaskKind::Generation, summary: "l2 distance of per-feature autocorrelations" },
    MetricInfo { id: "tail_var_diff", kind: TaskKind::Generation, summary: "|VaR(fake) - VaR(real)| on within-window returns" },
    MetricInfo { id: "tail_es_diff", kind: TaskKind::Generation, summary: "|ES(fake) - ES(real)| on within-window returns" },
];

pub fn metric_info(id: &str) -> Option<&'static MetricInfo> {
    IMPLEMENTED.iter().find(|m| m.id == id)
}

fn check_kind(id: &str, kind: TaskKind) -> Result<(), MetricError> {
    match metric_info(id) {
        None => Err(MetricError::UnknownMetric(id.to_string())),
        Some(info) if info.kind != kind => Err(MetricError::KindMismatch { metric: id.to_string(), kind }),
        Some(_) => Ok(()),
    }
}

fn stack<T: Real>(windows: &[Array2<T>]) -> Result<Array2<T>, MetricError> {
    if windows.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let views: Vec<ArrayView2<T>> = windows.iter().map(|w| w.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| MetricError::DimensionMismatch(e.to_string()))
}

/// Series of first-step values per feature across consecutive windows.
fn first_step_series<T: Real>(windows: &[Array2<T>], feature: usize) -> Vec<T> {
    windows.iter().map(|w| w[[0, feature]]).collect()
}

/// Score forecasts against truth windows. Error metrics pool every
/// (window, step, feature) cell; trading metrics compare first-step
/// price paths per feature and average over features.
pub fn evaluate_forecast<T: Real>(
    ids: &[String],
    pred: &[Array2<T>],
    truth: &[Array2<T>],
    params: &RiskParams<T>,
) -> Result<BTreeMap<String, T>, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::DimensionMismatch(format!(
            "{} predicted windows vs {} truth windows",
            pred.len(),
            truth.len()
        )));
    }
    let p = stack(pred)?;
    let t = stack(truth)?;
    let mut out = BTreeMap::new();
    for id in ids {
        check_kind(id, TaskKind::Forecasting)?;
        let value = match id.as_str() {
            "mse" => mse(p.view(), t.view())?.value,
            "rmse" => rmse(p.view(), t.view())?.value,
            "mae" => mae(p.view(), t.view())?.value,
            "mape" => mape(p.view(), t.view())?.value,
            "smape" => smape(p.view(), t.view())?.value,
            "sharpe_diff" | "var_diff" | "es_diff" => {
                let metric = match id.as_str() {
                    "sharpe_diff" => RiskMetric::Sharpe,
                    "var_diff" => RiskMetric::Var,
                    _ => RiskMetric::Es,
                };
                let per_feature = (0..p.ncols())
                    .map(|j| {
                        metric_difference(
                            metric,
                            &first_step_series(pred, j),
                            &first_step_series(truth, j),
                            params,
                        )
                        .map(|m| m.value)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                mean(&per_feature)
            }
            other => return Err(MetricError::UnknownMetric(other.to_string())),
        };
        out.insert(id.clone(), value);
    }
    Ok(out)
}

/// Within-window simple returns of one feature, pooled over windows.
fn pooled_window_returns<T: Real>(windows: &[Array2<T>], feature: usize) -> Result<Vec<T>, MetricError> {
    let mut out = Vec::new();
    for w in windows {
        let col: Vec<T> = w.column(feature).to_vec();
        out.extend(returns_from_prices(&col)?);
    }
    Ok(out)
}

/// Score synthetic windows against real ones.
pub fn evaluate_generation<T: Real>(
    ids: &[String],
    real: &[Array2<T>],
    fake: &[Array2<T>],
    params: &RiskParams<T>,
) -> Result<BTreeMap<String, T>, MetricError> {
    let mut out = BTreeMap::new();
    for id in ids {
        check_kind(id, TaskKind::Generation)?;
        let value = match id.as_str() {
            "marginal_score" => marginal_score(real, fake, DEFAULT_BINS)?.value,
            "correlation_score" => correlation_score(real, fake)?.value,
            "covariance_score" => covariance_score(real, fake)?.value,
            "autocorrelation_score" => autocorrelation_score(real, fake, None)?.value,
            "tail_var_diff" | "tail_es_diff" => {
                let d = real.first().ok_or(MetricError::EmptyInput)?.ncols();
                let mut per_feature = Vec::with_capacity(d);
                for j in 0..d {
                    let r = pooled_window_returns(real, j)?;
                    let f = pooled_window_returns(fake, j)?;
                    let diff = if id == "tail_var_diff" {
                        value_at_risk(&r, params)? - value_at_risk(&f, params)?
                    } else {
                        expected_shortfall(&r, params)? - expected_shortfall(&f, params)?
                    };
                    per_feature.push(diff.abs());
                }
                mean(&per_feature)
            }
            other => return Err(MetricError::UnknownMetric(other.to_string())),
        };
        out.insert(id.clone(), value);
    }
    Ok(out)
}
