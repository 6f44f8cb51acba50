use ndarray::{ArrayView2, Zip};

use super::{MetricError, MetricValue};
use crate::scalar::Real;

/// Truth entries with magnitude below this make MAPE undefined.
pub const MAPE_GUARD: f64 = 1e-8;
/// sMAPE terms whose denominator falls below this contribute zero.
pub const SMAPE_GUARD: f64 = 1e-12;

fn check<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<(), MetricError> {
    if pred.dim() != truth.dim() {
        return Err(MetricError::ShapeMismatch(pred.dim(), truth.dim()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if pred.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Per-column mean of `f(pred, truth)`; the overall value is the mean of columns.
fn columnwise<T: Real>(
    id: &str,
    pred: ArrayView2<T>,
    truth: ArrayView2<T>,
    f: impl Fn(T, T) -> T,
) -> MetricValue<T> {
    let n = T::from_count(pred.nrows());
    let detail = pred
        .columns()
        .into_iter()
        .zip(truth.columns())
        .map(|(p, t)| {
            let mut acc = T::zero();
            Zip::from(&p).and(&t).for_each(|&p, &t| acc += f(p, t));
            acc / n
        })
        .collect();
    MetricValue::with_detail(id, detail)
}

pub fn mse<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<MetricValue<T>, MetricError> {
    check(pred, truth)?;
    Ok(columnwise("mse", pred, truth, |p, t| (p - t) * (p - t)))
}

pub fn rmse<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<MetricValue<T>, MetricError> {
    let m = mse(pred, truth)?;
    Ok(MetricValue::new("rmse", m.value.sqrt()))
}

pub fn mae<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<MetricValue<T>, MetricError> {
    check(pred, truth)?;
    Ok(columnwise("mae", pred, truth, |p, t| (p - t).abs()))
}

pub fn mape<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<MetricValue<T>, MetricError> {
    check(pred, truth)?;
    let guard = T::lit(MAPE_GUARD);
    if let Some(i) = truth.iter().position(|a| a.abs() < guard) {
        return Err(MetricError::MapeDenominatorZero(i));
    }
    let hundred = T::lit(100.0);
    Ok(columnwise("mape", pred, truth, |f, a| hundred * (f - a).abs() / a.abs()))
}

pub fn smape<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<MetricValue<T>, MetricError> {
    check(pred, truth)?;
    let guard = T::lit(SMAPE_GUARD);
    let two_hundred = T::lit(200.0);
    Ok(columnwise("smape", pred, truth, |f, a| {
        let denom = f.abs() + a.abs();
        if denom < guard {
            T::zero()
        } else {
            two_hundred * (f - a).abs() / denom
        }
    }))
}
