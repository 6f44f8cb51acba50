//! Distributional fidelity of synthetic windows: each score is an l2 (or
//! Frobenius) distance between a statistic of the real set and the same
//! statistic of the fake set.

use ndarray::Array2;

use super::{MetricError, MetricValue};
use crate::scalar::Real;

pub const DEFAULT_BINS: usize = 50;

/// Shared `(q, d)` of both sets.
fn common_shape<T: Real>(real: &[Array2<T>], fake: &[Array2<T>]) -> Result<(usize, usize), MetricError> {
    let first = real.first().ok_or(MetricError::EmptyInput)?;
    if fake.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let shape = first.dim();
    if let Some(w) = real.iter().chain(fake).find(|w| w.dim() != shape) {
        return Err(MetricError::DimensionMismatch(format!(
            "window shape {:?} differs from {shape:?}",
            w.dim()
        )));
    }
    if real.iter().chain(fake).any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(MetricError::NonFinite);
    }
    Ok(shape)
}

fn histogram<T: Real>(values: &[T], lo: T, hi: T, bins: usize) -> Vec<T> {
    let mut counts = vec![0usize; bins];
    let span = hi - lo;
    let nb = T::from_count(bins);
    for &v in values {
        let idx = if span > T::zero() {
            ((v - lo) / span * nb).floor().to_usize().unwrap_or(0).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    let total = T::from_count(values.len());
    counts.into_iter().map(|c| T::from_count(c) / total).collect()
}

/// Per feature: histograms of real and fake values on a shared grid spanning
/// the pooled range, normalized to sum 1; score is the l2 norm of their
/// difference, averaged over features.
pub fn marginal_score<T: Real>(
    real: &[Array2<T>],
    fake: &[Array2<T>],
    bins: usize,
) -> Result<MetricValue<T>, MetricError> {
    let (_, d) = common_shape(real, fake)?;
    if bins == 0 {
        return Err(MetricError::DimensionMismatch("bins must be positive".into()));
    }
    let detail = (0..d)
        .map(|j| {
            let r: Vec<T> = real.iter().flat_map(|w| w.column(j).to_vec()).collect();
            let f: Vec<T> = fake.iter().flat_map(|w| w.column(j).to_vec()).collect();
            let lo = r.iter().chain(&f).copied().fold(T::infinity(), T::min);
            let hi = r.iter().chain(&f).copied().fold(T::neg_infinity(), T::max);
            let hr = histogram(&r, lo, hi, bins);
            let hf = histogram(&f, lo, hi, bins);
            hr.iter()
                .zip(&hf)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt()
        })
        .collect();
    Ok(MetricValue::with_detail("marginal_score", detail))
}

/// Rows of every window stacked: `(N * q) × d`.
fn flatten_rows<T: Real>(set: &[Array2<T>]) -> Vec<Vec<T>> {
    set.iter()
        .flat_map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect()
}

/// Sample covariance (divisor N - 1) of row vectors.
fn covariance<T: Real>(rows: &[Vec<T>]) -> Result<Array2<T>, MetricError> {
    let n = rows.len();
    if n < 2 {
        return Err(MetricError::TooShort(format!("{n} rows, covariance needs 2")));
    }
    let d = rows[0].len();
    let nt = T::from_count(n);
    let means: Vec<T> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<T>() / nt).collect();
    let mut cov = Array2::zeros((d, d));
    for r in rows {
        for a in 0..d {
            let da = r[a] - means[a];
            for b in a..d {
                cov[[a, b]] += da * (r[b] - means[b]);
            }
        }
    }
    let denom = T::from_count(n - 1);
    for a in 0..d {
        for b in a..d {
            let v = cov[[a, b]] / denom;
            cov[[a, b]] = v;
            cov[[b, a]] = v;
        }
    }
    Ok(cov)
}

fn correlation<T: Real>(rows: &[Vec<T>]) -> Result<Array2<T>, MetricError> {
    let cov = covariance(rows)?;
    let d = cov.nrows();
    let sd: Vec<T> = (0..d).map(|j| cov[[j, j]].sqrt()).collect();
    if let Some(j) = sd.iter().position(|s| *s <= T::zero()) {
        return Err(MetricError::DegenerateFeature(j));
    }
    Ok(Array2::from_shape_fn((d, d), |(a, b)| {
        if a == b {
            T::one()
        } else {
            cov[[a, b]] / (sd[a] * sd[b])
        }
    }))
}

fn frobenius_diff<T: Real>(a: &Array2<T>, b: &Array2<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Frobenius distance between Pearson correlation matrices of the pooled rows.
/// Defined as zero when there is a single feature.
pub fn correlation_score<T: Real>(real: &[Array2<T>], fake: &[Array2<T>]) -> Result<MetricValue<T>, MetricError> {
    let (_, d) = common_shape(real, fake)?;
    if d < 2 {
        return Ok(MetricValue::new("correlation_score", T::zero()));
    }
    let cr = correlation(&flatten_rows(real))?;
    let cf = correlation(&flatten_rows(fake))?;
    Ok(MetricValue::new("correlation_score", frobenius_diff(&cr, &cf)))
}

/// Frobenius distance between sample covariance matrices of the pooled rows.
pub fn covariance_score<T: Real>(real: &[Array2<T>], fake: &[Array2<T>]) -> Result<MetricValue<T>, MetricError> {
    common_shape(real, fake)?;
    let cr = covariance(&flatten_rows(real))?;
    let cf = covariance(&flatten_rows(fake))?;
    Ok(MetricValue::new("covariance_score", frobenius_diff(&cr, &cf)))
}

/// Sample autocorrelation of one window column at lags `1..=max_lag`.
/// A (numerically) constant column yields zeros.
fn window_acf<T: Real>(x: &[T], max_lag: usize) -> Vec<T> {
    let n = x.len();
    let m = x.iter().copied().sum::<T>() / T::from_count(n);
    let dev: Vec<T> = x.iter().map(|&v| v - m).collect();
    let denom: T = dev.iter().map(|&e| e * e).sum();
    let scale: T = x.iter().map(|&v| v * v).sum();
    if denom <= T::epsilon() * scale || denom == T::zero() {
        return vec![T::zero(); max_lag];
    }
    (1..=max_lag)
        .map(|lag| (0..n - lag).map(|t| dev[t] * dev[t + lag]).sum::<T>() / denom)
        .collect()
}

/// Mean per-window ACF of feature `j`, lags `1..=max_lag`.
fn mean_acf<T: Real>(set: &[Array2<T>], j: usize, max_lag: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); max_lag];
    for w in set {
        let col = w.column(j).to_vec();
        for (a, v) in acc.iter_mut().zip(window_acf(&col, max_lag)) {
            *a += v;
        }
    }
    let n = T::from_count(set.len());
    acc.into_iter().map(|a| a / n).collect()
}

/// Per feature: l2 distance over lags of the window-averaged autocorrelation
/// functions; averaged over features. `max_lag` defaults to `q - 1`.
pub fn autocorrelation_score<T: Real>(
    real: &[Array2<T>],
    fake: &[Array2<T>],
    max_lag: Option<usize>,
) -> Result<MetricValue<T>, MetricError> {
    let (q, d) = common_shape(real, fake)?;
    if q < 2 {
        return Err(MetricError::LagOutOfRange { lag: max_lag.unwrap_or(0), max: 0 });
    }
    let lag = max_lag.unwrap_or(q - 1);
    if lag == 0 || lag > q - 1 {
        return Err(MetricError::LagOutOfRange { lag, max: q - 1 });
    }
    let detail = (0..d)
        .map(|j| {
            let ar = mean_acf(real, j, lag);
            let af = mean_acf(fake, j, lag);
            ar.iter().zip(&af).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt()
        })
        .collect();
    Ok(MetricValue::with_detail("autocorrelation_score", detail))
}
