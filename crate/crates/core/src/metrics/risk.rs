//! Sharpe ratio and historical VaR / ES on simple returns.
//!
//! Conventions: returns are simple (`p_t / p_{t-1} - 1`), Sharpe uses the
//! sample standard deviation with no annualization, and VaR is the negated
//! `ceil(alpha * N)`-th smallest return. ES is the negated mean of every
//! return at or below that quantile.

use serde::{Deserialize, Serialize};

use super::{MetricError, MetricValue};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnKind {
    #[default]
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams<T = f64> {
    pub alpha: T,
    #[serde(default)]
    pub return_kind: ReturnKind,
}

impl<T: Real> Default for RiskParams<T> {
    fn default() -> Self {
        Self { alpha: T::lit(0.05), return_kind: ReturnKind::Simple }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMetric {
    Sharpe,
    Var,
    Es,
}

pub fn returns_from_prices<T: Real>(prices: &[T]) -> Result<Vec<T>, MetricError> {
    if prices.len() < 2 {
        return Err(MetricError::TooShort(format!("{} prices, need 2", prices.len())));
    }
    if let Some(i) = prices.iter().position(|p| !(p.is_finite() && *p > T::zero())) {
        return Err(MetricError::NonPositivePrice(i));
    }
    Ok(prices.windows(2).map(|w| w[1] / w[0] - T::one()).collect())
}

fn check_finite<T: Real>(xs: &[T]) -> Result<(), MetricError> {
    if xs.iter().any(|x| !x.is_finite()) {
        Err(MetricError::NonFinite)
    } else {
        Ok(())
    }
}

pub fn sharpe<T: Real>(returns: &[T]) -> Result<T, MetricError> {
    check_finite(returns)?;
    let n = returns.len();
    if n < 2 {
        return Err(MetricError::TooShort(format!("{n} returns, Sharpe needs 2")));
    }
    let mean = returns.iter().copied().sum::<T>() / T::from_count(n);
    let var = returns.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / T::from_count(n - 1);
    let std = var.sqrt();
    if std <= T::zero() {
        return Err(MetricError::ZeroVolatility);
    }
    Ok(mean / std)
}

/// Rank (1-based) of the lower empirical `alpha` quantile.
fn tail_rank<T: Real>(n: usize, alpha: T) -> Result<usize, MetricError> {
    let alpha = alpha.as_f64();
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(MetricError::TooShort(format!("alpha {alpha} outside (0, 0.5]")));
    }
    let scaled = alpha * n as f64;
    // Absorb representation error such as 0.05 * 20 = 1.0000000000000002.
    if scaled < 1.0 - 1e-9 {
        return Err(MetricError::TooShort(format!(
            "alpha * N = {scaled:.4} < 1 for N = {n}"
        )));
    }
    Ok((scaled - 1e-9).ceil() as usize)
}

fn sorted<T: Real>(returns: &[T]) -> Vec<T> {
    let mut s = returns.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    s
}

pub fn value_at_risk<T: Real>(returns: &[T], params: &RiskParams<T>) -> Result<T, MetricError> {
    check_finite(returns)?;
    let k = tail_rank(returns.len(), params.alpha)?;
    Ok(-sorted(returns)[k - 1])
}

pub fn expected_shortfall<T: Real>(returns: &[T], params: &RiskParams<T>) -> Result<T, MetricError> {
    check_finite(returns)?;
    let k = tail_rank(returns.len(), params.alpha)?;
    let s = sorted(returns);
    let q = s[k - 1];
    let tail: Vec<T> = s.into_iter().take_while(|&r| r <= q).collect();
    Ok(-(tail.iter().copied().sum::<T>() / T::from_count(tail.len())))
}

/// `|metric(returns(pred)) - metric(returns(true))|`.
pub fn metric_difference<T: Real>(
    metric: RiskMetric,
    pred_prices: &[T],
    true_prices: &[T],
    params: &RiskParams<T>,
) -> Result<MetricValue<T>, MetricError> {
    let rp = returns_from_prices(pred_prices)?;
    let rt = returns_from_prices(true_prices)?;
    let (id, a, b) = match metric {
        RiskMetric::Sharpe => ("sharpe_diff", sharpe(&rp)?, sharpe(&rt)?),
        RiskMetric::Var => ("var_diff", value_at_risk(&rp, params)?, value_at_risk(&rt, params)?),
        RiskMetric::Es => (
            "es_diff",
            expected_shortfall(&rp, params)?,
            expected_shortfall(&rt, params)?,
        ),
    };
    Ok(MetricValue::new(id, (a - b).abs()))
}
