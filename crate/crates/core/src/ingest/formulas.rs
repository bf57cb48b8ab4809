//! Closed-form covariate formulas.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::stats::NeumaierSum;

/// Symmetric growth rate `(b - a) / ((a + b) / 2)`, bounded in `[-2, 2]`.
pub fn growth_metric(emp_a: f64, emp_b: f64) -> Result<f64> {
    if !(emp_a >= 0.0 && emp_b >= 0.0) {
        return Err(Error::Domain(format!("growth metric needs nonnegative counts, got ({emp_a}, {emp_b})")));
    }
    if emp_a == 0.0 && emp_b == 0.0 {
        return Err(Error::Domain("growth metric is undefined when both counts are zero".into()));
    }
    Ok((emp_b - emp_a) / ((emp_a + emp_b) / 2.0))
}

fn excess_flow_rate(what: &str, a: f64, b: f64, emp_t: f64, emp_prev: f64) -> Result<f64> {
    if [a, b, emp_t, emp_prev].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("{what} needs nonnegative counts")));
    }
    let avg = (emp_t + emp_prev) / 2.0;
    if avg == 0.0 {
        return Err(Error::Domain(format!("{what} is undefined with zero employment in both years")));
    }
    Ok(((a + b) - (emp_t - emp_prev).abs()) / avg)
}

/// Worker flows in excess of the net employment change, over average
/// employment.
pub fn churn_rate(hires: f64, separations: f64, emp_t: f64, emp_prev: f64) -> Result<f64> {
    excess_flow_rate("churn rate", hires, separations, emp_t, emp_prev)
}

/// Job creation plus destruction in excess of the net employment change, over
/// average employment.
pub fn reallocation_rate(job_creation: f64, job_destruction: f64, emp_t: f64, emp_prev: f64) -> Result<f64> {
    excess_flow_rate("reallocation rate", job_creation, job_destruction, emp_t, emp_prev)
}

/// Leave-one-out mean of coworkers' residual log earnings. `NaN` when the
/// worker has no coworkers.
pub fn establishment_wage_premium(residuals: &[f64], self_index: usize) -> f64 {
    if residuals.len() < 2 || self_index >= residuals.len() {
        return f64::NAN;
    }
    let mut acc = NeumaierSum::default();
    for (k, r) in residuals.iter().enumerate() {
        if k != self_index {
            acc.add(*r);
        }
    }
    acc.value() / (residuals.len() - 1) as f64
}

/// Herfindahl index of employment shares.
pub fn hhi(shares: &[f64]) -> Result<f64> {
    let mut total = NeumaierSum::default();
    let mut sq = NeumaierSum::default();
    for &s in shares {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("negative or missing share {s}")));
        }
        total.add(s);
        sq.add(s * s);
    }
    if (total.value() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("shares sum to {}, not 1", total.value())));
    }
    Ok(sq.value())
}

/// Local average of an industry characteristic weighted by local employment
/// shares.
pub fn shift_share_exposure<K: Ord + std::fmt::Debug>(
    shares: &BTreeMap<K, f64>,
    values: &BTreeMap<K, f64>,
) -> Result<f64> {
    let total: f64 = shares.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("shares sum to {total}, not 1")));
    }
    let mut acc = NeumaierSum::default();
    for (k, s) in shares {
        let v = values.get(k).ok_or_else(|| Error::Data(format!("no industry value for {k:?}")))?;
        acc.add(s * v);
    }
    Ok(acc.value())
}
