//! Evaluation of estimated effects: group ATEs with establishment-clustered
//! standard errors, AIPW scores, best-linear-predictor calibration, RATE/Qini,
//! event-time profiles and covariate profiling.

mod profiles;
mod rate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, ClusterVariance};

pub use profiles::{
    event_time_ate, interaction_regressions, outcome_distribution, profile_quantiles, within_cell_quantiles,
    Distribution, EventTimeRow, InteractionEstimate, ProfileRow,
};
pub use rate::{rate_qini, toc_grid, RateResult, Weighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub group: String,
    pub ate: f64,
    pub se_clustered: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub aipw_mean: Option<f64>,
    pub aipw_se: Option<f64>,
}

/// Treated-minus-control mean difference with a cluster-robust SE from the
/// regression of `y` on a constant and `W`. Rows with missing `y` are dropped.
pub fn difference_in_means(
    y: &[f64],
    w: &[bool],
    clusters: &[u64],
    kind: ClusterVariance,
) -> Result<(f64, f64, usize, usize)> {
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_finite()).collect();
    let yt: Vec<f64> = keep.iter().filter(|&&i| w[i]).map(|&i| y[i]).collect();
    let yc: Vec<f64> = keep.iter().filter(|&&i| !w[i]).map(|&i| y[i]).collect();
    if yt.is_empty() || yc.is_empty() {
        return Err(Error::Insufficient(format!(
            "group ATE needs both arms ({} treated, {} control)",
            yt.len(),
            yc.len()
        )));
    }
    let ate = stats::mean(&yt) - stats::mean(&yc);
    let one = vec![1.0; keep.len()];
    let wv: Vec<f64> = keep.iter().map(|&i| if w[i] { 1.0 } else { 0.0 }).collect();
    let yv: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let cl: Vec<u64> = keep.iter().map(|&i| clusters[i]).collect();
    let fit = stats::ols_clustered(&[&one, &wv], &yv, &cl, kind)?;
    Ok((ate, fit.se[1], yt.len(), yc.len()))
}

/// Mean of `values` with a cluster-robust SE.
pub fn clustered_mean(values: &[f64], clusters: &[u64], kind: ClusterVariance) -> Result<(f64, f64)> {
    let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    if keep.is_empty() {
        return Err(Error::Insufficient("mean of an empty group".into()));
    }
    let v: Vec<f64> = keep.iter().map(|&i| values[i]).collect();
    let cl: Vec<u64> = keep.iter().map(|&i| clusters[i]).collect();
    let one = vec![1.0; v.len()];
    let fit = stats::ols_clustered(&[&one], &v, &cl, kind)?;
    Ok((stats::mean(&v), fit.se[0]))
}

/// Group ATEs for every group label, in label order. `gamma` adds the mean
/// AIPW score of each group.
pub fn group_ate<G: Ord + Clone + ToString>(
    y: &[f64],
    w: &[bool],
    clusters: &[u64],
    groups: &[G],
    gamma: Option<&[f64]>,
    kind: ClusterVariance,
) -> Result<Vec<GroupEstimate>> {
    let mut members: BTreeMap<G, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g.clone()).or_default().push(i);
    }
    members
        .into_iter()
        .map(|(g, idx)| {
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let wg: Vec<bool> = idx.iter().map(|&i| w[i]).collect();
            let cg: Vec<u64> = idx.iter().map(|&i| clusters[i]).collect();
            let (ate, se, n_treated, n_control) = difference_in_means(&pick(y), &wg, &cg, kind)
                .map_err(|e| Error::Insufficient(format!("group {}: {e}", g.to_string())))?;
            let (aipw_mean, aipw_se) = match gamma {
                Some(gm) => {
                    let (m, s) = clustered_mean(&pick(gm), &cg, kind)?;
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            Ok(GroupEstimate { group: g.to_string(), ate, se_clustered: se, n_treated, n_control, aipw_mean, aipw_se })
        })
        .collect()
}

/// Doubly robust score `tau + (W - e)/(e(1-e)) * (y - m - (W - e) tau)`.
pub fn aipw_score(w: f64, y: f64, e_hat: f64, m_hat: f64, tau_hat: f64) -> f64 {
    let r = w - e_hat;
    tau_hat + r / (e_hat * (1.0 - e_hat)) * (y - m_hat - r * tau_hat)
}

pub fn aipw_scores(w: &[f64], y: &[f64], e_hat: &[f64], m_hat: &[f64], tau_hat: &[f64]) -> Vec<f64> {
    (0..w.len()).map(|i| aipw_score(w[i], y[i], e_hat[i], m_hat[i], tau_hat[i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub alpha_se: f64,
    pub beta: f64,
    pub beta_se: f64,
    /// False when the predictions have no variance, so `beta` is undefined.
    pub beta_defined: bool,
    pub n: usize,
    pub n_clusters: usize,
}

/// Regress `yt` on `wt * mean(tau)` and `wt * (tau - mean(tau))` without an
/// intercept; `alpha` calibrates the mean prediction and `beta` the
/// heterogeneity.
pub fn blp_calibration(
    wt: &[f64],
    yt: &[f64],
    tau_hat: &[f64],
    clusters: &[u64],
    kind: ClusterVariance,
) -> Result<CalibrationResult> {
    let keep: Vec<usize> =
        (0..yt.len()).filter(|&i| yt[i].is_finite() && wt[i].is_finite() && tau_hat[i].is_finite()).collect();
    let tau: Vec<f64> = keep.iter().map(|&i| tau_hat[i]).collect();
    let tbar = stats::mean(&tau);
    let a: Vec<f64> = keep.iter().map(|&i| wt[i] * tbar).collect();
    let b: Vec<f64> = keep.iter().map(|&i| wt[i] * (tau_hat[i] - tbar)).collect();
    let y: Vec<f64> = keep.iter().map(|&i| yt[i]).collect();
    let cl: Vec<u64> = keep.iter().map(|&i| clusters[i]).collect();
    let spread = tau.iter().any(|&t| t != tau[0]);
    if spread {
        let fit = stats::ols_clustered(&[&a, &b], &y, &cl, kind)?;
        Ok(CalibrationResult {
            alpha: fit.coef[0],
            alpha_se: fit.se[0],
            beta: fit.coef[1],
            beta_se: fit.se[1],
            beta_defined: true,
            n: fit.n,
            n_clusters: fit.n_clusters,
        })
    } else {
        let fit = stats::ols_clustered(&[&a], &y, &cl, kind)?;
        Ok(CalibrationResult {
            alpha: fit.coef[0],
            alpha_se: fit.se[0],
            beta: f64::NAN,
            beta_se: f64::NAN,
            beta_defined: false,
            n: fit.n,
            n_clusters: fit.n_clusters,
        })
    }
}

/// Share of the gross earnings effect absorbed before disposable income.
pub fn insurance_degree(ate_earnings: f64, ate_disposable: f64) -> Result<f64> {
    if ate_earnings == 0.0 {
        return Err(Error::Domain("insurance degree is undefined for a zero earnings effect".into()));
    }
    Ok((ate_earnings - ate_disposable) / ate_earnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_group_ate() {
        let est = group_ate(
            &[1.0, 1.0, 0.0, 0.0],
            &[true, true, false, false],
            &[1, 1, 2, 2],
            &[0; 4],
            None,
            ClusterVariance::Cr0,
        )
        .unwrap();
        assert_eq!(est[0].ate, 1.0);
        assert_eq!((est[0].n_treated, est[0].n_control), (2, 2));
    }

    #[test]
    fn single_arm_group_is_an_error() {
        assert!(group_ate(&[1.0, 2.0], &[true, true], &[1, 2], &[0, 0], None, ClusterVariance::Cr0).is_err());
    }

    #[test]
    fn aipw_examples() {
        assert_eq!(aipw_score(1.0, 1.0, 0.5, 0.5, 0.0), 1.0);
        for tau in [-0.7, 0.0, 0.3, 2.0] {
            assert!(aipw_score(0.0, 0.4, 0.5, 0.4, tau).abs() < 1e-15);
        }
    }

    #[test]
    fn insurance_examples() {
        assert_eq!(insurance_degree(-0.4, -0.4).unwrap(), 0.0);
        assert_eq!(insurance_degree(-0.4, 0.0).unwrap(), 1.0);
        assert!(insurance_degree(0.0, 0.1).is_err());
    }

    #[test]
    fn constant_predictions_leave_beta_undefined() {
        let wt = [0.5, -0.5, 0.5, -0.5];
        let yt = [0.1, 0.2, -0.1, 0.0];
        let r = blp_calibration(&wt, &yt, &[0.2; 4], &[1, 2, 3, 4], ClusterVariance::Cr0).unwrap();
        assert!(!r.beta_defined && r.beta.is_nan());
    }
}
