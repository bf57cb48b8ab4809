//! Descriptive evaluations: event-time trajectories, interaction regressions,
//! covariate profiles of CATE quantiles and outcome distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::group_ate;
use crate::crossfit::CateTable;
use crate::dataset::{outcome_column, CovariateKind, Dataset, HORIZONS};
use crate::error::{Error, Result};
use crate::stats::{self, ClusterVariance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeRow {
    pub group: String,
    pub horizon: i32,
    pub ate: f64,
    pub se_clustered: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub treated_mean: f64,
    pub control_mean: f64,
    /// Means divided by the median group's pooled mean at `t-1`.
    pub treated_norm: f64,
    pub control_norm: f64,
}

/// Group ATEs and raw mean trajectories for every horizon in `-3..=10` whose
/// outcome column `{prefix}{h}` exists. With `balanced`, only rows observed at
/// every available horizon are used.
pub fn event_time_ate<G: Ord + Clone + ToString>(
    ds: &Dataset,
    groups: &[G],
    prefix: &str,
    balanced: bool,
    kind: ClusterVariance,
) -> Result<Vec<EventTimeRow>> {
    let columns: Vec<(i32, &[f64])> =
        HORIZONS.filter_map(|h| ds.outcomes.get(&outcome_column(prefix, h)).map(|c| (h, c.as_slice()))).collect();
    if columns.is_empty() {
        return Err(Error::Data(format!("no outcome columns with prefix `{prefix}`")));
    }
    let keep: Vec<bool> = (0..ds.len()).map(|i| !balanced || columns.iter().all(|(_, c)| c[i].is_finite())).collect();
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    let w: Vec<bool> = idx.iter().map(|&i| ds.treated[i]).collect();
    let cl: Vec<u64> = idx.iter().map(|&i| ds.cluster_id[i]).collect();
    let gs: Vec<G> = idx.iter().map(|&i| groups[i].clone()).collect();

    let mut labels: Vec<G> = gs.clone();
    labels.sort();
    labels.dedup();
    let median_group = labels.get(labels.len().saturating_sub(1) / 2).cloned();
    let base = columns
        .iter()
        .find(|(h, _)| *h == -1)
        .and_then(|(_, c)| {
            let g = median_group.as_ref()?;
            let v: Vec<f64> =
                idx.iter().zip(&gs).filter(|(&i, gi)| *gi == g && c[i].is_finite()).map(|(&i, _)| c[i]).collect();
            (!v.is_empty()).then(|| stats::mean(&v))
        })
        .unwrap_or(f64::NAN);

    let mut out = Vec::new();
    for (h, col) in &columns {
        let y: Vec<f64> = idx.iter().map(|&i| col[i]).collect();
        for est in group_ate(&y, &w, &cl, &gs, None, kind)? {
            let arm_mean = |treated: bool| {
                let v: Vec<f64> = (0..y.len())
                    .filter(|&k| w[k] == treated && gs[k].to_string() == est.group && y[k].is_finite())
                    .map(|k| y[k])
                    .collect();
                stats::mean(&v)
            };
            let (tm, cm) = (arm_mean(true), arm_mean(false));
            out.push(EventTimeRow {
                group: est.group.clone(),
                horizon: *h,
                ate: est.ate,
                se_clustered: est.se_clustered,
                n_treated: est.n_treated,
                n_control: est.n_control,
                treated_mean: tm,
                control_mean: cm,
                treated_norm: tm / base,
                control_norm: cm / base,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEstimate {
    pub covariate: String,
    /// Coefficient on `W * v`.
    pub coefficient: f64,
    pub se: f64,
    /// Continuous covariates enter standardized; dummies enter as they are.
    pub standardized: bool,
    /// Sample sd of the raw covariate.
    pub sd: f64,
}

/// For each covariate `v`, OLS of the outcome on `1, W, v, W*v` with
/// establishment-clustered standard errors.
pub fn interaction_regressions(
    ds: &Dataset,
    outcome: &str,
    covariates: &[String],
    kind: ClusterVariance,
) -> Result<Vec<InteractionEstimate>> {
    let y_all = ds.outcome(outcome)?;
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| y_all[i].is_finite()).collect();
    let y: Vec<f64> = keep.iter().map(|&i| y_all[i]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| if ds.treated[i] { 1.0 } else { 0.0 }).collect();
    let cl: Vec<u64> = keep.iter().map(|&i| ds.cluster_id[i]).collect();
    let one = vec![1.0; keep.len()];
    covariates
        .iter()
        .map(|name| {
            let j = ds.covariate_index(name).ok_or_else(|| Error::Data(format!("unknown covariate `{name}`")))?;
            let raw: Vec<f64> = keep.iter().map(|&i| ds.covariates[j][i]).collect();
            let dummy = ds.covariate_specs[j].kind == CovariateKind::Dummy;
            let v = if dummy { raw.clone() } else { stats::standardize(&raw) };
            let wv: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a * b).collect();
            let fit = stats::ols_clustered(&[&one, &w, &v, &wv], &y, &cl, kind)?;
            Ok(InteractionEstimate {
                covariate: name.clone(),
                coefficient: fit.coef[3],
                se: fit.se[3],
                standardized: !dummy,
                sd: stats::sd(&raw),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub covariate: String,
    pub kind: CovariateKind,
    /// Mean per CATE group, group 1 (most negative) first. Continuous
    /// covariates are standardized over the profiled rows.
    pub group_means: Vec<f64>,
    /// Group 1 minus the top group.
    pub difference: f64,
    /// The same difference with groups formed inside age by schooling cells.
    pub within_cell_difference: Option<f64>,
}

/// Quantile groups of `cate` formed separately inside each cell of 10 age
/// bins by 8 schooling categories. Schooling with at most 8 distinct values
/// uses those values as categories.
pub fn within_cell_quantiles<K: Ord + Clone>(
    cate: &[f64],
    age: &[f64],
    schooling: &[f64],
    keys: &[K],
    q: usize,
) -> Vec<usize> {
    let age_bin = stats::balanced_bins(age, keys, 10);
    let mut distinct: Vec<f64> = schooling.to_vec();
    distinct.sort_by(stats::cmp_f64);
    distinct.dedup();
    let school_bin: Vec<usize> = if distinct.len() <= 8 {
        schooling.iter().map(|s| distinct.iter().position(|d| d == s).unwrap_or(0)).collect()
    } else {
        stats::balanced_bins(schooling, keys, 8)
    };
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..cate.len() {
        cells.entry((age_bin[i], school_bin[i])).or_default().push(i);
    }
    let mut out = vec![0; cate.len()];
    for rows in cells.values() {
        let v: Vec<f64> = rows.iter().map(|&i| cate[i]).collect();
        let k: Vec<K> = rows.iter().map(|&i| keys[i].clone()).collect();
        for (b, &i) in stats::balanced_bins(&v, &k, q).into_iter().zip(rows) {
            out[i] = b;
        }
    }
    out
}

fn group_means(values: &[f64], groups: &[usize], q: usize) -> Vec<f64> {
    (1..=q)
        .map(|g| {
            let v: Vec<f64> =
                (0..values.len()).filter(|&i| groups[i] == g && values[i].is_finite()).map(|i| values[i]).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                stats::mean(&v)
            }
        })
        .collect()
}

/// Covariate means by CATE quantile group over the rows of `ds`. With
/// `within_cell = Some((age, schooling))` the bottom-minus-top difference is
/// also computed with groups formed within age by schooling cells.
pub fn profile_quantiles(
    ds: &Dataset,
    table: &CateTable,
    q: usize,
    within_cell: Option<(&str, &str)>,
) -> Result<Vec<ProfileRow>> {
    if q < 2 {
        return Err(Error::Config("profiling needs at least two groups".into()));
    }
    let rows = table.aligned_to(ds)?;
    let cate: Vec<f64> = rows.iter().map(|r| r.cate).collect();
    let keys: Vec<(u64, i32)> = (0..ds.len()).map(|i| ds.key(i)).collect();
    let groups = stats::balanced_bins(&cate, &keys, q);
    let cell_groups = match within_cell {
        Some((age, school)) => Some(within_cell_quantiles(&cate, ds.covariate(age)?, ds.covariate(school)?, &keys, q)),
        None => None,
    };
    Ok(ds
        .covariate_specs
        .iter()
        .zip(&ds.covariates)
        .map(|(spec, raw)| {
            let v = match spec.kind {
                CovariateKind::Dummy => raw.clone(),
                CovariateKind::Continuous => stats::standardize(raw),
            };
            let means = group_means(&v, &groups, q);
            let within_cell_difference = cell_groups.as_ref().map(|cg| {
                let m = group_means(&v, cg, q);
                m[0] - m[q - 1]
            });
            ProfileRow {
                covariate: spec.name.clone(),
                kind: spec.kind,
                difference: means[0] - means[q - 1],
                group_means: means,
                within_cell_difference,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    /// Bin edges over the nonzero values, `n_bins + 1` of them.
    pub edges: Vec<f64>,
    /// Densities of nonzero values, scaled so that zero share plus the
    /// integrated density is one.
    pub treated_density: Vec<f64>,
    pub control_density: Vec<f64>,
    pub treated_zero_share: f64,
    pub control_zero_share: f64,
    pub treated_mean: f64,
    pub control_mean: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Histograms of an outcome by arm on `[lo, hi]`; values beyond the range fall
/// into the end bins and exact zeros are counted separately.
pub fn outcome_distribution(ds: &Dataset, outcome: &str, n_bins: usize, lo: f64, hi: f64) -> Result<Distribution> {
    if n_bins == 0 || !(hi > lo) {
        return Err(Error::Config(format!("bad histogram range [{lo}, {hi}] with {n_bins} bins")));
    }
    let y = ds.outcome(outcome)?;
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|k| lo + k as f64 * width).collect();
    let arm = |treated: bool| {
        let v: Vec<f64> =
            (0..ds.len()).filter(|&i| ds.treated[i] == treated && y[i].is_finite()).map(|i| y[i]).collect();
        let n = v.len();
        let mut counts = vec![0usize; n_bins];
        let mut zeros = 0usize;
        for &x in &v {
            if x == 0.0 {
                zeros += 1;
            } else {
                let k = ((x - lo) / width).floor().clamp(0.0, (n_bins - 1) as f64) as usize;
                counts[k] += 1;
            }
        }
        let nf = n.max(1) as f64;
        let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (nf * width)).collect();
        (density, zeros as f64 / nf, stats::mean(&v), n)
    };
    let (treated_density, treated_zero_share, treated_mean, n_treated) = arm(true);
    let (control_density, control_zero_share, control_mean, n_control) = arm(false);
    Ok(Distribution {
        edges,
        treated_density,
        control_density,
        treated_zero_share,
        control_zero_share,
        treated_mean,
        control_mean,
        n_treated,
        n_control,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn within_cell_groups_are_balanced_per_cell() {
        let n = 400;
        let age: Vec<f64> = (0..n).map(|i| f64::from(i % 40)).collect();
        let school: Vec<f64> = (0..n).map(|i| f64::from((i / 40) % 4)).collect();
        let cate: Vec<f64> = (0..n).map(|i| f64::from((i * 37) % 101)).collect();
        let keys: Vec<u32> = (0..n).collect();
        let g = within_cell_quantiles(&cate, &age, &school, &keys, 4);
        assert!(g.iter().all(|&b| (1..=4).contains(&b)));
        let counts: Vec<usize> = (1..=4).map(|b| g.iter().filter(|&&x| x == b).count()).collect();
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn group_means_skip_empty_groups() {
        let m = group_means(&[1.0, 3.0], &[1, 1], 2);
        assert_eq!(m[0], 2.0);
        assert!(m[1].is_nan());
    }
}
