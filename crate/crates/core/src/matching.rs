//! Propensity-score matching of displaced workers to controls.
//!
//! Scores come from year-specific logit fits. Within each event year the
//! treated are matched greedily, highest score first, to their nearest
//! available controls. A control is used at most once over all years.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CovariateKind, Dataset};
use crate::error::{Error, Result};
use crate::stats;

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-8;
/// A standardized coefficient this large means the likelihood has no maximum.
const DIVERGENCE: f64 = 25.0;
const SCORE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub year: i32,
    pub intercept: f64,
    /// Original-scale coefficients; covariates constant within the year get 0.
    pub coefficients: BTreeMap<String, f64>,
    /// Covariate order used by [`PropensityModel::score`].
    pub covariates: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub n_treated: usize,
    pub n_control: usize,
}

impl PropensityModel {
    /// Score of a row given in [`Self::covariates`] order, strictly inside (0, 1).
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut eta = self.intercept;
        for (name, v) in self.covariates.iter().zip(x) {
            eta += self.coefficients[name] * v;
        }
        logistic(eta).clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(design: &[Vec<f64>], y: &[f64], beta: &DVector<f64>) -> f64 {
    let mut acc = stats::NeumaierSum::default();
    for i in 0..y.len() {
        let eta: f64 = design.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum();
        // log(1 + exp(eta)) computed stably.
        let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        acc.add(y[i] * eta - softplus);
    }
    acc.value()
}

/// Maximum-likelihood logit of treatment on the covariates of the rows of
/// `ds` with event year `year`. Continuous covariates are z-scored before the
/// Newton iterations; coefficients are reported on the original scale.
pub fn fit_propensity(ds: &Dataset, year: i32) -> Result<PropensityModel> {
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.event_year[i] == year).collect();
    let y: Vec<f64> = rows.iter().map(|&i| if ds.treated[i] { 1.0 } else { 0.0 }).collect();
    let n_treated = y.iter().filter(|&&v| v == 1.0).count();
    let n_control = y.len() - n_treated;
    if n_treated == 0 || n_control == 0 {
        return Err(Error::Sample(format!(
            "year {year} has {n_treated} treated and {n_control} control rows; both classes are needed"
        )));
    }

    let names = ds.covariate_names();
    let mut design: Vec<Vec<f64>> = vec![vec![1.0; rows.len()]];
    // (covariate index, centre, scale) for each column after the intercept.
    let mut used: Vec<(usize, f64, f64)> = Vec::new();
    for (j, col) in ds.covariates.iter().enumerate() {
        let v: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("covariate `{}` has missing values in year {year}", names[j])));
        }
        if v.iter().all(|&x| x == v[0]) {
            continue;
        }
        let (t_min, t_max, c_min, c_max) = arm_ranges(&v, &y);
        if t_max < c_min || c_max < t_min {
            return Err(Error::Separation { covariate: names[j].clone() });
        }
        let (centre, scale) = match ds.covariate_specs[j].kind {
            CovariateKind::Dummy => (0.0, 1.0),
            CovariateKind::Continuous => (stats::mean(&v), stats::sd(&v)),
        };
        design.push(v.iter().map(|x| (x - centre) / scale).collect());
        used.push((j, centre, scale));
    }

    let k = design.len();
    let n = y.len() as f64;
    let share = n_treated as f64 / n;
    let mut beta = DVector::<f64>::zeros(k);
    beta[0] = (share / (1.0 - share)).ln();
    let mut ll = log_likelihood(&design, &y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for i in 0..y.len() {
            let eta: f64 = design.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum();
            let p = logistic(eta);
            let wgt = p * (1.0 - p);
            for a in 0..k {
                grad[a] += design[a][i] * (y[i] - p);
                for b in a..k {
                    hess[(a, b)] += wgt * design[a][i] * design[b][i];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        if grad.norm() / n < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let ridge = hess.diagonal().max() * 1e-12;
        let step = match (hess.clone() + DMatrix::identity(k, k) * ridge).cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::Numeric(format!("logit Hessian is singular in year {year}"))),
        };
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_ll = log_likelihood(&design, &y, &cand);
            if cand_ll >= ll || t < 1e-10 {
                beta = cand;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
        if let Some((a, _)) = beta.iter().enumerate().skip(1).find(|(_, b)| b.abs() > DIVERGENCE) {
            return Err(Error::Separation { covariate: names[used[a - 1].0].clone() });
        }
    }

    let mut coefficients: BTreeMap<String, f64> = names.iter().map(|n| (n.clone(), 0.0)).collect();
    let mut intercept = beta[0];
    for (a, &(j, centre, scale)) in used.iter().enumerate() {
        let b = beta[a + 1] / scale;
        coefficients.insert(names[j].clone(), b);
        intercept -= b * centre;
    }
    Ok(PropensityModel {
        year,
        intercept,
        coefficients,
        covariates: names,
        iterations,
        converged,
        n_treated,
        n_control,
    })
}

fn arm_ranges(v: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let (mut t_min, mut t_max, mut c_min, mut c_max) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, &w) in v.iter().zip(y) {
        if w == 1.0 {
            t_min = t_min.min(*x);
            t_max = t_max.max(*x);
        } else {
            c_min = c_min.min(*x);
            c_max = c_max.max(*x);
        }
    }
    (t_min, t_max, c_min, c_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportRegion {
    pub lo: f64,
    pub hi: f64,
}

impl SupportRegion {
    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }
}

/// Overlap of the two score ranges and the masks of units inside it.
pub fn trim_common_support(treated: &[f64], control: &[f64]) -> Result<(SupportRegion, Vec<bool>, Vec<bool>)> {
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Sample("common support needs treated and control scores".into()));
    }
    let range = |s: &[f64]| s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (t_min, t_max) = range(treated);
    let (c_min, c_max) = range(control);
    let region = SupportRegion { lo: t_min.max(c_min), hi: t_max.min(c_max) };
    if region.lo > region.hi {
        return Err(Error::Support { t_min, t_max, c_min, c_max });
    }
    let keep = |s: &[f64]| s.iter().map(|&v| region.contains(v)).collect();
    Ok((region, keep(treated), keep(control)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub treated_id: u64,
    pub match_year: i32,
    pub control_ids: Vec<u64>,
    /// Fewer than `k` controls were available.
    pub shortfall: bool,
    /// Absolute score distances, aligned with `control_ids`.
    pub distances: Vec<f64>,
}

/// Order-preserving map from a score to an integer key.
fn score_key(s: f64) -> u64 {
    let bits = s.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Greedy nearest-neighbour matching without replacement. Treated units are
/// processed in descending score order (ties by id); each takes its `k`
/// closest remaining controls (ties by smaller id). Controls farther than
/// `caliper` are never used.
pub fn match_controls(
    treated: &[(u64, f64)],
    controls: &[(u64, f64)],
    k: usize,
    caliper: Option<f64>,
    year: i32,
) -> Vec<MatchSet> {
    let mut pool: BTreeSet<(u64, u64)> = controls.iter().map(|&(id, s)| (score_key(s), id)).collect();
    let score_of: BTreeMap<u64, f64> = controls.iter().map(|&(id, s)| (id, s)).collect();
    let mut order: Vec<(u64, f64)> = treated.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .map(|(tid, ts)| {
            let mut control_ids = Vec::with_capacity(k);
            let mut distances = Vec::with_capacity(k);
            let key = (score_key(ts), 0);
            while control_ids.len() < k {
                let below = pool.range(..key).next_back().copied();
                let above = pool.range(key..).next().copied();
                let dist = |c: Option<(u64, u64)>| c.map(|(_, id)| ((score_of[&id] - ts).abs(), id));
                let pick = match (dist(below), dist(above)) {
                    (Some(a), Some(b)) => {
                        if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
                            below.zip(Some(a.0))
                        } else {
                            above.zip(Some(b.0))
                        }
                    }
                    (Some(a), None) => below.zip(Some(a.0)),
                    (None, Some(b)) => above.zip(Some(b.0)),
                    (None, None) => None,
                };
                match pick {
                    Some((entry, d)) if caliper.is_none_or(|c| d <= c) => {
                        pool.remove(&entry);
                        control_ids.push(entry.1);
                        distances.push(d);
                    }
                    _ => break,
                }
            }
            MatchSet { treated_id: tid, match_year: year, shortfall: control_ids.len() < k, control_ids, distances }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub smd_before: f64,
    pub smd_after: f64,
    /// `|smd_after| > 0.1`.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub n_treated: usize,
    pub n_controls: usize,
    /// Matched controls per matched treated worker.
    pub matching_ratio: f64,
    pub n_shortfall: usize,
}

fn smd(values: &[f64], treated: &[bool]) -> f64 {
    let t: Vec<f64> = values.iter().zip(treated).filter(|(_, &w)| w).map(|(v, _)| *v).collect();
    let c: Vec<f64> = values.iter().zip(treated).filter(|(_, &w)| !w).map(|(v, _)| *v).collect();
    let pooled = ((stats::variance(&t) + stats::variance(&c)) / 2.0).sqrt();
    let diff = stats::mean(&t) - stats::mean(&c);
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

/// Standardized mean differences before (all eligible rows) and after
/// matching.
pub fn balance_report(before: &Dataset, after: &Dataset, sets: &[MatchSet]) -> BalanceReport {
    let rows = before
        .covariate_specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let smd_before = smd(&before.covariates[j], &before.treated);
            let smd_after =
                after.covariate_index(&spec.name).map_or(f64::NAN, |k| smd(&after.covariates[k], &after.treated));
            BalanceRow { covariate: spec.name.clone(), smd_before, smd_after, flagged: smd_after.abs() > 0.1 }
        })
        .collect();
    let n_treated = after.n_treated();
    let n_controls = after.len() - n_treated;
    BalanceReport {
        rows,
        n_treated,
        n_controls,
        matching_ratio: n_controls as f64 / n_treated.max(1) as f64,
        n_shortfall: sets.iter().filter(|s| s.shortfall).count(),
    }
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Matched treated rows and their controls, sorted by (worker_id, event_year).
    pub dataset: Dataset,
    pub sets: Vec<MatchSet>,
    pub models: Vec<PropensityModel>,
    pub support: BTreeMap<i32, SupportRegion>,
    pub balance: BalanceReport,
}

/// Fit year-specific propensity scores, trim to common support and match `k`
/// controls per treated row. Years are matched in ascending order and a worker
/// used as a control in one year is unavailable in later years.
pub fn match_dataset(ds: &Dataset, k: usize, caliper: Option<f64>) -> Result<MatchResult> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let ds = &ds.sorted_by_key();
    let years: Vec<i32> = ds.event_year.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let models: Vec<PropensityModel> = years.par_iter().map(|&y| fit_propensity(ds, y)).collect::<Result<_>>()?;

    let mut used: HashSet<u64> = HashSet::new();
    let mut sets = Vec::new();
    let mut support = BTreeMap::new();
    let mut pscore = vec![f64::NAN; ds.len()];
    for (model, &year) in models.iter().zip(&years) {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.event_year[i] == year).collect();
        for &i in &rows {
            pscore[i] = model.score(&ds.row(i));
        }
        let (t_rows, c_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| ds.treated[i]);
        let st: Vec<f64> = t_rows.iter().map(|&i| pscore[i]).collect();
        let sc: Vec<f64> = c_rows.iter().map(|&i| pscore[i]).collect();
        let (region, keep_t, keep_c) = trim_common_support(&st, &sc)?;
        support.insert(year, region);
        let treated: Vec<(u64, f64)> =
            t_rows.iter().zip(&keep_t).filter(|(_, &k)| k).map(|(&i, _)| (ds.worker_id[i], pscore[i])).collect();
        let controls: Vec<(u64, f64)> = c_rows
            .iter()
            .zip(&keep_c)
            .filter(|(&i, &k)| k && !used.contains(&ds.worker_id[i]))
            .map(|(&i, _)| (ds.worker_id[i], pscore[i]))
            .collect();
        let year_sets = match_controls(&treated, &controls, k, caliper, year);
        for s in &year_sets {
            used.extend(s.control_ids.iter().copied());
        }
        sets.extend(year_sets);
    }

    let index = ds.index_by_key();
    let mut keep: Vec<usize> = Vec::new();
    let mut matched_to = vec![None; ds.len()];
    for s in sets.iter().filter(|s| !s.control_ids.is_empty()) {
        keep.push(index[&(s.treated_id, s.match_year)]);
        for c in &s.control_ids {
            let i = index[&(*c, s.match_year)];
            matched_to[i] = Some(s.treated_id);
            keep.push(i);
        }
    }
    let mut full = ds.clone();
    full.matched_to = matched_to;
    full.passthrough.insert("pscore".into(), pscore.iter().map(|&p| crate::dataset::fmt_f64(p)).collect());
    let matched = full.subset(&keep).sorted_by_key();
    let balance = balance_report(ds, &matched, &sets);
    Ok(MatchResult { dataset: matched, sets, models, support, balance })
}
