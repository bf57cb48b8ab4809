//! Worker, job, industry and location covariates for one event year.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{DMatrix, DVector};

use super::formulas::{
    churn_rate, establishment_wage_premium, growth_metric, hhi, reallocation_rate, shift_share_exposure,
};
use super::panel::{Panel, WorkerYear};
use super::{spell_length, IngestConfig};
use crate::dataset::{known_level, CovariateKind, CovariateSpec, Dataset};
use crate::error::{Error, Result};
use crate::stats;

/// Year-specific Mincer regression of log main-job earnings on schooling,
/// demographics and five-year age bins, with industry fixed effects.
#[derive(Debug, Clone)]
pub struct MincerFit {
    pub year: i32,
    /// Residual of each employed panel row of the year, keyed by row index.
    pub residuals: BTreeMap<usize, f64>,
    /// Industry fixed effects.
    pub industry_effects: BTreeMap<u32, f64>,
}

pub fn mincer_residuals(panel: &Panel, year: i32) -> Result<MincerFit> {
    let rows: Vec<usize> = panel.establishments(year).into_iter().flat_map(|e| panel.staff(e, year).to_vec()).collect();
    if rows.is_empty() {
        return Err(Error::Insufficient(format!("no employed workers in {year}")));
    }
    let rec = |i: usize| &panel.rows[i];
    let y: Vec<f64> = rows.iter().map(|&i| rec(i).main_earnings.ln()).collect();
    let mut regressors: Vec<Vec<f64>> = vec![rows.iter().map(|&i| rec(i).schooling_years).collect()];
    for name in ["female", "immigrant"] {
        if panel.extra_columns.contains(name) {
            regressors.push(
                rows.iter().map(|&i| rec(i).extra_f64(name)).map(|v| if v.is_finite() { v } else { 0.0 }).collect(),
            );
        }
    }
    let bins: Vec<i64> = rows.iter().map(|&i| (rec(i).age / 5.0).floor() as i64).collect();
    let mut distinct: Vec<i64> = bins.clone();
    distinct.sort_unstable();
    distinct.dedup();
    for b in distinct.iter().skip(1) {
        regressors.push(bins.iter().map(|x| if x == b { 1.0 } else { 0.0 }).collect());
    }

    // Within-industry demeaning absorbs the fixed effects.
    let ind: Vec<u32> = rows.iter().map(|&i| rec(i).industry_code).collect();
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, s) in ind.iter().enumerate() {
        members.entry(*s).or_default().push(k);
    }
    let demean = |v: &[f64]| {
        let mut out = v.to_vec();
        for idx in members.values() {
            let m = stats::mean(&idx.iter().map(|&k| v[k]).collect::<Vec<_>>());
            for &k in idx {
                out[k] -= m;
            }
        }
        out
    };
    let yd = demean(&y);
    let xd: Vec<Vec<f64>> = regressors.iter().map(|c| demean(c)).collect();
    let p = xd.len();
    let n = rows.len();
    let x = DMatrix::from_fn(n, p, |r, c| xd[c][r]);
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&DVector::from_vec(yd), 1e-10)
        .map_err(|e| Error::Numeric(format!("Mincer regression failed: {e}")))?;

    let fitted: Vec<f64> = (0..n).map(|k| (0..p).map(|c| regressors[c][k] * beta[c]).sum()).collect();
    let mut industry_effects = BTreeMap::new();
    for (s, idx) in &members {
        industry_effects.insert(*s, stats::mean(&idx.iter().map(|&k| y[k] - fitted[k]).collect::<Vec<_>>()));
    }
    let residuals = rows.iter().enumerate().map(|(k, &i)| (i, y[k] - fitted[k] - industry_effects[&ind[k]])).collect();
    Ok(MincerFit { year, residuals, industry_effects })
}

fn log_or_nan(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NAN
    }
}

fn growth_or_nan(a: usize, b: usize) -> f64 {
    growth_metric(a as f64, b as f64).unwrap_or(f64::NAN)
}

/// Industry-level flows between `t-2` and `t-1`: (churn, reallocation).
fn industry_flows(panel: &Panel, t: i32) -> HashMap<u32, (f64, f64)> {
    if !panel.covers(t - 2) {
        return HashMap::new();
    }
    #[derive(Default)]
    struct Acc {
        hires: usize,
        seps: usize,
        creation: usize,
        destruction: usize,
    }
    let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
    let mut ests: Vec<u64> = panel.establishments(t - 1);
    ests.extend(panel.establishments(t - 2));
    ests.sort_unstable();
    ests.dedup();
    for e in ests {
        let now = panel.staff(e, t - 1);
        let before = panel.staff(e, t - 2);
        let industry = now.first().or(before.first()).map(|&i| panel.rows[i].industry_code).expect("nonempty");
        let ids_now: HashSet<u64> = now.iter().map(|&i| panel.rows[i].worker_id).collect();
        let ids_before: HashSet<u64> = before.iter().map(|&i| panel.rows[i].worker_id).collect();
        let a = acc.entry(industry).or_default();
        a.hires += ids_now.difference(&ids_before).count();
        a.seps += ids_before.difference(&ids_now).count();
        a.creation += now.len().saturating_sub(before.len());
        a.destruction += before.len().saturating_sub(now.len());
    }
    acc.into_iter()
        .map(|(s, a)| {
            let (e1, e0) = (panel.industry_employment(s, t - 1) as f64, panel.industry_employment(s, t - 2) as f64);
            let churn = churn_rate(a.hires as f64, a.seps as f64, e1, e0).unwrap_or(f64::NAN);
            let realloc = reallocation_rate(a.creation as f64, a.destruction as f64, e1, e0).unwrap_or(f64::NAN);
            (s, (churn, realloc))
        })
        .collect()
}

/// Fill every covariate for the rows of one event year. Values that cannot
/// be computed are left as `NaN` for [`impute_missing`].
pub fn compute_covariates(panel: &Panel, ds: &mut Dataset, cfg: &IngestConfig) -> Result<()> {
    let n = ds.len();
    if n == 0 {
        return Ok(());
    }
    let t = ds.event_year[0];
    if ds.event_year.iter().any(|&y| y != t) {
        return Err(Error::Data("covariates are computed one event year at a time".into()));
    }
    let base: Vec<&WorkerYear> = (0..n)
        .map(|i| {
            panel
                .get(ds.worker_id[i], t - 1)
                .ok_or_else(|| Error::Data(format!("worker {} missing in {}", ds.worker_id[i], t - 1)))
        })
        .collect::<Result<_>>()?;

    // Industry aggregates.
    let industries: Vec<u32> = {
        let mut v: Vec<u32> = panel
            .establishments(t - 1)
            .iter()
            .flat_map(|&e| panel.staff(e, t - 1))
            .map(|&i| panel.rows[i].industry_code)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let trend_base = (t - cfg.trend_lookback..=t - 2).find(|y| panel.covers(*y));
    let trend: BTreeMap<u32, f64> = industries
        .iter()
        .map(|&s| {
            let v = trend_base.map_or(f64::NAN, |b| {
                growth_or_nan(panel.industry_employment(s, b), panel.industry_employment(s, t - 1))
            });
            (s, v)
        })
        .collect();
    let cycle: BTreeMap<u32, f64> = industries
        .iter()
        .map(|&s| (s, growth_or_nan(panel.industry_employment(s, t - 1), panel.industry_employment(s, t))))
        .collect();
    let manufacturing = |s: u32| (cfg.manufacturing_codes.0..=cfg.manufacturing_codes.1).contains(&s);
    let flows = industry_flows(panel, t);

    // Location aggregates at t-1.
    let mut loc_ind: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
    for e in panel.establishments(t - 1) {
        for &i in panel.staff(e, t - 1) {
            let r = &panel.rows[i];
            *loc_ind.entry(r.location_id).or_default().entry(r.industry_code).or_default() += 1.0;
        }
    }
    struct Local {
        employment: f64,
        hhi: f64,
        trend: f64,
        cycle: f64,
        manufacturing: f64,
    }
    let local: BTreeMap<u32, Local> = loc_ind
        .iter()
        .map(|(&l, counts)| {
            let total: f64 = counts.values().sum();
            let shares: BTreeMap<u32, f64> = counts.iter().map(|(&s, &c)| (s, c / total)).collect();
            let sv: Vec<f64> = shares.values().copied().collect();
            let mshare = shares.iter().filter(|(s, _)| manufacturing(**s)).map(|(_, v)| v).sum();
            let exposure = |vals: &BTreeMap<u32, f64>| shift_share_exposure(&shares, vals).unwrap_or(f64::NAN);
            (
                l,
                Local {
                    employment: total,
                    hhi: hhi(&sv).unwrap_or(f64::NAN),
                    trend: exposure(&trend),
                    cycle: exposure(&cycle),
                    manufacturing: mshare,
                },
            )
        })
        .collect();

    let mincer = mincer_residuals(panel, t - 1)?;
    let fe_mean = {
        let all: Vec<f64> =
            mincer.residuals.keys().map(|&i| mincer.industry_effects[&panel.rows[i].industry_code]).collect();
        stats::mean(&all)
    };

    let routine = panel.extra_columns.contains("routine").then(|| routine_scores(panel, &base, t, cfg));

    let earnings: Vec<f64> = base.iter().map(|r| r.total_earnings).collect();
    let ranks = stats::average_ranks(&earnings);

    use crate::dataset::CovariateKind::{Continuous, Dummy};
    let mut add = |name: &str, kind: CovariateKind, values: Vec<f64>| {
        ds.add_covariate(CovariateSpec::new(name, kind, known_level(name)), values);
    };
    let col = |f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();

    add("age", Continuous, col(&|i| base[i].age));
    for (name, kind) in [("female", Dummy), ("immigrant", Dummy), ("married", Dummy), ("children", Continuous)] {
        if panel.extra_columns.contains(name) {
            add(name, kind, col(&|i| base[i].extra_f64(name)));
        }
    }
    add("schooling", Continuous, col(&|i| base[i].schooling_years));
    let cap = cfg.tenure_cap;
    add(
        "tenure",
        Continuous,
        col(&|i| {
            spell_length(panel, base[i].worker_id, t, cap, |x| x.establishment_id == base[i].establishment_id) as f64
        }),
    );
    add(
        "industry_tenure",
        Continuous,
        col(&|i| spell_length(panel, base[i].worker_id, t, cap, |x| x.industry_code == base[i].industry_code) as f64),
    );
    add("earnings_t1", Continuous, col(&|i| log_or_nan(base[i].total_earnings)));
    for (name, lag) in [("earnings_t2", 2), ("earnings_t3", 3)] {
        add(
            name,
            Continuous,
            col(&|i| {
                if panel.covers(t - lag) {
                    log_or_nan(panel.get(base[i].worker_id, t - lag).map_or(0.0, |r| r.total_earnings))
                } else {
                    f64::NAN
                }
            }),
        );
    }
    add("earnings_rank", Continuous, col(&|i| ranks[i] / n as f64));

    add("plant_size", Continuous, col(&|i| (panel.employment(base[i].establishment_id, t - 1) as f64).ln()));
    add(
        "plant_size_trend",
        Continuous,
        col(&|i| {
            if panel.covers(t - 3) {
                let e = base[i].establishment_id;
                growth_or_nan(panel.employment(e, t - 3), panel.employment(e, t - 1))
            } else {
                f64::NAN
            }
        }),
    );
    let row_of: HashMap<(u64, i32), usize> =
        base.iter().map(|r| ((r.worker_id, r.year), panel_index(panel, r))).collect();
    add(
        "plant_wage_premium",
        Continuous,
        col(&|i| {
            let staff = panel.staff(base[i].establishment_id, t - 1);
            let me = row_of[&(base[i].worker_id, t - 1)];
            let res: Vec<f64> = staff.iter().map(|k| mincer.residuals[k]).collect();
            staff.iter().position(|&k| k == me).map_or(f64::NAN, |p| establishment_wage_premium(&res, p))
        }),
    );
    if let Some(r) = routine {
        add("routine", Continuous, r);
    }

    add("industry_wage_premium", Continuous, col(&|i| mincer.industry_effects[&base[i].industry_code] - fe_mean));
    add("churn", Continuous, col(&|i| flows.get(&base[i].industry_code).map_or(f64::NAN, |f| f.0)));
    add("reallocation", Continuous, col(&|i| flows.get(&base[i].industry_code).map_or(f64::NAN, |f| f.1)));
    add("industry_trend", Continuous, col(&|i| trend[&base[i].industry_code]));
    add("industry_cycle", Continuous, col(&|i| cycle[&base[i].industry_code]));
    add("manufacturing", Dummy, col(&|i| if manufacturing(base[i].industry_code) { 1.0 } else { 0.0 }));

    add("local_employment", Continuous, col(&|i| local[&base[i].location_id].employment.ln()));
    add("hhi", Continuous, col(&|i| local[&base[i].location_id].hhi));
    add("local_trend", Continuous, col(&|i| local[&base[i].location_id].trend));
    add("local_cycle", Continuous, col(&|i| local[&base[i].location_id].cycle));
    add("local_manufacturing_share", Continuous, col(&|i| local[&base[i].location_id].manufacturing));
    add("year", Continuous, vec![f64::from(t); n]);

    let unknown: Vec<&String> =
        panel.extra_columns.iter().filter(|c| !super::KNOWN_EXTRA.contains(&c.as_str())).collect();
    for c in unknown {
        ds.passthrough.insert(c.clone(), base.iter().map(|r| r.extra.get(c).cloned().unwrap_or_default()).collect());
    }
    ds.passthrough.insert("main_job_tie".into(), base.iter().map(|r| u8::from(r.main_job_tie).to_string()).collect());
    Ok(())
}

fn panel_index(panel: &Panel, r: &WorkerYear) -> usize {
    // Rows are sorted by (worker, year), so the reference's position is found
    // by binary search.
    panel
        .rows
        .binary_search_by(|x| (x.worker_id, x.year).cmp(&(r.worker_id, r.year)))
        .expect("record comes from the panel")
}

/// Routine score of each sampled worker; missing values take the mean of
/// the schooling-by-industry cell, then the industry, then everyone, using
/// the first level with at least `routine_cell_min` observed workers.
fn routine_scores(panel: &Panel, base: &[&WorkerYear], t: i32, cfg: &IngestConfig) -> Vec<f64> {
    let mut cell: HashMap<(i64, u32), (f64, usize)> = HashMap::new();
    let mut industry: HashMap<u32, (f64, usize)> = HashMap::new();
    let mut all = (0.0, 0usize);
    for e in panel.establishments(t - 1) {
        for &i in panel.staff(e, t - 1) {
            let r = &panel.rows[i];
            let v = r.extra_f64("routine");
            if v.is_finite() {
                let c = cell.entry((r.schooling_years.round() as i64, r.industry_code)).or_default();
                c.0 += v;
                c.1 += 1;
                let s = industry.entry(r.industry_code).or_default();
                s.0 += v;
                s.1 += 1;
                all.0 += v;
                all.1 += 1;
            }
        }
    }
    let min = cfg.routine_cell_min;
    base.iter()
        .map(|r| {
            let v = r.extra_f64("routine");
            if v.is_finite() {
                return v;
            }
            let key = (r.schooling_years.round() as i64, r.industry_code);
            [cell.get(&key).copied(), industry.get(&r.industry_code).copied(), Some(all)]
                .into_iter()
                .flatten()
                .find(|&(_, k)| k >= min)
                .or_else(|| (all.1 > 0).then_some(all))
                .map_or(f64::NAN, |(s, k)| s / k as f64)
        })
        .collect()
}

/// Replace missing covariate values year by year: continuous columns take the
/// year's median and dummies take 0. Each column with missing values gains a
/// `{name}_missing` indicator.
pub fn impute_missing(ds: &mut Dataset) {
    let mut years: Vec<i32> = ds.event_year.clone();
    years.sort_unstable();
    years.dedup();
    let mut indicators = Vec::new();
    for (spec, col) in ds.covariate_specs.iter().zip(ds.covariates.iter_mut()) {
        if col.iter().all(|v| v.is_finite()) {
            continue;
        }
        let flag: Vec<f64> = col.iter().map(|v| if v.is_finite() { 0.0 } else { 1.0 }).collect();
        let overall: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
        let overall_median = if overall.is_empty() { 0.0 } else { stats::median(&overall) };
        for &y in &years {
            let fill = match spec.kind {
                CovariateKind::Dummy => 0.0,
                CovariateKind::Continuous => {
                    let v: Vec<f64> = col
                        .iter()
                        .zip(&ds.event_year)
                        .filter(|(v, e)| **e == y && v.is_finite())
                        .map(|(v, _)| *v)
                        .collect();
                    if v.is_empty() {
                        overall_median
                    } else {
                        stats::median(&v)
                    }
                }
            };
            for (v, e) in col.iter_mut().zip(&ds.event_year) {
                if *e == y && !v.is_finite() {
                    *v = fill;
                }
            }
        }
        let name = format!("{}_missing", spec.name);
        indicators.push((CovariateSpec::new(&name, CovariateKind::Dummy, known_level(&name)), flag));
    }
    for (spec, flag) in indicators {
        ds.add_covariate(spec, flag);
    }
}
