//! Evaluation tables as CSV files plus SVG plots.

pub mod svg;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossfit::{CateTable, TEST_FOLD};
use crate::dataset::{fmt_f64, outcome_column, parse_f64, Dataset};
use crate::error::{Error, Result};
use crate::evaluate::{
    aipw_scores, blp_calibration, difference_in_means, event_time_ate, insurance_degree, interaction_regressions,
    outcome_distribution, profile_quantiles, rate_qini, Weighting,
};
use crate::policy::{covariate_rules, TargetingCurve, TargetingRule};
use crate::stats::{self, ClusterVariance};

/// A CSV table of preformatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(&self.header)?;
        for r in &self.rows {
            wtr.write_record(r)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr.records().map(|r| Ok(r?.iter().map(str::to_string).collect())).collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("table has no column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .into_iter()
            .map(|v| parse_f64(v).ok_or_else(|| Error::Data(format!("non-numeric `{v}` in column `{name}`"))))
            .collect()
    }
}

fn f(v: f64) -> String {
    fmt_f64(v)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateParams {
    pub outcome: String,
    pub cluster_variance: ClusterVariance,
    pub n_bootstrap: usize,
    pub histogram_bins: usize,
    pub histogram_range: (f64, f64),
    pub seed: u64,
}

impl Default for EvaluateParams {
    fn default() -> Self {
        Self {
            outcome: crate::dataset::MAIN_OUTCOME.into(),
            cluster_variance: ClusterVariance::Cr0,
            n_bootstrap: 200,
            histogram_bins: 40,
            histogram_range: (0.0, 2.0),
            seed: 0,
        }
    }
}

/// Doubly robust scores for every dataset row from the table's cross-fitted
/// predictions; `NaN` where the outcome is missing.
pub fn gamma_scores(ds: &Dataset, table: &CateTable, outcome: &str) -> Result<Vec<f64>> {
    let rows = table.aligned_to(ds)?;
    let y = ds.outcome(outcome)?;
    let w = ds.w();
    let e: Vec<f64> = rows.iter().map(|r| r.e_hat).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.m_hat).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.cate).collect();
    Ok(aipw_scores(&w, y, &e, &m, &t))
}

/// Rows of the held-out test fold, or every row when there is none.
pub fn evaluation_rows(table: &CateTable, ds: &Dataset) -> Result<Vec<usize>> {
    let rows = table.aligned_to(ds)?;
    let test: Vec<usize> = (0..ds.len()).filter(|&i| rows[i].fold == TEST_FOLD).collect();
    Ok(if test.is_empty() { (0..ds.len()).collect() } else { test })
}

/// Evaluation tables keyed by file name.
pub fn evaluation_tables(ds: &Dataset, table: &CateTable, p: &EvaluateParams) -> Result<BTreeMap<String, Table>> {
    let kind = p.cluster_variance;
    let rows = table.aligned_to(ds)?;
    let cate: Vec<f64> = rows.iter().map(|r| r.cate).collect();
    let decile: Vec<usize> = rows.iter().map(|r| r.decile).collect();
    let gamma = gamma_scores(ds, table, &p.outcome)?;
    let mut out = BTreeMap::new();

    let mut t = Table::new(&["outcome", "decile", "ate", "se", "n_treated", "n_control", "aipw_mean", "aipw_se"]);
    let horizon_one: Vec<String> = ["y", "emp", "disp", "locmove", "indmove"]
        .iter()
        .map(|pre| outcome_column(pre, 1))
        .filter(|c| ds.outcomes.contains_key(c))
        .collect();
    let mut decile_ates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in &horizon_one {
        let y = ds.outcome(name)?;
        for d in 1..=10 {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| decile[i] == d).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let ws: Vec<bool> = idx.iter().map(|&i| ds.treated[i]).collect();
            let cs: Vec<u64> = idx.iter().map(|&i| ds.cluster_id[i]).collect();
            let (ate, se, nt, nc) = match difference_in_means(&pick(y), &ws, &cs, kind) {
                Ok(v) => v,
                Err(Error::Insufficient(_)) => (f64::NAN, f64::NAN, 0, 0),
                Err(e) => return Err(e),
            };
            let (am, ase) = if *name == p.outcome {
                match crate::evaluate::clustered_mean(&pick(&gamma), &cs, kind) {
                    Ok((m, s)) => (m, s),
                    Err(Error::Insufficient(_)) => (f64::NAN, f64::NAN),
                    Err(e) => return Err(e),
                }
            } else {
                (f64::NAN, f64::NAN)
            };
            decile_ates.entry(name.clone()).or_default().push(ate);
            t.push(vec![name.clone(), d.to_string(), f(ate), f(se), nt.to_string(), nc.to_string(), f(am), f(ase)]);
        }
    }
    out.insert("decile_ate.csv".into(), t);

    if let (Some(earn), Some(disp)) = (decile_ates.get("y_1"), decile_ates.get("disp_1")) {
        let mut t = Table::new(&["decile", "ate_earnings", "ate_disposable", "insurance_degree"]);
        for d in 0..10 {
            let deg = insurance_degree(earn[d], disp[d]).unwrap_or(f64::NAN);
            t.push(vec![(d + 1).to_string(), f(earn[d]), f(disp[d]), f(deg)]);
        }
        out.insert("insurance.csv".into(), t);
    }

    let y = ds.outcome(&p.outcome)?;
    let wt: Vec<f64> = rows.iter().zip(ds.w()).map(|(r, w)| w - r.e_hat).collect();
    let yt: Vec<f64> = rows.iter().zip(y).map(|(r, y)| y - r.m_hat).collect();
    let cal = blp_calibration(&wt, &yt, &cate, &ds.cluster_id, kind)?;
    let mut t = Table::new(&["alpha", "alpha_se", "beta", "beta_se", "beta_defined", "n", "n_clusters"]);
    t.push(vec![
        f(cal.alpha),
        f(cal.alpha_se),
        f(cal.beta),
        f(cal.beta_se),
        cal.beta_defined.to_string(),
        cal.n.to_string(),
        cal.n_clusters.to_string(),
    ]);
    out.insert("calibration.csv".into(), t);

    let eval = evaluation_rows(table, ds)?;
    let train: Vec<usize> = (0..ds.len()).filter(|&i| rows[i].fold != TEST_FOLD).collect();
    let eval: Vec<usize> = eval.into_iter().filter(|&i| gamma[i].is_finite()).collect();
    let g: Vec<f64> = eval.iter().map(|&i| gamma[i]).collect();
    let cl: Vec<u64> = eval.iter().map(|&i| ds.cluster_id[i]).collect();
    let mut rules: Vec<(String, Vec<f64>)> = vec![("cate".into(), eval.iter().map(|&i| cate[i]).collect())];
    let direction_rows = if train.is_empty() { &eval } else { &train };
    for rule in covariate_rules(ds, direction_rows, &gamma) {
        if let TargetingRule::Covariate { name, descending } = &rule {
            let x = ds.covariate(name)?;
            rules.push((rule.label(), eval.iter().map(|&i| if *descending { -x[i] } else { x[i] }).collect()));
        }
    }
    let mut q = Table::new(&["rule", "qini", "qini_se", "autoc", "autoc_se", "untestable", "n"]);
    let mut toc = Table::new(&["rule", "q", "toc"]);
    for (k, (label, pr)) in rules.iter().enumerate() {
        let r =
            rate_qini(pr, &g, &cl, Weighting::Qini, p.n_bootstrap, crate::rng::derive_seed(p.seed, "qini", k as u64))?;
        q.push(vec![
            label.clone(),
            f(r.qini),
            f(r.qini_se),
            f(r.autoc),
            f(r.autoc_se),
            r.untestable.to_string(),
            g.len().to_string(),
        ]);
        for (qq, v) in &r.toc_curve {
            toc.push(vec![label.clone(), f(*qq), f(*v)]);
        }
    }
    out.insert("qini.csv".into(), q);
    out.insert("toc.csv".into(), toc);

    let quartile: Vec<usize> = rows.iter().map(|r| r.quartile).collect();
    let et = event_time_ate(ds, &quartile, "y", false, kind)?;
    let mut t = Table::new(&[
        "quartile",
        "horizon",
        "ate",
        "se",
        "n_treated",
        "n_control",
        "treated_mean",
        "control_mean",
        "treated_norm",
        "control_norm",
    ]);
    for r in et {
        t.push(vec![
            r.group,
            r.horizon.to_string(),
            f(r.ate),
            f(r.se_clustered),
            r.n_treated.to_string(),
            r.n_control.to_string(),
            f(r.treated_mean),
            f(r.control_mean),
            f(r.treated_norm),
            f(r.control_norm),
        ]);
    }
    out.insert("event_time.csv".into(), t);

    let within = (ds.covariate_index("age").is_some() && ds.covariate_index("schooling").is_some())
        .then_some(("age", "schooling"));
    let prof = profile_quantiles(ds, table, 4, within)?;
    let mut t = Table::new(&["covariate", "kind", "q1", "q2", "q3", "q4", "difference", "within_cell_difference"]);
    for r in prof {
        let mut row = vec![r.covariate, format!("{:?}", r.kind).to_lowercase()];
        row.extend(r.group_means.iter().map(|v| f(*v)));
        row.push(f(r.difference));
        row.push(opt(r.within_cell_difference.map(f)));
        t.push(row);
    }
    out.insert("profiles.csv".into(), t);

    let names = ds.covariate_names();
    let inter = interaction_regressions(ds, &p.outcome, &names, kind)?;
    let mut t = Table::new(&["covariate", "coefficient", "se", "standardized", "sd"]);
    for r in inter {
        t.push(vec![r.covariate, f(r.coefficient), f(r.se), r.standardized.to_string(), f(r.sd)]);
    }
    out.insert("interactions.csv".into(), t);

    let (lo, hi) = p.histogram_range;
    let dist = outcome_distribution(ds, &p.outcome, p.histogram_bins, lo, hi)?;
    let mut t = Table::new(&["bin", "lower", "upper", "treated_density", "control_density"]);
    for k in 0..p.histogram_bins {
        t.push(vec![
            k.to_string(),
            f(dist.edges[k]),
            f(dist.edges[k + 1]),
            f(dist.treated_density[k]),
            f(dist.control_density[k]),
        ]);
    }
    for (label, tv, cv) in [
        ("zero", dist.treated_zero_share, dist.control_zero_share),
        ("mean", dist.treated_mean, dist.control_mean),
        ("n", dist.n_treated as f64, dist.n_control as f64),
    ] {
        t.push(vec![label.into(), String::new(), String::new(), f(tv), f(cv)]);
    }
    out.insert("distribution.csv".into(), t);

    let (ate, se, nt, nc) = difference_in_means(y, &ds.treated, &ds.cluster_id, kind)?;
    let finite: Vec<f64> = cate.iter().copied().filter(|v| v.is_finite()).collect();
    let mut t = Table::new(&["outcome", "ate", "se", "n_treated", "n_control", "mean_cate", "sd_cate"]);
    t.push(vec![
        p.outcome.clone(),
        f(ate),
        f(se),
        nt.to_string(),
        nc.to_string(),
        f(stats::mean(&finite)),
        f(stats::sd(&finite)),
    ]);
    out.insert("summary.csv".into(), t);

    let mut sorted = finite.clone();
    sorted.sort_by(stats::cmp_f64);
    let (clo, chi) = (sorted.first().copied().unwrap_or(0.0), sorted.last().copied().unwrap_or(1.0));
    let bins = 30;
    let width = if chi > clo { (chi - clo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in &finite {
        counts[(((v - clo) / width) as usize).min(bins - 1)] += 1;
    }
    let mut t = Table::new(&["lower", "upper", "density"]);
    for (k, c) in counts.iter().enumerate() {
        let a = clo + k as f64 * width;
        t.push(vec![f(a), f(a + width), f(*c as f64 / (finite.len().max(1) as f64 * width))]);
    }
    out.insert("cate_hist.csv".into(), t);
    Ok(out)
}

/// Targeting curves as one table.
pub fn targeting_table(curves: &[TargetingCurve]) -> Table {
    let mut t =
        Table::new(&["rule", "fraction", "n_selected", "n_treated", "n_control", "ate", "se", "low_power", "seed"]);
    for c in curves {
        for p in &c.points {
            t.push(vec![
                c.rule.clone(),
                f(p.fraction),
                p.n_selected.to_string(),
                p.n_treated.to_string(),
                p.n_control.to_string(),
                f(p.ate),
                f(p.se),
                p.low_power.to_string(),
                c.seed.to_string(),
            ]);
        }
    }
    t
}

pub fn write_tables(dir: &Path, tables: &BTreeMap<String, Table>) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, t) in tables {
        let path = dir.join(name);
        t.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Report tables each plot is drawn from.
pub const PLOT_SOURCES: [(&str, &str); 4] = [
    ("decile_ate.svg", "decile_ate.csv"),
    ("event_time.svg", "event_time.csv"),
    ("targeting.svg", "targeting.csv"),
    ("cate_hist.svg", "cate_hist.csv"),
];

/// Draw every plot whose source table exists in `dir`. Returns the plots
/// written and the source tables that were missing.
pub fn emit_plots(dir: &Path) -> Result<(Vec<std::path::PathBuf>, Vec<String>)> {
    let mut written = Vec::new();
    let mut missing = Vec::new();
    for (svg_name, src) in PLOT_SOURCES {
        let src_path = dir.join(src);
        if !src_path.exists() {
            missing.push(src.to_string());
            continue;
        }
        let t = Table::read(&src_path)?;
        let body = match svg_name {
            "decile_ate.svg" => {
                let outcome = t.column("outcome")?;
                let (ate, se) = (t.numeric("ate")?, t.numeric("se")?);
                let first = outcome.first().copied().unwrap_or("y_1").to_string();
                let keep: Vec<usize> = (0..t.rows.len()).filter(|&k| outcome[k] == first).collect();
                let v: Vec<f64> = keep.iter().map(|&k| ate[k]).collect();
                let e: Vec<f64> = keep.iter().map(|&k| se[k]).collect();
                svg::bar_chart(&format!("ATE on {first} by CATE decile"), "CATE decile", "ATE", &v, &e)
            }
            "event_time.svg" => {
                let group = t.column("quartile")?;
                let (h, ate) = (t.numeric("horizon")?, t.numeric("ate")?);
                let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
                for k in 0..t.rows.len() {
                    series.entry(format!("quartile {}", group[k])).or_default().push((h[k], ate[k]));
                }
                svg::line_chart(
                    "ATE by event time",
                    "years since displacement",
                    "ATE",
                    &series.into_iter().collect::<Vec<_>>(),
                )
            }
            "targeting.svg" => {
                let rule = t.column("rule")?;
                let (q, ate) = (t.numeric("fraction")?, t.numeric("ate")?);
                let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
                for k in 0..t.rows.len() {
                    series.entry(rule[k].to_string()).or_default().push((q[k], ate[k]));
                }
                svg::line_chart(
                    "Targeting curves",
                    "share selected",
                    "ATE of selected",
                    &series.into_iter().collect::<Vec<_>>(),
                )
            }
            _ => {
                let (lo, hi, d) = (t.numeric("lower")?, t.numeric("upper")?, t.numeric("density")?);
                let mut edges = lo.clone();
                edges.extend(hi.last());
                let ate = dir
                    .join("summary.csv")
                    .exists()
                    .then(|| Table::read(&dir.join("summary.csv")).and_then(|s| s.numeric("ate")))
                    .transpose()?
                    .and_then(|v| v.first().copied());
                svg::histogram("Distribution of CATEs", "CATE", &edges, &d, ate)
            }
        };
        let path = dir.join(svg_name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok((written, missing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), f(f64::NAN)]);
        t.push(vec!["x,y".into(), f(0.25)]);
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        let back = Table::read(&p).unwrap();
        assert_eq!(back, t);
        assert!(back.numeric("a").is_err());
        assert!(back.numeric("b").unwrap()[0].is_nan());
    }
}
