//! Column-oriented analysis table shared by every stage.
//!
//! One row per (worker, event year). Covariates are stored column-major and
//! carry a [`CovariateSpec`]; outcomes are named `f64` columns with `NaN`
//! marking a missing value.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Main outcome: normalized earnings one year after the event.
pub const MAIN_OUTCOME: &str = "y_1";
/// Event-time horizons carried by outcome columns.
pub const HORIZONS: std::ops::RangeInclusive<i32> = -3..=10;

/// Column name for an outcome family at an event-time horizon, e.g. `y_m3`, `emp_1`.
pub fn outcome_column(prefix: &str, horizon: i32) -> String {
    if horizon < 0 {
        format!("{prefix}_m{}", -horizon)
    } else {
        format!("{prefix}_{horizon}")
    }
}

const OUTCOME_PREFIXES: [&str; 5] = ["y_", "emp_", "locmove_", "indmove_", "disp_"];
const COVARIATE_PREFIX: &str = "x_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Dummy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateLevel {
    Worker,
    Family,
    HumanCapital,
    Job,
    Industry,
    Location,
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub level: CovariateLevel,
}

impl CovariateSpec {
    pub fn new(name: &str, kind: CovariateKind, level: CovariateLevel) -> Self {
        Self { name: name.to_string(), kind, level }
    }
}

/// Level of a covariate by name. Missingness indicators (`*_missing`) share the
/// level of their base variable; unknown names are treated as worker-level.
pub fn known_level(name: &str) -> CovariateLevel {
    use CovariateLevel::*;
    let base = name.strip_suffix("_missing").unwrap_or(name);
    match base {
        "age" | "female" | "immigrant" => Worker,
        "married"
        | "children"
        | "children_school_age"
        | "household_earnings_share"
        | "born_outside_region"
        | "location_moves" => Family,
        "schooling" | "experience" | "earnings_t1" | "earnings_t2" | "earnings_t3" | "earnings_rank" | "tenure"
        | "industry_tenure" | "field_specificity" | "stem" | "licensed" => HumanCapital,
        "plant_size"
        | "plant_size_trend"
        | "plant_wage_premium"
        | "routine"
        | "manager"
        | "event_share"
        | "industry_education_match" => Job,
        "industry_wage_premium"
        | "churn"
        | "reallocation"
        | "industry_trend"
        | "industry_cycle"
        | "manufacturing"
        | "public_sector" => Industry,
        "local_unemployment"
        | "local_employment"
        | "pop_density"
        | "hhi"
        | "local_manufacturing_share"
        | "local_trend"
        | "local_cycle"
        | "local_churn"
        | "local_reallocation" => Location,
        "year" | "aggregate_unemployment" => Aggregate,
        _ => Worker,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub worker_id: Vec<u64>,
    pub event_year: Vec<i32>,
    /// Pre-displacement establishment: the unit of clustering.
    pub cluster_id: Vec<u64>,
    /// Closing establishment that determines fold membership. Matched
    /// controls carry the group of the treated worker they were matched to.
    pub group_id: Vec<u64>,
    pub industry: Vec<u32>,
    pub location: Vec<u32>,
    pub treated: Vec<bool>,
    pub matched_to: Vec<Option<u64>>,
    pub covariate_specs: Vec<CovariateSpec>,
    /// Column-major covariates, parallel to `covariate_specs`.
    pub covariates: Vec<Vec<f64>>,
    pub outcomes: BTreeMap<String, Vec<f64>>,
    pub passthrough: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.worker_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.worker_id.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_specs.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariate_specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_specs.iter().position(|s| s.name == name)
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariate_index(name)
            .map(|j| self.covariates[j].as_slice())
            .ok_or_else(|| Error::Data(format!("unknown covariate `{name}`")))
    }

    pub fn outcome(&self, name: &str) -> Result<&[f64]> {
        self.outcomes
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("unknown outcome column `{name}`")))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.covariates.iter().map(|c| c[i]).collect()
    }

    /// Row-major copy of the covariate matrix.
    pub fn x_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    pub fn w(&self) -> Vec<f64> {
        self.treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&t| t).count()
    }

    pub fn key(&self, i: usize) -> (u64, i32) {
        (self.worker_id[i], self.event_year[i])
    }

    pub fn index_by_key(&self) -> HashMap<(u64, i32), usize> {
        (0..self.len()).map(|i| (self.key(i), i)).collect()
    }

    pub fn add_covariate(&mut self, spec: CovariateSpec, values: Vec<f64>) {
        if let Some(j) = self.covariate_index(&spec.name) {
            self.covariate_specs[j] = spec;
            self.covariates[j] = values;
        } else {
            self.covariate_specs.push(spec);
            self.covariates.push(values);
        }
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
            idx.iter().map(|&i| v[i].clone()).collect()
        }
        Dataset {
            worker_id: pick(&self.worker_id, idx),
            event_year: pick(&self.event_year, idx),
            cluster_id: pick(&self.cluster_id, idx),
            group_id: pick(&self.group_id, idx),
            industry: pick(&self.industry, idx),
            location: pick(&self.location, idx),
            treated: pick(&self.treated, idx),
            matched_to: pick(&self.matched_to, idx),
            covariate_specs: self.covariate_specs.clone(),
            covariates: self.covariates.iter().map(|c| pick(c, idx)).collect(),
            outcomes: self.outcomes.iter().map(|(k, v)| (k.clone(), pick(v, idx))).collect(),
            passthrough: self.passthrough.iter().map(|(k, v)| (k.clone(), pick(v, idx))).collect(),
        }
    }

    /// Stable order by (worker_id, event_year).
    pub fn sorted_by_key(&self) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by_key(|&i| self.key(i));
        self.subset(&idx)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.event_year.len(),
            self.cluster_id.len(),
            self.group_id.len(),
            self.industry.len(),
            self.location.len(),
            self.treated.len(),
            self.matched_to.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Data("dataset id columns have mismatched lengths".into()));
        }
        if self.covariates.len() != self.covariate_specs.len() {
            return Err(Error::Data("covariate specs and columns disagree".into()));
        }
        for (spec, col) in self.covariate_specs.iter().zip(&self.covariates) {
            if col.len() != n {
                return Err(Error::Data(format!("covariate `{}` has {} rows, expected {n}", spec.name, col.len())));
            }
        }
        let mut names: Vec<&str> = self.covariate_specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("duplicate covariate names".into()));
        }
        for (name, col) in self.outcomes.iter() {
            if col.len() != n {
                return Err(Error::Data(format!("outcome `{name}` has {} rows, expected {n}", col.len())));
            }
        }
        let mut keys: Vec<(u64, i32)> = (0..n).map(|i| self.key(i)).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("duplicate (worker_id, event_year) rows".into()));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<String> =
            ["worker_id", "event_year", "cluster_id", "group_id", "industry", "location", "treated", "matched_to"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        header.extend(self.covariate_specs.iter().map(|s| format!("{COVARIATE_PREFIX}{}", s.name)));
        header.extend(self.outcomes.keys().cloned());
        header.extend(self.passthrough.keys().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = vec![
                self.worker_id[i].to_string(),
                self.event_year[i].to_string(),
                self.cluster_id[i].to_string(),
                self.group_id[i].to_string(),
                self.industry[i].to_string(),
                self.location[i].to_string(),
                u8::from(self.treated[i]).to_string(),
                self.matched_to[i].map(|m| m.to_string()).unwrap_or_default(),
            ];
            rec.extend(self.covariates.iter().map(|c| fmt_f64(c[i])));
            rec.extend(self.outcomes.values().map(|c| fmt_f64(c[i])));
            rec.extend(self.passthrough.values().map(|c| c[i].clone()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
        };
        let id_cols = [
            col("worker_id")?,
            col("event_year")?,
            col("cluster_id")?,
            col("group_id")?,
            col("industry")?,
            col("location")?,
            col("treated")?,
            col("matched_to")?,
        ];
        let mut cov_cols = Vec::new();
        let mut out_cols = Vec::new();
        let mut pass_cols = Vec::new();
        for (j, h) in headers.iter().enumerate() {
            if id_cols.contains(&j) {
                continue;
            }
            if let Some(name) = h.strip_prefix(COVARIATE_PREFIX) {
                cov_cols.push((j, name.to_string()));
            } else if OUTCOME_PREFIXES.iter().any(|p| h.starts_with(p)) {
                out_cols.push((j, h.to_string()));
            } else {
                pass_cols.push((j, h.to_string()));
            }
        }

        let mut ds = Dataset::default();
        let mut covs: Vec<Vec<f64>> = vec![Vec::new(); cov_cols.len()];
        let mut outs: Vec<Vec<f64>> = vec![Vec::new(); out_cols.len()];
        let mut pass: Vec<Vec<String>> = vec![Vec::new(); pass_cols.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let ctx = |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 2));
            ds.worker_id.push(field(id_cols[0]).parse().map_err(|_| ctx("worker_id"))?);
            ds.event_year.push(field(id_cols[1]).parse().map_err(|_| ctx("event_year"))?);
            ds.cluster_id.push(field(id_cols[2]).parse().map_err(|_| ctx("cluster_id"))?);
            ds.group_id.push(field(id_cols[3]).parse().map_err(|_| ctx("group_id"))?);
            ds.industry.push(field(id_cols[4]).parse().map_err(|_| ctx("industry"))?);
            ds.location.push(field(id_cols[5]).parse().map_err(|_| ctx("location"))?);
            ds.treated.push(match field(id_cols[6]) {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(ctx("treated")),
            });
            let m = field(id_cols[7]);
            ds.matched_to.push(if m.is_empty() { None } else { Some(m.parse().map_err(|_| ctx("matched_to"))?) });
            for (k, (j, name)) in cov_cols.iter().enumerate() {
                covs[k].push(parse_f64(field(*j)).ok_or_else(|| ctx(name))?);
            }
            for (k, (j, name)) in out_cols.iter().enumerate() {
                outs[k].push(parse_f64(field(*j)).ok_or_else(|| ctx(name))?);
            }
            for (k, (j, _)) in pass_cols.iter().enumerate() {
                pass[k].push(field(*j).to_string());
            }
        }
        for ((_, name), values) in cov_cols.into_iter().zip(covs) {
            let kind = if stats::is_dummy(&values) { CovariateKind::Dummy } else { CovariateKind::Continuous };
            let level = known_level(&name);
            ds.covariate_specs.push(CovariateSpec { name, kind, level });
            ds.covariates.push(values);
        }
        ds.outcomes = out_cols.into_iter().map(|(_, n)| n).zip(outs).collect();
        ds.passthrough = pass_cols.into_iter().map(|(_, n)| n).zip(pass).collect();
        ds.validate()?;
        Ok(ds)
    }
}

/// Shortest round-trip decimal; `NaN` becomes the empty string.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        Some(f64::NAN)
    } else {
        s.parse().ok()
    }
}
