//! Raw worker-year records and the indexed panel built from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IngestConfig;
use crate::dataset::parse_f64;
use crate::error::{Error, Result};
use crate::stats;

/// Columns every panel file must carry.
pub const REQUIRED_COLUMNS: [&str; 9] = [
    "worker_id",
    "year",
    "establishment_id",
    "firm_id",
    "industry_code",
    "location_id",
    "earnings",
    "age",
    "schooling_years",
];

/// One job record of a worker in a year. A worker may hold several jobs in a
/// year; the one with the highest earnings is the main job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub worker_id: u64,
    pub year: i32,
    pub establishment_id: u64,
    pub firm_id: u64,
    pub industry_code: u32,
    pub location_id: u32,
    pub earnings: f64,
    pub age: f64,
    pub schooling_years: f64,
    /// Optional columns (demographics, routine score, disposable income, or
    /// anything else, which is passed through).
    pub extra: BTreeMap<String, String>,
}

impl PanelRecord {
    pub fn new(worker_id: u64, year: i32, establishment_id: u64, earnings: f64) -> Self {
        Self {
            worker_id,
            year,
            establishment_id,
            firm_id: establishment_id,
            industry_code: 0,
            location_id: 0,
            earnings,
            age: 40.0,
            schooling_years: 12.0,
            extra: BTreeMap::new(),
        }
    }
}

pub fn read_panel_csv(path: &Path) -> Result<Vec<PanelRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| headers.iter().position(|h| h == name);
    let mut req = [0usize; 9];
    for (k, name) in REQUIRED_COLUMNS.iter().enumerate() {
        req[k] = pos(name).ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))?;
    }
    let extra: Vec<(usize, String)> =
        headers.iter().enumerate().filter(|(j, _)| !req.contains(j)).map(|(j, h)| (j, h.to_string())).collect();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |k: usize| rec.get(req[k]).unwrap_or("");
        let bad = |k: usize| Error::Data(format!("{}: row {}: bad {}", path.display(), line + 2, REQUIRED_COLUMNS[k]));
        let num = |k: usize| parse_f64(f(k)).filter(|v| v.is_finite()).ok_or_else(|| bad(k));
        out.push(PanelRecord {
            worker_id: f(0).parse().map_err(|_| bad(0))?,
            year: f(1).parse().map_err(|_| bad(1))?,
            establishment_id: f(2).parse().map_err(|_| bad(2))?,
            firm_id: f(3).parse().map_err(|_| bad(3))?,
            industry_code: f(4).parse().map_err(|_| bad(4))?,
            location_id: f(5).parse().map_err(|_| bad(5))?,
            earnings: num(6)?,
            age: num(7)?,
            schooling_years: num(8)?,
            extra: extra.iter().map(|(j, h)| (h.clone(), rec.get(*j).unwrap_or("").to_string())).collect(),
        });
    }
    Ok(out)
}

pub fn write_panel_csv(path: &Path, records: &[PanelRecord]) -> Result<()> {
    let extra: BTreeSet<&String> = records.iter().flat_map(|r| r.extra.keys()).collect();
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(extra.iter().map(|s| s.as_str()));
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.worker_id.to_string(),
            r.year.to_string(),
            r.establishment_id.to_string(),
            r.firm_id.to_string(),
            r.industry_code.to_string(),
            r.location_id.to_string(),
            r.earnings.to_string(),
            r.age.to_string(),
            r.schooling_years.to_string(),
        ];
        row.extend(extra.iter().map(|k| r.extra.get(*k).cloned().unwrap_or_default()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// A worker's main job in a year, with total earnings over all jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerYear {
    pub worker_id: u64,
    pub year: i32,
    pub establishment_id: u64,
    pub firm_id: u64,
    pub industry_code: u32,
    pub location_id: u32,
    pub main_earnings: f64,
    pub total_earnings: f64,
    pub age: f64,
    pub schooling_years: f64,
    pub extra: BTreeMap<String, String>,
    /// Two jobs tied for the highest earnings; the smaller establishment id won.
    pub main_job_tie: bool,
}

impl WorkerYear {
    pub fn extra_f64(&self, name: &str) -> f64 {
        self.extra.get(name).and_then(|v| parse_f64(v)).unwrap_or(f64::NAN)
    }
}

/// Worker-year panel indexed by worker, year and establishment.
#[derive(Debug, Clone)]
pub struct Panel {
    /// Sorted by (worker_id, year).
    pub rows: Vec<WorkerYear>,
    pub years: BTreeSet<i32>,
    pub extra_columns: BTreeSet<String>,
    pub n_main_job_ties: usize,
    index: HashMap<(u64, i32), usize>,
    thresholds: BTreeMap<i32, f64>,
    /// Employed rows of each (establishment, year), in worker order.
    staff: HashMap<(u64, i32), Vec<usize>>,
    industry_emp: HashMap<(u32, i32), usize>,
}

impl Panel {
    pub fn new(records: Vec<PanelRecord>, cfg: &IngestConfig) -> Result<Self> {
        let mut records = records;
        for r in &records {
            if !(r.earnings >= 0.0) || !r.earnings.is_finite() {
                return Err(Error::Data(format!(
                    "worker {} in {}: earnings must be finite and nonnegative",
                    r.worker_id, r.year
                )));
            }
        }
        records.sort_by(|a, b| {
            (a.worker_id, a.year)
                .cmp(&(b.worker_id, b.year))
                .then(b.earnings.total_cmp(&a.earnings))
                .then(a.establishment_id.cmp(&b.establishment_id))
        });
        let extra_columns: BTreeSet<String> = records.iter().flat_map(|r| r.extra.keys().cloned()).collect();
        let mut rows: Vec<WorkerYear> = Vec::new();
        let mut n_main_job_ties = 0;
        let mut k = 0;
        while k < records.len() {
            let first = &records[k];
            let mut end = k + 1;
            let mut total = stats::NeumaierSum::default();
            total.add(first.earnings);
            while end < records.len() && (records[end].worker_id, records[end].year) == (first.worker_id, first.year) {
                total.add(records[end].earnings);
                end += 1;
            }
            let tie = end > k + 1 && records[k + 1].earnings == first.earnings;
            n_main_job_ties += usize::from(tie);
            rows.push(WorkerYear {
                worker_id: first.worker_id,
                year: first.year,
                establishment_id: first.establishment_id,
                firm_id: first.firm_id,
                industry_code: first.industry_code,
                location_id: first.location_id,
                main_earnings: first.earnings,
                total_earnings: total.value(),
                age: first.age,
                schooling_years: first.schooling_years,
                extra: first.extra.clone(),
                main_job_tie: tie,
            });
            k = end;
        }

        let years: BTreeSet<i32> = rows.iter().map(|r| r.year).collect();
        let mut thresholds = BTreeMap::new();
        for &y in &years {
            let t = match cfg.min_monthly_wage {
                Some(w) => cfg.employment_multiple * w,
                None => {
                    let mut pos: Vec<f64> =
                        rows.iter().filter(|r| r.year == y && r.main_earnings > 0.0).map(|r| r.main_earnings).collect();
                    pos.sort_by(stats::cmp_f64);
                    if pos.is_empty() {
                        f64::INFINITY
                    } else {
                        cfg.employment_multiple * stats::quantile_sorted(&pos, 0.1) / 12.0
                    }
                }
            };
            thresholds.insert(y, t);
        }
        let index = rows.iter().enumerate().map(|(i, r)| ((r.worker_id, r.year), i)).collect();
        let mut staff: HashMap<(u64, i32), Vec<usize>> = HashMap::new();
        let mut industry_emp: HashMap<(u32, i32), usize> = HashMap::new();
        for (i, r) in rows.iter().enumerate() {
            if r.main_earnings >= thresholds[&r.year] {
                staff.entry((r.establishment_id, r.year)).or_default().push(i);
                *industry_emp.entry((r.industry_code, r.year)).or_default() += 1;
            }
        }
        Ok(Self { rows, years, extra_columns, n_main_job_ties, index, thresholds, staff, industry_emp })
    }

    pub fn get(&self, worker_id: u64, year: i32) -> Option<&WorkerYear> {
        self.index.get(&(worker_id, year)).map(|&i| &self.rows[i])
    }

    /// Annual main-job earnings needed to count as employed.
    pub fn threshold(&self, year: i32) -> f64 {
        self.thresholds.get(&year).copied().unwrap_or(f64::INFINITY)
    }

    pub fn is_employed(&self, r: &WorkerYear) -> bool {
        r.main_earnings >= self.threshold(r.year)
    }

    pub fn covers(&self, year: i32) -> bool {
        self.years.contains(&year)
    }

    /// Employed rows whose main job is at `establishment` in `year`.
    pub fn staff(&self, establishment: u64, year: i32) -> &[usize] {
        self.staff.get(&(establishment, year)).map_or(&[], Vec::as_slice)
    }

    pub fn employment(&self, establishment: u64, year: i32) -> usize {
        self.staff(establishment, year).len()
    }

    pub fn industry_employment(&self, industry: u32, year: i32) -> usize {
        self.industry_emp.get(&(industry, year)).copied().unwrap_or(0)
    }

    /// Establishments with employed staff in `year`, in id order.
    pub fn establishments(&self, year: i32) -> Vec<u64> {
        let mut v: Vec<u64> = self.staff.keys().filter(|(_, y)| *y == year).map(|(e, _)| *e).collect();
        v.sort_unstable();
        v
    }
}
