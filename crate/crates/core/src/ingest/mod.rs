//! From a raw worker-year panel to the pre-matching analysis table: closure
//! detection, the false-closure filter, sample restrictions, covariates and
//! normalized outcomes.

mod covariates;
mod formulas;
mod panel;

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{outcome_column, Dataset, HORIZONS};
use crate::error::{Error, Result};

pub use covariates::{compute_covariates, impute_missing, mincer_residuals, MincerFit};
pub use formulas::{
    churn_rate, establishment_wage_premium, growth_metric, hhi, reallocation_rate, shift_share_exposure,
};
pub use panel::{read_panel_csv, write_panel_csv, Panel, PanelRecord, WorkerYear, REQUIRED_COLUMNS};

/// Optional panel columns with a fixed meaning; other extra columns pass
/// through to the dataset untouched.
pub const KNOWN_EXTRA: [&str; 6] = ["female", "immigrant", "married", "children", "routine", "disposable_income"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Minimum monthly wage; `None` uses a twelfth of the year's 10th
    /// percentile of positive main-job earnings.
    pub min_monthly_wage: Option<f64>,
    /// Employed means main-job earnings of at least this many minimum
    /// monthly wages.
    pub employment_multiple: f64,
    pub min_establishment_size: usize,
    /// Closing establishments keep at most this share of `t-1` employment.
    pub closure_retention: f64,
    pub false_closure_share: f64,
    pub min_age: f64,
    pub max_age: f64,
    pub min_tenure: usize,
    pub tenure_cap: usize,
    /// Inclusive range of manufacturing industry codes.
    pub manufacturing_codes: (u32, u32),
    /// Smallest schooling-by-industry cell used for routine imputation.
    pub routine_cell_min: usize,
    /// Years back for the industry trend.
    pub trend_lookback: i32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_monthly_wage: None,
            employment_multiple: 3.0,
            min_establishment_size: 5,
            closure_retention: 0.1,
            false_closure_share: 0.3,
            min_age: 24.0,
            max_age: 60.0,
            min_tenure: 3,
            tenure_cap: 10,
            manufacturing_codes: (100, 339),
            routine_cell_min: 100,
            trend_lookback: 10,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.closure_retention >= 0.0 && self.closure_retention < 1.0) {
            return Err(Error::Config("closure_retention must lie in [0, 1)".into()));
        }
        if !(self.false_closure_share > 0.0 && self.false_closure_share <= 1.0) {
            return Err(Error::Config("false_closure_share must lie in (0, 1]".into()));
        }
        if self.min_age > self.max_age {
            return Err(Error::Config("min_age exceeds max_age".into()));
        }
        if self.min_monthly_wage.is_some_and(|w| !(w > 0.0)) || !(self.employment_multiple > 0.0) {
            return Err(Error::Config("the employment threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureEvent {
    pub establishment_id: u64,
    pub firm_id: u64,
    pub event_year: i32,
    /// Workers employed at the establishment in `t-1`.
    pub n_displaced: usize,
    pub emp_before: usize,
    pub emp_after: usize,
    pub is_false_closure: bool,
}

fn require_years(panel: &Panel, t: i32, years: &[i32]) -> Result<()> {
    for &y in years {
        if !panel.covers(y) {
            return Err(Error::Coverage { year: y, event_year: t });
        }
    }
    Ok(())
}

/// Establishment fate between `t-1` and `t+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Closing,
    Surviving,
    Other,
}

fn fate(panel: &Panel, e: u64, t: i32, cfg: &IngestConfig) -> Fate {
    let before = panel.employment(e, t - 1);
    if before < cfg.min_establishment_size {
        return Fate::Other;
    }
    let after = panel.employment(e, t + 1) as f64;
    if after <= cfg.closure_retention * before as f64 {
        if panel.employment(e, t) >= 1 {
            Fate::Closing
        } else {
            Fate::Other
        }
    } else {
        Fate::Surviving
    }
}

/// Establishments with at least `min_establishment_size` employees in `t-1`
/// that keep at most `closure_retention` of them in `t+1` and still have an
/// employed worker in `t`.
pub fn detect_closures(panel: &Panel, t: i32, cfg: &IngestConfig) -> Result<Vec<ClosureEvent>> {
    require_years(panel, t, &[t - 1, t, t + 1])?;
    Ok(panel
        .establishments(t - 1)
        .into_iter()
        .filter(|&e| fate(panel, e, t, cfg) == Fate::Closing)
        .map(|e| {
            let staff = panel.staff(e, t - 1);
            ClosureEvent {
                establishment_id: e,
                firm_id: panel.rows[staff[0]].firm_id,
                event_year: t,
                n_displaced: staff.len(),
                emp_before: staff.len(),
                emp_after: panel.employment(e, t + 1),
                is_false_closure: false,
            }
        })
        .collect())
}

/// Flag events where at least `false_closure_share` of the workers are
/// employed in `t+1` at one single other establishment, or at other
/// establishments of the same firm.
pub fn filter_false_closures(events: &[ClosureEvent], panel: &Panel, cfg: &IngestConfig) -> Vec<ClosureEvent> {
    events
        .iter()
        .map(|ev| {
            let t = ev.event_year;
            let workers: Vec<u64> =
                panel.staff(ev.establishment_id, t - 1).iter().map(|&i| panel.rows[i].worker_id).collect();
            let mut by_dest: HashMap<u64, usize> = HashMap::new();
            let mut same_firm = 0usize;
            for w in &workers {
                if let Some(r) = panel.get(*w, t + 1).filter(|r| panel.is_employed(r)) {
                    if r.establishment_id == ev.establishment_id {
                        continue;
                    }
                    *by_dest.entry(r.establishment_id).or_default() += 1;
                    if r.firm_id == ev.firm_id {
                        same_firm += 1;
                    }
                }
            }
            let cut = cfg.false_closure_share * workers.len() as f64 - 1e-9;
            let largest = by_dest.values().copied().max().unwrap_or(0);
            ClosureEvent { is_false_closure: largest as f64 >= cut || same_firm as f64 >= cut, ..ev.clone() }
        })
        .collect()
}

/// Consecutive years up to `t-1` whose main job satisfies `same`, counted up
/// to `cap`.
fn spell_length(panel: &Panel, worker: u64, t: i32, cap: usize, same: impl Fn(&WorkerYear) -> bool) -> usize {
    let mut n = 0;
    while n < cap {
        match panel.get(worker, t - 1 - n as i32) {
            Some(r) if same(r) => n += 1,
            _ => break,
        }
    }
    n
}

/// Treated workers at genuine closures and eligible controls at surviving
/// establishments for event year `t`: employed in `t-1`, aged within
/// `[min_age, max_age]` and with at least `min_tenure` years at the
/// establishment. Covariates and outcomes are not yet filled in.
pub fn build_samples(panel: &Panel, events: &[ClosureEvent], t: i32, cfg: &IngestConfig) -> Result<Dataset> {
    require_years(panel, t, &[t - 1, t, t + 1])?;
    let closing: HashMap<u64, bool> =
        events.iter().filter(|e| e.event_year == t).map(|e| (e.establishment_id, e.is_false_closure)).collect();
    let mut ds = Dataset::default();
    let tenure_reach = cfg.min_tenure.max(cfg.tenure_cap);
    for e in panel.establishments(t - 1) {
        let treated = match closing.get(&e) {
            Some(false) => true,
            Some(true) => continue,
            None if fate(panel, e, t, cfg) == Fate::Surviving => false,
            None => continue,
        };
        for &i in panel.staff(e, t - 1) {
            let r = &panel.rows[i];
            if r.age < cfg.min_age || r.age > cfg.max_age {
                continue;
            }
            if spell_length(panel, r.worker_id, t, tenure_reach, |x| x.establishment_id == e) < cfg.min_tenure {
                continue;
            }
            ds.worker_id.push(r.worker_id);
            ds.event_year.push(t);
            ds.cluster_id.push(e);
            ds.group_id.push(e);
            ds.industry.push(r.industry_code);
            ds.location.push(r.location_id);
            ds.treated.push(treated);
            ds.matched_to.push(None);
        }
    }
    if ds.n_treated() == 0 {
        return Err(Error::Sample(format!("no eligible displaced workers in event year {t}")));
    }
    Ok(ds.sorted_by_key())
}

/// Normalized earnings `y_k`, employment `emp_k`, location and industry moves
/// and (when the panel has it) normalized disposable income, for every
/// horizon the panel covers. Absent worker-years count as zero earnings.
pub fn compute_outcomes(panel: &Panel, ds: &mut Dataset) -> Result<()> {
    let has_disp = panel.extra_columns.contains("disposable_income");
    let n = ds.len();
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let families: &[&str] =
        if has_disp { &["y", "emp", "locmove", "indmove", "disp"] } else { &["y", "emp", "locmove", "indmove"] };
    for h in HORIZONS {
        for f in families {
            cols.insert(outcome_column(f, h), vec![f64::NAN; n]);
        }
    }
    for i in 0..n {
        let (w, t) = (ds.worker_id[i], ds.event_year[i]);
        let base = panel.get(w, t - 1).ok_or_else(|| Error::Data(format!("worker {w} has no record in {}", t - 1)))?;
        if !(base.total_earnings > 0.0) {
            return Err(Error::Data(format!("worker {w} has zero earnings in {}", t - 1)));
        }
        let disp_base = base.extra_f64("disposable_income");
        for h in HORIZONS {
            let year = t + h;
            if !panel.covers(year) {
                continue;
            }
            let rec = panel.get(w, year);
            let earn = rec.map_or(0.0, |r| r.total_earnings);
            let employed = rec.is_some_and(|r| panel.is_employed(r));
            let mut set = |f: &str, v: f64| cols.get_mut(&outcome_column(f, h)).expect("column exists")[i] = v;
            set("y", earn / base.total_earnings);
            set("emp", if employed { 1.0 } else { 0.0 });
            if let Some(r) = rec {
                set("locmove", if r.location_id != base.location_id { 1.0 } else { 0.0 });
                if employed {
                    set("indmove", if r.industry_code != base.industry_code { 1.0 } else { 0.0 });
                }
                if has_disp && disp_base > 0.0 {
                    set("disp", r.extra_f64("disposable_income") / disp_base);
                }
            }
        }
    }
    ds.outcomes.extend(cols);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IngestResult {
    pub dataset: Dataset,
    pub events: Vec<ClosureEvent>,
    /// Event years without any eligible displaced worker.
    pub skipped_years: Vec<i32>,
    pub n_main_job_ties: usize,
}

/// Run closure detection, filtering, sampling, covariates and outcomes over
/// a range of event years and stack the years.
pub fn ingest(records: Vec<PanelRecord>, years: RangeInclusive<i32>, cfg: &IngestConfig) -> Result<IngestResult> {
    cfg.validate()?;
    let panel = Panel::new(records, cfg)?;
    let per_year: Vec<(i32, Result<(Dataset, Vec<ClosureEvent>)>)> = years
        .collect::<Vec<i32>>()
        .into_par_iter()
        .map(|t| {
            let run = || -> Result<(Dataset, Vec<ClosureEvent>)> {
                let events = filter_false_closures(&detect_closures(&panel, t, cfg)?, &panel, cfg);
                let mut ds = build_samples(&panel, &events, t, cfg)?;
                compute_outcomes(&panel, &mut ds)?;
                compute_covariates(&panel, &mut ds, cfg)?;
                Ok((ds, events))
            };
            (t, run())
        })
        .collect();

    let mut parts = Vec::new();
    let mut events = Vec::new();
    let mut skipped_years = Vec::new();
    for (t, r) in per_year {
        match r {
            Ok((ds, ev)) => {
                parts.push(ds);
                events.extend(ev);
            }
            Err(Error::Sample(_)) => skipped_years.push(t),
            Err(e) => return Err(e),
        }
    }
    if parts.is_empty() {
        return Err(Error::Sample("no event year has eligible displaced workers".into()));
    }
    let mut dataset = stack(parts)?;
    impute_missing(&mut dataset);
    let dataset = dataset.sorted_by_key();
    dataset.validate()?;
    Ok(IngestResult { dataset, events, skipped_years, n_main_job_ties: panel.n_main_job_ties })
}

/// Concatenate per-year tables with identical columns.
fn stack(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut out = it.next().expect("at least one part");
    for p in it {
        if p.covariate_specs != out.covariate_specs
            || p.outcomes.keys().ne(out.outcomes.keys())
            || p.passthrough.keys().ne(out.passthrough.keys())
        {
            return Err(Error::Data("event years produced different column sets".into()));
        }
        out.worker_id.extend(p.worker_id);
        out.event_year.extend(p.event_year);
        out.cluster_id.extend(p.cluster_id);
        out.group_id.extend(p.group_id);
        out.industry.extend(p.industry);
        out.location.extend(p.location);
        out.treated.extend(p.treated);
        out.matched_to.extend(p.matched_to);
        for (c, v) in out.covariates.iter_mut().zip(p.covariates) {
            c.extend(v);
        }
        for (k, v) in p.outcomes {
            out.outcomes.get_mut(&k).expect("same keys").extend(v);
        }
        for (k, v) in p.passthrough {
            out.passthrough.get_mut(&k).expect("same keys").extend(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WAGE: f64 = 1000.0;

    fn cfg() -> IngestConfig {
        IngestConfig { min_monthly_wage: Some(WAGE), ..IngestConfig::default() }
    }

    /// `n` workers at `est` over `years`, ids starting at `first_id`.
    fn staff(out: &mut Vec<PanelRecord>, est: u64, first_id: u64, n: u64, years: RangeInclusive<i32>) {
        for w in first_id..first_id + n {
            for y in years.clone() {
                out.push(PanelRecord::new(w, y, est, 40_000.0));
            }
        }
    }

    fn panel(records: Vec<PanelRecord>) -> Panel {
        Panel::new(records, &cfg()).unwrap()
    }

    #[test]
    fn closure_thresholds() {
        let mut r = Vec::new();
        // 1: 10 workers, all gone by 2001 but active in 2000.
        staff(&mut r, 1, 100, 10, 1997..=2000);
        // 2: 10 workers, 2 remain in 2001.
        staff(&mut r, 2, 200, 8, 1997..=2000);
        staff(&mut r, 2, 210, 2, 1997..=2001);
        // 3: 4 workers only.
        staff(&mut r, 3, 300, 4, 1997..=2000);
        // Keep 2001 covered.
        staff(&mut r, 9, 900, 5, 1997..=2001);
        let p = panel(r);
        let ev = detect_closures(&p, 2000, &cfg()).unwrap();
        let ids: Vec<u64> = ev.iter().map(|e| e.establishment_id).collect();
        assert_eq!(ids, vec![1]);
        assert!(matches!(detect_closures(&p, 2001, &cfg()), Err(Error::Coverage { year: 2002, .. })));
    }

    #[test]
    fn false_closure_rules() {
        let build = |dest: &dyn Fn(u64) -> (u64, u64)| {
            let mut r = Vec::new();
            staff(&mut r, 1, 100, 10, 1998..=2000);
            for w in 100..110 {
                let (est, firm) = dest(w);
                let mut rec = PanelRecord::new(w, 2001, est, 40_000.0);
                rec.firm_id = firm;
                r.push(rec);
            }
            let p = panel(r);
            let ev = detect_closures(&p, 2000, &cfg()).unwrap();
            filter_false_closures(&ev, &p, &cfg())[0].is_false_closure
        };
        assert!(build(&|w| if w < 103 { (50, 50) } else { (1000 + w, 1000 + w) }));
        assert!(!build(&|w| if w < 102 { (50, 50) } else { (1000 + w, 1000 + w) }));
        // Four land in distinct sister establishments of firm 1.
        assert!(build(&|w| if w < 104 { (500 + w, 1) } else { (1000 + w, 1000 + w) }));
    }

    #[test]
    fn sample_restrictions_and_outcomes() {
        let mut r = Vec::new();
        staff(&mut r, 1, 100, 10, 1996..=2000);
        staff(&mut r, 2, 200, 10, 1996..=2002);
        for rec in r.iter_mut() {
            if rec.worker_id == 101 {
                rec.age = 61.0;
            }
            if rec.worker_id == 102 && rec.year < 1998 {
                rec.establishment_id = 7;
            }
        }
        // Worker 100 earns half in 2001 and 2.5 monthly wages in 2002.
        r.push(PanelRecord::new(100, 2001, 3, 20_000.0));
        r.push(PanelRecord::new(100, 2002, 3, 2.5 * WAGE));
        let p = panel(r);
        let ev = filter_false_closures(&detect_closures(&p, 2000, &cfg()).unwrap(), &p, &cfg());
        let mut ds = build_samples(&p, &ev, 2000, &cfg()).unwrap();
        assert!(!ds.worker_id.contains(&101));
        assert!(!ds.worker_id.contains(&102));
        assert_eq!(ds.n_treated(), 8);
        assert_eq!(ds.len(), 18);
        compute_outcomes(&p, &mut ds).unwrap();
        let i = ds.worker_id.iter().position(|&w| w == 100).unwrap();
        assert_eq!(ds.outcome("y_1").unwrap()[i], 0.5);
        assert_eq!(ds.outcome("emp_2").unwrap()[i], 0.0);
        assert_eq!(ds.outcome("indmove_2").unwrap()[i].is_nan(), true);
        let j = ds.worker_id.iter().position(|&w| w == 103).unwrap();
        assert_eq!(ds.outcome("y_1").unwrap()[j], 0.0);
        assert!(ds.outcome("y_3").unwrap()[j].is_nan());
    }

    #[test]
    fn full_ingest_is_order_independent() {
        let mut r = Vec::new();
        staff(&mut r, 1, 100, 10, 1994..=2000);
        staff(&mut r, 2, 200, 12, 1994..=2003);
        staff(&mut r, 3, 300, 8, 1994..=2003);
        for (k, rec) in r.iter_mut().enumerate() {
            rec.age = 25.0 + (k % 30) as f64;
            rec.schooling_years = 9.0 + (k % 7) as f64;
            rec.earnings = 30_000.0 + 500.0 * (k % 13) as f64;
            rec.industry_code = 100 + (rec.establishment_id as u32 % 2);
            rec.location_id = 1;
            rec.extra.insert("note".into(), format!("n{}", rec.worker_id));
        }
        let a = ingest(r.clone(), 2000..=2000, &cfg()).unwrap();
        r.reverse();
        let b = ingest(r, 2000..=2000, &cfg()).unwrap();
        assert_eq!(format!("{:?}", a.dataset), format!("{:?}", b.dataset));
        assert_eq!(a.dataset.n_treated(), 10);
        assert!(a.dataset.passthrough.contains_key("note"));
        assert!(a.dataset.covariate_index("plant_wage_premium").is_some());
    }
}
