//! Stage functions, run manifests and the cached end-to-end pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossfit::{crossfit_cate, group_cates, make_folds, CateTable, FoldAssignment, TEST_FOLD};
use crate::dataset::{fmt_f64, Dataset};
use crate::dgp::{generate_panel, write_oracle_csv, DgpConfig};
use crate::error::{Error, Result};
use crate::forest::{CausalForest, ForestParams};
use crate::ingest::{ingest, read_panel_csv, IngestConfig};
use crate::matching::match_dataset;
use crate::partials::{partial_effects, quartile_cross_tabs, quartile_profiles, CovariatePartition, PartialsParams};
use crate::policy::{
    covariate_rules, evaluate_policy, fit_policy_tree, targeting_curve, PolicyTreeParams, TargetingRule,
    DEFAULT_FRACTIONS,
};
use crate::report::{
    emit_plots, evaluation_tables, gamma_scores, targeting_table, write_tables, EvaluateParams, Table,
};
use crate::rng::{derive_seed, tie_key};

pub const CONFIG_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_SUFFIX: &str = ".manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

// ---------------------------------------------------------------------------
// Stages

/// Simulated panel and oracle into `dir`.
pub fn step_simulate(dgp: &DgpConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let (ds, oracle) = generate_panel(dgp)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (panel, oracle_path) = (dir.join("panel.csv"), dir.join("oracle.csv"));
    ds.write_csv(&panel)?;
    write_oracle_csv(&oracle_path, &oracle)?;
    Ok(vec![panel, oracle_path])
}

/// Worker-level dataset from a raw panel; closure events go next to it.
pub fn step_ingest(panel: &Path, first: i32, last: i32, cfg: &IngestConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let records = read_panel_csv(panel)?;
    let res = ingest(records, first..=last, cfg)?;
    ensure_parent(out)?;
    res.dataset.write_csv(out)?;
    let events = sibling(out, ".closures.csv");
    let mut wtr = csv::Writer::from_path(&events)?;
    for e in &res.events {
        wtr.serialize(e)?;
    }
    wtr.flush().map_err(|e| Error::io(&events, e))?;
    Ok(vec![out.to_path_buf(), events])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// When false the dataset passes through unmatched.
    pub enabled: bool,
    pub k: usize,
    pub caliper: Option<f64>,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { enabled: true, k: 3, caliper: None }
    }
}

pub fn step_match(input: &Path, cfg: &MatchingConfig, out: &Path, balance: &Path) -> Result<Vec<PathBuf>> {
    let ds = Dataset::read_csv(input)?;
    ensure_parent(out)?;
    ensure_parent(balance)?;
    let mut t = Table::new(&["covariate", "smd_before", "smd_after", "flagged"]);
    if cfg.enabled {
        let res = match_dataset(&ds, cfg.k, cfg.caliper)?;
        res.dataset.write_csv(out)?;
        for r in &res.balance.rows {
            t.push(vec![r.covariate.clone(), fmt_f64(r.smd_before), fmt_f64(r.smd_after), r.flagged.to_string()]);
        }
        t.push(vec!["matching_ratio".into(), String::new(), fmt_f64(res.balance.matching_ratio), String::new()]);
        t.push(vec!["n_shortfall".into(), String::new(), res.balance.n_shortfall.to_string(), String::new()]);
    } else {
        ds.sorted_by_key().write_csv(out)?;
    }
    t.write(balance)?;
    Ok(vec![out.to_path_buf(), balance.to_path_buf()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldConfig {
    pub n_folds: usize,
    pub test_fraction: f64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { n_folds: 5, test_fraction: 0.2 }
    }
}

/// Cross-fitted CATEs plus the fold assignment (`<stem>.folds.json`).
pub fn step_crossfit(
    input: &Path,
    folds: &FoldConfig,
    params: &ForestParams,
    outcome: &str,
    fold_seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = Dataset::read_csv(input)?;
    let assignment = make_folds(&ds, folds.n_folds, folds.test_fraction, fold_seed)?;
    let mut res = crossfit_cate(&ds, &assignment, outcome, params)?;
    group_cates(&mut res.table, &ds)?;
    ensure_parent(out)?;
    res.table.write_csv(out)?;
    let folds_path = sibling(out, ".folds.json");
    write_text(&folds_path, &serde_json::to_string_pretty(&assignment)?)?;
    Ok(vec![out.to_path_buf(), folds_path])
}

/// Forest on every row outside the test fold (all rows without `folds`).
pub fn step_fit(
    input: &Path,
    folds: Option<&Path>,
    params: &ForestParams,
    outcome: &str,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = Dataset::read_csv(input)?;
    let row_fold = match folds {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let a: FoldAssignment = serde_json::from_str(&text)?;
            a.row_folds(&ds)?
        }
        None => vec![1; ds.len()],
    };
    let y = ds.outcome(outcome)?;
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| row_fold[i] != TEST_FOLD && y[i].is_finite()).collect();
    let train = ds.subset(&rows);
    let forest = CausalForest::fit(
        &train.covariates,
        train.outcome(outcome)?,
        &train.w(),
        &train.cluster_id,
        &train.covariate_names(),
        params,
    )?;
    ensure_parent(out)?;
    forest.save(out)?;
    Ok(vec![out.to_path_buf()])
}

pub fn step_evaluate(dataset: &Path, cates: &Path, params: &EvaluateParams, dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = Dataset::read_csv(dataset)?;
    let table = CateTable::read_csv(cates)?;
    let tables = evaluation_tables(&ds, &table, params)?;
    write_tables(dir, &tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Per-person cost of treating, on the outcome scale.
    pub cost: f64,
    pub tree: PolicyTreeParams,
    pub fractions: Vec<f64>,
    pub outcome: String,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            cost: 0.0,
            tree: PolicyTreeParams::default(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            outcome: crate::dataset::MAIN_OUTCOME.into(),
        }
    }
}

/// Policy tree fit on training-fold scores, evaluated with targeting curves on
/// the test fold (or on `test` rows when given).
pub fn step_policy(
    dataset: &Path,
    cates: &Path,
    test: Option<&Path>,
    cfg: &PolicyConfig,
    seed: u64,
    out: &Path,
    report_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = Dataset::read_csv(dataset)?;
    let table = CateTable::read_csv(cates)?;
    let rows = table.aligned_to(&ds)?;
    let gamma = gamma_scores(&ds, &table, &cfg.outcome)?;
    let test_keys: Option<std::collections::HashSet<(u64, i32)>> = match test {
        Some(p) => {
            let t = Dataset::read_csv(p)?;
            Some((0..t.len()).map(|i| t.key(i)).collect())
        }
        None => None,
    };
    let is_test = |i: usize| match &test_keys {
        Some(k) => k.contains(&ds.key(i)),
        None => rows[i].fold == TEST_FOLD,
    };
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !is_test(i) && gamma[i].is_finite()).collect();
    let test_rows: Vec<usize> = (0..ds.len()).filter(|&i| is_test(i)).collect();
    if train.is_empty() || test_rows.is_empty() {
        return Err(Error::Insufficient(format!(
            "policy needs training and test rows ({} and {})",
            train.len(),
            test_rows.len()
        )));
    }
    let cols: Vec<Vec<f64>> = ds.covariates.iter().map(|c| train.iter().map(|&i| c[i]).collect()).collect();
    let g: Vec<f64> = train.iter().map(|&i| gamma[i]).collect();
    let tree = fit_policy_tree(&cols, &ds.covariate_names(), &g, cfg.cost, &cfg.tree)?;
    write_text(out, &tree.to_json()?)?;

    let test_ds = ds.subset(&test_rows);
    let test_gamma: Vec<f64> = test_rows.iter().map(|&i| gamma[i]).collect();
    let test_cate: Vec<f64> = test_rows.iter().map(|&i| rows[i].cate).collect();
    let kind = crate::stats::ClusterVariance::Cr0;
    let eval = evaluate_policy(&tree, &test_ds, &cfg.outcome, Some(&test_gamma), kind)?;
    let mut rules = vec![TargetingRule::Cate];
    rules.extend(covariate_rules(&ds, &train, &gamma));
    rules.push(TargetingRule::Random);
    rules.push(TargetingRule::PolicyTree { tree: tree.clone() });
    let curves = rules
        .iter()
        .map(|r| targeting_curve(&test_ds, r, Some(&test_cate), &cfg.outcome, &cfg.fractions, seed, kind))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let targeting = report_dir.join("targeting.csv");
    targeting_table(&curves).write(&targeting)?;
    let mut t = Table::new(&[
        "cost",
        "objective",
        "degenerate",
        "share_treated",
        "n_selected",
        "ate",
        "ate_se",
        "gamma_mean",
        "gamma_se",
        "defined",
    ]);
    t.push(vec![
        fmt_f64(cfg.cost),
        fmt_f64(tree.objective),
        tree.degenerate.map(|d| format!("{d:?}").to_lowercase()).unwrap_or_default(),
        fmt_f64(eval.share_treated),
        eval.n_selected.to_string(),
        fmt_f64(eval.ate),
        fmt_f64(eval.ate_se),
        eval.gamma_mean.map(fmt_f64).unwrap_or_default(),
        eval.gamma_se.map(fmt_f64).unwrap_or_default(),
        eval.defined.to_string(),
    ]);
    let policy_eval = report_dir.join("policy_eval.csv");
    t.write(&policy_eval)?;
    Ok(vec![out.to_path_buf(), targeting, policy_eval])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartialsConfig {
    pub enabled: bool,
    /// Rows rotated at most; larger inputs use a seeded subsample.
    pub max_rows: Option<usize>,
    pub max_markets: usize,
    /// Trees in the forest used for rotations; `None` keeps the forest setting.
    pub num_trees: Option<usize>,
    pub outcomes: Vec<String>,
}

impl Default for PartialsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rows: Some(2000),
            max_markets: 200,
            num_trees: Some(500),
            outcomes: vec!["y_1".into(), "locmove_1".into(), "indmove_1".into()],
        }
    }
}

pub fn step_partials(
    forest: &Path,
    dataset: &Path,
    partition: Option<&Path>,
    cfg: &PartialsConfig,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let forest = CausalForest::load(forest)?;
    let mut ds = Dataset::read_csv(dataset)?;
    if let Some(m) = cfg.max_rows.filter(|&m| m < ds.len()) {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        let key = |i: usize| tie_key(seed, ds.worker_id[i].wrapping_mul(1 << 16) ^ ds.event_year[i] as u64);
        idx.sort_by_key(|&i| (key(i), ds.key(i)));
        idx.truncate(m);
        idx.sort_unstable();
        ds = ds.subset(&idx);
    }
    let partition = match partition {
        Some(p) => CovariatePartition::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => CovariatePartition::default_for(&ds),
    };
    let params = PartialsParams { max_markets: cfg.max_markets, seed };
    let pe = partial_effects(&forest, &ds, &partition, &params)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tables: BTreeMap<String, Table> = BTreeMap::new();
    for (name, effects) in [("locations.csv", &pe.locations), ("industries.csv", &pe.industries)] {
        let mut t = Table::new(&["id", "effect", "n_workers", "years", "skipped_years"]);
        for m in effects {
            let join = |v: &[i32]| v.iter().map(|y| y.to_string()).collect::<Vec<_>>().join(";");
            t.push(vec![
                m.id.to_string(),
                fmt_f64(m.effect),
                m.n_workers.to_string(),
                join(&m.years),
                join(&m.skipped_years),
            ]);
        }
        tables.insert(name.into(), t);
    }
    let mut t = Table::new(&[
        "worker_id",
        "event_year",
        "location_effect",
        "industry_effect",
        "worker_effect",
        "location_quartile",
        "industry_quartile",
        "worker_quartile",
        "n_markets",
    ]);
    for w in &pe.workers {
        t.push(vec![
            w.worker_id.to_string(),
            w.event_year.to_string(),
            fmt_f64(w.location_effect),
            fmt_f64(w.industry_effect),
            fmt_f64(w.worker_effect),
            w.location_quartile.to_string(),
            w.industry_quartile.to_string(),
            w.worker_quartile.to_string(),
            w.n_markets.to_string(),
        ]);
    }
    tables.insert("workers.csv".into(), t);
    let tabs = quartile_cross_tabs(&pe, &ds, &cfg.outcomes, crate::stats::ClusterVariance::Cr0)?;
    let mut t =
        Table::new(&["panel", "outcome", "worker_quartile", "market_quartile", "ate", "se", "n_treated", "n_control"]);
    for r in tabs {
        t.push(vec![
            r.panel,
            r.outcome,
            r.worker_quartile.map(|q| q.to_string()).unwrap_or_default(),
            r.market_quartile.map(|q| q.to_string()).unwrap_or_default(),
            fmt_f64(r.ate),
            fmt_f64(r.se),
            r.n_treated.to_string(),
            r.n_control.to_string(),
        ]);
    }
    tables.insert("cross_tabs.csv".into(), t);
    let mut t = Table::new(&["block", "covariate", "q1", "q2", "q3", "q4"]);
    for p in quartile_profiles(&pe, &ds) {
        let mut row = vec![format!("{:?}", p.block).to_lowercase(), p.covariate];
        row.extend(p.means.iter().map(|v| fmt_f64(*v)));
        t.push(row);
    }
    tables.insert("quartile_profiles.csv".into(), t);
    let mut t = Table::new(&["rows", "max_markets", "market_cap_active", "seed"]);
    t.push(vec![ds.len().to_string(), cfg.max_markets.to_string(), pe.market_cap_active.to_string(), seed.to_string()]);
    tables.insert("partials_summary.csv".into(), t);
    write_tables(dir, &tables)
}

/// SVG plots for a report directory. Missing source tables are reported.
pub fn step_report(dir: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("report directory {} does not exist", dir.display())));
    }
    emit_plots(dir)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Digest of the stage name, its configuration and its input digests.
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub skipped: bool,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub wall_ms: u128,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }
}

fn digests(paths: &[PathBuf], base: Option<&Path>) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let name = match base {
                Some(b) => p.strip_prefix(b).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                None => p.to_string_lossy().into_owned(),
            };
            Ok((name, file_digest(p)?))
        })
        .collect()
}

/// Manifest path for a standalone command writing `out`: `out/manifest.json`
/// for directories, `<out>.manifest.json` for files.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join(MANIFEST_NAME)
    } else {
        let name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{name}{MANIFEST_SUFFIX}"))
    }
}

/// Record a standalone command run. Output names are stored relative to the
/// manifest's directory.
pub fn write_command_manifest(
    subcommand: &str,
    config: &serde_json::Value,
    seed: u64,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    out: &Path,
    started: Instant,
) -> Result<PathBuf> {
    let path = manifest_path_for(out);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let canon_base = base.canonicalize().map_err(|e| Error::io(&base, e))?;
    let outputs_abs: Vec<PathBuf> =
        outputs.iter().map(|p| p.canonicalize().map_err(|e| Error::io(p, e))).collect::<Result<_>>()?;
    let m = RunManifest {
        subcommand: subcommand.into(),
        artifact_version: ARTIFACT_VERSION.into(),
        config_hash: sha256_hex(serde_json::to_string(config)?.as_bytes()),
        seed,
        input_digests: digests(inputs, None)?,
        output_digests: digests(&outputs_abs, Some(&canon_base))?,
        stages: Vec::new(),
        wall_ms: started.elapsed().as_millis(),
    };
    m.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub manifests: Vec<PathBuf>,
    pub checked: usize,
    /// Files not listed by any manifest.
    pub orphans: Vec<PathBuf>,
    /// Listed files that are missing or whose digest changed.
    pub mismatched: Vec<PathBuf>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.orphans.is_empty() && self.mismatched.is_empty()
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Check that every file under `dir` is an output of some manifest in the
/// tree and that recorded digests still match.
pub fn audit(dir: &Path) -> Result<AuditReport> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let is_manifest = |p: &Path| {
        p.file_name().map(|n| n.to_string_lossy()).is_some_and(|n| n == MANIFEST_NAME || n.ends_with(MANIFEST_SUFFIX))
    };
    let mut report = AuditReport::default();
    let mut listed: BTreeMap<PathBuf, String> = BTreeMap::new();
    for m in files.iter().filter(|p| is_manifest(p)) {
        let manifest = RunManifest::load(m)?;
        let base = m.parent().unwrap_or(dir);
        for (name, digest) in &manifest.output_digests {
            listed.insert(base.join(name), digest.clone());
        }
        report.manifests.push(m.clone());
    }
    for (path, digest) in &listed {
        report.checked += 1;
        if file_digest(path).ok().as_deref() != Some(digest.as_str()) {
            report.mismatched.push(path.clone());
        }
    }
    let config = dir.join(CONFIG_COPY);
    report.orphans = files.into_iter().filter(|p| !is_manifest(p) && !listed.contains_key(p) && *p != config).collect();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Pipeline

pub const CONFIG_COPY: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    Simulate {
        #[serde(default)]
        dgp: DgpConfig,
    },
    Panel {
        path: PathBuf,
        first_year: i32,
        last_year: i32,
        #[serde(default)]
        ingest: IngestConfig,
    },
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Simulate { dgp: DgpConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    /// Every stage seed derives from this one.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub input: InputConfig,
    pub matching: MatchingConfig,
    pub folds: FoldConfig,
    pub forest: ForestParams,
    pub evaluate: EvaluateParams,
    pub policy: PolicyConfig,
    pub partials: PartialsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            out_dir: PathBuf::from("run"),
            threads: None,
            input: InputConfig::default(),
            matching: MatchingConfig::default(),
            folds: FoldConfig::default(),
            forest: ForestParams::default(),
            evaluate: EvaluateParams::default(),
            policy: PolicyConfig::default(),
            partials: PartialsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not {CONFIG_VERSION}", self.version)));
        }
        match &self.input {
            InputConfig::Simulate { dgp } => dgp.validate()?,
            InputConfig::Panel { first_year, last_year, ingest, .. } => {
                ingest.validate()?;
                if first_year > last_year {
                    return Err(Error::Config("first_year is after last_year".into()));
                }
            }
        }
        if self.matching.enabled && self.matching.k == 0 {
            return Err(Error::Config("matching k must be positive".into()));
        }
        if self.matching.caliper.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("caliper must be positive".into()));
        }
        if self.folds.n_folds < 2 || !(0.0..1.0).contains(&self.folds.test_fraction) {
            return Err(Error::Config("need at least 2 folds and a test fraction in [0, 1)".into()));
        }
        self.forest.validate()?;
        if self.evaluate.n_bootstrap == 0 || self.evaluate.histogram_bins == 0 {
            return Err(Error::Config("bootstrap replicates and histogram bins must be positive".into()));
        }
        if !self.policy.cost.is_finite() || self.policy.fractions.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(Error::Config("policy cost must be finite and fractions in (0, 1]".into()));
        }
        if !(1..=2).contains(&self.policy.tree.depth) || self.policy.tree.n_thresholds < 2 {
            return Err(Error::Config("policy tree depth must be 1 or 2 with at least 2 thresholds".into()));
        }
        if self.partials.max_markets == 0 || self.partials.max_rows == Some(0) || self.partials.num_trees == Some(0) {
            return Err(Error::Config("partials limits must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str, local: u64) -> u64 {
        derive_seed(self.seed, stage, local)
    }
}

struct Runner<'a> {
    out: &'a Path,
    previous: BTreeMap<String, StageRecord>,
    stages: Vec<StageRecord>,
    log: &'a mut dyn FnMut(&str, bool),
}

impl Runner<'_> {
    fn run<T: Serialize>(
        &mut self,
        name: &str,
        config: &T,
        inputs: &[PathBuf],
        f: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let started = Instant::now();
        let wrap = |e: Error| Error::Stage { stage: name.into(), source: Box::new(e) };
        let input_digests = digests(inputs, Some(self.out)).map_err(wrap)?;
        let mut hasher = Sha256::new();
        hasher.update(name.as_bytes());
        hasher.update(ARTIFACT_VERSION.as_bytes());
        hasher.update(serde_json::to_string(config).map_err(|e| wrap(e.into()))?.as_bytes());
        for (k, v) in &input_digests {
            hasher.update(k.as_bytes());
            hasher.update(v.as_bytes());
        }
        let key = hex::encode(hasher.finalize());
        if let Some(prev) = self.previous.get(name).filter(|p| p.key == key) {
            let fresh =
                prev.outputs.iter().all(|(p, d)| file_digest(&self.out.join(p)).ok().as_deref() == Some(d.as_str()));
            if fresh {
                (self.log)(name, true);
                self.stages.push(StageRecord { skipped: true, wall_ms: 0, ..prev.clone() });
                return Ok(());
            }
        }
        let outputs = f().map_err(wrap)?;
        let outputs = digests(&outputs, Some(self.out)).map_err(wrap)?;
        (self.log)(name, false);
        self.stages.push(StageRecord {
            name: name.into(),
            key,
            inputs: input_digests,
            outputs,
            skipped: false,
            wall_ms: started.elapsed().as_millis(),
        });
        Ok(())
    }
}

/// Run every stage in dependency order, skipping stages whose configuration
/// and inputs are unchanged and whose outputs are intact. `log` receives each
/// stage name and whether it was skipped.
pub fn run_pipeline(cfg: &PipelineConfig, log: &mut dyn FnMut(&str, bool)) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join(MANIFEST_NAME);
    let previous = RunManifest::load(&manifest_path)
        .map(|m| m.stages.into_iter().map(|s| (s.name.clone(), s)).collect())
        .unwrap_or_default();
    let config_text = serde_json::to_string_pretty(cfg)?;
    write_text(&out.join(CONFIG_COPY), &config_text)?;

    let mut runner = Runner { out, previous, stages: Vec::new(), log };
    let p = |rel: &str| out.join(rel);
    let mut external = Vec::new();

    let dataset = match &cfg.input {
        InputConfig::Simulate { dgp } => {
            let dgp = DgpConfig { seed: cfg.stage_seed("dgp", dgp.seed), ..dgp.clone() };
            let dir = p("data");
            runner.run("simulate", &dgp, &[], || step_simulate(&dgp, &dir))?;
            p("data/panel.csv")
        }
        InputConfig::Panel { path, first_year, last_year, ingest } => {
            external.push(path.clone());
            let target = p("data/dataset.csv");
            let conf = (first_year, last_year, ingest, file_digest(path)?);
            runner.run("ingest", &conf, &[], || step_ingest(path, *first_year, *last_year, ingest, &target))?;
            target
        }
    };

    let matched = p("data/matched.csv");
    runner.run("match", &cfg.matching, &[dataset.clone()], || {
        step_match(&dataset, &cfg.matching, &matched, &p("data/balance.csv"))
    })?;

    let forest_params = ForestParams { seed: cfg.stage_seed("forest", cfg.forest.seed), ..cfg.forest.clone() };
    let fold_seed = cfg.stage_seed("folds", 0);
    let cates = p("model/cates.csv");
    let outcome = cfg.evaluate.outcome.clone();
    runner.run("crossfit", &(&cfg.folds, &forest_params, &outcome, fold_seed), &[matched.clone()], || {
        step_crossfit(&matched, &cfg.folds, &forest_params, &outcome, fold_seed, &cates)
    })?;
    let folds = p("model/cates.folds.json");

    let report = p("report");
    let eval_params = EvaluateParams { seed: cfg.stage_seed("evaluate", cfg.evaluate.seed), ..cfg.evaluate.clone() };
    runner.run("evaluate", &eval_params, &[matched.clone(), cates.clone()], || {
        step_evaluate(&matched, &cates, &eval_params, &report)
    })?;

    let policy_seed = cfg.stage_seed("policy", 0);
    runner.run("policy", &(&cfg.policy, policy_seed), &[matched.clone(), cates.clone()], || {
        step_policy(&matched, &cates, None, &cfg.policy, policy_seed, &p("policy/policy.json"), &report)
    })?;

    if cfg.partials.enabled {
        let forest_path = p("model/forest.bin");
        let fit_params = ForestParams {
            num_trees: cfg.partials.num_trees.unwrap_or(forest_params.num_trees),
            ..forest_params.clone()
        };
        runner.run("fit", &(&fit_params, &outcome), &[matched.clone(), folds.clone()], || {
            step_fit(&matched, Some(&folds), &fit_params, &outcome, &forest_path)
        })?;
        let test_path = p("data/test.csv");
        let partials_seed = cfg.stage_seed("partials", 0);
        runner.run(
            "partials",
            &(&cfg.partials, partials_seed),
            &[forest_path.clone(), matched.clone(), folds.clone()],
            || {
                let ds = Dataset::read_csv(&matched)?;
                let text = std::fs::read_to_string(&folds).map_err(|e| Error::io(&folds, e))?;
                let a: FoldAssignment = serde_json::from_str(&text)?;
                let rf = a.row_folds(&ds)?;
                let rows: Vec<usize> = (0..ds.len()).filter(|&i| rf[i] == TEST_FOLD).collect();
                ds.subset(&rows).write_csv(&test_path)?;
                let mut written =
                    step_partials(&forest_path, &test_path, None, &cfg.partials, partials_seed, &p("partials"))?;
                written.push(test_path.clone());
                Ok(written)
            },
        )?;
    }

    let report_inputs: Vec<PathBuf> = crate::report::PLOT_SOURCES
        .iter()
        .map(|(_, src)| report.join(src))
        .chain(std::iter::once(report.join("summary.csv")))
        .filter(|p| p.exists())
        .collect();
    runner.run("report", &"plots", &report_inputs, || step_report(&report).map(|(w, _)| w))?;

    let stages = runner.stages;
    let output_digests: BTreeMap<String, String> =
        stages.iter().flat_map(|s| s.outputs.iter().map(|(k, v)| (k.clone(), v.clone()))).collect();
    let manifest = RunManifest {
        subcommand: "run".into(),
        artifact_version: ARTIFACT_VERSION.into(),
        config_hash: sha256_hex(config_text.as_bytes()),
        seed: cfg.seed,
        input_digests: digests(&external, None)?,
        output_digests,
        stages,
        wall_ms: started.elapsed().as_millis(),
    };
    manifest.save(&manifest_path)?;
    Ok(manifest)
}
