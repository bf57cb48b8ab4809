//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured values, then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use jobloss_core::crossfit::{crossfit_cate, make_folds, CateTable, TEST_FOLD};
use jobloss_core::dataset::{CovariateKind, CovariateLevel, CovariateSpec};
use jobloss_core::dgp::{self, generate_panel, CountRange, DgpConfig, OracleRecord};
use jobloss_core::evaluate::{self, aipw_score, aipw_scores, blp_calibration, rate_qini, Weighting};
use jobloss_core::forest::{CausalForest, ForestParams, RegressionForest};
use jobloss_core::ingest;
use jobloss_core::partials::{self, CatePredictor, CovariatePartition, PartialsParams};
use jobloss_core::pipeline::{run_pipeline, PipelineConfig};
use jobloss_core::policy::{self, threshold_grid, PolicyTreeParams, TargetingRule, DEFAULT_FRACTIONS};
use jobloss_core::rng::{derive_seed, substream};
use jobloss_core::stats::{self, ClusterVariance};
use jobloss_core::Dataset;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const CV: ClusterVariance = ClusterVariance::Cr0;

/// Writes straight to the process stdout so the line survives output capture.
fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion:>2}: {verdict}  {detail}");
}

struct DefaultRun {
    ds: Dataset,
    oracle: Vec<OracleRecord>,
    table: CateTable,
    elapsed: Duration,
}

/// Cross-fitted CATEs on the default generator, shared by several criteria.
fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (ds, oracle) = generate_panel(&DgpConfig::default()).expect("default generator");
        let started = Instant::now();
        let folds = make_folds(&ds, 5, 0.2, 11).expect("folds");
        let fit = crossfit_cate(&ds, &folds, "y_1", &ForestParams::default()).expect("crossfit");
        DefaultRun { ds, oracle, table: fit.table, elapsed: started.elapsed() }
    })
}

fn global_deciles(values: &[f64]) -> Vec<usize> {
    let keys: Vec<usize> = (0..values.len()).collect();
    stats::balanced_bins(values, &keys, 10)
}

fn decile_means(values: &[f64], bins: &[usize]) -> Vec<f64> {
    (1..=10)
        .map(|d| {
            let v: Vec<f64> = values.iter().zip(bins).filter(|(_, &b)| b == d).map(|(v, _)| *v).collect();
            stats::mean(&v)
        })
        .collect()
}

fn aipw_for(run: &DefaultRun) -> Vec<f64> {
    let y = run.ds.outcome("y_1").unwrap();
    let r = &run.table.rows;
    let w = run.ds.w();
    let e: Vec<f64> = r.iter().map(|r| r.e_hat).collect();
    let m: Vec<f64> = r.iter().map(|r| r.m_hat).collect();
    let c: Vec<f64> = r.iter().map(|r| r.cate).collect();
    aipw_scores(&w, y, &e, &m, &c)
}

#[test]
fn criterion_01_oracle_cate_recovery() {
    let run = default_run();
    assert_eq!(run.ds.len(), 20_000);
    let cate = run.table.cates();
    let tau: Vec<f64> = run.oracle.iter().map(|o| o.true_tau).collect();
    let rho = stats::spearman(&cate, &tau);

    let by_cate = decile_means(&tau, &global_deciles(&cate));
    let by_tau = decile_means(&tau, &global_deciles(&tau));
    let true_range = by_tau[9] - by_tau[0];
    let gap = by_cate[9] - by_cate[0];
    let share = gap / true_range;

    // The time budget is stated for four cores; scale by the cores available.
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let budget = Duration::from_secs(300) * 4 / cores as u32;
    let pass = rho >= 0.5 && by_cate[0] < by_cate[9] && share >= 0.6 && run.elapsed <= budget;
    report(
        1,
        pass,
        &format!(
            "spearman={rho:.3} (>=0.5) decile1 tau={:.3} decile10 tau={:.3} share of true range={share:.3} (>=0.6) \
             crossfit {:.0}s on {cores} core(s) (budget {:.0}s)",
            by_cate[0],
            by_cate[9],
            run.elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_decile_monotonicity() {
    let run = default_run();
    let test: Vec<usize> = (0..run.ds.len()).filter(|&i| run.table.rows[i].fold == TEST_FOLD).collect();
    let y = run.ds.outcome("y_1").unwrap();
    let pick = |f: &dyn Fn(usize) -> f64| test.iter().map(|&i| f(i)).collect::<Vec<f64>>();
    let yt = pick(&|i| y[i]);
    let wt: Vec<bool> = test.iter().map(|&i| run.ds.treated[i]).collect();
    let ct: Vec<u64> = test.iter().map(|&i| run.ds.cluster_id[i]).collect();
    let dt: Vec<usize> = test.iter().map(|&i| run.table.rows[i].decile).collect();
    let est = evaluate::group_ate(&yt, &wt, &ct, &dt, None, CV).unwrap();
    assert_eq!(est.len(), 10);

    let mut inversions = Vec::new();
    for k in 0..9 {
        let drop = est[k].ate - est[k + 1].ate;
        if drop > 0.0 {
            inversions.push((k + 1, drop, est[k].se_clustered.max(est[k + 1].se_clustered)));
        }
    }
    let pass = inversions.len() <= 1 && inversions.iter().all(|&(_, d, se)| d <= se);
    let ates: Vec<String> = est.iter().map(|e| format!("{:.3}", e.ate)).collect();
    report(2, pass, &format!("decile ATEs [{}]; inversions (decile, size, 1 SE) {inversions:.3?}", ates.join(", ")));
    assert!(pass);
}

/// Propensity score and control mean that the generator uses at `t+1`.
fn true_nuisances(cfg: &DgpConfig, ds: &Dataset, oracle: &[OracleRecord]) -> (Vec<f64>, Vec<f64>) {
    let premium = ds.covariate("plant_wage_premium").unwrap();
    let trend = ds.covariate("industry_trend").unwrap();
    let base = (cfg.closure_rate / (1.0 - cfg.closure_rate)).ln();
    let trend_sd = (1.0f64 / 12.0).sqrt();
    let centred: Vec<f64> = oracle.iter().map(|o| o.tau_linear - cfg.effect_intercept).collect();
    let s = stats::sd(&centred);
    let e: Vec<f64> = (0..ds.len())
        .map(|i| {
            let risk = -(premium[i] / 0.1 + trend[i] / trend_sd) / std::f64::consts::SQRT_2;
            1.0 / (1.0 + (-(base + cfg.confounding * risk)).exp())
        })
        .collect();
    let m: Vec<f64> = (0..ds.len())
        .map(|i| {
            let z = if s > 0.0 { centred[i] / s } else { 0.0 };
            let m0 = 1.0 + 2.0 * cfg.growth + 2.0 * cfg.trajectory_slope * cfg.quality_correlation * z;
            m0 + e[i] * oracle[i].true_tau
        })
        .collect();
    (e, m)
}

#[test]
fn criterion_03_calibration_with_oracle_predictions() {
    let mut passed = 0;
    let mut lines = Vec::new();
    for r in 0..20u64 {
        let cfg = DgpConfig {
            establishments_per_market: CountRange(50, 50),
            seed: derive_seed(3, "acceptance/calibration", r),
            ..DgpConfig::default()
        };
        let (ds, oracle) = generate_panel(&cfg).unwrap();
        assert_eq!(ds.len(), 50_000);
        let tau: Vec<f64> = oracle.iter().map(|o| o.true_tau).collect();
        let (e, m) = true_nuisances(&cfg, &ds, &oracle);
        let w = ds.w();
        let y = ds.outcome("y_1").unwrap();
        let wt: Vec<f64> = w.iter().zip(&e).map(|(w, e)| w - e).collect();
        let yt: Vec<f64> = y.iter().zip(&m).map(|(y, m)| y - m).collect();
        let fit = blp_calibration(&wt, &yt, &tau, &ds.cluster_id, CV).unwrap();
        let ok = (0.9..=1.1).contains(&fit.alpha) && (0.9..=1.1).contains(&fit.beta);
        passed += usize::from(ok);
        lines.push(format!("{:.3}/{:.3}", fit.alpha, fit.beta));
    }
    let pass = passed >= 18;
    report(
        3,
        pass,
        &format!("{passed}/20 replications with alpha, beta in [0.9, 1.1] (>=18); alpha/beta: {}", lines.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_03b_calibration_with_estimated_nuisances() {
    // Same check with out-of-bag forest nuisances instead of the true ones.
    let cfg = DgpConfig {
        establishments_per_market: CountRange(50, 50),
        seed: derive_seed(3, "acceptance/calibration", 0),
        ..DgpConfig::default()
    };
    let (ds, oracle) = generate_panel(&cfg).unwrap();
    let tau: Vec<f64> = oracle.iter().map(|o| o.true_tau).collect();
    let params = ForestParams { num_trees: 100, seed: 5, ..ForestParams::default() };
    let w = ds.w();
    let y = ds.outcome("y_1").unwrap();
    let e = RegressionForest::fit(&ds.covariates, &w, &ds.cluster_id, &params).unwrap().oob_values();
    let m = RegressionForest::fit(&ds.covariates, y, &ds.cluster_id, &params).unwrap().oob_values();
    let wt: Vec<f64> = w.iter().zip(&e).map(|(w, e)| w - e.clamp(0.01, 0.99)).collect();
    let yt: Vec<f64> = y.iter().zip(&m).map(|(y, m)| y - m).collect();
    let fit = blp_calibration(&wt, &yt, &tau, &ds.cluster_id, CV).unwrap();
    let ok = (0.85..=1.15).contains(&fit.alpha) && (0.85..=1.15).contains(&fit.beta);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "             estimated nuisances: alpha={:.3} beta={:.3}", fit.alpha, fit.beta);
    assert!(ok, "alpha {} beta {}", fit.alpha, fit.beta);
}

#[test]
fn criterion_04_null_safety() {
    let (ds, _) = generate_panel(&DgpConfig::null_effect()).unwrap();
    let folds = make_folds(&ds, 5, 0.2, 4).unwrap();
    let params = ForestParams { num_trees: 500, seed: 4, ..ForestParams::default() };
    let table = crossfit_cate(&ds, &folds, "y_1", &params).unwrap().table;
    let cate = table.cates();
    let mean_cate = stats::mean(&cate);

    let y = ds.outcome("y_1").unwrap();
    let (ate, se, _, _) = evaluate::difference_in_means(y, &ds.treated, &ds.cluster_id, CV).unwrap();

    let test: Vec<usize> = (0..ds.len()).filter(|&i| table.rows[i].fold == TEST_FOLD).collect();
    let w = ds.w();
    let gamma: Vec<f64> = test
        .iter()
        .map(|&i| {
            let r = &table.rows[i];
            aipw_score(w[i], y[i], r.e_hat, r.m_hat, r.cate)
        })
        .collect();
    let priority: Vec<f64> = test.iter().map(|&i| cate[i]).collect();
    let clusters: Vec<u64> = test.iter().map(|&i| ds.cluster_id[i]).collect();
    let rate = rate_qini(&priority, &gamma, &clusters, Weighting::Qini, 200, 4).unwrap();

    let pass = mean_cate.abs() < 0.02 && ate.abs() < 2.0 * se && rate.qini.abs() < 2.0 * rate.qini_se;
    report(
        4,
        pass,
        &format!(
            "mean CATE={mean_cate:.4} (<0.02) ATE={ate:.4} SE={se:.4} (|ATE|<2SE) Qini={:.4} SE={:.4} (|Qini|<2SE; \
             negative = worst-first finds larger losses)",
            rate.qini, rate.qini_se
        ),
    );
    assert!(pass);
}

fn small_config(seed: u64) -> DgpConfig {
    DgpConfig {
        n_markets: 16,
        establishments_per_market: CountRange(15, 15),
        workers_per_establishment: CountRange(8, 8),
        seed,
        ..DgpConfig::default()
    }
}

#[test]
fn criterion_05_honesty_and_leakage() {
    // Fold perturbation: a fold's own CATEs come from models that never saw it.
    let (ds, _) = generate_panel(&small_config(55)).unwrap();
    let folds = make_folds(&ds, 5, 0.2, 5).unwrap();
    let params = ForestParams { num_trees: 200, seed: 5, ..ForestParams::default() };
    let base = crossfit_cate(&ds, &folds, "y_1", &params).unwrap().table;
    let f = 2;
    let mut perturbed = ds.clone();
    let mut rng = substream(5, "acceptance/perturb", 0);
    for (i, v) in perturbed.outcomes.get_mut("y_1").unwrap().iter_mut().enumerate() {
        if base.rows[i].fold == f {
            *v += rng.random_range(-2.0..2.0);
        }
    }
    let moved = crossfit_cate(&perturbed, &folds, "y_1", &params).unwrap().table;
    let (mut in_fold, mut in_fold_changed, mut elsewhere_changed) = (0, 0, 0);
    for (a, b) in base.rows.iter().zip(&moved.rows) {
        let same = a.cate.to_bits() == b.cate.to_bits()
            && a.e_hat.to_bits() == b.e_hat.to_bits()
            && a.m_hat.to_bits() == b.m_hat.to_bits();
        if a.fold == f {
            in_fold += 1;
            in_fold_changed += usize::from(!same);
        } else {
            elsewhere_changed += usize::from(!same);
        }
    }

    // Estimation-half perturbation: single-tree forests make the estimation
    // clusters explicit.
    let (mut structures_equal, mut estimates_moved) = (0, 0);
    let trials = 20;
    for t in 0..trials {
        let (ds, _) = generate_panel(&small_config(100 + t)).unwrap();
        let w = ds.w();
        let mut rng = substream(t, "acceptance/residuals", 0);
        let wt: Vec<f64> = w.iter().map(|w| w - 0.25).collect();
        let yt: Vec<f64> = (0..ds.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = ForestParams { num_trees: 1, seed: t, ..ForestParams::default() };
        let names = ds.covariate_names();
        let a = CausalForest::fit_residualized(&ds.covariates, &w, &wt, &yt, &ds.cluster_id, &names, &p).unwrap();
        let est: BTreeSet<u64> = a.trees[0].estimation_clusters.iter().map(|&c| a.cluster_ids[c as usize]).collect();
        let mut yt2 = yt.clone();
        for i in 0..ds.len() {
            if est.contains(&ds.cluster_id[i]) {
                yt2[i] += 3.0 * rng.random::<f64>() - 1.0;
            }
        }
        let b = CausalForest::fit_residualized(&ds.covariates, &w, &wt, &yt2, &ds.cluster_id, &names, &p).unwrap();
        structures_equal += usize::from(a.structure_hash() == b.structure_hash());
        let x = ds.row(0);
        estimates_moved += usize::from(a.predict(&x).ok() != b.predict(&x).ok());
    }

    let pass = in_fold > 0 && in_fold_changed == 0 && structures_equal == trials as usize && estimates_moved > 0;
    report(
        5,
        pass,
        &format!(
            "fold {f}: {in_fold_changed}/{in_fold} own predictions changed (0 required; {elsewhere_changed} rows in \
             other folds moved, as cross-fitting implies); {structures_equal}/{trials} tree structures unchanged \
             after estimation-half perturbation ({estimates_moved} leaf estimates moved)"
        ),
    );
    assert!(pass);
}

/// Exhaustive search over every tree of the given depth on the grid and
/// every action assignment of its leaves.
fn brute_force_policy(cols: &[Vec<f64>], gamma: &[f64], cost: f64, depth: usize, g: usize) -> f64 {
    let n = gamma.len();
    let z: Vec<f64> = gamma.iter().map(|v| v + cost).collect();
    let splits: Vec<(usize, f64)> =
        cols.iter().enumerate().flat_map(|(j, c)| threshold_grid(c, g).into_iter().map(move |t| (j, t))).collect();
    let sum = |rows: &[usize]| rows.iter().map(|&i| z[i]).sum::<f64>();
    let split = |rows: &[usize], (j, t): (usize, f64)| -> (Vec<usize>, Vec<usize>) {
        rows.iter().partition(|&&i| cols[j][i] <= t)
    };
    // Leaf sums of every way to finish a node: as a leaf or with one split.
    let finishes = |rows: &[usize]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![sum(rows)]];
        if depth == 2 {
            for &s in &splits {
                let (l, r) = split(rows, s);
                out.push(vec![sum(&l), sum(&r)]);
            }
        }
        out
    };
    let best_assignment = |leaves: &[f64]| -> f64 {
        (0..1u32 << leaves.len())
            .map(|mask| leaves.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, v)| v).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    };
    let all: Vec<usize> = (0..n).collect();
    let mut best = best_assignment(&[sum(&all)]);
    for &s in &splits {
        let (l, r) = split(&all, s);
        for a in finishes(&l) {
            for b in finishes(&r) {
                let leaves: Vec<f64> = a.iter().chain(&b).copied().collect();
                best = best.min(best_assignment(&leaves));
            }
        }
    }
    best
}

#[test]
fn criterion_06_policy_tree_exactness() {
    let mut rng = substream(6, "acceptance/policy", 0);
    let mut matched = 0;
    let fixtures = 25;
    let mut worst = 0.0f64;
    for k in 0..fixtures {
        let n = rng.random_range(30..=500);
        let p = rng.random_range(1..=5);
        let g = rng.random_range(2..=20);
        let depth = if k % 5 == 4 { 1 } else { 2 };
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|j| {
                (0..n)
                    .map(|_| {
                        if j % 2 == 0 {
                            f64::from(rng.random_range(0..12))
                        } else {
                            (rng.random::<f64>() * 1024.0).round() / 256.0
                        }
                    })
                    .collect()
            })
            .collect();
        let shift = rng.random_range(-1.0..1.0);
        let gamma: Vec<f64> = (0..n)
            .map(|i| {
                let signal = if cols[0][i] > 6.0 { -0.75 } else { 0.25 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                ((signal + shift + noise) * 64.0).round() / 64.0
            })
            .collect();
        let cost = f64::from(rng.random_range(-4..=8)) / 16.0;
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let tree =
            policy::fit_policy_tree(&cols, &names, &gamma, cost, &PolicyTreeParams { depth, n_thresholds: g }).unwrap();
        let oracle = brute_force_policy(&cols, &gamma, cost, depth, g);
        worst = worst.max((tree.objective - oracle).abs());
        matched += usize::from(tree.objective == oracle);
    }
    let pass = matched == fixtures;
    report(
        6,
        pass,
        &format!("{matched}/{fixtures} fixtures match the brute-force objective exactly (max gap {worst:e})"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_targeting_curve_ordering() {
    let run = default_run();
    let gamma = aipw_for(run);
    let train: Vec<usize> = (0..run.ds.len()).filter(|&i| run.table.rows[i].fold != TEST_FOLD).collect();
    let test: Vec<usize> = (0..run.ds.len()).filter(|&i| run.table.rows[i].fold == TEST_FOLD).collect();
    let rules = policy::covariate_rules(&run.ds, &train, &gamma);
    let test_ds = run.ds.subset(&test);
    let cate: Vec<f64> = test.iter().map(|&i| run.table.rows[i].cate).collect();
    let fr = &DEFAULT_FRACTIONS;
    let seed = derive_seed(7, "acceptance/targeting", 0);
    let curve =
        |rule: &TargetingRule| policy::targeting_curve(&test_ds, rule, Some(&cate), "y_1", fr, seed, CV).unwrap();
    let grf = curve(&TargetingRule::Cate);
    let random = curve(&TargetingRule::Random);
    let singles: Vec<_> = rules.iter().map(curve).collect();

    let mut pass = true;
    let mut parts = Vec::new();
    for (k, q) in fr.iter().enumerate() {
        let (best_rule, best) =
            singles.iter().map(|c| (c.rule.clone(), c.points[k].ate)).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let g = grf.points[k].ate;
        let r = random.points[k].ate;
        pass &= g <= best && best < r;
        parts.push(format!("{:.0}%: grf {g:.3} best {best_rule} {best:.3} random {r:.3}", q * 100.0));
    }
    report(7, pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn criterion_08_formula_conformance() {
    let exact = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let approx = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failures.push(name);
        }
    };

    check("growth_metric(0,50)", exact(ingest::growth_metric(0.0, 50.0).unwrap(), 2.0));
    check("growth_metric(50,0)", exact(ingest::growth_metric(50.0, 0.0).unwrap(), -2.0));
    check("growth_metric(100,100)", exact(ingest::growth_metric(100.0, 100.0).unwrap(), 0.0));
    check("growth_metric(0,0)", ingest::growth_metric(0.0, 0.0).is_err());

    check("churn_rate(3,3,10,10)", exact(ingest::churn_rate(3.0, 3.0, 10.0, 10.0).unwrap(), 0.6));
    check("churn_rate(5,0,15,10)", exact(ingest::churn_rate(5.0, 0.0, 15.0, 10.0).unwrap(), 0.0));
    check("churn_rate(4,6,8,10)", approx(ingest::churn_rate(4.0, 6.0, 8.0, 10.0).unwrap(), 8.0 / 9.0));
    check("churn_rate(0,0,0,0)", ingest::churn_rate(0.0, 0.0, 0.0, 0.0).is_err());

    check("reallocation_rate(2,2,10,10)", exact(ingest::reallocation_rate(2.0, 2.0, 10.0, 10.0).unwrap(), 0.4));
    check("reallocation_rate(5,0,15,10)", exact(ingest::reallocation_rate(5.0, 0.0, 15.0, 10.0).unwrap(), 0.0));
    check("reallocation_rate(3,4,9,10)", approx(ingest::reallocation_rate(3.0, 4.0, 9.0, 10.0).unwrap(), 6.0 / 9.5));

    check("hhi([1])", exact(ingest::hhi(&[1.0]).unwrap(), 1.0));
    check("hhi([.5,.5])", exact(ingest::hhi(&[0.5, 0.5]).unwrap(), 0.5));
    check("hhi([.6,.3,.1])", exact(ingest::hhi(&[0.6, 0.3, 0.1]).unwrap(), 0.46));

    let map = |kv: &[(&'static str, f64)]| kv.iter().copied().collect::<BTreeMap<&str, f64>>();
    check(
        "shift_share single",
        exact(ingest::shift_share_exposure(&map(&[("A", 1.0)]), &map(&[("A", 0.37)])).unwrap(), 0.37),
    );
    check(
        "shift_share symmetric",
        exact(
            ingest::shift_share_exposure(&map(&[("A", 0.5), ("B", 0.5)]), &map(&[("A", 1.0), ("B", -1.0)])).unwrap(),
            0.0,
        ),
    );
    check(
        "shift_share weighted",
        exact(
            ingest::shift_share_exposure(&map(&[("A", 0.7), ("B", 0.3)]), &map(&[("A", 0.2), ("B", -0.1)])).unwrap(),
            0.11,
        ),
    );

    check("aipw plug-in", exact(aipw_score(1.0, 1.0, 0.5, 0.5, 0.0), 1.0));
    for tau in [-0.8, -0.1, 0.0, 0.4, 1.7] {
        check("aipw on-model control", exact(aipw_score(0.0, 0.3, 0.5, 0.3, tau), 0.0));
    }
    let mut rng = substream(8, "acceptance/aipw", 0);
    let n = 200_000;
    let mut acc = stats::NeumaierSum::default();
    for _ in 0..n {
        let w = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let noise: f64 = StandardNormal.sample(&mut rng);
        acc.add(aipw_score(w, 1.0 + noise, 0.5, 1.0, 0.0));
    }
    let null_mean = acc.value() / f64::from(n);
    check("aipw null mean", null_mean.abs() <= 0.02);

    check("theory_effect(1,.9,0,.5)", exact(dgp::theory_effect(1.0, 0.9, 0.0, 0.5).unwrap(), 0.0));
    check("theory_effect(.5,.4,.2,.5)", exact(dgp::theory_effect(0.5, 0.4, 0.2, 0.5).unwrap(), -0.3));
    check("theory_effect(0,1,0,0)", exact(dgp::theory_effect(0.0, 1.0, 0.0, 0.0).unwrap(), -1.0));
    check("theory_effect(q>1)", dgp::theory_effect(1.5, 0.5, 0.0, 0.0).is_err());
    check("theory_effect(b<0)", dgp::theory_effect(0.5, -0.1, 0.0, 0.0).is_err());

    check("insurance(-.4,-.4)", exact(evaluate::insurance_degree(-0.4, -0.4).unwrap(), 0.0));
    check("insurance(-.4,0)", exact(evaluate::insurance_degree(-0.4, 0.0).unwrap(), 1.0));
    check("insurance(0,.)", evaluate::insurance_degree(0.0, -0.1).is_err());

    let pass = failures.is_empty();
    report(8, pass, &format!("null AIPW mean {null_mean:.4}; failing examples: {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_09_clustered_se_coverage() {
    let started = Instant::now();
    let reps = 1000u64;
    let mut covered = 0;
    for r in 0..reps {
        let cfg = DgpConfig {
            n_markets: 25,
            establishments_per_market: CountRange(20, 20),
            workers_per_establishment: CountRange(10, 10),
            cluster_share: 0.5,
            seed: derive_seed(9, "acceptance/coverage", r),
            ..DgpConfig::null_effect()
        };
        let (ds, _) = generate_panel(&cfg).unwrap();
        let (ate, se, _, _) =
            evaluate::difference_in_means(ds.outcome("y_1").unwrap(), &ds.treated, &ds.cluster_id, CV).unwrap();
        covered += u64::from(ate.abs() <= 1.96 * se);
    }
    let rate = covered as f64 / reps as f64;
    let elapsed = started.elapsed();
    let pass = (0.92..=0.98).contains(&rate) && elapsed <= Duration::from_secs(600);
    report(
        9,
        pass,
        &format!(
            "95% CI coverage {rate:.3} over {reps} replications of 5000 rows / 500 clusters (in [0.92, 0.98]), {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// 3 locations x 3 industries, 100 workers over two event years.
fn market_grid() -> Dataset {
    let mut ds = Dataset::default();
    let mut cols = vec![Vec::new(); 5];
    let mut rng = substream(10, "acceptance/market-grid", 0);
    for id in 0..100u64 {
        let l = (id % 3) as u32;
        let s = ((id / 3) % 3) as u32;
        ds.worker_id.push(1000 + id);
        ds.event_year.push(if id < 60 { 2001 } else { 2002 });
        ds.cluster_id.push(id / 5);
        ds.group_id.push(id / 5);
        ds.location.push(l + 1);
        ds.industry.push(s + 1);
        ds.treated.push((id / 5) % 2 == 0);
        ds.matched_to.push(None);
        cols[0].push(0.4 * f64::from(l) - 0.3);
        cols[1].push(f64::from(l * l) * 0.2);
        cols[2].push(0.25 * f64::from(s) + 0.1);
        cols[3].push(rng.random_range(25.0..60.0));
        cols[4].push(rng.random_range(0.0..1.0));
    }
    ds.covariate_specs = vec![
        CovariateSpec::new("local_trend", CovariateKind::Continuous, CovariateLevel::Location),
        CovariateSpec::new("local_unemployment", CovariateKind::Continuous, CovariateLevel::Location),
        CovariateSpec::new("industry_trend", CovariateKind::Continuous, CovariateLevel::Industry),
        CovariateSpec::new("age", CovariateKind::Continuous, CovariateLevel::Worker),
        CovariateSpec::new("routine", CovariateKind::Continuous, CovariateLevel::Worker),
    ];
    ds.covariates = cols;
    let y: Vec<f64> = (0..100).map(|i| if ds.treated[i] { -0.3 } else { 0.0 } + 0.01 * (i as f64).sin()).collect();
    ds.outcomes.insert("y_1".into(), y);
    ds
}

/// Direct enumeration of the rotation averages, independent of the library.
fn enumerate_partials(ds: &Dataset, f: &dyn Fn(&[f64]) -> f64) -> (BTreeMap<u32, f64>, BTreeMap<u32, f64>, Vec<f64>) {
    let (loc_cols, ind_cols) = ([0usize, 1], [2usize]);
    let years: BTreeSet<i32> = ds.event_year.iter().copied().collect();
    let vector = |ids: &[u32], id: u32, t: i32, cols: &[usize]| -> Option<Vec<f64>> {
        (0..ds.len())
            .filter(|&i| ids[i] == id && ds.event_year[i] == t)
            .min_by_key(|&i| ds.worker_id[i])
            .map(|i| cols.iter().map(|&j| ds.covariates[j][i]).collect())
    };
    let set = |x: &mut Vec<f64>, cols: &[usize], v: &[f64]| {
        for (&j, &val) in cols.iter().zip(v) {
            x[j] = val;
        }
    };
    let rotate = |ids: &[u32], cols: &[usize]| -> BTreeMap<u32, f64> {
        let all: BTreeSet<u32> = ids.iter().copied().collect();
        all.into_iter()
            .map(|id| {
                let (mut total, mut n) = (0.0, 0usize);
                for &t in &years {
                    let Some(v) = vector(ids, id, t, cols) else { continue };
                    for i in (0..ds.len()).filter(|&i| ds.event_year[i] == t) {
                        let mut x = ds.row(i);
                        set(&mut x, cols, &v);
                        total += f(&x);
                        n += 1;
                    }
                }
                (id, total / n as f64)
            })
            .collect()
    };
    let workers = (0..ds.len())
        .map(|i| {
            let t = ds.event_year[i];
            let locs: BTreeSet<u32> =
                (0..ds.len()).filter(|&k| ds.event_year[k] == t).map(|k| ds.location[k]).collect();
            let inds: BTreeSet<u32> =
                (0..ds.len()).filter(|&k| ds.event_year[k] == t).map(|k| ds.industry[k]).collect();
            let (mut total, mut n) = (0.0, 0usize);
            for &l in &locs {
                for &s in &inds {
                    let mut x = ds.row(i);
                    set(&mut x, &loc_cols, &vector(&ds.location, l, t, &loc_cols).unwrap());
                    set(&mut x, &ind_cols, &vector(&ds.industry, s, t, &ind_cols).unwrap());
                    total += f(&x);
                    n += 1;
                }
            }
            total / n as f64
        })
        .collect();
    (rotate(&ds.location, &loc_cols), rotate(&ds.industry, &ind_cols), workers)
}

#[test]
fn criterion_10_partial_effects_oracle() {
    let ds = market_grid();
    let partition = CovariatePartition::default_for(&ds);
    let params = PartialsParams::default();

    let nonlinear = |x: &[f64]| -> f64 {
        -0.2 + 0.5 * x[0] * x[2] - 0.3 * x[1].powi(2) + 0.004 * (x[3] - 40.0) * (1.0 + x[0]) + (x[4] - 0.5) * x[2].sin()
    };
    let forest_params = ForestParams { num_trees: 200, min_leaf: 2, seed: 10, ..ForestParams::default() };
    let w = ds.w();
    let forest = CausalForest::fit(
        &ds.covariates,
        ds.outcome("y_1").unwrap(),
        &w,
        &ds.cluster_id,
        &ds.covariate_names(),
        &forest_params,
    )
    .unwrap();

    let mut max_gap = 0.0f64;
    let mut compare = |p: &dyn Fn(&[f64]) -> f64, got: &partials::PartialEffects| {
        let (loc, ind, workers) = enumerate_partials(&ds, p);
        for m in &got.locations {
            max_gap = max_gap.max((m.effect - loc[&m.id]).abs());
        }
        for m in &got.industries {
            max_gap = max_gap.max((m.effect - ind[&m.id]).abs());
        }
        for (a, b) in got.workers.iter().zip(&workers) {
            max_gap = max_gap.max((a.worker_effect - b).abs());
        }
        assert_eq!(got.locations.len(), 3);
        assert_eq!(got.industries.len(), 3);
        assert!(got.workers.iter().all(|w| w.n_markets == 9));
    };
    let got = partials::partial_effects(&nonlinear, &ds, &partition, &params).unwrap();
    compare(&nonlinear, &got);
    let got = partials::partial_effects(&forest, &ds, &partition, &params).unwrap();
    let forest_fn = |x: &[f64]| forest.predict_cate(x).unwrap();
    compare(&forest_fn, &got);

    // Additive effect: location differences equal the location component's
    // differences exactly.
    let g = |x: &[f64]| 0.7 * x[0] - 1.3 * x[1];
    let additive = |x: &[f64]| g(x) + 0.4 * x[2] * x[2] + 0.01 * x[3] - 0.2 * x[4];
    let got = partials::partial_location_effects(&additive, &ds, &partition).unwrap();
    let mut vec_of = BTreeMap::new();
    for i in 0..ds.len() {
        vec_of.entry(ds.location[i]).or_insert_with(|| ds.row(i));
    }
    let mut identity_gap = 0.0f64;
    for a in &got {
        for b in &got {
            let want = g(&vec_of[&a.id]) - g(&vec_of[&b.id]);
            identity_gap = identity_gap.max((a.effect - b.effect - want).abs());
        }
    }

    let pass = max_gap <= 1e-9 && identity_gap <= 1e-12;
    report(
        10,
        pass,
        &format!(
            "max |rotation - enumeration| = {max_gap:e} (<=1e-9); additive location identity gap {identity_gap:e}"
        ),
    );
    assert!(pass);
}

fn report_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["report", "partials", "policy", "model"] {
        let Ok(entries) = std::fs::read_dir(dir.join(sub)) else { continue };
        for e in entries {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "csv" || x == "json" || x == "svg") {
                out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_determinism() {
    let base = include_str!("../../../configs/small.json");
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: usize| {
        let mut cfg = PipelineConfig::from_json(base).unwrap();
        cfg.out_dir = tmp.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pipeline(&cfg, &mut |_, _| {})).unwrap();
        report_files(&cfg.out_dir)
    };
    let a = run("a", 1);
    let b = run("b", 1);
    let c = run("c", 4);
    let csvs = a.keys().filter(|k| k.ends_with(".csv")).count();
    let differ = |x: &BTreeMap<String, Vec<u8>>| {
        a.iter().filter(|(k, v)| x.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect::<Vec<_>>()
    };
    let (d_runs, d_threads) = (differ(&b), differ(&c));
    let pass = csvs >= 10 && a.len() == b.len() && a.len() == c.len() && d_runs.is_empty() && d_threads.is_empty();
    report(
        11,
        pass,
        &format!(
            "{} artifacts ({csvs} CSVs) compared; differing across runs: {d_runs:?}; across 1 vs 4 threads: {d_threads:?}",
            a.len()
        ),
    );
    assert!(pass);
}
