//! Property tests for the invariants each module promises.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Mutex;

use jobloss_core::crossfit::{group_cates, rank_quantiles, CateRow, CateTable};
use jobloss_core::dataset::{CovariateKind, CovariateLevel, CovariateSpec};
use jobloss_core::dgp::{generate_panel, CountRange, DgpConfig};
use jobloss_core::evaluate::{blp_calibration, difference_in_means};
use jobloss_core::forest::{best_causal_split, CausalForest, ForestParams};
use jobloss_core::ingest::{churn_rate, growth_metric, reallocation_rate};
use jobloss_core::matching::match_dataset;
use jobloss_core::partials::{self, CatePredictor, CovariatePartition, PartialsParams};
use jobloss_core::policy::{self, selection_order, PolicyTreeParams, TargetingRule};
use jobloss_core::stats::{self, ClusterVariance};
use jobloss_core::{Dataset, Error, Result};
use proptest::prelude::*;

fn small_dgp(seed: u64, markets: usize) -> DgpConfig {
    DgpConfig {
        n_markets: markets,
        establishments_per_market: CountRange(4, 9),
        workers_per_establishment: CountRange(3, 8),
        n_event_years: 2,
        seed,
        ..DgpConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn growth_metric_is_antisymmetric_and_bounded(a in 0u32..10_000, b in 0u32..10_000) {
        prop_assume!(a + b > 0);
        let (a, b) = (f64::from(a), f64::from(b));
        let g = growth_metric(a, b).unwrap();
        prop_assert_eq!(g, -growth_metric(b, a).unwrap());
        prop_assert!((-2.0..=2.0).contains(&g));
    }

    #[test]
    fn flow_rates_lie_in_zero_two(prev in 1u32..5_000, inflow in 0u32..5_000, out_share in 0.0f64..=1.0) {
        let outflow = (f64::from(prev) * out_share).floor();
        let (prev, inflow) = (f64::from(prev), f64::from(inflow));
        let now = prev + inflow - outflow;
        for rate in [churn_rate(inflow, outflow, now, prev).unwrap(), reallocation_rate(inflow, outflow, now, prev).unwrap()] {
            prop_assert!((0.0..=2.0).contains(&rate), "rate {}", rate);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_effects_follow_the_covariates(seed in any::<u64>()) {
        let cfg = small_dgp(seed, 9);
        let (ds, oracle) = generate_panel(&cfg).unwrap();
        let mut by_establishment: BTreeMap<u64, bool> = BTreeMap::new();
        for i in 0..ds.len() {
            prop_assert!((cfg.linear_effect(&ds.row(i)) - oracle[i].true_tau).abs() <= 1e-12);
            let w = *by_establishment.entry(ds.cluster_id[i]).or_insert(ds.treated[i]);
            prop_assert_eq!(w, ds.treated[i]);
        }
    }

    #[test]
    fn matching_never_reuses_controls_and_ignores_row_order(seed in any::<u64>(), k in 1usize..=3) {
        let cfg = DgpConfig { closure_rate: 0.15, ..small_dgp(seed, 40) };
        let (ds, _) = generate_panel(&cfg).unwrap();
        // Tiny draws can separate perfectly; that is reported, not matched.
        let a = match match_dataset(&ds, k, None) {
            Err(Error::Separation { .. }) => return Err(TestCaseError::reject("separation")),
            other => other.unwrap(),
        };
        let mut seen = HashSet::new();
        for set in &a.sets {
            prop_assert!(set.control_ids.len() <= k);
            prop_assert_eq!(set.shortfall, set.control_ids.len() < k);
            for c in &set.control_ids {
                prop_assert!(seen.insert(*c), "control {} reused", c);
            }
        }
        let reversed: Vec<usize> = (0..ds.len()).rev().collect();
        let b = match_dataset(&ds.subset(&reversed), k, None).unwrap();
        prop_assert_eq!(&a.sets, &b.sets);
        prop_assert_eq!(a.dataset.worker_id, b.dataset.worker_id);
    }
}

/// Independent exhaustive split search for the effect criterion.
fn brute_force_split(cols: &[Vec<f64>], w: &[f64], wt: &[f64], yt: &[f64], min_leaf: usize, alpha: f64) -> Option<f64> {
    let n = w.len();
    let mut best: Option<f64> = None;
    for col in cols {
        let distinct: BTreeSet<u64> = col.iter().map(|v| v.to_bits()).collect();
        let mut values: Vec<f64> = distinct.into_iter().map(f64::from_bits).collect();
        values.sort_by(f64::total_cmp);
        for &cut in values.iter().take(values.len().saturating_sub(1)) {
            let side = |left: bool| -> (usize, usize, f64, f64) {
                let rows = (0..n).filter(|&i| (col[i] <= cut) == left);
                rows.fold((0, 0, 0.0, 0.0), |(cnt, t, wy, ww), i| {
                    (cnt + 1, t + usize::from(w[i] > 0.5), wy + wt[i] * yt[i], ww + wt[i] * wt[i])
                })
            };
            let (nl, tl, wyl, wwl) = side(true);
            let (nr, tr, wyr, wwr) = side(false);
            let min_share = alpha * n as f64;
            if (nl as f64) < min_share || (nr as f64) < min_share {
                continue;
            }
            if [tl, nl - tl, tr, nr - tr].iter().any(|&c| c < min_leaf) || wwl <= 0.0 || wwr <= 0.0 {
                continue;
            }
            let d = wyl / wwl - wyr / wwr;
            let score = (nl * nr) as f64 / (n * n) as f64 * d * d;
            if score > 0.0 && best.is_none_or(|b| score > b) {
                best = Some(score);
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_search_matches_brute_force(
        data in prop::collection::vec((0u8..8, -2.0f64..2.0, any::<bool>(), -1.0f64..1.0), 20..200),
        min_leaf in 1usize..5,
    ) {
        let cols = vec![
            data.iter().map(|d| f64::from(d.0)).collect::<Vec<f64>>(),
            data.iter().map(|d| (d.1 * 8.0).round() / 8.0).collect(),
        ];
        let w: Vec<f64> = data.iter().map(|d| if d.2 { 1.0 } else { 0.0 }).collect();
        let wt: Vec<f64> = w.iter().map(|w| w - 0.5).collect();
        let yt: Vec<f64> = data.iter().zip(&cols[0]).map(|(d, x)| d.3 + if *x > 3.0 && d.2 { 0.8 } else { 0.0 }).collect();
        let rows: Vec<usize> = (0..w.len()).collect();
        let found = best_causal_split(&cols, &w, &wt, &yt, &rows, min_leaf, 0.05, 0.0);
        let oracle = brute_force_split(&cols, &w, &wt, &yt, min_leaf, 0.05);
        match (found, oracle) {
            (None, None) => {}
            (Some((_, _, s)), Some(o)) => prop_assert!((s - o).abs() <= 1e-9 * o.max(1.0), "{} vs {}", s, o),
            other => prop_assert!(false, "disagreement {:?}", other),
        }
        if let Some((_, _, s)) = found {
            prop_assert!(s >= 0.0);
        }
    }
}

fn small_forest(seed: u64) -> (Dataset, CausalForest) {
    let (ds, _) = generate_panel(&small_dgp(seed, 16)).unwrap();
    let params = ForestParams { num_trees: 40, seed, ..ForestParams::default() };
    let forest = CausalForest::fit(
        &ds.covariates,
        ds.outcome("y_1").unwrap(),
        &ds.w(),
        &ds.cluster_id,
        &ds.covariate_names(),
        &params,
    )
    .unwrap();
    (ds, forest)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn tree_halves_are_disjoint_and_serialization_is_exact(seed in any::<u64>()) {
        let (ds, forest) = small_forest(seed);
        for t in &forest.trees {
            let split: BTreeSet<u32> = t.split_clusters.iter().copied().collect();
            prop_assert!(t.estimation_clusters.iter().all(|c| !split.contains(c)));
        }
        let from_json = CausalForest::from_json(&forest.to_json().unwrap()).unwrap();
        let from_bytes = CausalForest::from_bytes(&forest.to_bytes().unwrap()).unwrap();
        let probe: Vec<Vec<f64>> = (0..ds.len()).step_by(7).map(|i| ds.row(i)).collect();
        let bits = |f: &CausalForest| f.predict_rows(&probe).into_iter().map(f64::to_bits).collect::<Vec<u64>>();
        prop_assert_eq!(bits(&forest), bits(&from_json));
        prop_assert_eq!(bits(&forest), bits(&from_bytes));
    }
}

fn cate_table(cates: &[f64], folds: &[usize], groups: &[u64]) -> CateTable {
    CateTable {
        rows: cates
            .iter()
            .enumerate()
            .map(|(i, &c)| CateRow {
                worker_id: i as u64 + 1,
                event_year: 2000,
                cluster_id: groups[i],
                group_id: groups[i],
                fold: folds[i],
                treated: true,
                cate: c,
                e_hat: 0.5,
                m_hat: 0.0,
                decile: 0,
                quartile: 0,
                within_establishment_rank: None,
                within_establishment_decile: None,
                coworker_cate: None,
                market_cate: None,
                event_size: None,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quantile_bins_partition_each_fold(
        data in prop::collection::vec(((-8i32..8), 0usize..4), 1..300),
        q in 2usize..11,
    ) {
        let cates: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 8.0).collect();
        let folds: Vec<usize> = data.iter().map(|d| d.1).collect();
        let table = cate_table(&cates, &folds, &vec![1; cates.len()]);
        let bins = rank_quantiles(&table, q);
        for f in 0..4 {
            let mut sizes = vec![0usize; q];
            for (b, _) in bins.iter().zip(&folds).filter(|(_, &g)| g == f) {
                prop_assert!((1..=q).contains(b));
                sizes[b - 1] += 1;
            }
            let n: usize = sizes.iter().sum();
            if n >= q {
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            // Bins are ordered by CATE within the fold.
            let rows: Vec<usize> = (0..cates.len()).filter(|&i| folds[i] == f).collect();
            for &a in &rows {
                for &b in &rows {
                    if cates[a] < cates[b] {
                        prop_assert!(bins[a] <= bins[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn coworker_means_leave_one_out(data in prop::collection::vec(((-64i32..64), 0u64..6), 2..60)) {
        let cates: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 64.0).collect();
        let groups: Vec<u64> = data.iter().map(|d| d.1).collect();
        let n = cates.len();
        let mut ds = Dataset {
            worker_id: (1..=n as u64).collect(),
            event_year: vec![2000; n],
            cluster_id: groups.clone(),
            group_id: groups.clone(),
            industry: vec![1; n],
            location: groups.iter().map(|g| *g as u32 % 2).collect(),
            treated: vec![true; n],
            matched_to: vec![None; n],
            ..Default::default()
        };
        ds.outcomes.insert("y_1".into(), vec![0.0; n]);
        let mut table = cate_table(&cates, &vec![1; n], &groups);
        group_cates(&mut table, &ds).unwrap();
        for g in groups.iter().collect::<BTreeSet<_>>() {
            let members: Vec<usize> = (0..n).filter(|&i| groups[i] == *g).collect();
            let total: f64 = members.iter().map(|&i| cates[i]).sum();
            for &i in &members {
                match table.rows[i].coworker_cate {
                    Some(c) => prop_assert!((c * (members.len() - 1) as f64 + cates[i] - total).abs() <= 1e-12),
                    None => prop_assert_eq!(members.len(), 1),
                }
            }
        }
    }

    #[test]
    fn clustered_se_ignores_row_order(
        data in prop::collection::vec(((-50i32..50), any::<bool>(), 0u64..12), 8..120),
        rotate in 0usize..120,
    ) {
        let y: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 16.0).collect();
        let w: Vec<bool> = data.iter().map(|d| d.1).collect();
        let c: Vec<u64> = data.iter().map(|d| d.2).collect();
        prop_assume!(w.iter().any(|&v| v) && w.iter().any(|&v| !v));
        let k = rotate % y.len();
        let rot = |v: &[f64]| [&v[k..], &v[..k]].concat();
        let (y2, w2, c2) = (rot(&y), [&w[k..], &w[..k]].concat(), [&c[k..], &c[..k]].concat());
        let a = difference_in_means(&y, &w, &c, ClusterVariance::Cr0);
        let b = difference_in_means(&y2, &w2, &c2, ClusterVariance::Cr0);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a.0 - b.0).abs() <= 1e-12);
            prop_assert!((a.1 - b.1).abs() <= 1e-9 * a.1.max(1e-6));
        }
    }

    #[test]
    fn calibration_follows_affine_prediction_maps(
        data in prop::collection::vec((-1.0f64..1.0, any::<bool>(), -1.0f64..1.0), 40..200),
        a in prop_oneof![0.25f64..4.0, -4.0f64..-0.25],
        c in -0.5f64..0.5,
    ) {
        let tau: Vec<f64> = data.iter().map(|d| d.0).collect();
        let wt: Vec<f64> = data.iter().map(|d| if d.1 { 0.6 } else { -0.4 }).collect();
        let yt: Vec<f64> = data.iter().zip(&wt).map(|(d, w)| w * (0.3 + 0.8 * d.0) + 0.2 * d.2).collect();
        let clusters: Vec<u64> = (0..tau.len() as u64).map(|i| i / 3).collect();
        let tau2: Vec<f64> = tau.iter().map(|t| a * t + c).collect();
        let (m, m2) = (stats::mean(&tau), stats::mean(&tau2));
        prop_assume!(m.abs() > 1e-3 && m2.abs() > 1e-3);
        let r1 = blp_calibration(&wt, &yt, &tau, &clusters, ClusterVariance::Cr0).unwrap();
        let r2 = blp_calibration(&wt, &yt, &tau2, &clusters, ClusterVariance::Cr0).unwrap();
        // Same column space: alpha scales with the mean, beta with 1/a.
        let want_alpha = r1.alpha * m / m2;
        prop_assert!((r2.alpha - want_alpha).abs() <= 1e-7 * want_alpha.abs().max(1.0), "{} vs {}", r2.alpha, want_alpha);
        prop_assert!((r2.beta - r1.beta / a).abs() <= 1e-7 * (r1.beta / a).abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn policy_objective_is_affine_consistent(
        rows in prop::collection::vec(((0u8..10), (0u8..6), -32i32..32), 10..150),
        shift in -16i32..16,
        cost in -8i32..8,
    ) {
        let cols = vec![
            rows.iter().map(|r| f64::from(r.0)).collect::<Vec<f64>>(),
            rows.iter().map(|r| f64::from(r.1)).collect(),
        ];
        let names = vec!["a".to_string(), "b".to_string()];
        let gamma: Vec<f64> = rows.iter().map(|r| f64::from(r.2) / 16.0).collect();
        let (c, cost) = (f64::from(shift) / 8.0, f64::from(cost) / 8.0);
        let shifted: Vec<f64> = gamma.iter().map(|g| g + c).collect();
        let p = PolicyTreeParams { depth: 2, n_thresholds: 8 };
        let t1 = policy::fit_policy_tree(&cols, &names, &gamma, cost, &p).unwrap();
        let t2 = policy::fit_policy_tree(&cols, &names, &shifted, cost - c, &p).unwrap();
        prop_assert_eq!(t1.objective, t2.objective);
        prop_assert_eq!(policy::policy_objective(&t1, &cols, &gamma) + 0.0, t1.objective);
    }
}

fn targeting_fixture(values: &[(i32, u8)]) -> Dataset {
    let n = values.len();
    let mut ds = Dataset {
        worker_id: (0..n as u64).map(|i| 7 * i + 3).collect(),
        event_year: (0..n).map(|i| 2000 + (i % 3) as i32).collect(),
        cluster_id: (0..n as u64).map(|i| i / 4).collect(),
        group_id: (0..n as u64).map(|i| i / 4).collect(),
        industry: vec![1; n],
        location: vec![1; n],
        treated: (0..n).map(|i| i % 2 == 0).collect(),
        matched_to: vec![None; n],
        ..Default::default()
    };
    ds.covariate_specs = vec![CovariateSpec::new("x", CovariateKind::Continuous, CovariateLevel::Worker)];
    ds.covariates = vec![values.iter().map(|v| f64::from(v.1)).collect()];
    ds.outcomes.insert("y_1".into(), values.iter().map(|v| f64::from(v.0) / 10.0).collect());
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn oracle_targeting_selects_worst_first(values in prop::collection::vec((-40i32..40, 0u8..5), 5..200), seed in any::<u64>()) {
        let ds = targeting_fixture(&values);
        let tau: Vec<f64> = values.iter().map(|v| f64::from(v.0) / 10.0).collect();
        let keys = TargetingRule::Cate.priority(&ds, Some(&tau)).unwrap();
        let order = selection_order(&ds, &keys, seed);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=ds.len() {
            let m = order[..k].iter().map(|&i| tau[i]).sum::<f64>() / k as f64;
            prop_assert!(m >= prev - 1e-12);
            prev = m;
        }
    }

    #[test]
    fn selection_depends_on_keys_not_row_order(values in prop::collection::vec((-40i32..40, 0u8..5), 5..200), seed in any::<u64>(), rot in 0usize..200) {
        let ds = targeting_fixture(&values);
        let rule = TargetingRule::Covariate { name: "x".into(), descending: true };
        let order = selection_order(&ds, &rule.priority(&ds, None).unwrap(), seed);
        let k = rot % ds.len();
        let perm: Vec<usize> = (k..ds.len()).chain(0..k).collect();
        let moved = ds.subset(&perm);
        let order2 = selection_order(&moved, &rule.priority(&moved, None).unwrap(), seed);
        let ids = |d: &Dataset, o: &[usize]| o.iter().map(|&i| d.key(i)).collect::<Vec<_>>();
        prop_assert_eq!(ids(&ds, &order), ids(&moved, &order2));
    }
}

/// Records every query point.
struct Recorder<F> {
    f: F,
    seen: Mutex<Vec<Vec<f64>>>,
}

impl<F: Fn(&[f64]) -> f64 + Sync> CatePredictor for Recorder<F> {
    fn predict_cate(&self, x: &[f64]) -> Result<f64> {
        self.seen.lock().unwrap().push(x.to_vec());
        Ok((self.f)(x))
    }
}

fn market_panel(cells: &[(u8, u8, u8)]) -> Dataset {
    let mut ds = Dataset::default();
    let mut cols = vec![Vec::new(); 4];
    for (id, &(l, s, a)) in cells.iter().enumerate() {
        ds.worker_id.push(id as u64);
        ds.event_year.push(2000 + i32::from(a % 2));
        ds.cluster_id.push(id as u64 / 3);
        ds.group_id.push(id as u64 / 3);
        ds.location.push(u32::from(l));
        ds.industry.push(u32::from(s));
        ds.treated.push(id % 2 == 0);
        ds.matched_to.push(None);
        cols[0].push(f64::from(l) * 0.5 - 1.0);
        cols[1].push(f64::from(s) * f64::from(s) / 10.0);
        cols[2].push(f64::from(a));
        cols[3].push((id as f64).cos());
    }
    ds.covariate_specs = vec![
        CovariateSpec::new("local_trend", CovariateKind::Continuous, CovariateLevel::Location),
        CovariateSpec::new("churn", CovariateKind::Continuous, CovariateLevel::Industry),
        CovariateSpec::new("age", CovariateKind::Continuous, CovariateLevel::Worker),
        CovariateSpec::new("routine", CovariateKind::Continuous, CovariateLevel::Worker),
    ];
    ds.covariates = cols;
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rotations_touch_only_their_block(cells in prop::collection::vec((0u8..4, 0u8..4, 20u8..60), 2..60)) {
        let ds = market_panel(&cells);
        let partition = CovariatePartition::default_for(&ds);
        let rec = Recorder { f: |x: &[f64]| x[0] * x[2] - x[1], seen: Mutex::new(Vec::new()) };
        let rows = ds.x_rows();
        for (block, cols) in [("location", vec![0usize]), ("industry", vec![1usize])] {
            rec.seen.lock().unwrap().clear();
            if block == "location" {
                partials::partial_location_effects(&rec, &ds, &partition).unwrap();
            } else {
                partials::partial_industry_effects(&rec, &ds, &partition).unwrap();
            }
            for q in rec.seen.lock().unwrap().iter() {
                let fits = rows.iter().any(|r| (0..4).all(|j| cols.contains(&j) || r[j].to_bits() == q[j].to_bits()));
                prop_assert!(fits, "{} rotation changed a column outside its block", block);
            }
        }
    }

    #[test]
    fn additive_location_effects_average_to_the_mean_cate(cells in prop::collection::vec((0u8..4, 0u8..4, 20u8..60), 2..60)) {
        let mut ds = market_panel(&cells);
        ds.event_year = vec![2000; ds.len()];
        let partition = CovariatePartition::default_for(&ds);
        let f = |x: &[f64]| 0.3 * x[0] - 0.2 * x[1] + 0.01 * x[2] + x[3];
        let effects = partials::partial_location_effects(&f, &ds, &partition).unwrap();
        let by_id: BTreeMap<u32, f64> = effects.iter().map(|m| (m.id, m.effect)).collect();
        let weighted = ds.location.iter().map(|l| by_id[l]).sum::<f64>() / ds.len() as f64;
        let mean = ds.x_rows().iter().map(|x| f(x)).sum::<f64>() / ds.len() as f64;
        prop_assert!((weighted - mean).abs() <= 1e-12);
    }

    #[test]
    fn capped_market_grid_is_seeded(cells in prop::collection::vec((0u8..6, 0u8..6, 20u8..60), 10..60), seed in any::<u64>()) {
        let ds = market_panel(&cells);
        let partition = CovariatePartition::default_for(&ds);
        let params = PartialsParams { max_markets: 3, seed };
        let f = |x: &[f64]| x[0] * x[1] + x[2] / 100.0;
        let a = partials::partial_worker_effects(&f, &ds, &partition, &params).unwrap();
        let b = partials::partial_worker_effects(&f, &ds, &partition, &params).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.0.iter().all(|(_, n)| *n <= 3));
    }
}
