//! Establishment-clustered folds, leave-fold-out CATEs and the rankings
//! derived from them.
//!
//! Fold 0 is the held-out test set; folds `1..=k` are the cross-fitting
//! folds. A row's fold is decided by its `group_id`, the closing
//! establishment it belongs to (or was matched to).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::{CausalForest, ForestParams};
use crate::rng::{derive_seed, substream};
use crate::stats;

pub const TEST_FOLD: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
    /// group id -> fold (0 = test).
    pub groups: BTreeMap<u64, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, group: u64) -> Option<usize> {
        self.groups.get(&group).copied()
    }

    pub fn row_folds(&self, ds: &Dataset) -> Result<Vec<usize>> {
        ds.group_id
            .iter()
            .map(|g| self.fold_of(*g).ok_or_else(|| Error::Data(format!("group {g} has no fold"))))
            .collect()
    }
}

fn deal(
    groups: &mut [u64],
    n_folds: usize,
    test_fraction: f64,
    rng: &mut impl rand::Rng,
    out: &mut BTreeMap<u64, usize>,
) {
    groups.shuffle(rng);
    let n_test = (test_fraction * groups.len() as f64).round() as usize;
    for (k, &g) in groups.iter().enumerate() {
        let fold = if k < n_test { TEST_FOLD } else { (k - n_test) % n_folds + 1 };
        out.insert(g, fold);
    }
}

/// Assign closing establishments to the test set and to `n_folds` folds.
/// Groups without a displaced worker (unmatched control establishments) are
/// dealt the same way from a separate stream.
pub fn make_folds(ds: &Dataset, n_folds: usize, test_fraction: f64, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let closing: BTreeSet<u64> = (0..ds.len()).filter(|&i| ds.treated[i]).map(|i| ds.group_id[i]).collect();
    let others: BTreeSet<u64> = ds.group_id.iter().copied().filter(|g| !closing.contains(g)).collect();
    if closing.len() < 2 * n_folds {
        return Err(Error::Insufficient(format!(
            "{} closing establishments for {n_folds} folds (need at least {})",
            closing.len(),
            2 * n_folds
        )));
    }
    let mut groups = BTreeMap::new();
    let mut closing: Vec<u64> = closing.into_iter().collect();
    deal(&mut closing, n_folds, test_fraction, &mut substream(seed, "folds/closing", 0), &mut groups);
    let mut others: Vec<u64> = others.into_iter().collect();
    deal(&mut others, n_folds, test_fraction, &mut substream(seed, "folds/other", 0), &mut groups);
    Ok(FoldAssignment { n_folds, test_fraction, seed, groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateRow {
    pub worker_id: u64,
    pub event_year: i32,
    pub cluster_id: u64,
    pub group_id: u64,
    pub fold: usize,
    pub treated: bool,
    pub cate: f64,
    pub e_hat: f64,
    pub m_hat: f64,
    /// 1 = most negative CATEs, within fold.
    pub decile: usize,
    pub quartile: usize,
    pub within_establishment_rank: Option<usize>,
    pub within_establishment_decile: Option<usize>,
    /// Leave-one-out mean CATE of displaced coworkers in the same event.
    pub coworker_cate: Option<f64>,
    /// Mean CATE of displaced workers of other events in the same market.
    pub market_cate: Option<f64>,
    pub event_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CateTable {
    pub rows: Vec<CateRow>,
}

impl CateTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.cate).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<CateRow>, _>>()?;
        Ok(Self { rows })
    }

    /// For each dataset row, the index of its table row, matched on
    /// (worker_id, event_year).
    pub fn row_index(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let index: HashMap<(u64, i32), usize> =
            self.rows.iter().enumerate().map(|(k, r)| ((r.worker_id, r.event_year), k)).collect();
        (0..ds.len())
            .map(|i| {
                index.get(&ds.key(i)).copied().ok_or_else(|| {
                    Error::Data(format!("no CATE for worker {} in event year {}", ds.worker_id[i], ds.event_year[i]))
                })
            })
            .collect()
    }

    /// Rows aligned with `ds` by (worker_id, event_year).
    pub fn aligned_to(&self, ds: &Dataset) -> Result<Vec<&CateRow>> {
        Ok(self.row_index(ds)?.into_iter().map(|k| &self.rows[k]).collect())
    }
}

/// Balanced within-fold quantile bins of the CATE (1 = most negative), ties
/// broken by (worker_id, event_year).
pub fn rank_quantiles(table: &CateTable, q: usize) -> Vec<usize> {
    let mut by_fold: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, r) in table.rows.iter().enumerate() {
        by_fold.entry(r.fold).or_default().push(k);
    }
    let mut bins = vec![0; table.len()];
    for rows in by_fold.values() {
        let values: Vec<f64> = rows.iter().map(|&k| table.rows[k].cate).collect();
        let keys: Vec<(u64, i32)> = rows.iter().map(|&k| (table.rows[k].worker_id, table.rows[k].event_year)).collect();
        for (b, &k) in stats::balanced_bins(&values, &keys, q).into_iter().zip(rows) {
            bins[k] = b;
        }
    }
    bins
}

/// Coworker leave-one-out means, market leave-event-out means and
/// within-establishment ranks. Events are closing establishments; controls
/// inherit the values of the displaced worker they were matched to.
pub fn group_cates(table: &mut CateTable, ds: &Dataset) -> Result<()> {
    let row_of = table.row_index(ds)?;

    let mut events: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in (0..ds.len()).filter(|&i| ds.treated[i]) {
        events.entry(ds.group_id[i]).or_default().push(i);
    }
    let mut markets: BTreeMap<(u32, u32), Vec<u64>> = BTreeMap::new();
    let mut event_sum: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (&e, members) in &events {
        let first = members[0];
        markets.entry((ds.industry[first], ds.location[first])).or_default().push(e);
        let cates: Vec<f64> = members.iter().map(|&i| table.rows[row_of[i]].cate).collect();
        event_sum.insert(e, (stats::sum(&cates), members.len()));
    }

    for (&e, members) in &events {
        let (s, n) = event_sum[&e];
        let cates: Vec<f64> = members.iter().map(|&i| table.rows[row_of[i]].cate).collect();
        let keys: Vec<u64> = members.iter().map(|&i| ds.worker_id[i]).collect();
        let deciles = stats::balanced_bins(&cates, &keys, 10);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cates[a].total_cmp(&cates[b]).then(keys[a].cmp(&keys[b])));
        let mut rank = vec![0; n];
        for (pos, &k) in order.iter().enumerate() {
            rank[k] = pos + 1;
        }
        let first = members[0];
        let market = &markets[&(ds.industry[first], ds.location[first])];
        let market_cate = if market.len() > 1 {
            let (ms, mn) = market.iter().filter(|&&o| o != e).fold(
                (stats::NeumaierSum::default(), 0usize),
                |(mut acc, cnt), o| {
                    acc.add(event_sum[o].0);
                    (acc, cnt + event_sum[o].1)
                },
            );
            Some(ms.value() / mn as f64)
        } else {
            None
        };
        for (k, &i) in members.iter().enumerate() {
            let row = &mut table.rows[row_of[i]];
            row.coworker_cate = (n >= 2).then(|| (s - cates[k]) / (n - 1) as f64);
            row.market_cate = market_cate;
            row.within_establishment_rank = Some(rank[k]);
            row.within_establishment_decile = Some(deciles[k]);
            row.event_size = Some(n);
        }
    }

    let treated_row: HashMap<(u64, i32), usize> =
        (0..ds.len()).filter(|&i| ds.treated[i]).map(|i| (ds.key(i), row_of[i])).collect();
    for i in (0..ds.len()).filter(|&i| !ds.treated[i]) {
        let Some(tid) = ds.matched_to[i] else {
            continue;
        };
        if let Some(&src) = treated_row.get(&(tid, ds.event_year[i])) {
            let s = table.rows[src].clone();
            let row = &mut table.rows[row_of[i]];
            row.coworker_cate = s.coworker_cate;
            row.market_cate = s.market_cate;
            row.within_establishment_rank = s.within_establishment_rank;
            row.within_establishment_decile = s.within_establishment_decile;
            row.event_size = s.event_size;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub fold: usize,
    pub n_train: usize,
    pub n_predicted: usize,
    pub nuisance_fallbacks: usize,
    pub split_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CrossfitResult {
    pub table: CateTable,
    pub folds: FoldAssignment,
    pub fold_stats: Vec<FoldStats>,
}

struct FoldFit {
    stats: FoldStats,
    /// (row, cate, e_hat, m_hat) for the held-out fold.
    own: Vec<(usize, f64, f64, f64)>,
    /// (cate, e_hat, m_hat) for each test row, in test-row order.
    test: Vec<(f64, f64, f64)>,
}

/// Cross-fitted CATEs: for each fold, nuisance and causal forests are fit on
/// the other training folds and predict that fold. Test rows get the mean of
/// the fold models' predictions. Rows with a missing outcome are never used
/// for training but still receive predictions.
pub fn crossfit_cate(
    ds: &Dataset,
    folds: &FoldAssignment,
    outcome: &str,
    params: &ForestParams,
) -> Result<CrossfitResult> {
    params.validate()?;
    let y = ds.outcome(outcome)?;
    let w = ds.w();
    let row_fold = folds.row_folds(ds)?;
    let names = ds.covariate_names();
    let x_rows = ds.x_rows();
    let test_rows: Vec<usize> = (0..ds.len()).filter(|&i| row_fold[i] == TEST_FOLD).collect();

    let fit_fold = |f: usize| -> Result<FoldFit> {
        let train: Vec<usize> =
            (0..ds.len()).filter(|&i| row_fold[i] != TEST_FOLD && row_fold[i] != f && y[i].is_finite()).collect();
        let held: Vec<usize> = (0..ds.len()).filter(|&i| row_fold[i] == f).collect();
        let cols: Vec<Vec<f64>> = ds.covariates.iter().map(|c| train.iter().map(|&i| c[i]).collect()).collect();
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let wt: Vec<f64> = train.iter().map(|&i| w[i]).collect();
        let cl: Vec<u64> = train.iter().map(|&i| ds.cluster_id[i]).collect();
        let fold_params = ForestParams { seed: derive_seed(params.seed, "crossfit/fold", f as u64), ..params.clone() };
        let forest = CausalForest::fit(&cols, &yt, &wt, &cl, &names, &fold_params)?;
        let predict = |i: usize| -> Result<(f64, f64, f64)> {
            let (e, m) = forest.predict_nuisance(&x_rows[i])?;
            Ok((forest.predict(&x_rows[i])?, e, m))
        };
        let own = held.par_iter().map(|&i| predict(i).map(|(c, e, m)| (i, c, e, m))).collect::<Result<Vec<_>>>()?;
        let test = test_rows.par_iter().map(|&i| predict(i)).collect::<Result<Vec<_>>>()?;
        let stats = FoldStats {
            fold: f,
            n_train: train.len(),
            n_predicted: held.len(),
            nuisance_fallbacks: forest.nuisance_estimates.as_ref().map_or(0, |n| n.n_fallback),
            split_counts: forest.split_counts(),
        };
        Ok(FoldFit { stats, own, test })
    };
    let fits: Vec<FoldFit> = (1..=folds.n_folds)
        .into_par_iter()
        .map(|f| fit_fold(f).map_err(|e| Error::Fold { fold: f, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;

    let mut cate = vec![f64::NAN; ds.len()];
    let mut e_hat = vec![f64::NAN; ds.len()];
    let mut m_hat = vec![f64::NAN; ds.len()];
    for fit in &fits {
        for &(i, c, e, m) in &fit.own {
            cate[i] = c;
            e_hat[i] = e;
            m_hat[i] = m;
        }
    }
    let k = fits.len() as f64;
    for (t, &i) in test_rows.iter().enumerate() {
        let (mut c, mut e, mut m) =
            (stats::NeumaierSum::default(), stats::NeumaierSum::default(), stats::NeumaierSum::default());
        for fit in &fits {
            c.add(fit.test[t].0);
            e.add(fit.test[t].1);
            m.add(fit.test[t].2);
        }
        cate[i] = c.value() / k;
        e_hat[i] = e.value() / k;
        m_hat[i] = m.value() / k;
    }

    let mut table = CateTable {
        rows: (0..ds.len())
            .map(|i| CateRow {
                worker_id: ds.worker_id[i],
                event_year: ds.event_year[i],
                cluster_id: ds.cluster_id[i],
                group_id: ds.group_id[i],
                fold: row_fold[i],
                treated: ds.treated[i],
                cate: cate[i],
                e_hat: e_hat[i],
                m_hat: m_hat[i],
                decile: 0,
                quartile: 0,
                within_establishment_rank: None,
                within_establishment_decile: None,
                coworker_cate: None,
                market_cate: None,
                event_size: None,
            })
            .collect(),
    };
    let deciles = rank_quantiles(&table, 10);
    let quartiles = rank_quantiles(&table, 4);
    for (r, (d, q)) in table.rows.iter_mut().zip(deciles.into_iter().zip(quartiles)) {
        r.decile = d;
        r.quartile = q;
    }
    group_cates(&mut table, ds)?;
    Ok(CrossfitResult { table, folds: folds.clone(), fold_stats: fits.into_iter().map(|f| f.stats).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate_panel, CountRange, DgpConfig};

    fn table_from(cates: &[f64], folds: &[usize]) -> CateTable {
        CateTable {
            rows: cates
                .iter()
                .zip(folds)
                .enumerate()
                .map(|(i, (&c, &f))| CateRow {
                    worker_id: i as u64 + 1,
                    event_year: 2000,
                    cluster_id: 0,
                    group_id: 0,
                    fold: f,
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

    #[test]
    fn hundred_closures_split_twenty_and_sixteen() {
        let cfg = DgpConfig {
            n_markets: 4,
            establishments_per_market: CountRange(100, 100),
            workers_per_establishment: CountRange(2, 2),
            closure_rate: 0.25,
            confounding: 0.0,
            ..DgpConfig::default()
        };
        let (ds, _) = generate_panel(&cfg).unwrap();
        let closing: BTreeSet<u64> = (0..ds.len()).filter(|&i| ds.treated[i]).map(|i| ds.group_id[i]).collect();
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| !ds.treated[i] || closing.iter().position(|g| *g == ds.group_id[i]).unwrap() < 100)
            .collect();
        let ds = ds.subset(&idx);
        let folds = make_folds(&ds, 5, 0.2, 9).unwrap();
        let mut counts = [0usize; 6];
        let closing: BTreeSet<u64> = (0..ds.len()).filter(|&i| ds.treated[i]).map(|i| ds.group_id[i]).collect();
        assert_eq!(closing.len(), 100);
        for g in &closing {
            counts[folds.fold_of(*g).unwrap()] += 1;
        }
        assert_eq!(counts, [20, 16, 16, 16, 16, 16]);
        assert_eq!(make_folds(&ds, 5, 0.2, 9).unwrap(), folds);
    }

    #[test]
    fn equal_cates_are_binned_by_tie_break() {
        let t = table_from(&[0.3; 20], &[1; 20]);
        let bins = rank_quantiles(&t, 10);
        for b in 1..=10 {
            assert_eq!(bins.iter().filter(|&&x| x == b).count(), 2);
        }
        assert_eq!(bins[0], 1);
        assert_eq!(bins[19], 10);
    }

    #[test]
    fn coworker_and_market_leave_out_means() {
        let mut ds = Dataset {
            worker_id: vec![1, 2, 3, 4, 5],
            event_year: vec![2000; 5],
            cluster_id: vec![10, 10, 11, 11, 12],
            group_id: vec![10, 10, 11, 11, 12],
            industry: vec![1, 1, 1, 1, 2],
            location: vec![1, 1, 1, 1, 1],
            treated: vec![true; 5],
            matched_to: vec![None; 5],
            ..Default::default()
        };
        ds.outcomes.insert("y_1".into(), vec![0.0; 5]);
        let mut t = table_from(&[-0.1, -0.3, -0.4, -0.4, -0.2], &[1; 5]);
        for (r, i) in t.rows.iter_mut().zip(0..) {
            r.worker_id = ds.worker_id[i];
        }
        group_cates(&mut t, &ds).unwrap();
        let close = |v: Option<f64>, want: f64| (v.unwrap() - want).abs() < 1e-12;
        assert!(close(t.rows[0].coworker_cate, -0.3));
        assert!(close(t.rows[0].market_cate, -0.4));
        assert!(close(t.rows[2].market_cate, -0.2));
        assert_eq!(t.rows[4].coworker_cate, None);
        assert_eq!(t.rows[4].market_cate, None);
        assert_eq!(t.rows[1].within_establishment_rank, Some(1));
    }
}
