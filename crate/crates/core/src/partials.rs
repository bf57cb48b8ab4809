//! Partial effects by rotating blocks of covariates.
//!
//! Covariates split into a location block, an industry block and a worker
//! block. A location's partial effect is the mean CATE over all workers of a
//! year after giving each of them that location's characteristics; industries
//! work the same way. A worker's partial effect averages their CATE over every
//! (location, industry) market observed in their event year.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CovariateLevel, Dataset};
use crate::error::{Error, Result};
use crate::evaluate::difference_in_means;
use crate::forest::CausalForest;
use crate::rng::substream;
use crate::stats::{self, ClusterVariance, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Location,
    Industry,
    Worker,
}

/// Assignment of every covariate to exactly one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariatePartition {
    pub blocks: BTreeMap<String, Block>,
}

impl CovariatePartition {
    /// Location-level covariates form the location block, industry-level ones
    /// the industry block, everything else the worker block.
    pub fn default_for(ds: &Dataset) -> Self {
        let blocks = ds
            .covariate_specs
            .iter()
            .map(|s| {
                let b = match s.level {
                    CovariateLevel::Location => Block::Location,
                    CovariateLevel::Industry => Block::Industry,
                    _ => Block::Worker,
                };
                (s.name.clone(), b)
            })
            .collect();
        Self { blocks }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        Ok(p)
    }

    /// Positions of each block's covariates in `names`; fails unless every
    /// name is assigned and nothing else is.
    pub fn resolve(&self, names: &[String]) -> Result<BTreeMap<Block, Vec<usize>>> {
        let known: BTreeSet<&String> = names.iter().collect();
        if let Some(extra) = self.blocks.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("partition names unknown covariate `{extra}`")));
        }
        let mut out: BTreeMap<Block, Vec<usize>> =
            [Block::Location, Block::Industry, Block::Worker].into_iter().map(|b| (b, Vec::new())).collect();
        for (j, n) in names.iter().enumerate() {
            let b = self.blocks.get(n).ok_or_else(|| Error::Config(format!("covariate `{n}` is not partitioned")))?;
            out.get_mut(b).expect("all blocks present").push(j);
        }
        Ok(out)
    }
}

/// Anything that maps a covariate row to a CATE.
pub trait CatePredictor: Sync {
    fn predict_cate(&self, x: &[f64]) -> Result<f64>;
}

impl CatePredictor for CausalForest {
    fn predict_cate(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> CatePredictor for F {
    fn predict_cate(&self, x: &[f64]) -> Result<f64> {
        Ok(self(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartialsParams {
    /// Most (location, industry) markets averaged per worker.
    pub max_markets: usize,
    pub seed: u64,
}

impl Default for PartialsParams {
    fn default() -> Self {
        Self { max_markets: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketEffect {
    pub id: u32,
    pub effect: f64,
    /// Event years whose rotation included this market.
    pub years: Vec<i32>,
    /// Event years where the market was not observed.
    pub skipped_years: Vec<i32>,
    pub n_workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerPartial {
    pub worker_id: u64,
    pub event_year: i32,
    pub location_effect: f64,
    pub industry_effect: f64,
    pub worker_effect: f64,
    /// Quartiles over workers, 1 = most negative.
    pub location_quartile: usize,
    pub industry_quartile: usize,
    pub worker_quartile: usize,
    pub n_markets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialEffects {
    pub locations: Vec<MarketEffect>,
    pub industries: Vec<MarketEffect>,
    /// In dataset row order.
    pub workers: Vec<WorkerPartial>,
    /// Some year had more markets than `max_markets` and was subsampled.
    pub market_cap_active: bool,
    pub params: PartialsParams,
}

/// Block values of the first row (in key order) of each market id per year.
fn market_vectors(
    ds: &Dataset,
    ids: &[u32],
    cols: &[usize],
    rows_by_year: &BTreeMap<i32, Vec<usize>>,
) -> BTreeMap<i32, BTreeMap<u32, Vec<f64>>> {
    rows_by_year
        .iter()
        .map(|(&t, rows)| {
            let mut m: BTreeMap<u32, (u64, Vec<f64>)> = BTreeMap::new();
            for &i in rows {
                let v: Vec<f64> = cols.iter().map(|&j| ds.covariates[j][i]).collect();
                let e = m.entry(ids[i]).or_insert((ds.worker_id[i], v.clone()));
                if ds.worker_id[i] < e.0 {
                    *e = (ds.worker_id[i], v);
                }
            }
            (t, m.into_iter().map(|(k, (_, v))| (k, v)).collect())
        })
        .collect()
}

fn rows_by_year(ds: &Dataset) -> BTreeMap<i32, Vec<usize>> {
    let mut m: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        m.entry(ds.event_year[i]).or_default().push(i);
    }
    m
}

fn with_block(base: &[f64], cols: &[usize], values: &[f64]) -> Vec<f64> {
    let mut x = base.to_vec();
    for (&j, &v) in cols.iter().zip(values) {
        x[j] = v;
    }
    x
}

fn rotate_block<P: CatePredictor>(
    predictor: &P,
    ds: &Dataset,
    x: &[Vec<f64>],
    ids: &[u32],
    cols: &[usize],
) -> Result<Vec<MarketEffect>> {
    let by_year = rows_by_year(ds);
    let vectors = market_vectors(ds, ids, cols, &by_year);
    let all_ids: BTreeSet<u32> = ids.iter().copied().collect();
    all_ids
        .into_par_iter()
        .map(|id| {
            let (mut total, mut weight) = (NeumaierSum::default(), 0usize);
            let (mut years, mut skipped) = (Vec::new(), Vec::new());
            for (&t, rows) in &by_year {
                let Some(v) = vectors[&t].get(&id) else {
                    skipped.push(t);
                    continue;
                };
                for &i in rows {
                    total.add(predictor.predict_cate(&with_block(&x[i], cols, v))?);
                }
                weight += rows.len();
                years.push(t);
            }
            Ok(MarketEffect {
                id,
                effect: total.value() / weight as f64,
                years,
                skipped_years: skipped,
                n_workers: weight,
            })
        })
        .collect()
}

/// Partial effect of each location: the worker-weighted mean over event years
/// of the year's mean CATE with every worker moved to that location.
pub fn partial_location_effects<P: CatePredictor>(
    predictor: &P,
    ds: &Dataset,
    partition: &CovariatePartition,
) -> Result<Vec<MarketEffect>> {
    let blocks = partition.resolve(&ds.covariate_names())?;
    rotate_block(predictor, ds, &ds.x_rows(), &ds.location, &blocks[&Block::Location])
}

/// Partial effect of each industry, rotating the industry block.
pub fn partial_industry_effects<P: CatePredictor>(
    predictor: &P,
    ds: &Dataset,
    partition: &CovariatePartition,
) -> Result<Vec<MarketEffect>> {
    let blocks = partition.resolve(&ds.covariate_names())?;
    rotate_block(predictor, ds, &ds.x_rows(), &ds.industry, &blocks[&Block::Industry])
}

/// Per row: mean CATE over all (location, industry) pairs observed in the
/// row's event year, and the number of pairs used. Years with more than
/// `max_markets` pairs use a seeded subsample of that size.
pub fn partial_worker_effects<P: CatePredictor>(
    predictor: &P,
    ds: &Dataset,
    partition: &CovariatePartition,
    params: &PartialsParams,
) -> Result<(Vec<(f64, usize)>, bool)> {
    if params.max_markets == 0 {
        return Err(Error::Config("max_markets must be positive".into()));
    }
    let blocks = partition.resolve(&ds.covariate_names())?;
    let (lc, sc) = (&blocks[&Block::Location], &blocks[&Block::Industry]);
    let by_year = rows_by_year(ds);
    let lv = market_vectors(ds, &ds.location, lc, &by_year);
    let sv = market_vectors(ds, &ds.industry, sc, &by_year);
    let mut capped = false;
    let mut grids: BTreeMap<i32, Vec<(&Vec<f64>, &Vec<f64>)>> = BTreeMap::new();
    for &t in by_year.keys() {
        let mut grid: Vec<(&Vec<f64>, &Vec<f64>)> =
            lv[&t].values().flat_map(|l| sv[&t].values().map(move |s| (l, s))).collect();
        if grid.len() > params.max_markets {
            capped = true;
            let mut idx: Vec<usize> = (0..grid.len()).collect();
            idx.shuffle(&mut substream(params.seed, "partials/markets", t as u64));
            let mut keep = idx[..params.max_markets].to_vec();
            keep.sort_unstable();
            grid = keep.into_iter().map(|k| grid[k]).collect();
        }
        grids.insert(t, grid);
    }
    let x = ds.x_rows();
    let out = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let grid = &grids[&ds.event_year[i]];
            let mut acc = NeumaierSum::default();
            for (l, s) in grid {
                acc.add(predictor.predict_cate(&with_block(&with_block(&x[i], lc, l), sc, s))?);
            }
            Ok((acc.value() / grid.len() as f64, grid.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, capped))
}

fn quartiles(ds: &Dataset, values: &[f64]) -> Vec<usize> {
    let keys: Vec<(u64, i32)> = (0..ds.len()).map(|i| ds.key(i)).collect();
    stats::balanced_bins(values, &keys, 4).into_iter().map(|b| b + 1).collect()
}

/// All three rotations, with worker-weighted quartiles of each effect.
pub fn partial_effects<P: CatePredictor>(
    predictor: &P,
    ds: &Dataset,
    partition: &CovariatePartition,
    params: &PartialsParams,
) -> Result<PartialEffects> {
    if ds.is_empty() {
        return Err(Error::Insufficient("partial effects need at least one row".into()));
    }
    let locations = partial_location_effects(predictor, ds, partition)?;
    let industries = partial_industry_effects(predictor, ds, partition)?;
    let (worker, capped) = partial_worker_effects(predictor, ds, partition, params)?;
    let lmap: BTreeMap<u32, f64> = locations.iter().map(|m| (m.id, m.effect)).collect();
    let smap: BTreeMap<u32, f64> = industries.iter().map(|m| (m.id, m.effect)).collect();
    let le: Vec<f64> = ds.location.iter().map(|l| lmap[l]).collect();
    let se: Vec<f64> = ds.industry.iter().map(|s| smap[s]).collect();
    let we: Vec<f64> = worker.iter().map(|w| w.0).collect();
    let (lq, sq, wq) = (quartiles(ds, &le), quartiles(ds, &se), quartiles(ds, &we));
    let workers = (0..ds.len())
        .map(|i| WorkerPartial {
            worker_id: ds.worker_id[i],
            event_year: ds.event_year[i],
            location_effect: le[i],
            industry_effect: se[i],
            worker_effect: we[i],
            location_quartile: lq[i],
            industry_quartile: sq[i],
            worker_quartile: wq[i],
            n_markets: worker[i].1,
        })
        .collect();
    Ok(PartialEffects { locations, industries, workers, market_cap_active: capped, params: params.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTabRow {
    /// `worker`, `location` or `industry`.
    pub panel: String,
    pub outcome: String,
    pub worker_quartile: Option<usize>,
    pub market_quartile: Option<usize>,
    pub ate: f64,
    pub se: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Treated-minus-control differences by worker-effect quartile, and by
/// location (industry) quartile crossed with worker quartile. SEs cluster on
/// establishments for the worker panel and on the rotated market otherwise.
/// Cells lacking one arm are left out.
pub fn quartile_cross_tabs(
    partials: &PartialEffects,
    ds: &Dataset,
    outcomes: &[String],
    kind: ClusterVariance,
) -> Result<Vec<CrossTabRow>> {
    if partials.workers.len() != ds.len() {
        return Err(Error::Data("partial effects do not match the dataset".into()));
    }
    for (i, w) in partials.workers.iter().enumerate() {
        if (w.worker_id, w.event_year) != ds.key(i) {
            return Err(Error::Data("partial effects are not aligned with the dataset".into()));
        }
    }
    let wq: Vec<usize> = partials.workers.iter().map(|w| w.worker_quartile).collect();
    let lq: Vec<usize> = partials.workers.iter().map(|w| w.location_quartile).collect();
    let sq: Vec<usize> = partials.workers.iter().map(|w| w.industry_quartile).collect();
    let loc_cl: Vec<u64> = ds.location.iter().map(|&l| u64::from(l)).collect();
    let ind_cl: Vec<u64> = ds.industry.iter().map(|&s| u64::from(s)).collect();
    let panels: [(&str, Option<&[usize]>, &[u64]); 3] =
        [("worker", None, &ds.cluster_id), ("location", Some(&lq), &loc_cl), ("industry", Some(&sq), &ind_cl)];
    let mut out = Vec::new();
    for name in outcomes {
        let Ok(y) = ds.outcome(name) else { continue };
        for (panel, market, clusters) in panels {
            let mut cells: Vec<(Option<usize>, Option<usize>)> = (1..=4).map(|w| (Some(w), None)).collect();
            if market.is_some() {
                cells = (1..=4)
                    .flat_map(|m| std::iter::once((None, Some(m))).chain((1..=4).map(move |w| (Some(w), Some(m)))))
                    .collect();
            }
            for (wcell, mcell) in cells {
                let rows: Vec<usize> = (0..ds.len())
                    .filter(|&i| wcell.is_none_or(|w| wq[i] == w) && mcell.is_none_or(|m| market.unwrap()[i] == m))
                    .collect();
                let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                let ws: Vec<bool> = rows.iter().map(|&i| ds.treated[i]).collect();
                let cs: Vec<u64> = rows.iter().map(|&i| clusters[i]).collect();
                match difference_in_means(&ys, &ws, &cs, kind) {
                    Ok((ate, se, nt, nc)) => out.push(CrossTabRow {
                        panel: panel.into(),
                        outcome: name.clone(),
                        worker_quartile: wcell,
                        market_quartile: mcell,
                        ate,
                        se,
                        n_treated: nt,
                        n_control: nc,
                    }),
                    Err(Error::Insufficient(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileProfile {
    pub block: Block,
    pub covariate: String,
    /// Mean covariate value in quartiles 1..=4.
    pub means: [f64; 4],
}

/// Covariate means by quartile of each partial effect.
pub fn quartile_profiles(partials: &PartialEffects, ds: &Dataset) -> Vec<QuartileProfile> {
    let pick: [(Block, fn(&WorkerPartial) -> usize); 3] = [
        (Block::Location, |w| w.location_quartile),
        (Block::Industry, |w| w.industry_quartile),
        (Block::Worker, |w| w.worker_quartile),
    ];
    let mut out = Vec::new();
    for (block, q) in pick {
        for (spec, col) in ds.covariate_specs.iter().zip(&ds.covariates) {
            let mut means = [f64::NAN; 4];
            for (k, m) in means.iter_mut().enumerate() {
                let v: Vec<f64> =
                    partials.workers.iter().zip(col).filter(|(w, _)| q(w) == k + 1).map(|(_, x)| *x).collect();
                if !v.is_empty() {
                    *m = stats::mean(&v);
                }
            }
            out.push(QuartileProfile { block, covariate: spec.name.clone(), means });
        }
    }
    out
}
