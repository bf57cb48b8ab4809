//! Breiman-style regression forests with cluster subsampling and
//! out-of-bag prediction, used for the nuisance functions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grow::{compact, grow, GrowConfig, Presorted, Targets};
use super::{draw_clusters, leaf_index, Canonical, ForestParams, Node};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::stats::NeumaierSum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionLeaf {
    pub value: f64,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub seed: u64,
    /// Indices into the forest's sorted training cluster ids.
    pub clusters: Vec<u32>,
    pub nodes: Vec<Node>,
    pub leaves: Vec<RegressionLeaf>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaves[leaf_index(&self.nodes, |j| x[j])].value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OobPrediction {
    pub value: f64,
    /// Trees whose subsample excluded the row's cluster.
    pub n_trees: u32,
    /// No such tree existed; `value` is the full-forest prediction.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub n_features: usize,
    pub params: ForestParams,
    pub cluster_ids: Vec<u64>,
    pub trees: Vec<RegressionTree>,
    /// Out-of-bag predictions for the training rows, in input order.
    pub oob: Vec<OobPrediction>,
}

impl RegressionForest {
    /// Fit `params.num_trees` trees of `target` on column-major covariates.
    pub fn fit(cols: &[Vec<f64>], target: &[f64], clusters: &[u64], params: &ForestParams) -> Result<Self> {
        params.validate()?;
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("regression target contains missing or non-finite values".into()));
        }
        let canon = Canonical::new(cols, clusters, &[target])?;
        let g = canon.cluster_ids.len();
        if g < 2 {
            return Err(Error::Insufficient(format!("regression forest needs at least 2 clusters, got {g}")));
        }
        let y = canon.reorder(target);
        let presort = Presorted::new(&canon.cols);
        let p = cols.len();
        let cfg = GrowConfig {
            min_leaf: params.min_leaf,
            alpha: params.alpha,
            max_depth: params.max_depth.unwrap_or(usize::MAX),
            mtry: params.effective_mtry(p),
            imbalance_penalty: 0.0,
            ratio: 1.0,
        };
        let s = ((params.sample_fraction * g as f64).floor() as usize).clamp(1, g);
        let n = canon.n();

        let trees: Vec<RegressionTree> = (0..params.num_trees)
            .into_par_iter()
            .map(|b| {
                let seed = crate::rng::derive_seed(params.seed, "regression/tree", b as u64);
                let mut rng = substream(seed, "tree", 0);
                let mut drawn = draw_clusters(&mut rng, g, s);
                drawn.sort_unstable();
                let mut in_sample = vec![false; n];
                for &c in &drawn {
                    for r in canon.cluster_rows[c as usize].clone() {
                        in_sample[r as usize] = true;
                    }
                }
                let nodes = compact(&grow(&canon.cols, &presort, &in_sample, &Targets::Mean { y: &y }, &cfg, &mut rng));
                let n_leaves = super::grow::n_leaves(&nodes);
                let mut sums = vec![NeumaierSum::default(); n_leaves];
                let mut counts = vec![0u32; n_leaves];
                for r in (0..n).filter(|&r| in_sample[r]) {
                    let leaf = leaf_index(&nodes, |j| canon.cols[j][r]);
                    sums[leaf].add(y[r]);
                    counts[leaf] += 1;
                }
                let leaves = sums
                    .iter()
                    .zip(&counts)
                    .map(|(s, &c)| RegressionLeaf {
                        value: if c > 0 { s.value() / f64::from(c) } else { f64::NAN },
                        n: c,
                    })
                    .collect();
                RegressionTree { seed, clusters: drawn, nodes, leaves }
            })
            .collect();

        let mut forest = Self {
            n_features: p,
            params: params.clone(),
            cluster_ids: canon.cluster_ids.clone(),
            trees,
            oob: Vec::new(),
        };

        let membership: Vec<Vec<bool>> = forest
            .trees
            .iter()
            .map(|t| {
                let mut m = vec![false; g];
                for &c in &t.clusters {
                    m[c as usize] = true;
                }
                m
            })
            .collect();
        let oob_canonical: Vec<OobPrediction> = (0..n)
            .into_par_iter()
            .map(|r| {
                let c = canon.row_cluster[r] as usize;
                let mut acc = NeumaierSum::default();
                let mut used = 0u32;
                let x: Vec<f64> = canon.cols.iter().map(|col| col[r]).collect();
                for (t, m) in forest.trees.iter().zip(&membership) {
                    if !m[c] {
                        acc.add(t.predict(&x));
                        used += 1;
                    }
                }
                if used > 0 {
                    OobPrediction { value: acc.value() / f64::from(used), n_trees: used, fallback: false }
                } else {
                    OobPrediction { value: forest.predict(&x), n_trees: 0, fallback: true }
                }
            })
            .collect();
        let mut oob = vec![OobPrediction { value: f64::NAN, n_trees: 0, fallback: true }; n];
        for (c, &orig) in canon.perm.iter().enumerate() {
            oob[orig as usize] = oob_canonical[c];
        }
        forest.oob = oob;
        Ok(forest)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut acc = NeumaierSum::default();
        for t in &self.trees {
            acc.add(t.predict(x));
        }
        acc.value() / self.trees.len() as f64
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Out-of-bag prediction for training row `row` (input order).
    pub fn predict_oob(&self, row: usize) -> Result<OobPrediction> {
        self.oob
            .get(row)
            .copied()
            .ok_or_else(|| Error::Data(format!("row {row} is not a training row ({} rows)", self.oob.len())))
    }

    pub fn oob_values(&self) -> Vec<f64> {
        self.oob.iter().map(|o| o.value).collect()
    }

    pub fn n_fallback(&self) -> usize {
        self.oob.iter().filter(|o| o.fallback).count()
    }

    pub fn split_counts(&self) -> Vec<usize> {
        super::split_counts(self.n_features, self.trees.iter().map(|t| t.nodes.as_slice()))
    }
}
