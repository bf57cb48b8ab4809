//! Honest, cluster-aware causal forest.
//!
//! Each tree draws a share of clusters, splits them into a split half and an
//! estimation half, grows on the split half only and fills its leaves with the
//! estimation half. Predictions use forest weights, which reduce to summing the
//! per-leaf means of `wt*yt` and `wt^2` over trees.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grow::{self, compact, grow, GrowConfig, Presorted, Targets};
use super::{
    draw_clusters, find_leaf, hash_nodes, leaf_index, nodes_hash, Canonical, ForestParams, Node, RegressionForest,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};
use crate::stats::NeumaierSum;

/// Sufficient statistics of one side of a candidate split.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChildSummary {
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub sum_w: f64,
    pub sum_y: f64,
    pub sum_ww: f64,
    pub sum_wy: f64,
}

impl ChildSummary {
    pub fn from_rows(rows: impl IntoIterator<Item = usize>, w: &[f64], wt: &[f64], yt: &[f64]) -> Self {
        let mut s = Self::default();
        let (mut sw, mut sy, mut sww, mut swy) =
            (NeumaierSum::default(), NeumaierSum::default(), NeumaierSum::default(), NeumaierSum::default());
        for i in rows {
            s.n += 1;
            if w[i] > 0.5 {
                s.n_treated += 1;
            } else {
                s.n_control += 1;
            }
            sw.add(wt[i]);
            sy.add(yt[i]);
            sww.add(wt[i] * wt[i]);
            swy.add(wt[i] * yt[i]);
        }
        s.sum_w = sw.value();
        s.sum_y = sy.value();
        s.sum_ww = sww.value();
        s.sum_wy = swy.value();
        s
    }

    pub fn tau(&self) -> Option<f64> {
        (self.sum_ww > 0.0).then(|| self.sum_wy / self.sum_ww)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub left: ChildSummary,
    pub right: ChildSummary,
}

/// `n_L n_R / (n_L + n_R)^2 (tau_L - tau_R)^2`, less the imbalance penalty.
/// `None` when either child has no residual treatment variation.
pub fn split_score(c: &SplitCandidate, imbalance_penalty: f64) -> Option<f64> {
    let tl = c.left.tau()?;
    let tr = c.right.tau()?;
    Some(grow::effect_score(
        c.left.n as f64,
        c.right.n as f64,
        tl,
        tr,
        c.left.sum_ww,
        c.right.sum_ww,
        imbalance_penalty,
    ))
}

/// Best (feature, threshold, score) over all covariates for the given rows,
/// using the same scan as tree growth with unscaled leaf-size checks.
pub fn best_causal_split(
    cols: &[Vec<f64>],
    w: &[f64],
    wt: &[f64],
    yt: &[f64],
    rows: &[usize],
    min_leaf: usize,
    alpha: f64,
    imbalance_penalty: f64,
) -> Option<(usize, f64, f64)> {
    let treated: Vec<bool> = w.iter().map(|&v| v > 0.5).collect();
    let orders: Vec<Vec<u32>> = cols
        .iter()
        .map(|c| {
            let mut o: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
            o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
            o
        })
        .collect();
    let cfg = GrowConfig { min_leaf, alpha, max_depth: usize::MAX, mtry: cols.len(), imbalance_penalty, ratio: 1.0 };
    let features: Vec<usize> = (0..cols.len()).collect();
    let targets = Targets::Effect { wt, yt, treated: &treated };
    grow::best_split(cols, &orders, 0..rows.len(), &features, &targets, &cfg).map(|b| (b.feature, b.threshold, b.score))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalLeaf {
    /// Estimation-half training rows (input order indices), ascending.
    pub samples: Vec<u32>,
    pub n_treated: u32,
    pub n_control: u32,
    pub mean_wy: f64,
    pub mean_ww: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub seed: u64,
    /// Indices into the forest's sorted training cluster ids.
    pub split_clusters: Vec<u32>,
    pub estimation_clusters: Vec<u32>,
    pub nodes: Vec<Node>,
    pub leaves: Vec<CausalLeaf>,
}

impl CausalTree {
    pub fn leaf(&self, x: &[f64]) -> &CausalLeaf {
        &self.leaves[leaf_index(&self.nodes, |j| x[j])]
    }

    pub fn depth(&self) -> usize {
        fn d(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + d(nodes, left as usize).max(d(nodes, right as usize)),
            }
        }
        d(&self.nodes, 0)
    }

    pub fn structure_hash(&self) -> String {
        nodes_hash(&self.nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    /// Out-of-bag propensity, clipped.
    pub e_hat: Vec<f64>,
    /// Out-of-bag marginal outcome.
    pub m_hat: Vec<f64>,
    pub w_resid: Vec<f64>,
    pub y_resid: Vec<f64>,
    /// Rows whose nuisance predictions fell back to the full forest.
    pub n_fallback: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceModels {
    pub propensity: RegressionForest,
    pub outcome: RegressionForest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForest {
    pub params: ForestParams,
    pub covariate_names: Vec<String>,
    pub cluster_ids: Vec<u64>,
    pub trees: Vec<CausalTree>,
    /// Residualized treatment and outcome of the training rows, input order.
    pub w_resid: Vec<f64>,
    pub y_resid: Vec<f64>,
    pub nuisance: Option<NuisanceModels>,
    pub nuisance_estimates: Option<NuisanceEstimates>,
}

fn check_binary(w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("treatment must be coded 0/1".into()));
    }
    Ok(())
}

impl CausalForest {
    /// Fit nuisance forests for `W` and `y`, residualize with their out-of-bag
    /// predictions and grow the causal forest on the residuals.
    pub fn fit(
        cols: &[Vec<f64>],
        y: &[f64],
        w: &[f64],
        clusters: &[u64],
        names: &[String],
        params: &ForestParams,
    ) -> Result<Self> {
        params.validate()?;
        check_binary(w)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("outcome contains missing or non-finite values".into()));
        }
        let nuisance_params = |label: &str| ForestParams {
            num_trees: params.effective_nuisance_trees(),
            seed: derive_seed(params.seed, label, 0),
            ..params.clone()
        };
        let (propensity, outcome) = rayon::join(
            || RegressionForest::fit(cols, w, clusters, &nuisance_params("nuisance/propensity")),
            || RegressionForest::fit(cols, y, clusters, &nuisance_params("nuisance/outcome")),
        );
        let (propensity, outcome) = (propensity?, outcome?);
        let clip = params.propensity_clip;
        let e_hat: Vec<f64> = propensity.oob.iter().map(|o| o.value.clamp(clip, 1.0 - clip)).collect();
        let m_hat = outcome.oob_values();
        let w_resid: Vec<f64> = w.iter().zip(&e_hat).map(|(w, e)| w - e).collect();
        let y_resid: Vec<f64> = y.iter().zip(&m_hat).map(|(y, m)| y - m).collect();
        let n_fallback = propensity.oob.iter().zip(&outcome.oob).filter(|(a, b)| a.fallback || b.fallback).count();
        let mut forest = Self::fit_residualized(cols, w, &w_resid, &y_resid, clusters, names, params)?;
        forest.nuisance_estimates = Some(NuisanceEstimates { e_hat, m_hat, w_resid, y_resid, n_fallback });
        forest.nuisance = Some(NuisanceModels { propensity, outcome });
        Ok(forest)
    }

    /// Grow the causal forest on given residuals `wt = W - e(x)`, `yt = y - m(x)`.
    pub fn fit_residualized(
        cols: &[Vec<f64>],
        w: &[f64],
        wt: &[f64],
        yt: &[f64],
        clusters: &[u64],
        names: &[String],
        params: &ForestParams,
    ) -> Result<Self> {
        params.validate()?;
        check_binary(w)?;
        if names.len() != cols.len() {
            return Err(Error::Data(format!("{} covariate names for {} columns", names.len(), cols.len())));
        }
        if wt.iter().chain(yt).any(|v| !v.is_finite()) {
            return Err(Error::Data("residuals contain missing or non-finite values".into()));
        }
        let canon = Canonical::new(cols, clusters, &[w, wt, yt])?;
        let g = canon.cluster_ids.len();
        if g < 10 {
            return Err(Error::Insufficient(format!("causal forest needs at least 10 clusters, got {g}")));
        }
        let n = canon.n();
        let wt_c = canon.reorder(wt);
        let yt_c = canon.reorder(yt);
        let treated: Vec<bool> = canon.perm.iter().map(|&i| w[i as usize] > 0.5).collect();
        let presort = Presorted::new(&canon.cols);
        let s = ((params.sample_fraction * g as f64).floor() as usize).clamp(2, g);
        let n_split = ((params.honesty_fraction * s as f64).floor() as usize).clamp(1, s - 1);
        let max_depth = params.max_depth.unwrap_or(usize::MAX);
        let mtry = params.effective_mtry(cols.len());

        let trees: Vec<CausalTree> = (0..params.num_trees)
            .into_par_iter()
            .map(|b| {
                let seed = derive_seed(params.seed, "causal/tree", b as u64);
                let mut rng = substream(seed, "tree", 0);
                let drawn = draw_clusters(&mut rng, g, s);
                let mut split_clusters = drawn[..n_split].to_vec();
                let mut estimation_clusters = drawn[n_split..].to_vec();
                split_clusters.sort_unstable();
                estimation_clusters.sort_unstable();

                let mut in_split = vec![false; n];
                let mut n_split_rows = 0usize;
                for &c in &split_clusters {
                    for r in canon.cluster_rows[c as usize].clone() {
                        in_split[r as usize] = true;
                        n_split_rows += 1;
                    }
                }
                let est_rows: Vec<u32> =
                    estimation_clusters.iter().flat_map(|&c| canon.cluster_rows[c as usize].clone()).collect();
                let cfg = GrowConfig {
                    min_leaf: params.min_leaf,
                    alpha: params.alpha,
                    max_depth,
                    mtry,
                    imbalance_penalty: params.imbalance_penalty,
                    ratio: est_rows.len() as f64 / n_split_rows.max(1) as f64,
                };
                let targets = Targets::Effect { wt: &wt_c, yt: &yt_c, treated: &treated };
                let mut nodes = grow(&canon.cols, &presort, &in_split, &targets, &cfg, &mut rng);

                let mut rows: Vec<Vec<u32>> = vec![Vec::new(); nodes.len()];
                for &r in &est_rows {
                    rows[find_leaf(&nodes, |j| canon.cols[j][r as usize])].push(r);
                }
                if params.prune_empty_leaves {
                    let ok = |rs: &[u32]| {
                        let t = rs.iter().filter(|&&r| treated[r as usize]).count();
                        t > 0 && t < rs.len()
                    };
                    prune(0, &mut nodes, &mut rows, &ok);
                }
                let (nodes, leaves) = finish(&nodes, rows, &canon.perm, &treated, &wt_c, &yt_c);
                CausalTree { seed, split_clusters, estimation_clusters, nodes, leaves }
            })
            .collect();

        Ok(Self {
            params: params.clone(),
            covariate_names: names.to_vec(),
            cluster_ids: canon.cluster_ids,
            trees,
            w_resid: wt.to_vec(),
            y_resid: yt.to_vec(),
            nuisance: None,
            nuisance_estimates: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.covariate_names.len()
    }

    /// Forest-weighted effect estimate at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::Data(format!("query has {} covariates, forest expects {}", x.len(), self.n_features())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("query covariates must be complete".into()));
        }
        let (mut num, mut den) = (NeumaierSum::default(), NeumaierSum::default());
        for t in &self.trees {
            let leaf = t.leaf(x);
            if !leaf.samples.is_empty() {
                num.add(leaf.mean_wy);
                den.add(leaf.mean_ww);
            }
        }
        let den = den.value();
        if den > 0.0 {
            Ok(num.value() / den)
        } else {
            Err(Error::Numeric("all forest weights are zero at the query point".into()))
        }
    }

    /// Row-major batch prediction; failures become `NaN`.
    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.par_iter().map(|x| self.predict(x).unwrap_or(f64::NAN)).collect()
    }

    /// Forest weights over training rows (input order); sums to one when every
    /// tree's leaf at `x` is nonempty.
    pub fn forest_weights(&self, x: &[f64]) -> Vec<f64> {
        let mut alpha = vec![0.0; self.w_resid.len()];
        let b = self.trees.len() as f64;
        for t in &self.trees {
            let leaf = t.leaf(x);
            let k = leaf.samples.len() as f64;
            for &i in &leaf.samples {
                alpha[i as usize] += 1.0 / (b * k);
            }
        }
        alpha
    }

    /// `sum a_i wt_i yt_i / sum a_i wt_i^2` with explicit forest weights.
    pub fn predict_weighted(&self, x: &[f64]) -> Result<f64> {
        let alpha = self.forest_weights(x);
        let (mut num, mut den) = (NeumaierSum::default(), NeumaierSum::default());
        for (i, a) in alpha.iter().enumerate() {
            if *a > 0.0 {
                num.add(a * self.w_resid[i] * self.y_resid[i]);
                den.add(a * self.w_resid[i] * self.w_resid[i]);
            }
        }
        if den.value() > 0.0 {
            Ok(num.value() / den.value())
        } else {
            Err(Error::Numeric("all forest weights are zero at the query point".into()))
        }
    }

    /// Nuisance predictions `(e(x), m(x))` for new rows, with `e` clipped.
    pub fn predict_nuisance(&self, x: &[f64]) -> Result<(f64, f64)> {
        let models =
            self.nuisance.as_ref().ok_or_else(|| Error::Data("forest was fit on supplied residuals".into()))?;
        let clip = self.params.propensity_clip;
        Ok((models.propensity.predict(x).clamp(clip, 1.0 - clip), models.outcome.predict(x)))
    }

    pub fn structure_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.trees {
            hash_nodes(&mut h, &t.nodes);
        }
        hex::encode(h.finalize())
    }

    pub fn split_counts(&self) -> Vec<usize> {
        super::split_counts(self.n_features(), self.trees.iter().map(|t| t.nodes.as_slice()))
    }
}

/// Collapse, bottom-up, any split with a child leaf lacking treated or control
/// estimation rows into a single leaf.
fn prune(k: usize, nodes: &mut [Node], rows: &mut [Vec<u32>], ok: &dyn Fn(&[u32]) -> bool) {
    let Node::Split { left, right, .. } = nodes[k] else {
        return;
    };
    let (l, r) = (left as usize, right as usize);
    prune(l, nodes, rows, ok);
    prune(r, nodes, rows, ok);
    let bad = |c: usize| matches!(nodes[c], Node::Leaf { .. }) && !ok(&rows[c]);
    if bad(l) || bad(r) {
        let mut all = Vec::new();
        gather(k, nodes, rows, &mut all);
        nodes[k] = Node::Leaf { leaf: grow::OPEN_LEAF };
        rows[k] = all;
    }
}

fn gather(k: usize, nodes: &[Node], rows: &mut [Vec<u32>], out: &mut Vec<u32>) {
    match nodes[k] {
        Node::Leaf { .. } => out.append(&mut rows[k]),
        Node::Split { left, right, .. } => {
            gather(left as usize, nodes, rows, out);
            gather(right as usize, nodes, rows, out);
        }
    }
}

/// Compact the tree and build leaf summaries from canonical estimation rows.
fn finish(
    nodes: &[Node],
    mut rows: Vec<Vec<u32>>,
    perm: &[u32],
    treated: &[bool],
    wt: &[f64],
    yt: &[f64],
) -> (Vec<Node>, Vec<CausalLeaf>) {
    let compacted = compact(nodes);
    let mut leaves = Vec::with_capacity(grow::n_leaves(&compacted));
    let mut stack = vec![0usize];
    while let Some(k) = stack.pop() {
        match nodes[k] {
            Node::Split { left, right, .. } => {
                stack.push(right as usize);
                stack.push(left as usize);
            }
            Node::Leaf { .. } => {
                let mut rs = std::mem::take(&mut rows[k]);
                rs.sort_unstable();
                let (mut wy, mut ww) = (NeumaierSum::default(), NeumaierSum::default());
                let mut n_treated = 0u32;
                for &r in &rs {
                    let r = r as usize;
                    wy.add(wt[r] * yt[r]);
                    ww.add(wt[r] * wt[r]);
                    n_treated += u32::from(treated[r]);
                }
                let n = rs.len() as f64;
                let mut samples: Vec<u32> = rs.iter().map(|&r| perm[r as usize]).collect();
                samples.sort_unstable();
                leaves.push(CausalLeaf {
                    n_treated,
                    n_control: rs.len() as u32 - n_treated,
                    mean_wy: if n > 0.0 { wy.value() / n } else { 0.0 },
                    mean_ww: if n > 0.0 { ww.value() / n } else { 0.0 },
                    samples,
                });
            }
        }
    }
    (compacted, leaves)
}
