//! Cluster-aware regression forests and honest causal forests.
//!
//! All subsampling happens at the cluster level. Training rows are first put
//! into a canonical order (by cluster, covariates and targets), so a fit depends
//! only on the multiset of rows and the seed, never on input order.

mod causal;
mod grow;
mod io;
mod regression;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use causal::{
    best_causal_split, split_score, CausalForest, CausalLeaf, CausalTree, ChildSummary, NuisanceEstimates,
    NuisanceModels, SplitCandidate,
};
pub use io::{FORMAT_VERSION, MAGIC};
pub use regression::{OobPrediction, RegressionForest, RegressionLeaf, RegressionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Fraction of clusters drawn into each tree.
    pub sample_fraction: f64,
    /// Covariates tried per node; `None` gives `min(p, floor(sqrt(p)) + 20)`.
    pub mtry: Option<usize>,
    /// Minimum treated and minimum control rows per leaf.
    pub min_leaf: usize,
    /// Fraction of a tree's clusters used to choose splits.
    pub honesty_fraction: f64,
    pub prune_empty_leaves: bool,
    /// Minimum share of the parent's rows in each child.
    pub alpha: f64,
    pub imbalance_penalty: f64,
    pub max_depth: Option<usize>,
    /// Trees in each nuisance forest; `None` gives `max(50, num_trees / 4)`.
    pub nuisance_trees: Option<usize>,
    /// Propensity estimates are clipped to `[clip, 1 - clip]`.
    pub propensity_clip: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 2000,
            sample_fraction: 0.5,
            mtry: None,
            min_leaf: 5,
            honesty_fraction: 0.5,
            prune_empty_leaves: true,
            alpha: 0.05,
            imbalance_penalty: 0.0,
            max_depth: None,
            nuisance_trees: None,
            propensity_clip: 0.01,
            seed: 42,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_trees == 0 {
            return bad("num_trees must be positive".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample_fraction = {} outside (0, 1]", self.sample_fraction));
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return bad(format!("honesty_fraction = {} outside (0, 1)", self.honesty_fraction));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 0.5)", self.alpha));
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be positive".into());
        }
        if self.mtry == Some(0) {
            return bad("mtry must be positive".into());
        }
        if !(self.imbalance_penalty >= 0.0) {
            return bad("imbalance_penalty must be nonnegative".into());
        }
        if !(0.0..0.5).contains(&self.propensity_clip) {
            return bad(format!("propensity_clip = {} outside [0, 0.5)", self.propensity_clip));
        }
        Ok(())
    }

    pub fn effective_mtry(&self, p: usize) -> usize {
        let default = (p as f64).sqrt().floor() as usize + 20;
        self.mtry.unwrap_or(default).min(p).max(1)
    }

    pub fn effective_nuisance_trees(&self) -> usize {
        self.nuisance_trees.unwrap_or_else(|| (self.num_trees / 4).max(50))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        leaf: u32,
    },
}

/// Node index of the leaf reached by `x`.
pub(crate) fn find_leaf(nodes: &[Node], x: impl Fn(usize) -> f64) -> usize {
    let mut k = 0usize;
    loop {
        match nodes[k] {
            Node::Split { feature, threshold, left, right } => {
                k = if x(feature as usize) <= threshold { left as usize } else { right as usize };
            }
            Node::Leaf { .. } => return k,
        }
    }
}

pub(crate) fn leaf_index(nodes: &[Node], x: impl Fn(usize) -> f64) -> usize {
    match nodes[find_leaf(nodes, x)] {
        Node::Leaf { leaf } => leaf as usize,
        Node::Split { .. } => unreachable!("find_leaf stops at leaves"),
    }
}

pub(crate) fn hash_nodes(hasher: &mut Sha256, nodes: &[Node]) {
    for node in nodes {
        match *node {
            Node::Split { feature, threshold, left, right } => {
                hasher.update([0u8]);
                hasher.update(feature.to_le_bytes());
                hasher.update(threshold.to_bits().to_le_bytes());
                hasher.update(left.to_le_bytes());
                hasher.update(right.to_le_bytes());
            }
            Node::Leaf { leaf } => {
                hasher.update([1u8]);
                hasher.update(leaf.to_le_bytes());
            }
        }
    }
}

pub(crate) fn nodes_hash(nodes: &[Node]) -> String {
    let mut h = Sha256::new();
    hash_nodes(&mut h, nodes);
    hex::encode(h.finalize())
}

/// Counts of splits on each covariate across all trees.
pub(crate) fn split_counts<'a>(p: usize, trees: impl Iterator<Item = &'a [Node]>) -> Vec<usize> {
    let mut counts = vec![0; p];
    for nodes in trees {
        for node in nodes {
            if let Node::Split { feature, .. } = node {
                counts[*feature as usize] += 1;
            }
        }
    }
    counts
}

/// Training rows reordered canonically, with cluster bookkeeping.
pub(crate) struct Canonical {
    /// `perm[c]` is the original index of canonical row `c`.
    pub perm: Vec<u32>,
    /// Column-major covariates in canonical order.
    pub cols: Vec<Vec<f64>>,
    /// Sorted distinct cluster ids.
    pub cluster_ids: Vec<u64>,
    /// Canonical rows of each cluster, contiguous.
    pub cluster_rows: Vec<std::ops::Range<u32>>,
    /// Cluster index of each canonical row.
    pub row_cluster: Vec<u32>,
}

impl Canonical {
    pub fn new(cols: &[Vec<f64>], clusters: &[u64], extra: &[&[f64]]) -> Result<Self> {
        let n = clusters.len();
        if cols.iter().any(|c| c.len() != n) || extra.iter().any(|c| c.len() != n) {
            return Err(Error::Data("forest inputs have mismatched lengths".into()));
        }
        if n > u32::MAX as usize {
            return Err(Error::Data("too many rows for a forest".into()));
        }
        for (j, c) in cols.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("covariate {j} contains missing or non-finite values")));
            }
        }
        let mut perm: Vec<u32> = (0..n as u32).collect();
        perm.sort_by(|&a, &b| {
            let (a, b) = (a as usize, b as usize);
            let values = cols.iter().map(Vec::as_slice).chain(extra.iter().copied());
            clusters[a]
                .cmp(&clusters[b])
                .then_with(|| {
                    values.map(|c| c[a].total_cmp(&c[b])).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
                })
                .then_with(|| a.cmp(&b))
        });
        let cols_c: Vec<Vec<f64>> = cols.iter().map(|c| perm.iter().map(|&i| c[i as usize]).collect()).collect();
        let mut cluster_ids = Vec::new();
        let mut cluster_rows = Vec::new();
        let mut row_cluster = Vec::with_capacity(n);
        let mut start = 0u32;
        for (c, &i) in perm.iter().enumerate() {
            let id = clusters[i as usize];
            if cluster_ids.last() != Some(&id) {
                if !cluster_ids.is_empty() {
                    cluster_rows.push(start..c as u32);
                }
                cluster_ids.push(id);
                start = c as u32;
            }
            row_cluster.push(cluster_ids.len() as u32 - 1);
        }
        if !cluster_ids.is_empty() {
            cluster_rows.push(start..n as u32);
        }
        Ok(Self { perm, cols: cols_c, cluster_ids, cluster_rows, row_cluster })
    }

    pub fn reorder(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&i| v[i as usize]).collect()
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }
}

/// Partial Fisher-Yates draw of `k` of the `g` cluster indices.
pub(crate) fn draw_clusters<R: rand::Rng>(rng: &mut R, g: usize, k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..g as u32).collect();
    for i in 0..k.min(g) {
        let j = rng.random_range(i..g);
        idx.swap(i, j);
    }
    idx.truncate(k.min(g));
    idx
}
