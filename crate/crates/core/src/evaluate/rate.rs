//! Rank-weighted average treatment effects (Qini and AUTOC).
//!
//! Units are prioritized worst-first: the lowest score (most negative CATE)
//! comes first. `TOC(q)` is the mean AIPW score among the first `q` share of
//! units minus the overall mean, so good targeting of losses gives negative
//! values.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::draw_clusters;
use crate::rng::substream;
use crate::stats::{self, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w(q) = q`.
    Qini,
    /// `w(q) = 1`.
    Autoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub weighting: Weighting,
    /// RATE under `weighting`.
    pub estimate: f64,
    /// Half-sample cluster bootstrap SE of `estimate`.
    pub se: f64,
    pub qini: f64,
    pub qini_se: f64,
    pub autoc: f64,
    pub autoc_se: f64,
    /// `(q, TOC(q))` on the grid `0.02, 0.04, ..., 1.00`.
    pub toc_curve: Vec<(f64, f64)>,
    /// All priority scores are equal, so the ranking carries no information.
    pub untestable: bool,
    pub n_bootstrap: usize,
}

pub const GRID_POINTS: usize = 50;

pub fn toc_grid() -> Vec<f64> {
    (1..=GRID_POINTS).map(|k| k as f64 / GRID_POINTS as f64).collect()
}

/// TOC on the grid for the rows `idx`.
fn toc(priority: &[f64], gamma: &[f64], idx: &[usize]) -> Vec<f64> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| priority[a].total_cmp(&priority[b]).then(a.cmp(&b)));
    let n = order.len();
    // Scores inside a block of tied priorities are replaced by the block mean.
    let mut adjusted = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && priority[order[j + 1]] == priority[order[i]] {
            j += 1;
        }
        let mut acc = NeumaierSum::default();
        for &k in &order[i..=j] {
            acc.add(gamma[k]);
        }
        let m = acc.value() / (j - i + 1) as f64;
        adjusted[i..=j].fill(m);
        i = j + 1;
    }
    let mut prefix = Vec::with_capacity(n + 1);
    let mut acc = NeumaierSum::default();
    prefix.push(0.0);
    for v in &adjusted {
        acc.add(*v);
        prefix.push(acc.value());
    }
    let mean = prefix[n] / n as f64;
    (1..=GRID_POINTS)
        .map(|g| {
            let k = ((g * n).div_ceil(GRID_POINTS)).clamp(1, n);
            prefix[k] / k as f64 - mean
        })
        .collect()
}

fn weighted(toc: &[f64], weighting: Weighting) -> f64 {
    let dq = 1.0 / GRID_POINTS as f64;
    let mut acc = NeumaierSum::default();
    for (g, t) in toc.iter().enumerate() {
        let q = (g + 1) as f64 / GRID_POINTS as f64;
        let w = match weighting {
            Weighting::Qini => q,
            Weighting::Autoc => 1.0,
        };
        acc.add(w * t * dq);
    }
    acc.value()
}

pub fn rate_qini(
    priority: &[f64],
    gamma: &[f64],
    clusters: &[u64],
    weighting: Weighting,
    n_bootstrap: usize,
    seed: u64,
) -> Result<RateResult> {
    let n = priority.len();
    if gamma.len() != n || clusters.len() != n {
        return Err(Error::Data("RATE inputs have mismatched lengths".into()));
    }
    if n == 0 {
        return Err(Error::Insufficient("RATE on an empty evaluation set".into()));
    }
    if priority.iter().chain(gamma).any(|v| !v.is_finite()) {
        return Err(Error::Data("RATE inputs contain missing values".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let curve = toc(priority, gamma, &all);
    let qini = weighted(&curve, Weighting::Qini);
    let autoc = weighted(&curve, Weighting::Autoc);

    let mut by_cluster: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &c) in clusters.iter().enumerate() {
        by_cluster.entry(c).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_cluster.into_values().collect();
    let half = groups.len() / 2;
    let (qini_se, autoc_se) = if half >= 1 && n_bootstrap >= 2 {
        let reps: Vec<(f64, f64)> = (0..n_bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = substream(seed, "rate/bootstrap", b as u64);
                let mut chosen = draw_clusters(&mut rng, groups.len(), half);
                chosen.sort_unstable();
                let idx: Vec<usize> = chosen.iter().flat_map(|&c| groups[c as usize].iter().copied()).collect();
                let t = toc(priority, gamma, &idx);
                (weighted(&t, Weighting::Qini), weighted(&t, Weighting::Autoc))
            })
            .collect();
        let q: Vec<f64> = reps.iter().map(|r| r.0).collect();
        let a: Vec<f64> = reps.iter().map(|r| r.1).collect();
        (stats::sd(&q), stats::sd(&a))
    } else {
        (f64::NAN, f64::NAN)
    };
    let (estimate, se) = match weighting {
        Weighting::Qini => (qini, qini_se),
        Weighting::Autoc => (autoc, autoc_se),
    };
    Ok(RateResult {
        weighting,
        estimate,
        se,
        qini,
        qini_se,
        autoc,
        autoc_se,
        toc_curve: toc_grid().into_iter().zip(curve).collect(),
        untestable: priority.iter().all(|&p| p == priority[0]),
        n_bootstrap,
    })
}
