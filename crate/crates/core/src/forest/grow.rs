//! Greedy depth-first tree growth shared by regression and causal trees.
//!
//! Each feature keeps its own row order sorted by value; a node owns the same
//! contiguous range in every order, and splitting stably partitions that range
//! in place. A scan over one feature is therefore linear in the node size.

use rand::Rng;

use super::Node;
use crate::rng::EngineRng;
use crate::stats::NeumaierSum;

pub(crate) enum Targets<'a> {
    /// Variance reduction on `y`.
    Mean { y: &'a [f64] },
    /// Difference in effects `sum(wt*yt)/sum(wt^2)` between children.
    Effect { wt: &'a [f64], yt: &'a [f64], treated: &'a [bool] },
}

pub(crate) struct GrowConfig {
    pub min_leaf: usize,
    pub alpha: f64,
    pub max_depth: usize,
    pub mtry: usize,
    pub imbalance_penalty: f64,
    /// Estimation rows per split row; scales split-half counts in the
    /// treated/control leaf-size check.
    pub ratio: f64,
}

/// Per-feature orders of all training rows by (value, row index).
pub(crate) struct Presorted {
    pub order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(cols: &[Vec<f64>]) -> Self {
        let order = cols
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..c.len() as u32).collect();
                idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self { order }
    }
}

pub(crate) const OPEN_LEAF: u32 = u32::MAX;

/// Score of an effect split: `nl*nr/(nl+nr)^2 * (tl - tr)^2`, less the
/// imbalance penalty `lambda * (1/sww_l + 1/sww_r)`.
pub(crate) fn effect_score(nl: f64, nr: f64, tau_l: f64, tau_r: f64, sww_l: f64, sww_r: f64, penalty: f64) -> f64 {
    let n = nl + nr;
    let d = tau_l - tau_r;
    let mut score = nl * nr / (n * n) * d * d;
    if penalty > 0.0 {
        score -= penalty * (1.0 / sww_l + 1.0 / sww_r);
    }
    score
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Best {
    pub feature: usize,
    pub threshold: f64,
    pub score: f64,
    /// Rows in the left child (a prefix of the feature's order).
    pub n_left: usize,
}

fn threshold(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

fn scan_mean(rows: &[u32], x: &[f64], y: &[f64], cfg: &GrowConfig) -> Option<(f64, usize, f64)> {
    let n = rows.len();
    let mut total = NeumaierSum::default();
    for &r in rows {
        total.add(y[r as usize]);
    }
    let total = total.value();
    let min_child = (cfg.min_leaf as f64).max(cfg.alpha * n as f64);
    let mut left = NeumaierSum::default();
    let mut best: Option<(f64, usize, f64)> = None;
    for k in 0..n - 1 {
        let r = rows[k] as usize;
        left.add(y[r]);
        let (xk, xn) = (x[r], x[rows[k + 1] as usize]);
        if xk == xn {
            continue;
        }
        let nl = (k + 1) as f64;
        let nr = (n - k - 1) as f64;
        if nl < min_child || nr < min_child {
            continue;
        }
        let sl = left.value();
        let d = sl / nl - (total - sl) / nr;
        let gain = nl * nr / n as f64 * d * d;
        if gain > best.map_or(0.0, |b| b.0) {
            best = Some((gain, k + 1, threshold(xk, xn)));
        }
    }
    best
}

fn scan_effect(
    rows: &[u32],
    x: &[f64],
    wt: &[f64],
    yt: &[f64],
    treated: &[bool],
    cfg: &GrowConfig,
) -> Option<(f64, usize, f64)> {
    let n = rows.len();
    let (mut swy, mut sww) = (NeumaierSum::default(), NeumaierSum::default());
    let mut n_treated = 0usize;
    for &r in rows {
        let r = r as usize;
        swy.add(wt[r] * yt[r]);
        sww.add(wt[r] * wt[r]);
        n_treated += usize::from(treated[r]);
    }
    let (swy, sww) = (swy.value(), sww.value());
    let min_share = cfg.alpha * n as f64;
    let min_leaf = cfg.min_leaf as f64;
    let (mut lwy, mut lww) = (NeumaierSum::default(), NeumaierSum::default());
    let mut lt = 0usize;
    let mut best: Option<(f64, usize, f64)> = None;
    for k in 0..n - 1 {
        let r = rows[k] as usize;
        lwy.add(wt[r] * yt[r]);
        lww.add(wt[r] * wt[r]);
        lt += usize::from(treated[r]);
        let (xk, xn) = (x[r], x[rows[k + 1] as usize]);
        if xk == xn {
            continue;
        }
        let nl = k + 1;
        let nr = n - nl;
        if (nl as f64) < min_share || (nr as f64) < min_share {
            continue;
        }
        let rt = n_treated - lt;
        let (lc, rc) = (nl - lt, nr - rt);
        if [lt, lc, rt, rc].iter().any(|&c| (c as f64) * cfg.ratio < min_leaf) {
            continue;
        }
        let (sl_wy, sl_ww) = (lwy.value(), lww.value());
        let (sr_wy, sr_ww) = (swy - sl_wy, sww - sl_ww);
        if !(sl_ww > 0.0 && sr_ww > 0.0) {
            continue;
        }
        let score =
            effect_score(nl as f64, nr as f64, sl_wy / sl_ww, sr_wy / sr_ww, sl_ww, sr_ww, cfg.imbalance_penalty);
        if score > best.map_or(0.0, |b| b.0) {
            best = Some((score, nl, threshold(xk, xn)));
        }
    }
    best
}

fn worth_scanning(rows: &[u32], targets: &Targets<'_>, cfg: &GrowConfig) -> bool {
    match targets {
        Targets::Mean { y } => {
            if rows.len() < 2 * cfg.min_leaf {
                return false;
            }
            let first = y[rows[0] as usize];
            rows.iter().any(|&r| y[r as usize] != first)
        }
        Targets::Effect { treated, .. } => {
            let t = rows.iter().filter(|&&r| treated[r as usize]).count();
            let c = rows.len() - t;
            let need = 2.0 * cfg.min_leaf as f64;
            rows.len() >= 2 && t as f64 * cfg.ratio >= need && c as f64 * cfg.ratio >= need
        }
    }
}

/// Best split of the rows held by `orders[j][range]` over `features`,
/// breaking score ties toward the smaller feature index, then the smaller
/// threshold.
pub(crate) fn best_split(
    cols: &[Vec<f64>],
    orders: &[Vec<u32>],
    range: std::ops::Range<usize>,
    features: &[usize],
    targets: &Targets<'_>,
    cfg: &GrowConfig,
) -> Option<Best> {
    let mut best: Option<Best> = None;
    for &j in features {
        let rows = &orders[j][range.clone()];
        let found = match targets {
            Targets::Mean { y } => scan_mean(rows, &cols[j], y, cfg),
            Targets::Effect { wt, yt, treated } => scan_effect(rows, &cols[j], wt, yt, treated, cfg),
        };
        if let Some((score, n_left, thr)) = found {
            if best.is_none_or(|b| score > b.score) {
                best = Some(Best { feature: j, threshold: thr, score, n_left });
            }
        }
    }
    best
}

/// Grow one tree on the rows flagged in `in_sample`. Leaves are returned with
/// the placeholder id [`OPEN_LEAF`].
pub(crate) fn grow(
    cols: &[Vec<f64>],
    presort: &Presorted,
    in_sample: &[bool],
    targets: &Targets<'_>,
    cfg: &GrowConfig,
    rng: &mut EngineRng,
) -> Vec<Node> {
    let p = cols.len();
    let mut orders: Vec<Vec<u32>> =
        presort.order.iter().map(|o| o.iter().copied().filter(|&r| in_sample[r as usize]).collect()).collect();
    let n = orders.first().map_or(0, Vec::len);
    let mut nodes = vec![Node::Leaf { leaf: OPEN_LEAF }];
    let mut goes_left = vec![false; in_sample.len()];
    let mut buffer: Vec<u32> = Vec::with_capacity(n);
    let mut features: Vec<usize> = (0..p).collect();
    let mut stack = vec![(0usize, 0usize, n, 0usize)];

    while let Some((node, start, end, depth)) = stack.pop() {
        if depth >= cfg.max_depth || end - start < 2 || p == 0 {
            continue;
        }
        if !worth_scanning(&orders[0][start..end], targets, cfg) {
            continue;
        }
        let chosen: Vec<usize> = if cfg.mtry >= p {
            (0..p).collect()
        } else {
            for i in 0..cfg.mtry {
                let j = rng.random_range(i..p);
                features.swap(i, j);
            }
            let mut f = features[..cfg.mtry].to_vec();
            f.sort_unstable();
            f
        };
        let Some(best) = best_split(cols, &orders, start..end, &chosen, targets, cfg) else {
            continue;
        };
        let mid = start + best.n_left;
        for (k, &r) in orders[best.feature][start..end].iter().enumerate() {
            goes_left[r as usize] = k < best.n_left;
        }
        for (j, order) in orders.iter_mut().enumerate() {
            if j == best.feature {
                continue;
            }
            buffer.clear();
            let slice = &mut order[start..end];
            let mut w = 0;
            for i in 0..slice.len() {
                let r = slice[i];
                if goes_left[r as usize] {
                    slice[w] = r;
                    w += 1;
                } else {
                    buffer.push(r);
                }
            }
            slice[w..].copy_from_slice(&buffer);
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { leaf: OPEN_LEAF });
        nodes.push(Node::Leaf { leaf: OPEN_LEAF });
        nodes[node] = Node::Split {
            feature: best.feature as u32,
            threshold: best.threshold,
            left: left as u32,
            right: left as u32 + 1,
        };
        stack.push((left + 1, mid, end, depth + 1));
        stack.push((left, start, mid, depth + 1));
    }
    nodes
}

/// Renumber reachable nodes in preorder and assign leaf ids in that order.
pub(crate) fn compact(nodes: &[Node]) -> Vec<Node> {
    let mut out: Vec<Node> = Vec::with_capacity(nodes.len());
    let mut leaves = 0u32;
    fn visit(old: usize, nodes: &[Node], out: &mut Vec<Node>, leaves: &mut u32) -> u32 {
        let me = out.len();
        match nodes[old] {
            Node::Leaf { .. } => {
                out.push(Node::Leaf { leaf: *leaves });
                *leaves += 1;
            }
            Node::Split { feature, threshold, left, right } => {
                out.push(Node::Leaf { leaf: OPEN_LEAF });
                let l = visit(left as usize, nodes, out, leaves);
                let r = visit(right as usize, nodes, out, leaves);
                out[me] = Node::Split { feature, threshold, left: l, right: r };
            }
        }
        me as u32
    }
    visit(0, nodes, &mut out, &mut leaves);
    out
}

pub(crate) fn n_leaves(nodes: &[Node]) -> usize {
    nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
}
