//! Targeting rules, targeting curves and exact depth-two policy trees.
//!
//! Treating a worker means flagging them for support. Losses are negative,
//! so a policy should treat the workers with the most negative doubly robust
//! scores: the tree search minimizes `sum over treated of (gamma + cost)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::{clustered_mean, difference_in_means};
use crate::rng::tie_key;
use crate::stats::{self, ClusterVariance, NeumaierSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Treat,
    Pass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PolicyNode {
    Leaf {
        action: Action,
        n: usize,
        /// Mean score of the training rows in the leaf.
        mean_gamma: f64,
    },
    Split {
        covariate: String,
        #[serde(skip)]
        index: usize,
        /// Rows with `x <= threshold` go left.
        threshold: f64,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
}

impl PolicyNode {
    fn action(&self, x: &dyn Fn(usize) -> f64) -> Action {
        match self {
            PolicyNode::Leaf { action, .. } => *action,
            PolicyNode::Split { index, threshold, left, right, .. } => {
                if x(*index) <= *threshold {
                    left.action(x)
                } else {
                    right.action(x)
                }
            }
        }
    }

    fn actions(&self, out: &mut Vec<Action>) {
        match self {
            PolicyNode::Leaf { action, .. } => out.push(*action),
            PolicyNode::Split { left, right, .. } => {
                left.actions(out);
                right.actions(out);
            }
        }
    }

    fn resolve(&mut self, names: &[String]) -> Result<()> {
        if let PolicyNode::Split { covariate, index, left, right, .. } = self {
            *index = names
                .iter()
                .position(|n| n == covariate)
                .ok_or_else(|| Error::Data(format!("policy tree uses unknown covariate `{covariate}`")))?;
            left.resolve(names)?;
            right.resolve(names)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degenerate {
    AllTreat,
    AllPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub depth: usize,
    pub cost: f64,
    /// `sum over treated training rows of (gamma + cost)`; smaller is better.
    pub objective: f64,
    pub root: PolicyNode,
    /// Every leaf takes the same action.
    pub degenerate: Option<Degenerate>,
}

impl PolicyTree {
    /// Bind split covariates to column positions of `names`. Needed after
    /// deserializing a tree before applying it.
    pub fn bind(&mut self, names: &[String]) -> Result<()> {
        self.root.resolve(names)
    }

    pub fn action(&self, x: &[f64]) -> Action {
        self.root.action(&|j| x[j])
    }

    pub fn treats(&self, x: &[f64]) -> bool {
        self.action(x) == Action::Treat
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str, names: &[String]) -> Result<Self> {
        let mut t: PolicyTree = serde_json::from_str(text)?;
        t.bind(names)?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTreeParams {
    /// 1 or 2.
    pub depth: usize,
    /// Quantile grid size per covariate.
    pub n_thresholds: usize,
}

impl Default for PolicyTreeParams {
    fn default() -> Self {
        Self { depth: 2, n_thresholds: 50 }
    }
}

/// Candidate thresholds for one covariate: the observed values at the
/// quantiles `k / g`, `k = 1..g-1`, or every distinct value when there are at
/// most `g`; the maximum is dropped since it would leave one side empty.
pub fn threshold_grid(values: &[f64], g: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(stats::cmp_f64);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let mut grid: Vec<f64> = if distinct.len() <= g {
        distinct.clone()
    } else {
        let n = sorted.len();
        let mut v: Vec<f64> = (1..g).map(|k| sorted[(k * n / g).min(n - 1)]).collect();
        v.dedup();
        v
    };
    if let Some(&max) = distinct.last() {
        grid.retain(|&t| t < max);
    }
    grid
}

/// Best depth-one (or leaf) policy over `rows`, as (value, node).
struct Search<'a> {
    cols: &'a [Vec<f64>],
    names: &'a [String],
    z: Vec<f64>,
    gamma: &'a [f64],
    grids: Vec<Vec<f64>>,
    /// Per covariate, all rows sorted by value then index.
    orders: Vec<Vec<usize>>,
}

fn leaf_value(s: f64) -> f64 {
    s.min(0.0)
}

impl Search<'_> {
    fn sum(&self, rows: &[bool]) -> f64 {
        let mut acc = NeumaierSum::default();
        for (i, &r) in rows.iter().enumerate() {
            if r {
                acc.add(self.z[i]);
            }
        }
        acc.value()
    }

    /// Best single split of the rows flagged in `member`, or `None` when a
    /// leaf is at least as good. Returns (value, covariate, threshold).
    fn best_split(&self, member: &[bool], total: f64) -> (f64, Option<(usize, f64)>) {
        let mut best = (leaf_value(total), None);
        for (j, order) in self.orders.iter().enumerate() {
            let col = &self.cols[j];
            let mut left = NeumaierSum::default();
            let mut pos = 0;
            for &thr in &self.grids[j] {
                while pos < order.len() && col[order[pos]] <= thr {
                    if member[order[pos]] {
                        left.add(self.z[order[pos]]);
                    }
                    pos += 1;
                }
                let l = left.value();
                let v = leaf_value(l) + leaf_value(total - l);
                if v < best.0 {
                    best = (v, Some((j, thr)));
                }
            }
        }
        best
    }

    fn leaf(&self, member: &[bool]) -> PolicyNode {
        let s = self.sum(member);
        let g: Vec<f64> = member.iter().zip(self.gamma).filter(|(m, _)| **m).map(|(_, g)| *g).collect();
        PolicyNode::Leaf {
            action: if s < 0.0 { Action::Treat } else { Action::Pass },
            n: g.len(),
            mean_gamma: if g.is_empty() { f64::NAN } else { stats::mean(&g) },
        }
    }

    fn split_masks(&self, member: &[bool], j: usize, thr: f64) -> (Vec<bool>, Vec<bool>) {
        let l: Vec<bool> = member.iter().zip(&self.cols[j]).map(|(&m, &x)| m && x <= thr).collect();
        let r: Vec<bool> = member.iter().zip(&self.cols[j]).map(|(&m, &x)| m && x > thr).collect();
        (l, r)
    }

    fn subtree(&self, member: &[bool], depth: usize) -> PolicyNode {
        if depth == 0 {
            return self.leaf(member);
        }
        let total = self.sum(member);
        match self.best_split(member, total).1 {
            None => self.leaf(member),
            Some((j, thr)) => {
                let (l, r) = self.split_masks(member, j, thr);
                PolicyNode::Split {
                    covariate: self.names[j].clone(),
                    index: j,
                    threshold: thr,
                    left: Box::new(self.leaf(&l)),
                    right: Box::new(self.leaf(&r)),
                }
            }
        }
    }
}

/// Exhaustive search for the policy tree of depth at most `params.depth`
/// minimizing `sum over treated of (gamma + cost)` over the threshold grids.
/// Ties prefer fewer splits, then smaller covariate index, then smaller
/// threshold.
pub fn fit_policy_tree(
    cols: &[Vec<f64>],
    names: &[String],
    gamma: &[f64],
    cost: f64,
    params: &PolicyTreeParams,
) -> Result<PolicyTree> {
    let n = gamma.len();
    if !(1..=2).contains(&params.depth) {
        return Err(Error::Config(format!("policy tree depth must be 1 or 2, got {}", params.depth)));
    }
    if n == 0 || cols.is_empty() || cols.iter().any(|c| c.len() != n) || names.len() != cols.len() {
        return Err(Error::Data("policy tree inputs are empty or have mismatched lengths".into()));
    }
    if gamma.iter().chain(cols.iter().flatten()).any(|v| !v.is_finite()) || !cost.is_finite() {
        return Err(Error::Data("policy tree inputs contain missing values".into()));
    }
    let grids: Vec<Vec<f64>> = cols.iter().map(|c| threshold_grid(c, params.n_thresholds)).collect();
    let orders: Vec<Vec<usize>> = cols
        .iter()
        .map(|c| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
            o
        })
        .collect();
    let search = Search { cols, names, z: gamma.iter().map(|g| g + cost).collect(), gamma, grids, orders };
    let all = vec![true; n];

    let root = if params.depth == 1 {
        search.subtree(&all, 1)
    } else {
        let total = search.sum(&all);
        let candidates: Vec<(usize, f64)> =
            (0..cols.len()).flat_map(|j| search.grids[j].iter().map(move |&t| (j, t))).collect();
        let scored: Vec<(f64, usize, f64)> = candidates
            .par_iter()
            .map(|&(j, thr)| {
                let (l, r) = search.split_masks(&all, j, thr);
                let (sl, sr) = (search.sum(&l), search.sum(&r));
                (search.best_split(&l, sl).0 + search.best_split(&r, sr).0, j, thr)
            })
            .collect();
        let depth_one = search.best_split(&all, total);
        let mut best: (f64, Option<(usize, f64)>) = (depth_one.0, None);
        for &(v, j, thr) in &scored {
            if v < best.0 {
                best = (v, Some((j, thr)));
            }
        }
        match best.1 {
            None => search.subtree(&all, 1),
            Some((j, thr)) => {
                let (l, r) = search.split_masks(&all, j, thr);
                PolicyNode::Split {
                    covariate: names[j].clone(),
                    index: j,
                    threshold: thr,
                    left: Box::new(search.subtree(&l, 1)),
                    right: Box::new(search.subtree(&r, 1)),
                }
            }
        }
    };

    let mut tree = PolicyTree { depth: params.depth, cost, objective: 0.0, root, degenerate: None };
    tree.objective = policy_objective(&tree, cols, gamma);
    let mut acts = Vec::new();
    tree.root.actions(&mut acts);
    tree.degenerate = if acts.iter().all(|&a| a == Action::Treat) {
        Some(Degenerate::AllTreat)
    } else if acts.iter().all(|&a| a == Action::Pass) {
        Some(Degenerate::AllPass)
    } else {
        None
    };
    Ok(tree)
}

/// `sum over rows treated by the tree of (gamma + cost)`, summed in row order.
pub fn policy_objective(tree: &PolicyTree, cols: &[Vec<f64>], gamma: &[f64]) -> f64 {
    let mut acc = NeumaierSum::default();
    for (i, g) in gamma.iter().enumerate() {
        if tree.root.action(&|j| cols[j][i]) == Action::Treat {
            acc.add(g + tree.cost);
        }
    }
    acc.value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetingRule {
    /// Uniformly random order.
    Random,
    /// Sort by one covariate; `descending` selects the largest values first.
    Covariate { name: String, descending: bool },
    /// Lexicographic: sort by `first`, then by `second` within ties.
    Pair { first: String, first_descending: bool, second: String, second_descending: bool },
    /// Most negative CATE first.
    Cate,
    /// Workers the tree treats first.
    PolicyTree { tree: PolicyTree },
}

impl TargetingRule {
    pub fn label(&self) -> String {
        let dir = |d: bool| if d { "desc" } else { "asc" };
        match self {
            TargetingRule::Random => "random".into(),
            TargetingRule::Covariate { name, descending } => format!("{name}:{}", dir(*descending)),
            TargetingRule::Pair { first, first_descending, second, second_descending } => {
                format!("{first}:{}+{second}:{}", dir(*first_descending), dir(*second_descending))
            }
            TargetingRule::Cate => "cate".into(),
            TargetingRule::PolicyTree { .. } => "policy_tree".into(),
        }
    }

    /// Lexicographic priority keys; smaller keys are selected first.
    pub fn priority(&self, ds: &Dataset, cate: Option<&[f64]>) -> Result<Vec<[f64; 2]>> {
        let signed = |name: &str, desc: bool| -> Result<Vec<f64>> {
            let c = ds.covariate(name)?;
            Ok(c.iter().map(|&v| if desc { -v } else { v }).collect())
        };
        Ok(match self {
            TargetingRule::Random => vec![[0.0, 0.0]; ds.len()],
            TargetingRule::Covariate { name, descending } => {
                signed(name, *descending)?.into_iter().map(|v| [v, 0.0]).collect()
            }
            TargetingRule::Pair { first, first_descending, second, second_descending } => {
                let a = signed(first, *first_descending)?;
                let b = signed(second, *second_descending)?;
                a.into_iter().zip(b).map(|(a, b)| [a, b]).collect()
            }
            TargetingRule::Cate => {
                let c = cate.ok_or_else(|| Error::Config("the CATE rule needs CATE predictions".into()))?;
                if c.len() != ds.len() {
                    return Err(Error::Data("CATE predictions do not match the dataset".into()));
                }
                c.iter().map(|&v| [v, 0.0]).collect()
            }
            TargetingRule::PolicyTree { tree } => {
                let mut t = tree.clone();
                t.bind(&ds.covariate_names())?;
                (0..ds.len()).map(|i| [if t.treats(&ds.row(i)) { 0.0 } else { 1.0 }, 0.0]).collect()
            }
        })
    }
}

/// Row order for a rule: by priority key, exact ties in a seeded random order.
pub fn selection_order(ds: &Dataset, keys: &[[f64; 2]], seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let tie = |i: usize| tie_key(seed, ds.worker_id[i].wrapping_mul(1 << 16) ^ ds.event_year[i] as u64);
    idx.sort_by(|&a, &b| {
        keys[a][0]
            .total_cmp(&keys[b][0])
            .then(keys[a][1].total_cmp(&keys[b][1]))
            .then(tie(a).cmp(&tie(b)))
            .then(ds.key(a).cmp(&ds.key(b)))
    });
    idx
}

/// One single-covariate rule per covariate. The direction selects first the
/// end of the covariate associated with more negative scores on `rows`.
pub fn covariate_rules(ds: &Dataset, rows: &[usize], gamma: &[f64]) -> Vec<TargetingRule> {
    let rows: Vec<usize> = rows.iter().copied().filter(|&i| gamma[i].is_finite()).collect();
    let g: Vec<f64> = rows.iter().map(|&i| gamma[i]).collect();
    ds.covariate_specs
        .iter()
        .zip(&ds.covariates)
        .map(|(spec, col)| {
            let x: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
            let rho = stats::spearman(&x, &g);
            TargetingRule::Covariate { name: spec.name.clone(), descending: rho < 0.0 }
        })
        .collect()
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];
/// Below this many selected treated rows an estimate is flagged.
pub const MIN_TREATED: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub n_selected: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub ate: f64,
    pub se: f64,
    pub low_power: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingCurve {
    pub rule: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

/// Select the first `round(q n)` rows in rule order for each fraction `q` and
/// estimate the treated-minus-control difference of `outcome` among them.
pub fn targeting_curve(
    ds: &Dataset,
    rule: &TargetingRule,
    cate: Option<&[f64]>,
    outcome: &str,
    fractions: &[f64],
    seed: u64,
    kind: ClusterVariance,
) -> Result<TargetingCurve> {
    let y = ds.outcome(outcome)?;
    let keys = rule.priority(ds, cate)?;
    let order = selection_order(ds, &keys, seed);
    let n = ds.len();
    let points = fractions
        .iter()
        .map(|&q| {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("fraction {q} outside (0, 1]")));
            }
            let k = ((q * n as f64).round() as usize).clamp(1, n);
            let sel = &order[..k];
            let ys: Vec<f64> = sel.iter().map(|&i| y[i]).collect();
            let ws: Vec<bool> = sel.iter().map(|&i| ds.treated[i]).collect();
            let cs: Vec<u64> = sel.iter().map(|&i| ds.cluster_id[i]).collect();
            let nt = ws.iter().filter(|&&w| w).count();
            let (ate, se) = match difference_in_means(&ys, &ws, &cs, kind) {
                Ok((a, s, _, _)) => (a, s),
                Err(Error::Insufficient(_)) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            };
            Ok(CurvePoint {
                fraction: q,
                n_selected: k,
                n_treated: nt,
                n_control: k - nt,
                ate,
                se,
                low_power: nt < MIN_TREATED,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetingCurve { rule: rule.label(), seed, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub share_treated: f64,
    pub n_selected: usize,
    /// Treated-minus-control difference among selected rows; `NaN` when
    /// undefined.
    pub ate: f64,
    pub ate_se: f64,
    pub gamma_mean: Option<f64>,
    pub gamma_se: Option<f64>,
    /// False when nobody is selected or one arm is empty.
    pub defined: bool,
}

/// Apply a tree to an evaluation set and summarize the selected rows.
pub fn evaluate_policy(
    tree: &PolicyTree,
    ds: &Dataset,
    outcome: &str,
    gamma: Option<&[f64]>,
    kind: ClusterVariance,
) -> Result<PolicyEvaluation> {
    let mut tree = tree.clone();
    tree.bind(&ds.covariate_names())?;
    let y = ds.outcome(outcome)?;
    let sel: Vec<usize> = (0..ds.len()).filter(|&i| tree.treats(&ds.row(i))).collect();
    let share = sel.len() as f64 / ds.len().max(1) as f64;
    let ys: Vec<f64> = sel.iter().map(|&i| y[i]).collect();
    let ws: Vec<bool> = sel.iter().map(|&i| ds.treated[i]).collect();
    let cs: Vec<u64> = sel.iter().map(|&i| ds.cluster_id[i]).collect();
    let (ate, ate_se, defined) = match difference_in_means(&ys, &ws, &cs, kind) {
        Ok((a, s, _, _)) => (a, s, true),
        Err(Error::Insufficient(_)) => (f64::NAN, f64::NAN, false),
        Err(e) => return Err(e),
    };
    let (gamma_mean, gamma_se) = match gamma {
        Some(g) if !sel.is_empty() => {
            let gs: Vec<f64> = sel.iter().map(|&i| g[i]).collect();
            let (m, s) = clustered_mean(&gs, &cs, kind)?;
            (Some(m), Some(s))
        }
        _ => (None, None),
    };
    Ok(PolicyEvaluation { share_treated: share, n_selected: sel.len(), ate, ate_se, gamma_mean, gamma_se, defined })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn step_score_is_found() {
        let x: Vec<f64> = (0..40).map(|i| f64::from(i) - 19.5).collect();
        let gamma: Vec<f64> = x.iter().map(|&v| if v > 0.0 { -1.0 } else { 0.0 }).collect();
        let tree = fit_policy_tree(&[x.clone()], &names(1), &gamma, 0.5, &PolicyTreeParams::default()).unwrap();
        assert_eq!(tree.objective, -10.0);
        for (i, v) in x.iter().enumerate() {
            assert_eq!(tree.treats(&[*v]), gamma[i] < 0.0);
        }
    }

    #[test]
    fn expensive_policy_passes_everyone() {
        let x: Vec<f64> = (0..30).map(f64::from).collect();
        let gamma: Vec<f64> = x.iter().map(|v| -v / 30.0).collect();
        let tree = fit_policy_tree(&[x], &names(1), &gamma, 2.0, &PolicyTreeParams::default()).unwrap();
        assert_eq!(tree.degenerate, Some(Degenerate::AllPass));
        assert_eq!(tree.objective, 0.0);
    }

    #[test]
    fn grid_drops_the_maximum() {
        assert_eq!(threshold_grid(&[3.0, 1.0, 2.0, 2.0], 50), vec![1.0, 2.0]);
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        let g = threshold_grid(&v, 50);
        assert_eq!(g.len(), 49);
        assert_eq!(g[0], 20.0);
    }

    #[test]
    fn tree_json_round_trip() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let gamma: Vec<f64> = x.iter().map(|&v| if v < 5.0 { -2.0 } else { 1.0 }).collect();
        let tree = fit_policy_tree(&[x], &names(1), &gamma, 0.0, &PolicyTreeParams::default()).unwrap();
        let back = PolicyTree::from_json(&tree.to_json().unwrap(), &names(1)).unwrap();
        assert_eq!(back, tree);
    }
}
