//! Small numerical toolkit shared by the estimators: compensated sums,
//! quantiles, rank correlation and cluster-robust least squares.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn sum(values: &[f64]) -> f64 {
    let mut acc = NeumaierSum::default();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values) / values.len() as f64
}

/// Sample variance with an `n - 1` denominator.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    let mut acc = NeumaierSum::default();
    for &v in values {
        acc.add((v - m) * (v - m));
    }
    acc.value() / (n - 1) as f64
}

pub fn sd(values: &[f64]) -> f64 {
    variance(values).sqrt()
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Average ranks (1-based), ties share the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (NeumaierSum::default(), NeumaierSum::default(), NeumaierSum::default());
    for (&x, &y) in a.iter().zip(b) {
        sab.add((x - ma) * (y - mb));
        saa.add((x - ma) * (x - ma));
        sbb.add((y - mb) * (y - mb));
    }
    sab.value() / (saa.value() * sbb.value()).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Assign balanced quantile bins (1 = lowest values) to `values`, breaking
/// ties by `tie_break`. Bin sizes differ by at most one.
pub fn balanced_bins<K: Ord>(values: &[f64], tie_break: &[K], n_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then_with(|| tie_break[a].cmp(&tie_break[b])));
    let mut bins = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        // Position p of n goes to bin floor(p * q / n) + 1: sizes differ by <= 1.
        bins[i] = pos * n_bins / n.max(1) + 1;
    }
    bins
}

/// Standardize to mean 0 and sample sd 1. Constant columns are only centered.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let m = mean(values);
    let s = sd(values);
    values.iter().map(|&v| if s > 0.0 && s.is_finite() { (v - m) / s } else { v - m }).collect()
}

pub fn is_dummy(values: &[f64]) -> bool {
    values.iter().all(|&v| v == 0.0 || v == 1.0 || v.is_nan())
}

pub fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Cluster-robust variance flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterVariance {
    /// Plain sandwich with cluster-summed scores.
    #[default]
    Cr0,
    /// CR0 scaled by G/(G-1) * (n-1)/(n-k).
    Cr1,
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    /// Row-major k x k covariance.
    pub vcov: Vec<f64>,
    pub n: usize,
    pub n_clusters: usize,
}

/// Least squares of `y` on the given design columns with a cluster-robust
/// sandwich covariance. No intercept is added.
pub fn ols_clustered(columns: &[&[f64]], y: &[f64], clusters: &[u64], kind: ClusterVariance) -> Result<OlsFit> {
    let k = columns.len();
    let n = y.len();
    if k == 0 {
        return Err(Error::Numeric("regression without regressors".into()));
    }
    if columns.iter().any(|c| c.len() != n) || clusters.len() != n {
        return Err(Error::Data("regression inputs have mismatched lengths".into()));
    }
    if n < k {
        return Err(Error::Numeric(format!("{n} observations for {k} regressors")));
    }

    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for a in 0..k {
        for b in a..k {
            let mut acc = NeumaierSum::default();
            for i in 0..n {
                acc.add(columns[a][i] * columns[b][i]);
            }
            xtx[(a, b)] = acc.value();
            xtx[(b, a)] = acc.value();
        }
        let mut acc = NeumaierSum::default();
        for i in 0..n {
            acc.add(columns[a][i] * y[i]);
        }
        xty[a] = acc.value();
    }
    let bread = xtx
        .clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numeric("singular design matrix".into()))?;
    let coef = &bread * &xty;

    // Cluster scores, accumulated in cluster-id order.
    let mut scores: BTreeMap<u64, Vec<NeumaierSum>> = BTreeMap::new();
    for i in 0..n {
        let mut fitted = 0.0;
        for a in 0..k {
            fitted += columns[a][i] * coef[a];
        }
        let u = y[i] - fitted;
        let s = scores.entry(clusters[i]).or_insert_with(|| vec![NeumaierSum::default(); k]);
        for a in 0..k {
            s[a].add(columns[a][i] * u);
        }
    }
    let g = scores.len();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for s in scores.values() {
        let v = DVector::from_iterator(k, s.iter().map(NeumaierSum::value));
        meat += &v * v.transpose();
    }
    let mut vcov = &bread * meat * &bread;
    if kind == ClusterVariance::Cr1 && g > 1 && n > k {
        let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n - k) as f64);
        vcov *= factor;
    }
    let se = (0..k).map(|a| vcov[(a, a)].max(0.0).sqrt()).collect();
    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        se,
        vcov: (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| vcov[(a, b)]).collect(),
        n,
        n_clusters: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancellation() {
        let mut acc = NeumaierSum::default();
        for v in [1.0, 1e100, 1.0, -1e100] {
            acc.add(v);
        }
        assert_eq!(acc.value(), 2.0);
    }

    #[test]
    fn balanced_bins_sizes_differ_by_at_most_one() {
        let vals: Vec<f64> = (0..23).map(|i| (i % 5) as f64).collect();
        let ids: Vec<usize> = (0..23).collect();
        let bins = balanced_bins(&vals, &ids, 10);
        let mut counts = [0usize; 10];
        for b in bins {
            counts[b - 1] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let one = vec![1.0; 20];
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let cl: Vec<u64> = (0..20).map(|i| i / 2).collect();
        let fit = ols_clustered(&[&one, &x], &y, &cl, ClusterVariance::Cr0).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        assert!((fit.coef[1] - 0.5).abs() < 1e-12);
        assert!(fit.se[1] < 1e-10);
    }

    #[test]
    fn spearman_of_monotone_transform_is_one() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 * 0.3 - 4.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v.powi(3)).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
    }
}
