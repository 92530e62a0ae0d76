//! Binary classification metrics.
//!
//! AUROC is the rank statistic with averaged ranks for ties. AUPRC is
//! step-wise average precision: `sum_k (R_k - R_{k-1}) P_k` over distinct
//! score thresholds, highest first, with no interpolation. ECE uses ten
//! equal-width bins on `[0, 1]`, the last bin closed.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const ECE_BINS: usize = 10;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("score {i} is not finite")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn check_both_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("single-class labels: AUROC and AUPRC are undefined".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, ties kept in input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, neg) = check_both_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, _) = check_both_classes(labels)?;
    let idx = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check(probs, labels)?;
    Ok(probs.iter().zip(labels).map(|(&p, &y)| (p - f64::from(y)).powi(2)).sum::<f64>() / probs.len() as f64)
}

pub fn ece(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check(probs, labels)?;
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Metric("probabilities must lie in [0, 1]".into()));
    }
    let mut count = [0usize; ECE_BINS];
    let mut conf = [0.0; ECE_BINS];
    let mut acc = [0.0; ECE_BINS];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += f64::from(y);
    }
    let n = probs.len() as f64;
    Ok((0..ECE_BINS)
        .filter(|&b| count[b] > 0)
        .map(|b| (acc[b] - conf[b]).abs() / n)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub ece: f64,
}

impl Metrics {
    pub fn compute(probs: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(Self {
            auroc: auroc(probs, labels)?,
            auprc: auprc(probs, labels)?,
            brier: brier(probs, labels)?,
            ece: ece(probs, labels)?,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.auroc, self.auprc, self.brier, self.ece]
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Per-seed metrics with their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
}

impl MetricsReport {
    pub fn new(seeds: Vec<u64>, per_seed: Vec<Metrics>) -> Result<Self> {
        if seeds.len() != per_seed.len() || seeds.is_empty() {
            return Err(Error::Metric("one metrics row per seed is required".into()));
        }
        Ok(Self { seeds, per_seed })
    }

    fn column(&self, f: impl Fn(&Metrics) -> f64) -> (f64, f64) {
        mean_std(&self.per_seed.iter().map(f).collect::<Vec<_>>())
    }

    pub fn auroc(&self) -> (f64, f64) {
        self.column(|m| m.auroc)
    }

    pub fn auprc(&self) -> (f64, f64) {
        self.column(|m| m.auprc)
    }

    pub fn brier(&self) -> (f64, f64) {
        self.column(|m| m.brier)
    }

    pub fn ece(&self) -> (f64, f64) {
        self.column(|m| m.ece)
    }

    /// Rows for one variant: a line per seed, then `mean` and `std` lines.
    pub fn csv_rows(&self, variant: &str) -> String {
        let mut s = String::new();
        for (seed, m) in self.seeds.iter().zip(&self.per_seed) {
            let _ = writeln!(s, "{variant},{seed},{},{},{},{}", m.auroc, m.auprc, m.brier, m.ece);
        }
        let cols = [self.auroc(), self.auprc(), self.brier(), self.ece()];
        let _ = writeln!(s, "{variant},mean,{},{},{},{}", cols[0].0, cols[1].0, cols[2].0, cols[3].0);
        let _ = writeln!(s, "{variant},std,{},{},{},{}", cols[0].1, cols[1].1, cols[2].1, cols[3].1);
        s
    }
}

pub const RESULTS_HEADER: &str = "variant,seed,auroc,auprc,brier,ece\n";
