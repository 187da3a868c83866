//! Evaluation metrics: ROC, AUC, TPR at a fixed FPR, randomized-trial
//! summaries, and correlation coefficients.
//!
//! Scores are member-oriented and a sample is predicted "member" when its
//! score is `>=` the threshold. Nothing is interpolated.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty score set")]
    Empty,
    #[error("fpr target {0} outside (0, 1)")]
    BadTarget(f64),
    #[error("subsample of {got} per side is below the minimum of 2")]
    SubsampleTooSmall { got: usize },
    #[error("trials must be >= 1")]
    NoTrials,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite score")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical ROC curve, from the `+inf` threshold `(0, 0)` down to the
/// smallest observed score `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check_scores(xs: &[f64]) -> Result<(), MetricError> {
    if xs.is_empty() {
        return Err(MetricError::Empty);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

impl RocCurve {
    pub fn new(members: &[f64], nonmembers: &[f64]) -> Result<Self, MetricError> {
        check_scores(members)?;
        check_scores(nonmembers)?;
        let mut m = members.to_vec();
        let mut n = nonmembers.to_vec();
        m.sort_by(|a, b| b.total_cmp(a));
        n.sort_by(|a, b| b.total_cmp(a));
        let mut thresholds: Vec<f64> = m.iter().chain(&n).copied().collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();

        let (nm, nn) = (m.len() as f64, n.len() as f64);
        let mut points = vec![RocPoint {
            threshold: f64::INFINITY,
            fpr: 0.0,
            tpr: 0.0,
        }];
        let (mut i, mut j) = (0usize, 0usize);
        for t in thresholds {
            while i < m.len() && m[i] >= t {
                i += 1;
            }
            while j < n.len() && n[j] >= t {
                j += 1;
            }
            points.push(RocPoint {
                threshold: t,
                fpr: j as f64 / nn,
                tpr: i as f64 / nm,
            });
        }
        Ok(RocCurve { points })
    }

    /// Largest TPR among thresholds whose FPR does not exceed `target`.
    pub fn tpr_at(&self, target: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= target)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()
    }
}

/// TPR at the loosest threshold whose empirical FPR is `<= fpr_target`.
pub fn tpr_at_fpr(members: &[f64], nonmembers: &[f64], fpr_target: f64) -> Result<f64, MetricError> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(MetricError::BadTarget(fpr_target));
    }
    Ok(RocCurve::new(members, nonmembers)?.tpr_at(fpr_target))
}

/// Area under the ROC curve as the Mann-Whitney U statistic over
/// `n_members * n_nonmembers`, ties counted one half.
pub fn auc(members: &[f64], nonmembers: &[f64]) -> Result<f64, MetricError> {
    check_scores(members)?;
    check_scores(nonmembers)?;
    let mut n = nonmembers.to_vec();
    n.sort_by(f64::total_cmp);
    // Twice the U statistic, as an exact integer.
    let mut twice_u: u128 = 0;
    for &x in members {
        let below = n.partition_point(|&y| y < x);
        let not_above = n.partition_point(|&y| y <= x);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice_u as f64 / (2.0 * members.len() as f64 * n.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "metric")]
pub enum Metric {
    Auc,
    TprAtFpr { fpr: f64 },
}

impl Metric {
    pub const TPR_AT_1PCT: Metric = Metric::TprAtFpr { fpr: 0.01 };

    pub fn eval(&self, members: &[f64], nonmembers: &[f64]) -> Result<f64, MetricError> {
        match *self {
            Metric::Auc => auc(members, nonmembers),
            Metric::TprAtFpr { fpr } => tpr_at_fpr(members, nonmembers, fpr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation across trials.
    pub std: f64,
    pub trials: usize,
    pub subsample_fraction: f64,
}

impl std::fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Repeats `metric` over `trials` random subsamples. Each trial draws
/// `floor(fraction * n)` members and nonmembers without replacement from its
/// own stream keyed by `(seed, trial)`. Inputs are sorted by sample id first,
/// so the summary does not depend on input order.
pub fn randomized_metric(
    members: &[(String, f64)],
    nonmembers: &[(String, f64)],
    metric: Metric,
    trials: usize,
    subsample_fraction: f64,
    seed: u64,
) -> Result<MetricSummary, MetricError> {
    if trials == 0 {
        return Err(MetricError::NoTrials);
    }
    let sorted = |xs: &[(String, f64)]| {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.into_iter().map(|(_, s)| s).collect::<Vec<f64>>()
    };
    let m = sorted(members);
    let n = sorted(nonmembers);
    let take_m = (subsample_fraction * m.len() as f64).floor() as usize;
    let take_n = (subsample_fraction * n.len() as f64).floor() as usize;
    if take_m < 2 || take_n < 2 {
        return Err(MetricError::SubsampleTooSmall {
            got: take_m.min(take_n),
        });
    }
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &[domain::METRIC_TRIAL, t as u64]);
            let ms: Vec<f64> = sample(&mut rng, m.len(), take_m).iter().map(|i| m[i]).collect();
            let ns: Vec<f64> = sample(&mut rng, n.len(), take_n).iter().map(|i| n[i]).collect();
            metric.eval(&ms, &ns)
        })
        .collect::<Result<_, _>>()?;
    let (mean, std) = mean_std(&values);
    Ok(MetricSummary {
        mean,
        std,
        trials,
        subsample_fraction,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based, ties share the mean rank).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    pearson(&ranks(xs), &ranks(ys))
}
