//! Dataset inference: aggregate many membership scores per sample, then test
//! whether a suspect set scores higher than a validation set.
//!
//! Each attack column is min-max scaled over the pooled rows of both sets,
//! the scaled columns are summed, and a one-sided Welch t-test compares the
//! two sets. [`minimal_p_search`] finds the smallest per-set sample count at
//! which the test rejects reliably.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::attacks::catalog::{AttackId, ScoreTable};
use crate::rng::{domain, stream};

/// Significance level used when none is given.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Fraction of trials that must reject for a sample count to count.
pub const DEFAULT_REQUIRED_RATE: f64 = 0.95;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiError {
    #[error("no usable attack columns")]
    EmptyAttackSet,
    #[error("sample {sample_id} has no score for {attack}")]
    MissingScore { sample_id: String, attack: String },
    #[error("sample {0} is in both the suspect and validation sets")]
    Overlap(String),
    #[error("need at least 2 samples per set, got {suspect} suspect and {validation} validation")]
    TooFewSamples { suspect: usize, validation: usize },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("grid value {requested} exceeds available samples ({available})")]
    GridExceedsSamples { requested: usize, available: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("{0} must lie in (0, 1)")]
    BadLevel(&'static str),
    #[error("trials must be >= 1")]
    NoTrials,
}

/// Dense feature matrix: one row per sample, one column per attack.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub attacks: Vec<AttackId>,
    pub suspect_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub suspect: Vec<Vec<f64>>,
    pub validation: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl FeatureMatrix {
    pub fn columns(&self) -> usize {
        self.attacks.len()
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select(&self, attacks: &[AttackId]) -> Result<FeatureMatrix, DiError> {
        let idx: Vec<usize> = attacks
            .iter()
            .filter_map(|a| self.attacks.iter().position(|b| b.key() == a.key()))
            .collect();
        if idx.is_empty() {
            return Err(DiError::EmptyAttackSet);
        }
        let pick =
            |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect() };
        Ok(FeatureMatrix {
            attacks: idx.iter().map(|&i| self.attacks[i]).collect(),
            suspect_ids: self.suspect_ids.clone(),
            validation_ids: self.validation_ids.clone(),
            suspect: pick(&self.suspect),
            validation: pick(&self.validation),
            warnings: self.warnings.clone(),
        })
    }
}

/// Builds the feature matrix for the given sample sets. An empty `attacks`
/// slice selects every attack in the table. Ids are sorted and deduplicated,
/// so row order does not depend on the caller. Columns holding any
/// non-finite value are dropped with a warning.
pub fn build_features(
    table: &ScoreTable,
    suspect_ids: &[String],
    validation_ids: &[String],
    attacks: &[AttackId],
) -> Result<FeatureMatrix, DiError> {
    let suspect_ids: Vec<String> = suspect_ids
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let validation_ids: Vec<String> = validation_ids
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(id) = suspect_ids.iter().find(|id| validation_ids.binary_search(id).is_ok()) {
        return Err(DiError::Overlap(id.clone()));
    }
    let attacks = if attacks.is_empty() {
        table.attacks()
    } else {
        attacks.to_vec()
    };

    let mut kept = Vec::new();
    let mut suspect_cols = Vec::new();
    let mut validation_cols = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    for a in attacks {
        if !seen.insert(a.key()) {
            continue;
        }
        let values = table.by_sample(&a);
        let column = |ids: &[String]| -> Result<Vec<f64>, DiError> {
            ids.iter()
                .map(|id| {
                    values.get(id).copied().ok_or_else(|| DiError::MissingScore {
                        sample_id: id.clone(),
                        attack: a.key(),
                    })
                })
                .collect()
        };
        let s = column(&suspect_ids)?;
        let v = column(&validation_ids)?;
        let bad = suspect_ids
            .iter()
            .zip(&s)
            .chain(validation_ids.iter().zip(&v))
            .find(|(_, x)| !x.is_finite());
        if let Some((id, x)) = bad {
            warnings.push(format!("dropped attack {}: value {x} for sample {id}", a.key()));
            continue;
        }
        kept.push(a);
        suspect_cols.push(s);
        validation_cols.push(v);
    }
    if kept.is_empty() {
        return Err(DiError::EmptyAttackSet);
    }
    let rows = |cols: &[Vec<f64>], n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
    };
    Ok(FeatureMatrix {
        attacks: kept,
        suspect: rows(&suspect_cols, suspect_ids.len()),
        validation: rows(&validation_cols, validation_ids.len()),
        suspect_ids,
        validation_ids,
        warnings,
    })
}

/// Min-max scales every column over all given rows and sums each row.
/// A constant column contributes 0.5 to every row.
pub fn aggregate_rows(rows: &[&[f64]]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let cols = first.len();
    let mut lo = vec![f64::INFINITY; cols];
    let mut hi = vec![f64::NEG_INFINITY; cols];
    for r in rows {
        for (j, &x) in r.iter().enumerate() {
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &x)| {
                    let w = hi[j] - lo[j];
                    if w > 0.0 {
                        (x - lo[j]) / w
                    } else {
                        0.5
                    }
                })
                .sum()
        })
        .collect()
}

/// Aggregated per-sample scores, split back into the two sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub suspect: Vec<f64>,
    pub validation: Vec<f64>,
}

pub fn normalize_and_aggregate(features: &FeatureMatrix) -> Result<Aggregated, DiError> {
    let total = features.suspect.len() + features.validation.len();
    if total < 2 {
        return Err(DiError::TooFewSamples {
            suspect: features.suspect.len(),
            validation: features.validation.len(),
        });
    }
    let rows: Vec<&[f64]> = features
        .suspect
        .iter()
        .chain(&features.validation)
        .map(Vec::as_slice)
        .collect();
    let mut scores = aggregate_rows(&rows);
    let validation = scores.split_off(features.suspect.len());
    Ok(Aggregated {
        suspect: scores,
        validation,
    })
}

/// Outcome of a one-sided Welch t-test of `mean(a) > mean(b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    #[serde(with = "crate::serde_float")]
    pub t_statistic: f64,
    #[serde(with = "crate::serde_float")]
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub rejected: bool,
    /// Both sample variances were zero; `p_value` is 0 or 1 by convention.
    pub degenerate: bool,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Upper tail probability `P(T > t)` of Student's t with `df` degrees of
/// freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let x = df / (df + t * t);
    let half = 0.5 * beta_reg(0.5 * df, 0.5, x);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

pub fn welch_one_sided(a: &[f64], b: &[f64], alpha: f64) -> Result<WelchTest, DiError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DiError::TooFewSamples {
            suspect: a.len(),
            validation: b.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DiError::BadLevel("alpha"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(DiError::NonFinite);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let (t, df, p, degenerate) = if se2 == 0.0 {
        let (t, p) = if ma > mb {
            (f64::INFINITY, 0.0)
        } else if ma < mb {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        };
        (t, na + nb - 2.0, p, true)
    } else {
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        (t, df, student_t_sf(t, df), false)
    };
    Ok(WelchTest {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        alpha,
        rejected: p < alpha,
        degenerate,
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedScore {
    pub sample_id: String,
    pub score: f64,
}

/// Full dataset-inference result, with the per-sample scores kept for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiReport {
    #[serde(flatten)]
    pub test: WelchTest,
    pub attacks: Vec<String>,
    pub suspect: Vec<AggregatedScore>,
    pub validation: Vec<AggregatedScore>,
    pub warnings: Vec<String>,
}

impl DiReport {
    /// Per-sample aggregated scores as CSV: `sample_id,set,score`.
    pub fn write_scores_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "set", "score"])?;
        for (set, rows) in [("suspect", &self.suspect), ("validation", &self.validation)] {
            for r in rows {
                w.write_record([r.sample_id.as_str(), set, &r.score.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates the full matrix and tests suspect against validation.
pub fn dataset_inference(features: &FeatureMatrix, alpha: f64) -> Result<DiReport, DiError> {
    let agg = normalize_and_aggregate(features)?;
    let test = welch_one_sided(&agg.suspect, &agg.validation, alpha)?;
    let pair = |ids: &[String], scores: Vec<f64>| -> Vec<AggregatedScore> {
        ids.iter()
            .zip(scores)
            .map(|(id, score)| AggregatedScore {
                sample_id: id.clone(),
                score,
            })
            .collect()
    };
    Ok(DiReport {
        test,
        attacks: features.attacks.iter().map(AttackId::key).collect(),
        suspect: pair(&features.suspect_ids, agg.suspect),
        validation: pair(&features.validation_ids, agg.validation),
        warnings: features.warnings.clone(),
    })
}

/// Per-set sample counts tried by default: 2..8 step 2, then
/// {1,2,3,4,6,8} x 10^k, truncated at `max`.
pub fn default_grid(max: usize) -> Vec<usize> {
    let mut grid = vec![2, 4, 6, 8];
    let mut scale = 10usize;
    'outer: loop {
        for m in [1, 2, 3, 4, 6, 8] {
            let Some(v) = scale.checked_mul(m) else { break 'outer };
            if v > max {
                break 'outer;
            }
            grid.push(v);
        }
        let Some(next) = scale.checked_mul(10) else { break };
        scale = next;
    }
    grid.retain(|&v| v <= max);
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalPResult {
    /// Smallest grid value whose rejection rate reaches `required_rate`;
    /// `None` when no grid value qualifies.
    pub p_min: Option<usize>,
    pub grid: Vec<usize>,
    pub rejection_rate: Vec<f64>,
    pub trials: usize,
    pub alpha: f64,
    pub required_rate: f64,
    pub seed: u64,
}

impl MinimalPResult {
    /// Human-readable `p_min`.
    pub fn p_min_label(&self) -> String {
        match self.p_min {
            Some(p) => p.to_string(),
            None => format!("not found <= {}", self.grid.last().copied().unwrap_or(0)),
        }
    }

    /// Rejection curve as CSV: `p,rejection_rate,trials`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "p,rejection_rate,trials")?;
        for (p, r) in self.grid.iter().zip(&self.rejection_rate) {
            writeln!(out, "{p},{r},{}", self.trials)?;
        }
        Ok(())
    }
}

/// Parameters for [`minimal_p_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub grid: Vec<usize>,
    pub trials: usize,
    pub alpha: f64,
    pub required_rate: f64,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(grid: Vec<usize>, seed: u64) -> Self {
        SearchConfig {
            grid,
            trials: DEFAULT_TRIALS,
            alpha: DEFAULT_ALPHA,
            required_rate: DEFAULT_REQUIRED_RATE,
            seed,
        }
    }
}

/// For each grid value `p`, draws `p` suspect and `p` validation rows
/// without replacement in each of `trials` trials, aggregates the drawn rows
/// and runs the Welch test. Each (grid index, trial) pair has its own RNG
/// stream, so results do not depend on scheduling.
pub fn minimal_p_search(features: &FeatureMatrix, cfg: &SearchConfig) -> Result<MinimalPResult, DiError> {
    let grid = &cfg.grid;
    if grid.is_empty() {
        return Err(DiError::BadGrid("empty".into()));
    }
    if grid[0] < 2 {
        return Err(DiError::BadGrid(format!("values must be >= 2, got {}", grid[0])));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiError::BadGrid("values must be strictly increasing".into()));
    }
    if cfg.trials == 0 {
        return Err(DiError::NoTrials);
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(DiError::BadLevel("alpha"));
    }
    if !(cfg.required_rate > 0.0 && cfg.required_rate <= 1.0) {
        return Err(DiError::BadLevel("required_rate"));
    }
    let available = features.suspect.len().min(features.validation.len());
    let max = *grid.last().expect("non-empty");
    if max > available {
        return Err(DiError::GridExceedsSamples {
            requested: max,
            available,
        });
    }

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..cfg.trials).map(move |t| (g, t)))
        .collect();
    let outcomes: Vec<bool> = jobs
        .par_iter()
        .map(|&(g, t)| {
            let p = grid[g];
            let mut rng = stream(cfg.seed, &[domain::DI_TRIAL, g as u64, t as u64]);
            let s = sample(&mut rng, features.suspect.len(), p);
            let v = sample(&mut rng, features.validation.len(), p);
            let rows: Vec<&[f64]> = s
                .iter()
                .map(|i| features.suspect[i].as_slice())
                .chain(v.iter().map(|i| features.validation[i].as_slice()))
                .collect();
            let mut scores = aggregate_rows(&rows);
            let vs = scores.split_off(p);
            welch_one_sided(&scores, &vs, cfg.alpha).map(|w| w.rejected)
        })
        .collect::<Result<_, _>>()?;

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(g, _), &rej) in jobs.iter().zip(&outcomes) {
        *counts.entry(g).or_default() += rej as usize;
    }
    let rejection_rate: Vec<f64> = (0..grid.len())
        .map(|g| counts.get(&g).copied().unwrap_or(0) as f64 / cfg.trials as f64)
        .collect();
    let p_min = grid
        .iter()
        .zip(&rejection_rate)
        .find(|(_, &r)| r >= cfg.required_rate)
        .map(|(&p, _)| p);
    Ok(MinimalPResult {
        p_min,
        grid: grid.clone(),
        rejection_rate,
        trials: cfg.trials,
        alpha: cfg.alpha,
        required_rate: cfg.required_rate,
        seed: cfg.seed,
    })
}
