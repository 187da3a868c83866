//! Training-data extraction: rank training samples by single-pass prediction
//! error, complete the best candidates from a short true prefix, and flag a
//! completion as memorized when it is close enough to the original.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{complete_continuous, complete_greedy, teacher_forced_predict, ContinuousOracle, DiscreteOracle};
use crate::rng::{domain, hash_str, stream};
use crate::sim::CorpusSample;
use crate::trace::{Mode, Tokens};

pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_TOP_N: usize = 5;
pub const DEFAULT_PREFIX_DISCRETE: usize = 8;
pub const DEFAULT_PREFIX_CONTINUOUS: usize = 5;
/// Fraction of tokens hidden when ranking continuous candidates.
pub const CANDIDATE_MASK_RATIO: f64 = 0.95;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("mode mismatch: expected {expected:?}")]
    ModeMismatch { expected: Mode },
    #[error("prefix length {prefix} must be < sequence length {len}")]
    PrefixTooLong { prefix: usize, len: usize },
    #[error("sample {0}: {1}")]
    Sample(String, Box<ExtractionError>),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The model under attack.
#[derive(Clone, Copy)]
pub enum Model<'a> {
    Discrete(&'a dyn DiscreteOracle),
    Continuous(&'a dyn ContinuousOracle),
}

impl Model<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            Model::Discrete(_) => Mode::Discrete,
            Model::Continuous(_) => Mode::Continuous,
        }
    }
}

/// A labeled token sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub sample_id: String,
    pub class_label: u32,
    pub tokens: Tokens,
}

impl From<&CorpusSample> for LabeledSequence {
    fn from(s: &CorpusSample) -> Self {
        LabeledSequence {
            sample_id: s.sample_id.clone(),
            class_label: s.class_label,
            tokens: s.tokens.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCandidate {
    pub sample_id: String,
    pub class_label: u32,
    pub distance: f64,
    /// 1-based rank within the class.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionVerdict {
    pub sample_id: String,
    pub class_label: u32,
    pub similarity: f64,
    pub memorized: bool,
    pub prefix_length: usize,
    /// Set when a validation sample was flagged memorized.
    pub false_positive: bool,
}

fn check_len(a: usize, b: usize) -> Result<(), ExtractionError> {
    if a == b {
        Ok(())
    } else {
        Err(ExtractionError::LengthMismatch { a, b })
    }
}

/// Discrete: percentage of mispredicted positions. Continuous: squared
/// Euclidean distance over the whole sequence.
pub fn candidate_distance(t: &Tokens, t_hat: &Tokens) -> Result<f64, ExtractionError> {
    check_len(t.len(), t_hat.len())?;
    match (t, t_hat) {
        (Tokens::Discrete(a), Tokens::Discrete(b)) => {
            if a.is_empty() {
                return Ok(0.0);
            }
            let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
            Ok(100.0 - 100.0 * hits as f64 / a.len() as f64)
        }
        (Tokens::Continuous(a), Tokens::Continuous(b)) => {
            let mut total = 0.0;
            for (x, y) in a.iter().zip(b) {
                check_len(x.len(), y.len())?;
                total += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
            Ok(total)
        }
        _ => Err(ExtractionError::ModeMismatch { expected: t.mode() }),
    }
}

/// Scores a completion against the original, in `[0, 1]`.
pub trait Similarity: Sync {
    fn similarity(&self, a: &Tokens, b: &Tokens) -> Result<f64, ExtractionError>;
}

/// Exact-match fraction for discrete tokens; `(1 + cos) / 2` of the
/// flattened vectors for continuous tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenSimilarity;

impl Similarity for TokenSimilarity {
    fn similarity(&self, a: &Tokens, b: &Tokens) -> Result<f64, ExtractionError> {
        check_len(a.len(), b.len())?;
        match (a, b) {
            (Tokens::Discrete(x), Tokens::Discrete(y)) => {
                if x.is_empty() {
                    return Ok(1.0);
                }
                Ok(x.iter().zip(y).filter(|(p, q)| p == q).count() as f64 / x.len() as f64)
            }
            (Tokens::Continuous(x), Tokens::Continuous(y)) => {
                let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
                for (u, v) in x.iter().zip(y) {
                    check_len(u.len(), v.len())?;
                    for (p, q) in u.iter().zip(v) {
                        dot += p * q;
                        nx += p * p;
                        ny += q * q;
                    }
                }
                if nx == 0.0 || ny == 0.0 {
                    return Ok(if nx == ny { 1.0 } else { 0.5 });
                }
                let cos = (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0);
                Ok((1.0 + cos) / 2.0)
            }
            _ => Err(ExtractionError::ModeMismatch { expected: a.mode() }),
        }
    }
}

/// Positions hidden when ranking a continuous candidate: all but
/// `round((1 - ratio) * n)` (at least one) visible tokens, drawn per sample.
pub fn candidate_mask(sample_id: &str, n: usize, seed: u64) -> Vec<bool> {
    let visible = (((1.0 - CANDIDATE_MASK_RATIO) * n as f64).round() as usize).clamp(1, n.max(1));
    let mut rng = stream(seed, &[domain::EXTRACTION_MASK, hash_str(sample_id)]);
    let mut mask = vec![true; n];
    for i in sample(&mut rng, n, visible.min(n)).iter() {
        mask[i] = false;
    }
    mask
}

/// Single-step reconstruction of `s` used for candidate ranking.
pub fn single_step_prediction(model: Model, s: &LabeledSequence, seed: u64) -> Result<Tokens, ExtractionError> {
    let class = Some(s.class_label);
    match (model, &s.tokens) {
        (Model::Discrete(o), Tokens::Discrete(t)) => Ok(Tokens::Discrete(teacher_forced_predict(o, t, class))),
        (Model::Continuous(o), Tokens::Continuous(t)) => {
            let mask = candidate_mask(&s.sample_id, t.len(), seed);
            let pred = o.predict_masked(t, &mask, class);
            Ok(Tokens::Continuous(
                t.iter()
                    .zip(pred)
                    .zip(&mask)
                    .map(|((orig, p), &hidden)| if hidden { p } else { orig.clone() })
                    .collect(),
            ))
        }
        _ => Err(ExtractionError::ModeMismatch { expected: model.mode() }),
    }
}

/// Ranks `samples` within each class by [`candidate_distance`] to their
/// single-step reconstruction and keeps the `top_n` closest per class. Ties
/// are broken by sample id. Output is ordered by class, then rank.
pub fn select_candidates(
    model: Model,
    samples: &[LabeledSequence],
    top_n: usize,
    seed: u64,
) -> Result<Vec<ExtractionCandidate>, ExtractionError> {
    if top_n == 0 {
        return Ok(Vec::new());
    }
    let scored: Vec<(u32, String, f64)> = samples
        .par_iter()
        .map(|s| {
            let wrap = |e| ExtractionError::Sample(s.sample_id.clone(), Box::new(e));
            let pred = single_step_prediction(model, s, seed).map_err(wrap)?;
            let d = candidate_distance(&s.tokens, &pred).map_err(wrap)?;
            Ok((s.class_label, s.sample_id.clone(), d))
        })
        .collect::<Result<_, ExtractionError>>()?;
    let mut by_class: BTreeMap<u32, Vec<(String, f64)>> = BTreeMap::new();
    for (c, id, d) in scored {
        by_class.entry(c).or_default().push((id, d));
    }
    let mut out = Vec::new();
    for (class_label, mut rows) in by_class {
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out.extend(
            rows.into_iter()
                .take(top_n)
                .enumerate()
                .map(|(i, (sample_id, distance))| ExtractionCandidate {
                    sample_id,
                    class_label,
                    distance,
                    rank: i + 1,
                }),
        );
    }
    Ok(out)
}

/// Looks up the sequences behind `candidates`, in candidate order.
pub fn candidate_targets(
    candidates: &[ExtractionCandidate],
    samples: &[LabeledSequence],
) -> Result<Vec<LabeledSequence>, ExtractionError> {
    let index: BTreeMap<&str, &LabeledSequence> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    candidates
        .iter()
        .map(|c| {
            index
                .get(c.sample_id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| ExtractionError::UnknownCandidate(c.sample_id.clone()))
        })
        .collect()
}

/// Greedy completion of the first `prefix_len` tokens of `s`, conditioned
/// on its class without guidance.
pub fn complete_from_prefix(model: Model, s: &LabeledSequence, prefix_len: usize) -> Result<Tokens, ExtractionError> {
    let class = Some(s.class_label);
    match (model, &s.tokens) {
        (Model::Discrete(o), Tokens::Discrete(t)) => Ok(Tokens::Discrete(complete_greedy(o, &t[..prefix_len], class))),
        (Model::Continuous(o), Tokens::Continuous(t)) => {
            Ok(Tokens::Continuous(complete_continuous(o, &t[..prefix_len], class)))
        }
        _ => Err(ExtractionError::ModeMismatch { expected: model.mode() }),
    }
}

/// Completes every target from its prefix and applies the threshold.
pub fn extract(
    model: Model,
    targets: &[LabeledSequence],
    prefix_len: usize,
    tau: f64,
    similarity: &dyn Similarity,
) -> Result<Vec<ExtractionVerdict>, ExtractionError> {
    targets
        .par_iter()
        .map(|s| {
            let n = s.tokens.len();
            if prefix_len >= n {
                return Err(ExtractionError::PrefixTooLong {
                    prefix: prefix_len,
                    len: n,
                });
            }
            let wrap = |e| ExtractionError::Sample(s.sample_id.clone(), Box::new(e));
            let completion = complete_from_prefix(model, s, prefix_len).map_err(wrap)?;
            let sim = similarity.similarity(&s.tokens, &completion).map_err(wrap)?;
            Ok(ExtractionVerdict {
                sample_id: s.sample_id.clone(),
                class_label: s.class_label,
                similarity: sim,
                memorized: sim >= tau,
                prefix_length: prefix_len,
                false_positive: false,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveReport {
    pub prefix_length: usize,
    /// Validation samples flagged memorized at `prefix_length`.
    pub flagged: Vec<ExtractionVerdict>,
    /// `(prefix length, flagged count)` for every swept prefix.
    pub sweep: Vec<(usize, usize)>,
    /// Largest swept prefix with no flagged sample.
    pub max_safe_prefix: Option<usize>,
}

/// Runs extraction on held-out samples, which can only produce false
/// positives, at `prefix_len` and at every prefix in `sweep`.
pub fn false_positive_check(
    model: Model,
    validation: &[LabeledSequence],
    prefix_len: usize,
    sweep: &[usize],
    tau: f64,
    similarity: &dyn Similarity,
) -> Result<FalsePositiveReport, ExtractionError> {
    let flag = |p: usize| -> Result<Vec<ExtractionVerdict>, ExtractionError> {
        Ok(extract(model, validation, p, tau, similarity)?
            .into_iter()
            .filter(|v| v.memorized)
            .map(|v| ExtractionVerdict {
                false_positive: true,
                ..v
            })
            .collect())
    };
    let flagged = flag(prefix_len)?;
    let mut counts = Vec::with_capacity(sweep.len());
    for &p in sweep {
        let c = if p == prefix_len { flagged.len() } else { flag(p)?.len() };
        counts.push((p, c));
    }
    let max_safe_prefix = counts.iter().filter(|(_, c)| *c == 0).map(|(p, _)| *p).max();
    Ok(FalsePositiveReport {
        prefix_length: prefix_len,
        flagged,
        sweep: counts,
        max_safe_prefix,
    })
}

/// Writes the per-candidate report: distance, rank, similarity and verdict.
pub fn write_report_csv(
    path: impl AsRef<Path>,
    candidates: &[ExtractionCandidate],
    verdicts: &[ExtractionVerdict],
) -> Result<(), ExtractionError> {
    let by_id: BTreeMap<&str, &ExtractionVerdict> = verdicts.iter().map(|v| (v.sample_id.as_str(), v)).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sample_id",
        "class_label",
        "rank",
        "distance",
        "prefix_length",
        "similarity",
        "memorized",
        "false_positive",
    ])?;
    for c in candidates {
        let v = by_id.get(c.sample_id.as_str());
        w.write_record([
            c.sample_id.clone(),
            c.class_label.to_string(),
            c.rank.to_string(),
            c.distance.to_string(),
            v.map_or(String::new(), |v| v.prefix_length.to_string()),
            v.map_or(String::new(), |v| v.similarity.to_string()),
            v.map_or(String::new(), |v| v.memorized.to_string()),
            v.map_or(String::new(), |v| v.false_positive.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Caches a candidate list so generation can resume without re-ranking.
pub fn write_candidates(path: impl AsRef<Path>, candidates: &[ExtractionCandidate]) -> Result<(), ExtractionError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, candidates)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<ExtractionCandidate>, ExtractionError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::testing::{CopyOracle, UniformOracle};

    fn disc(id: &str, class: u32, t: Vec<u32>) -> LabeledSequence {
        LabeledSequence {
            sample_id: id.into(),
            class_label: class,
            tokens: Tokens::Discrete(t),
        }
    }

    #[test]
    fn distance_examples() {
        let d = candidate_distance(&Tokens::Discrete(vec![1, 2, 3, 4]), &Tokens::Discrete(vec![1, 2, 0, 4])).unwrap();
        assert_eq!(d, 25.0);
        assert_eq!(
            candidate_distance(&Tokens::Discrete(vec![5; 6]), &Tokens::Discrete(vec![5; 6])).unwrap(),
            0.0
        );
        let d = candidate_distance(
            &Tokens::Continuous(vec![vec![0.0, 0.0]]),
            &Tokens::Continuous(vec![vec![3.0, 4.0]]),
        )
        .unwrap();
        assert_eq!(d, 25.0);
        assert!(matches!(
            candidate_distance(&Tokens::Discrete(vec![1]), &Tokens::Discrete(vec![1, 2])),
            Err(ExtractionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        let s = TokenSimilarity;
        let a = Tokens::Discrete(vec![1, 2, 3]);
        assert_eq!(s.similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(s.similarity(&a, &Tokens::Discrete(vec![0, 0, 0])).unwrap(), 0.0);
        let x = Tokens::Continuous(vec![vec![1.0, -2.0], vec![0.5, 3.0]]);
        let neg = Tokens::Continuous(vec![vec![-1.0, 2.0], vec![-0.5, -3.0]]);
        assert!((s.similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!(s.similarity(&x, &neg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn copy_model_ties_break_by_sample_id() {
        let target = vec![3, 1, 4, 1];
        let o = CopyOracle {
            target: target.clone(),
            vocab: 8,
        };
        let samples = vec![
            disc("b", 0, target.clone()),
            disc("a", 0, target.clone()),
            disc("c", 1, target),
        ];
        let c = select_candidates(Model::Discrete(&o), &samples, 5, 1).unwrap();
        let ids: Vec<(&str, usize)> = c.iter().map(|c| (c.sample_id.as_str(), c.rank)).collect();
        assert_eq!(ids, [("a", 1), ("b", 2), ("c", 1)]);
        assert!(c.iter().all(|c| c.distance == 0.0));
        assert!(select_candidates(Model::Discrete(&o), &samples, 0, 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn extraction_thresholds() {
        let target = vec![2, 7, 1, 8, 2, 8];
        let o = CopyOracle {
            target: target.clone(),
            vocab: 10,
        };
        let s = [disc("x", 0, target)];
        let v = extract(Model::Discrete(&o), &s, 5, DEFAULT_TAU, &TokenSimilarity).unwrap();
        assert_eq!(v[0].similarity, 1.0);
        assert!(v[0].memorized);
        let v = extract(Model::Discrete(&o), &s, 5, 1.01, &TokenSimilarity).unwrap();
        assert!(!v[0].memorized);
        assert!(matches!(
            extract(Model::Discrete(&o), &s, 6, DEFAULT_TAU, &TokenSimilarity),
            Err(ExtractionError::PrefixTooLong { .. })
        ));
    }

    #[test]
    fn uniform_model_has_no_false_positives() {
        let o = UniformOracle { vocab: 64, seq_len: 32 };
        let val: Vec<LabeledSequence> = (0..50u32)
            .map(|i| {
                disc(
                    &format!("v{i:02}"),
                    i % 4,
                    (0..32).map(|j| (i * 7 + j * 13) % 64).collect(),
                )
            })
            .collect();
        let r = false_positive_check(
            Model::Discrete(&o),
            &val,
            8,
            &[2, 4, 8, 16],
            DEFAULT_TAU,
            &TokenSimilarity,
        )
        .unwrap();
        assert!(r.flagged.is_empty());
        assert_eq!(r.max_safe_prefix, Some(16));
    }

    #[test]
    fn copy_model_on_validation_raises_flags() {
        let target: Vec<u32> = (0..10).collect();
        let o = CopyOracle {
            target: target.clone(),
            vocab: 10,
        };
        let r = false_positive_check(
            Model::Discrete(&o),
            &[disc("v", 0, target)],
            9,
            &[9],
            DEFAULT_TAU,
            &TokenSimilarity,
        )
        .unwrap();
        assert_eq!(r.flagged.len(), 1);
        assert!(r.flagged[0].false_positive);
        assert_eq!(r.max_safe_prefix, None);
    }

    #[test]
    fn candidate_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = vec![ExtractionCandidate {
            sample_id: "can-0001".into(),
            class_label: 1,
            distance: 3.125,
            rank: 1,
        }];
        let p = dir.path().join("candidates.json");
        write_candidates(&p, &c).unwrap();
        assert_eq!(read_candidates(&p).unwrap(), c);
    }

    #[test]
    fn candidate_mask_keeps_five_percent_visible() {
        let m = candidate_mask("s", 32, 7);
        assert_eq!(m.iter().filter(|&&h| !h).count(), 2);
        assert_eq!(m, candidate_mask("s", 32, 7));
    }
}
