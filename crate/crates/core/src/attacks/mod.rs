//! Membership-inference scores.
//!
//! Every score here is *member-oriented*: larger values mean "more likely a
//! training member". Raw formulas whose small values indicate membership are
//! negated exactly once, inside the function that computes them.
//!
//! The score functions take a per-token "log-likelihood" sequence. Depending on
//! the attack variant this is the conditional log-likelihood, the CFG
//! difference `log p(x|c) - log p(x|c_null)`, or a negated diffusion loss; see
//! [`catalog::AttackInput`].

pub mod camia;
pub mod catalog;

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::trace::{Block, DiffTokenStats, LossRepeats, SampleTrace, TokenStats};

pub use catalog::{
    score_all, AttackId, AttackInput, AttackName, Hyper, ScoreRecord, ScoreTable, Variant, DEFAULT_EPS_GRID,
    DEFAULT_K_GRID,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("empty token block")]
    Empty,
    #[error("k = {0} is outside (0, 100]")]
    BadK(u32),
    #[error("no scorable tokens (vocabulary std is zero at every position)")]
    NoScorableTokens,
    #[error("quantile k = {0} not stored in the trace")]
    MissingQuantile(u32),
    #[error("{0} requires discrete tokens")]
    NeedsDiscrete(&'static str),
    #[error("slope needs at least 3 tokens, got {0}")]
    TooShort(usize),
    #[error("ragged repeat counts: token {token} has {got} repeats, expected {expected}")]
    RaggedRepeats { token: usize, got: usize, expected: usize },
    #[error("trace has no unconditional block")]
    MissingUncond,
    #[error("trace has no repeated-pass block")]
    MissingRepeated,
    #[error("attack {attack} is incompatible with {mode} traces")]
    Incompatible { attack: String, mode: &'static str },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// The per-position quantities the vocabulary-aware attacks need.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionStats {
    pub loglik_true: f64,
    pub max_other: f64,
    pub mean: f64,
    pub std: f64,
}

impl From<&TokenStats> for PositionStats {
    fn from(s: &TokenStats) -> Self {
        PositionStats {
            loglik_true: s.loglik_true,
            max_other: s.max_other_loglik,
            mean: s.vocab_mean,
            std: s.vocab_std,
        }
    }
}

impl From<&DiffTokenStats> for PositionStats {
    fn from(s: &DiffTokenStats) -> Self {
        PositionStats {
            loglik_true: s.diff_true,
            max_other: s.diff_max_other,
            mean: s.diff_mean,
            std: s.diff_std,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Number of tokens kept by a Min-K% style selection: `floor(k N / 100)`,
/// at least one.
pub fn min_k_count(k_percent: u32, n: usize) -> Result<usize, AttackError> {
    if k_percent == 0 || k_percent > 100 {
        return Err(AttackError::BadK(k_percent));
    }
    Ok((k_percent as usize * n / 100).clamp(1, n))
}

/// Mean per-token log-likelihood.
pub fn loss_score(logliks: &[f64]) -> Result<f64, AttackError> {
    if logliks.is_empty() {
        return Err(AttackError::Empty);
    }
    Ok(mean(logliks))
}

/// Serializes discrete tokens as little-endian u16 pairs.
pub fn token_payload(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().flat_map(|&t| (t as u16).to_le_bytes()).collect()
}

/// Length of the zlib stream (default level) for `payload`.
pub fn zlib_len(payload: &[u8]) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(payload).expect("in-memory write");
    enc.finish().expect("in-memory finish").len()
}

/// `-(mean NLL / compressed length)` of the token payload.
pub fn zlib_score(logliks: &[f64], tokens: &[u32]) -> Result<f64, AttackError> {
    if logliks.is_empty() || tokens.is_empty() {
        return Err(AttackError::Empty);
    }
    let nll = -mean(logliks);
    Ok(zlib_ratio_score(nll, zlib_len(&token_payload(tokens))))
}

/// The zlib score once the compressed length is known.
pub fn zlib_ratio_score(mean_nll: f64, compressed_len: usize) -> f64 {
    -(mean_nll / compressed_len as f64)
}

/// Mean gap between the true token's log-likelihood and the best competitor.
pub fn hinge_score(stats: &[PositionStats]) -> Result<f64, AttackError> {
    if stats.is_empty() {
        return Err(AttackError::Empty);
    }
    Ok(stats.iter().map(|s| s.loglik_true - s.max_other).sum::<f64>() / stats.len() as f64)
}

fn mean_of_smallest(values: &[f64], k_percent: u32) -> Result<f64, AttackError> {
    if values.is_empty() {
        return Err(AttackError::Empty);
    }
    let count = min_k_count(k_percent, values.len())?;
    if count == values.len() {
        return Ok(mean(values));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(mean(&sorted[..count]))
}

/// Mean of the smallest k% per-token log-likelihoods. `k = 100` is exactly
/// [`loss_score`].
pub fn min_k_score(logliks: &[f64], k_percent: u32) -> Result<f64, AttackError> {
    mean_of_smallest(logliks, k_percent)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinKppScore {
    pub value: f64,
    /// Positions dropped because the vocabulary std was zero.
    pub skipped: usize,
}

/// Min-K%++: mean of the smallest k% standardized log-likelihoods
/// `(loglik_true - mean) / std`.
pub fn min_k_pp_score(stats: &[PositionStats], k_percent: u32) -> Result<MinKppScore, AttackError> {
    if stats.is_empty() {
        return Err(AttackError::Empty);
    }
    let z: Vec<f64> = stats
        .iter()
        .filter(|s| s.std > 0.0)
        .map(|s| (s.loglik_true - s.mean) / s.std)
        .collect();
    if z.is_empty() {
        return Err(AttackError::NoScorableTokens);
    }
    Ok(MinKppScore {
        value: mean_of_smallest(&z, k_percent)?,
        skipped: stats.len() - z.len(),
    })
}

/// SURP: mean true-token probability over "surprising" positions, those with
/// entropy below `eps_entropy` and true-token probability below the k-th
/// vocabulary percentile. Returns 0 when no position qualifies.
pub fn surp_score(stats: &[TokenStats], k_percent: u32, eps_entropy: f64) -> Result<f64, AttackError> {
    if stats.is_empty() {
        return Err(AttackError::Empty);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in stats {
        let tau = *s
            .prob_quantiles
            .get(&k_percent)
            .ok_or(AttackError::MissingQuantile(k_percent))?;
        let p = s.loglik_true.exp();
        if s.entropy < eps_entropy && p < tau {
            sum += p;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Output of [`cfg_diff_transform`].
#[derive(Clone, Debug, PartialEq)]
pub enum DiffSequence {
    /// Per-token `log p(x_t|c) - log p(x_t|c_null)`, with full difference
    /// statistics when the trace carries them.
    Discrete {
        diff_true: Vec<f64>,
        stats: Option<Vec<DiffTokenStats>>,
    },
    /// Per masked token, repeat-averaged conditional loss minus unconditional loss.
    Continuous { loss_diff: Vec<f64> },
}

impl DiffSequence {
    /// The sequence in log-likelihood orientation (larger = more member-like).
    pub fn as_logliks(&self) -> Vec<f64> {
        match self {
            DiffSequence::Discrete { diff_true, .. } => diff_true.clone(),
            DiffSequence::Continuous { loss_diff } => loss_diff.iter().map(|d| -d).collect(),
        }
    }
}

/// Conditional-minus-unconditional transform.
pub fn cfg_diff_transform(trace: &SampleTrace) -> Result<DiffSequence, AttackError> {
    let uncond = trace.uncond.as_ref().ok_or(AttackError::MissingUncond)?;
    match (&trace.cond, uncond) {
        (Block::Discrete(c), Block::Discrete(u)) => {
            if c.len() != u.len() {
                return Err(AttackError::LengthMismatch(c.len(), u.len()));
            }
            let diff_true = match &trace.diff {
                Some(d) => d.iter().map(|s| s.diff_true).collect(),
                None => c.iter().zip(u).map(|(c, u)| c.loglik_true - u.loglik_true).collect(),
            };
            Ok(DiffSequence::Discrete {
                diff_true,
                stats: trace.diff.clone(),
            })
        }
        (Block::Continuous(c), Block::Continuous(u)) => {
            let c = average_repeats(c)?;
            let u = average_repeats(u)?;
            if c.len() != u.len() {
                return Err(AttackError::LengthMismatch(c.len(), u.len()));
            }
            Ok(DiffSequence::Continuous {
                loss_diff: c.iter().zip(&u).map(|(c, u)| c - u).collect(),
            })
        }
        _ => Err(AttackError::LengthMismatch(trace.cond.len(), uncond.len())),
    }
}

/// Mean of the R repeated losses of every masked token, in token order.
pub fn average_repeats(block: &LossRepeats) -> Result<Vec<f64>, AttackError> {
    let mut expected = None;
    let mut out = Vec::new();
    for (i, (losses, &masked)) in block.losses.iter().zip(&block.mask_flag).enumerate() {
        if !masked {
            continue;
        }
        let r = *expected.get_or_insert(losses.len());
        if losses.len() != r || r == 0 {
            return Err(AttackError::RaggedRepeats {
                token: i,
                got: losses.len(),
                expected: r,
            });
        }
        out.push(losses.iter().sum::<f64>() / r as f64);
    }
    if out.is_empty() {
        return Err(AttackError::Empty);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Split, Tokens, QUANTILE_KEYS};

    fn ps(lt: f64, mo: f64, mean: f64, std: f64) -> PositionStats {
        PositionStats {
            loglik_true: lt,
            max_other: mo,
            mean,
            std,
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_score(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(loss_score(&[-1.0, -2.0, -3.0]).unwrap(), -2.0);
        assert_eq!(loss_score(&[]), Err(AttackError::Empty));
    }

    #[test]
    fn zlib_arithmetic() {
        assert!((zlib_ratio_score(2.0, 20) - -0.1).abs() < 1e-15);
    }

    #[test]
    fn zlib_payload_lengths_match_reference_zlib() {
        // Frozen from CPython's zlib.compress(payload) at the default level.
        let same: Vec<u32> = vec![5; 32];
        let distinct: Vec<u32> = (0..32).collect();
        assert_eq!(token_payload(&same).len(), 64);
        assert_eq!(zlib_len(&token_payload(&same)), 13);
        assert_eq!(zlib_len(&token_payload(&distinct)), 49);
        let ll = vec![-2.0; 32];
        let s_same = zlib_score(&ll, &same).unwrap();
        let s_distinct = zlib_score(&ll, &distinct).unwrap();
        // Smaller denominator for the repetitive payload: larger magnitude.
        assert!(s_same.abs() > s_distinct.abs());
        assert!(s_same < s_distinct);
    }

    #[test]
    fn hinge_examples() {
        assert!((hinge_score(&[ps(-0.5, -1.2, 0.0, 1.0)]).unwrap() - 0.7).abs() < 1e-12);
        let v = 16f64;
        let uniform = vec![ps(-v.ln(), -v.ln(), -v.ln(), 0.0); 4];
        assert_eq!(hinge_score(&uniform).unwrap(), 0.0);
        let argmax = vec![ps(-0.1, -3.0, -3.0, 1.0), ps(-0.2, -2.5, -3.0, 1.0)];
        assert!(hinge_score(&argmax).unwrap() > 0.0);
    }

    #[test]
    fn min_k_examples() {
        let ll = [-3.0, -1.0, -2.0];
        assert_eq!(min_k_score(&ll, 34).unwrap(), -3.0);
        assert_eq!(
            min_k_score(&ll, 100).unwrap().to_bits(),
            loss_score(&ll).unwrap().to_bits()
        );
        assert_eq!(min_k_score(&ll, 0), Err(AttackError::BadK(0)));
        assert_eq!(min_k_score(&ll, 101), Err(AttackError::BadK(101)));
        assert_eq!(min_k_count(10, 32).unwrap(), 3);
        assert_eq!(min_k_count(1, 32).unwrap(), 1);
    }

    #[test]
    fn min_k_pp_examples() {
        let one = [ps(-1.0, -3.0, -2.0, 0.5)];
        assert_eq!(min_k_pp_score(&one, 100).unwrap().value, 2.0);

        // z = [-1.5, 0.2, 3.0] with mean 0, std 1.
        let z = [ps(-1.5, 0.0, 0.0, 1.0), ps(0.2, 0.0, 0.0, 1.0), ps(3.0, 0.0, 0.0, 1.0)];
        assert!((min_k_pp_score(&z, 67).unwrap().value - -0.65).abs() < 1e-12);

        let flat = [ps(-1.0, -1.0, -1.0, 0.0); 3];
        assert_eq!(min_k_pp_score(&flat, 50), Err(AttackError::NoScorableTokens));

        let mixed = [ps(-1.0, -3.0, -2.0, 0.5), ps(-1.0, -1.0, -1.0, 0.0)];
        let s = min_k_pp_score(&mixed, 100).unwrap();
        assert_eq!((s.value, s.skipped), (2.0, 1));
    }

    #[test]
    fn surp_examples() {
        let lp: Vec<f64> = [0.1f64, 0.2, 0.7].iter().map(|p| p.ln()).collect();
        let s = TokenStats::from_log_probs(&lp, 0, &QUANTILE_KEYS);
        assert!(s.entropy < 2.0);
        assert!((surp_score(std::slice::from_ref(&s), 50, 2.0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(surp_score(std::slice::from_ref(&s), 50, 0.0).unwrap(), 0.0);
        assert_eq!(surp_score(&[s], 25, 2.0), Err(AttackError::MissingQuantile(25)));
    }

    #[test]
    fn average_repeats_examples() {
        let b = LossRepeats {
            timestep: 10,
            losses: vec![vec![1.0, 3.0], vec![2.0, 2.0]],
            mask_flag: vec![true, true],
        };
        assert_eq!(average_repeats(&b).unwrap(), vec![2.0, 2.0]);
        let single = LossRepeats {
            timestep: 10,
            losses: vec![vec![0.25], vec![], vec![1.5]],
            mask_flag: vec![true, false, true],
        };
        assert_eq!(average_repeats(&single).unwrap(), vec![0.25, 1.5]);
        let ragged = LossRepeats {
            timestep: 10,
            losses: vec![vec![1.0, 3.0], vec![2.0]],
            mask_flag: vec![true, true],
        };
        assert!(matches!(
            average_repeats(&ragged),
            Err(AttackError::RaggedRepeats { token: 1, .. })
        ));
    }

    fn discrete_trace(cond_ll: &[f64], uncond_ll: Option<&[f64]>) -> SampleTrace {
        let block = |ll: &[f64]| {
            Block::Discrete(
                ll.iter()
                    .map(|&l| TokenStats::from_log_probs(&[l, (1.0 - l.exp()).max(1e-300).ln()], 0, &QUANTILE_KEYS))
                    .collect(),
            )
        };
        SampleTrace {
            sample_id: "x".into(),
            class_label: 0,
            split: Split::Member,
            tokens: Tokens::Discrete(vec![0; cond_ll.len()]),
            cond: block(cond_ll),
            uncond: uncond_ll.map(block),
            diff: None,
            repeated_pass: None,
        }
    }

    #[test]
    fn cfg_diff_examples() {
        let t = discrete_trace(&[-1.0], Some(&[-2.5]));
        let d = cfg_diff_transform(&t).unwrap();
        assert!((d.as_logliks()[0] - 1.5).abs() < 1e-12);

        let same = discrete_trace(&[-1.0, -0.3, -2.0], Some(&[-1.0, -0.3, -2.0]));
        let d = cfg_diff_transform(&same).unwrap().as_logliks();
        assert!(d.iter().all(|&x| x == 0.0));
        assert_eq!(loss_score(&d).unwrap(), 0.0);

        let none = discrete_trace(&[-1.0], None);
        assert_eq!(cfg_diff_transform(&none), Err(AttackError::MissingUncond));
    }
}
