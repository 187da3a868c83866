//! Trace export from any oracle.
//!
//! Discrete traces carry conditional and null-class statistics plus their
//! difference, and a second pass over the sequence fed twice. Continuous
//! traces carry `R` diffusion losses per masked token at one timestep; the
//! null-class and repeated-pass blocks reuse the same mask and noise draws.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CorpusSample, SimError};
use crate::oracle::{ContinuousOracle, DiscreteOracle};
use crate::rng::{domain, hash_str, stream};
use crate::trace::{
    Block, DiffTokenStats, LossRepeats, Mode, SampleTrace, TokenStats, Tokens, TraceHeader, QUANTILE_KEYS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub timestep: u32,
    pub mask_ratio: f64,
    pub repeats: usize,
    pub include_diff: bool,
    pub include_repeated: bool,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            timestep: 500,
            mask_ratio: 0.95,
            repeats: 64,
            include_diff: true,
            include_repeated: true,
            seed: 7,
        }
    }
}

impl TraceConfig {
    /// Number of masked tokens out of `n`: `round(ratio * n)` clamped to
    /// `[1, n - 1]`.
    pub fn masked_count(&self, n: usize) -> usize {
        ((self.mask_ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }

    fn check(&self, s_max: Option<u32>) -> Result<(), SimError> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(SimError::MaskRatio(self.mask_ratio));
        }
        if self.repeats == 0 {
            return Err(SimError::NoRepeats);
        }
        if let Some(s_max) = s_max {
            if self.timestep >= s_max {
                return Err(SimError::Timestep {
                    s: self.timestep,
                    s_max,
                });
            }
        }
        Ok(())
    }
}

fn discrete_tokens(s: &CorpusSample) -> Result<&[u32], SimError> {
    s.tokens.as_discrete().ok_or(SimError::ModeMismatch {
        model: Mode::Discrete,
        corpus: Mode::Continuous,
    })
}

/// Exports discrete traces for `samples`, in input order.
pub fn export_discrete<O: DiscreteOracle + ?Sized>(
    oracle: &O,
    samples: &[&CorpusSample],
    cfg: &TraceConfig,
    generator: serde_json::Value,
) -> Result<(TraceHeader, Vec<SampleTrace>), SimError> {
    let header = TraceHeader::new(Mode::Discrete, oracle.vocab(), oracle.seq_len(), cfg.seed).with_generator(generator);
    let with_diff = cfg.include_diff && oracle.has_uncond();
    let traces = samples
        .par_iter()
        .map(|s| {
            let tokens = discrete_tokens(s)?;
            let class = Some(s.class_label);
            let mut cond = Vec::with_capacity(tokens.len());
            let mut uncond = Vec::new();
            let mut diff = Vec::new();
            for (n, &tok) in tokens.iter().enumerate() {
                let lp = oracle.log_probs(&tokens[..n], class);
                cond.push(TokenStats::from_log_probs(&lp, tok as usize, &QUANTILE_KEYS));
                if with_diff {
                    let lu = oracle.log_probs(&tokens[..n], None);
                    uncond.push(TokenStats::from_log_probs(&lu, tok as usize, &QUANTILE_KEYS));
                    diff.push(DiffTokenStats::from_log_probs(&lp, &lu, tok as usize));
                }
            }
            let repeated_pass = cfg.include_repeated.then(|| {
                let doubled: Vec<u32> = tokens.iter().chain(tokens).copied().collect();
                let n = tokens.len();
                Block::Discrete(
                    (n..2 * n)
                        .map(|i| {
                            let lp = oracle.log_probs(&doubled[..i], class);
                            TokenStats::from_log_probs(&lp, doubled[i] as usize, &QUANTILE_KEYS)
                        })
                        .collect(),
                )
            });
            let trace = SampleTrace {
                sample_id: s.sample_id.clone(),
                class_label: s.class_label,
                split: s.role.split(),
                tokens: Tokens::Discrete(tokens.to_vec()),
                cond: Block::Discrete(cond),
                uncond: with_diff.then_some(Block::Discrete(uncond)),
                diff: with_diff.then_some(diff),
                repeated_pass,
            };
            trace.validate(&header).map_err(|reason| {
                SimError::Trace(crate::trace::TraceError::InvalidRecord {
                    sample_id: s.sample_id.clone(),
                    line: None,
                    reason,
                })
            })?;
            Ok(trace)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok((header, traces))
}

/// The seeded mask used for one sample (`true` = hidden, enters the loss).
pub fn sample_mask(cfg: &TraceConfig, sample_id: &str, n: usize) -> Vec<bool> {
    let mut rng = stream(cfg.seed, &[domain::EXPORT_MASK, hash_str(sample_id)]);
    let mut mask = vec![false; n];
    for i in sample(&mut rng, n, cfg.masked_count(n)) {
        mask[i] = true;
    }
    mask
}

/// Per-token diffusion losses at timestep `s`, `repeats` draws per masked
/// token. The noise for token `i` comes from a stream keyed by
/// `(seed, sample, i)`, so every block of one sample sees the same draws.
#[allow(clippy::too_many_arguments)]
fn loss_block<O: ContinuousOracle + ?Sized>(
    oracle: &O,
    cfg: &TraceConfig,
    sample_id: &str,
    tokens: &[Vec<f64>],
    z: &[Vec<f64>],
    mask: &[bool],
    class: Option<u32>,
) -> LossRepeats {
    let s = cfg.timestep;
    let ab = oracle.alpha_bar(s);
    let (ra, rn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let id = hash_str(sample_id);
    let losses = tokens
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(i, (t, &hidden))| {
            if !hidden {
                return Vec::new();
            }
            let mut rng = stream(cfg.seed, &[domain::EXPORT_NOISE, id, i as u64]);
            (0..cfg.repeats)
                .map(|_| {
                    let eps: Vec<f64> = (0..t.len()).map(|_| rng.sample(StandardNormal)).collect();
                    let noised: Vec<f64> = t.iter().zip(&eps).map(|(x, e)| ra * x + rn * e).collect();
                    let eps_hat = oracle.predict_noise(&noised, &z[i], s, class);
                    eps.iter().zip(&eps_hat).map(|(e, h)| (e - h) * (e - h)).sum()
                })
                .collect()
        })
        .collect();
    LossRepeats {
        timestep: s,
        losses,
        mask_flag: mask.to_vec(),
    }
}

/// Exports continuous traces for `samples`, in input order.
pub fn export_continuous<O: ContinuousOracle + ?Sized>(
    oracle: &O,
    samples: &[&CorpusSample],
    cfg: &TraceConfig,
    generator: serde_json::Value,
) -> Result<(TraceHeader, Vec<SampleTrace>), SimError> {
    cfg.check(Some(oracle.s_max()))?;
    let header = TraceHeader::new(Mode::Continuous, oracle.dim(), oracle.seq_len(), cfg.seed).with_generator(generator);
    let with_diff = cfg.include_diff && oracle.has_uncond();
    let traces = samples
        .par_iter()
        .map(|s| {
            let tokens = s.tokens.as_continuous().ok_or(SimError::ModeMismatch {
                model: Mode::Continuous,
                corpus: Mode::Discrete,
            })?;
            let n = tokens.len();
            let class = Some(s.class_label);
            let mask = sample_mask(cfg, &s.sample_id, n);
            let block = |cls: Option<u32>| {
                let z = oracle.predict_masked(tokens, &mask, cls);
                loss_block(oracle, cfg, &s.sample_id, tokens, &z, &mask, cls)
            };
            let cond = block(class);
            let uncond = with_diff.then(|| Block::Continuous(block(None)));
            let repeated_pass = cfg.include_repeated.then(|| {
                let doubled: Vec<Vec<f64>> = tokens.iter().chain(tokens).cloned().collect();
                let mask2: Vec<bool> = std::iter::repeat_n(false, n).chain(mask.iter().copied()).collect();
                let z2 = oracle.predict_masked(&doubled, &mask2, class);
                Block::Continuous(loss_block(oracle, cfg, &s.sample_id, tokens, &z2[n..], &mask, class))
            });
            let trace = SampleTrace {
                sample_id: s.sample_id.clone(),
                class_label: s.class_label,
                split: s.role.split(),
                tokens: Tokens::Continuous(tokens.to_vec()),
                cond: Block::Continuous(cond),
                uncond,
                diff: None,
                repeated_pass,
            };
            trace.validate(&header).map_err(|reason| {
                SimError::Trace(crate::trace::TraceError::InvalidRecord {
                    sample_id: s.sample_id.clone(),
                    line: None,
                    reason,
                })
            })?;
            Ok(trace)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok((header, traces))
}

/// Generator metadata recorded in trace headers.
pub fn generator_info(sim: &super::SimConfig, trace: &TraceConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "name": "toy_iar_sim",
        "version": env!("CARGO_PKG_VERSION"),
        "sim": sim,
        "trace": trace,
        "extra": extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{cfg_diff_transform, AttackError};
    use crate::oracle::ContinuousOracle;
    use crate::sim::continuous::fit_continuous;
    use crate::sim::discrete::fit_discrete;
    use crate::sim::{generate_corpus, SimConfig};

    fn disc() -> SimConfig {
        SimConfig {
            members_per_class: 10,
            nonmembers_per_class: 10,
            classes: 2,
            canaries: 1,
            duplication: 5,
            ..SimConfig::default()
        }
    }

    fn cont() -> SimConfig {
        SimConfig {
            mode: Mode::Continuous,
            fit_stride: 250,
            fit_draws: 2,
            ..disc()
        }
    }

    #[test]
    fn masked_count_clamps() {
        let c = |r| TraceConfig {
            mask_ratio: r,
            ..TraceConfig::default()
        };
        assert_eq!(c(0.95).masked_count(32), 30);
        assert_eq!(c(0.86).masked_count(32), 28);
        assert_eq!(c(0.9999).masked_count(32), 31);
        assert_eq!(c(0.001).masked_count(32), 1);
    }

    #[test]
    fn discrete_export_has_all_blocks_and_validates() {
        let corpus = generate_corpus(&disc()).unwrap();
        let m = fit_discrete(&corpus, &disc()).unwrap();
        let refs: Vec<&CorpusSample> = corpus.samples.iter().collect();
        let (h, traces) = export_discrete(&m, &refs, &TraceConfig::default(), serde_json::Value::Null).unwrap();
        assert_eq!(traces.len(), refs.len());
        for t in &traces {
            t.validate(&h).unwrap();
            assert!(t.uncond.is_some() && t.diff.is_some() && t.repeated_pass.is_some());
        }
    }

    #[test]
    fn no_dropout_means_no_diff() {
        let cfg = SimConfig { p_drop: 0.0, ..disc() };
        let corpus = generate_corpus(&cfg).unwrap();
        let m = fit_discrete(&corpus, &cfg).unwrap();
        let refs: Vec<&CorpusSample> = corpus.samples.iter().take(2).collect();
        let (_, traces) = export_discrete(&m, &refs, &TraceConfig::default(), serde_json::Value::Null).unwrap();
        assert!(traces[0].uncond.is_none());
        assert_eq!(cfg_diff_transform(&traces[0]).unwrap_err(), AttackError::MissingUncond);
    }

    #[test]
    fn near_full_mask_with_one_repeat() {
        let corpus = generate_corpus(&cont()).unwrap();
        let m = fit_continuous(&corpus, &cont()).unwrap();
        let refs: Vec<&CorpusSample> = corpus.samples.iter().take(3).collect();
        let cfg = TraceConfig {
            repeats: 1,
            mask_ratio: 0.9999,
            ..TraceConfig::default()
        };
        let (_, traces) = export_continuous(&m, &refs, &cfg, serde_json::Value::Null).unwrap();
        for t in &traces {
            let l = t.cond.as_continuous().unwrap();
            assert_eq!(l.losses.iter().filter(|x| x.len() == 1).count(), 31);
            assert_eq!(l.losses.iter().filter(|x| x.is_empty()).count(), 1);
        }
    }

    #[test]
    fn bad_trace_configs() {
        let corpus = generate_corpus(&cont()).unwrap();
        let m = fit_continuous(&corpus, &cont()).unwrap();
        let refs: Vec<&CorpusSample> = corpus.samples.iter().take(1).collect();
        for (cfg, want) in [
            (
                TraceConfig {
                    mask_ratio: 1.0,
                    ..TraceConfig::default()
                },
                "mask",
            ),
            (
                TraceConfig {
                    repeats: 0,
                    ..TraceConfig::default()
                },
                "repeats",
            ),
            (
                TraceConfig {
                    timestep: 1000,
                    ..TraceConfig::default()
                },
                "timestep",
            ),
        ] {
            let err = export_continuous(&m, &refs, &cfg, serde_json::Value::Null).unwrap_err();
            assert!(err.to_string().contains(want), "{err}");
        }
    }

    #[test]
    fn ideal_denoiser_matches_closed_form() {
        let corpus = generate_corpus(&cont()).unwrap();
        let m = fit_continuous(&corpus, &cont()).unwrap().with_ideal_denoiser();
        let refs: Vec<&CorpusSample> = corpus.samples.iter().take(4).collect();
        let cfg = TraceConfig {
            repeats: 3,
            timestep: 321,
            ..TraceConfig::default()
        };
        let (_, traces) = export_continuous(&m, &refs, &cfg, serde_json::Value::Null).unwrap();
        let ab = m.alpha_bar(321);
        for (s, t) in refs.iter().zip(&traces) {
            let tokens = s.tokens.as_continuous().unwrap();
            let l = t.cond.as_continuous().unwrap();
            let z = m.predict_masked(tokens, &l.mask_flag, Some(s.class_label));
            for i in 0..tokens.len() {
                if !l.mask_flag[i] {
                    continue;
                }
                let d2: f64 = tokens[i].iter().zip(&z[i]).map(|(a, b)| (a - b) * (a - b)).sum();
                let want = ab / (1.0 - ab) * d2;
                for &got in &l.losses[i] {
                    assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn export_is_deterministic() {
        let corpus = generate_corpus(&cont()).unwrap();
        let m = fit_continuous(&corpus, &cont()).unwrap();
        let refs: Vec<&CorpusSample> = corpus.samples.iter().collect();
        let cfg = TraceConfig {
            repeats: 4,
            ..TraceConfig::default()
        };
        let a = export_continuous(&m, &refs, &cfg, serde_json::Value::Null).unwrap();
        let b = export_continuous(&m, &refs, &cfg, serde_json::Value::Null).unwrap();
        assert_eq!(a, b);
    }
}
