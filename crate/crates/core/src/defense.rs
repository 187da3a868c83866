//! Output noising and the privacy/utility sweep.
//!
//! The noisy wrappers add Gaussian noise to every logit vector (discrete) or
//! every predicted token (continuous) before any downstream use. Noise is a
//! deterministic function of the query, so repeated queries agree.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::catalog::{score_all, AttackId};
use crate::di::{build_features, default_grid, minimal_p_search, DiError, SearchConfig};
use crate::extraction::{
    candidate_targets, extract, select_candidates, ExtractionError, LabeledSequence, Model, TokenSimilarity,
};
use crate::metrics::{randomized_metric, Metric, MetricError, MetricSummary};
use crate::oracle::{ContinuousOracle, DiscreteOracle};
use crate::rng::{domain, fold_key, stream};
use crate::sim::export::{export_continuous, export_discrete, TraceConfig};
use crate::sim::{Corpus, CorpusSample, SimError};
use crate::trace::{Block, Mode, SampleTrace, Split};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("sigma must be finite and >= 0, got {0}")]
    Sigma(f64),
    #[error("noise target {target:?} does not apply to a {mode:?} model")]
    TargetMismatch { target: DefenseTarget, mode: Mode },
    #[error("sigmas must be sorted ascending")]
    UnsortedSigmas,
    #[error("attack {0} produced no finite scores")]
    NoScores(String),
    #[error("corpus mode {corpus:?} does not match model mode {model:?}")]
    ModeMismatch { model: Mode, corpus: Mode },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Di(#[from] DiError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseTarget {
    Logits,
    Tokens,
}

impl DefenseTarget {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Discrete => DefenseTarget::Logits,
            Mode::Continuous => DefenseTarget::Tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub sigma: f64,
    pub target: DefenseTarget,
    pub seed: u64,
}

impl DefenseConfig {
    fn check(&self, mode: Mode) -> Result<(), DefenseError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DefenseError::Sigma(self.sigma));
        }
        if self.target != DefenseTarget::for_mode(mode) {
            return Err(DefenseError::TargetMismatch {
                target: self.target,
                mode,
            });
        }
        Ok(())
    }
}

fn class_slot(class: Option<u32>) -> u64 {
    class.map_or(u64::MAX, u64::from)
}

/// Discrete oracle with `N(0, sigma)` noise on every logit.
pub struct NoisyDiscrete<'a> {
    inner: &'a dyn DiscreteOracle,
    sigma: f64,
    seed: u64,
}

pub fn wrap_discrete<'a>(
    inner: &'a dyn DiscreteOracle,
    cfg: &DefenseConfig,
) -> Result<NoisyDiscrete<'a>, DefenseError> {
    cfg.check(Mode::Discrete)?;
    Ok(NoisyDiscrete {
        inner,
        sigma: cfg.sigma,
        seed: cfg.seed,
    })
}

impl DiscreteOracle for NoisyDiscrete<'_> {
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn has_uncond(&self) -> bool {
        self.inner.has_uncond()
    }
    fn logits(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        let mut logits = self.inner.logits(context, class);
        if self.sigma == 0.0 {
            return logits;
        }
        // The context determines the sequence prefix and the position.
        let words: Vec<u64> = context.iter().map(|&t| u64::from(t)).collect();
        let prefix = fold_key(context.len() as u64, &words);
        let mut rng = stream(self.seed, &[domain::DEFENSE_NOISE, class_slot(class), prefix]);
        for l in &mut logits {
            *l += self.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        logits
    }
    fn log_probs(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        if self.sigma == 0.0 {
            return self.inner.log_probs(context, class);
        }
        crate::oracle::log_softmax(&self.logits(context, class))
    }
}

/// Continuous oracle with `N(0, sigma)` noise on every predicted token.
pub struct NoisyContinuous<'a> {
    inner: &'a dyn ContinuousOracle,
    sigma: f64,
    seed: u64,
}

pub fn wrap_continuous<'a>(
    inner: &'a dyn ContinuousOracle,
    cfg: &DefenseConfig,
) -> Result<NoisyContinuous<'a>, DefenseError> {
    cfg.check(Mode::Continuous)?;
    Ok(NoisyContinuous {
        inner,
        sigma: cfg.sigma,
        seed: cfg.seed,
    })
}

impl ContinuousOracle for NoisyContinuous<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn has_uncond(&self) -> bool {
        self.inner.has_uncond()
    }
    fn s_max(&self) -> u32 {
        self.inner.s_max()
    }
    fn alpha_bar(&self, s: u32) -> f64 {
        self.inner.alpha_bar(s)
    }
    fn predict_masked(&self, tokens: &[Vec<f64>], mask: &[bool], class: Option<u32>) -> Vec<Vec<f64>> {
        let mut pred = self.inner.predict_masked(tokens, mask, class);
        if self.sigma == 0.0 {
            return pred;
        }
        let words: Vec<u64> = tokens
            .iter()
            .zip(mask)
            .filter(|(_, &hidden)| !hidden)
            .flat_map(|(t, _)| t.iter().map(|x| x.to_bits()))
            .collect();
        let visible = fold_key(mask.len() as u64, &words);
        for (i, z) in pred.iter_mut().enumerate() {
            let mut rng = stream(
                self.seed,
                &[domain::DEFENSE_NOISE, class_slot(class), visible, i as u64],
            );
            for v in z.iter_mut() {
                *v += self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        pred
    }
    fn predict_noise(&self, noised: &[f64], z: &[f64], s: u32, class: Option<u32>) -> Vec<f64> {
        self.inner.predict_noise(noised, z, s, class)
    }
}

/// Parameters for [`sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    /// Attack whose TPR@1% FPR is reported.
    pub attack: AttackId,
    /// Attacks aggregated for dataset inference; empty means all scored.
    pub di_attacks: Vec<AttackId>,
    pub trace: TraceConfig,
    pub trials: usize,
    pub subsample_fraction: f64,
    pub di_trials: usize,
    pub alpha: f64,
    pub required_rate: f64,
    pub prefix_len: usize,
    pub tau: f64,
    pub top_n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub tpr_at_1fpr: MetricSummary,
    pub di_p_min: Option<usize>,
    pub extracted_count: usize,
    /// Mean per-token loss of nonmembers under the defended model (NLL in
    /// discrete mode, diffusion loss in continuous mode).
    pub utility_proxy: f64,
}

/// Mean nonmember per-token loss.
pub fn utility_proxy(traces: &[SampleTrace]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in traces.iter().filter(|t| t.split == Split::Nonmember) {
        match &t.cond {
            Block::Discrete(stats) => {
                for s in stats {
                    total -= s.loglik_true;
                    count += 1;
                }
            }
            Block::Continuous(rep) => {
                for (losses, &masked) in rep.losses.iter().zip(&rep.mask_flag) {
                    if masked && !losses.is_empty() {
                        total += losses.iter().sum::<f64>() / losses.len() as f64;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

fn export(model: Model, samples: &[&CorpusSample], cfg: &TraceConfig) -> Result<Vec<SampleTrace>, SimError> {
    Ok(match model {
        Model::Discrete(o) => export_discrete(o, samples, cfg, serde_json::Value::Null)?.1,
        Model::Continuous(o) => export_continuous(o, samples, cfg, serde_json::Value::Null)?.1,
    })
}

/// Evaluates one defended model: TPR, DI, extraction and utility.
pub fn evaluate_point(
    model: Model,
    corpus: &Corpus,
    sigma: f64,
    cfg: &SweepConfig,
) -> Result<SweepPoint, DefenseError> {
    if model.mode() != corpus.mode() {
        return Err(DefenseError::ModeMismatch {
            model: model.mode(),
            corpus: corpus.mode(),
        });
    }
    let eval: Vec<&CorpusSample> = corpus.evaluation().collect();
    let traces = export(model, &eval, &cfg.trace)?;

    let mut attacks = vec![cfg.attack];
    attacks.extend(cfg.di_attacks.iter().filter(|a| **a != cfg.attack).cloned());
    let table = score_all(&traces, model.mode(), &attacks);
    let members = table.scores(&cfg.attack, Split::Member);
    let nonmembers = table.scores(&cfg.attack, Split::Nonmember);
    if members.is_empty() || nonmembers.is_empty() {
        return Err(DefenseError::NoScores(cfg.attack.key()));
    }
    let tpr = randomized_metric(
        &members,
        &nonmembers,
        Metric::TPR_AT_1PCT,
        cfg.trials,
        cfg.subsample_fraction,
        cfg.seed,
    )?;

    let ids = |v: &[(String, f64)]| v.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>();
    let features = build_features(&table, &ids(&members), &ids(&nonmembers), &cfg.di_attacks)?;
    let search = SearchConfig {
        grid: default_grid(members.len().min(nonmembers.len())),
        trials: cfg.di_trials,
        alpha: cfg.alpha,
        required_rate: cfg.required_rate,
        seed: cfg.seed,
    };
    let di = minimal_p_search(&features, &search)?;

    let training: Vec<LabeledSequence> = corpus.training().map(LabeledSequence::from).collect();
    let candidates = select_candidates(model, &training, cfg.top_n, cfg.seed)?;
    let targets = candidate_targets(&candidates, &training)?;
    let verdicts = extract(model, &targets, cfg.prefix_len, cfg.tau, &TokenSimilarity)?;

    Ok(SweepPoint {
        sigma,
        tpr_at_1fpr: tpr,
        di_p_min: di.p_min,
        extracted_count: verdicts.iter().filter(|v| v.memorized).count(),
        utility_proxy: utility_proxy(&traces),
    })
}

/// Re-runs the attack pipelines through the noised model at every sigma.
pub fn sweep(base: Model, corpus: &Corpus, cfg: &SweepConfig) -> Result<Vec<SweepPoint>, DefenseError> {
    if cfg
        .sigmas
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt()))
    {
        return Err(DefenseError::UnsortedSigmas);
    }
    let target = DefenseTarget::for_mode(base.mode());
    cfg.sigmas
        .iter()
        .map(|&sigma| {
            let dc = DefenseConfig {
                sigma,
                target,
                seed: cfg.seed,
            };
            match base {
                Model::Discrete(o) => {
                    let noisy = wrap_discrete(o, &dc)?;
                    evaluate_point(Model::Discrete(&noisy), corpus, sigma, cfg)
                }
                Model::Continuous(o) => {
                    let noisy = wrap_continuous(o, &dc)?;
                    evaluate_point(Model::Continuous(&noisy), corpus, sigma, cfg)
                }
            }
        })
        .collect()
}

/// One row per sigma.
pub fn write_sweep_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sigma",
        "tpr_at_1fpr_mean",
        "tpr_at_1fpr_std",
        "di_p_min",
        "extracted_count",
        "utility_proxy_nll",
    ])?;
    for p in points {
        w.write_record([
            p.sigma.to_string(),
            p.tpr_at_1fpr.mean.to_string(),
            p.tpr_at_1fpr.std.to_string(),
            p.di_p_min.map_or("not found".to_string(), |v| v.to_string()),
            p.extracted_count.to_string(),
            p.utility_proxy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
