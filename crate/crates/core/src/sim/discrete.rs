//! Class-conditional n-gram model with additive smoothing and label dropout.
//!
//! `P(x | ctx, c) = (count + lambda) / (total + lambda * V)`, where `ctx` is
//! the previous `order` tokens. Positions with fewer than `order` preceding
//! tokens use their own start-anchored tables. Each training copy also
//! counts toward the null-class table with probability `p_drop`.
//!
//! The n-gram is mixed with an in-context bigram cache built from the
//! context itself: `P = (1 - w) * P_ngram + w * P_cache`. The cache is what
//! makes a repeated sequence cheaper the second time.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, Corpus, SimConfig, SimError};
use crate::oracle::DiscreteOracle;
use crate::rng::{domain, hash_str, stream};

/// Longest supported n-gram context.
pub const MAX_ORDER: usize = 6;

type Key = u128;

fn pack(slot: usize, ctx: &[u32]) -> Key {
    let mut k = (slot as u128) << 112 | (ctx.len() as u128) << 96;
    for (i, &t) in ctx.iter().enumerate() {
        k |= (t as u128) << (16 * i);
    }
    k
}

fn unpack(k: Key) -> (usize, Vec<u32>) {
    let slot = (k >> 112) as usize;
    let len = ((k >> 96) & 0xffff) as usize;
    let ctx = (0..len).map(|i| ((k >> (16 * i)) & 0xffff) as u32).collect();
    (slot, ctx)
}

#[derive(Clone, Debug, PartialEq)]
struct Row {
    counts: Vec<u64>,
    total: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteToyModel {
    pub config: SimConfig,
    rows: HashMap<Key, Row>,
    has_uncond: bool,
}

/// One serialized count row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RowEntry {
    /// `None` is the null class.
    class: Option<u32>,
    context: Vec<u32>,
    /// Sparse `(token, count)` pairs.
    counts: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    kind: String,
    config: SimConfig,
    rows: Vec<RowEntry>,
}

const CHECKPOINT_KIND: &str = "discrete-ngram";

impl DiscreteToyModel {
    fn null_slot(&self) -> usize {
        self.config.classes
    }

    fn add(&mut self, slot: usize, ctx: &[u32], token: u32, n: u64) {
        let v = self.config.vocab;
        let row = self.rows.entry(pack(slot, ctx)).or_insert_with(|| Row {
            counts: vec![0; v],
            total: 0,
        });
        row.counts[token as usize] += n;
        row.total += n;
    }

    /// Smoothed n-gram probabilities without the cache.
    pub fn ngram_probs(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        let v = self.config.vocab;
        let lambda = self.config.smoothing;
        let slot = match class {
            Some(c) if (c as usize) < self.config.classes => c as usize,
            Some(_) => usize::from(u16::MAX),
            None => self.null_slot(),
        };
        let len = context.len().min(self.config.order);
        let row = self.rows.get(&pack(slot, &context[context.len() - len..]));
        let (counts, total) = match row {
            Some(r) => (Some(&r.counts), r.total),
            None => (None, 0),
        };
        let denom = total as f64 + lambda * v as f64;
        (0..v)
            .map(|i| (counts.map_or(0, |c| c[i]) as f64 + lambda) / denom)
            .collect()
    }

    /// Bigram distribution of the context: how often each token followed
    /// the last context token. Uniform when the last token has no successor.
    pub fn cache_probs(&self, context: &[u32]) -> Vec<f64> {
        let v = self.config.vocab;
        let mut counts = vec![0u64; v];
        let mut total = 0u64;
        if let Some(&prev) = context.last() {
            for w in context.windows(2) {
                if w[0] == prev {
                    counts[w[1] as usize] += 1;
                    total += 1;
                }
            }
        }
        if total == 0 {
            return vec![1.0 / v as f64; v];
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn probs(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        let p = self.ngram_probs(context, class);
        let w = self.config.icl_weight;
        if w == 0.0 {
            return p;
        }
        let cache = self.cache_probs(context);
        p.iter().zip(&cache).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn null_rows(&self) -> usize {
        self.rows.keys().filter(|&&k| unpack(k).0 == self.null_slot()).count()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let mut keys: Vec<&Key> = self.rows.keys().collect();
        keys.sort();
        let rows = keys
            .into_iter()
            .map(|k| {
                let (slot, context) = unpack(*k);
                let r = &self.rows[k];
                RowEntry {
                    class: (slot != self.null_slot()).then_some(slot as u32),
                    context,
                    counts: r
                        .counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(i, &c)| (i as u32, c))
                        .collect(),
                }
            })
            .collect();
        write_json(
            path.as_ref(),
            &Checkpoint {
                kind: CHECKPOINT_KIND.into(),
                config: self.config.clone(),
                rows,
            },
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let ck: Checkpoint = read_json(path.as_ref(), "model")?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(SimError::Config(format!(
                "checkpoint kind {} is not {CHECKPOINT_KIND}",
                ck.kind
            )));
        }
        ck.config.validate()?;
        let mut m = DiscreteToyModel {
            config: ck.config,
            rows: HashMap::new(),
            has_uncond: false,
        };
        for r in ck.rows {
            let slot = r.class.map_or(m.null_slot(), |c| c as usize);
            if slot > m.null_slot()
                || r.context.len() > m.config.order
                || r.context
                    .iter()
                    .chain(r.counts.iter().map(|(t, _)| t))
                    .any(|&t| t as usize >= m.config.vocab)
            {
                return Err(SimError::Config(format!(
                    "checkpoint row out of range: {:?}",
                    r.context
                )));
            }
            m.has_uncond |= r.class.is_none();
            for (t, c) in r.counts {
                m.add(slot, &r.context, t, c);
            }
        }
        Ok(m)
    }
}

impl DiscreteOracle for DiscreteToyModel {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn has_uncond(&self) -> bool {
        self.has_uncond
    }

    fn logits(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        self.log_probs(context, class)
    }

    fn log_probs(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        self.probs(context, class).into_iter().map(f64::ln).collect()
    }
}

/// Fits the n-gram on the training samples of `corpus`. Shape fields
/// (vocab, classes, sequence length) come from the corpus; the fitting
/// fields (order, smoothing, dropout, cache weight, seed) from `cfg`.
pub fn fit_discrete(corpus: &Corpus, cfg: &SimConfig) -> Result<DiscreteToyModel, SimError> {
    let config = SimConfig {
        mode: corpus.config.mode,
        vocab: corpus.config.vocab,
        seq_len: corpus.config.seq_len,
        classes: corpus.config.classes,
        ..cfg.clone()
    };
    config.validate()?;
    let mut model = DiscreteToyModel {
        config,
        rows: HashMap::new(),
        has_uncond: false,
    };
    let order = model.config.order;
    let null = model.null_slot();
    let mut any = false;
    for s in corpus.training() {
        any = true;
        let copies = u64::from(s.copies.max(1));
        let mut rng = stream(model.config.seed, &[domain::LABEL_DROPOUT, hash_str(&s.sample_id)]);
        let dropped = (0..copies)
            .filter(|_| rng.random::<f64>() < model.config.p_drop)
            .count() as u64;
        let seq = &s.discrete;
        for n in 0..seq.len() {
            let ctx = &seq[n.saturating_sub(order)..n];
            model.add(s.class_label as usize, ctx, seq[n], copies);
            if dropped > 0 {
                model.add(null, ctx, seq[n], dropped);
            }
        }
        model.has_uncond |= dropped > 0;
    }
    if !any {
        return Err(SimError::NoMembers);
    }
    Ok(model)
}
