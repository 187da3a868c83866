//! Seedable toy image-autoregressive testbed.
//!
//! A class-conditional Markov source produces member and nonmember sequences
//! from one distribution; canaries are uniform-random sequences duplicated
//! inside the member set. Two models can be fitted on the members: a
//! class-conditional n-gram with label dropout ([`discrete`]) and a
//! per-token diffusion-loss model ([`continuous`]). [`export`] turns either
//! into trace files.

pub mod continuous;
pub mod discrete;
pub mod export;
pub mod untrained;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream};
use crate::trace::{Mode, Split, Tokens};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corpus has no members")]
    NoMembers,
    #[error("class {class}, position {position}: {count} training tokens, need at least 2")]
    TooFewTokens { class: u32, position: usize, count: u64 },
    #[error("model is {model:?} but corpus is {corpus:?}")]
    ModeMismatch { model: Mode, corpus: Mode },
    #[error("mask ratio {0} outside (0, 1)")]
    MaskRatio(f64),
    #[error("repeats must be >= 1")]
    NoRepeats,
    #[error("timestep {s} outside [0, {s_max})")]
    Timestep { s: u32, s_max: u32 },
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed {what} file {path}: {source}")]
    Parse {
        what: &'static str,
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mode: Mode,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub members_per_class: usize,
    pub nonmembers_per_class: usize,
    pub canaries: usize,
    /// Copies of each canary in the training set.
    pub duplication: usize,
    /// n-gram context length (2 = trigram).
    pub order: usize,
    /// Additive smoothing; smaller overfits more.
    pub smoothing: f64,
    /// Label-dropout probability per training copy.
    pub p_drop: f64,
    /// Weight of the in-context bigram cache mixed into the n-gram.
    pub icl_weight: f64,
    /// Dirichlet concentration of the Markov source rows.
    pub source_concentration: f64,
    /// Weight of a class-shared transition matrix mixed into every class.
    pub class_sharing: f64,
    /// Each sequence steps to a neighbouring token id (previous token +/- 1,
    /// modulo the vocabulary) with a probability drawn uniformly from
    /// `[0, walk_max]`, and follows its class chain otherwise.
    pub walk_max: f64,
    /// Continuous token dimension.
    pub dim: usize,
    /// Diffusion steps.
    pub s_max: u32,
    /// Std of the per-token jitter around the token embedding.
    pub token_noise: f64,
    /// Denoiser coefficients are fitted every `fit_stride` timesteps and
    /// interpolated in between.
    pub fit_stride: u32,
    /// Noise draws per training token per fitted timestep.
    pub fit_draws: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: Mode::Discrete,
            vocab: 64,
            seq_len: 32,
            classes: 8,
            members_per_class: 256,
            nonmembers_per_class: 256,
            canaries: 10,
            duplication: 100,
            order: 2,
            smoothing: 0.1,
            p_drop: 0.1,
            icl_weight: 0.1,
            source_concentration: 0.2,
            class_sharing: 0.5,
            walk_max: 0.9,
            dim: 2,
            s_max: 1000,
            token_noise: 0.5,
            fit_stride: 50,
            fit_draws: 16,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        for (name, v) in [
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
            ("members_per_class", self.members_per_class),
            ("nonmembers_per_class", self.nonmembers_per_class),
            ("duplication", self.duplication),
            ("order", self.order),
            ("dim", self.dim),
            ("fit_draws", self.fit_draws),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.vocab > u16::MAX as usize + 1 {
            return bad(format!("vocab {} exceeds 65536", self.vocab));
        }
        if self.order > discrete::MAX_ORDER {
            return bad(format!("order {} exceeds {}", self.order, discrete::MAX_ORDER));
        }
        if self.seq_len < 3 {
            return bad("seq_len must be >= 3".into());
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return bad(format!("smoothing must be > 0, got {}", self.smoothing));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(0.0..1.0).contains(&self.icl_weight) {
            return bad(format!("icl_weight must lie in [0, 1), got {}", self.icl_weight));
        }
        if self.source_concentration.is_nan() || self.source_concentration <= 0.0 {
            return bad("source_concentration must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.class_sharing) {
            return bad(format!("class_sharing must lie in [0, 1], got {}", self.class_sharing));
        }
        if !(0.0..1.0).contains(&self.walk_max) {
            return bad(format!("walk_max must lie in [0, 1), got {}", self.walk_max));
        }
        if self.token_noise.is_nan() || self.token_noise < 0.0 {
            return bad("token_noise must be >= 0".into());
        }
        if self.s_max < 2 || self.fit_stride == 0 {
            return bad("s_max must be >= 2 and fit_stride >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Member,
    Nonmember,
    /// Planted member, duplicated in training.
    Canary,
}

impl Role {
    pub fn split(self) -> Split {
        match self {
            Role::Member | Role::Canary => Split::Member,
            Role::Nonmember => Split::Nonmember,
        }
    }

    pub fn is_training(self) -> bool {
        self != Role::Nonmember
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub sample_id: String,
    pub class_label: u32,
    pub role: Role,
    /// Copies in the training set (0 for nonmembers).
    pub copies: u32,
    /// Source sequence; continuous tokens embed it.
    pub discrete: Vec<u32>,
    pub tokens: Tokens,
}

/// Labeled corpus, sorted by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: SimConfig,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &CorpusSample> {
        self.samples.iter().filter(move |s| s.role == role)
    }

    /// Training samples: members and canaries.
    pub fn training(&self) -> impl Iterator<Item = &CorpusSample> {
        self.samples.iter().filter(|s| s.role.is_training())
    }

    /// Members and nonmembers, canaries excluded.
    pub fn evaluation(&self) -> impl Iterator<Item = &CorpusSample> {
        self.samples.iter().filter(|s| s.role != Role::Canary)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        write_json(path.as_ref(), self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SimError> {
        read_json(path.as_ref(), "corpus")
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let io = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, value).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T, SimError> {
    let f = File::open(path).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| SimError::Parse {
        what,
        path: path.display().to_string(),
        source,
    })
}

const KIND_SOURCE: u64 = 1;
const KIND_MEMBER: u64 = 2;
const KIND_NONMEMBER: u64 = 3;
const KIND_CANARY: u64 = 4;
const KIND_EMBED: u64 = 5;
const KIND_JITTER: u64 = 6;

/// Class-conditional first-order Markov source.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    pub initial: Vec<Vec<f64>>,
    /// `transition[c][a][b]` = P(b | a, class c).
    pub transition: Vec<Vec<Vec<f64>>>,
    pub walk_max: f64,
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut v: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    v
}

fn draw<R: Rng>(rng: &mut R, probs: &[f64]) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left `u` above the cumulative sum: take the last nonzero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

impl MarkovSource {
    pub fn new(cfg: &SimConfig) -> Self {
        let v = cfg.vocab;
        let mut rng = stream(cfg.seed, &[domain::CORPUS, KIND_SOURCE, u64::MAX]);
        let shared: Vec<Vec<f64>> = (0..v)
            .map(|_| dirichlet(&mut rng, cfg.source_concentration, v))
            .collect();
        let w = cfg.class_sharing;
        let mut initial = Vec::with_capacity(cfg.classes);
        let mut transition = Vec::with_capacity(cfg.classes);
        for c in 0..cfg.classes as u64 {
            let mut rng = stream(cfg.seed, &[domain::CORPUS, KIND_SOURCE, c]);
            initial.push(dirichlet(&mut rng, cfg.source_concentration, v));
            let rows = shared
                .iter()
                .map(|base| {
                    let own = dirichlet(&mut rng, cfg.source_concentration, v);
                    own.iter().zip(base).map(|(o, b)| (1.0 - w) * o + w * b).collect()
                })
                .collect();
            transition.push(rows);
        }
        MarkovSource {
            initial,
            transition,
            walk_max: cfg.walk_max,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, class: usize, len: usize) -> Vec<u32> {
        let v = self.initial[class].len() as u32;
        let rho = self.walk_max * rng.random::<f64>();
        let mut seq = Vec::with_capacity(len);
        seq.push(draw(rng, &self.initial[class]));
        while seq.len() < len {
            let prev = *seq.last().expect("non-empty");
            let next = if rng.random::<f64>() < rho {
                if rng.random::<bool>() {
                    (prev + 1) % v
                } else {
                    (prev + v - 1) % v
                }
            } else {
                draw(rng, &self.transition[class][prev as usize])
            };
            seq.push(next);
        }
        seq
    }
}

/// Fixed random embedding of the vocabulary used for continuous tokens.
pub fn embedding(cfg: &SimConfig) -> Vec<Vec<f64>> {
    let mut rng = stream(cfg.seed, &[domain::CORPUS, KIND_EMBED]);
    (0..cfg.vocab)
        .map(|_| (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn embed(cfg: &SimConfig, table: &[Vec<f64>], seq: &[u32], key: &[u64]) -> Vec<Vec<f64>> {
    let mut words = vec![domain::CORPUS, KIND_JITTER];
    words.extend_from_slice(key);
    let mut rng = stream(cfg.seed, &words);
    seq.iter()
        .map(|&x| {
            table[x as usize]
                .iter()
                .map(|&e| {
                    let z: f64 = rng.sample(StandardNormal);
                    e + cfg.token_noise * z
                })
                .collect()
        })
        .collect()
}

/// Generates the labeled corpus. Every sequence has its own RNG stream, so a
/// sample does not change when unrelated counts change.
pub fn generate_corpus(cfg: &SimConfig) -> Result<Corpus, SimError> {
    cfg.validate()?;
    let source = MarkovSource::new(cfg);
    let table = (cfg.mode == Mode::Continuous).then(|| embedding(cfg));
    let make = |id: String, class: u32, role: Role, copies: u32, seq: Vec<u32>, key: [u64; 3]| {
        let tokens = match &table {
            Some(t) => Tokens::Continuous(embed(cfg, t, &seq, &key)),
            None => Tokens::Discrete(seq.clone()),
        };
        CorpusSample {
            sample_id: id,
            class_label: class,
            role,
            copies,
            discrete: seq,
            tokens,
        }
    };

    let mut samples = Vec::new();
    for c in 0..cfg.classes {
        for (kind, role, count, prefix) in [
            (KIND_MEMBER, Role::Member, cfg.members_per_class, "mem"),
            (KIND_NONMEMBER, Role::Nonmember, cfg.nonmembers_per_class, "non"),
        ] {
            for i in 0..count {
                let key = [kind, c as u64, i as u64];
                let mut rng = stream(cfg.seed, &[domain::CORPUS, key[0], key[1], key[2]]);
                let seq = source.sample(&mut rng, c, cfg.seq_len);
                let copies = u32::from(role == Role::Member);
                samples.push(make(
                    format!("{prefix}-c{c:03}-{i:05}"),
                    c as u32,
                    role,
                    copies,
                    seq,
                    key,
                ));
            }
        }
    }
    for i in 0..cfg.canaries {
        let class = (i % cfg.classes) as u32;
        let key = [KIND_CANARY, class as u64, i as u64];
        let mut rng = stream(cfg.seed, &[domain::CORPUS, key[0], key[1], key[2]]);
        let seq: Vec<u32> = (0..cfg.seq_len)
            .map(|_| rng.random_range(0..cfg.vocab as u32))
            .collect();
        samples.push(make(
            format!("can-{i:04}"),
            class,
            Role::Canary,
            cfg.duplication as u32,
            seq,
            key,
        ));
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(Corpus {
        config: cfg.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            members_per_class: 20,
            nonmembers_per_class: 20,
            classes: 3,
            canaries: 4,
            duplication: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn counts_match_config() {
        let cfg = SimConfig { canaries: 0, ..small() };
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.with_role(Role::Member).count(), 60);
        assert_eq!(c.with_role(Role::Nonmember).count(), 60);
        assert_eq!(c.with_role(Role::Canary).count(), 0);
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.with_role(Role::Canary).count(), 4);
        assert!(c.with_role(Role::Canary).all(|s| s.copies == 5));
        assert!(c.samples.windows(2).all(|w| w[0].sample_id < w[1].sample_id));
        assert!(c
            .samples
            .iter()
            .all(|s| s.discrete.len() == 32 && s.discrete.iter().all(|&x| x < 64)));
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = SimConfig { seed: 8, ..small() };
        assert_ne!(generate_corpus(&small()).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn samples_are_stable_under_count_changes() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&SimConfig {
            members_per_class: 25,
            ..small()
        })
        .unwrap();
        let find = |c: &Corpus, id: &str| c.samples.iter().find(|s| s.sample_id == id).cloned();
        assert_eq!(find(&a, "mem-c001-00003"), find(&b, "mem-c001-00003"));
        assert_eq!(find(&a, "non-c002-00019"), find(&b, "non-c002-00019"));
    }

    #[test]
    fn continuous_tokens_embed_the_source() {
        let cfg = SimConfig {
            mode: Mode::Continuous,
            token_noise: 0.0,
            ..small()
        };
        let c = generate_corpus(&cfg).unwrap();
        let table = embedding(&cfg);
        for s in &c.samples {
            let t = s.tokens.as_continuous().unwrap();
            for (v, &x) in t.iter().zip(&s.discrete) {
                assert_eq!(v, &table[x as usize]);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SimConfig {
                smoothing: 0.0,
                ..small()
            },
            SimConfig { p_drop: 1.0, ..small() },
            SimConfig { vocab: 0, ..small() },
            SimConfig { order: 9, ..small() },
        ] {
            assert!(matches!(generate_corpus(&cfg), Err(SimError::Config(_))));
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&SimConfig {
            mode: Mode::Continuous,
            ..small()
        })
        .unwrap();
        let path = dir.path().join("corpus.json");
        c.write(&path).unwrap();
        assert_eq!(Corpus::read(&path).unwrap(), c);
    }
}
