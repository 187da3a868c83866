//! Token-trace data model and the `iartrace/1` file format.
//!
//! A trace file is UTF-8 text, one JSON object per line. The first line is a
//! [`TraceHeader`]; every following line is one [`SampleTrace`]. A path ending
//! in `.gz` is read and written through gzip (DEFLATE).
//!
//! All log-probabilities are natural logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_TAG: &str = "iartrace/1";

/// Percentiles stored in [`TokenStats::prob_quantiles`] by the built-in generators.
pub const QUANTILE_KEYS: [u32; 5] = [10, 20, 30, 40, 50];

/// Slack allowed on `entropy <= ln V` for floating-point rounding.
const ENTROPY_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing header: line 1 is not an {FORMAT_TAG} header")]
    MissingHeader,
    #[error("unsupported trace format tag {0:?}")]
    UnsupportedFormat(String),
    #[error("line {line}: sample {sample_id:?} does not match the header mode ({mode:?})")]
    ModeMismatch { line: usize, sample_id: String, mode: Mode },
    #[error("line {line}: truncated record")]
    Truncated { line: usize },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid record {sample_id:?}{}: {reason}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    InvalidRecord {
        sample_id: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Member,
    Nonmember,
    Suspect,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Member => "member",
            Split::Nonmember => "nonmember",
            Split::Suspect => "suspect",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "member" => Ok(Split::Member),
            "nonmember" => Ok(Split::Nonmember),
            "suspect" => Ok(Split::Suspect),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Summary of the model's next-token distribution at one position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub loglik_true: f64,
    pub max_other_loglik: f64,
    pub vocab_mean: f64,
    pub vocab_std: f64,
    pub entropy: f64,
    /// k -> k-th percentile (nearest rank) of the vocabulary probabilities.
    pub prob_quantiles: BTreeMap<u32, f64>,
}

impl TokenStats {
    /// Computes the statistics from a full vector of log-probabilities.
    ///
    /// `quantiles` lists the percentiles to store.
    pub fn from_log_probs(log_probs: &[f64], true_token: usize, quantiles: &[u32]) -> Self {
        let v = log_probs.len();
        assert!(true_token < v, "token {true_token} outside vocabulary of {v}");
        let loglik_true = log_probs[true_token].min(0.0);
        let max_other_loglik = log_probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != true_token)
            .map(|(_, &lp)| lp)
            .fold(f64::NEG_INFINITY, f64::max)
            .min(0.0);
        let (vocab_mean, vocab_std) = mean_and_pop_std(log_probs);
        let mut entropy = 0.0;
        for &lp in log_probs {
            let p = lp.exp();
            if p > 0.0 {
                entropy -= p * lp;
            }
        }
        let entropy = entropy.clamp(0.0, (v as f64).ln());
        let mut probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        probs.sort_by(f64::total_cmp);
        let prob_quantiles = quantiles.iter().map(|&k| (k, nearest_rank(&probs, k))).collect();
        TokenStats {
            loglik_true,
            max_other_loglik,
            vocab_mean,
            vocab_std,
            entropy,
            prob_quantiles,
        }
    }

    fn check(&self, vocab: usize) -> Result<(), String> {
        let fields = [
            ("loglik_true", self.loglik_true),
            ("max_other_loglik", self.max_other_loglik),
            ("vocab_mean", self.vocab_mean),
            ("vocab_std", self.vocab_std),
            ("entropy", self.entropy),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.loglik_true > 0.0 {
            return Err(format!("loglik_true {} > 0", self.loglik_true));
        }
        if self.max_other_loglik > 0.0 {
            return Err(format!("max_other_loglik {} > 0", self.max_other_loglik));
        }
        if self.vocab_std < 0.0 {
            return Err(format!("vocab_std {} < 0", self.vocab_std));
        }
        let max_entropy = (vocab as f64).ln() + ENTROPY_SLACK;
        if self.entropy < 0.0 || self.entropy > max_entropy {
            return Err(format!("entropy {} outside [0, ln {vocab}]", self.entropy));
        }
        let mut prev = f64::NEG_INFINITY;
        for (&k, &q) in &self.prob_quantiles {
            if k == 0 || k > 100 {
                return Err(format!("quantile key {k} outside 1..=100"));
            }
            if !q.is_finite() || !(0.0..=1.0).contains(&q) {
                return Err(format!("quantile {k} value {q} outside [0, 1]"));
            }
            if q < prev {
                return Err(format!("prob_quantiles decrease at k={k}"));
            }
            prev = q;
        }
        Ok(())
    }
}

/// Statistics of the difference vector `log p(.|c) - log p(.|c_null)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffTokenStats {
    pub diff_true: f64,
    pub diff_max_other: f64,
    pub diff_mean: f64,
    pub diff_std: f64,
}

impl DiffTokenStats {
    pub fn from_log_probs(cond: &[f64], uncond: &[f64], true_token: usize) -> Self {
        assert_eq!(cond.len(), uncond.len());
        let diff: Vec<f64> = cond.iter().zip(uncond).map(|(c, u)| c - u).collect();
        let diff_max_other = diff
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != true_token)
            .map(|(_, &d)| d)
            .fold(f64::NEG_INFINITY, f64::max);
        let (diff_mean, diff_std) = mean_and_pop_std(&diff);
        DiffTokenStats {
            diff_true: diff[true_token],
            diff_max_other,
            diff_mean,
            diff_std,
        }
    }

    fn check(&self) -> Result<(), String> {
        for (name, v) in [
            ("diff_true", self.diff_true),
            ("diff_max_other", self.diff_max_other),
            ("diff_mean", self.diff_mean),
            ("diff_std", self.diff_std),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.diff_std < 0.0 {
            return Err(format!("diff_std {} < 0", self.diff_std));
        }
        Ok(())
    }
}

/// Repeated diffusion losses for one sequence at a fixed timestep.
///
/// Tokens with `mask_flag` set carry exactly `R >= 1` losses; the others
/// carry none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRepeats {
    pub timestep: u32,
    pub losses: Vec<Vec<f64>>,
    pub mask_flag: Vec<bool>,
}

impl LossRepeats {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Repeat count shared by every masked token.
    pub fn repeats(&self) -> Option<usize> {
        self.losses
            .iter()
            .zip(&self.mask_flag)
            .find(|(_, &m)| m)
            .map(|(l, _)| l.len())
    }

    fn check(&self, n: usize) -> Result<(), String> {
        if self.losses.len() != n || self.mask_flag.len() != n {
            return Err(format!(
                "loss block has {} tokens / {} mask flags, expected {n}",
                self.losses.len(),
                self.mask_flag.len()
            ));
        }
        let r = self
            .repeats()
            .ok_or_else(|| "loss block has no masked tokens".to_string())?;
        if r == 0 {
            return Err("repeat count R must be >= 1".into());
        }
        for (i, (ls, &m)) in self.losses.iter().zip(&self.mask_flag).enumerate() {
            if m && ls.len() != r {
                return Err(format!("token {i} has {} repeats, expected {r}", ls.len()));
            }
            if !m && !ls.is_empty() {
                return Err(format!("unmasked token {i} carries losses"));
            }
            if let Some(bad) = ls.iter().find(|l| !l.is_finite() || **l < 0.0) {
                return Err(format!("token {i} has invalid loss {bad}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tokens {
    Discrete(Vec<u32>),
    Continuous(Vec<Vec<f64>>),
}

impl Tokens {
    pub fn len(&self) -> usize {
        match self {
            Tokens::Discrete(t) => t.len(),
            Tokens::Continuous(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> Mode {
        match self {
            Tokens::Discrete(_) => Mode::Discrete,
            Tokens::Continuous(_) => Mode::Continuous,
        }
    }

    pub fn as_discrete(&self) -> Option<&[u32]> {
        match self {
            Tokens::Discrete(t) => Some(t),
            Tokens::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&[Vec<f64>]> {
        match self {
            Tokens::Continuous(t) => Some(t),
            Tokens::Discrete(_) => None,
        }
    }

    /// First `len` tokens.
    pub fn prefix(&self, len: usize) -> Tokens {
        match self {
            Tokens::Discrete(t) => Tokens::Discrete(t[..len.min(t.len())].to_vec()),
            Tokens::Continuous(t) => Tokens::Continuous(t[..len.min(t.len())].to_vec()),
        }
    }
}

/// A per-token statistics block: TokenStats in discrete mode, LossRepeats in
/// continuous mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Block {
    Discrete(Vec<TokenStats>),
    Continuous(LossRepeats),
}

// Dispatch on JSON shape: untagged buffering cannot parse integer map keys.
impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = serde_json::Value::deserialize(d)?;
        if v.is_array() {
            serde_json::from_value(v).map(Block::Discrete).map_err(D::Error::custom)
        } else {
            serde_json::from_value(v)
                .map(Block::Continuous)
                .map_err(D::Error::custom)
        }
    }
}

impl Block {
    pub fn mode(&self) -> Mode {
        match self {
            Block::Discrete(_) => Mode::Discrete,
            Block::Continuous(_) => Mode::Continuous,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Block::Discrete(s) => s.len(),
            Block::Continuous(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_discrete(&self) -> Option<&[TokenStats]> {
        match self {
            Block::Discrete(s) => Some(s),
            Block::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&LossRepeats> {
        match self {
            Block::Continuous(l) => Some(l),
            Block::Discrete(_) => None,
        }
    }

    fn check(&self, header: &TraceHeader, name: &str) -> Result<(), String> {
        if self.mode() != header.mode {
            return Err(format!(
                "{name} block is {:?}, header is {:?}",
                self.mode(),
                header.mode
            ));
        }
        if self.len() != header.seq_len {
            return Err(format!(
                "{name} block has {} tokens, header seq_len is {}",
                self.len(),
                header.seq_len
            ));
        }
        match self {
            Block::Discrete(stats) => {
                for (i, s) in stats.iter().enumerate() {
                    s.check(header.vocab).map_err(|e| format!("{name}[{i}]: {e}"))?;
                }
                Ok(())
            }
            Block::Continuous(l) => l.check(header.seq_len).map_err(|e| format!("{name}: {e}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample_id: String,
    pub class_label: u32,
    pub split: Split,
    pub tokens: Tokens,
    pub cond: Block,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncond: Option<Block>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<Vec<DiffTokenStats>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeated_pass: Option<Block>,
}

impl SampleTrace {
    pub fn mode(&self) -> Mode {
        self.tokens.mode()
    }

    /// Checks every record-level invariant against `header`.
    pub fn validate(&self, header: &TraceHeader) -> Result<(), String> {
        if self.tokens.mode() != header.mode || self.cond.mode() != header.mode {
            return Err(format!("record is not {:?}", header.mode));
        }
        if self.tokens.len() != header.seq_len {
            return Err(format!(
                "{} tokens, header seq_len is {}",
                self.tokens.len(),
                header.seq_len
            ));
        }
        match &self.tokens {
            Tokens::Discrete(t) => {
                if let Some(bad) = t.iter().find(|&&x| x as usize >= header.vocab) {
                    return Err(format!("token {bad} outside vocabulary of {}", header.vocab));
                }
            }
            Tokens::Continuous(t) => {
                for (i, v) in t.iter().enumerate() {
                    if v.len() != header.vocab {
                        return Err(format!(
                            "token {i} has dimension {}, expected {}",
                            v.len(),
                            header.vocab
                        ));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(format!("token {i} is not finite"));
                    }
                }
            }
        }
        self.cond.check(header, "cond")?;
        if let Some(u) = &self.uncond {
            u.check(header, "uncond")?;
            if let (Block::Continuous(c), Block::Continuous(u)) = (&self.cond, u) {
                if c.mask_flag != u.mask_flag || c.timestep != u.timestep {
                    return Err("uncond loss block must share the cond mask and timestep".into());
                }
            }
        }
        if let Some(d) = &self.diff {
            if self.uncond.is_none() {
                return Err("diff block present without uncond block".into());
            }
            if header.mode != Mode::Discrete {
                return Err("diff statistics are discrete-only".into());
            }
            if d.len() != header.seq_len {
                return Err(format!(
                    "diff block has {} tokens, expected {}",
                    d.len(),
                    header.seq_len
                ));
            }
            for (i, s) in d.iter().enumerate() {
                s.check().map_err(|e| format!("diff[{i}]: {e}"))?;
            }
        }
        if let Some(r) = &self.repeated_pass {
            r.check(header, "repeated_pass")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub mode: Mode,
    /// Vocabulary size (discrete) or token dimension (continuous).
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub generator: serde_json::Value,
}

impl TraceHeader {
    pub fn new(mode: Mode, vocab: usize, seq_len: usize, seed: u64) -> Self {
        TraceHeader {
            format: FORMAT_TAG.to_string(),
            mode,
            vocab,
            seq_len,
            seed,
            generator: serde_json::Value::Null,
        }
    }

    pub fn with_generator(mut self, generator: serde_json::Value) -> Self {
        self.generator = generator;
        self
    }

    fn check(&self) -> Result<(), TraceError> {
        if self.format != FORMAT_TAG {
            return Err(TraceError::UnsupportedFormat(self.format.clone()));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(TraceError::InvalidHeader("vocab and seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Streaming writer. Records are validated before they are written.
pub struct TraceWriter {
    header: TraceHeader,
    out: Box<dyn Write>,
    path: PathBuf,
    count: usize,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>, header: TraceHeader) -> Result<Self, TraceError> {
        header.check()?;
        let path = path.as_ref().to_path_buf();
        let io_err = |source| TraceError::Io {
            path: path.clone(),
            source,
        };
        let file = File::create(&path).map_err(io_err)?;
        let out: Box<dyn Write> = if is_gz(&path) {
            Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
        } else {
            Box::new(BufWriter::new(file))
        };
        let mut w = TraceWriter {
            header,
            out,
            path,
            count: 0,
        };
        let line = serde_json::to_string(&w.header).expect("header serializes");
        w.write_line(&line)?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<(), TraceError> {
        let path = &self.path;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|source| TraceError::Io {
                path: path.clone(),
                source,
            })
    }

    pub fn write(&mut self, sample: &SampleTrace) -> Result<(), TraceError> {
        sample
            .validate(&self.header)
            .map_err(|reason| TraceError::InvalidRecord {
                sample_id: sample.sample_id.clone(),
                line: None,
                reason,
            })?;
        let line = serde_json::to_string(sample).expect("sample serializes");
        self.write_line(&line)?;
        self.count += 1;
        Ok(())
    }

    /// Flushes and closes the file, returning the number of records written.
    pub fn finish(mut self) -> Result<usize, TraceError> {
        let path = self.path.clone();
        self.out.flush().map_err(|source| TraceError::Io { path, source })?;
        Ok(self.count)
    }
}

/// Writes a complete trace file. On an invalid record the partial file is
/// removed and the error names the offending sample.
pub fn write_trace<'a, I>(path: impl AsRef<Path>, header: &TraceHeader, samples: I) -> Result<usize, TraceError>
where
    I: IntoIterator<Item = &'a SampleTrace>,
{
    let path = path.as_ref();
    let mut w = TraceWriter::create(path, header.clone())?;
    for s in samples {
        if let Err(e) = w.write(s) {
            drop(w);
            let _ = std::fs::remove_file(path);
            return Err(e);
        }
    }
    w.finish()
}

/// Lazy record iterator returned by [`read_trace`].
pub struct TraceReader {
    header: TraceHeader,
    lines: io::Lines<Box<dyn BufRead>>,
    line_no: usize,
    path: PathBuf,
}

impl TraceReader {
    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn parse_record(&self, line: &str) -> Result<SampleTrace, TraceError> {
        let line_no = self.line_no;
        let sample: SampleTrace = serde_json::from_str(line).map_err(|e| {
            if e.is_eof() {
                TraceError::Truncated { line: line_no }
            } else {
                TraceError::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                }
            }
        })?;
        if sample.mode() != self.header.mode || sample.cond.mode() != self.header.mode {
            return Err(TraceError::ModeMismatch {
                line: line_no,
                sample_id: sample.sample_id,
                mode: self.header.mode,
            });
        }
        sample
            .validate(&self.header)
            .map_err(|reason| TraceError::InvalidRecord {
                sample_id: sample.sample_id.clone(),
                line: Some(line_no),
                reason,
            })?;
        Ok(sample)
    }
}

impl Iterator for TraceReader {
    type Item = Result<SampleTrace, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                    return Some(Err(TraceError::Truncated { line: self.line_no }))
                }
                Err(source) => {
                    return Some(Err(TraceError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse_record(&line));
        }
    }
}

/// Opens a trace file and parses its header. Records are parsed lazily.
pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, TraceReader), TraceError> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|source| TraceError::Io {
        path: path.clone(),
        source,
    })?;
    let input: Box<dyn BufRead> = if is_gz(&path) {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut lines = input.lines();
    let first = match lines.next() {
        Some(Ok(l)) => l,
        Some(Err(source)) => return Err(TraceError::Io { path, source }),
        None => return Err(TraceError::MissingHeader),
    };
    let header: TraceHeader = serde_json::from_str(&first).map_err(|_| TraceError::MissingHeader)?;
    header.check()?;
    let reader = TraceReader {
        header: header.clone(),
        lines,
        line_no: 1,
        path,
    };
    Ok((header, reader))
}

/// Reads a whole trace file into memory.
pub fn read_trace_all(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<SampleTrace>), TraceError> {
    let (header, reader) = read_trace(path)?;
    let samples = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, samples))
}

pub(crate) fn mean_and_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Nearest-rank percentile of an ascending slice.
pub(crate) fn nearest_rank(sorted: &[f64], k: u32) -> f64 {
    let n = sorted.len();
    let rank = ((f64::from(k) / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(lt: f64) -> TokenStats {
        TokenStats::from_log_probs(&[lt, (1.0 - lt.exp()).ln()], 0, &QUANTILE_KEYS)
    }

    fn header() -> TraceHeader {
        TraceHeader::new(Mode::Discrete, 2, 3, 7)
    }

    fn record(id: &str, n: usize) -> SampleTrace {
        SampleTrace {
            sample_id: id.into(),
            class_label: 1,
            split: Split::Member,
            tokens: Tokens::Discrete(vec![0; n]),
            cond: Block::Discrete((0..n).map(|_| stats(-0.3)).collect()),
            uncond: None,
            diff: None,
            repeated_pass: None,
        }
    }

    #[test]
    fn token_stats_on_three_way_distribution() {
        let lp: Vec<f64> = [0.1f64, 0.2, 0.7].iter().map(|p| p.ln()).collect();
        let s = TokenStats::from_log_probs(&lp, 0, &QUANTILE_KEYS);
        assert!((s.entropy - 0.801_818_552_80).abs() < 1e-9);
        assert!((s.prob_quantiles[&50] - 0.2).abs() < 1e-15);
        assert!((s.prob_quantiles[&10] - 0.1).abs() < 1e-15);
        assert!((s.max_other_loglik - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn short_record_is_rejected_with_its_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        let mut h = header();
        h.seq_len = 32;
        let err = write_trace(&path, &h, &[record("s-31", 31)]).unwrap_err();
        assert!(matches!(err, TraceError::InvalidRecord { ref sample_id, .. } if sample_id == "s-31"));
        assert!(err.to_string().contains("s-31"));
        assert!(!path.exists());
    }

    #[test]
    fn empty_stream_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.trace");
        write_trace(&path, &header(), std::iter::empty()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with(r#"{"format":"iartrace/1","mode":"discrete","vocab":2,"seq_len":3,"seed":7"#));
        let (h, recs) = read_trace_all(&path).unwrap();
        assert_eq!(h, header());
        assert!(recs.is_empty());
    }

    #[test]
    fn record_first_line_is_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nohdr.trace");
        let line = serde_json::to_string(&record("a", 3)).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        assert!(matches!(read_trace(&path), Err(TraceError::MissingHeader)));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_trace(&path), Err(TraceError::MissingHeader)));
    }

    #[test]
    fn truncated_and_mismatched_records_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.trace");
        write_trace(&path, &header(), &[record("a", 3)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let second = text.lines().nth(1).unwrap();
        std::fs::write(
            &path,
            format!("{}\n{}\n", text.lines().next().unwrap(), &second[..second.len() / 2]),
        )
        .unwrap();
        let (_, mut r) = read_trace(&path).unwrap();
        let err = r.next();
        assert!(matches!(err, Some(Err(TraceError::Truncated { line: 2 }))), "{err:?}");

        let mut cont_header = header();
        cont_header.mode = Mode::Continuous;
        let hdr = serde_json::to_string(&cont_header).unwrap();
        std::fs::write(&path, format!("{hdr}\n{second}\n")).unwrap();
        let (_, mut r) = read_trace(&path).unwrap();
        let err = r.next();
        assert!(
            matches!(err, Some(Err(TraceError::ModeMismatch { line: 2, .. }))),
            "{err:?}"
        );
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.trace");
        let mut h = header();
        h.format = "iartrace/2".into();
        std::fs::write(&path, serde_json::to_string(&h).unwrap() + "\n").unwrap();
        assert!(matches!(read_trace(&path), Err(TraceError::UnsupportedFormat(_))));
    }

    #[test]
    fn loss_block_rules() {
        let mut l = LossRepeats {
            timestep: 500,
            losses: vec![vec![1.0, 2.0], vec![], vec![0.5, 0.0]],
            mask_flag: vec![true, false, true],
        };
        assert!(l.check(3).is_ok());
        assert_eq!(l.repeats(), Some(2));
        l.losses[2] = vec![0.5];
        assert!(l.check(3).unwrap_err().contains("repeats"));
        l.losses[2] = vec![0.5, -1.0];
        assert!(l.check(3).is_err());
        l.losses[2] = vec![0.5, 1.0];
        l.losses[1] = vec![0.1, 0.1];
        assert!(l.check(3).unwrap_err().contains("unmasked"));
    }

    #[test]
    fn nearest_rank_convention() {
        let s = [0.1, 0.2, 0.7];
        assert_eq!(nearest_rank(&s, 10), 0.1);
        assert_eq!(nearest_rank(&s, 34), 0.2);
        assert_eq!(nearest_rank(&s, 67), 0.7);
        assert_eq!(nearest_rank(&s, 100), 0.7);
    }
}
