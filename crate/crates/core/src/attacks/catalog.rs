//! Attack identifiers, hyperparameter grids, and the batch scorer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camia;
use super::{
    average_repeats, cfg_diff_transform, hinge_score, loss_score, min_k_pp_score, min_k_score, surp_score, zlib_score,
    AttackError, DiffSequence, PositionStats,
};
use crate::trace::{Block, Mode, SampleTrace, Split, TokenStats};

/// k grid for Min-K%, Min-K%++ and SURP.
pub const DEFAULT_K_GRID: [u32; 5] = [10, 20, 30, 40, 50];
/// Entropy-threshold grid for SURP.
pub const DEFAULT_EPS_GRID: [f64; 4] = [2.0, 4.0, 8.0, 16.0];

/// Default single-point hyperparameters, used when an attack is named
/// without a grid.
pub const DEFAULT_K: u32 = 20;
pub const DEFAULT_SURP_K: u32 = 50;
pub const DEFAULT_SURP_EPS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    Loss,
    Zlib,
    Hinge,
    MinK,
    MinKPp,
    Surp,
    CamiaSlope,
    CamiaApen,
    CamiaLz,
    CamiaCountBelow,
    CamiaRepAmp,
}

impl AttackName {
    pub const ALL: [AttackName; 11] = [
        AttackName::Loss,
        AttackName::Zlib,
        AttackName::Hinge,
        AttackName::MinK,
        AttackName::MinKPp,
        AttackName::Surp,
        AttackName::CamiaSlope,
        AttackName::CamiaApen,
        AttackName::CamiaLz,
        AttackName::CamiaCountBelow,
        AttackName::CamiaRepAmp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackName::Loss => "loss",
            AttackName::Zlib => "zlib",
            AttackName::Hinge => "hinge",
            AttackName::MinK => "min_k",
            AttackName::MinKPp => "min_k_pp",
            AttackName::Surp => "surp",
            AttackName::CamiaSlope => "camia_slope",
            AttackName::CamiaApen => "camia_apen",
            AttackName::CamiaLz => "camia_lz",
            AttackName::CamiaCountBelow => "camia_count_below",
            AttackName::CamiaRepAmp => "camia_rep_amp",
        }
    }

    /// Needs vocabulary statistics, so discrete traces only.
    pub fn needs_vocab(self) -> bool {
        matches!(self, AttackName::Hinge | AttackName::MinKPp | AttackName::Surp)
    }
}

impl fmt::Display for AttackName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

/// Which per-token block an attack reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cond,
    Diff,
    LossCond,
    LossDiff,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cond, Variant::Diff, Variant::LossCond, Variant::LossDiff];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cond => "cond",
            Variant::Diff => "diff",
            Variant::LossCond => "loss_cond",
            Variant::LossDiff => "loss_diff",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Variant::Cond | Variant::Diff => Mode::Discrete,
            Variant::LossCond | Variant::LossDiff => Mode::Continuous,
        }
    }

    pub fn is_diff(self) -> bool {
        matches!(self, Variant::Diff | Variant::LossDiff)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Attack hyperparameters. Unused fields stay `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub k: Option<u32>,
    pub eps_e: Option<f64>,
    pub gamma: Option<f64>,
}

impl Hyper {
    pub fn k(k: u32) -> Self {
        Hyper {
            k: Some(k),
            ..Hyper::default()
        }
    }
}

impl fmt::Display for Hyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(k) = self.k {
            parts.push(format!("k={k}"));
        }
        if let Some(e) = self.eps_e {
            parts.push(format!("eps_e={e}"));
        }
        if let Some(g) = self.gamma {
            parts.push(format!("gamma={g}"));
        }
        f.write_str(&parts.join(";"))
    }
}

impl FromStr for Hyper {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut h = Hyper::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("bad hyperparameter {part:?}"))?;
            let bad = |e: &dyn fmt::Display| format!("bad value for {key}: {e}");
            match key {
                "k" => h.k = Some(value.parse().map_err(|e| bad(&e))?),
                "eps_e" => h.eps_e = Some(value.parse().map_err(|e| bad(&e))?),
                "gamma" => h.gamma = Some(value.parse().map_err(|e| bad(&e))?),
                other => return Err(format!("unknown hyperparameter {other:?}")),
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackId {
    pub name: AttackName,
    pub variant: Variant,
    pub hyper: Hyper,
}

impl AttackId {
    pub fn new(name: AttackName, variant: Variant) -> Self {
        let hyper = match name {
            AttackName::MinK | AttackName::MinKPp => Hyper::k(DEFAULT_K),
            AttackName::Surp => Hyper {
                k: Some(DEFAULT_SURP_K),
                eps_e: Some(DEFAULT_SURP_EPS),
                gamma: None,
            },
            _ => Hyper::default(),
        };
        AttackId { name, variant, hyper }
    }

    pub fn with_hyper(mut self, hyper: Hyper) -> Self {
        self.hyper = hyper;
        self
    }

    /// Stable textual key, e.g. `min_k@diff[k=20]`.
    pub fn key(&self) -> String {
        let h = self.hyper.to_string();
        if h.is_empty() {
            format!("{}@{}", self.name, self.variant)
        } else {
            format!("{}@{}[{h}]", self.name, self.variant)
        }
    }

    /// Same attack family and input block, ignoring hyperparameters.
    pub fn family(&self) -> (AttackName, Variant) {
        (self.name, self.variant)
    }

    /// Checks the (attack, variant) combination against a trace mode.
    pub fn check_mode(&self, mode: Mode) -> Result<(), AttackError> {
        let mode_name = match mode {
            Mode::Discrete => "discrete",
            Mode::Continuous => "continuous",
        };
        let incompatible = || AttackError::Incompatible {
            attack: self.key(),
            mode: mode_name,
        };
        if self.variant.mode() != mode {
            return Err(incompatible());
        }
        match self.name {
            n if n.needs_vocab() && mode != Mode::Discrete => Err(incompatible()),
            AttackName::Surp if self.variant != Variant::Cond => Err(incompatible()),
            AttackName::Zlib if mode != Mode::Discrete => Err(incompatible()),
            AttackName::CamiaRepAmp if self.variant.is_diff() => Err(incompatible()),
            _ => Ok(()),
        }
    }

    /// Every attack family/variant compatible with `mode`, expanded over the
    /// hyperparameter grids.
    pub fn full_grid(mode: Mode, k_grid: &[u32], eps_grid: &[f64]) -> Vec<AttackId> {
        let mut out = Vec::new();
        for variant in Variant::ALL.into_iter().filter(|v| v.mode() == mode) {
            for name in AttackName::ALL {
                let base = AttackId::new(name, variant);
                if base.check_mode(mode).is_err() {
                    continue;
                }
                match name {
                    AttackName::MinK | AttackName::MinKPp => {
                        out.extend(k_grid.iter().map(|&k| base.with_hyper(Hyper::k(k))));
                    }
                    AttackName::Surp => {
                        for &k in k_grid {
                            for &e in eps_grid {
                                out.push(base.with_hyper(Hyper {
                                    k: Some(k),
                                    eps_e: Some(e),
                                    gamma: None,
                                }));
                            }
                        }
                    }
                    _ => out.push(base),
                }
            }
        }
        out
    }

    /// One attack per family with default hyperparameters, on the variant the
    /// toolkit prefers for `mode`: the CFG difference in discrete mode (the
    /// repeated-pass attack falls back to the conditional block) and the
    /// conditional loss in continuous mode.
    pub fn default_set(mode: Mode) -> Vec<AttackId> {
        AttackName::ALL
            .into_iter()
            .filter_map(|name| {
                let preferred = match mode {
                    Mode::Discrete => [Variant::Diff, Variant::Cond],
                    Mode::Continuous => [Variant::LossCond, Variant::LossDiff],
                };
                preferred
                    .into_iter()
                    .map(|v| AttackId::new(name, v))
                    .find(|a| a.check_mode(mode).is_ok())
            })
            .collect()
    }
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for AttackId {
    type Err = String;
    /// Parses the [`AttackId::key`] form. A bare name gets default
    /// hyperparameters; `name@variant` selects the block.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, hyper) = match s.split_once('[') {
            Some((h, rest)) => (h, Some(rest.strip_suffix(']').ok_or("missing ']'")?)),
            None => (s, None),
        };
        let (name, variant) = match head.split_once('@') {
            Some((n, v)) => (n.parse::<AttackName>()?, v.parse::<Variant>()?),
            None => (head.parse::<AttackName>()?, Variant::Cond),
        };
        let mut id = AttackId::new(name, variant);
        if let Some(h) = hyper {
            id.hyper = h.parse()?;
        }
        Ok(id)
    }
}

/// The per-token views of one trace that a given variant reads.
#[derive(Clone, Debug)]
pub struct AttackInput<'a> {
    /// Member-oriented per-token signal ("log-likelihood").
    pub logliks: Vec<f64>,
    /// Vocabulary statistics (discrete variants only).
    pub positions: Option<Vec<PositionStats>>,
    /// Full conditional statistics, needed by SURP.
    pub token_stats: Option<&'a [TokenStats]>,
    pub tokens: Option<&'a [u32]>,
    /// Signal from a repeated pass over the same sequence, when available.
    pub repeated: Option<Vec<f64>>,
}

impl<'a> AttackInput<'a> {
    pub fn from_trace(trace: &'a SampleTrace, variant: Variant) -> Result<Self, AttackError> {
        let tokens = trace.tokens.as_discrete();
        match (variant, &trace.cond) {
            (Variant::Cond, Block::Discrete(stats)) => Ok(AttackInput {
                logliks: stats.iter().map(|s| s.loglik_true).collect(),
                positions: Some(stats.iter().map(PositionStats::from).collect()),
                token_stats: Some(stats),
                tokens,
                repeated: match &trace.repeated_pass {
                    Some(Block::Discrete(r)) => Some(r.iter().map(|s| s.loglik_true).collect()),
                    _ => None,
                },
            }),
            (Variant::Diff, Block::Discrete(_)) => match cfg_diff_transform(trace)? {
                DiffSequence::Discrete { diff_true, stats } => Ok(AttackInput {
                    logliks: diff_true,
                    positions: stats.map(|s| s.iter().map(PositionStats::from).collect()),
                    token_stats: None,
                    tokens,
                    repeated: None,
                }),
                DiffSequence::Continuous { .. } => unreachable!("discrete cond block"),
            },
            (Variant::LossCond, Block::Continuous(l)) => Ok(AttackInput {
                logliks: average_repeats(l)?.iter().map(|x| -x).collect(),
                positions: None,
                token_stats: None,
                tokens: None,
                repeated: match &trace.repeated_pass {
                    Some(Block::Continuous(r)) => Some(average_repeats(r)?.iter().map(|x| -x).collect()),
                    _ => None,
                },
            }),
            (Variant::LossDiff, Block::Continuous(_)) => Ok(AttackInput {
                logliks: cfg_diff_transform(trace)?.as_logliks(),
                positions: None,
                token_stats: None,
                tokens: None,
                repeated: None,
            }),
            _ => Err(AttackError::Incompatible {
                attack: variant.to_string(),
                mode: match trace.mode() {
                    Mode::Discrete => "discrete",
                    Mode::Continuous => "continuous",
                },
            }),
        }
    }

    fn losses(&self) -> Vec<f64> {
        self.logliks.iter().map(|l| -l).collect()
    }

    fn positions(&self) -> Result<&[PositionStats], AttackError> {
        self.positions
            .as_deref()
            .ok_or(AttackError::NeedsDiscrete("vocabulary statistics"))
    }

    /// Scores this input under `attack`.
    pub fn score(&self, attack: &AttackId) -> Result<f64, AttackError> {
        let k = attack.hyper.k.unwrap_or(DEFAULT_K);
        match attack.name {
            AttackName::Loss => loss_score(&self.logliks),
            AttackName::Zlib => zlib_score(&self.logliks, self.tokens.ok_or(AttackError::NeedsDiscrete("zlib"))?),
            AttackName::Hinge => hinge_score(self.positions()?),
            AttackName::MinK => min_k_score(&self.logliks, k),
            AttackName::MinKPp => Ok(min_k_pp_score(self.positions()?, k)?.value),
            AttackName::Surp => surp_score(
                self.token_stats.ok_or(AttackError::NeedsDiscrete("surp"))?,
                attack.hyper.k.unwrap_or(DEFAULT_SURP_K),
                attack.hyper.eps_e.unwrap_or(DEFAULT_SURP_EPS),
            ),
            AttackName::CamiaSlope => camia::slope_score(&self.losses()),
            AttackName::CamiaApen => camia::apen_score(&self.losses()),
            AttackName::CamiaLz => camia::lz_score(&self.losses()),
            AttackName::CamiaCountBelow => camia::count_below_score(&self.losses(), attack.hyper.gamma),
            AttackName::CamiaRepAmp => {
                let rep = self.repeated.as_ref().ok_or(AttackError::MissingRepeated)?;
                let second: Vec<f64> = rep.iter().map(|l| -l).collect();
                camia::rep_amp_score(&self.losses(), &second)
            }
        }
    }
}

/// One oriented membership score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub split: Split,
    pub attack: AttackId,
    pub value: f64,
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    sample_id: String,
    split: Split,
    attack: AttackName,
    variant: Variant,
    hyperparams: String,
    value: f64,
}

/// Scores for a set of samples under a set of attacks, ordered by
/// `(sample_id, attack key)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub records: Vec<ScoreRecord>,
    pub warnings: Vec<String>,
}

impl ScoreTable {
    /// Distinct attacks in first-appearance order of their keys (sorted).
    pub fn attacks(&self) -> Vec<AttackId> {
        let mut seen = BTreeMap::new();
        for r in &self.records {
            seen.entry(r.attack.key()).or_insert(r.attack);
        }
        seen.into_values().collect()
    }

    /// `(sample_id, value)` for one attack and split.
    pub fn scores(&self, attack: &AttackId, split: Split) -> Vec<(String, f64)> {
        let key = attack.key();
        self.records
            .iter()
            .filter(|r| r.split == split && r.attack.key() == key)
            .map(|r| (r.sample_id.clone(), r.value))
            .collect()
    }

    /// Values only, for one attack and split.
    pub fn values(&self, attack: &AttackId, split: Split) -> Vec<f64> {
        self.scores(attack, split).into_iter().map(|(_, v)| v).collect()
    }

    /// Map from sample id to value for one attack.
    pub fn by_sample(&self, attack: &AttackId) -> BTreeMap<String, f64> {
        let key = attack.key();
        self.records
            .iter()
            .filter(|r| r.attack.key() == key)
            .map(|r| (r.sample_id.clone(), r.value))
            .collect()
    }

    pub fn sample_split(&self) -> BTreeMap<String, Split> {
        self.records.iter().map(|r| (r.sample_id.clone(), r.split)).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(ScoreRow {
                sample_id: r.sample_id.clone(),
                split: r.split,
                attack: r.attack.name,
                variant: r.attack.variant,
                hyperparams: r.attack.hyper.to_string(),
                value: r.value,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let row: ScoreRow = row?;
            let hyper = row
                .hyperparams
                .parse::<Hyper>()
                .map_err(|e| csv::Error::from(io::Error::new(io::ErrorKind::InvalidData, e)))?;
            records.push(ScoreRecord {
                sample_id: row.sample_id,
                split: row.split,
                attack: AttackId {
                    name: row.attack,
                    variant: row.variant,
                    hyper,
                },
                value: row.value,
            });
        }
        Ok(ScoreTable {
            records,
            warnings: Vec::new(),
        })
    }
}

/// Scores every sample under every attack. Attacks incompatible with the
/// trace mode are skipped with a warning; per-sample failures are recorded as
/// NaN and listed in the warnings.
pub fn score_all(samples: &[SampleTrace], mode: Mode, attacks: &[AttackId]) -> ScoreTable {
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut usable = Vec::new();
    for a in attacks {
        if !seen.insert(a.key()) {
            continue;
        }
        match a.check_mode(mode) {
            Ok(()) => usable.push(*a),
            Err(e) => warnings.push(format!("skipped {a}: {e}")),
        }
    }
    let mut variants: Vec<Variant> = usable.iter().map(|a| a.variant).collect();
    variants.sort();
    variants.dedup();

    let per_sample: Vec<(Vec<ScoreRecord>, Vec<String>)> = samples
        .par_iter()
        .map(|s| {
            let mut recs = Vec::with_capacity(usable.len());
            let mut warns = Vec::new();
            let inputs: Vec<(Variant, Result<AttackInput<'_>, AttackError>)> =
                variants.iter().map(|&v| (v, AttackInput::from_trace(s, v))).collect();
            for a in &usable {
                let input = &inputs
                    .iter()
                    .find(|(v, _)| *v == a.variant)
                    .expect("variant prepared")
                    .1;
                let value = match input.as_ref().map_err(Clone::clone).and_then(|i| i.score(a)) {
                    Ok(v) if v.is_finite() => v,
                    Ok(v) => {
                        warns.push(format!("{}: {a} gave non-finite value {v}", s.sample_id));
                        f64::NAN
                    }
                    Err(e) => {
                        warns.push(format!("{}: {a}: {e}", s.sample_id));
                        f64::NAN
                    }
                };
                recs.push(ScoreRecord {
                    sample_id: s.sample_id.clone(),
                    split: s.split,
                    attack: *a,
                    value,
                });
            }
            (recs, warns)
        })
        .collect();

    let mut records = Vec::with_capacity(samples.len() * usable.len());
    for (recs, warns) in per_sample {
        records.extend(recs);
        warnings.extend(warns);
    }
    records.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then_with(|| a.attack.key().cmp(&b.attack.key()))
    });
    ScoreTable { records, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_round_trip() {
        for a in AttackId::full_grid(Mode::Discrete, &DEFAULT_K_GRID, &DEFAULT_EPS_GRID)
            .into_iter()
            .chain(AttackId::full_grid(
                Mode::Continuous,
                &DEFAULT_K_GRID,
                &DEFAULT_EPS_GRID,
            ))
        {
            let parsed: AttackId = a.key().parse().unwrap();
            assert_eq!(parsed, a);
        }
        let bare: AttackId = "loss".parse().unwrap();
        assert_eq!(bare, AttackId::new(AttackName::Loss, Variant::Cond));
    }

    #[test]
    fn compatibility_rules() {
        let hinge_cont = AttackId::new(AttackName::Hinge, Variant::LossCond);
        assert!(hinge_cont.check_mode(Mode::Continuous).is_err());
        let loss_cond_on_discrete = AttackId::new(AttackName::Loss, Variant::LossCond);
        assert!(loss_cond_on_discrete.check_mode(Mode::Discrete).is_err());
        assert!(AttackId::new(AttackName::Zlib, Variant::LossCond)
            .check_mode(Mode::Continuous)
            .is_err());
        assert!(AttackId::new(AttackName::Surp, Variant::Diff)
            .check_mode(Mode::Discrete)
            .is_err());
        assert!(AttackId::new(AttackName::CamiaRepAmp, Variant::Diff)
            .check_mode(Mode::Discrete)
            .is_err());
    }

    #[test]
    fn default_set_has_one_attack_per_family() {
        let d = AttackId::default_set(Mode::Discrete);
        assert_eq!(d.len(), 11);
        assert!(d.iter().all(|a| a.check_mode(Mode::Discrete).is_ok()));
        let c = AttackId::default_set(Mode::Continuous);
        // No vocabulary statistics or token payload in continuous mode.
        assert_eq!(c.len(), 7);
    }

    #[test]
    fn grid_sizes() {
        let d = AttackId::full_grid(Mode::Discrete, &DEFAULT_K_GRID, &DEFAULT_EPS_GRID);
        // cond: 8 single + 5 min_k + 5 min_k_pp + 20 surp; diff: 7 single + 5 + 5.
        assert_eq!(d.len(), (8 + 5 + 5 + 20) + (7 + 5 + 5));
        let c = AttackId::full_grid(Mode::Continuous, &DEFAULT_K_GRID, &DEFAULT_EPS_GRID);
        // loss_cond: loss, 4 camia incl. rep_amp, 5 min_k; loss_diff: loss, 4 camia, 5 min_k.
        assert_eq!(c.len(), (1 + 5 + 5) + (1 + 4 + 5));
    }

    #[test]
    fn empty_attack_set_gives_empty_table() {
        let t = score_all(&[], Mode::Discrete, &[]);
        assert!(t.records.is_empty() && t.warnings.is_empty());
    }

    #[test]
    fn incompatible_attack_is_skipped_with_warning() {
        let t = score_all(
            &[],
            Mode::Discrete,
            &[AttackId::new(AttackName::Loss, Variant::LossCond)],
        );
        assert!(t.records.is_empty());
        assert_eq!(t.warnings.len(), 1);
        assert!(t.warnings[0].contains("loss@loss_cond"));
    }
}
