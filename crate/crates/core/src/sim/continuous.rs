//! Continuous-token model with a per-token diffusion loss.
//!
//! A token `t` at position `n` of class `c` is noised as
//! `t_s = sqrt(abar_s) * t + sqrt(1 - abar_s) * eps`. The conditioning
//! prediction `z` blends the class mean `mu[c][n]` with the mean of the
//! visible tokens, weighted by the visible fraction. The noise predictor is
//! linear in the residual: `eps_hat = a_s * (t_s - sqrt(abar_s) * z) + b_s`,
//! with `(a_s, b_s)` fitted by least squares on training tokens.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, Corpus, SimConfig, SimError};
use crate::oracle::ContinuousOracle;
use crate::rng::{domain, hash_str, stream};
use crate::trace::Mode;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// DDPM schedule with linearly spaced betas.
pub fn linear_alpha_bar(s_max: u32) -> Vec<f64> {
    let n = s_max as usize;
    let mut out = Vec::with_capacity(n);
    let mut prod = 1.0;
    for s in 0..n {
        let beta = BETA_START + (BETA_END - BETA_START) * s as f64 / (n - 1) as f64;
        prod *= 1.0 - beta;
        out.push(prod);
    }
    out
}

/// Per-timestep linear noise predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Denoiser {
    /// `a_s = 1 / sqrt(1 - abar_s)`, `b_s = 0`: exact when the token equals
    /// its conditioning prediction.
    pub fn ideal(alpha_bar: &[f64]) -> Self {
        Denoiser {
            a: alpha_bar.iter().map(|ab| 1.0 / (1.0 - ab).sqrt()).collect(),
            b: vec![0.0; alpha_bar.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousToyModel {
    pub kind: String,
    pub config: SimConfig,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
    /// `mu[class][position]`.
    pub mu: Vec<Vec<Vec<f64>>>,
    /// Null-class means, fitted on label-dropped copies.
    pub mu_null: Option<Vec<Vec<f64>>>,
    pub cond: Denoiser,
    pub uncond: Option<Denoiser>,
}

const CHECKPOINT_KIND: &str = "continuous-diffusion";

impl ContinuousToyModel {
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Replaces both noise predictors by [`Denoiser::ideal`].
    pub fn with_ideal_denoiser(mut self) -> Self {
        self.cond = Denoiser::ideal(&self.alpha_bar);
        if self.uncond.is_some() {
            self.uncond = Some(Denoiser::ideal(&self.alpha_bar));
        }
        self
    }

    fn means(&self, class: Option<u32>) -> Option<&Vec<Vec<f64>>> {
        match class {
            Some(c) => self.mu.get(c as usize),
            None => self.mu_null.as_ref(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        write_json(path.as_ref(), self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let mut m: ContinuousToyModel = read_json(path.as_ref(), "model")?;
        if m.kind != CHECKPOINT_KIND {
            return Err(SimError::Config(format!(
                "checkpoint kind {} is not {CHECKPOINT_KIND}",
                m.kind
            )));
        }
        m.config.validate()?;
        m.alpha_bar = linear_alpha_bar(m.config.s_max);
        let n = m.alpha_bar.len();
        let ok = |d: &Denoiser| d.a.len() == n && d.b.len() == n;
        if !ok(&m.cond) || !m.uncond.as_ref().is_none_or(ok) || m.mu.len() != m.config.classes {
            return Err(SimError::Config("checkpoint shape does not match its config".into()));
        }
        Ok(m)
    }
}

impl ContinuousOracle for ContinuousToyModel {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn has_uncond(&self) -> bool {
        self.uncond.is_some()
    }

    fn s_max(&self) -> u32 {
        self.config.s_max
    }

    fn alpha_bar(&self, s: u32) -> f64 {
        self.alpha_bar[s as usize]
    }

    fn predict_masked(&self, tokens: &[Vec<f64>], mask: &[bool], class: Option<u32>) -> Vec<Vec<f64>> {
        let d = self.config.dim;
        let n = self.config.seq_len;
        let visible: Vec<&Vec<f64>> = tokens.iter().zip(mask).filter(|(_, &m)| !m).map(|(t, _)| t).collect();
        let w = visible.len() as f64 / tokens.len().max(1) as f64;
        let mut u_bar = vec![0.0; d];
        for t in &visible {
            for (u, x) in u_bar.iter_mut().zip(t.iter()) {
                *u += x;
            }
        }
        if !visible.is_empty() {
            u_bar.iter_mut().for_each(|u| *u /= visible.len() as f64);
        }
        let zeros = vec![vec![0.0; d]; n];
        let means = self.means(class).unwrap_or(&zeros);
        (0..tokens.len())
            .map(|i| {
                means[i % n]
                    .iter()
                    .zip(&u_bar)
                    .map(|(m, u)| (1.0 - w) * m + w * u)
                    .collect()
            })
            .collect()
    }

    fn predict_noise(&self, noised: &[f64], z: &[f64], s: u32, class: Option<u32>) -> Vec<f64> {
        let den = match class {
            Some(_) => &self.cond,
            None => self.uncond.as_ref().unwrap_or(&self.cond),
        };
        let root = self.alpha_bar[s as usize].sqrt();
        let (a, b) = (den.a[s as usize], den.b[s as usize]);
        noised.iter().zip(z).map(|(x, z)| a * (x - root * z) + b).collect()
    }
}

/// Weighted simple-regression sums.
#[derive(Default)]
struct Lsq {
    w: f64,
    x: f64,
    y: f64,
    xx: f64,
    xy: f64,
}

impl Lsq {
    fn add(&mut self, x: f64, y: f64, w: f64) {
        self.w += w;
        self.x += w * x;
        self.y += w * y;
        self.xx += w * x * x;
        self.xy += w * x * y;
    }

    fn solve(&self) -> (f64, f64) {
        let den = self.w * self.xx - self.x * self.x;
        let a = if den > 0.0 {
            (self.w * self.xy - self.x * self.y) / den
        } else {
            0.0
        };
        (a, (self.y - a * self.x) / self.w)
    }
}

struct Weighted<'a> {
    id: &'a str,
    class: usize,
    tokens: &'a [Vec<f64>],
    weight: f64,
}

fn knots(s_max: u32, stride: u32) -> Vec<u32> {
    let mut k: Vec<u32> = (0..s_max).step_by(stride as usize).collect();
    if *k.last().expect("s_max >= 1") != s_max - 1 {
        k.push(s_max - 1);
    }
    k
}

fn fit_denoiser(
    cfg: &SimConfig,
    alpha_bar: &[f64],
    data: &[Weighted<'_>],
    // One table per class, or a single shared table.
    means: &[Vec<Vec<f64>>],
    tag: u64,
) -> Denoiser {
    let ks = knots(cfg.s_max, cfg.fit_stride);
    let fitted: Vec<(f64, f64)> = ks
        .iter()
        .enumerate()
        .map(|(ki, &s)| {
            let ab = alpha_bar[s as usize];
            let (ra, rn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mut lsq = Lsq::default();
            for item in data {
                let mut rng = stream(cfg.seed, &[domain::DENOISER_FIT, tag, ki as u64, hash_str(item.id)]);
                let mu = if means.len() == 1 {
                    &means[0]
                } else {
                    &means[item.class]
                };
                for (pos, t) in item.tokens.iter().enumerate() {
                    for _ in 0..cfg.fit_draws {
                        for (x, m) in t.iter().zip(&mu[pos]) {
                            let eps: f64 = rng.sample(StandardNormal);
                            lsq.add(ra * (x - m) + rn * eps, eps, item.weight);
                        }
                    }
                }
            }
            lsq.solve()
        })
        .collect();
    let mut a = Vec::with_capacity(alpha_bar.len());
    let mut b = Vec::with_capacity(alpha_bar.len());
    for s in 0..cfg.s_max {
        let hi = ks.partition_point(|&k| k < s).min(ks.len() - 1);
        if ks[hi] == s || hi == 0 {
            a.push(fitted[hi].0);
            b.push(fitted[hi].1);
        } else {
            let (s0, s1) = (ks[hi - 1] as f64, ks[hi] as f64);
            let f = (s as f64 - s0) / (s1 - s0);
            a.push(fitted[hi - 1].0 + f * (fitted[hi].0 - fitted[hi - 1].0));
            b.push(fitted[hi - 1].1 + f * (fitted[hi].1 - fitted[hi - 1].1));
        }
    }
    Denoiser { a, b }
}

fn weighted_means(cfg: &SimConfig, data: &[Weighted<'_>], class: Option<usize>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = (cfg.seq_len, cfg.dim);
    let mut sum = vec![vec![0.0; d]; n];
    let mut w = vec![0.0; n];
    for item in data.iter().filter(|it| class.is_none_or(|c| it.class == c)) {
        for (pos, t) in item.tokens.iter().enumerate() {
            w[pos] += item.weight;
            for (acc, x) in sum[pos].iter_mut().zip(t) {
                *acc += item.weight * x;
            }
        }
    }
    for (row, &wt) in sum.iter_mut().zip(&w) {
        if wt > 0.0 {
            row.iter_mut().for_each(|x| *x /= wt);
        }
    }
    (sum, w)
}

/// Fits class means, null-class means and both noise predictors on the
/// training samples of a continuous corpus.
pub fn fit_continuous(corpus: &Corpus, cfg: &SimConfig) -> Result<ContinuousToyModel, SimError> {
    if corpus.mode() != Mode::Continuous {
        return Err(SimError::ModeMismatch {
            model: Mode::Continuous,
            corpus: corpus.mode(),
        });
    }
    let config = SimConfig {
        mode: Mode::Continuous,
        vocab: corpus.config.vocab,
        seq_len: corpus.config.seq_len,
        classes: corpus.config.classes,
        dim: corpus.config.dim,
        ..cfg.clone()
    };
    config.validate()?;
    let alpha_bar = linear_alpha_bar(config.s_max);

    let mut cond_data = Vec::new();
    let mut null_data = Vec::new();
    for s in corpus.training() {
        let tokens = s.tokens.as_continuous().ok_or(SimError::ModeMismatch {
            model: Mode::Continuous,
            corpus: Mode::Discrete,
        })?;
        if tokens.len() != config.seq_len || tokens.iter().any(|t| t.len() != config.dim) {
            return Err(SimError::Config(format!(
                "sample {} does not match the corpus shape",
                s.sample_id
            )));
        }
        let copies = s.copies.max(1);
        let mut rng = stream(config.seed, &[domain::LABEL_DROPOUT, hash_str(&s.sample_id)]);
        let dropped = (0..copies).filter(|_| rng.random::<f64>() < config.p_drop).count();
        let item = |weight: f64| Weighted {
            id: &s.sample_id,
            class: s.class_label as usize,
            tokens,
            weight,
        };
        cond_data.push(item(copies as f64));
        if dropped > 0 {
            null_data.push(item(dropped as f64));
        }
    }
    if cond_data.is_empty() {
        return Err(SimError::NoMembers);
    }

    let mut mu = Vec::with_capacity(config.classes);
    for c in 0..config.classes {
        let (m, w) = weighted_means(&config, &cond_data, Some(c));
        if let Some((pos, &count)) = w.iter().enumerate().find(|(_, &x)| x < 2.0) {
            return Err(SimError::TooFewTokens {
                class: c as u32,
                position: pos,
                count: count as u64,
            });
        }
        mu.push(m);
    }
    let cond = fit_denoiser(&config, &alpha_bar, &cond_data, &mu, 0);

    let (mu_null, uncond) = {
        let (m, w) = weighted_means(&config, &null_data, None);
        if w.iter().all(|&x| x >= 2.0) {
            let den = fit_denoiser(&config, &alpha_bar, &null_data, std::slice::from_ref(&m), 1);
            (Some(m), Some(den))
        } else {
            (None, None)
        }
    };

    Ok(ContinuousToyModel {
        kind: CHECKPOINT_KIND.into(),
        config,
        alpha_bar,
        mu,
        mu_null,
        cond,
        uncond,
    })
}
