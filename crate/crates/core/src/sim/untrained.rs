//! Untrained models: outputs are keyed pseudo-random functions of the input
//! that never saw any data. Used as the null reference for calibration.

use rand::Rng;
use rand_distr::StandardNormal;

use super::continuous::linear_alpha_bar;
use crate::oracle::{ContinuousOracle, DiscreteOracle};
use crate::rng::{domain, fold_key, stream};

fn class_slot(class: Option<u32>) -> u64 {
    class.map_or(u64::MAX, u64::from)
}

/// Logit scale used for null calibration. Large enough that some positions
/// are low-entropy, as in a trained model.
pub const CALIBRATION_SCALE: f64 = 4.0;

/// Discrete model with standard-normal logits drawn per (class, context).
#[derive(Clone, Debug)]
pub struct UntrainedDiscrete {
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Logit scale.
    pub scale: f64,
}

impl DiscreteOracle for UntrainedDiscrete {
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn has_uncond(&self) -> bool {
        true
    }
    fn logits(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        let words: Vec<u64> = context.iter().map(|&t| u64::from(t)).collect();
        let key = fold_key(context.len() as u64, &words);
        let mut rng = stream(self.seed, &[domain::UNTRAINED, class_slot(class), key]);
        (0..self.vocab)
            .map(|_| self.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Continuous model whose masked prediction is a standard-normal vector keyed
/// by (class, position, visible tokens), paired with the exact noise
/// estimate for that prediction.
#[derive(Clone, Debug)]
pub struct UntrainedContinuous {
    pub dim: usize,
    pub seq_len: usize,
    pub seed: u64,
    alpha_bar: Vec<f64>,
}

impl UntrainedContinuous {
    pub fn new(dim: usize, seq_len: usize, s_max: u32, seed: u64) -> Self {
        UntrainedContinuous {
            dim,
            seq_len,
            seed,
            alpha_bar: linear_alpha_bar(s_max),
        }
    }
}

impl ContinuousOracle for UntrainedContinuous {
    fn dim(&self) -> usize {
        self.dim
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn has_uncond(&self) -> bool {
        true
    }
    fn s_max(&self) -> u32 {
        self.alpha_bar.len() as u32
    }
    fn alpha_bar(&self, s: u32) -> f64 {
        self.alpha_bar[s as usize]
    }
    fn predict_masked(&self, tokens: &[Vec<f64>], mask: &[bool], class: Option<u32>) -> Vec<Vec<f64>> {
        let words: Vec<u64> = tokens
            .iter()
            .zip(mask)
            .filter(|(_, &hidden)| !hidden)
            .flat_map(|(t, _)| t.iter().map(|x| x.to_bits()))
            .collect();
        let visible = fold_key(0, &words);
        (0..tokens.len())
            .map(|i| {
                let mut rng = stream(
                    self.seed,
                    &[domain::UNTRAINED, class_slot(class), visible, (i % self.seq_len) as u64],
                );
                (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect()
    }
    fn predict_noise(&self, noised: &[f64], z: &[f64], s: u32, _class: Option<u32>) -> Vec<f64> {
        let ab = self.alpha_bar[s as usize];
        let scale = (1.0 - ab).sqrt();
        noised.iter().zip(z).map(|(x, z)| (x - ab.sqrt() * z) / scale).collect()
    }
}
