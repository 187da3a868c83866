//! Model interfaces used by trace export, extraction and the output-noise
//! defense.
//!
//! Implementations must be deterministic and safe for concurrent read-only
//! queries.

use rand::Rng;

/// Autoregressive model over a discrete vocabulary.
pub trait DiscreteOracle: Sync {
    fn vocab(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Whether the null class (`class = None`) can be queried.
    fn has_uncond(&self) -> bool;
    /// Next-token logits after `context`. `class = None` is the null class.
    fn logits(&self, context: &[u32], class: Option<u32>) -> Vec<f64>;
    /// Normalized next-token log-probabilities.
    fn log_probs(&self, context: &[u32], class: Option<u32>) -> Vec<f64> {
        log_softmax(&self.logits(context, class))
    }
}

/// Per-token continuous model with a masked predictor and a noise predictor.
pub trait ContinuousOracle: Sync {
    fn dim(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn has_uncond(&self) -> bool;
    /// Number of diffusion timesteps.
    fn s_max(&self) -> u32;
    fn alpha_bar(&self, s: u32) -> f64;
    /// Prediction for every position from the tokens left visible by `mask`
    /// (`true` = hidden). Positions past `seq_len` wrap around, so a sequence
    /// fed twice is a valid input.
    fn predict_masked(&self, tokens: &[Vec<f64>], mask: &[bool], class: Option<u32>) -> Vec<Vec<f64>>;
    /// Noise estimate for a token noised to timestep `s`, given the
    /// conditioning prediction `z` for its position.
    fn predict_noise(&self, noised: &[f64], z: &[f64], s: u32, class: Option<u32>) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Greedy,
    TopK(usize),
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy prediction at every position given the true prefix, as one
/// teacher-forced pass would produce.
pub fn teacher_forced_predict<O: DiscreteOracle + ?Sized>(o: &O, tokens: &[u32], class: Option<u32>) -> Vec<u32> {
    (0..tokens.len())
        .map(|n| argmax(&o.logits(&tokens[..n], class)) as u32)
        .collect()
}

/// Completes `prefix` to `seq_len` tokens by greedy decoding.
pub fn complete_greedy<O: DiscreteOracle + ?Sized>(o: &O, prefix: &[u32], class: Option<u32>) -> Vec<u32> {
    let mut seq = prefix.to_vec();
    while seq.len() < o.seq_len() {
        seq.push(argmax(&o.logits(&seq, class)) as u32);
    }
    seq
}

/// Completes `prefix` with the given sampling rule. `TopK(1)` is greedy.
pub fn complete<O: DiscreteOracle + ?Sized, R: Rng>(
    o: &O,
    prefix: &[u32],
    class: Option<u32>,
    sampling: Sampling,
    rng: &mut R,
) -> Vec<u32> {
    let k = match sampling {
        Sampling::Greedy | Sampling::TopK(0) | Sampling::TopK(1) => return complete_greedy(o, prefix, class),
        Sampling::TopK(k) => k,
    };
    let mut seq = prefix.to_vec();
    while seq.len() < o.seq_len() {
        let logits = o.logits(&seq, class);
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(k);
        let top: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
        let probs: Vec<f64> = log_softmax(&top).into_iter().map(f64::exp).collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = order[order.len() - 1];
        for (&i, p) in order.iter().zip(&probs) {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        seq.push(pick as u32);
    }
    seq
}

/// Fills positions from `prefix.len()` onward with the model's prediction
/// given only the prefix.
pub fn complete_continuous<O: ContinuousOracle + ?Sized>(
    o: &O,
    prefix: &[Vec<f64>],
    class: Option<u32>,
) -> Vec<Vec<f64>> {
    let n = o.seq_len();
    let mut tokens = prefix.to_vec();
    tokens.resize(n, vec![0.0; o.dim()]);
    let mask: Vec<bool> = (0..n).map(|i| i >= prefix.len()).collect();
    let pred = o.predict_masked(&tokens, &mask, class);
    tokens
        .into_iter()
        .zip(pred)
        .zip(&mask)
        .map(|((t, p), &hidden)| if hidden { p } else { t })
        .collect()
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Predicts the token it was built with at every position.
    pub struct CopyOracle {
        pub target: Vec<u32>,
        pub vocab: usize,
    }

    impl DiscreteOracle for CopyOracle {
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn seq_len(&self) -> usize {
            self.target.len()
        }
        fn has_uncond(&self) -> bool {
            true
        }
        fn logits(&self, context: &[u32], _class: Option<u32>) -> Vec<f64> {
            let mut l = vec![0.0; self.vocab];
            l[self.target[context.len() % self.target.len()] as usize] = 5.0;
            l
        }
    }

    /// Uniform logits everywhere.
    pub struct UniformOracle {
        pub vocab: usize,
        pub seq_len: usize,
    }

    impl DiscreteOracle for UniformOracle {
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn seq_len(&self) -> usize {
            self.seq_len
        }
        fn has_uncond(&self) -> bool {
            true
        }
        fn logits(&self, _context: &[u32], _class: Option<u32>) -> Vec<f64> {
            vec![0.0; self.vocab]
        }
    }
}
