//! Context-aware signals over a per-token loss trajectory.
//!
//! Inputs are losses (negated log-likelihoods, or repeat-averaged diffusion
//! losses). Each public feature is returned member-oriented.

use super::AttackError;

/// Embedding dimension for approximate entropy.
pub const APEN_M: usize = 2;
/// Tolerance for approximate entropy, as a fraction of the sequence std.
pub const APEN_R_FRACTION: f64 = 0.2;
/// Quantization levels used before Lempel-Ziv parsing.
pub const LZ_LEVELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamiaFeatures {
    pub slope: f64,
    pub apen: f64,
    pub lz: f64,
    pub count_below: f64,
    pub rep_amp: Option<f64>,
}

/// All CAMIA features. `gamma` defaults to the mean loss of the sequence.
pub fn camia_features(
    losses: &[f64],
    repeated: Option<&[f64]>,
    gamma: Option<f64>,
) -> Result<CamiaFeatures, AttackError> {
    Ok(CamiaFeatures {
        slope: slope_score(losses)?,
        apen: apen_score(losses)?,
        lz: lz_score(losses)?,
        count_below: count_below_score(losses, gamma)?,
        rep_amp: repeated.map(|r| rep_amp_score(losses, r)).transpose()?,
    })
}

/// Least-squares slope of loss against position index.
pub fn raw_slope(losses: &[f64]) -> Result<f64, AttackError> {
    let n = losses.len();
    if n < 3 {
        return Err(AttackError::TooShort(n));
    }
    let xm = (n as f64 - 1.0) / 2.0;
    let ym = losses.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in losses.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Negated slope: a steeper decline scores higher.
pub fn slope_score(losses: &[f64]) -> Result<f64, AttackError> {
    Ok(-raw_slope(losses)?)
}

fn pop_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

/// Approximate entropy ApEn(m, r) with self-matches counted.
pub fn approximate_entropy(xs: &[f64], m: usize, r: f64) -> f64 {
    let n = xs.len();
    if r <= 0.0 || n < m + 2 {
        return 0.0;
    }
    let phi = |m: usize| -> f64 {
        let count = n - m + 1;
        let mut total = 0.0;
        for i in 0..count {
            let matches = (0..count)
                .filter(|&j| (0..m).all(|k| (xs[i + k] - xs[j + k]).abs() <= r))
                .count();
            total += (matches as f64 / count as f64).ln();
        }
        total / count as f64
    };
    phi(m) - phi(m + 1)
}

/// Negated approximate entropy (m = 2, r = 0.2 std). Constant sequences give 0.
pub fn apen_score(losses: &[f64]) -> Result<f64, AttackError> {
    if losses.is_empty() {
        return Err(AttackError::Empty);
    }
    let r = APEN_R_FRACTION * pop_std(losses);
    Ok(-approximate_entropy(losses, APEN_M, r))
}

/// Uniform quantization into `levels` bins spanning [min, max].
pub fn quantize(xs: &[f64], levels: usize) -> Vec<u8> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    xs.iter()
        .map(|&x| {
            if width <= 0.0 {
                0
            } else {
                (((x - lo) / width * levels as f64).floor() as usize).min(levels - 1) as u8
            }
        })
        .collect()
}

/// Lempel-Ziv (1976) complexity: number of phrases in the exhaustive
/// parsing, computed with the Kaspar-Schuster scan.
pub fn lz76_complexity(s: &[u8]) -> usize {
    let n = s.len();
    if n <= 1 {
        return n;
    }
    let (mut c, mut l, mut i, mut k, mut k_max) = (1usize, 1usize, 0usize, 1usize, 1usize);
    loop {
        if s[i + k - 1] == s[l + k - 1] {
            k += 1;
            if l + k > n {
                c += 1;
                break;
            }
        } else {
            k_max = k_max.max(k);
            i += 1;
            if i == l {
                c += 1;
                l += k_max;
                if l + 1 > n {
                    break;
                }
                i = 0;
                k = 1;
                k_max = 1;
            } else {
                k = 1;
            }
        }
    }
    c
}

/// Negated LZ76 phrase count of the 8-level quantized loss sequence.
pub fn lz_score(losses: &[f64]) -> Result<f64, AttackError> {
    if losses.is_empty() {
        return Err(AttackError::Empty);
    }
    Ok(-(lz76_complexity(&quantize(losses, LZ_LEVELS)) as f64))
}

/// Fraction of tokens with loss strictly below `gamma` (default: the
/// sequence's own mean loss).
pub fn count_below_score(losses: &[f64], gamma: Option<f64>) -> Result<f64, AttackError> {
    if losses.is_empty() {
        return Err(AttackError::Empty);
    }
    let gamma = gamma.unwrap_or_else(|| losses.iter().sum::<f64>() / losses.len() as f64);
    Ok(losses.iter().filter(|&&l| l < gamma).count() as f64 / losses.len() as f64)
}

/// Negated loss drop between the first pass and a repeated pass.
pub fn rep_amp_score(first: &[f64], second: &[f64]) -> Result<f64, AttackError> {
    if first.is_empty() || second.is_empty() {
        return Err(AttackError::Empty);
    }
    let m1 = first.iter().sum::<f64>() / first.len() as f64;
    let m2 = second.iter().sum::<f64>() / second.len() as f64;
    Ok(-(m1 - m2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct LZ76 exhaustive parsing: each phrase is the shortest word
    /// starting at `pos` that does not occur in the text before its last
    /// symbol.
    fn lz76_reference(s: &[u8]) -> usize {
        let n = s.len();
        let mut pos = 0;
        let mut phrases = 0;
        while pos < n {
            let mut len = 1;
            while pos + len <= n {
                let word = &s[pos..pos + len];
                let history = &s[..pos + len - 1];
                let seen = history.windows(len).any(|w| w == word);
                if !seen {
                    break;
                }
                len += 1;
            }
            phrases += 1;
            pos += len;
        }
        phrases
    }

    #[test]
    fn slope_on_three_points() {
        assert_eq!(raw_slope(&[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(slope_score(&[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(raw_slope(&[1.0, 2.0]), Err(AttackError::TooShort(2)));
    }

    #[test]
    fn count_below_examples() {
        assert!((count_below_score(&[0.5, 1.5, 2.5], Some(1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // Default threshold is the sequence mean (1.5).
        assert!((count_below_score(&[0.5, 1.5, 2.5], None).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_sequence() {
        let c = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(apen_score(&c).unwrap(), 0.0);
        assert_eq!(quantize(&c, LZ_LEVELS), vec![0, 0, 0, 0]);
        assert_eq!(lz76_complexity(&[0, 0, 0, 0]), 2);
        assert_eq!(lz76_reference(&[0, 0, 0, 0]), 2);
        assert_eq!(lz_score(&c).unwrap(), -2.0);
    }

    #[test]
    fn lz76_known_strings() {
        // Kaspar & Schuster's worked example: 0·001·10·100·1000·101 -> 6 phrases.
        let s: Vec<u8> = "0001101001000101".bytes().map(|b| b - b'0').collect();
        assert_eq!(lz76_complexity(&s), 6);
        assert_eq!(lz76_reference(&s), 6);
    }

    #[test]
    fn apen_matches_hand_computation() {
        // Alternating 0/1 sequence, r = 0.1: windows only match exact twins.
        let alt = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let r = APEN_R_FRACTION * pop_std(&alt);
        let ap = approximate_entropy(&alt, 2, r);
        // phi_2: 7 windows, four "01" and three "10"; phi_3: three of each.
        let phi2 = (4.0 * (4.0f64 / 7.0).ln() + 3.0 * (3.0f64 / 7.0).ln()) / 7.0;
        let phi3 = (3.0 * (3.0f64 / 6.0).ln() + 3.0 * (3.0f64 / 6.0).ln()) / 6.0;
        assert!((ap - (phi2 - phi3)).abs() < 1e-12);
    }

    #[test]
    fn rep_amp_orientation() {
        // A strong drop on repetition is nonmember-like: low score.
        let strong = rep_amp_score(&[3.0, 3.0], &[1.0, 1.0]).unwrap();
        let weak = rep_amp_score(&[1.0, 1.0], &[0.9, 0.9]).unwrap();
        assert!(strong < weak);
    }

    proptest! {
        #[test]
        fn lz76_scan_matches_reference(s in proptest::collection::vec(0u8..4, 1..64)) {
            prop_assert_eq!(lz76_complexity(&s), lz76_reference(&s));
        }

        #[test]
        fn quantized_levels_in_range(xs in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let q = quantize(&xs, LZ_LEVELS);
            prop_assert!(q.iter().all(|&l| (l as usize) < LZ_LEVELS));
        }
    }
}
