//! Local shuffling followed by masking.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// No token moves more than this many positions.
    pub max_shift: usize,
    /// Per-position probability of replacement by the mask id.
    pub p_mask: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            max_shift: 3,
            p_mask: 0.1,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::InvalidConfig("p_mask must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Permutation with displacement at most `max_shift`: each index `i` gets
/// key `i + U[0, max_shift + 1)` and indices are stably sorted by key.
pub fn local_permutation<R: Rng + ?Sized>(len: usize, max_shift: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if max_shift == 0 || len < 2 {
        return order;
    }
    let span = (max_shift + 1) as f64;
    let keys: Vec<f64> = (0..len).map(|i| i as f64 + rng.random::<f64>() * span).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order
}

/// Shuffles `tokens` locally, then replaces positions by `mask_id` with
/// probability `p_mask`. Length is preserved.
pub fn apply_noise<R: Rng + ?Sized>(tokens: &[u32], params: &NoiseParams, mask_id: u32, rng: &mut R) -> Vec<u32> {
    let order = local_permutation(tokens.len(), params.max_shift, rng);
    order
        .into_iter()
        .map(|i| {
            if params.p_mask > 0.0 && rng.random::<f64>() < params.p_mask {
                mask_id
            } else {
                tokens[i]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;

    const MASK: u32 = 3;

    #[test]
    fn zero_noise_is_identity() {
        let mut r = rng::stream(1, 0, 0);
        let t = vec![10, 11, 12, 13];
        let p = NoiseParams {
            max_shift: 0,
            p_mask: 0.0,
        };
        assert_eq!(apply_noise(&t, &p, MASK, &mut r), t);
    }

    #[test]
    fn five_tokens_with_defaults() {
        let t = [10u32, 11, 12, 13, 14];
        for seed in 0..200 {
            let mut r = rng::stream(seed, 0, 0);
            let out = apply_noise(&t, &NoiseParams::default(), MASK, &mut r);
            assert_eq!(out.len(), 5);
            for (pos, tok) in out.iter().enumerate() {
                if *tok == MASK {
                    continue;
                }
                assert_eq!(out.iter().filter(|x| *x == tok).count(), 1);
                let orig = (*tok - 10) as usize;
                assert!(orig.abs_diff(pos) <= 3);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let t: Vec<u32> = (10..40).collect();
        let a = apply_noise(&t, &NoiseParams::default(), MASK, &mut rng::stream(5, 1, 2));
        let b = apply_noise(&t, &NoiseParams::default(), MASK, &mut rng::stream(5, 1, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn bad_probability_rejected() {
        let p = NoiseParams {
            max_shift: 3,
            p_mask: 1.5,
        };
        assert!(p.validate().is_err());
    }
}
