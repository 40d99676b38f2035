//! Outage-history blockage estimate and per-slot choice of the subset size.

use std::collections::VecDeque;

use crate::blockage::SubsetError;
use crate::channel::ChannelState;

/// Probability that at least `l` of `n` independent links survive when each
/// is blocked with probability `rho`.
pub fn success_prob(n: usize, l: usize, rho: f64) -> Result<f64, SubsetError> {
    if l < 1 || l > n {
        return Err(SubsetError::Range { n, l });
    }
    let mut binom = 1.0;
    let mut sum = 0.0;
    for i in 0..=n - l {
        if i > 0 {
            binom *= (n - i + 1) as f64 / i as f64;
        }
        sum += binom * (1.0 - rho).powi((n - i) as i32) * rho.powi(i as i32);
    }
    Ok(sum.clamp(0.0, 1.0))
}

pub fn outage_prob(n: usize, l: usize, rho: f64) -> Result<f64, SubsetError> {
    success_prob(n, l, rho).map(|p| 1.0 - p)
}

/// Largest `L` whose success probability is still at least `1 - eps`;
/// 1 when no size qualifies.
pub fn select_l(n: usize, rho: f64, eps: f64) -> usize {
    (1..=n)
        .rev()
        .find(|&l| success_prob(n, l, rho).is_ok_and(|p| p >= 1.0 - eps))
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockageEstimate {
    pub rho: f64,
    /// Number of indicators averaged.
    pub window: usize,
}

/// Mean of the last `min(tau, t - 1)` outage indicators of slot `t`
/// (1-based); `prior` while there is no history.
pub fn estimate_blockage(history: &VecDeque<bool>, tau: usize, t: usize, prior: f64) -> BlockageEstimate {
    let delta = tau.min(t.saturating_sub(1)).min(history.len());
    if delta == 0 {
        return BlockageEstimate { rho: prior, window: 0 };
    }
    let hits = history.iter().rev().take(delta).filter(|&&x| x).count();
    BlockageEstimate {
        rho: hits as f64 / delta as f64,
        window: delta,
    }
}

/// Serving RRU of the coordinated-beamforming baseline: the strongest
/// nominal link, lowest index on ties.
pub fn strongest_rru(h: &ChannelState, k: usize, candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    let mut gain = f64::NEG_INFINITY;
    for &b in candidates {
        let g = h.norm_sqr(b, k);
        if g > gain {
            best = b;
            gain = g;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(n: usize, l: usize, rho: f64) -> f64 {
        // enumerate all up/down patterns
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize >= l)
            .map(|m| {
                let up = m.count_ones() as i32;
                (1.0 - rho).powi(up) * rho.powi(n as i32 - up)
            })
            .sum()
    }

    #[test]
    fn success_examples() {
        for n in 1..=6 {
            for l in 1..=n {
                assert_eq!(success_prob(n, l, 0.0).unwrap(), 1.0);
                assert_eq!(outage_prob(n, l, 0.0).unwrap(), 0.0);
            }
        }
        let p = success_prob(4, 2, 0.1).unwrap();
        assert!((p - 0.9963).abs() < 5e-5, "{p}");
        assert!((success_prob(4, 4, 0.5).unwrap() - 0.0625).abs() < 1e-15);
        assert!((outage_prob(4, 4, 0.5).unwrap() - 0.9375).abs() < 1e-15);
        assert!(success_prob(4, 5, 0.1).is_err());
        assert!(success_prob(4, 0, 0.1).is_err());
    }

    #[test]
    fn success_matches_pattern_enumeration_and_is_monotone() {
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for n in 1..=8 {
            for l in 1..=n {
                for (i, &rho) in grid.iter().enumerate() {
                    let p = success_prob(n, l, rho).unwrap();
                    assert!((p - direct(n, l, rho)).abs() < 1e-12);
                    if l > 1 {
                        assert!(p <= success_prob(n, l - 1, rho).unwrap() + 1e-15);
                    }
                    if i > 0 {
                        assert!(p <= success_prob(n, l, grid[i - 1]).unwrap() + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn success_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples = 1_000_000;
        let (n, l, rho) = (4, 2, 0.1);
        let hits = (0..samples)
            .filter(|_| (0..n).filter(|_| rng.random::<f64>() >= rho).count() >= l)
            .count();
        let p = success_prob(n, l, rho).unwrap();
        let se = (p * (1.0 - p) / samples as f64).sqrt();
        assert!((hits as f64 / samples as f64 - p).abs() <= 3.0 * se);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_l(4, 0.0, 0.1), 4);
        assert_eq!(select_l(4, 0.1, 0.1), 3);
        assert_eq!(select_l(4, 0.9, 0.01), 1);
        assert!((success_prob(4, 3, 0.1).unwrap() - 0.9477).abs() < 1e-4);
        assert!((success_prob(4, 4, 0.1).unwrap() - 0.6561).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn select_is_the_threshold_crossing(n in 1usize..=8, rho in 0.0f64..=1.0, eps in 0.001f64..0.999) {
            let l = select_l(n, rho, eps);
            prop_assert!((1..=n).contains(&l));
            let feasible: Vec<usize> = (1..=n).filter(|&x| success_prob(n, x, rho).unwrap() >= 1.0 - eps).collect();
            match feasible.iter().max() {
                Some(&m) => prop_assert_eq!(l, m),
                None => prop_assert_eq!(l, 1),
            }
        }
    }

    #[test]
    fn estimator() {
        let empty = VecDeque::new();
        assert_eq!(estimate_blockage(&empty, 50, 1, 0.0), BlockageEstimate { rho: 0.0, window: 0 });
        assert_eq!(estimate_blockage(&empty, 50, 1, 0.3).rho, 0.3);
        let zeros: VecDeque<bool> = vec![false; 10].into();
        assert_eq!(estimate_blockage(&zeros, 50, 11, 0.5).rho, 0.0);
        let h: VecDeque<bool> = vec![true, false, true, false].into();
        let e = estimate_blockage(&h, 50, 5, 0.0);
        assert_eq!((e.rho, e.window), (0.5, 4));
        // window shorter than history: most recent entries only
        let e = estimate_blockage(&h, 2, 5, 0.0);
        assert_eq!((e.rho, e.window), (0.5, 2));
        let h: VecDeque<bool> = vec![false, false, true].into();
        assert_eq!(estimate_blockage(&h, 1, 4, 0.0).rho, 1.0);
    }

    #[test]
    fn strongest_link_wins() {
        let mut h = ChannelState::zeros(3, 1, 1, 0);
        h.h_mut(0, 0)[0] = Complex64::new(1.0, 0.0);
        h.h_mut(1, 0)[0] = Complex64::new(0.0, 3.0);
        h.h_mut(2, 0)[0] = Complex64::new(3.0, 0.0);
        assert_eq!(strongest_rru(&h, 0, &[0, 1, 2]), 1);
        assert_eq!(strongest_rru(&h, 0, &[0, 2]), 2);
    }
}
