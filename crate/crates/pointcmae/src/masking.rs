//! Dual random masking of patch tokens.
//!
//! Two masks of the same ratio are drawn independently over the n patch
//! tokens; tokens hidden by both masks (the co-masked set) are the ones the
//! contrastive term later aligns. Masks use fixed cardinality floor(ratio*n)
//! drawn without replacement, which guarantees equal mask sizes across
//! branches and makes batch shapes static.
//!
//! The closed-form overlap probability implemented by
//! [`comask_probability`] models each token as masked independently with
//! probability `ratio` per branch; [`comask_mc`] estimates the same
//! quantities by simulation under either that Bernoulli model or the
//! fixed-cardinality sampler actually used, so the two can be compared.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, TensorId};
use rand::{Rng, RngExt};

/// A pair of token masks plus derived index sets. All index lists are
/// sorted ascending; `visible*` complements `m*`; `comask` is the
/// intersection of `m1` and `m2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualMask {
    pub n: usize,
    pub m1: Vec<usize>,
    pub m2: Vec<usize>,
    pub visible1: Vec<usize>,
    pub visible2: Vec<usize>,
    pub comask: Vec<usize>,
}

fn validate(n: usize, ratio: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::arg("mask over zero tokens"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::arg(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok((ratio * n as f64).floor() as usize)
}

fn draw_sorted(n: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

fn intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

impl DualMask {
    /// Draw two masks of floor(ratio*n) tokens each. When both masks could
    /// differ (0 < m < n), identical draws are redrawn so the branches
    /// never see the exact same mask.
    pub fn generate(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<DualMask> {
        let m = validate(n, ratio)?;
        let m1 = draw_sorted(n, m, rng);
        let mut m2 = draw_sorted(n, m, rng);
        if m > 0 && m < n {
            while m2 == m1 {
                m2 = draw_sorted(n, m, rng);
            }
        }
        Ok(Self::from_masks(n, m1, m2))
    }

    /// Single-mask variant: branch 2 reuses branch 1's mask. Used when dual
    /// masking is disabled and only one branch runs.
    pub fn single(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<DualMask> {
        let m = validate(n, ratio)?;
        let m1 = draw_sorted(n, m, rng);
        Ok(Self::from_masks(n, m1.clone(), m1))
    }

    fn from_masks(n: usize, m1: Vec<usize>, m2: Vec<usize>) -> DualMask {
        let visible1 = complement(n, &m1);
        let visible2 = complement(n, &m2);
        let comask = intersection(&m1, &m2);
        DualMask {
            n,
            m1,
            m2,
            visible1,
            visible2,
            comask,
        }
    }

    /// Number of masked tokens per branch.
    pub fn mask_count(&self) -> usize {
        self.m1.len()
    }

    /// Token order produced by branch 1's decoder: visible tokens first,
    /// then masked. `reorder` with this list restores original order.
    pub fn order1(&self) -> Vec<usize> {
        let mut o = self.visible1.clone();
        o.extend_from_slice(&self.m1);
        o
    }

    pub fn order2(&self) -> Vec<usize> {
        let mut o = self.visible2.clone();
        o.extend_from_slice(&self.m2);
        o
    }
}

/// Undo the [visible, masked] row ordering: row `j` of `h` moves to row
/// `order[j]` of the output, so tokens line up positionally across
/// branches. Gradients flow through the permutation.
pub fn reorder<T: Element>(tape: &mut Tape<T>, order: &[usize], h: TensorId) -> Result<TensorId> {
    tape.scatter_rows(h, order)
}

/// Closed-form probability that at least one token is masked by both
/// branches when every token is masked independently with probability
/// `ratio` in each branch: `1 - (1 - ratio^2)^n`.
pub fn comask_probability(n: usize, ratio: f64) -> Result<f64> {
    validate(n, ratio)?;
    Ok(1.0 - (1.0 - ratio * ratio).powi(n as i32))
}

/// Which sampling model a Monte-Carlo estimate simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskModel {
    /// Independent per-token coin flips with probability `ratio`, the model
    /// behind [`comask_probability`]. Mask sizes vary per draw.
    Bernoulli,
    /// Fixed cardinality floor(ratio*n) without replacement, the sampler
    /// used for training (including its identical-draw redraw guard).
    FixedCount,
}

/// Monte-Carlo estimate of co-mask statistics.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub model: MaskModel,
    pub trials: usize,
    /// Fraction of trials with a non-empty co-masked set.
    pub overlap_rate: f64,
    /// Binomial standard error of `overlap_rate`.
    pub overlap_stderr: f64,
    /// Mean number of co-masked tokens.
    pub mean_comask: f64,
    /// Standard error of `mean_comask`.
    pub comask_stderr: f64,
}

/// Estimate overlap probability and mean co-mask size by simulation.
pub fn comask_mc(
    n: usize,
    ratio: f64,
    trials: usize,
    model: MaskModel,
    rng: &mut impl Rng,
) -> Result<McEstimate> {
    validate(n, ratio)?;
    if trials == 0 {
        return Err(Error::arg("monte carlo needs at least one trial"));
    }
    let mut overlaps = 0usize;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for _ in 0..trials {
        let count = match model {
            MaskModel::Bernoulli => {
                let mut c = 0usize;
                for _ in 0..n {
                    let in1 = rng.random::<f64>() < ratio;
                    let in2 = rng.random::<f64>() < ratio;
                    if in1 && in2 {
                        c += 1;
                    }
                }
                c
            }
            MaskModel::FixedCount => DualMask::generate(n, ratio, rng)?.comask.len(),
        };
        if count > 0 {
            overlaps += 1;
        }
        sum += count as f64;
        sumsq += (count * count) as f64;
    }
    let t = trials as f64;
    let rate = overlaps as f64 / t;
    let mean = sum / t;
    let var = (sumsq / t - mean * mean).max(0.0);
    Ok(McEstimate {
        model,
        trials,
        overlap_rate: rate,
        overlap_stderr: (rate * (1.0 - rate) / t).sqrt(),
        mean_comask: mean,
        comask_stderr: (var / t).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_partition_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let dm = DualMask::generate(64, 0.6, &mut rng).unwrap();
        assert_eq!(dm.mask_count(), 38);
        assert_eq!(dm.visible1.len(), 26);
        for (masked, visible) in [(&dm.m1, &dm.visible1), (&dm.m2, &dm.visible2)] {
            let mut all: Vec<usize> = masked.iter().chain(visible.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dual_masks_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let dm = DualMask::generate(8, 0.5, &mut rng).unwrap();
            assert_ne!(dm.m1, dm.m2);
        }
    }

    #[test]
    fn comask_is_sorted_intersection_with_pigeonhole_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let dm = DualMask::generate(10, 0.7, &mut rng).unwrap();
            // m = 7 of 10 tokens, so at least 4 tokens are in both masks.
            assert!(dm.comask.len() >= 4);
            assert!(dm.comask.windows(2).all(|w| w[0] < w[1]));
            for &c in &dm.comask {
                assert!(dm.m1.contains(&c) && dm.m2.contains(&c));
            }
        }
    }

    #[test]
    fn extreme_ratios_are_degenerate_but_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let empty = DualMask::generate(6, 0.0, &mut rng).unwrap();
        assert!(empty.m1.is_empty() && empty.comask.is_empty());
        assert_eq!(empty.visible1, (0..6).collect::<Vec<_>>());
        let full = DualMask::generate(6, 1.0, &mut rng).unwrap();
        assert_eq!(full.m1, (0..6).collect::<Vec<_>>());
        assert_eq!(full.comask, (0..6).collect::<Vec<_>>());
        assert!(full.visible1.is_empty());
    }

    #[test]
    fn single_mode_reuses_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let dm = DualMask::single(16, 0.5, &mut rng).unwrap();
        assert_eq!(dm.m1, dm.m2);
        assert_eq!(dm.comask, dm.m1);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        assert!(DualMask::generate(0, 0.5, &mut rng).is_err());
        assert!(DualMask::generate(8, -0.1, &mut rng).is_err());
        assert!(DualMask::generate(8, 1.5, &mut rng).is_err());
        assert!(comask_probability(8, 2.0).is_err());
        assert!(comask_mc(8, 0.5, 0, MaskModel::Bernoulli, &mut rng).is_err());
    }

    #[test]
    fn closed_form_small_cases() {
        // One token: both masks hit it with probability r^2.
        assert!((comask_probability(1, 0.5).unwrap() - 0.25).abs() < 1e-12);
        // Two tokens at r = 0.5: 1 - (1 - 0.25)^2.
        assert!((comask_probability(2, 0.5).unwrap() - 0.4375).abs() < 1e-12);
        assert_eq!(comask_probability(64, 0.0).unwrap(), 0.0);
        assert_eq!(comask_probability(64, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn closed_form_at_default_settings_is_nearly_one() {
        // 1 - 0.64^64: the miss probability is about 3.94e-13.
        let p = comask_probability(64, 0.6).unwrap();
        let miss = 1.0 - p;
        assert!(miss > 3.8e-13 && miss < 4.1e-13, "miss = {miss:e}");
    }

    #[test]
    fn bernoulli_estimate_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let est = comask_mc(8, 0.5, 20_000, MaskModel::Bernoulli, &mut rng).unwrap();
        let p = comask_probability(8, 0.5).unwrap();
        assert!(
            (est.overlap_rate - p).abs() <= 4.0 * est.overlap_stderr,
            "estimate {} vs closed form {p}",
            est.overlap_rate
        );
        // Mean overlap count under independence is n * r^2 = 2.
        assert!((est.mean_comask - 2.0).abs() <= 4.0 * est.comask_stderr);
    }

    #[test]
    fn fixed_count_estimate_matches_hypergeometric_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let est = comask_mc(64, 0.6, 20_000, MaskModel::FixedCount, &mut rng).unwrap();
        // 38 of 64 masked twice: overlap is certain by pigeonhole and the
        // expected intersection is 38^2 / 64.
        assert_eq!(est.overlap_rate, 1.0);
        let expect = 38.0 * 38.0 / 64.0;
        assert!((est.mean_comask - expect).abs() <= 4.0 * est.comask_stderr);
    }

    #[test]
    fn reorder_restores_original_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let dm = DualMask::generate(6, 0.5, &mut rng).unwrap();
        let rows: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(rows.clone(), 6, 2).unwrap();
        let order = dm.order1();
        let shuffled = tape.gather_rows(x, &order).unwrap();
        let restored = reorder(&mut tape, &order, shuffled).unwrap();
        assert_eq!(tape.value(restored).unwrap(), &rows[..]);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = DualMask::generate(32, 0.6, &mut ChaCha8Rng::seed_from_u64(49)).unwrap();
        let b = DualMask::generate(32, 0.6, &mut ChaCha8Rng::seed_from_u64(49)).unwrap();
        let c = DualMask::generate(32, 0.6, &mut ChaCha8Rng::seed_from_u64(50)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_and_cardinality_hold(
                n in 1usize..40,
                ratio in 0.0f64..=1.0,
                seed in 0u64..1000
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dm = DualMask::generate(n, ratio, &mut rng).unwrap();
                let m = (ratio * n as f64).floor() as usize;
                prop_assert_eq!(dm.m1.len(), m);
                prop_assert_eq!(dm.m2.len(), m);
                prop_assert_eq!(dm.visible1.len(), n - m);
                let mut all: Vec<usize> = dm.m1.iter().chain(dm.visible1.iter()).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                // Pigeonhole lower bound on the intersection.
                prop_assert!(dm.comask.len() >= m.saturating_sub(n - m));
            }
        }
    }
}
