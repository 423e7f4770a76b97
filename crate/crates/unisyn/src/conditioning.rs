//! Availability conditions: which modalities are present, curriculum-driven
//! sampling of missing subsets, and zero-imputation of masked channels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Binary availability vector over the M modalities; 1 = available, 0 = missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AvailabilityCondition {
    flags: Vec<u8>,
}

impl AvailabilityCondition {
    pub fn new(flags: Vec<u8>) -> Result<Self> {
        if flags.len() < 2 {
            return Err(Error::InvalidCondition(format!(
                "need at least 2 modalities, got {}",
                flags.len()
            )));
        }
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::InvalidCondition(
                "flags must be 0 or 1".to_string(),
            ));
        }
        Ok(AvailabilityCondition { flags })
    }

    pub fn all_available(m: usize) -> Self {
        AvailabilityCondition {
            flags: vec![1; m],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let flags: Vec<u8> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidCondition(format!(
                    "unexpected character '{other}' in condition string"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(flags)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn is_available(&self, i: usize) -> bool {
        self.flags[i] == 1
    }

    pub fn available_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }

    pub fn missing_count(&self) -> usize {
        self.flags.len() - self.available_count()
    }

    pub fn available_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_available(i)).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_available(i)).collect()
    }

    /// Valid as a generator input: at least one modality present.
    pub fn check_input(&self) -> Result<()> {
        if self.available_count() == 0 {
            return Err(Error::InvalidCondition(
                "no available modality in condition".to_string(),
            ));
        }
        Ok(())
    }

    /// Valid as a training condition: at least one synthesis target exists.
    pub fn check_training(&self) -> Result<()> {
        self.check_input()?;
        if self.missing_count() == 0 {
            return Err(Error::InvalidCondition(
                "no missing modality: nothing to synthesize".to_string(),
            ));
        }
        Ok(())
    }

    /// All conditions with at least one available and one missing modality,
    /// in ascending bit order (modality 0 is the most significant digit).
    pub fn all_valid(m: usize) -> Vec<Self> {
        let mut out = Vec::new();
        for bits in 1..(1u32 << m) - 1 {
            let flags: Vec<u8> = (0..m)
                .map(|i| ((bits >> (m - 1 - i)) & 1) as u8)
                .collect();
            out.push(AvailabilityCondition { flags });
        }
        out
    }
}

impl fmt::Display for AvailabilityCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.flags {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Epoch counts of the easy / moderate / hard curriculum phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub phase_lengths: [usize; 3],
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            phase_lengths: [10, 10, 10],
        }
    }
}

/// How the post-curriculum "random scenario" epochs draw conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UniformPolicy {
    /// Draw the missing count uniformly from {1..M-1}, then a uniform subset.
    #[default]
    CountsFirst,
    /// Draw uniformly over all valid conditions.
    Subsets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingCountRule {
    Fixed(usize),
    Uniform(UniformPolicy),
}

/// Difficulty rule for a given epoch: k=1, then k=2, then k=3 (clamped to
/// M-1), then unconstrained.
pub fn curriculum_missing_count(
    epoch: usize,
    schedule: &CurriculumSchedule,
    m: usize,
    policy: UniformPolicy,
) -> MissingCountRule {
    debug_assert!(m >= 2);
    let [p1, p2, p3] = schedule.phase_lengths;
    let k = if epoch < p1 {
        1
    } else if epoch < p1 + p2 {
        2
    } else if epoch < p1 + p2 + p3 {
        3
    } else {
        return MissingCountRule::Uniform(policy);
    };
    MissingCountRule::Fixed(k.min(m - 1))
}

/// Draw a training condition with the given missing-count rule.
pub fn sample_condition<R: Rng>(
    rng: &mut R,
    rule: MissingCountRule,
    m: usize,
) -> Result<AvailabilityCondition> {
    match rule {
        MissingCountRule::Fixed(k) => sample_fixed(rng, k, m),
        MissingCountRule::Uniform(UniformPolicy::CountsFirst) => {
            let k = rng.gen_range(1..m);
            sample_fixed(rng, k, m)
        }
        MissingCountRule::Uniform(UniformPolicy::Subsets) => loop {
            let flags: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2u8)).collect();
            let ones = flags.iter().filter(|&&f| f == 1).count();
            if ones >= 1 && ones < m {
                return AvailabilityCondition::new(flags);
            }
        },
    }
}

fn sample_fixed<R: Rng>(rng: &mut R, k: usize, m: usize) -> Result<AvailabilityCondition> {
    if k == 0 || k >= m {
        return Err(Error::InvalidCondition(format!(
            "missing count k={k} must satisfy 1 <= k <= M-1 (M={m})"
        )));
    }
    // Partial Fisher-Yates: first k entries of a shuffled index list go missing.
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..k {
        let j = rng.gen_range(i..m);
        idx.swap(i, j);
    }
    let mut flags = vec![1u8; m];
    for &i in &idx[..k] {
        flags[i] = 0;
    }
    AvailabilityCondition::new(flags)
}

/// Replace masked channels with zeros; available channels pass through
/// untouched. Input/output shape is [B, M, H, W].
pub fn zero_impute<F: Scalar>(
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
) -> Result<Array4<F>> {
    let (_, m, _, _) = targets.dim();
    if m != ac.len() {
        return Err(Error::Dimension(format!(
            "batch has {m} modality channels but condition has {}",
            ac.len()
        )));
    }
    ac.check_input()?;
    let mut out = targets.to_owned();
    for i in 0..m {
        if !ac.is_available(i) {
            out.slice_mut(ndarray::s![.., i, .., ..]).fill(F::zero());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn curriculum_phases() {
        let s = CurriculumSchedule::default();
        let p = UniformPolicy::CountsFirst;
        assert_eq!(curriculum_missing_count(5, &s, 4, p), MissingCountRule::Fixed(1));
        assert_eq!(curriculum_missing_count(15, &s, 4, p), MissingCountRule::Fixed(2));
        assert_eq!(curriculum_missing_count(25, &s, 4, p), MissingCountRule::Fixed(3));
        // clamp to M-1 for M=3
        assert_eq!(curriculum_missing_count(25, &s, 3, p), MissingCountRule::Fixed(2));
        assert_eq!(
            curriculum_missing_count(30, &s, 4, p),
            MissingCountRule::Uniform(p)
        );
    }

    #[test]
    fn sample_fixed_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let ac = sample_condition(&mut rng, MissingCountRule::Fixed(3), 4).unwrap();
            assert_eq!(ac.available_count(), 1);
        }
    }

    #[test]
    fn sample_rejects_degenerate_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(sample_condition(&mut rng, MissingCountRule::Fixed(4), 4).is_err());
        assert!(sample_condition(&mut rng, MissingCountRule::Fixed(0), 4).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    sample_condition(&mut rng, MissingCountRule::Uniform(UniformPolicy::CountsFirst), 4)
                        .unwrap()
                        .to_string()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn single_missing_is_roughly_uniform() {
        // 4000 draws of k=1 over M=4: each pattern within 1000 +/- 100.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            let ac = sample_condition(&mut rng, MissingCountRule::Fixed(1), 4).unwrap();
            counts[ac.missing_indices()[0]] += 1;
        }
        for &c in &counts {
            assert!((900..=1100).contains(&c), "counts {counts:?}");
        }
        // chi-square with 3 dof; p > 0.01 means chi2 < 11.34
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - 1000.0;
                d * d / 1000.0
            })
            .sum();
        assert!(chi2 < 11.34, "chi2 = {chi2}");
    }

    #[test]
    fn zero_impute_masks_exactly() {
        let t = Array4::<f64>::from_shape_fn((2, 4, 3, 3), |(b, m, i, j)| {
            (b * 100 + m * 10 + i * 3 + j) as f64 + 1.0
        });
        let ac = AvailabilityCondition::parse("1010").unwrap();
        let out = zero_impute(&t.view(), &ac).unwrap();
        assert_eq!(out.slice(ndarray::s![.., 0, .., ..]), t.slice(ndarray::s![.., 0, .., ..]));
        assert!(out.slice(ndarray::s![.., 1, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(out.slice(ndarray::s![.., 2, .., ..]), t.slice(ndarray::s![.., 2, .., ..]));
        assert!(out.slice(ndarray::s![.., 3, .., ..]).iter().all(|&v| v == 0.0));

        // identity under all-ones
        let full = AvailabilityCondition::parse("1111").unwrap();
        assert_eq!(zero_impute(&t.view(), &full).unwrap(), t);

        // all-zero condition is rejected
        let none = AvailabilityCondition::parse("0000").unwrap();
        assert!(zero_impute(&t.view(), &none).is_err());

        // idempotence
        let once = zero_impute(&t.view(), &ac).unwrap();
        let twice = zero_impute(&once.view(), &ac).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn condition_string_round_trip() {
        let ac = AvailabilityCondition::parse("1011").unwrap();
        assert_eq!(ac.to_string(), "1011");
        assert_eq!(ac.missing_indices(), vec![1]);
        assert!(AvailabilityCondition::parse("10x1").is_err());
    }

    #[test]
    fn all_valid_count() {
        assert_eq!(AvailabilityCondition::all_valid(4).len(), 14);
        assert_eq!(AvailabilityCondition::all_valid(3).len(), 6);
    }
}
