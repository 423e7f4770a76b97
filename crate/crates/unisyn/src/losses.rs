//! Masked loss algebra: per-modality pixel-mean L1 terms gated by the
//! availability condition, plus least-squares adversarial terms on patch
//! score maps. Reduction is mean over pixels and batch, sum over modalities.

use crate::conditioning::AvailabilityCondition;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_syn: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_syn: 100.0,
            lambda_rec: 30.0,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_syn < 0.0 || self.lambda_rec < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// All scalar loss terms of one training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_syn: f64,
    pub l_rec: f64,
    pub l_adv: f64,
    pub l_gen_total: f64,
    pub l_dis: f64,
}

impl LossRecord {
    pub fn all_finite(&self) -> Option<&'static str> {
        if !self.l_syn.is_finite() {
            Some("l_syn")
        } else if !self.l_rec.is_finite() {
            Some("l_rec")
        } else if !self.l_adv.is_finite() {
            Some("l_adv")
        } else if !self.l_gen_total.is_finite() {
            Some("l_gen_total")
        } else if !self.l_dis.is_finite() {
            Some("l_dis")
        } else {
            None
        }
    }
}

fn check_shapes<F: Scalar>(outputs: &ArrayView4<F>, targets: &ArrayView4<F>) -> Result<()> {
    if outputs.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "outputs {:?} vs targets {:?}",
            outputs.dim(),
            targets.dim()
        )));
    }
    Ok(())
}

fn masked_l1<F: Scalar>(
    outputs: &ArrayView4<F>,
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
    on_missing: bool,
) -> Result<F> {
    check_shapes(outputs, targets)?;
    let (b, m, h, w) = outputs.dim();
    if m != ac.len() {
        return Err(Error::Dimension(format!(
            "{m} modality channels vs condition of length {}",
            ac.len()
        )));
    }
    let n = F::from_f64c((b * h * w) as f64);
    let mut total = F::zero();
    for i in 0..m {
        if ac.is_available(i) == on_missing {
            continue;
        }
        let o = outputs.slice(ndarray::s![.., i, .., ..]);
        let t = targets.slice(ndarray::s![.., i, .., ..]);
        let mut acc = F::zero();
        ndarray::Zip::from(&o).and(&t).for_each(|&ov, &tv| {
            acc += (ov - tv).abs();
        });
        total += acc / n;
    }
    Ok(total)
}

fn masked_l1_grad<F: Scalar>(
    outputs: &ArrayView4<F>,
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
    on_missing: bool,
) -> Result<Array4<F>> {
    check_shapes(outputs, targets)?;
    let (b, m, h, w) = outputs.dim();
    let n = F::from_f64c((b * h * w) as f64);
    let mut g = Array4::<F>::zeros(outputs.raw_dim());
    for i in 0..m {
        if ac.is_available(i) == on_missing {
            continue;
        }
        let o = outputs.slice(ndarray::s![.., i, .., ..]);
        let t = targets.slice(ndarray::s![.., i, .., ..]);
        let mut gs = g.slice_mut(ndarray::s![.., i, .., ..]);
        ndarray::Zip::from(&mut gs).and(&o).and(&t).for_each(|g, &ov, &tv| {
            *g = if ov > tv {
                F::one() / n
            } else if ov < tv {
                -F::one() / n
            } else {
                F::zero()
            };
        });
    }
    Ok(g)
}

/// Sum over missing modalities of mean |out - target|.
pub fn synthesis_loss<F: Scalar>(
    outputs: &ArrayView4<F>,
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
) -> Result<F> {
    masked_l1(outputs, targets, ac, true)
}

pub fn synthesis_loss_grad<F: Scalar>(
    outputs: &ArrayView4<F>,
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
) -> Result<Array4<F>> {
    masked_l1_grad(outputs, targets, ac, true)
}

/// Sum over available modalities of mean |out - target|.
pub fn reconstruction_loss<F: Scalar>(
    outputs: &ArrayView4<F>,
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
) -> Result<F> {
    masked_l1(outputs, targets, ac, false)
}

pub fn reconstruction_loss_grad<F: Scalar>(
    outputs: &ArrayView4<F>,
    targets: &ArrayView4<F>,
    ac: &AvailabilityCondition,
) -> Result<Array4<F>> {
    masked_l1_grad(outputs, targets, ac, false)
}

fn mean_sq<F: Scalar>(map: &ArrayView4<F>, shift: F) -> F {
    let n = F::from_f64c(map.len() as f64);
    let mut acc = F::zero();
    for &v in map.iter() {
        let d = v - shift;
        acc += d * d;
    }
    acc / n
}

/// Generator-side adversarial loss: for each missing modality,
/// mean (Dis(fake) - 1)^2 + mean Dis(real)^2. The second term carries no
/// generator gradient; it is included in the reported value as printed.
pub fn generator_adversarial_loss<F: Scalar>(
    fake_scores: &[Array4<F>],
    real_scores: &[Array4<F>],
    ac: &AvailabilityCondition,
) -> Result<F> {
    check_score_sets(fake_scores, real_scores, ac)?;
    let mut total = F::zero();
    for i in ac.missing_indices() {
        total += mean_sq(&fake_scores[i].view(), F::one());
        total += mean_sq(&real_scores[i].view(), F::zero());
    }
    Ok(total)
}

/// d(generator adversarial loss)/d(fake score map) for one missing modality.
pub fn generator_adversarial_score_grad<F: Scalar>(fake_score: &ArrayView4<F>) -> Array4<F> {
    let n = F::from_f64c(fake_score.len() as f64);
    let two = F::from_f64c(2.0);
    fake_score.mapv(|v| two * (v - F::one()) / n)
}

/// Discriminator loss: for each missing modality,
/// mean Dis(fake)^2 + mean (Dis(real) - 1)^2.
pub fn discriminator_loss<F: Scalar>(
    fake_scores: &[Array4<F>],
    real_scores: &[Array4<F>],
    ac: &AvailabilityCondition,
) -> Result<F> {
    check_score_sets(fake_scores, real_scores, ac)?;
    let mut total = F::zero();
    for i in ac.missing_indices() {
        total += mean_sq(&fake_scores[i].view(), F::zero());
        total += mean_sq(&real_scores[i].view(), F::one());
    }
    Ok(total)
}

/// d(discriminator loss)/d(fake score map) and /d(real score map).
pub fn discriminator_score_grads<F: Scalar>(
    fake_score: &ArrayView4<F>,
    real_score: &ArrayView4<F>,
) -> (Array4<F>, Array4<F>) {
    let two = F::from_f64c(2.0);
    let nf = F::from_f64c(fake_score.len() as f64);
    let nr = F::from_f64c(real_score.len() as f64);
    (
        fake_score.mapv(|v| two * v / nf),
        real_score.mapv(|v| two * (v - F::one()) / nr),
    )
}

fn check_score_sets<F: Scalar>(
    fake: &[Array4<F>],
    real: &[Array4<F>],
    ac: &AvailabilityCondition,
) -> Result<()> {
    if fake.len() != ac.len() || real.len() != ac.len() {
        return Err(Error::Dimension(
            "score map count does not match modality count".to_string(),
        ));
    }
    for i in ac.missing_indices() {
        if fake[i].dim() != real[i].dim() {
            return Err(Error::Dimension(format!(
                "fake/real score shapes differ for modality {i}"
            )));
        }
    }
    Ok(())
}

/// lambda_syn * l_syn + lambda_rec * l_rec + lambda_adv * l_adv
pub fn total_generator_loss<F: Scalar>(l_syn: F, l_rec: F, l_adv: F, w: &LossWeights) -> F {
    F::from_f64c(w.lambda_syn) * l_syn
        + F::from_f64c(w.lambda_rec) * l_rec
        + F::from_f64c(w.lambda_adv) * l_adv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::AvailabilityCondition;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ac(s: &str) -> AvailabilityCondition {
        AvailabilityCondition::parse(s).unwrap()
    }

    #[test]
    fn synthesis_loss_examples() {
        let t = Array4::<f64>::zeros((1, 2, 2, 2));
        let mut o = t.clone();
        o.slice_mut(ndarray::s![.., 1, .., ..]).fill(0.3);
        // mean |o_2 - t_2| = 0.3 with modality 2 missing
        let v = synthesis_loss(&o.view(), &t.view(), &ac("10")).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        // exact outputs -> 0
        assert_eq!(synthesis_loss(&t.view(), &t.view(), &ac("10")).unwrap(), 0.0);
        // all-available -> 0 regardless
        assert_eq!(synthesis_loss(&o.view(), &t.view(), &ac("11")).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let t = Array4::<f64>::zeros((1, 2, 2, 2));
        let mut o = t.clone();
        o.slice_mut(ndarray::s![.., 0, .., ..]).fill(0.2);
        let v = reconstruction_loss(&o.view(), &t.view(), &ac("10")).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        assert_eq!(
            reconstruction_loss(&o.view(), &t.view(), &ac("00")).unwrap(),
            0.0
        );
        assert_eq!(reconstruction_loss(&t.view(), &t.view(), &ac("10")).unwrap(), 0.0);
    }

    #[test]
    fn adversarial_loss_examples() {
        let ones = vec![Array4::<f64>::ones((1, 1, 3, 3)); 2];
        let zeros = vec![Array4::<f64>::zeros((1, 1, 3, 3)); 2];
        // Dis(fake)=1 and Dis(real)=0 everywhere -> generator loss 0
        let v = generator_adversarial_loss(&ones, &zeros, &ac("10")).unwrap();
        assert_eq!(v, 0.0);
        // Dis(fake)=0 and Dis(real)=0 -> (0-1)^2 + 0 = 1
        let v = generator_adversarial_loss(&zeros, &zeros, &ac("10")).unwrap();
        assert_eq!(v, 1.0);
        // all-available -> 0
        let v = generator_adversarial_loss(&zeros, &zeros, &ac("11")).unwrap();
        assert_eq!(v, 0.0);
        // discriminator: ideal split -> 0
        let v = discriminator_loss(&zeros, &ones, &ac("10")).unwrap();
        assert_eq!(v, 0.0);
        // Dis(fake)=1, Dis(real)=1 -> 1
        let v = discriminator_loss(&ones, &ones, &ac("10")).unwrap();
        assert_eq!(v, 1.0);
        let v = discriminator_loss(&ones, &ones, &ac("11")).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn total_loss_worked_example() {
        let w = LossWeights::default();
        let v = total_generator_loss(0.1f64, 0.2, 0.5, &w);
        assert!((v - 16.5).abs() < 1e-12);
        assert_eq!(total_generator_loss(0.0f64, 0.0, 0.0, &w), 0.0);
        let proj = LossWeights {
            lambda_syn: 1.0,
            lambda_rec: 0.0,
            lambda_adv: 0.0,
        };
        assert_eq!(total_generator_loss(0.7f64, 0.9, 0.3, &proj), 0.7);
    }

    #[test]
    fn complementarity_partition() {
        // syn(ac) + rec(ac) == syn(all-zero) == rec(all-one), for any draws.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let o = Array4::<f64>::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
            let t = Array4::<f64>::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
            let cond = ac("1010");
            let s = synthesis_loss(&o.view(), &t.view(), &cond).unwrap();
            let r = reconstruction_loss(&o.view(), &t.view(), &cond).unwrap();
            let full_s = synthesis_loss(&o.view(), &t.view(), &ac("0000")).unwrap();
            let full_r = reconstruction_loss(&o.view(), &t.view(), &ac("1111")).unwrap();
            assert!((s + r - full_s).abs() < 1e-12);
            assert!((full_s - full_r).abs() < 1e-12);
        }
    }
}
