use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Denominator form of the soft Dice coefficient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceVariant {
    /// `Σp² + Σg² + s`
    #[default]
    Squared,
    /// `Σp + Σg + s`
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceLoss<T> {
    /// `1 - dice`.
    pub loss: f64,
    pub dice: f64,
    /// Gradient of `loss` with respect to each prediction.
    pub grad: Tensor<T>,
}

/// Soft Dice loss over the whole batch:
/// `1 - (2·Σ p·g + s) / (Σ p² + Σ g² + s)` for the squared variant.
pub fn soft_dice_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
    variant: DiceVariant,
) -> Result<DiceLoss<T>> {
    target.expect_shape(pred.shape(), "soft_dice_loss target")?;
    if let Some(v) = target
        .data()
        .iter()
        .find(|v| **v != T::ZERO && **v != T::ONE)
    {
        return Err(Error::Value(format!("target must be binary, found {v:?}")));
    }
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let (p, g) = (p.to_f64(), g.to_f64());
        inter += p * g;
        match variant {
            DiceVariant::Squared => {
                sp += p * p;
                sg += g * g;
            }
            DiceVariant::Plain => {
                sp += p;
                sg += g;
            }
        }
    }
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    if den == 0.0 {
        return Err(Error::Degenerate(
            "empty prediction and target with zero smoothing".into(),
        ));
    }
    let dice = num / den;
    let den2 = den * den;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let (p, g) = (p.to_f64(), g.to_f64());
            let dden = match variant {
                DiceVariant::Squared => 2.0 * p,
                DiceVariant::Plain => 1.0,
            };
            T::from_f64(-(2.0 * g * den - num * dden) / den2)
        })
        .collect();
    Ok(DiceLoss {
        loss: 1.0 - dice,
        dice,
        grad: Tensor::from_vec(pred.shape(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_overlap_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g: Vec<f64> = (0..4096).map(|i| if i < 1500 || rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let t = Tensor::from_vec([1, 1, 64, 64], g).unwrap();
        let l = soft_dice_loss(&t, &t, 1.0, DiceVariant::Squared).unwrap();
        assert!(l.loss.abs() < 1e-9);
    }

    #[test]
    fn half_prediction_closed_form() {
        let n = 1000;
        let p = Tensor::<f64>::full([1, 1, 1, n], 0.5);
        let g = Tensor::<f64>::full([1, 1, 1, n], 1.0);
        let l = soft_dice_loss(&p, &g, 0.0, DiceVariant::Squared).unwrap();
        // 2(0.5N) / (0.25N + N)
        assert!((l.dice - 0.8).abs() < 1e-9);
        assert!((l.loss - 0.2).abs() < 1e-9);
    }

    #[test]
    fn empty_with_smoothing_is_zero() {
        let z = Tensor::<f64>::zeros([2, 1, 4, 4]);
        let l = soft_dice_loss(&z, &z, 1.0, DiceVariant::Squared).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(soft_dice_loss(&z, &z, 0.0, DiceVariant::Squared).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Tensor::<f64>::zeros([1, 1, 2, 2]);
        assert!(soft_dice_loss(&p, &Tensor::zeros([1, 1, 2, 3]), 1.0, DiceVariant::Squared).is_err());
        assert!(soft_dice_loss(&p, &Tensor::full([1, 1, 2, 2], 0.5), 1.0, DiceVariant::Squared).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for variant in [DiceVariant::Squared, DiceVariant::Plain] {
            let p: Vec<f64> = (0..60).map(|_| rng.random_range(0.01..0.99)).collect();
            let g: Vec<f64> = (0..60).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let gt = Tensor::from_vec([2, 1, 5, 6], g).unwrap();
            let pt = Tensor::from_vec([2, 1, 5, 6], p.clone()).unwrap();
            let analytic = soft_dice_loss(&pt, &gt, 1.0, variant).unwrap().grad.into_vec();
            let report = grad_check(
                |x| {
                    let t = Tensor::from_vec([2, 1, 5, 6], x.to_vec()).unwrap();
                    soft_dice_loss(&t, &gt, 1.0, variant).unwrap().loss
                },
                &p,
                &analytic,
                STEP,
            );
            assert!(report.passes(1e-5), "{variant:?}: {report:?}");
        }
    }
}
