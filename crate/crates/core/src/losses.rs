//! Class-balanced segmentation cross-entropy, squared endpoint-error flow
//! loss and their weighted combination. Each loss has a `_grad` variant
//! returning the gradient with respect to the network output alongside the
//! value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub reduction: Reduction,
}

/// Foreground fraction `|fg| / (|fg| + |bg|)`.
pub fn fg_bg_weight(mask: &Mask) -> f64 {
    let total = mask.data().len();
    assert!(total > 0, "mask has no pixels");
    mask.count() as f64 / total as f64
}

fn check_logits(logits: &Tensor, mask: &Mask) -> Result<()> {
    let (c, h, w) = logits.dims3();
    if c != 2 || (h, w) != mask.shape() {
        return Err(Error::Shape(format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape())));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("segmentation logits"));
    }
    Ok(())
}

/// Log-probabilities `(log p_bg, log p_fg)` and probabilities of a logit pair.
#[inline]
fn log_softmax2(bg: f64, fg: f64) -> (f64, f64, f64, f64) {
    let m = bg.max(fg);
    let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
    let (lb, lf) = (bg - lse, fg - lse);
    (lb, lf, lb.exp(), lf.exp())
}

/// Class-balanced pixel-wise softmax cross-entropy:
/// `-(1-w) Σ_fg log p(fg) - w Σ_bg log p(bg)`.
pub fn weighted_seg_loss(logits: &Tensor, mask: &Mask, reduction: Reduction) -> Result<LossValue> {
    weighted_seg_loss_grad(logits, mask, reduction).map(|(l, _)| l)
}

pub fn weighted_seg_loss_grad(logits: &Tensor, mask: &Mask, reduction: Reduction) -> Result<(LossValue, Tensor)> {
    check_logits(logits, mask)?;
    let w = fg_bg_weight(mask);
    let n = mask.data().len();
    let norm = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let bg = logits.channel(0);
    let fg = logits.channel(1);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    {
        let (gb, gf) = grad.data_mut().split_at_mut(n);
        for (i, &is_fg) in mask.data().iter().enumerate() {
            let (lb, lf, pb, pf) = log_softmax2(bg[i], fg[i]);
            if is_fg {
                let c = (1.0 - w) * norm;
                total -= c * lf;
                gb[i] = c * pb;
                gf[i] = -c * pb;
            } else {
                let c = w * norm;
                total -= c * lb;
                gb[i] = -c * pf;
                gf[i] = c * pf;
            }
        }
    }
    Ok((LossValue { value: total, reduction }, grad))
}

fn check_flow(pred: &Tensor, gt: &Tensor, valid: Option<&Mask>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.dims3().0 != 2 {
        return Err(Error::Shape(format!("flow prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if let Some(v) = valid {
        if v.shape() != pred.spatial() {
            return Err(Error::Shape(format!("flow_valid {:?} vs flow {:?}", v.shape(), pred.spatial())));
        }
    }
    Ok(())
}

/// Squared endpoint error `Σ_valid (u - δu)² + (v - δv)²`. Pixels outside
/// `valid` are ignored; `None` means every pixel is valid.
pub fn epe_loss(pred: &Tensor, gt: &Tensor, valid: Option<&Mask>, reduction: Reduction) -> Result<LossValue> {
    epe_loss_grad(pred, gt, valid, reduction).map(|(l, _)| l)
}

pub fn epe_loss_grad(pred: &Tensor, gt: &Tensor, valid: Option<&Mask>, reduction: Reduction) -> Result<(LossValue, Tensor)> {
    check_flow(pred, gt, valid)?;
    let (_, h, w) = pred.dims3();
    let n = h * w;
    let is_valid = |i: usize| valid.is_none_or(|m| m.data()[i]);
    let count = (0..n).filter(|&i| is_valid(i)).count();
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let norm = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / count as f64,
    };
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for c in 0..2 {
        let p = pred.channel(c);
        let g = gt.channel(c);
        let out = grad.channel_mut(c);
        for i in (0..n).filter(|&i| is_valid(i)) {
            let r = p[i] - g[i];
            total += r * r;
            out[i] = 2.0 * r * norm;
        }
    }
    Ok((
        LossValue {
            value: total * norm,
            reduction,
        },
        grad,
    ))
}

/// `L = L_s + λ L_f`.
pub fn combined_loss(seg: LossValue, flow: LossValue, lambda_flow: f64) -> Result<LossValue> {
    if !(lambda_flow > 0.0) {
        return Err(Error::NonPositiveLambda(lambda_flow));
    }
    if !seg.value.is_finite() || !flow.value.is_finite() {
        return Err(Error::NonFinite("loss terms"));
    }
    Ok(LossValue {
        value: seg.value + lambda_flow * flow.value,
        reduction: seg.reduction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, h: usize, w: usize) -> (Tensor, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rng.random_range(-4.0..4.0)).collect());
        let mask = Mask::from_vec(h, w, (0..h * w).map(|_| rng.random_bool(0.3)).collect());
        (logits, mask)
    }

    #[test]
    fn weight_is_foreground_fraction() {
        let mask = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(fg_bg_weight(&mask), 0.25);
        assert_eq!(fg_bg_weight(&Mask::new(3, 3)), 0.0);
        assert_eq!(fg_bg_weight(&Mask::filled(3, 3, true)), 1.0);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mask = Mask::from_fn(4, 4, |y, _| y % 2 == 0);
        let mut logits = Tensor::zeros(&[2, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let fg = mask.get(y, x);
                logits.set(if fg { 1 } else { 0 }, y, x, 800.0);
            }
        }
        assert_eq!(weighted_seg_loss(&logits, &mask, Reduction::Sum).unwrap().value, 0.0);
    }

    #[test]
    fn uniform_logits_on_two_by_two() {
        let mask = Mask::from_fn(2, 2, |y, x| y == 0 && x == 0);
        let logits = Tensor::zeros(&[2, 2, 2]);
        let l = weighted_seg_loss(&logits, &mask, Reduction::Sum).unwrap();
        assert!((l.value - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.0397207708399179).abs() < 1e-12);
        let mean = weighted_seg_loss(&logits, &mask, Reduction::Mean).unwrap();
        assert!((mean.value - l.value / 4.0).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_bad_inputs() {
        let mask = Mask::new(4, 4);
        assert!(matches!(weighted_seg_loss(&Tensor::zeros(&[2, 3, 4]), &mask, Reduction::Sum), Err(Error::Shape(_))));
        let mut bad = Tensor::zeros(&[2, 4, 4]);
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(weighted_seg_loss(&bad, &mask, Reduction::Sum), Err(Error::NonFinite(_))));
    }

    #[test]
    fn epe_examples() {
        let gt = Tensor::full(&[2, 3, 3], 0.7);
        assert_eq!(epe_loss(&gt, &gt, None, Reduction::Mean).unwrap().value, 0.0);
        let pred = Tensor::full(&[2, 3, 3], 1.7);
        assert_eq!(epe_loss(&pred, &gt, None, Reduction::Mean).unwrap().value, 2.0);
        let valid = Mask::new(3, 3);
        assert!(matches!(epe_loss(&pred, &gt, Some(&valid), Reduction::Mean), Err(Error::NoValidPixels)));
    }

    #[test]
    fn combined_examples() {
        let s = LossValue { value: 2.0, reduction: Reduction::Sum };
        let f = LossValue { value: 3.0, reduction: Reduction::Mean };
        assert!((combined_loss(s, f, 0.1).unwrap().value - 2.3).abs() < 1e-12);
        assert!(matches!(combined_loss(s, f, 0.0), Err(Error::NonPositiveLambda(_))));
        assert!(combined_loss(s, f, -1.0).is_err());
    }

    #[test]
    fn seg_gradient_matches_finite_differences() {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let (logits, mask) = random_case(3, 5, 4);
            let (_, grad) = weighted_seg_loss_grad(&logits, &mask, reduction).unwrap();
            let eps = 1e-6;
            for i in 0..logits.len() {
                let mut plus = logits.clone();
                plus.data_mut()[i] += eps;
                let mut minus = logits.clone();
                minus.data_mut()[i] -= eps;
                let fd = (weighted_seg_loss(&plus, &mask, reduction).unwrap().value
                    - weighted_seg_loss(&minus, &mask, reduction).unwrap().value)
                    / (2.0 * eps);
                let a = grad.data()[i];
                assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-6), "{fd} vs {a}");
            }
        }
    }

    #[test]
    fn epe_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.random_range(-3.0..3.0)).collect());
        let gt = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.random_range(-3.0..3.0)).collect());
        let valid = Mask::from_fn(4, 4, |y, x| (y + x) % 3 != 0);
        let (_, grad) = epe_loss_grad(&pred, &gt, Some(&valid), Reduction::Mean).unwrap();
        let eps = 1e-6;
        for i in 0..pred.len() {
            let mut plus = pred.clone();
            plus.data_mut()[i] += eps;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= eps;
            let fd = (epe_loss(&plus, &gt, Some(&valid), Reduction::Mean).unwrap().value
                - epe_loss(&minus, &gt, Some(&valid), Reduction::Mean).unwrap().value)
                / (2.0 * eps);
            assert!((fd - grad.data()[i]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn seg_loss_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..63) {
            let (logits, mask) = random_case(seed, 8, 8);
            let n = 64;
            let perm: Vec<usize> = (0..n).map(|i| (i * 5 + rot) % n).collect();
            let mut pl = Tensor::zeros(&[2, 8, 8]);
            let mut pm = vec![false; n];
            for (dst, &src) in perm.iter().enumerate() {
                pl.data_mut()[dst] = logits.data()[src];
                pl.data_mut()[n + dst] = logits.data()[n + src];
                pm[dst] = mask.data()[src];
            }
            let a = weighted_seg_loss(&logits, &mask, Reduction::Sum).unwrap().value;
            let b = weighted_seg_loss(&pl, &Mask::from_vec(8, 8, pm), Reduction::Sum).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn epe_is_symmetric_and_shift_invariant(seed in 0u64..1000, du in -5.0f64..5.0, dv in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.random_range(-4.0..4.0)).collect());
            let b = Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.random_range(-4.0..4.0)).collect());
            let ab = epe_loss(&a, &b, None, Reduction::Mean).unwrap().value;
            let ba = epe_loss(&b, &a, None, Reduction::Mean).unwrap().value;
            prop_assert_eq!(ab, ba);
            let shift = |t: &Tensor| {
                let mut s = t.clone();
                for v in s.channel_mut(0) { *v += du; }
                for v in s.channel_mut(1) { *v += dv; }
                s
            };
            let shifted = epe_loss(&shift(&a), &shift(&b), None, Reduction::Mean).unwrap().value;
            prop_assert!((shifted - ab).abs() < 1e-9 * ab.max(1.0));
        }
    }
}
