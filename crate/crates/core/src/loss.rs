//! Training loss: equal mix of pixelwise cross-entropy and soft Dice.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// One-hot encoding `[B, K, H, W]` of labels laid out `[B, H, W]`.
pub fn one_hot<T: Real>(
    labels: &[u8],
    batch: usize,
    classes: usize,
    plane: usize,
) -> Result<Tensor<T>> {
    if labels.len() != batch * plane {
        return Err(Error::dim(
            "seg_loss",
            format!(
                "{} labels for batch {batch} of {plane} pixels",
                labels.len()
            ),
        ));
    }
    let mut t = Tensor::zeros(vec![batch, classes, plane]);
    let d = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::dim(
                "seg_loss",
                format!("label {l} outside 0..{classes}"),
            ));
        }
        let (b, px) = (i / plane, i % plane);
        d[(b * classes + l) * plane + px] = T::one();
    }
    Ok(t)
}

/// `0.5·CE + 0.5·(1 − mean soft Dice over classes 1..K)` for logits
/// `[B, K, H, W]` and labels `[B, H, W]`.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::dim(
            "seg_loss",
            format!("logits {s:?} are not [B, K>=2, H, W]"),
        ));
    }
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let onehot = one_hot::<T>(labels, b, k, plane)?.reshaped(s.clone())?;
    let g = tape.constant(onehot.clone());

    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, g)?;
    let total = tape.sum(picked);
    let ce = tape.scale(total, T::lit(-1.0 / (b * plane) as f64));

    let probs = tape.softmax(logits, 1)?;
    let inter = tape.mul(probs, g)?;
    let inter = per_class_sum(tape, inter, b, k, plane)?;
    let psum = per_class_sum(tape, probs, b, k, plane)?;
    let gsum: Vec<T> = (0..k)
        .map(|c| {
            (0..b)
                .map(|bi| {
                    onehot.data()[(bi * k + c) * plane..(bi * k + c + 1) * plane]
                        .iter()
                        .copied()
                        .sum::<T>()
                })
                .sum()
        })
        .collect();
    let gsum = tape.constant(Tensor::new(vec![k], gsum)?);
    let num = tape.scale(inter, T::lit(2.0));
    let num = tape.add_scalar(num, T::lit(DICE_SMOOTH));
    let den = tape.add(psum, gsum)?;
    let den = tape.add_scalar(den, T::lit(DICE_SMOOTH));
    let dice = tape.div(num, den)?;
    let fg = tape.slice(dice, 0, 1, k - 1)?;
    let fg = tape.sum(fg);
    let mean_dice = tape.scale(fg, T::lit(1.0 / (k - 1) as f64));
    let dice_loss = tape.scale(mean_dice, T::lit(-0.5));
    let dice_loss = tape.add_scalar(dice_loss, T::lit(0.5));

    let ce = tape.scale(ce, T::lit(0.5));
    tape.add(ce, dice_loss)
}

/// `[B, K, H, W]` summed over batch and pixels: `[K]`.
fn per_class_sum<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    b: usize,
    k: usize,
    plane: usize,
) -> Result<Var> {
    let t = tape.reshape(x, &[b, k, plane])?;
    let t = tape.permute(t, &[1, 0, 2])?;
    let t = tape.reshape(t, &[k, b * plane])?;
    tape.sum_last_axis(t)
}

/// Per-pixel argmax over the class axis of `[B, K, H, W]` logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for px in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * plane + px] > d[(bi * k + best) * plane + px] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_tensor;
    use crate::tensor::{grad_check, GradCheckConfig};

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let labels: Vec<u8> = (0..2 * 16).map(|i| (i % 3) as u8).collect();
        let oh = one_hot::<f64>(&labels, 2, 3, 16).unwrap();
        let logits = Tensor::from_fn(vec![2, 3, 4, 4], |i| oh.data()[i] * 30.0);
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let l = seg_loss(&mut tape, x, &labels).unwrap();
        let v = tape.value(l).item();
        assert!((0.0..0.01).contains(&v), "loss {v}");
    }

    #[test]
    fn uniform_logits_give_log_two_cross_entropy() {
        let labels = vec![0u8, 1, 1, 0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let l = seg_loss(&mut tape, x, &labels).unwrap();
        // soft dice for class 1: (2·1 + 1) / (2 + 2 + 1)
        let want = 0.5 * 2f64.ln() + 0.5 * (1.0 - 3.0 / 5.0);
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 1, 2]));
        assert!(seg_loss(&mut tape, x, &[0, 2]).is_err());
        assert!(seg_loss(&mut tape, x, &[0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels: Vec<u8> = (0..2 * 9).map(|i| ((i * 5) % 3) as u8).collect();
        let x = random_tensor(&[2, 3, 3, 3], 1).with_requires_grad(true);
        let r = grad_check(
            |t, v| seg_loss(t, v[0], &labels),
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn argmax_picks_largest_class() {
        let t = Tensor::new(vec![1, 3, 1, 2], vec![0.0, 5.0, 1.0, 0.0, 2.0, -1.0]).unwrap();
        assert_eq!(argmax_labels(&t), vec![2, 0]);
    }
}
