//! Fused channel-softmax + soft Dice loss over foreground classes.

use super::tape::{Op, Tape, Var};
use super::{volume_dims, Scalar, Tensor};
use crate::error::{Error, Result};

/// Softmax over the leading (class) axis of a `C×V` array.
/// Softmax over the class axis of a `classes×…` logit volume.
pub fn channel_softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let vox = logits.len() / classes;
    let mut probs = vec![T::zero(); logits.len()];
    for v in 0..vox {
        let max = (0..classes)
            .map(|c| logits[c * vox + v])
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for c in 0..classes {
            let e = (logits[c * vox + v] - max).exp();
            probs[c * vox + v] = e;
            sum += e;
        }
        for c in 0..classes {
            probs[c * vox + v] /= sum;
        }
    }
    probs
}

/// Per-class soft statistics `(Σ p·g, Σ p, Σ g)`.
fn class_sums<T: Scalar>(probs: &[T], labels: &[u8], class: usize) -> (T, T, T) {
    let vox = labels.len();
    let p = &probs[class * vox..(class + 1) * vox];
    let (mut inter, mut psum, mut gsum) = (T::zero(), T::zero(), T::zero());
    for (pv, &l) in p.iter().zip(labels) {
        psum += *pv;
        if l as usize == class {
            inter += *pv;
            gsum += T::one();
        }
    }
    (inter, psum, gsum)
}

pub(crate) fn softmax_dice_backward<T: Scalar>(
    shape: &[usize],
    labels: &[u8],
    probs: &[T],
    eps: T,
    gscalar: T,
) -> Tensor<T> {
    let classes = shape[0];
    let vox = labels.len();
    let two = T::c(2.0);
    let norm = gscalar / T::c((classes - 1) as f64);
    // dL/dp, zero for the background class
    let mut dp = vec![T::zero(); probs.len()];
    for c in 1..classes {
        let (inter, psum, gsum) = class_sums(probs, labels, c);
        let den = psum + gsum + eps;
        let num = two * inter + eps;
        for (v, &l) in labels.iter().enumerate() {
            let g = if l as usize == c { T::one() } else { T::zero() };
            dp[c * vox + v] = -norm * (two * g * den - num) / (den * den);
        }
    }
    let mut dz = vec![T::zero(); probs.len()];
    for v in 0..vox {
        let dot: T = (0..classes)
            .map(|c| probs[c * vox + v] * dp[c * vox + v])
            .sum();
        for c in 0..classes {
            dz[c * vox + v] = probs[c * vox + v] * (dp[c * vox + v] - dot);
        }
    }
    Tensor::from_parts(shape.to_vec(), dz)
}

pub const DICE_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    /// `1 − mean_c dice_c` over classes `1..C` of the channel softmax of
    /// `C×H×W×D` logits against an `H×W×D` label volume (flattened).
    pub fn softmax_dice(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let x = self.value(logits);
        let (classes, dims) = volume_dims(x.shape(), "softmax_dice")?;
        let vox: usize = dims.iter().product();
        if labels.len() != vox {
            return Err(Error::shape(
                "softmax_dice",
                format!("{} labels for a {dims:?} volume", labels.len()),
            ));
        }
        if classes < 2 {
            return Err(Error::Config("dice loss needs at least two classes".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        let probs = channel_softmax(x.data(), classes);
        let eps = T::c(DICE_EPS);
        let mut mean = T::zero();
        for c in 1..classes {
            let (inter, psum, gsum) = class_sums(&probs, labels, c);
            mean += (T::c(2.0) * inter + eps) / (psum + gsum + eps);
        }
        mean /= T::c((classes - 1) as f64);
        let out = Tensor::scalar(T::one() - mean);
        let op = Op::SoftmaxDice {
            logits,
            labels: labels.to_vec(),
            probs,
            eps,
        };
        Ok(self.push(out, op, &[logits]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_for(margin: f64, agree: bool) -> f64 {
        let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let mut logits = vec![0.0; 16];
        for (v, &l) in labels.iter().enumerate() {
            let target = if agree { l as usize } else { 1 - l as usize };
            logits[target * 8 + v] = margin;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2, 2, 2], &logits).unwrap());
        let l = tape.softmax_dice(x, &labels).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn perfect_and_disjoint_extremes() {
        assert!(loss_for(50.0, true) < 1e-3);
        assert!((loss_for(50.0, false) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 1, 2]));
        assert!(tape.softmax_dice(x, &[0, 2]).is_err());
        assert!(tape.softmax_dice(x, &[0]).is_err());
    }
}
