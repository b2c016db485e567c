//! Dice + cross-entropy segmentation loss.
//!
//! With class probabilities `P = softmax(logits)` over the class axis and
//! one-hot truth `Y`:
//!
//! ```text
//! L = 1 − (1/I) Σ_i (2 Σ_v Y_iv P_iv + ε) / (Σ_v Y_iv² + Σ_v P_iv² + ε)
//!       + (1/V) Σ_v −log P_{y_v, v}
//! ```
//!
//! Both terms are normalized (mean over classes, mean over voxels) so a
//! perfect prediction has loss 0.

use unetrpp_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

pub const DICE_EPS: f64 = 1e-5;

/// One-hot encoding as an `I × V` tensor.
pub fn one_hot<T: Element>(labels: &LabelMap, num_classes: usize) -> Result<Tensor<T>> {
    let v = labels.len();
    let mut data = vec![T::zero(); num_classes * v];
    for (i, &c) in labels.data.iter().enumerate() {
        let c = c as usize;
        if c >= num_classes {
            return Err(Error::Shape(format!("label {c} at voxel {i} outside {num_classes} classes")));
        }
        data[c * v + i] = T::one();
    }
    Ok(Tensor::new(data, &[num_classes, v])?)
}

pub fn dice_ce_loss<T: Element>(logits: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    let (classes, extents) = match *logits.shape() {
        [i, h, w, d] => (i, [h, w, d]),
        _ => return Err(Error::Shape(format!("logits must be I×H×W×D, got {:?}", logits.shape()))),
    };
    if extents != labels.extents {
        return Err(Error::Shape(format!("logits extents {extents:?} vs labels {:?}", labels.extents)));
    }
    let v = labels.len();
    let y = one_hot::<T>(labels, classes)?;
    let logp = logits.reshape(&[classes, v])?.log_softmax(0)?;
    let p = logp.exp();

    let inter = p.mul(&y)?.sum_axis(1, false)?;
    let p_sq = p.mul(&p)?.sum_axis(1, false)?;
    let y_sq = y.sum_axis(1, false)?; // Y is 0/1, so Y² = Y
    let dice = inter.scale(2.0).add_scalar(DICE_EPS).div(&y_sq.add(&p_sq)?.add_scalar(DICE_EPS))?;
    let dice_term = dice.mean().scale(-1.0).add_scalar(1.0);
    let ce = y.mul(&logp)?.sum().scale(-1.0 / v as f64);
    Ok(dice_term.add(&ce)?)
}
