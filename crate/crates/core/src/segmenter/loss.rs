//! Cross-entropy plus soft Dice.

use crate::data::Mask;
use crate::error::{Error, Result};

use super::model::Prediction;
use super::layers::Tensor3;

pub const DICE_EPS: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-12;

/// CE (mean over pixels, both channels, one-hot truth) + (1 − soft Dice on the
/// foreground probability). Both-empty foreground gives a Dice term of 0.
pub fn composite_loss(pred: &Prediction, truth: &Mask) -> Result<f64> {
    check_shape(&pred.probs, truth)?;
    Ok(loss_terms(&pred.probs, truth).0)
}

fn check_shape(probs: &Tensor3, truth: &Mask) -> Result<()> {
    if (probs.height, probs.width) != truth.shape() {
        return Err(Error::ShapeMismatch {
            expected: (probs.height, probs.width),
            found: truth.shape(),
        });
    }
    Ok(())
}

struct DiceSums {
    intersection: f64,
    truth_sq: f64,
    pred_sq: f64,
}

impl DiceSums {
    fn both_empty(&self) -> bool {
        self.truth_sq == 0.0 && self.pred_sq == 0.0
    }

    fn denom(&self) -> f64 {
        self.truth_sq + self.pred_sq + DICE_EPS
    }
}

fn loss_terms(probs: &Tensor3, truth: &Mask) -> (f64, DiceSums) {
    let n = truth.labels().len();
    let (bg, fg) = (probs.plane(0), probs.plane(1));
    let mut ce = 0.0;
    let mut sums = DiceSums {
        intersection: 0.0,
        truth_sq: 0.0,
        pred_sq: 0.0,
    };
    for i in 0..n {
        let y = truth.labels()[i] as f64;
        let p_true = if y == 1.0 { fg[i] } else { bg[i] };
        ce -= p_true.max(LOG_FLOOR).ln();
        sums.intersection += y * fg[i];
        sums.truth_sq += y * y;
        sums.pred_sq += fg[i] * fg[i];
    }
    let dice = if sums.both_empty() {
        0.0
    } else {
        1.0 - 2.0 * sums.intersection / sums.denom()
    };
    (ce / n as f64 + dice, sums)
}

/// Loss and its gradient with respect to the two logit planes.
pub fn loss_and_logit_grad(probs: &Tensor3, truth: &Mask) -> Result<(f64, Tensor3)> {
    check_shape(probs, truth)?;
    let (loss, sums) = loss_terms(probs, truth);
    let n = truth.labels().len();
    let nf = n as f64;
    let (bg, fg) = (probs.plane(0), probs.plane(1));
    let mut dlogits = Tensor3::zeros(2, probs.height, probs.width);
    let d = sums.denom();
    for i in 0..n {
        let y = truth.labels()[i] as f64;
        // dL/dp for each channel
        let mut g_bg = 0.0;
        let mut g_fg = 0.0;
        if y == 1.0 {
            if fg[i] > LOG_FLOOR {
                g_fg -= 1.0 / (nf * fg[i]);
            }
        } else if bg[i] > LOG_FLOOR {
            g_bg -= 1.0 / (nf * bg[i]);
        }
        if !sums.both_empty() {
            g_fg -= 2.0 * (y * d - sums.intersection * 2.0 * fg[i]) / (d * d);
        }
        // softmax Jacobian
        let dot = bg[i] * g_bg + fg[i] * g_fg;
        dlogits.data[i] = bg[i] * (g_bg - dot);
        dlogits.data[n + i] = fg[i] * (g_fg - dot);
    }
    Ok((loss, dlogits))
}
