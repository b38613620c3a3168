//! Focal loss for classification, soft Dice loss for segmentation, and their
//! convex combination.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Focusing exponent and per-class balance weights of the focal loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: Vec<f64>) -> Result<Self> {
        let params = Self { gamma, alpha };
        params.validate()?;
        Ok(params)
    }

    /// `alpha[t] = N / (K * count[t])` from the training labels. Classes that
    /// never occur get the weight of a single occurrence.
    pub fn inverse_frequency(gamma: f64, labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        for (index, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::Label { index, label, classes: num_classes });
            }
            counts[label] += 1;
        }
        let n = labels.len().max(1) as f64;
        let alpha = counts.iter().map(|&c| n / (num_classes as f64 * c.max(1) as f64)).collect();
        Self::new(gamma, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            problems.push(format!("focal gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.alpha.len() < 2 {
            problems.push("focal alpha needs one weight per class (at least 2)".to_string());
        }
        for (i, a) in self.alpha.iter().enumerate() {
            if !a.is_finite() || *a <= 0.0 {
                problems.push(format!("focal alpha[{i}] must be finite and > 0, got {a}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Lower clamp applied to `p_t` before taking its logarithm.
pub const MIN_PROBABILITY: f64 = 1e-12;

/// Mean over the batch of `-alpha[t] * (1 - p_t)^gamma * ln(p_t)`, where
/// `p_t` is the softmax probability of the true class.
pub fn focal_loss(cls_logits: &Tensor, labels: &[usize], params: &FocalParams) -> Result<Tensor> {
    let &[n, k] = cls_logits.shape() else {
        return Err(Error::dim(format!("focal_loss expects logits [N, K], got {:?}", cls_logits.shape())));
    };
    if k != params.alpha.len() {
        return Err(Error::dim(format!("focal_loss: {k} logit columns but {} alpha weights", params.alpha.len())));
    }
    if labels.len() != n {
        return Err(Error::dim(format!("focal_loss: {} labels for {n} rows", labels.len())));
    }
    // log p_t via log-softmax; clamping log p_t to [ln 1e-12, 0] is the same
    // as clamping p_t to [1e-12, 1].
    let log_pt = cls_logits.log_softmax(1)?.gather_rows(labels)?.clamp(MIN_PROBABILITY.ln(), 0.0);
    let modulating = log_pt.exp().rsub_scalar(1.0).pow_scalar(params.gamma);
    let alpha_t = Tensor::new(&[n], labels.iter().map(|&t| params.alpha[t]).collect())?;
    Ok(alpha_t.mul(&modulating)?.mul(&log_pt)?.mean().scale(-1.0))
}

/// How Dice sums are aggregated over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiceMode {
    /// One Dice coefficient from sums over every pixel of the batch.
    #[default]
    Batch,
    /// Dice per image, then averaged.
    PerImage,
}

impl std::str::FromStr for DiceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(DiceMode::Batch),
            "image" | "per_image" => Ok(DiceMode::PerImage),
            other => Err(Error::Config(vec![format!("unknown dice mode {other:?}")])),
        }
    }
}

impl std::fmt::Display for DiceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiceMode::Batch => "batch",
            DiceMode::PerImage => "image",
        })
    }
}

fn check_binary_mask(seg_logits: &Tensor, masks: &Tensor) -> Result<()> {
    if seg_logits.shape() != masks.shape() {
        return Err(Error::dim(format!("seg logits {:?} and masks {:?} differ", seg_logits.shape(), masks.shape())));
    }
    if seg_logits.shape().len() != 4 {
        return Err(Error::dim(format!("segmentation tensors must be [N, 1, H, W], got {:?}", seg_logits.shape())));
    }
    if let Some(bad) = masks.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("mask value {bad} is not binary")));
    }
    Ok(())
}

/// `(2 Σ p·y + eps) / (Σ p + Σ y + eps)` for the given mode.
fn soft_dice(prob: &Tensor, target: &Tensor, eps: f64, mode: DiceMode) -> Result<Tensor> {
    let overlap = prob.mul(target)?;
    match mode {
        DiceMode::Batch => {
            let denom = prob.sum().add_scalar(target.data().iter().sum::<f64>() + eps);
            overlap.sum().scale(2.0).add_scalar(eps).div(&denom)
        }
        DiceMode::PerImage => {
            let denom = prob.sum_per_sample()?.add(&target.sum_per_sample()?)?.add_scalar(eps);
            Ok(overlap.sum_per_sample()?.scale(2.0).add_scalar(eps).div(&denom)?.mean())
        }
    }
}

/// Soft Dice coefficients `(foreground, background)` of `sigmoid(seg_logits)`
/// against a binary mask.
pub fn dice_coefficients(seg_logits: &Tensor, masks: &Tensor, eps: f64, mode: DiceMode) -> Result<(Tensor, Tensor)> {
    check_binary_mask(seg_logits, masks)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::param(format!("dice eps must be > 0, got {eps}")));
    }
    let prob = seg_logits.sigmoid();
    let fg = soft_dice(&prob, masks, eps, mode)?;
    let bg = soft_dice(&prob.rsub_scalar(1.0), &masks.rsub_scalar(1.0), eps, mode)?;
    Ok((fg, bg))
}

/// `1 - (dice_fg + dice_bg) / 2`.
///
/// The printed form of this loss, `(y + ŷ + 2yŷ) / (y + ŷ + ε)`, neither
/// vanishes for a perfect prediction nor stays below 1, so the standard soft
/// Dice `1 - (2Σyŷ + ε) / (Σy + Σŷ + ε)` averaged over the foreground and
/// background classes is used instead.
pub fn dice_loss(seg_logits: &Tensor, masks: &Tensor, eps: f64, mode: DiceMode) -> Result<Tensor> {
    let (fg, bg) = dice_coefficients(seg_logits, masks, eps, mode)?;
    Ok(fg.add(&bg)?.scale(0.5).rsub_scalar(1.0))
}

/// Task weighting and Dice smoothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the segmentation loss; classification gets `1 - lambda`.
    pub lambda: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, eps: DEFAULT_DICE_EPS }
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.7;
pub const DEFAULT_DICE_EPS: f64 = 1e-6;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// `lambda * seg + (1 - lambda) * cls`.
pub fn total_loss(seg_loss: &Tensor, cls_loss: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w.lambda) {
        return Err(Error::param(format!("lambda {} outside [0, 1]", w.lambda)));
    }
    if seg_loss.numel() != 1 || cls_loss.numel() != 1 {
        return Err(Error::dim("total_loss needs scalar task losses"));
    }
    seg_loss.scale(w.lambda).add(&cls_loss.scale(1.0 - w.lambda))
}
