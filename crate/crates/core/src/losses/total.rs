use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::contrastive::{cv_loss, PairingPlan};
use super::mumford_shah::ms_data_term;
use super::pce::partial_cross_entropy;
use super::PointAnnotation;
use crate::error::{Error, Result};
use crate::grid::{softmax_backward_from_probs, Grid, Image, SoftPrediction};

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    /// Partial cross-entropy only.
    #[serde(rename = "pce")]
    Pce,
    /// Partial cross-entropy plus the Mumford-Shah data and TV terms.
    #[serde(rename = "pce+ms")]
    PceMs,
    /// Partial cross-entropy plus the contrastive variance loss.
    #[serde(rename = "pce+cv")]
    PceCv,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Pce, LossMode::PceMs, LossMode::PceCv];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Pce => "pce",
            LossMode::PceMs => "pce+ms",
            LossMode::PceCv => "pce+cv",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pce" => Ok(LossMode::Pce),
            "pce+ms" => Ok(LossMode::PceMs),
            "pce+cv" => Ok(LossMode::PceCv),
            other => {
                Err(Error::invalid_config(format!("unknown loss mode {other:?} (expected pce, pce+ms or pce+cv)")))
            }
        }
    }
}

/// Loss weights and contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cv: f64,
    pub lambda_ms: f64,
    pub mu: f64,
    pub tau: f64,
    pub freeze_means: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cv: 0.3, lambda_ms: 0.3, mu: 1e-5, tau: 0.07, freeze_means: false }
    }
}

/// One image of a batch together with its prediction and point labels.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub image: &'a Image,
    pub pred: &'a SoftPrediction,
    pub annotation: &'a PointAnnotation,
}

/// Component values summed over the batch, the mode-selected total and the
/// gradient of the total with respect to each image's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub pce: f64,
    pub ms_data: f64,
    pub cv_contrastive: f64,
    pub tv: f64,
    pub total: f64,
    pub grad_wrt_logits: Vec<Grid>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.pce, self.ms_data, self.cv_contrastive, self.tv, self.total].iter().all(|v| v.is_finite())
    }
}

/// Evaluates every component over a batch and combines them according to
/// `mode`. Component values are always reported; only the terms selected by
/// the mode (with non-zero weight) contribute to the total and its gradient.
pub fn total_loss(
    mode: LossMode,
    batch: &[BatchItem<'_>],
    plan: &PairingPlan,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in
        [("lambda_cv", weights.lambda_cv), ("lambda_ms", weights.lambda_ms), ("mu", weights.mu), ("tau", weights.tau)]
    {
        if !v.is_finite() {
            return Err(Error::invalid_config(format!("{name} must be finite, got {v}")));
        }
    }
    let mut grads: Vec<Grid> = batch.iter().map(|item| Grid::zeros(item.pred.grid().shape())).collect();

    let mut pce = 0.0;
    let mut ms_data = 0.0;
    for (item, grad) in batch.iter().zip(grads.iter_mut()) {
        let l = partial_cross_entropy(item.pred, item.annotation)?;
        pce += l.value;
        grad.add_scaled(&l.grad, 1.0);

        let ms = ms_data_term(item.image, item.pred, weights.freeze_means)?;
        ms_data += ms.value;
        if mode == LossMode::PceMs && weights.lambda_ms != 0.0 {
            grad.add_scaled(&ms.grad, weights.lambda_ms);
        }
    }

    let images: Vec<&Image> = batch.iter().map(|b| b.image).collect();
    let preds: Vec<&SoftPrediction> = batch.iter().map(|b| b.pred).collect();
    let present: Vec<Vec<usize>> = batch.iter().map(|b| b.annotation.present_classes()).collect();
    // weights of zero skip the gradient work; values are still reported
    let (lambda_cv, mu) = match mode {
        LossMode::Pce => (0.0, 0.0),
        LossMode::PceMs => (0.0, weights.mu),
        LossMode::PceCv => (weights.lambda_cv, weights.mu),
    };
    let cv = cv_loss(&images, &preds, &present, plan, weights.tau, lambda_cv, mu, weights.freeze_means)?;
    if lambda_cv != 0.0 || mu != 0.0 {
        for (grad, g) in grads.iter_mut().zip(&cv.grads) {
            grad.add_scaled(g, 1.0);
        }
    }

    let total = match mode {
        LossMode::Pce => pce,
        LossMode::PceMs => pce + weights.lambda_ms * ms_data + weights.mu * cv.tv,
        LossMode::PceCv => pce + weights.lambda_cv * cv.contrastive + weights.mu * cv.tv,
    };

    let grad_wrt_logits = batch
        .iter()
        .zip(&grads)
        .map(|(item, g)| softmax_backward_from_probs(item.pred, g))
        .collect::<Result<Vec<_>>>()?;

    Ok(LossBreakdown { pce, ms_data, cv_contrastive: cv.contrastive, tv: cv.tv, total, grad_wrt_logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_round_trips_through_strings() {
        for mode in LossMode::ALL {
            assert_eq!(mode.as_str().parse::<LossMode>().unwrap(), mode);
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, format!("\"{}\"", mode.as_str()));
        }
        assert!(matches!("cv".parse::<LossMode>(), Err(Error::InvalidConfig(_))));
    }
}
