//! Symmetry checks of the losses and the softmax on random instances.
//!
//! Each check reports the largest absolute deviation it observed; the
//! caller decides what tolerance to hold it to.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcheck::{random_instance, Instance};
use crate::grid::{softmax, Grid, Image, LogitField, SoftPrediction};
use crate::losses::{
    class_means, cosine_similarity, total_loss, variance_map, BatchItem, LossMode, LossWeights, PairingPlan, Point,
    PointAnnotation,
};
use crate::rng::keyed_rng;

/// Worst absolute deviation of each property.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Deviations {
    /// Every loss component after a horizontal flip of images, predictions
    /// and annotations.
    pub flip: f64,
    /// Every pairwise cosine similarity of variance maps after adding a
    /// per-image constant to the intensities.
    pub intensity_shift: f64,
    /// The total of every mode after permuting the batch together with its
    /// pairing plan.
    pub permutation: f64,
    /// Probabilities after adding a per-pixel constant to all logits.
    pub softmax_shift: f64,
}

impl Deviations {
    pub fn max(self, other: Self) -> Self {
        Self {
            flip: self.flip.max(other.flip),
            intensity_shift: self.intensity_shift.max(other.intensity_shift),
            permutation: self.permutation.max(other.permutation),
            softmax_shift: self.softmax_shift.max(other.softmax_shift),
        }
    }
}

fn flip_planes(values: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for p in 0..planes {
        for r in 0..h {
            for c in 0..w {
                out[(p * h + r) * w + c] = values[(p * h + r) * w + (w - 1 - c)];
            }
        }
    }
    out
}

fn weights() -> LossWeights {
    LossWeights { lambda_cv: 0.7, lambda_ms: 0.4, mu: 0.2, tau: 0.3, freeze_means: false }
}

fn components(
    mode: LossMode,
    plan: &PairingPlan,
    images: &[Image],
    probs: &[SoftPrediction],
    anns: &[PointAnnotation],
) -> Result<[f64; 5]> {
    let batch: Vec<BatchItem<'_>> =
        (0..images.len()).map(|n| BatchItem { image: &images[n], pred: &probs[n], annotation: &anns[n] }).collect();
    let b = total_loss(mode, &batch, plan, &weights())?;
    Ok([b.pce, b.ms_data, b.cv_contrastive, b.tv, b.total])
}

fn flip_deviation(inst: &Instance) -> Result<f64> {
    let (k, h, w) = (inst.classes, inst.height, inst.width);
    let probs: Vec<_> = inst.logits.iter().map(|l| inst.probs(l)).collect();
    let flipped_images: Vec<Image> =
        inst.images.iter().map(|img| Image::new(h, w, flip_planes(img.pixels(), 1, h, w))).collect::<Result<_>>()?;
    let flipped_probs: Vec<_> = inst.logits.iter().map(|l| inst.probs(&flip_planes(l, k, h, w))).collect();
    let flipped_anns: Vec<PointAnnotation> = inst
        .annotations
        .iter()
        .map(|a| {
            let points = a.points().iter().map(|p| Point { col: w - 1 - p.col, ..*p }).collect();
            PointAnnotation::new(k, points)
        })
        .collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for mode in LossMode::ALL {
        let before = components(mode, &inst.plan, &inst.images, &probs, &inst.annotations)?;
        let after = components(mode, &inst.plan, &flipped_images, &flipped_probs, &flipped_anns)?;
        for (a, b) in before.iter().zip(&after) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn similarities(images: &[Image], probs: &[SoftPrediction], present: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut maps = Vec::new();
    for n in 0..images.len() {
        let means = class_means(&images[n], &probs[n])?;
        for &k in &present[n] {
            maps.push(variance_map(&images[n], &probs[n], &means, k)?);
        }
    }
    let mut out = Vec::new();
    for a in &maps {
        for b in &maps {
            out.push(cosine_similarity(a, b));
        }
    }
    Ok(out)
}

/// Batch of random images and predictions with sides in 8..=16; the mass
/// guard in the class means perturbs the shift identity on smaller grids.
fn shift_instance(rng: &mut impl Rng) -> Instance {
    let classes = rng.gen_range(2..=3);
    let batch = rng.gen_range(2..=3);
    let (height, width) = (rng.gen_range(8..=16), rng.gen_range(8..=16));
    let plane = height * width;
    let images = (0..batch)
        .map(|_| Image::new(height, width, (0..plane).map(|_| rng.gen::<f64>()).collect()).expect("unit interval"))
        .collect();
    let logits = (0..batch).map(|_| (0..classes * plane).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    Instance {
        classes,
        height,
        width,
        images,
        logits,
        annotations: vec![PointAnnotation::empty(classes); batch],
        plan: PairingPlan::absent(batch, classes),
    }
}

fn intensity_shift_deviation(inst: &Instance, rng: &mut impl Rng) -> Result<f64> {
    let probs: Vec<_> = inst.logits.iter().map(|l| inst.probs(l)).collect();
    let present = vec![(0..inst.classes).collect::<Vec<_>>(); inst.images.len()];
    let shifted: Vec<Image> = inst
        .images
        .iter()
        .map(|img| {
            let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let delta = rng.gen_range(-lo..=1.0 - hi);
            Image::new(img.height(), img.width(), img.pixels().iter().map(|v| v + delta).collect())
        })
        .collect::<Result<_>>()?;
    let before = similarities(&inst.images, &probs, &present)?;
    let after = similarities(&shifted, &probs, &present)?;
    Ok(before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn permutation_deviation(inst: &Instance, rng: &mut impl Rng) -> Result<f64> {
    let probs: Vec<_> = inst.logits.iter().map(|l| inst.probs(l)).collect();
    let mut order: Vec<usize> = (0..inst.images.len()).collect();
    order.shuffle(rng);
    let images: Vec<Image> = order.iter().map(|&i| inst.images[i].clone()).collect();
    let permuted_probs: Vec<_> = order.iter().map(|&i| probs[i].clone()).collect();
    let anns: Vec<_> = order.iter().map(|&i| inst.annotations[i].clone()).collect();
    let plan = inst.plan.reordered(&order);
    let mut worst: f64 = 0.0;
    for mode in LossMode::ALL {
        let before = components(mode, &inst.plan, &inst.images, &probs, &inst.annotations)?[4];
        let after = components(mode, &plan, &images, &permuted_probs, &anns)?[4];
        worst = worst.max((before - after).abs());
    }
    Ok(worst)
}

fn softmax_shift_deviation(inst: &Instance, rng: &mut impl Rng) -> Result<f64> {
    let (k, plane) = (inst.classes, inst.height * inst.width);
    let shape = [k, inst.height, inst.width];
    let mut worst: f64 = 0.0;
    for logits in &inst.logits {
        let shifts: Vec<f64> = (0..plane).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let moved: Vec<f64> = logits.iter().enumerate().map(|(i, l)| l + shifts[i % plane]).collect();
        let a = softmax(&LogitField::new(Grid::from_vec(&shape, logits.clone())?)?)?;
        let b = softmax(&LogitField::new(Grid::from_vec(&shape, moved)?)?)?;
        for (x, y) in a.grid().values().iter().zip(b.grid().values()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Deviations on one random instance (batch of up to 3, grids up to 8x8).
pub fn check_instance(seed: u64, trial: u64) -> Result<Deviations> {
    let mut rng = keyed_rng(seed, "invariance", &trial.to_le_bytes());
    let batch = rng.gen_range(2..=3);
    let inst = random_instance(seed, trial, batch, false);
    Ok(Deviations {
        flip: flip_deviation(&inst)?,
        intensity_shift: intensity_shift_deviation(&shift_instance(&mut rng), &mut rng)?,
        permutation: permutation_deviation(&inst, &mut rng)?,
        softmax_shift: softmax_shift_deviation(&inst, &mut rng)?,
    })
}

/// Worst deviations over `trials` instances.
pub fn run_suite(seed: u64, trials: u64) -> Result<Deviations> {
    (0..trials).try_fold(Deviations::default(), |acc, t| Ok(acc.max(check_instance(seed, t)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution() {
        let v: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(flip_planes(&flip_planes(&v, 2, 2, 3), 2, 2, 3), v);
        assert_eq!(flip_planes(&v, 1, 1, 3)[..3], [2.0, 1.0, 0.0]);
    }

    #[test]
    fn suite_is_within_tolerance() {
        let d = run_suite(3, 10).unwrap();
        assert!(d.flip <= 1e-9, "{d:?}");
        assert!(d.intensity_shift <= 1e-9, "{d:?}");
        assert!(d.permutation <= 1e-9, "{d:?}");
        assert!(d.softmax_shift <= 1e-12, "{d:?}");
    }
}
