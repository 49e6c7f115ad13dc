//! Contrastive loss over per-class variance distribution maps.
//!
//! Every `(image n, class k)` pair whose class is annotated in image `n` is an
//! anchor. Its positive is the same class's map in a partner image chosen by
//! the [`PairingPlan`]; its negatives are the maps of every other annotated
//! class in every other image of the batch. The anchor contributes
//! `-log(pos / (pos + neg))` with temperature-scaled cosine similarities.

use super::mumford_shah::{class_means, means_backward, variance_map};
use super::tv::{tv_map, tv_map_grad};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image, SoftPrediction};

use super::VarianceMap;

/// Guard added to the norm product in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity_raw(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine similarity of maps with different sizes");
    dot(a, b) / (norm(a) * norm(b) + COSINE_EPS)
}

pub fn cosine_similarity(a: &VarianceMap, b: &VarianceMap) -> f64 {
    assert_eq!(a.values.shape(), b.values.shape(), "variance map shapes differ");
    cosine_similarity_raw(a.as_slice(), b.as_slice())
}

/// Accumulates `upstream * d cos(a, b) / da` into `grad_a` and the
/// corresponding term into `grad_b`.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    let ab = dot(a, b);
    let denom = na * nb + COSINE_EPS;
    // d/da [ab / (|a||b| + eps)] = b / D - ab |b| a / (|a| D^2)
    let coef_b = upstream / denom;
    let coef_a = if na > 0.0 { upstream * ab * nb / (na * denom * denom) } else { 0.0 };
    let coef_a2 = upstream / denom;
    let coef_b2 = if nb > 0.0 { upstream * ab * na / (nb * denom * denom) } else { 0.0 };
    for i in 0..a.len() {
        grad_a[i] += coef_b * b[i] - coef_a * a[i];
        grad_b[i] += coef_a2 * a[i] - coef_b2 * b[i];
    }
}

/// Positive partner of every `(image, class)` anchor within one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPlan {
    partners: Vec<Vec<Option<usize>>>,
}

impl PairingPlan {
    /// `partners[n][k]` is the batch position of the partner for anchor `(n, k)`.
    pub fn new(partners: Vec<Vec<Option<usize>>>) -> Self {
        Self { partners }
    }

    /// A plan in which no anchor has a partner.
    pub fn absent(batch: usize, classes: usize) -> Self {
        Self { partners: vec![vec![None; classes]; batch] }
    }

    pub fn batch_len(&self) -> usize {
        self.partners.len()
    }

    pub fn partner(&self, n: usize, k: usize) -> Option<usize> {
        self.partners.get(n).and_then(|row| row.get(k).copied().flatten())
    }

    pub fn partners(&self) -> &[Vec<Option<usize>>] {
        &self.partners
    }

    /// Checks that every partner differs from its anchor and carries the class.
    pub fn validate(&self, present: &[Vec<usize>]) -> Result<()> {
        if self.partners.len() != present.len() {
            return Err(Error::invalid_input(format!(
                "pairing plan covers {} images, batch has {}",
                self.partners.len(),
                present.len()
            )));
        }
        for (n, row) in self.partners.iter().enumerate() {
            for (k, partner) in row.iter().enumerate() {
                let Some(m) = *partner else { continue };
                if m == n || m >= present.len() {
                    return Err(Error::invalid_input(format!("anchor ({n}, {k}) has invalid partner {m}")));
                }
                if !present[n].contains(&k) || !present[m].contains(&k) {
                    return Err(Error::invalid_input(format!(
                        "anchor ({n}, {k}) paired with {m} but class {k} is not annotated in both"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The plan for a reordered batch whose position `i` holds old image `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let partners =
            order.iter().map(|&old| self.partners[old].iter().map(|p| p.map(|m| inverse[m])).collect()).collect();
        Self { partners }
    }
}

/// Sum of anchor terms over the maps `maps[n][k]` (`None` for classes not
/// annotated in image `n`), and its gradient with respect to every map.
pub fn contrastive_sum(
    maps: &[Vec<Option<Vec<f64>>>],
    plan: &PairingPlan,
    tau: f64,
) -> Result<(f64, Vec<Vec<Option<Vec<f64>>>>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid_config(format!("temperature must be > 0, got {tau}")));
    }
    let mut grads: Vec<Vec<Option<Vec<f64>>>> =
        maps.iter().map(|row| row.iter().map(|m| m.as_ref().map(|v| vec![0.0; v.len()])).collect()).collect();
    let mut total = 0.0;
    for (n, row) in maps.iter().enumerate() {
        for (k, anchor) in row.iter().enumerate() {
            let Some(anchor) = anchor else { continue };
            let Some(m) = plan.partner(n, k) else { continue };
            let Some(positive) = maps[m][k].as_ref() else {
                return Err(Error::invalid_input(format!("partner image {m} has no map for class {k}")));
            };
            // (image, class) of every candidate, positive first
            let mut others = vec![(m, k)];
            for (i, other_row) in maps.iter().enumerate() {
                if i == n {
                    continue;
                }
                for (j, map) in other_row.iter().enumerate() {
                    if j != k && map.is_some() {
                        others.push((i, j));
                    }
                }
            }
            let scaled: Vec<f64> = others
                .iter()
                .map(|&(i, j)| {
                    let other = if (i, j) == (m, k) { positive } else { maps[i][j].as_ref().unwrap() };
                    cosine_similarity_raw(anchor, other) / tau
                })
                .collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            total += max + z.ln() - scaled[0];

            for (idx, &(i, j)) in others.iter().enumerate() {
                let mut d = weights[idx] / z / tau;
                if idx == 0 {
                    d -= 1.0 / tau;
                }
                let other = maps[i][j].as_ref().unwrap();
                let mut ga = std::mem::take(grads[n][k].as_mut().unwrap());
                let mut gb = std::mem::take(grads[i][j].as_mut().unwrap());
                cosine_backward(anchor, other, d, &mut ga, &mut gb);
                grads[n][k] = Some(ga);
                grads[i][j] = Some(gb);
            }
        }
    }
    Ok((total, grads))
}

/// Value and per-image gradients (w.r.t. probabilities) of the contrastive
/// variance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CvLoss {
    /// Unweighted sum of anchor terms.
    pub contrastive: f64,
    /// Unweighted total variation summed over the batch.
    pub tv: f64,
    /// `lambda_cv * contrastive + mu * tv`.
    pub total: f64,
    pub grads: Vec<Grid>,
}

#[allow(clippy::too_many_arguments)]
pub fn cv_loss(
    images: &[&Image],
    preds: &[&SoftPrediction],
    present: &[Vec<usize>],
    plan: &PairingPlan,
    tau: f64,
    lambda_cv: f64,
    mu: f64,
    freeze_means: bool,
) -> Result<CvLoss> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid_config(format!("temperature must be > 0, got {tau}")));
    }
    if images.is_empty() || images.len() != preds.len() || images.len() != present.len() {
        return Err(Error::invalid_input(format!(
            "batch mismatch: {} images, {} predictions, {} class sets",
            images.len(),
            preds.len(),
            present.len()
        )));
    }
    plan.validate(present)?;
    let classes = preds[0].classes();
    let plane = preds[0].plane();
    for (img, pred) in images.iter().zip(preds) {
        if pred.classes() != classes || pred.plane() != plane || img.pixels().len() != plane {
            return Err(Error::invalid_input("all batch images must share K, H and W"));
        }
    }

    let means: Vec<_> = images.iter().zip(preds).map(|(img, pred)| class_means(img, pred)).collect::<Result<_>>()?;
    let mut maps = Vec::with_capacity(images.len());
    for n in 0..images.len() {
        let mut row = vec![None; classes];
        for &k in &present[n] {
            if k >= classes {
                return Err(Error::invalid_input(format!("present class {k} outside [0, {classes})")));
            }
            row[k] = Some(variance_map(images[n], preds[n], &means[n], k)?.values.into_values());
        }
        maps.push(row);
    }
    let (contrastive, map_grads) = contrastive_sum(&maps, plan, tau)?;

    let mut tv = 0.0;
    let mut grads = Vec::with_capacity(images.len());
    for n in 0..images.len() {
        let pred = preds[n];
        let img = images[n];
        let mut grad = Grid::zeros(pred.grid().shape());
        for k in 0..classes {
            let gk = &mut grad.values_mut()[k * plane..(k + 1) * plane];
            let pk = pred.class_map(k);
            if lambda_cv != 0.0 {
                if let Some(gz) = &map_grads[n][k] {
                    let c = means[n].means[k];
                    let mut grad_mean = 0.0;
                    for r in 0..plane {
                        let d = img.pixels()[r] - c;
                        gk[r] += lambda_cv * gz[r] * d * d;
                        grad_mean -= 2.0 * gz[r] * d * pk[r];
                    }
                    if !freeze_means {
                        means_backward(img, &means[n], k, lambda_cv * grad_mean, gk);
                    }
                }
            }
            tv += tv_map(pk, pred.height(), pred.width());
            if mu != 0.0 {
                tv_map_grad(pk, pred.height(), pred.width(), mu, gk);
            }
        }
        grads.push(grad);
    }
    Ok(CvLoss { contrastive, tv, total: lambda_cv * contrastive + mu * tv, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{finite_diff_grad, relative_error};

    fn vm(values: Vec<f64>) -> VarianceMap {
        let n = values.len();
        VarianceMap { class: 0, values: Grid::from_vec(&[1, n], values).unwrap() }
    }

    #[test]
    fn cosine_cases() {
        let a = vm(vec![0.2, 0.0, 0.5]);
        assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-9);
        assert_eq!(cosine_similarity(&a, &vm(vec![0.0, 1.0, 0.0])), 0.0);
        assert_eq!(cosine_similarity(&a, &vm(vec![0.0; 3])), 0.0);
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let a = vec![0.3, 0.1, 0.7, 0.05];
        let b = vec![0.2, 0.6, 0.1, 0.4];
        let mut ga = vec![0.0; 4];
        let mut gb = vec![0.0; 4];
        cosine_backward(&a, &b, 1.0, &mut ga, &mut gb);
        let x = Grid::from_vec(&[4], a.clone()).unwrap();
        let na = finite_diff_grad(|g| cosine_similarity_raw(g.values(), &b), &x, 1e-6).unwrap();
        let y = Grid::from_vec(&[4], b.clone()).unwrap();
        let nb = finite_diff_grad(|g| cosine_similarity_raw(&a, g.values()), &y, 1e-6).unwrap();
        for i in 0..4 {
            assert!(relative_error(ga[i], na.values()[i]) < 1e-6);
            assert!(relative_error(gb[i], nb.values()[i]) < 1e-6);
        }
    }

    #[test]
    fn empty_negative_set_contributes_zero() {
        let maps = vec![vec![Some(vec![0.1, 0.4])], vec![Some(vec![0.3, 0.2])]];
        let plan = PairingPlan::new(vec![vec![Some(1)], vec![Some(0)]]);
        let (v, _) = contrastive_sum(&maps, &plan, 0.07).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let maps = vec![vec![Some(vec![0.1])]];
        assert!(matches!(contrastive_sum(&maps, &PairingPlan::absent(1, 1), 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn plan_validation() {
        let present = vec![vec![0, 1], vec![1]];
        assert!(PairingPlan::new(vec![vec![None, Some(1)], vec![None, Some(0)]]).validate(&present).is_ok());
        assert!(PairingPlan::new(vec![vec![Some(1), None], vec![None, None]]).validate(&present).is_err());
        assert!(PairingPlan::new(vec![vec![None, Some(0)], vec![None, None]]).validate(&present).is_err());
    }

    #[test]
    fn reordered_plan_tracks_images() {
        let plan = PairingPlan::new(vec![vec![Some(2)], vec![Some(0)], vec![Some(1)]]);
        let re = plan.reordered(&[2, 0, 1]);
        // new 0 = old 2 whose partner old 1 is now at 2
        assert_eq!(re.partner(0, 0), Some(2));
        assert_eq!(re.partner(1, 0), Some(0));
        assert_eq!(re.partner(2, 0), Some(1));
    }
}
