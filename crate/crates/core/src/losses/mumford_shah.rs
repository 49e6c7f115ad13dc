//! Soft class means, variance distribution maps and the piecewise-constant
//! data term.

use super::{check_same_plane, LossValue};
use crate::error::Result;
use crate::grid::{Grid, Image, SoftPrediction};

/// Guard added to the soft mass in the class-mean denominator.
pub const MEAN_EPS: f64 = 1e-8;

/// Prediction-weighted mean intensity of each class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Vec<f64>,
    /// Soft mass `sum_r p_k(r)` per class (the denominator without the guard).
    pub masses: Vec<f64>,
}

/// `(I(r) - c_k)^2 * p_k(r)` for one class, shape `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub class: usize,
    pub values: Grid,
}

impl VarianceMap {
    pub fn as_slice(&self) -> &[f64] {
        self.values.values()
    }
}

fn plane_of(image: &Image) -> (usize, usize) {
    (image.height(), image.width())
}

pub fn class_means(image: &Image, pred: &SoftPrediction) -> Result<ClassMeans> {
    check_same_plane("class means", plane_of(image), (pred.height(), pred.width()))?;
    let intensities = image.pixels();
    let mut means = Vec::with_capacity(pred.classes());
    let mut masses = Vec::with_capacity(pred.classes());
    for k in 0..pred.classes() {
        let pk = pred.class_map(k);
        let weighted: f64 = intensities.iter().zip(pk).map(|(i, p)| i * p).sum();
        let mass: f64 = pk.iter().sum();
        means.push(weighted / (mass + MEAN_EPS));
        masses.push(mass);
    }
    Ok(ClassMeans { means, masses })
}

/// Accumulates into `grad_k` (the `H * W` slice for class `k`) the effect
/// of an upstream gradient `grad_mean = dL/dc_k` through the dependence of
/// `c_k` on `p_k`: `dc_k/dp_k(s) = (I(s) - c_k) / (M_k + eps)`.
pub fn means_backward(image: &Image, means: &ClassMeans, k: usize, grad_mean: f64, grad_k: &mut [f64]) {
    let c = means.means[k];
    let denom = means.masses[k] + MEAN_EPS;
    for (g, i) in grad_k.iter_mut().zip(image.pixels()) {
        *g += grad_mean * (i - c) / denom;
    }
}

pub fn variance_map(image: &Image, pred: &SoftPrediction, means: &ClassMeans, k: usize) -> Result<VarianceMap> {
    check_same_plane("variance map", plane_of(image), (pred.height(), pred.width()))?;
    if k >= pred.classes() || k >= means.means.len() {
        return Err(crate::Error::invalid_input(format!("class {k} outside [0, {})", pred.classes())));
    }
    let c = means.means[k];
    let values = image.pixels().iter().zip(pred.class_map(k)).map(|(i, p)| (i - c) * (i - c) * p).collect();
    Ok(VarianceMap { class: k, values: Grid::from_vec(&[image.height(), image.width()], values)? })
}

/// `sum_k sum_r (I(r) - c_k)^2 p_k(r)`.
///
/// With `freeze_means` the class means are treated as constants in the
/// backward pass.
pub fn ms_data_term(image: &Image, pred: &SoftPrediction, freeze_means: bool) -> Result<LossValue> {
    let means = class_means(image, pred)?;
    let plane = pred.plane();
    let mut grad = Grid::zeros(pred.grid().shape());
    let mut value = 0.0;
    for k in 0..pred.classes() {
        let c = means.means[k];
        let pk = pred.class_map(k);
        let gk = &mut grad.values_mut()[k * plane..(k + 1) * plane];
        let mut grad_mean = 0.0;
        for ((g, i), p) in gk.iter_mut().zip(image.pixels()).zip(pk) {
            let d = i - c;
            value += d * d * p;
            *g = d * d;
            grad_mean -= 2.0 * d * p;
        }
        if !freeze_means {
            means_backward(image, &means, k, grad_mean, gk);
        }
    }
    Ok(LossValue { value, grad })
}
