//! Dense row-major grids and the per-pixel softmax head.
//!
//! Everything downstream (losses, models, metrics) works on [`Grid`]s of
//! 64-bit floats. Class-indexed tensors use the `[K, H, W]` layout so that a
//! single class map is a contiguous `H * W` slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multi-dimensional scalar grid stored in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![value; len] }
    }

    /// Builds a grid, checking that the shape matches the value count and
    /// that every value is finite.
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::invalid_input(format!("shape {:?} holds {} values, got {}", shape, len, values.len())));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid_input(format!("non-finite value {} at flat index {}", values[pos], pos)));
        }
        Ok(Self { shape: shape.to_vec(), values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index. Panics on rank or bound violations.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for axis of size {n}");
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.values[at] = value;
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_scaled");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A single-channel intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    grid: Grid,
}

impl Image {
    pub fn new(height: usize, width: usize, intensities: Vec<f64>) -> Result<Self> {
        let grid = Grid::from_vec(&[height, width], intensities)?;
        Self::from_grid(grid)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::invalid_input(format!("image grid must be [H, W], got {:?}", grid.shape())));
        }
        if let Some(v) = grid.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid_input(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self { grid })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid.values()[row * self.width() + col]
    }

    pub fn pixels(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

/// Unnormalized per-pixel class scores, shape `[K, H, W]` with `K >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    grid: Grid,
}

impl LogitField {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::invalid_input(format!("logit field must be [K, H, W], got {:?}", grid.shape())));
        }
        if grid.shape()[0] < 2 {
            return Err(Error::invalid_input("logit field needs at least 2 classes"));
        }
        if !grid.is_finite() {
            return Err(Error::invalid_input("logit field contains non-finite values"));
        }
        Ok(Self { grid })
    }

    pub fn classes(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_grid(self) -> Grid {
        self.grid
    }
}

/// Per-pixel class probabilities, shape `[K, H, W]`; every pixel is a point
/// of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrediction {
    grid: Grid,
}

const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl SoftPrediction {
    /// Wraps a probability grid after checking the simplex constraint.
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.rank() != 3 || grid.shape()[0] < 2 {
            return Err(Error::invalid_input(format!("prediction must be [K>=2, H, W], got {:?}", grid.shape())));
        }
        let k = grid.shape()[0];
        let plane = grid.shape()[1] * grid.shape()[2];
        let v = grid.values();
        if let Some(p) = v.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid_input(format!("probability {p} outside [0, 1]")));
        }
        for r in 0..plane {
            let sum: f64 = (0..k).map(|c| v[c * plane + r]).sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid_input(format!("probabilities at pixel {r} sum to {sum}")));
            }
        }
        Ok(Self { grid })
    }

    /// Uniform `1/K` prediction.
    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        Self { grid: Grid::filled(&[classes, height, width], 1.0 / classes as f64) }
    }

    pub fn classes(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn plane(&self) -> usize {
        self.height() * self.width()
    }

    /// The contiguous `H * W` probability map of class `k`.
    pub fn class_map(&self, k: usize) -> &[f64] {
        let plane = self.plane();
        &self.grid.values()[k * plane..(k + 1) * plane]
    }

    pub fn prob(&self, k: usize, row: usize, col: usize) -> f64 {
        self.class_map(k)[row * self.width() + col]
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

/// Per-pixel softmax over the class axis, stabilized by subtracting each
/// pixel's maximum logit.
pub fn softmax(logits: &LogitField) -> Result<SoftPrediction> {
    let grid = logits.grid();
    if !grid.is_finite() {
        return Err(Error::invalid_input("softmax input contains non-finite logits"));
    }
    let k = logits.classes();
    let plane = logits.height() * logits.width();
    let z = grid.values();
    let mut out = vec![0.0; z.len()];
    for r in 0..plane {
        let max = (0..k).map(|c| z[c * plane + r]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (z[c * plane + r] - max).exp();
            out[c * plane + r] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * plane + r] /= sum;
        }
    }
    Ok(SoftPrediction { grid: Grid::from_vec(grid.shape(), out)? })
}

/// Chain rule through the softmax given the probabilities it produced:
/// `dL/dz_k = p_k * (g_k - sum_j p_j g_j)` at every pixel.
pub fn softmax_backward_from_probs(probs: &SoftPrediction, grad_wrt_probs: &Grid) -> Result<Grid> {
    if probs.grid().shape() != grad_wrt_probs.shape() {
        return Err(Error::invalid_input(format!(
            "gradient shape {:?} does not match prediction shape {:?}",
            grad_wrt_probs.shape(),
            probs.grid().shape()
        )));
    }
    let k = probs.classes();
    let plane = probs.plane();
    let p = probs.grid().values();
    let g = grad_wrt_probs.values();
    let mut out = vec![0.0; p.len()];
    for r in 0..plane {
        let inner: f64 = (0..k).map(|c| p[c * plane + r] * g[c * plane + r]).sum();
        for c in 0..k {
            let i = c * plane + r;
            out[i] = p[i] * (g[i] - inner);
        }
    }
    Grid::from_vec(grad_wrt_probs.shape(), out)
}

/// Returns `dL/dlogits` given `dL/dprobs`.
pub fn softmax_backward(logits: &LogitField, grad_wrt_probs: &Grid) -> Result<Grid> {
    if logits.grid().shape() != grad_wrt_probs.shape() {
        return Err(Error::invalid_input(format!(
            "gradient shape {:?} does not match logit shape {:?}",
            grad_wrt_probs.shape(),
            logits.grid().shape()
        )));
    }
    let probs = softmax(logits)?;
    softmax_backward_from_probs(&probs, grad_wrt_probs)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` for
/// every coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Grid, step: f64) -> Result<Grid>
where
    F: FnMut(&Grid) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid_input(format!("finite-difference step {step} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let plus = f(&probe);
        probe.values[i] = orig - step;
        let minus = f(&probe);
        probe.values[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "function is non-finite around coordinate {i} ({plus}, {minus})"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Grid::from_vec(x.shape(), grad)
}

/// Symmetric relative error used by every gradient comparison.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(k: usize, h: usize, w: usize, values: Vec<f64>) -> LogitField {
        LogitField::new(Grid::from_vec(&[k, h, w], values).unwrap()).unwrap()
    }

    #[test]
    fn from_vec_rejects_bad_shapes_and_nan() {
        assert!(Grid::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Grid::from_vec(&[1], vec![f64::NAN]).is_err());
        assert!(Grid::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = softmax(&field(3, 2, 2, vec![0.0; 12])).unwrap();
        for v in p.grid().values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_logit_halves() {
        let p = softmax(&field(3, 1, 1, vec![2f64.ln(), 0.0, 0.0])).unwrap();
        let v = p.grid().values();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.25).abs() < 1e-15);
        assert!((v[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance_at_one_pixel() {
        let base = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let mut shifted = base.clone();
        shifted[0] += 17.0;
        shifted[2] += 17.0;
        shifted[4] += 17.0;
        let a = softmax(&field(3, 1, 2, base)).unwrap();
        let b = softmax(&field(3, 1, 2, shifted)).unwrap();
        for (x, y) in a.grid().values().iter().zip(b.grid().values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn large_logits_stay_on_simplex() {
        let p = softmax(&field(2, 1, 2, vec![1e4, -1e4, -1e4, 1e4])).unwrap();
        assert_eq!(p.grid().values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(LogitField::new(Grid { shape: vec![2, 1, 1], values: vec![f64::INFINITY, 0.0] }).is_err());
    }

    #[test]
    fn backward_annihilates_constants() {
        let logits = field(3, 1, 2, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let zero = softmax_backward(&logits, &Grid::zeros(&[3, 1, 2])).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
        // constant across classes at pixel 0 only
        let g = Grid::from_vec(&[3, 1, 2], vec![5.0, 1.0, 5.0, -2.0, 5.0, 3.0]).unwrap();
        let d = softmax_backward(&logits, &g).unwrap();
        for c in 0..3 {
            assert!(d.get(&[c, 0, 0]).abs() < 1e-15);
        }
        assert!(d.get(&[0, 0, 1]).abs() > 1e-3);
    }

    #[test]
    fn backward_shape_mismatch() {
        let logits = field(2, 1, 1, vec![0.0, 0.0]);
        assert!(softmax_backward(&logits, &Grid::zeros(&[2, 1, 2])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = field(3, 4, 4, values);
        let g = Grid::from_vec(&[3, 4, 4], weights.clone()).unwrap();
        let analytic = softmax_backward(&logits, &g).unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let p = softmax(&LogitField::new(x.clone()).unwrap()).unwrap();
                p.grid().values().iter().zip(&weights).map(|(a, b)| a * b).sum()
            },
            logits.grid(),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.values().iter().zip(numeric.values()) {
            assert!(relative_error(*a, *n) < 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn finite_diff_basics() {
        let x = Grid::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|x| x.values().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.values()[0] - 2.0).abs() < 1e-8);
        assert!((g.values()[1] - 4.0).abs() < 1e-8);
        let c = finite_diff_grad(|_| 3.0, &x, 1e-5).unwrap();
        assert!(c.values().iter().all(|v| *v == 0.0));
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn inputs_not_mutated() {
        let logits = field(2, 1, 2, vec![0.5, 1.0, -0.5, 2.0]);
        let before = logits.clone();
        let _ = softmax(&logits).unwrap();
        let _ = softmax_backward(&logits, &Grid::filled(&[2, 1, 2], 1.0)).unwrap();
        assert_eq!(before, logits);
    }
}
