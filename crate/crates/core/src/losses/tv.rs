use super::LossValue;
use crate::grid::{Grid, SoftPrediction};

/// `|x|` is evaluated as `sqrt(x^2 + TV_SMOOTHING^2)`.
pub const TV_SMOOTHING: f64 = 1e-12;

#[inline]
fn smooth_abs(x: f64) -> f64 {
    (x * x + TV_SMOOTHING * TV_SMOOTHING).sqrt()
}

#[inline]
fn smooth_abs_grad(x: f64) -> f64 {
    x / smooth_abs(x)
}

/// Anisotropic total variation of one `H x W` map using forward
/// differences. Pairs that would leave the grid contribute nothing.
pub fn tv_map(map: &[f64], height: usize, width: usize) -> f64 {
    debug_assert_eq!(map.len(), height * width);
    let mut total = 0.0;
    for r in 0..height {
        let row = &map[r * width..(r + 1) * width];
        for c in 0..width {
            if c + 1 < width {
                total += smooth_abs(row[c + 1] - row[c]);
            }
            if r + 1 < height {
                total += smooth_abs(map[(r + 1) * width + c] - row[c]);
            }
        }
    }
    total
}

/// Accumulates `d tv_map / d map` into `grad`.
pub fn tv_map_grad(map: &[f64], height: usize, width: usize, scale: f64, grad: &mut [f64]) {
    for r in 0..height {
        for c in 0..width {
            let here = r * width + c;
            if c + 1 < width {
                let g = scale * smooth_abs_grad(map[here + 1] - map[here]);
                grad[here + 1] += g;
                grad[here] -= g;
            }
            if r + 1 < height {
                let below = here + width;
                let g = scale * smooth_abs_grad(map[below] - map[here]);
                grad[below] += g;
                grad[here] -= g;
            }
        }
    }
}

/// Total variation summed over every class map of the prediction.
pub fn tv_term(pred: &SoftPrediction) -> LossValue {
    let (h, w, plane) = (pred.height(), pred.width(), pred.plane());
    let mut grad = Grid::zeros(pred.grid().shape());
    let mut value = 0.0;
    for k in 0..pred.classes() {
        let map = pred.class_map(k);
        value += tv_map(map, h, w);
        tv_map_grad(map, h, w, 1.0, &mut grad.values_mut()[k * plane..(k + 1) * plane]);
    }
    LossValue { value, grad }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{finite_diff_grad, relative_error};

    #[test]
    fn constant_prediction_has_no_variation() {
        let l = tv_term(&SoftPrediction::uniform(3, 5, 4));
        assert!(l.value < 1e-9);
        assert!(l.grad.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_counted_jumps() {
        assert!((tv_map(&[0.0, 0.0, 1.0, 1.0], 2, 2) - 2.0).abs() < 1e-9);
        assert!((tv_map(&[0.0, 1.0, 0.0], 1, 3) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_class_complement_doubles() {
        let pred =
            SoftPrediction::new(Grid::from_vec(&[2, 2, 2], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap())
                .unwrap();
        assert!((tv_term(&pred).value - 4.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let map = vec![0.1, 0.5, 0.2, 0.9, 0.35, 0.6, 0.05, 0.75, 0.4, 0.3, 0.8, 0.15];
        let mut analytic = vec![0.0; 12];
        tv_map_grad(&map, 3, 4, 1.0, &mut analytic);
        let x = Grid::from_vec(&[3, 4], map).unwrap();
        let numeric = finite_diff_grad(|g| tv_map(g.values(), 3, 4), &x, 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(numeric.values()) {
            assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }
}
