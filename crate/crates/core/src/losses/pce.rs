use super::{LossValue, PointAnnotation};
use crate::error::{Error, Result};
use crate::grid::{Grid, SoftPrediction};

/// Lower clamp applied to probabilities inside the logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Cross-entropy restricted to the annotated pixels:
/// `-sum_{points} log(max(p_class(point), LOG_EPS))`.
///
/// An empty annotation yields zero loss and zero gradient.
pub fn partial_cross_entropy(pred: &SoftPrediction, ann: &PointAnnotation) -> Result<LossValue> {
    if ann.classes() != pred.classes() {
        return Err(Error::invalid_input(format!(
            "annotation has {} classes, prediction {}",
            ann.classes(),
            pred.classes()
        )));
    }
    ann.check_bounds(pred.height(), pred.width())?;
    let mut grad = Grid::zeros(pred.grid().shape());
    let mut value = 0.0;
    for p in ann.points() {
        let prob = pred.prob(p.class, p.row, p.col);
        value -= prob.max(LOG_EPS).ln();
        if prob > LOG_EPS {
            grad.set(&[p.class, p.row, p.col], -1.0 / prob);
        }
    }
    Ok(LossValue { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Point;

    fn one_hot(k: usize, classes: usize) -> SoftPrediction {
        let mut g = Grid::zeros(&[classes, 1, 1]);
        g.set(&[k, 0, 0], 1.0);
        SoftPrediction::new(g).unwrap()
    }

    #[test]
    fn correct_one_hot_is_zero() {
        let ann = PointAnnotation::new(3, vec![Point { row: 0, col: 0, class: 2 }]).unwrap();
        let l = partial_cross_entropy(&one_hot(2, 3), &ann).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn uniform_k4_is_ln4() {
        let ann = PointAnnotation::new(4, vec![Point { row: 1, col: 2, class: 1 }]).unwrap();
        let l = partial_cross_entropy(&SoftPrediction::uniform(4, 3, 3), &ann).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let ann = PointAnnotation::new(3, vec![Point { row: 0, col: 0, class: 0 }]).unwrap();
        let l = partial_cross_entropy(&one_hot(2, 3), &ann).unwrap();
        assert!((l.value - 27.631021115928547).abs() < 1e-9);
        assert!(l.grad.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_only_at_annotated_pixels() {
        let ann = PointAnnotation::new(2, vec![Point { row: 0, col: 1, class: 1 }]).unwrap();
        let l = partial_cross_entropy(&SoftPrediction::uniform(2, 2, 2), &ann).unwrap();
        let nonzero: Vec<usize> = (0..l.grad.len()).filter(|&i| l.grad.values()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![4 + 1]);
        assert!((l.grad.values()[5] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_annotation_is_no_supervision() {
        let l = partial_cross_entropy(&SoftPrediction::uniform(2, 2, 2), &PointAnnotation::empty(2)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        let ann = PointAnnotation::new(2, vec![Point { row: 5, col: 0, class: 0 }]).unwrap();
        assert!(partial_cross_entropy(&SoftPrediction::uniform(2, 2, 2), &ann).is_err());
    }
}
