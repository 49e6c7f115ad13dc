//! Loss terms and their analytic gradients with respect to the predicted
//! probabilities.
//!
//! All spatial integrals are plain sums over pixels (no normalization by the
//! pixel count), so the effective weight of every regularizer scales with the
//! image resolution.

mod contrastive;
mod mumford_shah;
mod pce;
mod total;
mod tv;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use contrastive::{
    contrastive_sum, cosine_backward, cosine_similarity, cosine_similarity_raw, cv_loss, CvLoss, PairingPlan,
    COSINE_EPS,
};
pub use mumford_shah::{class_means, means_backward, ms_data_term, variance_map, ClassMeans, VarianceMap, MEAN_EPS};
pub use pce::{partial_cross_entropy, LOG_EPS};
pub use total::{total_loss, BatchItem, LossBreakdown, LossMode, LossWeights};
pub use tv::{tv_map, tv_map_grad, tv_term, TV_SMOOTHING};

/// A scalar loss together with its gradient with respect to the prediction
/// probabilities (`[K, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Grid,
}

/// One labeled pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

/// Sparse point labels for one image: at most one pixel per class, no two
/// points on the same pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointAnnotation {
    classes: usize,
    points: Vec<Point>,
}

impl PointAnnotation {
    pub fn new(classes: usize, mut points: Vec<Point>) -> Result<Self> {
        points.sort_by_key(|p| p.class);
        for (i, p) in points.iter().enumerate() {
            if p.class >= classes {
                return Err(Error::invalid_input(format!("annotated class {} outside [0, {classes})", p.class)));
            }
            if i > 0 && points[i - 1].class == p.class {
                return Err(Error::invalid_input(format!("class {} annotated more than once", p.class)));
            }
            if points[..i].iter().any(|q| (q.row, q.col) == (p.row, p.col)) {
                return Err(Error::invalid_input(format!("two points share pixel ({}, {})", p.row, p.col)));
            }
        }
        Ok(Self { classes, points })
    }

    pub fn empty(classes: usize) -> Self {
        Self { classes, points: Vec::new() }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Points sorted by class.
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains_class(&self, k: usize) -> bool {
        self.points.iter().any(|p| p.class == k)
    }

    /// Annotated classes in ascending order.
    pub fn present_classes(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.class).collect()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        match self.points.iter().find(|p| p.row >= height || p.col >= width) {
            Some(p) => Err(Error::invalid_input(format!(
                "annotated point ({}, {}) outside {height}x{width} image",
                p.row, p.col
            ))),
            None => Ok(()),
        }
    }
}

pub(crate) fn check_same_plane(what: &str, (h1, w1): (usize, usize), (h2, w2): (usize, usize)) -> Result<()> {
    if (h1, w1) != (h2, w2) {
        return Err(Error::invalid_input(format!("{what}: {h1}x{w1} does not match {h2}x{w2}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_invariants() {
        let p = |row, col, class| Point { row, col, class };
        assert!(PointAnnotation::new(2, vec![p(0, 0, 0), p(0, 1, 1)]).is_ok());
        assert!(PointAnnotation::new(2, vec![p(0, 0, 0), p(0, 1, 0)]).is_err());
        assert!(PointAnnotation::new(2, vec![p(0, 0, 2)]).is_err());
        assert!(PointAnnotation::new(3, vec![p(1, 1, 0), p(1, 1, 2)]).is_err());
        let ann = PointAnnotation::new(3, vec![p(3, 3, 2), p(0, 0, 0)]).unwrap();
        assert_eq!(ann.present_classes(), vec![0, 2]);
        assert!(ann.check_bounds(4, 4).is_ok());
        assert!(ann.check_bounds(3, 4).is_err());
    }
}
