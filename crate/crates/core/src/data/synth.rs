//! Synthetic dataset: one ellipse per foreground class around a fixed
//! anchor, on a flat background, plus Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize_intensity, DatasetManifest, LabelMask, Sample};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::rng::keyed_rng;

/// Generator parameters. Positions and lengths are fractions of the image
/// side (rows scale with `H`, columns with `W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(rename = "K")]
    pub classes: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// `[row, col]` centre per foreground class (index 0 is class 1).
    pub anchors: Vec<[f64; 2]>,
    pub jitter: f64,
    /// Semi-axis range `[min, max]`.
    pub radius: [f64; 2],
    /// Intensity per class, background first.
    pub means: Vec<f64>,
    pub sigma: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            height: 64,
            width: 64,
            anchors: vec![[0.35, 0.33], [0.62, 0.66]],
            jitter: 0.02,
            radius: [0.08, 0.12],
            means: vec![0.2, 0.5, 0.8],
            sigma: 0.05,
            train: 40,
            test: 10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid_config(msg));
        if self.classes < 2 || self.classes > 256 {
            return bad(format!("K = {} must lie in 2..=256", self.classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.anchors.len() != self.classes - 1 {
            return bad(format!("{} anchors given for {} foreground classes", self.anchors.len(), self.classes - 1));
        }
        if self.means.len() != self.classes {
            return bad(format!("{} means given for K = {}", self.means.len(), self.classes));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and >= 0", self.sigma));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter {} must be finite and >= 0", self.jitter));
        }
        let [lo, hi] = self.radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("radius range [{lo}, {hi}] must satisfy 0 < min <= max"));
        }
        if self.means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("class means must lie in [0, 1]".into());
        }
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                if (self.means[i] - self.means[j]).abs() < 2.0 * self.sigma * (1.0 - 1e-9) {
                    return bad(format!(
                        "means of classes {i} and {j} ({}, {}) are closer than 2 sigma = {}",
                        self.means[i],
                        self.means[j],
                        2.0 * self.sigma
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SynthOutput {
    pub fn all_samples(&self) -> Vec<Sample> {
        self.train.iter().chain(&self.test).cloned().collect()
    }
}

/// A filled axis-aligned ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    row: f64,
    col: f64,
    radius_row: f64,
    radius_col: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dr = (r as f64 - self.row) / self.radius_row;
        let dc = (c as f64 - self.col) / self.radius_col;
        dr * dr + dc * dc <= 1.0
    }
}

fn draw_sample(spec: &SynthSpec, id: String) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = keyed_rng(spec.seed, "synth", id.as_bytes());
    let mut mask = LabelMask::filled(h, w, 0);
    for (i, anchor) in spec.anchors.iter().enumerate() {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = spec.jitter * rng.gen::<f64>().sqrt();
        let row = ((anchor[0] + dist * angle.sin()) * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
        let col = ((anchor[1] + dist * angle.cos()) * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
        let [lo, hi] = spec.radius;
        let mut radius = || if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let e = Ellipse { row, col, radius_row: radius() * h as f64, radius_col: radius() * w as f64 };
        for r in 0..h {
            for c in 0..w {
                if e.contains(r, c) {
                    mask.set(r, c, (i + 1) as u8);
                }
            }
        }
    }
    let pixels: Vec<f64> = if spec.sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
        mask.labels().iter().map(|&l| quantize_intensity(spec.means[usize::from(l)] + noise.sample(&mut rng))).collect()
    } else {
        mask.labels().iter().map(|&l| quantize_intensity(spec.means[usize::from(l)])).collect()
    };
    Ok(Sample { id, image: Image::new(h, w, pixels)?, mask: Some(mask), annotation: None })
}

/// Generates the train and test splits. Each image has its own random stream
/// keyed by its id.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let train_ids: Vec<String> = (0..spec.train).map(|i| format!("train_{i:04}")).collect();
    let test_ids: Vec<String> = (0..spec.test).map(|i| format!("test_{i:04}")).collect();
    let train = train_ids.iter().map(|id| draw_sample(spec, id.clone())).collect::<Result<Vec<_>>>()?;
    let test = test_ids.iter().map(|id| draw_sample(spec, id.clone())).collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        classes: spec.classes,
        height: spec.height,
        width: spec.width,
        train: train_ids,
        test: test_ids,
    };
    Ok(SynthOutput { manifest, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_fixed_anchor_images_are_identical() {
        let spec = SynthSpec { sigma: 0.0, jitter: 0.0, radius: [0.15, 0.15], train: 4, test: 0, ..Default::default() };
        let out = synth_generate(&spec).unwrap();
        let first = &out.train[0];
        for s in &out.train[1..] {
            assert_eq!(s.image, first.image);
            assert_eq!(s.mask, first.mask);
        }
        let mask = first.mask.as_ref().unwrap();
        for (i, &px) in first.image.pixels().iter().enumerate() {
            assert_eq!(px, quantize_intensity(spec.means[usize::from(mask.labels()[i])]));
        }
    }

    #[test]
    fn ellipse_centre_carries_its_class() {
        let spec = SynthSpec { jitter: 0.0, ..Default::default() };
        let out = synth_generate(&spec).unwrap();
        let mask = out.train[0].mask.as_ref().unwrap();
        for (i, a) in spec.anchors.iter().enumerate() {
            let r = (a[0] * 63.0).round() as usize;
            let c = (a[1] * 63.0).round() as usize;
            assert_eq!(mask.get(r, c), i + 1);
        }
    }

    #[test]
    fn threshold_oracle_recovers_masks() {
        let out = synth_generate(&SynthSpec::default()).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for s in out.all_samples() {
            let mask = s.mask.unwrap();
            for (i, &v) in s.image.pixels().iter().enumerate() {
                let guess = if v < 0.35 {
                    0
                } else if v < 0.65 {
                    1
                } else {
                    2
                };
                hit += usize::from(guess == usize::from(mask.labels()[i]));
                total += 1;
            }
        }
        assert!(hit as f64 / total as f64 >= 0.99, "{hit}/{total}");
    }

    #[test]
    fn overlapping_means_rejected() {
        let spec = SynthSpec { means: vec![0.2, 0.25, 0.8], ..Default::default() };
        assert!(matches!(synth_generate(&spec), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn separation_of_exactly_two_sigma_is_allowed() {
        let spec = SynthSpec { means: vec![0.4, 0.5, 0.6], train: 1, test: 0, ..Default::default() };
        assert!(synth_generate(&spec).is_ok());
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec { train: 3, test: 2, ..Default::default() };
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap().train[0].image, synth_generate(&other).unwrap().train[0].image);
    }
}
