//! Dataset ingestion, point-annotation sampling, augmentation and the
//! synthetic dataset generator.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! images/<id>.pgm      P5, maxval 255, intensities scaled to [0, 1] on load
//! masks/<id>.pgm       P5, pixel value = class id
//! annotations.json     { "<id>": [ { "row": r, "col": c, "class": k }, ... ] }
//! manifest.json        { "K": .., "H": .., "W": .., "train": [ids], "test": [ids] }
//! ```

mod pgm;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::losses::{Point, PointAnnotation};
use crate::rng::keyed_rng;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm, Greymap};
pub use synth::{synth_generate, SynthOutput, SynthSpec};

/// Dense per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid_input(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, labels: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        usize::from(self.labels[row * self.width + col])
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.labels[row * self.width + col] = class;
    }

    pub fn max_class(&self) -> Option<usize> {
        self.labels.iter().max().map(|&m| usize::from(m))
    }

    /// Classes that occur in the mask, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        self.labels.iter().for_each(|&l| seen[usize::from(l)] = true);
        (0..256).filter(|&k| seen[k]).collect()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.labels.iter().any(|&l| usize::from(l) == k)
    }
}

/// One dataset item.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<LabelMask>,
    pub annotation: Option<PointAnnotation>,
}

impl Sample {
    /// Checks that annotated points agree with the mask.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        if let Some(mask) = &self.mask {
            if (mask.height(), mask.width()) != (h, w) {
                return Err(Error::invalid_input(format!(
                    "sample {}: mask is {}x{}, image {h}x{w}",
                    self.id,
                    mask.height(),
                    mask.width()
                )));
            }
        }
        if let Some(ann) = &self.annotation {
            ann.check_bounds(h, w)?;
            if let Some(mask) = &self.mask {
                for p in ann.points() {
                    if mask.get(p.row, p.col) != p.class {
                        return Err(Error::invalid_input(format!(
                            "sample {}: point ({}, {}) labeled {} but mask says {}",
                            self.id,
                            p.row,
                            p.col,
                            p.class,
                            mask.get(p.row, p.col)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "K")]
    pub classes: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// A loaded dataset. Samples are sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub manifest: Option<DatasetManifest>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn classes(&self) -> Option<usize> {
        self.manifest.as_ref().map(|m| m.classes)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    fn split(&self, ids: impl Fn(&DatasetManifest) -> &Vec<String>) -> Vec<Sample> {
        match &self.manifest {
            Some(m) => ids(m).iter().filter_map(|id| self.get(id).cloned()).collect(),
            None => Vec::new(),
        }
    }

    pub fn train(&self) -> Vec<Sample> {
        self.split(|m| &m.train)
    }

    pub fn test(&self) -> Vec<Sample> {
        self.split(|m| &m.test)
    }
}

pub type AnnotationFile = BTreeMap<String, Vec<Point>>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::ingest(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pgm_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn image_from_greymap(map: &Greymap) -> Result<Image> {
    let scale = f64::from(map.maxval);
    let values = map.samples.iter().map(|&s| f64::from(s) / scale).collect();
    Image::new(map.height, map.width, values)
}

/// Quantizes intensities to 8 bits (the on-disk precision).
pub fn image_to_greymap(image: &Image) -> Greymap {
    Greymap {
        width: image.width(),
        height: image.height(),
        maxval: 255,
        samples: image.pixels().iter().map(|v| (v * 255.0).round() as u16).collect(),
    }
}

/// Rounds every intensity to the nearest multiple of 1/255, matching what
/// survives a write/load cycle.
pub fn quantize_intensity(v: f64) -> f64 {
    f64::from((v.clamp(0.0, 1.0) * 255.0).round() as u16) / 255.0
}

/// Loads every sample under `root`. An empty directory yields an empty dataset.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let manifest: Option<DatasetManifest> =
        if manifest_path.exists() { Some(read_json(&manifest_path)?) } else { None };
    let ids = pgm_ids(&root.join("images"))?;
    if ids.is_empty() {
        return Ok(Dataset { manifest, samples: Vec::new() });
    }
    let manifest = manifest.ok_or_else(|| Error::ingest(&manifest_path, "missing manifest"))?;
    let annotations_path = root.join("annotations.json");
    let annotations: AnnotationFile =
        if annotations_path.exists() { read_json(&annotations_path)? } else { BTreeMap::new() };

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = root.join("images").join(format!("{id}.pgm"));
        let image =
            image_from_greymap(&read_pgm(&image_path)?).map_err(|e| Error::ingest(&image_path, e.to_string()))?;
        if (image.height(), image.width()) != (manifest.height, manifest.width) {
            return Err(Error::ingest(
                &image_path,
                format!(
                    "image is {}x{}, manifest says {}x{}",
                    image.height(),
                    image.width(),
                    manifest.height,
                    manifest.width
                ),
            ));
        }
        let mask_path = root.join("masks").join(format!("{id}.pgm"));
        let mask = if mask_path.exists() {
            let map = read_pgm(&mask_path)?;
            if (map.height, map.width) != (image.height(), image.width()) {
                return Err(Error::ingest(
                    &mask_path,
                    format!("mask is {}x{}, image {}x{}", map.height, map.width, image.height(), image.width()),
                ));
            }
            if let Some(bad) = map.samples.iter().find(|&&s| usize::from(s) >= manifest.classes) {
                return Err(Error::ingest(&mask_path, format!("class id {bad} >= K = {}", manifest.classes)));
            }
            Some(LabelMask::new(map.height, map.width, map.samples.iter().map(|&s| s as u8).collect())?)
        } else {
            None
        };
        let annotation = match annotations.get(&id) {
            Some(points) => Some(
                PointAnnotation::new(manifest.classes, points.clone())
                    .map_err(|e| Error::ingest(&annotations_path, format!("{id}: {e}")))?,
            ),
            None => None,
        };
        let sample = Sample { id, image, mask, annotation };
        sample.validate().map_err(|e| Error::ingest(&annotations_path, e.to_string()))?;
        samples.push(sample);
    }
    Ok(Dataset { manifest: Some(manifest), samples })
}

/// Writes images, masks, the manifest and (if any sample has one) the
/// annotation file.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    for dir in [root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_pgm(&root.join("images").join(format!("{}.pgm", s.id)), &image_to_greymap(&s.image))?;
        if let Some(mask) = &s.mask {
            write_pgm(&root.join("masks").join(format!("{}.pgm", s.id)), &mask_to_greymap(mask))?;
        }
    }
    write_json(&root.join("manifest.json"), manifest)?;
    if samples.iter().any(|s| s.annotation.is_some()) {
        write_annotations(root, samples)?;
    }
    Ok(())
}

pub fn mask_to_greymap(mask: &LabelMask) -> Greymap {
    Greymap {
        width: mask.width(),
        height: mask.height(),
        maxval: 255,
        samples: mask.labels().iter().map(|&l| u16::from(l)).collect(),
    }
}

pub fn write_annotations(root: &Path, samples: &[Sample]) -> Result<()> {
    let file: AnnotationFile =
        samples.iter().filter_map(|s| s.annotation.as_ref().map(|a| (s.id.clone(), a.points().to_vec()))).collect();
    write_json(&root.join("annotations.json"), &file)
}

/// Draws one pixel uniformly from each class region present in the mask,
/// using a stream keyed by `(seed, sample id)`.
pub fn annotate_sample(sample: &Sample, classes: usize, seed: u64) -> Result<PointAnnotation> {
    let mask = sample.mask.as_ref().ok_or_else(|| Error::invalid_input(format!("sample {} has no mask", sample.id)))?;
    let mut rng = keyed_rng(seed, "annotate", sample.id.as_bytes());
    let mut points = Vec::new();
    for k in mask.present_classes() {
        let region: Vec<usize> = (0..mask.labels().len()).filter(|&i| usize::from(mask.labels()[i]) == k).collect();
        let pick = region[rng.gen_range(0..region.len())];
        points.push(Point { row: pick / mask.width(), col: pick % mask.width(), class: k });
    }
    PointAnnotation::new(classes, points)
}

pub fn generate_annotations(samples: &[Sample], classes: usize, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let annotation = annotate_sample(s, classes, seed)?;
            Ok(Sample { annotation: Some(annotation), ..s.clone() })
        })
        .collect()
}

/// A horizontal flip (applied first) followed by counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentOp {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl AugmentOp {
    /// Draws the augmentation for `(seed, sample id, iteration)`. Non-square
    /// grids only rotate by 0 or 180 degrees so the shape is preserved.
    pub fn draw(seed: u64, sample_id: &str, iteration: u64, square: bool) -> Self {
        let mut key = iteration.to_le_bytes().to_vec();
        key.extend_from_slice(sample_id.as_bytes());
        let mut rng = keyed_rng(seed, "augment", &key);
        let flip = rng.gen_bool(0.5);
        let turns: u8 = rng.gen_range(0..4);
        Self { flip, quarter_turns: if square { turns } else { turns & 2 } }
    }

    /// Where pixel `(row, col)` of an `height x width` grid lands.
    pub fn map_point(&self, row: usize, col: usize, height: usize, width: usize) -> (usize, usize) {
        let (mut r, mut c, mut h, mut w) = (row, col, height, width);
        if self.flip {
            c = w - 1 - c;
        }
        for _ in 0..self.quarter_turns % 4 {
            (r, c) = (w - 1 - c, r);
            std::mem::swap(&mut h, &mut w);
        }
        (r, c)
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (width, height)
        } else {
            (height, width)
        }
    }

    fn apply_grid<T: Copy + Default>(&self, values: &[T], height: usize, width: usize) -> Vec<T> {
        let (_, ow) = self.output_dims(height, width);
        let mut out = vec![T::default(); values.len()];
        for r in 0..height {
            for c in 0..width {
                let (nr, nc) = self.map_point(r, c, height, width);
                out[nr * ow + nc] = values[r * width + c];
            }
        }
        out
    }
}

pub fn apply_augmentation(sample: &Sample, op: AugmentOp) -> Result<Sample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let (oh, ow) = op.output_dims(h, w);
    let image = Image::new(oh, ow, op.apply_grid(sample.image.pixels(), h, w))?;
    let mask = match &sample.mask {
        Some(m) => Some(LabelMask::new(oh, ow, op.apply_grid(m.labels(), h, w))?),
        None => None,
    };
    let annotation = match &sample.annotation {
        Some(a) => {
            let points = a
                .points()
                .iter()
                .map(|p| {
                    let (row, col) = op.map_point(p.row, p.col, h, w);
                    Point { row, col, class: p.class }
                })
                .collect();
            Some(PointAnnotation::new(a.classes(), points)?)
        }
        None => None,
    };
    Ok(Sample { id: sample.id.clone(), image, mask, annotation })
}

/// Random flip and rotation keyed by `(seed, sample id, iteration)`.
pub fn augment(sample: &Sample, seed: u64, iteration: u64) -> Result<Sample> {
    let square = sample.image.height() == sample.image.width();
    apply_augmentation(sample, AugmentOp::draw(seed, &sample.id, iteration, square))
}

/// Resizes a sample: bilinear (pixel-centre aligned) for the image,
/// nearest-neighbour for the mask. Annotated points move to the target
/// pixel nearest their centre and are dropped if that pixel's mask class no
/// longer matches.
pub fn resize_sample(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let src = |r: usize, c: usize| sample.image.get(r, c);
    let mut pixels = Vec::with_capacity(height * width);
    for r in 0..height {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..width {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src(y0, x0) * (1.0 - tx) + src(y0, x1) * tx;
            let bottom = src(y1, x0) * (1.0 - tx) + src(y1, x1) * tx;
            pixels.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    let image = Image::new(height, width, pixels)?;
    let nearest = |r: usize, c: usize| {
        ((((r as f64 + 0.5) * sy) as usize).min(h - 1), (((c as f64 + 0.5) * sx) as usize).min(w - 1))
    };
    let mask = match &sample.mask {
        Some(m) => {
            let mut labels = Vec::with_capacity(height * width);
            for r in 0..height {
                for c in 0..width {
                    let (sr, sc) = nearest(r, c);
                    labels.push(m.labels()[sr * w + sc]);
                }
            }
            Some(LabelMask::new(height, width, labels)?)
        }
        None => None,
    };
    let annotation = match &sample.annotation {
        Some(a) => {
            let points = a
                .points()
                .iter()
                .filter_map(|p| {
                    let row = (((p.row as f64 + 0.5) / sy) as usize).min(height - 1);
                    let col = (((p.col as f64 + 0.5) / sx) as usize).min(width - 1);
                    let keep = mask.as_ref().is_none_or(|m| m.get(row, col) == p.class);
                    keep.then_some(Point { row, col, class: p.class })
                })
                .collect();
            Some(PointAnnotation::new(a.classes(), points)?)
        }
        None => None,
    };
    Ok(Sample { id: sample.id.clone(), image, mask, annotation })
}
