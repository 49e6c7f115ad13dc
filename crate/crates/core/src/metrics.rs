//! Overlap and boundary metrics on hard label masks.

use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::grid::SoftPrediction;

/// Per-pixel argmax. Ties go to the smaller class id.
pub fn hard_mask(pred: &SoftPrediction) -> LabelMask {
    let (k, h, w) = (pred.classes(), pred.height(), pred.width());
    let plane = h * w;
    let v = pred.grid().values();
    let labels = (0..plane)
        .map(|s| {
            let mut best = 0;
            for j in 1..k {
                if v[j * plane + s] > v[best * plane + s] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels).expect("plane-sized label vector")
}

fn assert_same_shape(a: &LabelMask, b: &LabelMask) {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()), "metric inputs must share a shape");
}

/// Dice coefficient of class `k`; 1 when the class is absent from both.
pub fn dsc(pred: &LabelMask, gt: &LabelMask, k: usize) -> f64 {
    assert_same_shape(pred, gt);
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (in_p, in_g) = (usize::from(a) == k, usize::from(b) == k);
        p += usize::from(in_p);
        g += usize::from(in_g);
        both += usize::from(in_p && in_g);
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Region pixels with a 4-neighbour outside the region (the image border
/// counts as outside).
pub fn boundary(mask: &LabelMask, k: usize) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |r: usize, c: usize| mask.get(r, c) == k;
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if inside(r, c) {
                out[r * w + c] = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !inside(r - 1, c)
                    || !inside(r + 1, c)
                    || !inside(r, c - 1)
                    || !inside(r, c + 1);
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
/// Infinite entries contribute no parabola.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut finite = (0..f.len()).filter(|&q| f[q].is_finite());
    let Some(first) = finite.next() else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in finite {
        let intersect = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Linear interpolation between order statistics at position `q (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pooled symmetric boundary distances between the class-`k` regions.
/// `None` when either region is empty.
pub fn boundary_distances(pred: &LabelMask, gt: &LabelMask, k: usize) -> Option<Vec<f64>> {
    assert_same_shape(pred, gt);
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary(pred, k);
    let bg = boundary(gt, k);
    if !bp.contains(&true) || !bg.contains(&true) {
        return None;
    }
    let to_g = squared_distance_transform(&bg, h, w);
    let to_p = squared_distance_transform(&bp, h, w);
    let mut d: Vec<f64> = (0..h * w)
        .filter(|&s| bp[s])
        .map(|s| to_g[s].sqrt())
        .chain((0..h * w).filter(|&s| bg[s]).map(|s| to_p[s].sqrt()))
        .collect();
    d.sort_by(f64::total_cmp);
    Some(d)
}

/// 95th-percentile symmetric boundary distance of class `k`, in pixels.
/// One empty region gives the image diagonal, two give 0.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, k: usize) -> f64 {
    let (in_p, in_g) = (pred.contains(k), gt.contains(k));
    match (in_p, in_g) {
        (false, false) => 0.0,
        (true, true) => percentile(&boundary_distances(pred, gt, k).expect("nonempty regions"), 0.95),
        _ => (pred.height() as f64).hypot(pred.width() as f64),
    }
}

/// Resets the outermost `width` columns on each side to background.
pub fn central_bias_filter(mask: &LabelMask, width: usize) -> LabelMask {
    let mut out = mask.clone();
    let w = mask.width();
    for r in 0..mask.height() {
        for c in 0..w {
            if c < width || c + width >= w {
                out.set(r, c, 0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Columns zeroed on each side before scoring; 0 disables the filter.
    pub central_bias_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Images whose ground truth contains the class.
    pub images: usize,
    pub dsc: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub central_bias_width: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Mean over foreground classes that appear in at least one ground truth.
    pub dsc_avg: Option<f64>,
    pub hd95_avg: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(preds: &[LabelMask], gts: &[LabelMask], classes: usize, config: &EvalConfig) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid_input(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    for (p, g) in preds.iter().zip(gts) {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Error::invalid_input(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.height(),
                p.width(),
                g.height(),
                g.width()
            )));
        }
    }
    let filtered: Vec<LabelMask> =
        preds
            .iter()
            .map(|p| {
                if config.central_bias_width > 0 {
                    central_bias_filter(p, config.central_bias_width)
                } else {
                    p.clone()
                }
            })
            .collect();
    let per_class: Vec<ClassMetrics> = (1..classes)
        .map(|k| {
            let pairs: Vec<(&LabelMask, &LabelMask)> =
                filtered.iter().zip(gts).filter(|(_, g)| g.contains(k)).collect();
            ClassMetrics {
                class: k,
                images: pairs.len(),
                dsc: mean(pairs.iter().map(|(p, g)| dsc(p, g, k))),
                hd95: mean(pairs.iter().map(|(p, g)| hd95(p, g, k))),
            }
        })
        .collect();
    Ok(EvalReport {
        images: preds.len(),
        central_bias_width: config.central_bias_width,
        dsc_avg: mean(per_class.iter().filter_map(|c| c.dsc)),
        hd95_avg: mean(per_class.iter().filter_map(|c| c.hd95)),
        per_class,
    })
}

impl EvalReport {
    /// Aligned table: one row per metric, average first, then one column
    /// per foreground class.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut header = vec!["metric".to_string(), "average".to_string()];
        header.extend(self.per_class.iter().map(|c| format!("class {}", c.class)));
        let mut dsc_row = vec!["DSC".to_string(), fmt(self.dsc_avg)];
        dsc_row.extend(self.per_class.iter().map(|c| fmt(c.dsc)));
        let mut hd_row = vec!["HD95".to_string(), fmt(self.hd95_avg)];
        hd_row.extend(self.per_class.iter().map(|c| fmt(c.hd95)));
        let rows = [header, dsc_row, hd_row];
        let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap()).collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
