//! Finite-difference verification of every analytic gradient.
//!
//! Each component is checked on `trials` random instances (grids up to
//! 8x8, K up to 3, batches up to 3). Loss terms are differentiated with
//! respect to logits, so the softmax chain is exercised too. Coordinates
//! whose central-difference stencil crosses a kink (a TV difference
//! changing sign, a ReLU switching, a pooling choice moving) are skipped.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{relative_error, softmax, softmax_backward_from_probs, Grid, Image, LogitField, SoftPrediction};
use crate::losses::{
    cv_loss, ms_data_term, partial_cross_entropy, total_loss, tv_term, BatchItem, LossMode, LossWeights, PairingPlan,
    Point, PointAnnotation,
};
use crate::nn::{backward, forward, init_params, ModelParams, ModelSpec};
use crate::rng::keyed_rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates with a smaller analytic gradient are not scored.
pub const MIN_GRADIENT: f64 = 1e-7;
const CONV_COORDS_PER_TENSOR: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "pce")]
    Pce,
    #[serde(rename = "ms_data_term")]
    MsData,
    #[serde(rename = "tv_term")]
    Tv,
    #[serde(rename = "cv_loss")]
    Cv,
    #[serde(rename = "total_loss")]
    Total,
    #[serde(rename = "conv_ed")]
    ConvEd,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Softmax,
        Component::Pce,
        Component::MsData,
        Component::Tv,
        Component::Cv,
        Component::Total,
        Component::ConvEd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Softmax => "softmax",
            Component::Pce => "pce",
            Component::MsData => "ms_data_term",
            Component::Tv => "tv_term",
            Component::Cv => "cv_loss",
            Component::Total => "total_loss",
            Component::ConvEd => "conv_ed",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| crate::Error::InvalidConfig(format!("unknown gradient component {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: u64,
    /// Scales the analytic gradient of one component by 1.01, to confirm
    /// the harness notices.
    pub inject_fault: Option<Component>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, trials: 50, inject_fault: None }
    }
}

/// Worst scored coordinate of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub trial: u64,
    /// Which tensor (`"logits[1]"`, `"enc2.weight"`, ...).
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: Component,
    pub instances: u64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<Worst>,
    pub passed: bool,
}

impl ComponentReport {
    pub fn worst_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: u64,
    pub tolerance: f64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ComponentReport> {
        self.components.iter().filter(|c| !c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>9} {:>8} {:>8} {:>12}  status\n",
            "component", "instances", "checked", "skipped", "worst rel"
        );
        for c in &self.components {
            out.push_str(&format!(
                "{:<14} {:>9} {:>8} {:>8} {:>12.3e}  {}\n",
                c.component.as_str(),
                c.instances,
                c.checked,
                c.skipped,
                c.worst_rel_error(),
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

struct Tally {
    component: Component,
    instances: u64,
    checked: usize,
    skipped: usize,
    worst: Option<Worst>,
    fault: bool,
}

impl Tally {
    fn new(component: Component, fault: Option<Component>) -> Self {
        Self { component, instances: 0, checked: 0, skipped: 0, worst: None, fault: fault == Some(component) }
    }

    /// Compares `analytic` against central differences of `f` at the
    /// listed coordinates of `x`. `pattern` identifies the smooth piece
    /// the point lies in.
    #[allow(clippy::too_many_arguments)]
    fn compare(
        &mut self,
        trial: u64,
        tensor: &str,
        x: &[f64],
        analytic: &[f64],
        coords: impl IntoIterator<Item = usize>,
        mut f: impl FnMut(&[f64]) -> f64,
        mut pattern: impl FnMut(&[f64]) -> Vec<u64>,
    ) {
        let mut probe = x.to_vec();
        for i in coords {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let (plus, pat_plus) = (f(&probe), pattern(&probe));
            probe[i] = orig - STEP;
            let (minus, pat_minus) = (f(&probe), pattern(&probe));
            probe[i] = orig;
            if pat_plus != pat_minus {
                self.skipped += 1;
                continue;
            }
            let a = if self.fault { analytic[i] * 1.01 } else { analytic[i] };
            if a.abs() <= MIN_GRADIENT {
                continue;
            }
            let n = (plus - minus) / (2.0 * STEP);
            let rel = if n.is_finite() { relative_error(a, n) } else { f64::INFINITY };
            self.checked += 1;
            if self.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                self.worst = Some(Worst {
                    trial,
                    tensor: tensor.to_string(),
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                });
            }
        }
    }

    fn finish(self) -> ComponentReport {
        let passed = self.worst.as_ref().is_none_or(|w| w.rel_error <= TOLERANCE);
        ComponentReport {
            component: self.component,
            instances: self.instances,
            checked: self.checked,
            skipped: self.skipped,
            worst: self.worst,
            passed,
        }
    }
}

pub(crate) struct Instance {
    pub(crate) classes: usize,
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) images: Vec<Image>,
    pub(crate) logits: Vec<Vec<f64>>,
    pub(crate) annotations: Vec<PointAnnotation>,
    pub(crate) plan: PairingPlan,
}

fn random_annotation(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> PointAnnotation {
    let mut pixels: Vec<usize> = (0..h * w).collect();
    let mut points = Vec::new();
    for k in 0..classes {
        if points.len() < pixels.len() && rng.gen_bool(0.8) {
            let pick = pixels.swap_remove(rng.gen_range(0..pixels.len()));
            points.push(Point { row: pick / w, col: pick % w, class: k });
        }
    }
    PointAnnotation::new(classes, points).expect("distinct pixels and classes")
}

pub(crate) fn random_instance(seed: u64, trial: u64, batch: usize, even: bool) -> Instance {
    let mut rng = keyed_rng(seed, "gradcheck", &trial.to_le_bytes());
    let classes = rng.gen_range(2..=3);
    let (height, width) = if even {
        (2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4))
    } else {
        (rng.gen_range(2..=8), rng.gen_range(2..=8))
    };
    let plane = height * width;
    let images = (0..batch)
        .map(|_| Image::new(height, width, (0..plane).map(|_| rng.gen::<f64>()).collect()).expect("unit interval"))
        .collect();
    let logits = (0..batch).map(|_| (0..classes * plane).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let annotations: Vec<PointAnnotation> =
        (0..batch).map(|_| random_annotation(&mut rng, classes, height, width)).collect();
    let partners = (0..batch)
        .map(|n| {
            (0..classes)
                .map(|k| {
                    if !annotations[n].contains_class(k) {
                        return None;
                    }
                    let pool: Vec<usize> = (0..batch).filter(|&m| m != n && annotations[m].contains_class(k)).collect();
                    (!pool.is_empty()).then(|| pool[rng.gen_range(0..pool.len())])
                })
                .collect()
        })
        .collect();
    Instance { classes, height, width, images, logits, annotations, plan: PairingPlan::new(partners) }
}

impl Instance {
    fn shape(&self) -> [usize; 3] {
        [self.classes, self.height, self.width]
    }

    pub(crate) fn probs(&self, logits: &[f64]) -> SoftPrediction {
        let field = LogitField::new(Grid::from_vec(&self.shape(), logits.to_vec()).expect("shape")).expect("finite");
        softmax(&field).expect("valid logits")
    }

    fn present(&self) -> Vec<Vec<usize>> {
        self.annotations.iter().map(|a| a.present_classes()).collect()
    }
}

/// Sign pattern of all forward differences of every class map.
fn tv_pattern(pred: &SoftPrediction) -> Vec<u64> {
    let (h, w) = (pred.height(), pred.width());
    let mut bits = Vec::new();
    for k in 0..pred.classes() {
        let m = pred.class_map(k);
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    bits.push(u64::from(m[r * w + c + 1] > m[r * w + c]));
                }
                if r + 1 < h {
                    bits.push(u64::from(m[(r + 1) * w + c] > m[r * w + c]));
                }
            }
        }
    }
    bits
}

/// Checks a per-image loss `L(softmax(logits))` with gradient w.r.t. probabilities.
fn check_single(
    tally: &mut Tally,
    trial: u64,
    inst: &Instance,
    loss: impl Fn(&SoftPrediction) -> (f64, Grid),
    pattern: impl Fn(&SoftPrediction) -> Vec<u64>,
) -> Result<()> {
    let x = &inst.logits[0];
    let pred = inst.probs(x);
    let (_, g) = loss(&pred);
    let analytic = softmax_backward_from_probs(&pred, &g)?;
    tally.compare(
        trial,
        "logits[0]",
        x,
        analytic.values(),
        0..x.len(),
        |v| loss(&inst.probs(v)).0,
        |v| pattern(&inst.probs(v)),
    );
    Ok(())
}

/// Checks a batch loss by perturbing the logits of one image at a time.
/// `loss` returns gradients w.r.t. probabilities, or w.r.t. logits when
/// `grads_wrt_logits` is set.
fn check_batch(
    tally: &mut Tally,
    trial: u64,
    inst: &Instance,
    loss: impl Fn(&[SoftPrediction]) -> Result<(f64, Vec<Grid>)>,
    grads_wrt_logits: bool,
    with_tv_pattern: bool,
) -> Result<()> {
    let preds: Vec<SoftPrediction> = inst.logits.iter().map(|l| inst.probs(l)).collect();
    let (_, grads) = loss(&preds)?;
    for (n, x) in inst.logits.iter().enumerate() {
        let analytic =
            if grads_wrt_logits { grads[n].clone() } else { softmax_backward_from_probs(&preds[n], &grads[n])? };
        let eval = |v: &[f64]| {
            let mut p = preds.clone();
            p[n] = inst.probs(v);
            loss(&p).map(|(value, _)| value).unwrap_or(f64::NAN)
        };
        let pattern = |v: &[f64]| if with_tv_pattern { tv_pattern(&inst.probs(v)) } else { Vec::new() };
        tally.compare(trial, &format!("logits[{n}]"), x, analytic.values(), 0..x.len(), eval, pattern);
    }
    Ok(())
}

fn check_softmax(tally: &mut Tally, trial: u64, inst: &Instance, rng: &mut ChaCha8Rng) -> Result<()> {
    let upstream =
        Grid::from_vec(&inst.shape(), (0..inst.logits[0].len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let dot = |p: &SoftPrediction| -> f64 { p.grid().values().iter().zip(upstream.values()).map(|(a, b)| a * b).sum() };
    check_single(tally, trial, inst, |p| (dot(p), upstream.clone()), |_| Vec::new())
}

fn check_conv(tally: &mut Tally, trial: u64, seed: u64, inst: &Instance, rng: &mut ChaCha8Rng) -> Result<()> {
    let spec = ModelSpec::conv_ed(inst.classes, inst.height, inst.width);
    let mut params = init_params(&spec, seed ^ trial)?;
    for p in params.iter_mut() {
        for v in p.value.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let image = &inst.images[0];
    let (logits, cache) = forward(&params, &spec, image, "")?;
    let upstream =
        Grid::from_vec(logits.grid().shape(), (0..logits.grid().len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let grads = backward(&params, &spec, &cache, &upstream)?;
    let eval = |params: &ModelParams| -> (f64, Vec<u64>) {
        let (l, c) = forward(params, &spec, image, "").expect("same shapes");
        (l.grid().values().iter().zip(upstream.values()).map(|(a, b)| a * b).sum(), c.activation_pattern())
    };
    for (idx, g) in &grads {
        let name = params.at(*idx).name.clone();
        let x = params.at(*idx).value.values().to_vec();
        let coords: Vec<usize> = (0..CONV_COORDS_PER_TENSOR.min(x.len())).map(|_| rng.gen_range(0..x.len())).collect();
        let with = |v: &[f64]| {
            let mut p = params.clone();
            p.at_mut(*idx).value.values_mut().copy_from_slice(v);
            eval(&p)
        };
        tally.compare(trial, &name, &x, g.values(), coords, |v| with(v).0, |v| with(v).1);
    }
    Ok(())
}

/// Runs every component on `config.trials` seeded instances.
pub fn run_suite(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut tallies: Vec<Tally> = Component::ALL.iter().map(|&c| Tally::new(c, config.inject_fault)).collect();
    let weights = LossWeights { lambda_cv: 1.0, lambda_ms: 0.5, mu: 0.1, tau: 0.5, freeze_means: false };
    for trial in 0..config.trials {
        let mut rng = keyed_rng(config.seed, "gradcheck-aux", &trial.to_le_bytes());
        let single = random_instance(config.seed, trial, 1, false);
        let batch_len = rng.gen_range(2..=3);
        let batch = random_instance(config.seed, trial, batch_len, false);
        let conv = random_instance(config.seed, trial, 1, true);

        for tally in tallies.iter_mut() {
            tally.instances += 1;
            match tally.component {
                Component::Softmax => check_softmax(tally, trial, &single, &mut rng)?,
                Component::Pce => check_single(
                    tally,
                    trial,
                    &single,
                    |p| {
                        let l = partial_cross_entropy(p, &single.annotations[0]).expect("in bounds");
                        (l.value, l.grad)
                    },
                    |_| Vec::new(),
                )?,
                Component::MsData => check_single(
                    tally,
                    trial,
                    &single,
                    |p| {
                        let l = ms_data_term(&single.images[0], p, false).expect("same shape");
                        (l.value, l.grad)
                    },
                    |_| Vec::new(),
                )?,
                Component::Tv => check_single(
                    tally,
                    trial,
                    &single,
                    |p| {
                        let l = tv_term(p);
                        (l.value, l.grad)
                    },
                    tv_pattern,
                )?,
                Component::Cv => {
                    let images: Vec<&Image> = batch.images.iter().collect();
                    let present = batch.present();
                    check_batch(
                        tally,
                        trial,
                        &batch,
                        |preds| {
                            let refs: Vec<&SoftPrediction> = preds.iter().collect();
                            let l =
                                cv_loss(&images, &refs, &present, &batch.plan, weights.tau, 1.0, weights.mu, false)?;
                            Ok((l.total, l.grads))
                        },
                        false,
                        true,
                    )?
                }
                Component::Total => {
                    let mode = LossMode::ALL[(trial % 3) as usize];
                    check_batch(
                        tally,
                        trial,
                        &batch,
                        |preds| {
                            let items: Vec<BatchItem<'_>> = preds
                                .iter()
                                .zip(&batch.images)
                                .zip(&batch.annotations)
                                .map(|((pred, image), annotation)| BatchItem { image, pred, annotation })
                                .collect();
                            let l = total_loss(mode, &items, &batch.plan, &weights)?;
                            Ok((l.total, l.grad_wrt_logits))
                        },
                        true,
                        mode != LossMode::Pce,
                    )?
                }
                Component::ConvEd => check_conv(tally, trial, config.seed, &conv, &mut rng)?,
            }
        }
    }
    Ok(GradcheckReport {
        seed: config.seed,
        trials: config.trials,
        tolerance: TOLERANCE,
        components: tallies.into_iter().map(Tally::finish).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(&GradcheckConfig { seed: 3, trials: 4, inject_fault: None }).unwrap();
        assert!(report.passed(), "{}", report.to_table());
        assert!(report.components.iter().all(|c| c.checked > 0));
    }

    #[test]
    fn injected_fault_is_named() {
        let report = run_suite(&GradcheckConfig { seed: 3, trials: 2, inject_fault: Some(Component::Tv) }).unwrap();
        let failed: Vec<Component> = report.failures().map(|c| c.component).collect();
        assert_eq!(failed, vec![Component::Tv]);
    }
}
