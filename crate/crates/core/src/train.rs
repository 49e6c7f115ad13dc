//! SGD training loop with a poly learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::grid::{softmax, Image, SoftPrediction};
use crate::losses::{total_loss, BatchItem, LossMode, LossWeights, PairingPlan, PointAnnotation};
use crate::nn::{backward, forward, init_params, ModelKind, ModelParams, ModelSpec};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub model: ModelKind,
    pub lambda_cv: f64,
    pub lambda_ms: f64,
    pub mu: f64,
    pub tau: f64,
    pub freeze_means: bool,
    /// Defaults to 0.05 for logit fields and 0.001 for the encoder-decoder.
    pub lr0: Option<f64>,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Random flips and quarter turns (encoder-decoder only).
    pub augment: bool,
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_every: u64,
    pub central_bias_width: usize,
    /// Optional `[H, W]` every image and mask is resized to before use.
    pub resize: Option<[usize; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: LossMode::PceCv,
            model: ModelKind::ConvEd,
            lambda_cv: w.lambda_cv,
            lambda_ms: w.lambda_ms,
            mu: w.mu,
            tau: w.tau,
            freeze_means: w.freeze_means,
            lr0: None,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 8,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
            central_bias_width: 0,
            resize: None,
        }
    }
}

pub const DEFAULT_ITERATIONS: u64 = 400;

impl TrainConfig {
    pub fn lr0(&self) -> f64 {
        self.lr0.unwrap_or(match self.model {
            ModelKind::LogitField => 0.05,
            ModelKind::ConvEd => 0.001,
        })
    }

    /// The config with every optional field filled in.
    pub fn resolved(&self) -> Self {
        Self { lr0: Some(self.lr0()), ..self.clone() }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cv: self.lambda_cv,
            lambda_ms: self.lambda_ms,
            mu: self.mu,
            tau: self.tau,
            freeze_means: self.freeze_means,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid_config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        let lr0 = self.lr0();
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {lr0}"));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad(format!("power must be > 0, got {}", self.power));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("lambda_cv", self.lambda_cv),
            ("lambda_ms", self.lambda_ms),
            ("mu", self.mu),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some([h, w]) = self.resize {
            if h == 0 || w == 0 {
                return bad("resize dimensions must be positive".into());
            }
        }
        Ok(())
    }
}

/// `lr0 (1 - iteration / total)^power`.
pub fn poly_lr(lr0: f64, iteration: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = 1.0 - iteration.min(total) as f64 / total as f64;
    lr0 * frac.powf(power)
}

/// Momentum SGD on the gradients stored in `params`. Nothing is updated if
/// any gradient is non-finite; a step that overflows a parameter is reported
/// as divergence after it is applied.
pub fn sgd_step(params: &mut ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient for parameter {}", p.name)));
    }
    for p in params.iter_mut() {
        let decay = if p.decay { weight_decay } else { 0.0 };
        let values = p.value.values_mut();
        let vel = p.momentum.values_mut();
        for ((x, v), &g) in values.iter_mut().zip(vel.iter_mut()).zip(p.grad.values()) {
            *v = momentum * *v + g + decay * *x;
            *x -= lr * *v;
        }
    }
    match params.iter().find(|p| !p.value.is_finite()) {
        Some(p) => Err(Error::Divergence(format!("parameter {} became non-finite (lr {lr:e})", p.name))),
        None => Ok(()),
    }
}

/// Indices into the sample list plus the positive-partner plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub plan: PairingPlan,
}

/// Draws batch `iteration` from the epoch's seeded permutation. Each epoch
/// holds `len / batch_size` full batches; leftovers wait for a later shuffle.
pub fn assemble_batch(annotations: &[&PointAnnotation], iteration: u64, seed: u64, batch_size: usize) -> Result<Batch> {
    let n = annotations.len();
    if n == 0 {
        return Err(Error::invalid_input("cannot draw a batch from an empty dataset"));
    }
    let b = batch_size.clamp(1, n);
    let per_epoch = (n / b) as u64;
    let (epoch, slot) = (iteration / per_epoch, (iteration % per_epoch) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, "epoch", &epoch.to_le_bytes()));
    let indices = order[slot * b..(slot + 1) * b].to_vec();

    let classes = annotations.iter().map(|a| a.classes()).max().unwrap_or(0);
    let mut rng = keyed_rng(seed, "pairing", &iteration.to_le_bytes());
    let partners = (0..b)
        .map(|i| {
            (0..classes)
                .map(|k| {
                    if !annotations[indices[i]].contains_class(k) {
                        return None;
                    }
                    let pool: Vec<usize> =
                        (0..b).filter(|&j| j != i && annotations[indices[j]].contains_class(k)).collect();
                    (!pool.is_empty()).then(|| pool[rng.gen_range(0..pool.len())])
                })
                .collect()
        })
        .collect();
    Ok(Batch { indices, plan: PairingPlan::new(partners) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub lr: f64,
    pub pce: f64,
    pub ms_data: f64,
    pub cv_contrastive: f64,
    pub tv: f64,
    pub total: f64,
}

pub const HISTORY_HEADER: &str = "iteration,lr,pce,ms_data,cv_contrastive,tv,total";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.iteration, r.lr, r.pce, r.ms_data, r.cv_contrastive, r.tv, r.total)
            .expect("writing to a String");
    }
    out
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::Io { path: path.into(), source: e })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
}

/// Model spec implied by the config and the (annotated) training samples.
pub fn model_spec_for(config: &TrainConfig, samples: &[Sample]) -> Result<ModelSpec> {
    let first = samples.first().ok_or_else(|| Error::invalid_input("training set is empty"))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut classes = 0;
    for s in samples {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::invalid_input(format!("sample {} is not {h}x{w}", s.id)));
        }
        let ann = s
            .annotation
            .as_ref()
            .ok_or_else(|| Error::invalid_input(format!("sample {} has no point annotation", s.id)))?;
        classes = classes.max(ann.classes());
    }
    let spec = match config.model {
        ModelKind::ConvEd => ModelSpec::conv_ed(classes, h, w),
        ModelKind::LogitField => ModelSpec::logit_field(classes, h, w, samples.iter().map(|s| s.id.clone()).collect()),
    };
    spec.validate()?;
    Ok(spec)
}

/// Trains from a fresh initialization. `on_checkpoint` receives the
/// iteration count and parameters at each checkpoint and after the last step.
pub fn train_loop(
    samples: &[Sample],
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(u64, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = model_spec_for(config, samples)?;
    let mut params = init_params(&spec, config.seed)?;
    let annotations: Vec<&PointAnnotation> = samples.iter().map(|s| s.annotation.as_ref().expect("checked")).collect();
    let weights = config.weights();
    let augmenting = config.augment && spec.kind == ModelKind::ConvEd;
    let lr0 = config.lr0();
    let mut history = Vec::with_capacity(config.iterations as usize);

    for it in 0..config.iterations {
        let lr = poly_lr(lr0, it, config.iterations, config.power);
        let batch = assemble_batch(&annotations, it, config.seed, config.batch_size)?;
        let items: Vec<Sample> = batch
            .indices
            .iter()
            .map(|&i| if augmenting { augment(&samples[i], config.seed, it) } else { Ok(samples[i].clone()) })
            .collect::<Result<_>>()?;

        let passes = items
            .par_iter()
            .map(|s| {
                let (logits, cache) = forward(&params, &spec, &s.image, &s.id)?;
                Ok((softmax(&logits)?, cache))
            })
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<&SoftPrediction> = passes.iter().map(|(p, _)| p).collect();
        let images: Vec<&Image> = items.iter().map(|s| &s.image).collect();
        let batch_items: Vec<BatchItem<'_>> = items
            .iter()
            .zip(&preds)
            .zip(&images)
            .map(|((s, &pred), &image)| BatchItem { image, pred, annotation: s.annotation.as_ref().expect("checked") })
            .collect();
        let loss = total_loss(config.mode, &batch_items, &batch.plan, &weights)?;
        if !loss.is_finite() {
            let ids: Vec<&str> = items.iter().map(|s| s.id.as_str()).collect();
            return Err(Error::Divergence(format!(
                "non-finite loss at iteration {it} (pce {}, ms {}, cv {}, tv {}) on batch {ids:?}",
                loss.pce, loss.ms_data, loss.cv_contrastive, loss.tv
            )));
        }

        let grads = passes
            .par_iter()
            .zip(loss.grad_wrt_logits.par_iter())
            .map(|((_, cache), g)| backward(&params, &spec, cache, g))
            .collect::<Result<Vec<_>>>()?;
        params.zero_grads();
        for g in &grads {
            params.accumulate(g)?;
        }
        sgd_step(&mut params, lr, config.momentum, config.weight_decay)?;

        history.push(HistoryRow {
            iteration: it,
            lr,
            pce: loss.pce,
            ms_data: loss.ms_data,
            cv_contrastive: loss.cv_contrastive,
            tv: loss.tv,
            total: loss.total,
        });
        if it % 50 == 0 {
            log::debug!("iter {it} lr {lr:.5} total {:.5} pce {:.5}", loss.total, loss.pce);
        }
        let done = it + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != config.iterations {
            on_checkpoint(done, &params)?;
        }
    }
    on_checkpoint(config.iterations, &params)?;
    Ok(TrainOutcome { spec, params, history })
}

/// Argmax segmentation of one image.
pub fn predict(
    params: &ModelParams,
    spec: &ModelSpec,
    image: &Image,
    image_id: &str,
) -> Result<crate::data::LabelMask> {
    let (logits, _) = forward(params, spec, image, image_id)?;
    Ok(crate::metrics::hard_mask(&softmax(&logits)?))
}
