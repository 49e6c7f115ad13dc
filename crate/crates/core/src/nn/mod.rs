//! Segmentation models that map an image to a `[K, H, W]` logit field.
//!
//! Two kinds are provided:
//!
//! * a transductive *logit field*, whose parameters are the logits of each
//!   training image, isolating loss behaviour from model capacity;
//! * a small two-level convolutional encoder-decoder with one skip
//!   connection:
//!
//! ```text
//! enc1: conv3x3(1 -> 16) + ReLU
//! enc2: conv3x3(16 -> 16) + ReLU   ----------------------------+
//! maxpool 2x2                                                  |
//! mid:  conv3x3(16 -> 32) + ReLU                               |
//! nearest upsample x2 -> concat [upsampled (32), skip (16)] <--+
//! dec:  conv3x3(48 -> 16) + ReLU
//! head: conv1x1(16 -> K)
//! ```

mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, LogitField};
use layers::{
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward_inplace, relu_inplace,
    upsample2_backward, upsample2_forward, Dims,
};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "logit-field")]
    LogitField,
    #[serde(rename = "conv-ed")]
    ConvEd,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::LogitField => "logit-field",
            ModelKind::ConvEd => "conv-ed",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit-field" => Ok(ModelKind::LogitField),
            "conv-ed" => Ok(ModelKind::ConvEd),
            other => Err(Error::invalid_config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture description. Logit-field models also list the image ids
/// they own logits for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_ids: Vec<String>,
}

/// Channel widths of the encoder-decoder.
pub const ENC_CHANNELS: usize = 16;
pub const MID_CHANNELS: usize = 32;
pub const DEC_CHANNELS: usize = 16;

struct ConvLayer {
    name: &'static str,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
}

fn conv_layers(classes: usize) -> [ConvLayer; 5] {
    [
        ConvLayer { name: "enc1", in_ch: 1, out_ch: ENC_CHANNELS, ksize: 3 },
        ConvLayer { name: "enc2", in_ch: ENC_CHANNELS, out_ch: ENC_CHANNELS, ksize: 3 },
        ConvLayer { name: "mid", in_ch: ENC_CHANNELS, out_ch: MID_CHANNELS, ksize: 3 },
        ConvLayer { name: "dec", in_ch: MID_CHANNELS + ENC_CHANNELS, out_ch: DEC_CHANNELS, ksize: 3 },
        ConvLayer { name: "head", in_ch: DEC_CHANNELS, out_ch: classes, ksize: 1 },
    ]
}

impl ModelSpec {
    pub fn conv_ed(classes: usize, height: usize, width: usize) -> Self {
        Self { kind: ModelKind::ConvEd, classes, height, width, image_ids: Vec::new() }
    }

    pub fn logit_field(classes: usize, height: usize, width: usize, image_ids: Vec<String>) -> Self {
        Self { kind: ModelKind::LogitField, classes, height, width, image_ids }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid_config("models need at least 2 classes"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid_config("model grid must be non-empty"));
        }
        if self.kind == ModelKind::ConvEd && (!self.height.is_multiple_of(2) || !self.width.is_multiple_of(2)) {
            return Err(Error::invalid_config(format!(
                "conv-ed needs even H and W, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `b = sqrt(6 / fan_in)`, the init bound for a layer with the given fan-in.
    pub fn init_bound(fan_in: usize) -> f64 {
        (6.0 / fan_in as f64).sqrt()
    }
}

/// A named parameter with its gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Grid,
    pub grad: Grid,
    pub momentum: Grid,
    /// Whether weight decay applies (conv kernels only).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Grid, decay: bool) -> Self {
        let shape = value.shape().to_vec();
        Self { name: name.into(), value, grad: Grid::zeros(&shape), momentum: Grid::zeros(&shape), decay }
    }
}

/// Ordered parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if p.value.shape() != p.grad.shape() || p.value.shape() != p.momentum.shape() {
                return Err(Error::invalid_input(format!("buffer shapes disagree for {}", p.name)));
            }
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::invalid_input(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self { params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    fn value(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(|p| p.value.values())
            .ok_or_else(|| Error::invalid_input(format!("missing parameter {name}")))
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(0.0));
    }

    /// Adds sparse gradients (as returned by [`backward`]) into the grad buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (idx, g) in grads {
            let p = self
                .params
                .get_mut(*idx)
                .ok_or_else(|| Error::invalid_input(format!("gradient for unknown parameter #{idx}")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::invalid_input(format!("gradient shape mismatch for {}", p.name)));
            }
            p.grad.add_scaled(g, 1.0);
        }
        Ok(())
    }

    /// Recovers the architecture from parameter names and shapes.
    pub fn infer_spec(&self, height: usize, width: usize) -> Result<ModelSpec> {
        if let Some(head) = self.get("head.weight") {
            let classes = head.value.shape()[0];
            let spec = ModelSpec::conv_ed(classes, height, width);
            let expected = init_params(&spec, 0)?;
            for p in expected.iter() {
                match self.get(&p.name) {
                    Some(q) if q.value.shape() == p.value.shape() => {}
                    _ => return Err(Error::invalid_input(format!("checkpoint lacks a compatible {}", p.name))),
                }
            }
            return Ok(spec);
        }
        let mut ids = Vec::new();
        let mut dims = None;
        for p in &self.params {
            let Some(id) = p.name.strip_prefix(LOGIT_PREFIX) else {
                return Err(Error::invalid_input(format!("unexpected parameter {}", p.name)));
            };
            let shape = p.value.shape().to_vec();
            if dims.get_or_insert(shape.clone()) != &shape || shape.len() != 3 {
                return Err(Error::invalid_input("logit fields disagree in shape"));
            }
            ids.push(id.to_string());
        }
        let shape = dims.ok_or_else(|| Error::invalid_input("empty parameter set"))?;
        if (shape[1], shape[2]) != (height, width) {
            return Err(Error::invalid_input(format!(
                "logit fields are {}x{}, dataset is {height}x{width}",
                shape[1], shape[2]
            )));
        }
        Ok(ModelSpec::logit_field(shape[0], height, width, ids))
    }
}

pub const LOGIT_PREFIX: &str = "logits/";

pub fn logit_param_name(image_id: &str) -> String {
    format!("{LOGIT_PREFIX}{image_id}")
}

/// Kaiming-uniform conv kernels, zero biases, zero logit fields.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut params = Vec::new();
    match spec.kind {
        ModelKind::LogitField => {
            for id in &spec.image_ids {
                params.push(Param::new(
                    logit_param_name(id),
                    Grid::zeros(&[spec.classes, spec.height, spec.width]),
                    false,
                ));
            }
        }
        ModelKind::ConvEd => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for layer in conv_layers(spec.classes) {
                let fan_in = layer.in_ch * layer.ksize * layer.ksize;
                let bound = ModelSpec::init_bound(fan_in);
                let shape = [layer.out_ch, layer.in_ch, layer.ksize, layer.ksize];
                let n: usize = shape.iter().product();
                let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                params.push(Param::new(format!("{}.weight", layer.name), Grid::from_vec(&shape, values)?, true));
                params.push(Param::new(format!("{}.bias", layer.name), Grid::zeros(&[layer.out_ch]), false));
            }
        }
    }
    ModelParams::new(params)
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum ForwardCache {
    LogitField { param: usize, shape: Vec<usize> },
    ConvEd(Box<ConvCache>),
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    classes: usize,
    height: usize,
    width: usize,
    input: Vec<f64>,
    enc1: Vec<f64>,
    enc2: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    mid: Vec<f64>,
    concat: Vec<f64>,
    dec: Vec<f64>,
}

impl ForwardCache {
    /// ReLU on/off pattern and pooling choices. Two inputs with equal
    /// patterns lie in the same linear region of the network.
    pub fn activation_pattern(&self) -> Vec<u64> {
        match self {
            ForwardCache::LogitField { .. } => Vec::new(),
            ForwardCache::ConvEd(c) => {
                let mut bits = Vec::new();
                for layer in [&c.enc1, &c.enc2, &c.mid, &c.dec] {
                    bits.extend(layer.iter().map(|v| u64::from(*v > 0.0)));
                }
                bits.extend(c.argmax.iter().map(|&i| i as u64));
                bits
            }
        }
    }
}

/// Sparse parameter gradients: `(parameter index, gradient)`.
pub type ParamGrads = Vec<(usize, Grid)>;

fn check_image(spec: &ModelSpec, image: &Image) -> Result<()> {
    if (image.height(), image.width()) != (spec.height, spec.width) {
        return Err(Error::invalid_input(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            spec.height,
            spec.width
        )));
    }
    Ok(())
}

/// Runs the model on one image. `image_id` selects the logits of a
/// logit-field model and is ignored by the encoder-decoder.
pub fn forward(
    params: &ModelParams,
    spec: &ModelSpec,
    image: &Image,
    image_id: &str,
) -> Result<(LogitField, ForwardCache)> {
    check_image(spec, image)?;
    match spec.kind {
        ModelKind::LogitField => {
            let idx = params
                .index_of(&logit_param_name(image_id))
                .ok_or_else(|| Error::invalid_input(format!("no logit field for image {image_id:?}")))?;
            let grid = params.at(idx).value.clone();
            let shape = grid.shape().to_vec();
            Ok((LogitField::new(grid)?, ForwardCache::LogitField { param: idx, shape }))
        }
        ModelKind::ConvEd => conv_forward(params, spec, image),
    }
}

fn conv_forward(params: &ModelParams, spec: &ModelSpec, image: &Image) -> Result<(LogitField, ForwardCache)> {
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let (hh, hw) = (h / 2, w / 2);
    let input = image.pixels().to_vec();

    let mut enc1 = conv2d_forward(
        &input,
        Dims::new(1, h, w),
        params.value("enc1.weight")?,
        params.value("enc1.bias")?,
        ENC_CHANNELS,
        3,
    );
    relu_inplace(&mut enc1);
    let mut enc2 = conv2d_forward(
        &enc1,
        Dims::new(ENC_CHANNELS, h, w),
        params.value("enc2.weight")?,
        params.value("enc2.bias")?,
        ENC_CHANNELS,
        3,
    );
    relu_inplace(&mut enc2);
    let (pooled, argmax) = maxpool2_forward(&enc2, Dims::new(ENC_CHANNELS, h, w));
    let mut mid = conv2d_forward(
        &pooled,
        Dims::new(ENC_CHANNELS, hh, hw),
        params.value("mid.weight")?,
        params.value("mid.bias")?,
        MID_CHANNELS,
        3,
    );
    relu_inplace(&mut mid);
    let mut concat = upsample2_forward(&mid, Dims::new(MID_CHANNELS, hh, hw));
    concat.extend_from_slice(&enc2);
    let mut dec = conv2d_forward(
        &concat,
        Dims::new(MID_CHANNELS + ENC_CHANNELS, h, w),
        params.value("dec.weight")?,
        params.value("dec.bias")?,
        DEC_CHANNELS,
        3,
    );
    relu_inplace(&mut dec);
    let logits = conv2d_forward(
        &dec,
        Dims::new(DEC_CHANNELS, h, w),
        params.value("head.weight")?,
        params.value("head.bias")?,
        k,
        1,
    );
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("encoder-decoder produced non-finite logits".into()));
    }

    let field = LogitField::new(Grid::from_vec(&[k, h, w], logits)?)?;
    let cache = ConvCache { classes: k, height: h, width: w, input, enc1, enc2, pooled, argmax, mid, concat, dec };
    Ok((field, ForwardCache::ConvEd(Box::new(cache))))
}

/// Exact parameter gradients given `dL/dlogits` and the cache of the
/// matching forward pass.
pub fn backward(
    params: &ModelParams,
    spec: &ModelSpec,
    cache: &ForwardCache,
    grad_wrt_logits: &Grid,
) -> Result<ParamGrads> {
    match (spec.kind, cache) {
        (ModelKind::LogitField, ForwardCache::LogitField { param, shape }) => {
            if grad_wrt_logits.shape() != shape.as_slice() || *param >= params.len() {
                return Err(Error::invalid_input("logit gradient does not match the cached forward pass"));
            }
            Ok(vec![(*param, grad_wrt_logits.clone())])
        }
        (ModelKind::ConvEd, ForwardCache::ConvEd(c)) => conv_backward(params, c, grad_wrt_logits),
        _ => Err(Error::invalid_input("cache does not belong to this model kind")),
    }
}

fn conv_backward(params: &ModelParams, c: &ConvCache, grad_wrt_logits: &Grid) -> Result<ParamGrads> {
    let (h, w, k) = (c.height, c.width, c.classes);
    let (hh, hw) = (h / 2, w / 2);
    if grad_wrt_logits.shape() != [k, h, w] {
        return Err(Error::invalid_input(format!(
            "logit gradient shape {:?} does not match cached [{k}, {h}, {w}]",
            grad_wrt_logits.shape()
        )));
    }
    let mut out: ParamGrads = Vec::with_capacity(10);
    let mut push = |name: &str, shape: &[usize], values: Vec<f64>| -> Result<()> {
        let idx = params.index_of(name).ok_or_else(|| Error::invalid_input(format!("missing parameter {name}")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient for parameter {name}")));
        }
        out.push((idx, Grid::from_vec(shape, values)?));
        Ok(())
    };

    let head = conv2d_backward(
        &c.dec,
        Dims::new(DEC_CHANNELS, h, w),
        params.value("head.weight")?,
        k,
        1,
        grad_wrt_logits.values(),
        true,
    );
    let mut g_dec = head.input.unwrap();
    relu_backward_inplace(&c.dec, &mut g_dec);

    let cat_ch = MID_CHANNELS + ENC_CHANNELS;
    let dec =
        conv2d_backward(&c.concat, Dims::new(cat_ch, h, w), params.value("dec.weight")?, DEC_CHANNELS, 3, &g_dec, true);
    let g_concat = dec.input.unwrap();
    let (g_up, g_skip) = g_concat.split_at(MID_CHANNELS * h * w);

    let mut g_mid = upsample2_backward(g_up, Dims::new(MID_CHANNELS, hh, hw));
    relu_backward_inplace(&c.mid, &mut g_mid);
    let mid = conv2d_backward(
        &c.pooled,
        Dims::new(ENC_CHANNELS, hh, hw),
        params.value("mid.weight")?,
        MID_CHANNELS,
        3,
        &g_mid,
        true,
    );

    let mut g_enc2 = maxpool2_backward(&c.argmax, &mid.input.unwrap(), c.enc2.len());
    for (g, s) in g_enc2.iter_mut().zip(g_skip) {
        *g += s;
    }
    relu_backward_inplace(&c.enc2, &mut g_enc2);
    let enc2 = conv2d_backward(
        &c.enc1,
        Dims::new(ENC_CHANNELS, h, w),
        params.value("enc2.weight")?,
        ENC_CHANNELS,
        3,
        &g_enc2,
        true,
    );
    let mut g_enc1 = enc2.input.unwrap();
    relu_backward_inplace(&c.enc1, &mut g_enc1);
    let enc1 =
        conv2d_backward(&c.input, Dims::new(1, h, w), params.value("enc1.weight")?, ENC_CHANNELS, 3, &g_enc1, false);

    push("enc1.weight", &[ENC_CHANNELS, 1, 3, 3], enc1.weight)?;
    push("enc1.bias", &[ENC_CHANNELS], enc1.bias)?;
    push("enc2.weight", &[ENC_CHANNELS, ENC_CHANNELS, 3, 3], enc2.weight)?;
    push("enc2.bias", &[ENC_CHANNELS], enc2.bias)?;
    push("mid.weight", &[MID_CHANNELS, ENC_CHANNELS, 3, 3], mid.weight)?;
    push("mid.bias", &[MID_CHANNELS], mid.bias)?;
    push("dec.weight", &[DEC_CHANNELS, cat_ch, 3, 3], dec.weight)?;
    push("dec.bias", &[DEC_CHANNELS], dec.bias)?;
    push("head.weight", &[k, DEC_CHANNELS, 1, 1], head.weight)?;
    push("head.bias", &[k], head.bias)?;
    out.sort_by_key(|(idx, _)| *idx);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{relative_error, softmax};

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::conv_ed(3, 8, 8);
        let a = init_params(&spec, 11).unwrap();
        assert_eq!(a, init_params(&spec, 11).unwrap());
        assert_ne!(a, init_params(&spec, 12).unwrap());
        let mid = a.get("mid.weight").unwrap();
        assert_eq!(mid.value.shape(), &[32, 16, 3, 3]);
        let b = ModelSpec::init_bound(16 * 9);
        assert!((b - 0.2041).abs() < 1e-4);
        assert!(mid.value.values().iter().all(|v| v.abs() < b));
        assert!(a.get("mid.bias").unwrap().value.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logit_field_init_is_uniform() {
        let spec = ModelSpec::logit_field(3, 2, 2, vec!["a".into(), "b".into()]);
        let params = init_params(&spec, 0).unwrap();
        let (logits, _) = forward(&params, &spec, &random_image(0, 2, 2), "b").unwrap();
        let p = softmax(&logits).unwrap();
        assert!(p.grid().values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(forward(&params, &spec, &random_image(0, 2, 2), "zzz").is_err());
    }

    #[test]
    fn odd_dimensions_rejected_for_conv() {
        assert!(init_params(&ModelSpec::conv_ed(2, 7, 8), 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = ModelSpec::conv_ed(2, 6, 4);
        let mut params = init_params(&spec, 3).unwrap();
        params.iter_mut().for_each(|p| p.value.fill(0.0));
        let (logits, cache) = forward(&params, &spec, &random_image(1, 6, 4), "").unwrap();
        assert_eq!(logits.grid().shape(), &[2, 6, 4]);
        assert!(logits.grid().values().iter().all(|v| *v == 0.0));
        let grads = backward(&params, &spec, &cache, &Grid::zeros(&[2, 6, 4])).unwrap();
        assert_eq!(grads.len(), 10);
        assert!(grads.iter().all(|(_, g)| g.values().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn logit_field_backward_passes_gradient_through() {
        let spec = ModelSpec::logit_field(2, 1, 2, vec!["x".into()]);
        let params = init_params(&spec, 0).unwrap();
        let (_, cache) = forward(&params, &spec, &random_image(0, 1, 2), "x").unwrap();
        let g = Grid::from_vec(&[2, 1, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        assert_eq!(backward(&params, &spec, &cache, &g).unwrap(), vec![(0, g)]);
    }

    #[test]
    fn output_shape_is_k_h_w() {
        for (h, w) in [(2, 2), (4, 6), (8, 2)] {
            let spec = ModelSpec::conv_ed(3, h, w);
            let params = init_params(&spec, 5).unwrap();
            let (logits, _) = forward(&params, &spec, &random_image(2, h, w), "").unwrap();
            assert_eq!(logits.grid().shape(), &[3, h, w]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ModelSpec::conv_ed(2, 8, 8);
        let mut params = init_params(&spec, 9).unwrap();
        // non-zero biases so every bias gradient path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for p in params.iter_mut().filter(|p| !p.decay) {
            p.value.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let image = random_image(4, 8, 8);
        let upstream = Grid::from_vec(&[2, 8, 8], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, cache) = forward(&params, &spec, &image, "").unwrap();
        let pattern = cache.activation_pattern();
        let grads = backward(&params, &spec, &cache, &upstream).unwrap();

        let mut checked = 0;
        for (idx, analytic) in &grads {
            let name = params.at(*idx).name.clone();
            let loss = |x: &Grid| {
                let mut probe = params.clone();
                probe.get_mut(&name).unwrap().value = x.clone();
                let (l, c) = forward(&probe, &spec, &image, "").unwrap();
                if c.activation_pattern() != pattern {
                    return f64::NAN;
                }
                l.grid().values().iter().zip(upstream.values()).map(|(a, b)| a * b).sum()
            };
            let x = params.at(*idx).value.clone();
            let step = 1e-6;
            for i in (0..x.len()).step_by(7) {
                let mut plus = x.clone();
                plus.values_mut()[i] += step;
                let mut minus = x.clone();
                minus.values_mut()[i] -= step;
                let (fp, fm) = (loss(&plus), loss(&minus));
                if !fp.is_finite() || !fm.is_finite() {
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic.values()[i];
                if a.abs() > 1e-7 {
                    assert!(relative_error(a, numeric) < 1e-4, "{name}[{i}]: {a} vs {numeric}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }
}
