//! Backbone contract (conv features → global average pool → linear head)
//! and Class Activation Maps computed from the same forward pass.
//!
//! All parameters of a [`Classifier`] live in one flat `f64` buffer described
//! by a list of [`ParamSpec`]s; gradients use the same layout. That keeps the
//! optimizer, finite-difference checks and checkpoints oblivious to the
//! layer structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tensor::Tensor3;

/// A named slice of the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Feature extractor producing the last convolutional layer's maps.
pub trait Backbone: Send + Sync {
    /// Per-sample intermediate activations retained for the backward pass.
    type Cache: Send + Sync;

    /// `[channels, height, width]` of the accepted input.
    fn input_shape(&self) -> [usize; 3];

    /// `[N, h, w]` of the produced feature maps.
    fn feature_shape(&self) -> [usize; 3];

    /// Parameter names and shapes, offsets relative to the backbone's own
    /// block of the flat buffer.
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut [f64]);

    fn features(&self, params: &[f64], input: &Tensor3) -> (Tensor3, Self::Cache);

    /// Accumulate `∂L/∂params` into `grads` given `∂L/∂features`.
    fn backward(
        &self,
        params: &[f64],
        input: &Tensor3,
        cache: &Self::Cache,
        d_features: &Tensor3,
        grads: &mut [f64],
    );
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    /// Odd square kernel size; padding keeps the spatial size.
    pub kernel: usize,
    /// Follow the ReLU with a 2×2 average pool (stride 2).
    pub pool: bool,
}

/// Plain conv → ReLU → (avg-pool) stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBackboneConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub num_classes: usize,
    /// Subtracted from every input value before the first conv, so pixels
    /// in `[0, 1]` arrive centred.
    #[serde(default = "default_input_shift")]
    pub input_shift: f64,
}

fn default_input_shift() -> f64 {
    0.5
}

impl Default for ReferenceBackboneConfig {
    /// 224×224×3 input, four pooled blocks, 64 maps of 14×14.
    fn default() -> Self {
        ReferenceBackboneConfig {
            input_channels: 3,
            input_height: 224,
            input_width: 224,
            blocks: [16, 32, 48, 64]
                .into_iter()
                .map(|c| ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    pool: true,
                })
                .collect(),
            num_classes: 2,
            input_shift: default_input_shift(),
        }
    }
}

impl ReferenceBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::validation("backbone needs at least one conv block"));
        }
        if self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::validation("need >= 1 input channel and >= 2 classes"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel % 2 == 0 || b.out_channels == 0 {
                return Err(Error::validation(format!(
                    "block {i}: kernel must be odd and channels nonzero"
                )));
            }
            if b.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::validation(format!(
                        "block {i}: cannot 2x2-pool an odd {h}x{w} map"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        if h < 2 || w < 2 {
            return Err(Error::validation(format!("final feature map {h}x{w} is below 2x2")));
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in self.blocks.iter().filter(|b| b.pool) {
            h /= 2;
            w /= 2;
        }
        [self.blocks.last().map_or(0, |b| b.out_channels), h, w]
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    in_c: usize,
    out_c: usize,
    k: usize,
    pool: bool,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug)]
pub struct ConvBackbone {
    config: ReferenceBackboneConfig,
    layers: Vec<ConvLayer>,
}

/// Activations of one conv block: the conv input and the post-ReLU output.
#[derive(Clone, Debug)]
pub struct BlockCache {
    input: Tensor3,
    relu_out: Tensor3,
}

impl ConvBackbone {
    pub fn new(config: ReferenceBackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.blocks.len());
        let mut in_c = config.input_channels;
        let mut off = 0;
        for b in &config.blocks {
            let w_len = b.out_channels * in_c * b.kernel * b.kernel;
            layers.push(ConvLayer {
                in_c,
                out_c: b.out_channels,
                k: b.kernel,
                pool: b.pool,
                w_off: off,
                b_off: off + w_len,
            });
            off += w_len + b.out_channels;
            in_c = b.out_channels;
        }
        Ok(ConvBackbone { config, layers })
    }

    pub fn config(&self) -> &ReferenceBackboneConfig {
        &self.config
    }
}

/// Same-padded 2-D convolution, accumulated into `out` (which holds biases).
fn conv_forward(input: &Tensor3, weights: &[f64], layer: &ConvLayer, out: &mut Tensor3) {
    let (h, w, k) = (input.height, input.width, layer.k);
    let pad = (k / 2) as isize;
    for oc in 0..layer.out_c {
        let out_plane = out.plane_mut(oc);
        for ic in 0..layer.in_c {
            let in_plane = input.plane(ic);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = valid_range(dx, w);
                    let wv = weights[((oc * layer.in_c + ic) * k + ky) * k + kx];
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_plane[sy * w..(sy + 1) * w];
                        let dst = &mut out_plane[y * w..(y + 1) * w];
                        let sx0 = (x_lo as isize + dx) as usize;
                        for (o, i) in dst[x_lo..x_hi].iter_mut().zip(&src[sx0..]) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    input: &Tensor3,
    weights: &[f64],
    layer: &ConvLayer,
    d_out: &Tensor3,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut Tensor3>,
) {
    let (h, w, k) = (input.height, input.width, layer.k);
    let pad = (k / 2) as isize;
    for oc in 0..layer.out_c {
        let g_plane = d_out.plane(oc);
        d_bias[oc] += g_plane.iter().sum::<f64>();
        for ic in 0..layer.in_c {
            let in_plane = input.plane(ic);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = valid_range(dx, w);
                    let widx = ((oc * layer.in_c + ic) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let sx0 = (x_lo as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let g = &g_plane[y * w + x_lo..y * w + x_hi];
                        let src = &in_plane[sy * w + sx0..];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(d_in) = d_input.as_deref_mut() {
                            let dst = &mut d_in.plane_mut(ic)[sy * w + sx0..];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    d_weights[widx] += acc;
                }
            }
        }
    }
}

/// Output rows `y` for which `y + offset` is inside `0..len`.
#[inline]
fn valid_range(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

fn avg_pool2(src: &Tensor3) -> Tensor3 {
    let (oh, ow) = (src.height / 2, src.width / 2);
    let mut out = Tensor3::zeros(src.channels, oh, ow);
    for c in 0..src.channels {
        let s = src.plane(c);
        let o = out.plane_mut(c);
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * src.width + 2 * x;
                o[y * ow + x] = 0.25 * (s[i] + s[i + 1] + s[i + src.width] + s[i + src.width + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward(d_out: &Tensor3, h: usize, w: usize) -> Tensor3 {
    let mut d_in = Tensor3::zeros(d_out.channels, h, w);
    for c in 0..d_out.channels {
        let g = d_out.plane(c);
        let d = d_in.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = 0.25 * g[(y / 2) * d_out.width + x / 2];
            }
        }
    }
    d_in
}

impl Backbone for ConvBackbone {
    type Cache = Vec<BlockCache>;

    fn input_shape(&self) -> [usize; 3] {
        [
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ]
    }

    fn feature_shape(&self) -> [usize; 3] {
        self.config.feature_shape()
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    ParamSpec {
                        name: format!("conv{i}.weight"),
                        shape: vec![l.out_c, l.in_c, l.k, l.k],
                        offset: l.w_off,
                        len: l.out_c * l.in_c * l.k * l.k,
                    },
                    ParamSpec {
                        name: format!("conv{i}.bias"),
                        shape: vec![l.out_c],
                        offset: l.b_off,
                        len: l.out_c,
                    },
                ]
            })
            .collect()
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut [f64]) {
        for l in &self.layers {
            let fan_in = (l.in_c * l.k * l.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let n = l.out_c * l.in_c * l.k * l.k;
            for p in &mut params[l.w_off..l.w_off + n] {
                *p = normal.sample(rng);
            }
            params[l.b_off..l.b_off + l.out_c].fill(0.0);
        }
    }

    fn features(&self, params: &[f64], input: &Tensor3) -> (Tensor3, Self::Cache) {
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let shift = self.config.input_shift;
        if shift != 0.0 {
            x.data.iter_mut().for_each(|v| *v -= shift);
        }
        for l in &self.layers {
            let mut y = Tensor3::zeros(l.out_c, x.height, x.width);
            for oc in 0..l.out_c {
                y.plane_mut(oc).fill(params[l.b_off + oc]);
            }
            conv_forward(&x, &params[l.w_off..l.b_off], l, &mut y);
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let next = if l.pool { avg_pool2(&y) } else { y.clone() };
            cache.push(BlockCache {
                input: x,
                relu_out: y,
            });
            x = next;
        }
        (x, cache)
    }

    fn backward(
        &self,
        params: &[f64],
        _input: &Tensor3,
        cache: &Self::Cache,
        d_features: &Tensor3,
        grads: &mut [f64],
    ) {
        let mut grad = d_features.clone();
        for (i, (l, c)) in self.layers.iter().zip(cache).enumerate().rev() {
            let mut d_relu = if l.pool {
                avg_pool2_backward(&grad, c.relu_out.height, c.relu_out.width)
            } else {
                grad
            };
            for (d, &a) in d_relu.data.iter_mut().zip(&c.relu_out.data) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut d_in = (i > 0).then(|| Tensor3::zeros(l.in_c, c.input.height, c.input.width));
            let (gw, gb) = grads[l.w_off..l.b_off + l.out_c].split_at_mut(l.b_off - l.w_off);
            conv_backward(
                &c.input,
                &params[l.w_off..l.b_off],
                l,
                &d_relu,
                gw,
                gb,
                d_in.as_mut(),
            );
            match d_in {
                Some(d) => grad = d,
                None => break,
            }
        }
    }
}

/// Final linear layer: `logits = W · pooled + b`, `W` is `C × N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub classes: usize,
    pub width: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(classes: usize, width: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != classes * width || bias.len() != classes {
            return Err(Error::shape(
                format!("W {classes}x{width}, b {classes}"),
                format!("W {} values, b {} values", weight.len(), bias.len()),
            ));
        }
        Ok(ClassifierHead {
            classes,
            width,
            weight,
            bias,
        })
    }

    /// Row `c` of `W`, used both for logit `c` and for the CAM of class `c`.
    pub fn row(&self, c: usize) -> &[f64] {
        &self.weight[c * self.width..(c + 1) * self.width]
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self
                        .row(c)
                        .iter()
                        .zip(pooled)
                        .map(|(w, p)| w * p)
                        .sum::<f64>()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub features: Tensor3,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl BackboneOutput {
    /// Check that `pooled` is the mean of each map and `logits = W·pooled + b`.
    pub fn check_consistency(&self, head: &ClassifierHead, rel_tol: f64) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(1.0);
        for (n, &p) in self.pooled.iter().enumerate() {
            let plane = self.features.plane(n);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            if !close(mean, p) {
                return Err(Error::Numerical(format!("pooled[{n}] = {p} but map mean is {mean}")));
            }
        }
        for (a, b) in head.logits(&self.pooled).iter().zip(&self.logits) {
            if !close(*a, *b) {
                return Err(Error::Numerical(format!("logit {b} != W·pooled + b = {a}")));
            }
        }
        Ok(())
    }
}

/// Which class row of the head drives the CAM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamClass {
    #[default]
    TrueLabel,
    ArgmaxPrediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamOutput {
    /// Min–max normalized map in `[0, 1]`.
    pub grid: Grid<f64>,
    pub class_used: usize,
    pub raw_min: f64,
    pub raw_max: f64,
    pub(crate) argmin: usize,
    pub(crate) argmax: usize,
}

impl CamOutput {
    pub fn is_degenerate(&self) -> bool {
        !(self.raw_max > self.raw_min)
    }
}

/// Un-normalized class activation: `Σ_n W[c][n] · f_n`.
pub fn cam_raw(features: &Tensor3, head: &ClassifierHead, class: usize) -> Result<Grid<f64>> {
    if class >= head.classes {
        return Err(Error::validation(format!(
            "class {class} outside 0..{}",
            head.classes
        )));
    }
    if features.channels != head.width {
        return Err(Error::shape(
            format!("{} feature maps", head.width),
            format!("{} feature maps", features.channels),
        ));
    }
    let mut raw = vec![0.0; features.plane_len()];
    for (n, &wn) in head.row(class).iter().enumerate() {
        for (r, f) in raw.iter_mut().zip(features.plane(n)) {
            *r += wn * f;
        }
    }
    Grid::from_vec(features.height, features.width, raw)
}

pub fn cam(features: &Tensor3, head: &ClassifierHead, class: usize) -> Result<CamOutput> {
    let raw = cam_raw(features, head, class)?;
    let data = raw.as_slice();
    let (mut argmin, mut argmax) = (0, 0);
    for (i, &v) in data.iter().enumerate() {
        if v < data[argmin] {
            argmin = i;
        }
        if v > data[argmax] {
            argmax = i;
        }
    }
    let (lo, hi) = (data[argmin], data[argmax]);
    let grid = if hi > lo {
        let range = hi - lo;
        raw.map(|v| (v - lo) / range)
    } else {
        Grid::zeros(raw.height(), raw.width())
    };
    Ok(CamOutput {
        grid,
        class_used: class,
        raw_min: lo,
        raw_max: hi,
        argmin,
        argmax,
    })
}

/// Back-propagate `∂L/∂grid` through the normalization and the weighted sum.
/// Returns `(∂L/∂features, ∂L/∂W[c])`. A degenerate CAM passes no gradient.
pub fn cam_backward(
    features: &Tensor3,
    head: &ClassifierHead,
    out: &CamOutput,
    d_grid: &Grid<f64>,
) -> (Tensor3, Vec<f64>) {
    let mut d_features = Tensor3::zeros(features.channels, features.height, features.width);
    let mut d_row = vec![0.0; head.width];
    if out.is_degenerate() {
        return (d_features, d_row);
    }
    let range = out.raw_max - out.raw_min;
    let dg = d_grid.as_slice();
    let g = out.grid.as_slice();
    let s: f64 = dg.iter().sum();
    let t: f64 = dg.iter().zip(g).map(|(a, b)| a * b).sum();
    let mut d_raw: Vec<f64> = dg.iter().map(|v| v / range).collect();
    d_raw[out.argmin] += (t - s) / range;
    d_raw[out.argmax] -= t / range;

    let row = head.row(out.class_used);
    for n in 0..features.channels {
        let f = features.plane(n);
        d_row[n] = f.iter().zip(&d_raw).map(|(a, b)| a * b).sum();
        for (d, r) in d_features.plane_mut(n).iter_mut().zip(&d_raw) {
            *d = row[n] * r;
        }
    }
    (d_features, d_row)
}

/// Backbone plus linear head over one flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Classifier<B: Backbone = ConvBackbone> {
    backbone: B,
    specs: Vec<ParamSpec>,
    head_w_off: usize,
    head_b_off: usize,
    classes: usize,
    params: Vec<f64>,
}

impl<B: Backbone> Classifier<B> {
    /// Build with seeded initialization (He-normal convs, uniform head).
    pub fn new(backbone: B, classes: usize, seed: u64) -> Self {
        let mut specs = backbone.param_specs();
        let backbone_len: usize = specs.iter().map(|s| s.offset + s.len).max().unwrap_or(0);
        let n = backbone.feature_shape()[0];
        let head_w_off = backbone_len;
        let head_b_off = head_w_off + classes * n;
        specs.push(ParamSpec {
            name: "head.weight".into(),
            shape: vec![classes, n],
            offset: head_w_off,
            len: classes * n,
        });
        specs.push(ParamSpec {
            name: "head.bias".into(),
            shape: vec![classes],
            offset: head_b_off,
            len: classes,
        });
        let mut params = vec![0.0; head_b_off + classes];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        backbone.init_params(&mut rng, &mut params[..backbone_len]);
        let bound = 1.0 / (n as f64).sqrt();
        for p in &mut params[head_w_off..head_b_off] {
            *p = rng.random_range(-bound..bound);
        }
        Classifier {
            backbone,
            specs,
            head_w_off,
            head_b_off,
            classes,
            params,
        }
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                format!("{} parameters", self.params.len()),
                format!("{} parameters", params.len()),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_name(&self, index: usize) -> String {
        self.specs
            .iter()
            .find(|s| (s.offset..s.offset + s.len).contains(&index))
            .map(|s| format!("{}[{}]", s.name, index - s.offset))
            .unwrap_or_else(|| format!("param[{index}]"))
    }

    pub fn head(&self) -> ClassifierHead {
        let n = self.backbone.feature_shape()[0];
        ClassifierHead {
            classes: self.classes,
            width: n,
            weight: self.params[self.head_w_off..self.head_b_off].to_vec(),
            bias: self.params[self.head_b_off..self.head_b_off + self.classes].to_vec(),
        }
    }

    pub fn forward_sample(&self, input: &Tensor3) -> Result<(BackboneOutput, B::Cache)> {
        let expected = self.backbone.input_shape();
        if input.shape() != expected {
            return Err(Error::shape(format!("{expected:?}"), format!("{:?}", input.shape())));
        }
        let (features, cache) = self.backbone.features(&self.params, input);
        let pooled: Vec<f64> = (0..features.channels)
            .map(|n| {
                let p = features.plane(n);
                p.iter().sum::<f64>() / p.len() as f64
            })
            .collect();
        let logits = self.head().logits(&pooled);
        Ok((
            BackboneOutput {
                features,
                pooled,
                logits,
            },
            cache,
        ))
    }

    /// Forward a batch (parallel over samples, order preserved).
    pub fn forward(&self, batch: &[Tensor3]) -> Result<Vec<BackboneOutput>> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        batch
            .par_iter()
            .map(|x| self.forward_sample(x).map(|(o, _)| o))
            .collect()
    }

    /// Accumulate parameter gradients for one sample given `∂L/∂logits` and
    /// optionally `∂L/∂(CAM grid)`.
    pub fn backward_sample(
        &self,
        input: &Tensor3,
        cache: &B::Cache,
        out: &BackboneOutput,
        d_logits: &[f64],
        cam_grad: Option<(&CamOutput, &Grid<f64>)>,
        grads: &mut [f64],
    ) {
        let head = self.head();
        let n = head.width;
        let hw = out.features.plane_len() as f64;
        let mut d_pooled = vec![0.0; n];
        for (c, &dl) in d_logits.iter().enumerate() {
            grads[self.head_b_off + c] += dl;
            for j in 0..n {
                grads[self.head_w_off + c * n + j] += dl * out.pooled[j];
                d_pooled[j] += dl * head.weight[c * n + j];
            }
        }
        let mut d_features = match cam_grad {
            Some((cam_out, d_grid)) => {
                let (d_f, d_row) = cam_backward(&out.features, &head, cam_out, d_grid);
                let row_off = self.head_w_off + cam_out.class_used * n;
                for (g, d) in grads[row_off..row_off + n].iter_mut().zip(&d_row) {
                    *g += d;
                }
                d_f
            }
            None => Tensor3::zeros(out.features.channels, out.features.height, out.features.width),
        };
        for (j, dp) in d_pooled.iter().enumerate() {
            let share = dp / hw;
            d_features.plane_mut(j).iter_mut().for_each(|d| *d += share);
        }
        self.backbone
            .backward(&self.params, input, cache, &d_features, &mut grads[..self.head_w_off]);
    }
}

impl Classifier<ConvBackbone> {
    pub fn from_config(config: ReferenceBackboneConfig, seed: u64) -> Result<Self> {
        let classes = config.num_classes;
        Ok(Classifier::new(ConvBackbone::new(config)?, classes, seed))
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Log-softmax via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(pool: bool) -> ReferenceBackboneConfig {
        ReferenceBackboneConfig {
            input_channels: 2,
            input_height: 8,
            input_width: 8,
            blocks: vec![ConvBlockSpec {
                out_channels: 3,
                kernel: 3,
                pool,
            }],
            num_classes: 2,
            input_shift: 0.5,
        }
    }

    fn input(seed: u64, shape: [usize; 3]) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor3::from_vec(shape[0], shape[1], shape[2], (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn default_config_yields_14x14x64() {
        let cfg = ReferenceBackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_shape(), [64, 14, 14]);
    }

    #[test]
    fn config_rejects_tiny_feature_maps() {
        let mut cfg = tiny_config(true);
        cfg.input_height = 2;
        cfg.input_width = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut model = Classifier::from_config(tiny_config(true), 1).unwrap();
        let n = model.params().len();
        let mut p = vec![0.0; n];
        p[n - 2] = 0.3;
        p[n - 1] = -1.2;
        model.set_params(p).unwrap();
        let out = model.forward(&[input(5, [2, 8, 8])]).unwrap();
        assert_eq!(out[0].logits, vec![0.3, -1.2]);
    }

    #[test]
    fn duplicated_samples_match() {
        let model = Classifier::from_config(tiny_config(false), 2).unwrap();
        let x = input(9, [2, 8, 8]);
        let out = model.forward(&[x.clone(), x]).unwrap();
        assert_eq!(out[0], out[1]);
        out[0].check_consistency(&model.head(), 1e-12).unwrap();
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let model = Classifier::from_config(tiny_config(true), 2).unwrap();
        assert!(model.forward(&[input(1, [3, 8, 8])]).is_err());
        assert!(model.forward(&[]).is_err());
    }

    #[test]
    fn pooled_is_mean_for_single_map() {
        let f = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let head = ClassifierHead::new(1, 1, vec![1.0], vec![0.0]).unwrap();
        let out = BackboneOutput {
            features: f,
            pooled: vec![3.0],
            logits: vec![3.0],
        };
        out.check_consistency(&head, 1e-12).unwrap();
    }

    #[test]
    fn cam_weighted_sum_example() {
        let f = Tensor3::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let head = ClassifierHead::new(1, 2, vec![1.0, -1.0], vec![0.0]).unwrap();
        let out = cam(&f, &head, 0).unwrap();
        assert_eq!(out.grid.as_slice(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!((out.raw_min, out.raw_max), (1.0, 3.0));
    }

    #[test]
    fn cam_single_map_identity_weight() {
        let f = Tensor3::from_vec(1, 2, 2, vec![2.0, 4.0, 6.0, 10.0]).unwrap();
        let head = ClassifierHead::new(1, 1, vec![1.0], vec![0.0]).unwrap();
        let out = cam(&f, &head, 0).unwrap();
        assert_eq!(out.grid.as_slice(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn cam_constant_maps_are_zero() {
        let f = Tensor3::from_vec(2, 2, 2, vec![3.0; 8]).unwrap();
        let head = ClassifierHead::new(2, 2, vec![0.5, 0.2, -1.0, 4.0], vec![0.0, 0.0]).unwrap();
        let out = cam(&f, &head, 1).unwrap();
        assert!(out.is_degenerate());
        assert_eq!(out.raw_min, out.raw_max);
        assert!(out.grid.as_slice().iter().all(|&v| v == 0.0));
        let (d_f, d_row) = cam_backward(&f, &head, &out, &Grid::filled(2, 2, 1.0));
        assert!(d_f.data.iter().all(|&v| v == 0.0));
        assert!(d_row.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_rejects_bad_class_and_width() {
        let f = Tensor3::zeros(2, 2, 2);
        let head = ClassifierHead::new(2, 3, vec![0.0; 6], vec![0.0; 2]).unwrap();
        assert!(matches!(cam(&f, &head, 0), Err(Error::Shape { .. })));
        let head = ClassifierHead::new(2, 2, vec![0.0; 4], vec![0.0; 2]).unwrap();
        assert!(cam(&f, &head, 2).is_err());
    }

    #[test]
    fn cam_backward_matches_finite_differences() {
        let f = input(3, [3, 3, 3]);
        let head = ClassifierHead::new(2, 3, vec![0.4, -0.7, 1.1, 0.2, 0.3, -0.5], vec![0.0; 2]).unwrap();
        let target: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let loss = |f: &Tensor3| {
            let out = cam(f, &head, 0).unwrap();
            out.grid
                .as_slice()
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let out = cam(&f, &head, 0).unwrap();
        let d_grid = Grid::from_fn(3, 3, |y, x| 2.0 * (out.grid.get(y, x) - target[y * 3 + x]));
        let (d_f, _) = cam_backward(&f, &head, &out, &d_grid);
        let eps = 1e-6;
        for i in 0..f.data.len() {
            let mut plus = f.clone();
            plus.data[i] += eps;
            let mut minus = f.clone();
            minus.data[i] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!((numeric - d_f.data[i]).abs() < 1e-7, "i={i} {numeric} vs {}", d_f.data[i]);
        }
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(&[1000.0, 0.0]);
        assert!(l[0].abs() < 1e-12);
        assert!((l[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn valid_range_bounds() {
        assert_eq!(valid_range(-1, 5), (1, 5));
        assert_eq!(valid_range(1, 5), (0, 4));
        assert_eq!(valid_range(0, 5), (0, 5));
    }
}
