//! Generator (encoder-decoder with skip connections) and patch discriminator.
//!
//! Every sampling layer uses a 4×4 kernel with padding 1. Encoder layers
//! halve the resolution (stride 2) and are followed by LeakyReLU; decoder
//! layers are stride-2 transposed convolutions followed by ReLU and dropout,
//! except the last one which ends in tanh. Encoder level `i` is concatenated
//! onto the output of decoder level `levels - i` (so it feeds decoder level
//! `levels - i + 1`), for every level except the bottleneck.
//!
//! The discriminator sees `concat(image, mask)` and emits a sigmoid "patch
//! map" of shape `[B, 1, H/8 - 1, W/8 - 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Scalar, Tensor};

pub const KERNEL: usize = 4;
pub const PAD: usize = 1;
/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    /// Number of stride-2 encoder (and decoder) stages; 8 in the reference
    /// architecture, fewer for small test builds.
    pub levels: usize,
    pub batch_norm: bool,
    /// Keep dropout active in inference mode.
    pub inference_dropout: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_filters: 64,
            in_channels: 3,
            out_channels: 1,
            dropout_rate: 0.5,
            leaky_slope: 0.2,
            levels: 8,
            batch_norm: false,
            inference_dropout: false,
        }
    }
}

impl GeneratorConfig {
    pub fn with_filters(base_filters: usize) -> Self {
        Self {
            base_filters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("generator channel counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!("leaky_slope {} outside (0,1)", self.leaky_slope)));
        }
        if !(2..=12).contains(&self.levels) {
            return Err(Error::InvalidConfig(format!("levels {} outside 2..=12", self.levels)));
        }
        Ok(())
    }

    /// Spatial size factor the input must be divisible by.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Output channels of each encoder level: `f, 2f, 4f, 8f, 8f, ...`.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.base_filters << i.min(3)).collect()
    }

    /// Output channels of each decoder level, mirroring the encoder.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let enc = self.encoder_channels();
        (1..=self.levels)
            .map(|j| if j < self.levels { enc[self.levels - j - 1] } else { self.out_channels })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_filters: usize,
    pub in_channels: usize,
    pub leaky_slope: f64,
    pub batch_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_filters: 64,
            in_channels: 4,
            leaky_slope: 0.2,
            batch_norm: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn with_filters(base_filters: usize) -> Self {
        Self {
            base_filters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig("discriminator channel counts must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!("leaky_slope {} outside (0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// `(in, out, stride)` per layer.
    fn schedule(&self) -> [(usize, usize, usize); 4] {
        let f = self.base_filters;
        [(self.in_channels, f, 2), (f, 2 * f, 2), (2 * f, 4 * f, 2), (4 * f, 1, 1)]
    }
}

/// Batch-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// One convolution-like layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Option<Norm<T>>,
}

/// Shape description of one layer, used for init, counting and checkpoint checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub weight_shape: [usize; 4],
    pub bias_len: usize,
    pub norm: bool,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.weight_shape.iter().product::<usize>() + self.bias_len + if self.norm { 2 * self.bias_len } else { 0 }
    }
}

/// Ordered access to every trainable tensor of a network.
pub trait ParamSet<T: Scalar> {
    /// `(name, tensor)` pairs in the fixed serialization order.
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

fn layers_named<'a, T: Scalar>(prefix: &str, layers: &'a [Layer<T>], out: &mut Vec<(String, &'a Tensor<T>)>) {
    for (i, l) in layers.iter().enumerate() {
        let n = i + 1;
        out.push((format!("{prefix}{n}.weight"), &l.weight));
        out.push((format!("{prefix}{n}.bias"), &l.bias));
        if let Some(norm) = &l.norm {
            out.push((format!("{prefix}{n}.bn.gamma"), &norm.gamma));
            out.push((format!("{prefix}{n}.bn.beta"), &norm.beta));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T: Scalar = f32> {
    pub encoder: Vec<Layer<T>>,
    pub decoder: Vec<Layer<T>>,
}

impl<T: Scalar> ParamSet<T> for GeneratorParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        layers_named("gen.enc", &self.encoder, &mut out);
        layers_named("gen.dec", &self.decoder, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).for_each(|l| {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(norm) = &mut l.norm {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        });
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T: Scalar = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ParamSet<T> for DiscriminatorParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        layers_named("disc.conv", &self.layers, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(norm) = &mut l.norm {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out
    }
}

/// Layer shapes of the generator. Encoder weights are `[out, in, 4, 4]`,
/// decoder (transposed) weights are `[in, out, 4, 4]`.
pub fn generator_layout(cfg: &GeneratorConfig) -> Vec<LayerSpec> {
    let enc = cfg.encoder_channels();
    let dec = cfg.decoder_channels();
    let l = cfg.levels;
    let mut specs = Vec::with_capacity(2 * l);
    let mut prev = cfg.in_channels;
    for (i, &c) in enc.iter().enumerate() {
        specs.push(LayerSpec {
            name: format!("gen.enc{}", i + 1),
            weight_shape: [c, prev, KERNEL, KERNEL],
            bias_len: c,
            norm: cfg.batch_norm && i > 0 && i + 1 < l,
        });
        prev = c;
    }
    for (j, &c) in dec.iter().enumerate() {
        // decoder j (0-based) > 0 takes [previous decoder output, skip]
        let input = if j == 0 { enc[l - 1] } else { dec[j - 1] + enc[l - 1 - j] };
        specs.push(LayerSpec {
            name: format!("gen.dec{}", j + 1),
            weight_shape: [input, c, KERNEL, KERNEL],
            bias_len: c,
            norm: cfg.batch_norm && j + 1 < l,
        });
    }
    specs
}

pub fn discriminator_layout(cfg: &DiscriminatorConfig) -> Vec<LayerSpec> {
    cfg.schedule()
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout, _))| LayerSpec {
            name: format!("disc.conv{}", i + 1),
            weight_shape: [cout, cin, KERNEL, KERNEL],
            bias_len: cout,
            norm: cfg.batch_norm && (i == 1 || i == 2),
        })
        .collect()
}

fn init_layers<T: Scalar>(specs: &[LayerSpec], rng: &mut ChaCha8Rng, std: f64) -> Vec<Layer<T>> {
    let normal = Normal::new(0.0, std).expect("positive std");
    specs
        .iter()
        .map(|s| {
            let n: usize = s.weight_shape.iter().product();
            let w = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
            Layer {
                weight: Tensor::new(s.weight_shape.to_vec(), w).expect("layout shape"),
                bias: Tensor::zeros(vec![s.bias_len]),
                norm: s.norm.then(|| Norm {
                    gamma: Tensor::full(vec![s.bias_len], T::one()),
                    beta: Tensor::zeros(vec![s.bias_len]),
                }),
            }
        })
        .collect()
}

/// Gaussian `N(0, 0.02²)` weights, zero biases, deterministic per seed.
pub fn init_generator<T: Scalar>(cfg: &GeneratorConfig, seed: u64) -> GeneratorParams<T> {
    init_generator_with_std(cfg, seed, INIT_STD)
}

/// [`init_generator`] with a custom weight standard deviation.
pub fn init_generator_with_std<T: Scalar>(cfg: &GeneratorConfig, seed: u64, std: f64) -> GeneratorParams<T> {
    let specs = generator_layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = init_layers(&specs, &mut rng, std);
    let decoder = layers.split_off(cfg.levels);
    GeneratorParams {
        encoder: layers,
        decoder,
    }
}

pub fn init_discriminator<T: Scalar>(cfg: &DiscriminatorConfig, seed: u64) -> DiscriminatorParams<T> {
    init_discriminator_with_std(cfg, seed, INIT_STD)
}

pub fn init_discriminator_with_std<T: Scalar>(cfg: &DiscriminatorConfig, seed: u64, std: f64) -> DiscriminatorParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscriminatorParams {
        layers: init_layers(&discriminator_layout(cfg), &mut rng, std),
    }
}

/// How dropout behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout off unless the config enables inference dropout.
    Inference,
    /// Dropout on, masks derived from the seed.
    Training { dropout_seed: u64 },
}

/// Seed used for inference-time dropout masks, so inference stays deterministic.
const INFERENCE_DROPOUT_SEED: u64 = 0x5eed_d20b;

impl ForwardMode {
    fn dropout_seed(self, cfg: &GeneratorConfig) -> Option<u64> {
        match self {
            ForwardMode::Training { dropout_seed } => Some(dropout_seed),
            ForwardMode::Inference if cfg.inference_dropout => Some(INFERENCE_DROPOUT_SEED),
            ForwardMode::Inference => None,
        }
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64, stream: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Whether parameters are recorded as gradient-tracked leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Params,
    Frozen,
}

fn layer_vars<'a, T: Scalar>(g: &mut Graph<'a, T>, l: &'a Layer<T>, track: Track) -> (Var, Var, Option<(Var, Var)>) {
    let mut leaf = |t: &'a Tensor<T>| match track {
        Track::Params => g.param(t),
        Track::Frozen => g.constant_ref(t),
    };
    let w = leaf(&l.weight);
    let b = leaf(&l.bias);
    let n = l.norm.as_ref().map(|n| (leaf(&n.gamma), leaf(&n.beta)));
    (w, b, n)
}

/// Variables of the generator parameters on a graph, layer by layer, so the
/// caller can fetch their gradients.
#[derive(Clone, Debug)]
pub struct ParamVars {
    /// In [`ParamSet::named`] order.
    pub vars: Vec<Var>,
}

/// Output handles of a generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOut {
    pub output: Var,
    pub bottleneck: Var,
    pub params: ParamVars,
}

/// Records the generator forward pass on `g`.
pub fn generator_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a GeneratorParams<T>,
    cfg: &GeneratorConfig,
    x: Var,
    mode: ForwardMode,
    track: Track,
) -> Result<GeneratorOut> {
    let [_, c, h, w] = g.value(x).dims4()?;
    let m = cfg.size_multiple();
    if c != cfg.in_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::BadShape(format!(
            "generator needs [B,{},H,W] with H,W divisible by {m}, got {:?}",
            cfg.in_channels,
            g.value(x).shape()
        )));
    }
    if params.encoder.len() != cfg.levels || params.decoder.len() != cfg.levels {
        return Err(Error::BadShape("generator params do not match config levels".into()));
    }
    let slope = T::from_f64_lossy(cfg.leaky_slope);
    let bn_eps = T::from_f64_lossy(BN_EPS);
    let dropout_seed = mode.dropout_seed(cfg);
    let mut pvars = Vec::new();
    let mut skips = Vec::with_capacity(cfg.levels);
    let mut cur = x;
    for layer in &params.encoder {
        let (wv, bv, nv) = layer_vars(g, layer, track);
        pvars.extend([wv, bv]);
        cur = g.conv2d(cur, wv, bv, 2, PAD)?;
        if let Some((gm, bt)) = nv {
            pvars.extend([gm, bt]);
            cur = g.batch_norm(cur, gm, bt, bn_eps)?;
        }
        cur = g.leaky_relu(cur, slope);
        skips.push(cur);
    }
    let bottleneck = cur;
    let last = cfg.levels - 1;
    for (j, layer) in params.decoder.iter().enumerate() {
        if j > 0 {
            cur = g.concat(cur, skips[last - j])?;
        }
        let (wv, bv, nv) = layer_vars(g, layer, track);
        pvars.extend([wv, bv]);
        cur = g.conv_transpose2d(cur, wv, bv, 2, PAD)?;
        if let Some((gm, bt)) = nv {
            pvars.extend([gm, bt]);
            cur = g.batch_norm(cur, gm, bt, bn_eps)?;
        }
        if j == last {
            cur = g.tanh(cur);
        } else {
            cur = g.relu(cur);
            if let Some(seed) = dropout_seed.filter(|_| cfg.dropout_rate > 0.0) {
                let len = g.value(cur).len();
                cur = g.dropout(cur, dropout_mask(len, cfg.dropout_rate, seed, j as u64))?;
            }
        }
    }
    Ok(GeneratorOut {
        output: cur,
        bottleneck,
        params: ParamVars { vars: pvars },
    })
}

/// Generator forward pass returning the `[B, out, H, W]` mask in `(-1, 1)`.
pub fn generator_forward<T: Scalar>(
    params: &GeneratorParams<T>,
    cfg: &GeneratorConfig,
    x: &Tensor<T>,
    mode: ForwardMode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let out = generator_graph(&mut g, params, cfg, xv, mode, Track::Frozen)?;
    Ok(g.value(out.output).clone())
}

/// Channel-wise concatenation `[image, mask]` forming the discriminator input.
pub fn concat_condition<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    concat_channels(image, mask)
}

/// Output handles of a discriminator pass.
#[derive(Clone, Debug)]
pub struct DiscriminatorOut {
    pub probs: Var,
    /// Conv3 activation (input to the final layer).
    pub features: Var,
    pub params: ParamVars,
}

pub fn discriminator_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a DiscriminatorParams<T>,
    cfg: &DiscriminatorConfig,
    c: Var,
    track: Track,
) -> Result<DiscriminatorOut> {
    let [_, ch, h, w] = g.value(c).dims4()?;
    if ch != cfg.in_channels || h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
        return Err(Error::BadShape(format!(
            "discriminator needs [B,{},H,W] with H,W >= 16 and divisible by 8, got {:?}",
            cfg.in_channels,
            g.value(c).shape()
        )));
    }
    let slope = T::from_f64_lossy(cfg.leaky_slope);
    let bn_eps = T::from_f64_lossy(BN_EPS);
    let mut pvars = Vec::new();
    let mut cur = c;
    let mut features = c;
    let schedule = cfg.schedule();
    for (i, layer) in params.layers.iter().enumerate() {
        let (wv, bv, nv) = layer_vars(g, layer, track);
        pvars.extend([wv, bv]);
        cur = g.conv2d(cur, wv, bv, schedule[i].2, PAD)?;
        if let Some((gm, bt)) = nv {
            pvars.extend([gm, bt]);
            cur = g.batch_norm(cur, gm, bt, bn_eps)?;
        }
        if i + 1 < schedule.len() {
            cur = g.leaky_relu(cur, slope);
            features = cur;
        } else {
            cur = g.sigmoid(cur);
        }
    }
    Ok(DiscriminatorOut {
        probs: cur,
        features,
        params: ParamVars { vars: pvars },
    })
}

/// Discriminator forward pass: `(probabilities, conv3 features)`.
pub fn discriminator_forward<T: Scalar>(
    params: &DiscriminatorParams<T>,
    cfg: &DiscriminatorConfig,
    c: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let cv = g.constant_ref(c);
    let out = discriminator_graph(&mut g, params, cfg, cv, Track::Frozen)?;
    Ok((g.value(out.probs).clone(), g.value(out.features).clone()))
}

/// Converts parameter precision (for gradient checks in 64-bit).
pub fn cast_layers<T: Scalar, U: Scalar>(layers: &[Layer<T>]) -> Vec<Layer<U>> {
    layers
        .iter()
        .map(|l| Layer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            norm: l.norm.as_ref().map(|n| Norm {
                gamma: n.gamma.cast(),
                beta: n.beta.cast(),
            }),
        })
        .collect()
}
