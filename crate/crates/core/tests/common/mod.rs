//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use cgan_seg::autograd::Graph;
use cgan_seg::networks::{
    concat_condition, discriminator_graph, generator_forward, generator_graph, init_discriminator_with_std,
    init_generator_with_std, DiscriminatorConfig, DiscriminatorParams, ForwardMode, GeneratorConfig, GeneratorParams,
    ParamSet, Track,
};
use cgan_seg::tensor::Tensor;
use cgan_seg::training::{discriminator_loss_graph, generator_loss_graph, GeneratorLossMode};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LOG_EPS: f64 = 1e-8;
pub const DROPOUT_SEED: u64 = 99;

pub fn toy_configs(levels: usize) -> (GeneratorConfig, DiscriminatorConfig) {
    let g = GeneratorConfig {
        levels,
        ..GeneratorConfig::with_filters(2)
    };
    (g, DiscriminatorConfig::with_filters(2))
}

/// Image in `[-1, 1]` and a `{-1, 1}` disc mask.
pub fn toy_pair(size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = size as f64 / 2.0;
    let r2 = (size as f64 / 4.0).powi(2);
    let mask: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            if (x - c).powi(2) + (y - c).powi(2) <= r2 { 1.0 } else { -1.0 }
        })
        .collect();
    (
        Tensor::new(vec![1, 3, size, size], img).unwrap(),
        Tensor::new(vec![1, 1, size, size], mask).unwrap(),
    )
}

pub struct Problem {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub gen: GeneratorParams<f64>,
    pub disc: DiscriminatorParams<f64>,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
}

impl Problem {
    pub fn new(levels: usize, size: usize, init_std: f64, seed: u64) -> Self {
        let (gen_cfg, disc_cfg) = toy_configs(levels);
        let (x, y) = toy_pair(size, seed);
        Self {
            gen: init_generator_with_std(&gen_cfg, seed + 1, init_std),
            disc: init_discriminator_with_std(&disc_cfg, seed + 2, init_std),
            gen_cfg,
            disc_cfg,
            x,
            y,
        }
    }

    fn mode() -> ForwardMode {
        ForwardMode::Training { dropout_seed: DROPOUT_SEED }
    }

    /// Discriminator loss with the generator output held fixed, plus its
    /// gradient w.r.t. every discriminator parameter (flattened, named order).
    pub fn d_loss(&self, disc: &DiscriminatorParams<f64>, with_grad: bool) -> (f64, Vec<f64>, Vec<bool>) {
        let fake = generator_forward(&self.gen, &self.gen_cfg, &self.x, Self::mode()).unwrap();
        let track = if with_grad { Track::Params } else { Track::Frozen };
        let mut g = Graph::new();
        let r = g.constant(concat_condition(&self.x, &self.y).unwrap());
        let f = g.constant(concat_condition(&self.x, &fake).unwrap());
        let dr = discriminator_graph(&mut g, disc, &self.disc_cfg, r, track).unwrap();
        let df = discriminator_graph(&mut g, disc, &self.disc_cfg, f, track).unwrap();
        let loss = discriminator_loss_graph(&mut g, dr.probs, df.probs, LOG_EPS).unwrap();
        let value = g.value(loss).item();
        let pattern = g.kink_pattern();
        if !with_grad {
            return (value, Vec::new(), pattern);
        }
        let grads = g.backward(loss).unwrap();
        let mut flat = Vec::new();
        for (a, b) in dr.params.vars.iter().zip(&df.params.vars) {
            let ga = grads.get(*a).unwrap();
            let gb = grads.get(*b).unwrap();
            flat.extend(ga.iter().zip(gb).map(|(p, q)| p + q));
        }
        (value, flat, pattern)
    }

    /// Saturating generator loss through the frozen discriminator.
    pub fn g_loss(&self, gen: &GeneratorParams<f64>, with_grad: bool) -> (f64, Vec<f64>, Vec<bool>) {
        let track = if with_grad { Track::Params } else { Track::Frozen };
        let mut g = Graph::new();
        let x = g.constant_ref(&self.x);
        let out = generator_graph(&mut g, gen, &self.gen_cfg, x, Self::mode(), track).unwrap();
        let c = g.concat(x, out.output).unwrap();
        let df = discriminator_graph(&mut g, &self.disc, &self.disc_cfg, c, Track::Frozen).unwrap();
        let loss = generator_loss_graph(&mut g, df.probs, GeneratorLossMode::Saturating, LOG_EPS);
        let value = g.value(loss).item();
        let pattern = g.kink_pattern();
        if !with_grad {
            return (value, Vec::new(), pattern);
        }
        let grads = g.backward(loss).unwrap();
        let flat = out.params.vars.iter().flat_map(|v| grads.get(*v).unwrap().to_vec()).collect();
        (value, flat, pattern)
    }
}

/// Adds `delta` to the `index`-th scalar of a parameter set (named order).
pub fn nudge<P: ParamSet<f64>>(params: &mut P, mut index: usize, delta: f64) {
    for t in params.tensors_mut() {
        if index < t.len() {
            t.data_mut()[index] += delta;
            return;
        }
        index -= t.len();
    }
    panic!("parameter index out of range");
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    /// Samples whose ±step evaluations crossed a kink and were not compared.
    pub kinked: usize,
    /// Compared samples within `rtol` on relative error alone.
    pub strict: usize,
    /// Compared samples outside `atol + rtol·max(|a|, |n|)`.
    pub failures: usize,
    pub max_rel: f64,
    /// `(index, analytic, numeric)` of the largest relative error.
    pub worst: Option<(usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|)`, or 0 when both vanish.
pub fn rel_error(a: f64, n: f64) -> f64 {
    let s = a.abs().max(n.abs());
    if s == 0.0 { 0.0 } else { (a - n).abs() / s }
}

/// Central differences on a seeded random `fraction` of parameters. Samples
/// whose perturbed evaluations leave the smooth piece of the base point are
/// counted in `kinked` and skipped.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<P: ParamSet<f64> + Clone>(
    params: &P,
    analytic: &[f64],
    fraction: f64,
    step: f64,
    rtol: f64,
    atol: f64,
    seed: u64,
    loss: impl Fn(&P) -> (f64, Vec<bool>),
) -> GradCheck {
    let base = loss(params).1;
    let n = params.param_count();
    assert_eq!(analytic.len(), n);
    let k = ((n as f64 * fraction).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let mut out = GradCheck { checked: k, kinked: 0, strict: 0, failures: 0, max_rel: 0.0, worst: None };
    let mut p = params.clone();
    for &i in &idx {
        nudge(&mut p, i, step);
        let (up, pu) = loss(&p);
        nudge(&mut p, i, -2.0 * step);
        let (down, pd) = loss(&p);
        nudge(&mut p, i, step);
        if pu != base || pd != base {
            out.kinked += 1;
            continue;
        }
        let num = (up - down) / (2.0 * step);
        let a = analytic[i];
        let r = rel_error(a, num);
        if r < rtol {
            out.strict += 1;
        }
        if (a - num).abs() > atol + rtol * a.abs().max(num.abs()) {
            out.failures += 1;
        }
        if r > out.max_rel {
            out.max_rel = r;
            out.worst = Some((i, a, num));
        }
    }
    out
}
