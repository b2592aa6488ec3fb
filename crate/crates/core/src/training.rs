//! Adversarial training: losses, Adam, the per-batch step and the epoch loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Var};
use crate::checkpoint;
use crate::data::{denormalize, epoch_iterator, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, predict_dataset, Aggregation, MetricReport};
use crate::networks::{
    concat_condition, discriminator_graph, generator_graph, init_discriminator, init_generator, DiscriminatorConfig,
    DiscriminatorParams, ForwardMode, GeneratorConfig, GeneratorParams, ParamSet, Track,
};
use crate::tensor::{Scalar, Tensor};
use crate::types::{Batch, Dataset, RawImage};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossMode {
    /// `mean(ln(1 - D(fake)))`, minimized.
    #[default]
    Saturating,
    /// `-mean(ln D(fake))`.
    NonSaturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Probabilities are clamped to `[log_eps, 1 - log_eps]` before taking logs.
    pub log_eps: f64,
    pub generator_loss_mode: GeneratorLossMode,
    pub feature_matching: bool,
    pub seed: u64,
    pub sample_dump_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 4,
            learning_rate: 0.002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            log_eps: 1e-8,
            generator_loss_mode: GeneratorLossMode::Saturating,
            feature_matching: false,
            seed: 0,
            sample_dump_count: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} {b} outside [0,1)")));
            }
        }
        if !(self.log_eps > 0.0 && self.log_eps < 0.5) {
            return Err(Error::InvalidConfig(format!("log_eps {} outside (0, 0.5)", self.log_eps)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: ADAM_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam moment buffers for one network, aligned with [`ParamSet::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new<P: ParamSet<f32>>(params: &P) -> Self {
        let zeros: Vec<Tensor<f32>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update. `grads[i]` belongs to the i-th tensor.
    pub fn step<P: ParamSet<f32>>(&mut self, params: &mut P, grads: &[Vec<f32>], hp: &AdamParams) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::BadShape(format!(
                "adam: {} tensors, {} grads, {} moments",
                tensors.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        let step = (hp.lr / c1) as f32;
        let inv_sqrt_c2 = (1.0 / c2.sqrt()) as f32;
        let eps = hp.eps as f32;
        for (i, p) in tensors.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.len() {
                return Err(Error::BadShape(format!("adam: grad {i} has {} values for {}", g.len(), p.len())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= step * m[j] / (v[j].sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub gen: GeneratorParams<f32>,
    pub disc: DiscriminatorParams<f32>,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Completed train steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks; both initializer seeds are drawn from `seed`.
    pub fn new(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        gen_cfg.validate()?;
        disc_cfg.validate()?;
        if disc_cfg.in_channels != gen_cfg.in_channels + gen_cfg.out_channels {
            return Err(Error::InvalidConfig(format!(
                "discriminator expects {} channels, image+mask give {}",
                disc_cfg.in_channels,
                gen_cfg.in_channels + gen_cfg.out_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = init_generator(&gen_cfg, rng.next_u64());
        let disc = init_discriminator(&disc_cfg, rng.next_u64());
        Ok(Self {
            gen_opt: Adam::new(&gen),
            disc_opt: Adam::new(&disc),
            gen_cfg,
            disc_cfg,
            gen,
            disc,
            step: 0,
            epoch: 0,
            rng,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: u64,
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

fn clamp_bounds<T: Scalar>(eps: f64) -> (T, T) {
    (T::from_f64_lossy(eps), T::from_f64_lossy(1.0 - eps))
}

/// `mean(ln(1 - p))` with the argument clamped.
fn mean_log_one_minus<T: Scalar>(g: &mut Graph<'_, T>, p: Var, eps: f64) -> Var {
    let (lo, hi) = clamp_bounds::<T>(eps);
    let q = g.affine(p, -T::one(), T::one());
    let l = g.ln_clamped(q, lo, hi);
    g.mean(l)
}

fn mean_log<T: Scalar>(g: &mut Graph<'_, T>, p: Var, eps: f64) -> Var {
    let (lo, hi) = clamp_bounds::<T>(eps);
    let l = g.ln_clamped(p, lo, hi);
    g.mean(l)
}

/// `-mean(ln d_real) - mean(ln(1 - d_fake))`, means over batch and patches.
pub fn discriminator_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, d_real: Var, d_fake: Var, eps: f64) -> Result<Var> {
    let a = mean_log(g, d_real, eps);
    let b = mean_log_one_minus(g, d_fake, eps);
    let s = g.add(a, b)?;
    Ok(g.affine(s, -T::one(), T::zero()))
}

pub fn generator_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, d_fake: Var, mode: GeneratorLossMode, eps: f64) -> Var {
    match mode {
        GeneratorLossMode::Saturating => mean_log_one_minus(g, d_fake, eps),
        GeneratorLossMode::NonSaturating => {
            let l = mean_log(g, d_fake, eps);
            g.affine(l, -T::one(), T::zero())
        }
    }
}

/// Mean absolute difference of two feature maps.
pub fn feature_matching_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, real: Var, fake: Var) -> Result<Var> {
    let d = g.sub(fake, real)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

pub fn discriminator_loss<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>, eps: f64) -> Result<T> {
    let mut g = Graph::new();
    let (r, f) = (g.constant_ref(d_real), g.constant_ref(d_fake));
    let l = discriminator_loss_graph(&mut g, r, f, eps)?;
    Ok(g.value(l).item())
}

pub fn generator_loss<T: Scalar>(d_fake: &Tensor<T>, mode: GeneratorLossMode, eps: f64) -> T {
    let mut g = Graph::new();
    let f = g.constant_ref(d_fake);
    let l = generator_loss_graph(&mut g, f, mode, eps);
    g.value(l).item()
}

pub fn feature_matching_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let (r, f) = (g.constant_ref(real), g.constant_ref(fake));
    let l = feature_matching_loss_graph(&mut g, r, f)?;
    Ok(g.value(l).item())
}

fn collect_grads<T: Scalar>(grads: &mut Gradients<T>, g: &Graph<'_, T>, sets: &[&[Var]]) -> Vec<Vec<T>> {
    let n = sets[0].len();
    (0..n)
        .map(|i| {
            let mut acc = vec![T::zero(); g.value(sets[0][i]).len()];
            for set in sets {
                if let Some(d) = grads.take(set[i]) {
                    acc.iter_mut().zip(d).for_each(|(a, v)| *a = *a + v);
                }
            }
            acc
        })
        .collect()
}

fn check_finite(which: &'static str, step: u64, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { which, step, value })
    }
}

/// Result of one discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    pub d_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// One Adam step of the discriminator on real pairs `(images, real_masks)`
/// and fake pairs `(images, fake_masks)`. `step` only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_update(
    disc: &mut DiscriminatorParams<f32>,
    opt: &mut Adam,
    disc_cfg: &DiscriminatorConfig,
    images: &Tensor<f32>,
    real_masks: &Tensor<f32>,
    fake_masks: &Tensor<f32>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<DiscriminatorStep> {
    let real = concat_condition(images, real_masks)?;
    let fake = concat_condition(images, fake_masks)?;
    let (out, grads) = {
        let mut g = Graph::new();
        let rv = g.constant(real);
        let fv = g.constant(fake);
        let dr = discriminator_graph(&mut g, disc, disc_cfg, rv, Track::Params)?;
        let df = discriminator_graph(&mut g, disc, disc_cfg, fv, Track::Params)?;
        let loss = discriminator_loss_graph(&mut g, dr.probs, df.probs, cfg.log_eps)?;
        let out = DiscriminatorStep {
            d_loss: check_finite("discriminator", step, g.value(loss).item() as f64)?,
            d_real_mean: g.value(dr.probs).mean() as f64,
            d_fake_mean: g.value(df.probs).mean() as f64,
        };
        let mut grads = g.backward(loss)?;
        let grads = collect_grads(&mut grads, &g, &[&dr.params.vars, &df.params.vars]);
        (out, grads)
    };
    opt.step(disc, &grads, &cfg.adam())?;
    Ok(out)
}

/// One discriminator update followed by one generator update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossRecord> {
    let step = state.step + 1;
    let dropout_seed = state.rng.next_u64();
    let hp = cfg.adam();
    let (d, g_loss, gen_grads) = {
        let mut g = Graph::new();
        let x = g.constant_ref(&batch.images);
        let gen_out = generator_graph(
            &mut g,
            &state.gen,
            &state.gen_cfg,
            x,
            ForwardMode::Training { dropout_seed },
            Track::Params,
        )?;
        let fake = g.value(gen_out.output).clone();
        let d = discriminator_update(
            &mut state.disc,
            &mut state.disc_opt,
            &state.disc_cfg,
            &batch.images,
            &batch.masks,
            &fake,
            cfg,
            step,
        )?;
        // The generator sees the freshly updated, frozen discriminator.
        let c = g.concat(x, gen_out.output)?;
        let df = discriminator_graph(&mut g, &state.disc, &state.disc_cfg, c, Track::Frozen)?;
        let loss = if cfg.feature_matching {
            let real = g.constant(concat_condition(&batch.images, &batch.masks)?);
            let dr = discriminator_graph(&mut g, &state.disc, &state.disc_cfg, real, Track::Frozen)?;
            feature_matching_loss_graph(&mut g, dr.features, df.features)?
        } else {
            generator_loss_graph(&mut g, df.probs, cfg.generator_loss_mode, cfg.log_eps)
        };
        let g_loss = check_finite("generator", step, g.value(loss).item() as f64)?;
        let mut grads = g.backward(loss)?;
        let gen_grads = collect_grads(&mut grads, &g, &[&gen_out.params.vars]);
        (d, g_loss, gen_grads)
    };
    state.gen_opt.step(&mut state.gen, &gen_grads, &hp)?;
    state.step = step;
    Ok(LossRecord {
        epoch: state.epoch + 1,
        step,
        d_loss: d.d_loss,
        g_loss,
        d_real_mean: d.d_real_mean,
        d_fake_mean: d.d_fake_mean,
    })
}

/// Per-epoch summary passed to the progress callback.
#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: usize,
    pub mean_d_loss: f64,
    pub mean_g_loss: f64,
    pub val: Option<MetricReport>,
    pub checkpoint: PathBuf,
}

#[derive(Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
    pub sample_sheets: Vec<PathBuf>,
    pub loss_log: PathBuf,
    pub epochs: Vec<EpochSummary>,
}

pub const LOSS_LOG: &str = "losses.jsonl";
pub const VAL_LOG: &str = "val_metrics.jsonl";

pub fn checkpoint_name(epoch: u64) -> String {
    format!("ckpt_epoch_{epoch:03}.bin")
}

pub fn sample_sheet_name(epoch: u64) -> String {
    format!("epoch_{epoch:03}.png")
}

#[derive(Serialize)]
struct ValRecord<'a> {
    epoch: u64,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<S: Serialize>(w: &mut BufWriter<File>, path: &Path, rec: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Runs `cfg.epochs` epochs starting from `state`, writing a checkpoint,
/// a sample sheet and loss records into `out_dir` after every epoch.
/// Validation metrics are computed per epoch when `val_set` is given.
pub fn train(
    mut state: TrainState,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<TrainReport> {
    cfg.validate()?;
    train_set.require_non_empty("train")?;
    let (h, w) = train_set.samples()[0].hw();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let resume = state.epoch > 0;
    let loss_path = out_dir.join(LOSS_LOG);
    let val_path = out_dir.join(VAL_LOG);
    let mut loss_log = open_log(&loss_path, resume)?;
    let mut val_log = match val_set {
        Some(_) => Some(open_log(&val_path, resume)?),
        None => None,
    };
    let dump_source = val_set.filter(|v| !v.is_empty()).unwrap_or(train_set);
    let dump_count = cfg.sample_dump_count.min(dump_source.len());
    let dump_set = dump_source.subset(&(0..dump_count).collect::<Vec<_>>());

    let mut report = TrainReport {
        state: state.clone(),
        checkpoints: Vec::new(),
        sample_sheets: Vec::new(),
        loss_log: loss_path.clone(),
        epochs: Vec::new(),
    };
    for _ in 0..cfg.epochs {
        let epoch = state.epoch + 1;
        let (mut d_sum, mut g_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in epoch_iterator(train_set, cfg.batch_size, cfg.seed, epoch)? {
            let rec = train_step(&mut state, &batch?, cfg)?;
            d_sum += rec.d_loss;
            g_sum += rec.g_loss;
            steps += 1;
            write_line(&mut loss_log, &loss_path, &rec)?;
        }
        loss_log.flush().map_err(|e| Error::io(&loss_path, e))?;
        state.epoch = epoch;

        let val = match (val_set, val_log.as_mut()) {
            (Some(v), Some(log)) if !v.is_empty() => {
                let r = evaluate_dataset(&state.gen, &state.gen_cfg, v, DEFAULT_THRESHOLD, Aggregation::PerImageMean)?;
                write_line(log, &val_path, &ValRecord { epoch, report: &r })?;
                log.flush().map_err(|e| Error::io(&val_path, e))?;
                Some(r)
            }
            _ => None,
        };

        let ckpt = out_dir.join(checkpoint_name(epoch));
        checkpoint::save(&ckpt, &state, cfg, (w, h))?;
        if dump_count > 0 {
            let sheet = out_dir.join(sample_sheet_name(epoch));
            write_sample_sheet(&state, &dump_set, &sheet)?;
            report.sample_sheets.push(sheet);
        }
        report.checkpoints.push(ckpt.clone());
        let summary = EpochSummary {
            epoch,
            steps,
            mean_d_loss: d_sum / steps.max(1) as f64,
            mean_g_loss: g_sum / steps.max(1) as f64,
            val,
            checkpoint: ckpt,
        };
        progress(&summary);
        report.epochs.push(summary);
    }
    report.state = state;
    Ok(report)
}

/// One row per sample: `input | generated mask | ground truth`.
pub fn write_sample_sheet(state: &TrainState, samples: &Dataset, path: &Path) -> Result<()> {
    let preds = predict_dataset(&state.gen, &state.gen_cfg, samples)?;
    let (h, w) = samples.samples()[0].hw();
    let mut sheet = RawImage::zeros(3 * w, h * samples.len(), 3);
    for (r, (s, p)) in samples.samples().iter().zip(&preds).enumerate() {
        let tiles = [denormalize(&s.image)?, denormalize(p)?, denormalize(&s.mask)?];
        for (k, tile) in tiles.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let px = tile.pixel(x, y);
                    let rgb = if px.len() == 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
                    let o = ((r * h + y) * 3 * w + k * w + x) * 3;
                    sheet.data_mut()[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    crate::data::save_png(&sheet, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, SynthConfig};
    use crate::data::normalize;
    use crate::types::{make_batch, SamplePair};
    use std::sync::Arc;

    fn probs(v: f64, n: usize) -> Tensor<f64> {
        Tensor::full(vec![1, 1, n, n], v)
    }

    #[test]
    fn loss_examples() {
        let eps = 1e-8;
        let half = probs(0.5, 3);
        assert!((discriminator_loss(&half, &half, eps).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let perfect = discriminator_loss(&probs(1.0 - eps, 3), &probs(eps, 3), eps).unwrap();
        assert!(perfect.abs() < 1e-7);
        let bad = discriminator_loss(&probs(eps, 3), &probs(eps, 3), eps).unwrap();
        assert!(bad >= -(eps.ln()) - 1e-9);
        let sat = generator_loss(&half, GeneratorLossMode::Saturating, eps);
        let non = generator_loss(&half, GeneratorLossMode::NonSaturating, eps);
        assert!((sat - 0.5f64.ln()).abs() < 1e-12);
        assert!((non + 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn losses_finite_at_exact_bounds() {
        for (r, f) in [(0.0, 1.0), (1.0, 0.0), (0.0, 0.0), (1.0, 1.0)] {
            let (r, f) = (probs(r, 2), probs(f, 2));
            assert!(discriminator_loss(&r, &f, 1e-8).unwrap().is_finite());
            for m in [GeneratorLossMode::Saturating, GeneratorLossMode::NonSaturating] {
                assert!(generator_loss(&f, m, 1e-8).is_finite());
            }
        }
    }

    #[test]
    fn generator_modes_share_gradient_sign() {
        for mode in [GeneratorLossMode::Saturating, GeneratorLossMode::NonSaturating] {
            let mut g = Graph::new();
            let p = g.tracked(probs(0.3, 2));
            let l = generator_loss_graph(&mut g, p, mode, 1e-8);
            let grads = g.backward(l).unwrap();
            assert!(grads.get(p).unwrap().iter().all(|&d| d < 0.0), "{mode:?}");
        }
    }

    #[test]
    fn feature_matching_examples() {
        let a = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        assert_eq!(feature_matching_loss(&a, &a).unwrap(), 0.0);
        assert!((feature_matching_loss(&a, &a.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-15);
        let b = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 1.0, -1.0, 0.5]).unwrap();
        let brute: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
        assert!((feature_matching_loss(&a, &b).unwrap() - brute).abs() < 1e-15);
        let c = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(feature_matching_loss(&a, &c), Err(Error::MixedShapes(_))));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = DiscriminatorConfig::with_filters(2);
        let mut p = init_discriminator::<f32>(&cfg, 1);
        let before = p.clone();
        let mut opt = Adam::new(&p);
        let zeros: Vec<Vec<f32>> = p.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        opt.step(&mut p, &zeros, &TrainConfig::default().adam()).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let cfg = DiscriminatorConfig::with_filters(1);
        let mut p = init_discriminator::<f32>(&cfg, 2);
        let before = p.clone();
        let mut opt = Adam::new(&p);
        let grads: Vec<Vec<f32>> = p.named().iter().map(|(_, t)| vec![0.5; t.len()]).collect();
        opt.step(&mut p, &grads, &TrainConfig::default().adam()).unwrap();
        for ((_, a), (_, b)) in p.named().iter().zip(before.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) - 0.002).abs() < 1e-6);
            }
        }
    }

    fn small_state(seed: u64) -> TrainState {
        let gen = GeneratorConfig {
            levels: 6,
            ..GeneratorConfig::with_filters(2)
        };
        TrainState::new(gen, DiscriminatorConfig::with_filters(2), seed).unwrap()
    }

    fn synth_batch(n: usize) -> Batch {
        let cfg = SynthConfig::square(n, 64, 11);
        let pairs: Vec<_> = (0..n)
            .map(|i| {
                let (img, mask) = generate_sample(&cfg, i);
                Arc::new(SamplePair::new(format!("s{i}"), normalize(&img), normalize(&mask)).unwrap())
            })
            .collect();
        make_batch(&pairs).unwrap()
    }

    #[test]
    fn train_step_is_deterministic_and_updates_both() {
        let batch = synth_batch(2);
        let cfg = TrainConfig::default();
        let mut a = small_state(3);
        let mut b = small_state(3);
        let init = a.clone();
        let ra = train_step(&mut a, &batch, &cfg).unwrap();
        let rb = train_step(&mut b, &batch, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_ne!(a.gen, init.gen);
        assert_ne!(a.disc, init.disc);
        assert_eq!((a.step, ra.step, ra.epoch), (1, 1, 1));
        assert!(ra.d_real_mean > 0.0 && ra.d_real_mean < 1.0);
        assert!(ra.d_fake_mean > 0.0 && ra.d_fake_mean < 1.0);
    }

    #[test]
    fn half_steps_are_detached() {
        let batch = synth_batch(2);
        let cfg = TrainConfig::default();
        let mut full = small_state(5);
        let mut probe = full.clone();

        // Reproduce the fake masks train_step will see.
        let seed = probe.rng.next_u64();
        let fake = crate::networks::generator_forward(
            &probe.gen,
            &probe.gen_cfg,
            &batch.images,
            ForwardMode::Training { dropout_seed: seed },
        )
        .unwrap();
        let gen_before = probe.gen.clone();
        discriminator_update(&mut probe.disc, &mut probe.disc_opt, &probe.disc_cfg, &batch.images, &batch.masks, &fake, &cfg, 1)
            .unwrap();
        assert_eq!(probe.gen, gen_before, "discriminator update touched the generator");

        train_step(&mut full, &batch, &cfg).unwrap();
        assert_eq!(full.disc, probe.disc, "generator update touched the discriminator");
        assert_eq!(full.disc_opt, probe.disc_opt);
    }

    #[test]
    fn feature_matching_step_runs() {
        let batch = synth_batch(1);
        let cfg = TrainConfig {
            feature_matching: true,
            ..TrainConfig::default()
        };
        let mut s = small_state(9);
        let rec = train_step(&mut s, &batch, &cfg).unwrap();
        assert!(rec.g_loss >= 0.0 && rec.g_loss.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        let gen = GeneratorConfig::with_filters(2);
        let disc = DiscriminatorConfig {
            in_channels: 3,
            ..DiscriminatorConfig::with_filters(2)
        };
        assert!(TrainState::new(gen, disc, 0).is_err());
    }
}
