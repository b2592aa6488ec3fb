//! Command-line driver: `synth`, `train`, `eval`, `predict`, `bench`.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    binarize_mask, compute_mean_dims, fit_to_dims, load_dataset, load_raw_samples, load_rgb, normalize,
    prepare_dataset, save_png, snap_to_multiple, split_dataset, PrepConfig, DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, throughput, Aggregation};
use crate::networks::{generator_forward, DiscriminatorConfig, ForwardMode, GeneratorConfig, ParamSet};
use crate::par;
use crate::synth::{generate_dataset, SynthConfig, MANIFEST_NAME};
use crate::tensor::Tensor;
use crate::training::{train, GeneratorLossMode, TrainConfig, TrainState};
use crate::types::{read_manifest, RawImage};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CGAN_SEG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cgan-seg", version, about = "Conditional-GAN image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic image/mask dataset with a manifest.
    Synth(SynthArgs),
    /// Train generator and discriminator adversarially.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write predicted masks for a directory or manifest of images.
    Predict(PredictArgs),
    /// Measure inference throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenLossArg {
    Saturating,
    NonSaturating,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (tab-separated id, image, mask).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    /// Base filter count of both networks.
    #[arg(long, default_value_t = 64)]
    pub f: usize,
    /// Square working size, or `auto` for the dataset's mean dims snapped to
    /// the generator's size multiple.
    #[arg(long, default_value = "256")]
    pub size: String,
    /// Stride-2 levels of the generator.
    #[arg(long, default_value_t = 8)]
    pub levels: usize,
    /// Fraction of samples used for training; the rest is validation.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = GenLossArg::Saturating)]
    pub gen_loss: GenLossArg,
    #[arg(long)]
    pub feature_matching: bool,
    #[arg(long)]
    pub batch_norm: bool,
    #[arg(long, default_value_t = 4)]
    pub sample_dump: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    PerImage,
    Global,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = AggArg::PerImage)]
    pub agg: AggArg,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write the report as a one-row CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A directory of images or a dataset manifest.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Also write `<stem>_prob.png` probability maps.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Benchmark this checkpoint; otherwise a freshly initialized generator.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset manifest; otherwise synthetic images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub f: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub levels: usize,
    /// Synthetic image count when no dataset is given.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        par::init_thread_pool(n);
    }
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Bench(a) => cmd_bench(&a),
    };
    match res {
        Ok(()) => 0,
        Err(Error::InvalidConfig(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ds = generate_dataset(&SynthConfig::square(a.count, a.size, a.seed), &a.out)?;
    println!("wrote {} pairs to {}", ds.len(), a.out.join(MANIFEST_NAME).display());
    Ok(())
}

/// Reproducibility record written before training starts.
#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    dataset_manifest: &'a Path,
    dataset_manifest_sha256: String,
    prep: &'a PrepConfig,
    train: &'a TrainConfig,
    generator: &'a GeneratorConfig,
    discriminator: &'a DiscriminatorConfig,
    parallel_threads: usize,
    started_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if !(a.split > 0.0 && a.split <= 1.0) {
        return Err(Error::InvalidConfig(format!("--split {} outside (0, 1]", a.split)));
    }
    let gen_cfg = GeneratorConfig {
        levels: a.levels,
        batch_norm: a.batch_norm,
        ..GeneratorConfig::with_filters(a.f)
    };
    gen_cfg.validate()?;
    let disc_cfg = DiscriminatorConfig {
        batch_norm: a.batch_norm,
        ..DiscriminatorConfig::with_filters(a.f)
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        generator_loss_mode: match a.gen_loss {
            GenLossArg::Saturating => GeneratorLossMode::Saturating,
            GenLossArg::NonSaturating => GeneratorLossMode::NonSaturating,
        },
        feature_matching: a.feature_matching,
        seed: a.seed,
        sample_dump_count: a.sample_dump,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let raw = load_raw_samples(&a.data)?;
    let m = gen_cfg.size_multiple();
    let (w, h) = if a.size == "auto" {
        let (mw, mh) = compute_mean_dims(raw.iter().map(|r| &r.image))?;
        (snap_to_multiple(mw, m), snap_to_multiple(mh, m))
    } else {
        let s: usize = a
            .size
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("--size {:?} is neither a number nor 'auto'", a.size)))?;
        (s, s)
    };
    let n = raw.len();
    let n_train = ((a.split * n as f64).round() as usize).clamp(1, n.max(1));
    let prep = PrepConfig {
        target_width: w,
        target_height: h,
        split_train: n_train,
        split_val: n - n_train.min(n),
        shuffle_seed: a.seed,
    };
    prep.validate(gen_cfg.levels)?;
    let dataset = prepare_dataset(&raw, w, h, &a.data)?;
    dataset.require_non_empty("train")?;
    let (train_set, val_set) = split_dataset(&dataset, &prep)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        dataset_manifest: &a.data,
        dataset_manifest_sha256: file_sha256(&a.data)?,
        prep: &prep,
        train: &cfg,
        generator: &gen_cfg,
        discriminator: &disc_cfg,
        parallel_threads: par::num_threads(),
        started_unix: unix_now(),
    };
    let mpath = a.out.join("run_manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;

    let state = TrainState::new(gen_cfg, disc_cfg, a.seed)?;
    eprintln!(
        "training {} samples ({} val) at {w}x{h}, G {} / D {} params",
        train_set.len(),
        val_set.len(),
        state.gen.param_count(),
        state.disc.param_count()
    );
    let val = (!val_set.is_empty()).then_some(&val_set);
    let report = train(state, &cfg, &train_set, val, &a.out, |s| {
        let val = s
            .val
            .as_ref()
            .map(|r| format!(" val jaccard {:.4} dsc {:.4}", r.jaccard, r.dsc))
            .unwrap_or_default();
        eprintln!(
            "epoch {:3}  steps {}  d_loss {:.4}  g_loss {:.4}{val}",
            s.epoch, s.steps, s.mean_d_loss, s.mean_g_loss
        );
    })?;
    if let Some(last) = report.checkpoints.last() {
        println!("{}", last.display());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let Checkpoint { state, image_dims, .. } = checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data, image_dims.0, image_dims.1)?;
    let agg = match a.agg {
        AggArg::PerImage => Aggregation::PerImageMean,
        AggArg::Global => Aggregation::GlobalCounts,
    };
    let report = evaluate_dataset(&state.gen, &state.gen_cfg, &ds, a.threshold, agg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &a.json {
        report.write_json(p)?;
    }
    if let Some(p) = &a.csv {
        report.write_csv(p)?;
    }
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut out = Vec::new();
        for entry in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
            let p = entry.map_err(|e| Error::io(input, e))?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    } else {
        Ok(read_manifest(input)?.into_iter().map(|e| e.image_path).collect())
    }
}

/// `[1, H, W]` tensor in `[0, 1]` or `{0, 1}` to an 8-bit gray image.
fn unit_to_gray(t: &Tensor<f32>) -> Result<RawImage> {
    let (h, w) = (t.dim(1), t.dim(2));
    let data = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RawImage::new(w, h, 1, data)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let Checkpoint { state, image_dims: (tw, th), .. } = checkpoint::load(&a.ckpt)?;
    let inputs = list_images(&a.images)?;
    if inputs.is_empty() {
        return Err(Error::EmptyInput("predict: no input images"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for path in &inputs {
        let img = load_rgb(path)?;
        let x = normalize(&fit_to_dims(&img, tw, th));
        let x = x.reshape(vec![1, 3, th, tw])?;
        let y = generator_forward(&state.gen, &state.gen_cfg, &x, ForwardMode::Inference)?.reshape(vec![1, th, tw])?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let mask = unit_to_gray(&binarize_mask(&y, a.threshold))?;
        save_png(&fit_to_dims(&mask, img.width(), img.height()), &a.out.join(format!("{stem}.png")))?;
        if a.raw {
            let prob = unit_to_gray(&y.map(|v| (v + 1.0) / 2.0))?;
            save_png(&fit_to_dims(&prob, img.width(), img.height()), &a.out.join(format!("{stem}_prob.png")))?;
        }
    }
    println!("wrote {} masks to {}", inputs.len(), a.out.display());
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let (gen, cfg, (w, h)) = match &a.ckpt {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            (ck.state.gen, ck.state.gen_cfg, ck.image_dims)
        }
        None => {
            let cfg = GeneratorConfig {
                levels: a.levels,
                ..GeneratorConfig::with_filters(a.f)
            };
            cfg.validate()?;
            (crate::networks::init_generator(&cfg, 0), cfg, (a.size, a.size))
        }
    };
    let tmp;
    let ds = match &a.data {
        Some(p) => load_dataset(p, w, h)?,
        None => {
            if w != h {
                return Err(Error::InvalidConfig("synthetic bench data needs a square size".into()));
            }
            tmp = std::env::temp_dir().join(format!("cgan-seg-bench-{}", std::process::id()));
            let ds = generate_dataset(&SynthConfig::square(a.count, w, 0), &tmp);
            let _ = fs::remove_dir_all(&tmp);
            ds?
        }
    };
    let r = throughput(&gen, &cfg, &ds, a.repeats)?;
    println!(
        "fps {:.3}  frames {}  seconds {:.3}  f {}  levels {}  size {}x{}  threads {}  arch {}  os {}  cpus {}",
        r.fps,
        r.frames,
        r.seconds,
        cfg.base_filters,
        cfg.levels,
        w,
        h,
        par::num_threads(),
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    );
    Ok(())
}
