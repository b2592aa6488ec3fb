//! Deterministic synthetic "ellipse polyp" dataset.
//!
//! Every sample is a function of `(seed, index)` only: the generator for
//! sample `i` is a ChaCha stream keyed by the seed with stream id `i`, so
//! samples can be produced in any order or in parallel.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, save_png};
use crate::error::{Error, Result};
use crate::par;
use crate::types::{write_manifest, Dataset, RawImage};

/// Manifest file name written by [`generate_dataset`].
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Smallest semi-axis, pixels.
    pub min_axes: f64,
    /// Largest semi-axis, pixels.
    pub max_axes: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Square images of side `size` with axes scaled to the image.
    pub fn square(count: usize, size: usize, seed: u64) -> Self {
        Self {
            count,
            width: size,
            height: size,
            min_axes: (size as f64 / 10.0).max(1.0),
            max_axes: (size as f64 / 4.0).max(1.0),
            noise_level: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.width.min(self.height) as f64 / 2.0;
        if !(self.min_axes > 0.0 && self.min_axes <= self.max_axes && self.max_axes < half) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < min_axes ({}) <= max_axes ({}) < {half}",
                self.min_axes, self.max_axes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::InvalidConfig(format!(
                "noise_level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel coordinates; pixel `(x, y)` is sampled at its
/// center `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Horizontal span `[x0, x1)` of pixels covered on row `y`.
    fn row_span(&self, y: usize, width: usize) -> (usize, usize) {
        let (s, c) = self.angle.sin_cos();
        let (ia2, ib2) = (1.0 / (self.semi_a * self.semi_a), 1.0 / (self.semi_b * self.semi_b));
        let dy = y as f64 + 0.5 - self.cy;
        // u = dx c + dy s, v = -dx s + dy c;  u²/a² + v²/b² <= 1 as a quadratic in dx
        let qa = c * c * ia2 + s * s * ib2;
        let qb = 2.0 * dy * c * s * (ia2 - ib2);
        let qc = dy * dy * (s * s * ia2 + c * c * ib2) - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return (0, 0);
        }
        let root = disc.sqrt();
        let lo = self.cx + (-qb - root) / (2.0 * qa);
        let hi = self.cx + (-qb + root) / (2.0 * qa);
        // pixel x is inside when lo <= x + 0.5 <= hi
        let x0 = (lo - 0.5).ceil().max(0.0);
        let x1 = ((hi - 0.5).floor() + 1.0).min(width as f64);
        if x1 <= x0 {
            (0, 0)
        } else {
            (x0 as usize, x1 as usize)
        }
    }

    /// Rasterizes into a `{0, 255}` single-channel mask.
    pub fn render_mask(&self, width: usize, height: usize) -> RawImage {
        let mut m = RawImage::zeros(width, height, 1);
        let d = m.data_mut();
        for y in 0..height {
            let (x0, x1) = self.row_span(y, width);
            d[y * width + x0..y * width + x1].fill(255);
        }
        m
    }
}

/// The ellipse used for sample `index`.
pub fn sample_ellipse(cfg: &SynthConfig, index: usize) -> Ellipse {
    let mut rng = sample_rng(cfg, index);
    draw_ellipse(cfg, &mut rng)
}

fn sample_rng(cfg: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_ellipse(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Ellipse {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut a = rng.random_range(cfg.min_axes..=cfg.max_axes);
    let mut b = rng.random_range(cfg.min_axes..=cfg.max_axes);
    let angle = rng.random_range(0.0..PI);
    // keep the foreground under half the image
    let limit = 0.45 * w * h;
    if PI * a * b > limit {
        let k = (limit / (PI * a * b)).sqrt();
        a *= k;
        b *= k;
    }
    let r = a.max(b);
    let pick = |rng: &mut ChaCha8Rng, extent: f64| {
        let lo = r.floor();
        let hi = (extent - r).ceil() - 1.0;
        if hi <= lo {
            (extent / 2.0).floor() + 0.5
        } else {
            rng.random_range(lo..=hi).floor() + 0.5
        }
    };
    let cx = pick(rng, w);
    let cy = pick(rng, h);
    Ellipse {
        cx,
        cy,
        semi_a: a,
        semi_b: b,
        angle,
    }
}

// Smooth value noise on a coarse lattice, values in [0, 1].
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        Self { cells, lattice }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let (fx, fy) = (u * n as f64, v * n as f64);
        let (ix, iy) = ((fx.floor() as usize).min(n - 1), (fy.floor() as usize).min(n - 1));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let g = |x: usize, y: usize| self.lattice[y * (n + 1) + x];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Image and mask for sample `index`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> (RawImage, RawImage) {
    let mut rng = sample_rng(cfg, index);
    let ellipse = draw_ellipse(cfg, &mut rng);
    let mask = ellipse.render_mask(cfg.width, cfg.height);
    let background = ValueNoise::new(&mut rng, 4);
    let shading = ValueNoise::new(&mut rng, 2);
    let (w, h) = (cfg.width, cfg.height);
    let mut img = RawImage::zeros(w, h, 3);
    let bg_color = [190.0, 85.0, 75.0];
    let fg_color = [235.0, 200.0, 120.0];
    let amp = cfg.noise_level * 60.0;
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let inside = mask.data()[y * w + x] != 0;
            let (base, k) = if inside {
                (&fg_color, 0.85 + 0.3 * shading.at(u, v))
            } else {
                (&bg_color, 0.55 + 0.6 * background.at(u, v))
            };
            for ch in 0..3 {
                let jitter = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                data[(y * w + x) * 3 + ch] = (base[ch] * k + jitter).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (img, mask)
}

/// Writes `cfg.count` image/mask PNG pairs and a manifest under `out_dir`,
/// then loads them back at the generated size.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rows: Result<Vec<_>> = par::map_indices(cfg.count, |i| {
        let (img, mask) = generate_sample(cfg, i);
        let id = format!("synth_{i:05}");
        let img_rel = format!("images/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        save_png(&img, &out_dir.join(&img_rel))?;
        save_png(&mask, &out_dir.join(&mask_rel))?;
        Ok((id, img_rel, mask_rel))
    })
    .into_iter()
    .collect();
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &rows?)?;
    load_dataset(&manifest, cfg.width, cfg.height)
}
