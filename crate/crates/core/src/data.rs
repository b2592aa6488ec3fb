//! Dataset preparation: loading, crop/pad to a common size, value
//! normalization, splitting, and seeded epoch iteration.
//!
//! No augmentation and no interpolation happen anywhere in this module:
//! images are only center-cropped or zero-padded.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};
use crate::types::{make_batch, read_manifest, Batch, Dataset, RawImage, SamplePair};

/// Tolerance on `[-1, 1]` accepted by [`denormalize`].
pub const DENORM_EPS: f64 = 1e-4;

/// Default binarization threshold for generator output (tanh 0.0).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub target_width: usize,
    pub target_height: usize,
    pub split_train: usize,
    pub split_val: usize,
    pub shuffle_seed: u64,
}

impl PrepConfig {
    /// Checks size divisibility for a generator with `levels` stride-2 stages.
    pub fn validate(&self, levels: usize) -> Result<()> {
        let m = 1usize << levels;
        if self.target_width == 0 || self.target_height == 0 {
            return Err(Error::InvalidConfig("target dims must be positive".into()));
        }
        if !self.target_width.is_multiple_of(m) || !self.target_height.is_multiple_of(m) {
            return Err(Error::InvalidConfig(format!(
                "target {}x{} not divisible by {m}",
                self.target_width, self.target_height
            )));
        }
        Ok(())
    }
}

/// Mean width and height, each rounded to the nearest integer (halves up).
pub fn compute_mean_dims<'a>(images: impl IntoIterator<Item = &'a RawImage>) -> Result<(usize, usize)> {
    let (mut n, mut sw, mut sh) = (0usize, 0usize, 0usize);
    for img in images {
        n += 1;
        sw += img.width();
        sh += img.height();
    }
    if n == 0 {
        return Err(Error::EmptyInput("compute_mean_dims"));
    }
    let round = |s: usize| (2 * s + n) / (2 * n);
    Ok((round(sw), round(sh)))
}

/// Nearest positive multiple of `m` (ties go up).
pub fn snap_to_multiple(v: usize, m: usize) -> usize {
    (((v + m / 2) / m).max(1)) * m
}

/// Center-crops or zero-pads each axis independently to `target_w × target_h`.
/// When the size difference is odd the extra pixel goes to the bottom/right.
pub fn fit_to_dims(img: &RawImage, target_w: usize, target_h: usize) -> RawImage {
    let c = img.channels();
    let mut out = RawImage::zeros(target_w, target_h, c);
    // For each axis: (source start, destination start, copy length).
    let axis = |src: usize, dst: usize| {
        if src >= dst {
            ((src - dst) / 2, 0, dst)
        } else {
            (0, (dst - src) / 2, src)
        }
    };
    let (sx, dx, lx) = axis(img.width(), target_w);
    let (sy, dy, ly) = axis(img.height(), target_h);
    let src = img.data();
    let dst = out.data_mut();
    for row in 0..ly {
        let s = ((sy + row) * img.width() + sx) * c;
        let d = ((dy + row) * target_w + dx) * c;
        dst[d..d + lx * c].copy_from_slice(&src[s..s + lx * c]);
    }
    out
}

/// Maps 8-bit values to `[-1, 1]` via `v / 127.5 - 1`, returning `[C, H, W]`.
pub fn normalize(img: &RawImage) -> Tensor<f32> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = vec![0f32; w * h * c];
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * w * h + i] = v as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![c, h, w], data).expect("consistent shape")
}

/// Inverse of [`normalize`]: `round((v + 1) * 127.5)` clamped to `[0, 255]`.
pub fn denormalize<T: Scalar>(t: &Tensor<T>) -> Result<RawImage> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::BadShape(format!("denormalize expects [C,H,W], got {:?}", t.shape())));
    };
    let mut data = vec![0u8; c * h * w];
    for (i, v) in t.data().iter().enumerate() {
        let v = v.to_f64_lossy();
        if !(-1.0 - DENORM_EPS..=1.0 + DENORM_EPS).contains(&v) {
            return Err(Error::OutOfRange { index: i, value: v });
        }
        let (ch, p) = (i / (h * w), i % (h * w));
        data[p * c + ch] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    }
    RawImage::new(w, h, c, data)
}

/// Pixel `p` becomes 1 when `(p + 1) / 2 >= threshold`, else 0.
pub fn binarize_mask<T: Scalar>(t: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let thr = T::from_f64_lossy(threshold);
    let two = T::from_f64_lossy(2.0);
    t.map(|p| if (p + T::one()) / two >= thr { T::one() } else { T::zero() })
}

/// Converts a decoded mask to single-channel `{0, 255}` by luminance
/// (0.299R + 0.587G + 0.114B) thresholded at 127.5.
pub fn binarize_mask_image(img: &RawImage) -> RawImage {
    let data = img
        .data()
        .chunks_exact(img.channels())
        .map(|px| {
            let lum = if px.len() == 3 {
                0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
            } else {
                px[0] as f64
            };
            if lum >= 127.5 {
                255
            } else {
                0
            }
        })
        .collect();
    RawImage::new(img.width(), img.height(), 1, data).expect("consistent shape")
}

/// Decodes a PNG or JPEG as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    RawImage::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())
}

/// Decodes a mask file (any color type) into a binary single-channel image.
pub fn load_mask(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let raw = match img.color().channel_count() {
        1 | 2 => {
            let l = img.to_luma8();
            RawImage::new(l.width() as usize, l.height() as usize, 1, l.into_raw())?
        }
        _ => {
            let rgb = img.to_rgb8();
            RawImage::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())?
        }
    };
    Ok(binarize_mask_image(&raw))
}

/// Writes a 1- or 3-channel image as PNG.
pub fn save_png(img: &RawImage, path: &Path) -> Result<()> {
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, img.data(), img.width() as u32, img.height() as u32, color).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

/// A loaded but not yet size-normalized sample.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: String,
    pub image: RawImage,
    pub mask: RawImage,
}

/// Loads every manifest entry (in parallel) without resizing.
pub fn load_raw_samples(manifest: &Path) -> Result<Vec<RawSample>> {
    let entries = read_manifest(manifest)?;
    par::map_slice(&entries, |e| -> Result<RawSample> {
        let image = load_rgb(&e.image_path)?;
        let mask = load_mask(&e.mask_path)?;
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(Error::MixedShapes(format!(
                "{}: image {}x{} vs mask {}x{}",
                e.id,
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(RawSample {
            id: e.id.clone(),
            image,
            mask,
        })
    })
    .into_iter()
    .collect()
}

/// Fits and normalizes one raw sample. Masks become `{-1, +1}`.
pub fn prepare_sample(raw: &RawSample, target_w: usize, target_h: usize) -> Result<SamplePair> {
    let image = normalize(&fit_to_dims(&raw.image, target_w, target_h));
    let mask = normalize(&fit_to_dims(&raw.mask, target_w, target_h));
    SamplePair::new(raw.id.clone(), image, mask)
}

/// Builds a [`Dataset`] from raw samples at the given working size.
pub fn prepare_dataset(
    raw: &[RawSample],
    target_w: usize,
    target_h: usize,
    manifest_path: impl Into<PathBuf>,
) -> Result<Dataset> {
    let samples: Result<Vec<_>> = par::map_slice(raw, |r| prepare_sample(r, target_w, target_h).map(Arc::new))
        .into_iter()
        .collect();
    Dataset::new(samples?, manifest_path)
}

/// Loads a manifest and prepares it at `target_w × target_h`.
pub fn load_dataset(manifest: &Path, target_w: usize, target_h: usize) -> Result<Dataset> {
    let raw = load_raw_samples(manifest)?;
    prepare_dataset(&raw, target_w, target_h, manifest)
}

/// Seeded shuffle, then the first `split_train` samples go to train and the
/// next `split_val` to validation. Each side keeps the original relative
/// order.
pub fn split_dataset(dataset: &Dataset, cfg: &PrepConfig) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    if cfg.split_train + cfg.split_val > n {
        return Err(Error::SplitTooLarge {
            train: cfg.split_train,
            val: cfg.split_val,
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.shuffle_seed));
    let mut train = order[..cfg.split_train].to_vec();
    let mut val = order[cfg.split_train..cfg.split_train + cfg.split_val].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// Sample visiting order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Iterator over the batches of one epoch; the final partial batch is kept.
pub struct EpochIter<'d> {
    dataset: &'d Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let pairs: Vec<&SamplePair> = self.order[self.pos..end]
            .iter()
            .map(|&i| self.dataset.samples()[i].as_ref())
            .collect();
        self.pos = end;
        Some(make_batch(&pairs))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

pub fn epoch_iterator(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<EpochIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    Ok(EpochIter {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, c: usize) -> RawImage {
        RawImage::new(w, h, c, (0..w * h * c).map(|v| (v % 251 + 1) as u8).collect()).unwrap()
    }

    fn toy_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                Arc::new(
                    SamplePair::new(
                        format!("s{i}"),
                        Tensor::full(vec![3, 2, 2], i as f32 / n as f32),
                        Tensor::full(vec![1, 2, 2], -1.0),
                    )
                    .unwrap(),
                )
            })
            .collect();
        Dataset::new(samples, "toy.tsv").unwrap()
    }

    #[test]
    fn mean_dims_examples() {
        let a = [RawImage::zeros(600, 500, 1), RawImage::zeros(400, 300, 1)];
        assert_eq!(compute_mean_dims(&a).unwrap(), (500, 400));
        let b: Vec<RawImage> = (0..3).map(|_| RawImage::zeros(256, 256, 3)).collect();
        assert_eq!(compute_mean_dims(&b).unwrap(), (256, 256));
        // (3 + 4 + 4) / 3 = 3.667 -> 4
        let c = [RawImage::zeros(3, 3, 1), RawImage::zeros(4, 4, 1), RawImage::zeros(4, 4, 1)];
        assert_eq!(compute_mean_dims(&c).unwrap(), (4, 4));
        assert!(matches!(compute_mean_dims(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_to_multiple(500, 256), 512);
        assert_eq!(snap_to_multiple(383, 256), 256);
        assert_eq!(snap_to_multiple(384, 256), 512);
        assert_eq!(snap_to_multiple(10, 256), 256);
    }

    #[test]
    fn fit_identity_crop_and_pad() {
        let big = img(256, 256, 3);
        assert_eq!(fit_to_dims(&big, 256, 256), big);

        let four = RawImage::new(4, 4, 1, (1..=16).collect()).unwrap();
        let cropped = fit_to_dims(&four, 2, 2);
        // rows 1..3, cols 1..3 of 1..=16
        assert_eq!(cropped.data(), &[6, 7, 10, 11]);

        let two = RawImage::new(2, 2, 1, vec![1, 2, 3, 4]).unwrap();
        let padded = fit_to_dims(&two, 4, 4);
        #[rustfmt::skip]
        assert_eq!(padded.data(), &[
            0, 0, 0, 0,
            0, 1, 2, 0,
            0, 3, 4, 0,
            0, 0, 0, 0,
        ]);
    }

    #[test]
    fn odd_differences_put_extra_pixel_bottom_right() {
        let one = RawImage::new(1, 1, 1, vec![9]).unwrap();
        let p = fit_to_dims(&one, 2, 2);
        assert_eq!(p.data(), &[9, 0, 0, 0]);
        let three = RawImage::new(3, 1, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(fit_to_dims(&three, 2, 1).data(), &[1, 2]);
    }

    #[test]
    fn normalize_examples() {
        let px = RawImage::new(3, 1, 1, vec![0, 255, 128]).unwrap();
        let t = normalize(&px);
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] as f64 - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((t.data()[2] - 0.003_921_6).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_channel_first() {
        let px = RawImage::new(2, 1, 3, vec![0, 255, 0, 255, 0, 255]).unwrap();
        let t = normalize(&px);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn denormalize_range_errors() {
        let t = Tensor::new(vec![1, 1, 2], vec![-1.0f32, 1.0]).unwrap();
        assert_eq!(denormalize(&t).unwrap().data(), &[0, 255]);
        let bad = Tensor::new(vec![1, 1, 1], vec![1.001f32]).unwrap();
        assert!(matches!(denormalize(&bad), Err(Error::OutOfRange { .. })));
        let ok = Tensor::new(vec![1, 1, 1], vec![1.000_05f32]).unwrap();
        assert_eq!(denormalize(&ok).unwrap().data(), &[255]);
    }

    #[test]
    fn binarize_examples() {
        let neg = Tensor::full(vec![1, 2, 2], -1.0f32);
        assert!(binarize_mask(&neg, 0.5).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::full(vec![1, 2, 2], 1.0f32);
        assert!(binarize_mask(&pos, 0.5).data().iter().all(|&v| v == 1.0));
        let mid = Tensor::full(vec![1, 1, 1], 0.0f32);
        assert_eq!(binarize_mask(&mid, 0.5).data(), &[1.0]);
    }

    #[test]
    fn rgb_masks_use_luminance() {
        // pure red: 0.299*255 = 76 -> background; white -> foreground
        let m = RawImage::new(2, 1, 3, vec![255, 0, 0, 255, 255, 255]).unwrap();
        assert_eq!(binarize_mask_image(&m).data(), &[0, 255]);
    }

    #[test]
    fn split_examples() {
        let ds = toy_dataset(1000);
        let cfg = PrepConfig {
            target_width: 256,
            target_height: 256,
            split_train: 800,
            split_val: 200,
            shuffle_seed: 3,
        };
        let (tr, va) = split_dataset(&ds, &cfg).unwrap();
        assert_eq!((tr.len(), va.len()), (800, 200));
        let ids: std::collections::HashSet<_> = tr.samples().iter().map(|s| s.id.clone()).collect();
        assert!(va.samples().iter().all(|s| !ids.contains(&s.id)));
        let (tr2, _) = split_dataset(&ds, &cfg).unwrap();
        let a: Vec<_> = tr.samples().iter().map(|s| &s.id).collect();
        let b: Vec<_> = tr2.samples().iter().map(|s| &s.id).collect();
        assert_eq!(a, b);

        let small = toy_dataset(10);
        let all = PrepConfig {
            split_train: 10,
            split_val: 0,
            ..cfg.clone()
        };
        let (tr, va) = split_dataset(&small, &all).unwrap();
        assert_eq!((tr.len(), va.len()), (10, 0));
        let too_many = PrepConfig {
            split_train: 10,
            split_val: 1,
            ..cfg
        };
        assert!(matches!(split_dataset(&small, &too_many), Err(Error::SplitTooLarge { .. })));
    }

    #[test]
    fn epoch_batches() {
        let ds = toy_dataset(10);
        let sizes: Vec<usize> = epoch_iterator(&ds, 4, 1, 0).unwrap().map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let four = toy_dataset(4);
        assert_eq!(epoch_iterator(&four, 4, 1, 0).unwrap().count(), 1);
        let ids = |e| -> Vec<String> {
            epoch_iterator(&ds, 4, 9, e).unwrap().flat_map(|b| b.unwrap().ids).collect()
        };
        assert_eq!(ids(2), ids(2));
        assert_ne!(ids(2), ids(3));
        assert!(epoch_iterator(&ds, 0, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn fit_always_hits_target_and_pads_with_zero(
            w in 1usize..20, h in 1usize..20, tw in 1usize..20, th in 1usize..20, c in prop::sample::select(vec![1usize, 3])
        ) {
            let src = img(w, h, c);
            let out = fit_to_dims(&src, tw, th);
            prop_assert_eq!((out.width(), out.height()), (tw, th));
            // source values are all >= 1, so zeros are exactly the padded area
            let zeros = out.data().iter().filter(|&&v| v == 0).count();
            let kept = w.min(tw) * h.min(th) * c;
            prop_assert_eq!(zeros, tw * th * c - kept);
        }

        #[test]
        fn normalize_round_trips(data in prop::collection::vec(any::<u8>(), 12)) {
            let im = RawImage::new(2, 2, 3, data).unwrap();
            let t = normalize(&im);
            prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(denormalize(&t).unwrap(), im);
        }

        #[test]
        fn epochs_visit_each_sample_once(n in 1usize..30, bs in 1usize..8, epochs in 1u64..4, seed in any::<u64>()) {
            let ds = toy_dataset(n);
            let mut counts = vec![0usize; n];
            for e in 0..epochs {
                for b in epoch_iterator(&ds, bs, seed, e).unwrap() {
                    for id in b.unwrap().ids {
                        counts[id[1..].parse::<usize>().unwrap()] += 1;
                    }
                }
            }
            prop_assert!(counts.iter().all(|&c| c as u64 == epochs));
        }
    }
}
