//! Shared domain types: raw images, sample pairs, datasets, batches, and the
//! tab-separated dataset manifest.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit image as decoded from disk, row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::BadShape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::BadShape(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0; width * height * channels])
            .expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// One image and its ground-truth mask, both normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl SamplePair {
    /// `image` must be `[3, H, W]` and `mask` `[1, H, W]`, all values in `[-1, 1]`.
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        match (image.shape(), mask.shape()) {
            (&[3, h, w], &[1, mh, mw]) if h == mh && w == mw => {}
            (a, b) => {
                return Err(Error::MixedShapes(format!(
                    "expected image [3,H,W] and mask [1,H,W], got {a:?} and {b:?}"
                )))
            }
        }
        for t in [&image, &mask] {
            if let Some((index, &value)) =
                t.data().iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v))
            {
                return Err(Error::OutOfRange {
                    index,
                    value: value as f64,
                });
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    /// `(height, width)`.
    pub fn hw(&self) -> (usize, usize) {
        (self.image.dim(1), self.image.dim(2))
    }
}

/// An ordered, id-unique collection of shared sample pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Arc<SamplePair>>,
    manifest_path: PathBuf,
}

impl Dataset {
    pub fn new(samples: Vec<Arc<SamplePair>>, manifest_path: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Self {
            samples,
            manifest_path: manifest_path.into(),
        })
    }

    pub fn samples(&self) -> &[Arc<SamplePair>] {
        &self.samples
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub(crate) fn require_non_empty(&self, what: &'static str) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::EmptyInput(what))
        } else {
            Ok(())
        }
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| Arc::clone(&self.samples[i])).collect(),
            manifest_path: self.manifest_path.clone(),
        }
    }
}

/// Stacked images `[B, 3, H, W]`, masks `[B, 1, H, W]`, and their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Inverse of [`make_batch`].
    pub fn split(&self) -> Vec<SamplePair> {
        self.images
            .unstack()
            .into_iter()
            .zip(self.masks.unstack())
            .zip(&self.ids)
            .map(|((image, mask), id)| SamplePair {
                id: id.clone(),
                image,
                mask,
            })
            .collect()
    }
}

/// Stacks pairs along a new leading batch axis, preserving order.
pub fn make_batch<P: AsRef<SamplePair>>(pairs: &[P]) -> Result<Batch> {
    let first = pairs.first().ok_or(Error::EmptyInput("make_batch"))?.as_ref();
    let hw = first.hw();
    if let Some(p) = pairs.iter().map(AsRef::as_ref).find(|p| p.hw() != hw) {
        return Err(Error::MixedShapes(format!(
            "sample {:?} is {:?}, expected {:?}",
            p.id,
            p.hw(),
            hw
        )));
    }
    let images: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.as_ref().image).collect();
    let masks: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.as_ref().mask).collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        masks: Tensor::stack(&masks)?,
        ids: pairs.iter().map(|p| p.as_ref().id.clone()).collect(),
    })
}

impl AsRef<SamplePair> for SamplePair {
    fn as_ref(&self) -> &SamplePair {
        self
    }
}

/// One manifest line with paths resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Parses `id<TAB>image_path<TAB>mask_path` lines. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let [id, img, mask] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate id {id:?}")));
        }
        out.push(ManifestEntry {
            id: id.to_string(),
            image_path: base.join(img),
            mask_path: base.join(mask),
        });
    }
    Ok(out)
}

/// Writes manifest lines; `rows` hold `(id, image, mask)` paths relative to
/// the manifest's directory.
pub fn write_manifest(path: &Path, rows: &[(String, String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, img, mask) in rows {
        writeln!(f, "{id}\t{img}\t{mask}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
