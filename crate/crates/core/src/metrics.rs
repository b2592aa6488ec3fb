//! Pixel-level segmentation metrics and dataset evaluation.
//!
//! Empty denominators score 1.0 (nothing to be wrong about), except F-beta
//! which is 0 when both precision and recall are 0.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::binarize_mask;
use crate::error::{Error, Result};
use crate::networks::{generator_forward, ForwardMode, GeneratorConfig, GeneratorParams};
use crate::par;
use crate::tensor::{Scalar, Tensor};
use crate::types::{make_batch, Dataset};

/// Images per inference batch during evaluation.
pub const EVAL_BATCH: usize = 4;

/// Per-pixel agreement counts; positive means mask foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn f2(&self) -> f64 {
        f_beta(self.precision(), self.recall(), 2.0)
    }

    pub fn values(&self) -> MetricValues {
        MetricValues {
            jaccard: self.jaccard(),
            dsc: self.dsc(),
            recall: self.recall(),
            precision: self.precision(),
            accuracy: self.accuracy(),
            f2: self.f2(),
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts agreement between two binary masks of identical shape.
pub fn confusion<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::MixedShapes(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let bit = |v: T, i: usize| -> Result<bool> {
        if v == T::one() {
            Ok(true)
        } else if v == T::zero() {
            Ok(false)
        } else {
            Err(Error::NonBinary {
                index: i,
                value: v.to_f64_lossy(),
            })
        }
    };
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        match (bit(p, i)?, bit(g, i)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn jaccard(c: &ConfusionCounts) -> f64 {
    c.jaccard()
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    c.dsc()
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    c.accuracy()
}

/// `(1 + β²)·P·R / (β²·P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub jaccard: f64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
}

/// How per-image results are combined into one report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metrics computed per image, then averaged.
    #[default]
    PerImageMean,
    /// Metrics computed once from confusion counts summed over images.
    GlobalCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jaccard: f64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
    pub n_images: usize,
    pub aggregation: Aggregation,
}

impl MetricReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            jaccard: self.jaccard,
            dsc: self.dsc,
            recall: self.recall,
            precision: self.precision,
            accuracy: self.accuracy,
            f2: self.f2,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Header line plus one data row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Combines per-image counts under the chosen aggregation.
pub fn aggregate(counts: &[ConfusionCounts], aggregation: Aggregation) -> Result<MetricReport> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    let v = match aggregation {
        Aggregation::GlobalCounts => counts.iter().copied().fold(ConfusionCounts::default(), |a, b| a + b).values(),
        Aggregation::PerImageMean => {
            let n = counts.len() as f64;
            let per: Vec<MetricValues> = counts.iter().map(ConfusionCounts::values).collect();
            let mean = |f: fn(&MetricValues) -> f64| per.iter().map(f).sum::<f64>() / n;
            MetricValues {
                jaccard: mean(|m| m.jaccard),
                dsc: mean(|m| m.dsc),
                recall: mean(|m| m.recall),
                precision: mean(|m| m.precision),
                accuracy: mean(|m| m.accuracy),
                f2: mean(|m| m.f2),
            }
        }
    };
    Ok(MetricReport {
        jaccard: v.jaccard,
        dsc: v.dsc,
        recall: v.recall,
        precision: v.precision,
        accuracy: v.accuracy,
        f2: v.f2,
        n_images: counts.len(),
        aggregation,
    })
}

/// Inference masks for every sample, in dataset order, as `[1, H, W]`
/// tensors in `(-1, 1)`.
pub fn predict_dataset(
    params: &GeneratorParams<f32>,
    cfg: &GeneratorConfig,
    dataset: &Dataset,
) -> Result<Vec<Tensor<f32>>> {
    dataset.require_non_empty("predict_dataset")?;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(EVAL_BATCH) {
        let batch = make_batch(chunk)?;
        let y = generator_forward(params, cfg, &batch.images, ForwardMode::Inference)?;
        out.extend(y.unstack());
    }
    Ok(out)
}

/// Per-image confusion counts of binarized generator output against ground truth.
pub fn evaluate_counts(
    params: &GeneratorParams<f32>,
    cfg: &GeneratorConfig,
    dataset: &Dataset,
    threshold: f64,
) -> Result<Vec<ConfusionCounts>> {
    let preds = predict_dataset(params, cfg, dataset)?;
    let pairs: Vec<_> = preds.iter().zip(dataset.samples()).collect();
    par::map_slice(&pairs, |(p, s)| {
        confusion(&binarize_mask(*p, threshold), &binarize_mask(&s.mask, 0.5))
    })
    .into_iter()
    .collect()
}

/// Runs the generator in inference mode over `dataset` and scores it.
pub fn evaluate_dataset(
    params: &GeneratorParams<f32>,
    cfg: &GeneratorConfig,
    dataset: &Dataset,
    threshold: f64,
    aggregation: Aggregation,
) -> Result<MetricReport> {
    aggregate(&evaluate_counts(params, cfg, dataset, threshold)?, aggregation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Frames timed (warm-up excluded).
    pub frames: usize,
    pub seconds: f64,
    pub fps: f64,
}

/// Inference frames per second over `repeats` passes of `dataset`, after one
/// untimed warm-up pass.
pub fn throughput(
    params: &GeneratorParams<f32>,
    cfg: &GeneratorConfig,
    dataset: &Dataset,
    repeats: usize,
) -> Result<ThroughputReport> {
    dataset.require_non_empty("throughput")?;
    predict_dataset(params, cfg, dataset)?;
    let start = Instant::now();
    let mut frames = 0;
    for _ in 0..repeats {
        frames += predict_dataset(params, cfg, dataset)?.len();
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(ThroughputReport {
        frames,
        seconds,
        fps: if seconds > 0.0 { frames as f64 / seconds } else { f64::INFINITY },
    })
}
