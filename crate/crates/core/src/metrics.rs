//! Dice coefficient and Hausdorff distance on binary masks, plus dataset
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::spectral::Image;

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice_coefficient(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let inter = pred.intersection_count(gt)?;
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HausdorffDistance {
    pub distance: f64,
    /// Set when either mask was empty; `distance` is then the frame diagonal.
    pub degenerate: bool,
}

/// For each foreground pixel of `from`, the distance to the nearest
/// foreground pixel of `to`. Nearest points from outside `to` always lie on
/// its boundary, so only boundary pixels are scanned.
fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let edge: Vec<(usize, usize)> = to.boundary().points().collect();
    from.points()
        .map(|(y, x)| {
            if to.get(y, x) {
                return 0.0;
            }
            edge.iter()
                .map(|&(by, bx)| {
                    let dy = y as f64 - by as f64;
                    let dx = x as f64 - bx as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn diagonal(m: &BinaryMask) -> f64 {
    ((m.height() * m.height() + m.width() * m.width()) as f64).sqrt()
}

fn degenerate_check(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<HausdorffDistance>> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            "hausdorff",
            format!(
                "{}x{} vs {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    if pred.is_empty() || gt.is_empty() {
        return Ok(Some(HausdorffDistance {
            distance: diagonal(gt),
            degenerate: true,
        }));
    }
    Ok(None)
}

/// Exact symmetric Hausdorff distance between foreground pixel centres.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<HausdorffDistance> {
    if let Some(d) = degenerate_check(pred, gt)? {
        return Ok(d);
    }
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(HausdorffDistance {
        distance: max(directed_distances(pred, gt)).max(max(directed_distances(gt, pred))),
        degenerate: false,
    })
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = 0.95 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Larger of the two directed 95th-percentile distances.
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask) -> Result<HausdorffDistance> {
    if let Some(d) = degenerate_check(pred, gt)? {
        return Ok(d);
    }
    Ok(HausdorffDistance {
        distance: percentile95(directed_distances(pred, gt)).max(percentile95(directed_distances(gt, pred))),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HausdorffKind {
    #[default]
    Exact,
    Percentile95,
}

/// Anything that maps an image to one binary mask per class.
pub trait Segmenter {
    fn predict(&self, image: &Image) -> Result<Vec<BinaryMask>>;

    /// Batched prediction; the default predicts one image at a time.
    fn predict_batch(&self, images: &[&Image]) -> Result<Vec<Vec<BinaryMask>>> {
        images.iter().map(|img| self.predict(img)).collect()
    }
}

impl<F> Segmenter for F
where
    F: Fn(&Image) -> Result<Vec<BinaryMask>>,
{
    fn predict(&self, image: &Image) -> Result<Vec<BinaryMask>> {
        self(image)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and sample standard deviation (`n − 1` denominator; 0 for n ≤ 1).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: u32,
    pub dice: Vec<f64>,
    pub hd: Vec<f64>,
    pub hd_degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_dice: Vec<MeanStd>,
    pub per_class_hd: Vec<MeanStd>,
    /// Class-averaged Dice per sample, summarised over samples.
    pub dice: MeanStd,
    pub hd: MeanStd,
    pub samples: Vec<SampleScores>,
}

pub fn evaluate(model: &impl Segmenter, samples: &[Sample], kind: HausdorffKind) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = model.predict_batch(&images)?;
    let classes = samples[0].label.num_classes();
    let mut scores = Vec::with_capacity(samples.len());
    for (sample, pred) in samples.iter().zip(preds) {
        if pred.len() != sample.label.num_classes() {
            return Err(Error::shape(
                "evaluate",
                format!("{} predicted classes, label has {}", pred.len(), sample.label.num_classes()),
            ));
        }
        let mut s = SampleScores {
            sample_id: sample.sample_id,
            dice: Vec::with_capacity(classes),
            hd: Vec::with_capacity(classes),
            hd_degenerate: Vec::with_capacity(classes),
        };
        for (p, g) in pred.iter().zip(sample.label.masks()) {
            s.dice.push(dice_coefficient(p, g)?);
            let hd = match kind {
                HausdorffKind::Exact => hausdorff(p, g)?,
                HausdorffKind::Percentile95 => hausdorff95(p, g)?,
            };
            s.hd.push(hd.distance);
            s.hd_degenerate.push(hd.degenerate);
        }
        scores.push(s);
    }
    let column = |f: &dyn Fn(&SampleScores) -> f64| MeanStd::of(&scores.iter().map(f).collect::<Vec<_>>());
    let per_class_dice = (0..classes).map(|c| column(&|s| s.dice[c])).collect();
    let per_class_hd = (0..classes).map(|c| column(&|s| s.hd[c])).collect();
    let dice = column(&|s| s.dice.iter().sum::<f64>() / classes as f64);
    let hd = column(&|s| s.hd.iter().sum::<f64>() / classes as f64);
    Ok(EvalReport {
        per_class_dice,
        per_class_hd,
        dice,
        hd,
        samples: scores,
    })
}
