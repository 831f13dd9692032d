//! Segmentation and proposal metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::masks::MaskSet;

/// Label value for pixels that take no part in evaluation or training.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids on an `H×W` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(dim_err("label map", &[height, width], &[labels.len()]));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Distinct non-ignore labels in ascending order.
    pub fn present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..255u8).filter(|&l| seen[l as usize]).collect()
    }

    fn check_same(&self, other: &SegLabelMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(dim_err(
                "label maps",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

/// Pixel confusion counts, `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds one image. Ignore pixels in the ground truth are skipped; a
    /// prediction outside the class range is a contract error.
    pub fn add(&mut self, pred: &SegLabelMap, gt: &SegLabelMap) -> Result<()> {
        pred.check_same(gt)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(crate::error::contract(alloc::format!(
                    "label {} outside {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn valid_pixels(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both sides.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..n).map(|p| self.count(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.count(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Pixel accuracy; `None` when every pixel was ignored.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let valid = self.valid_pixels();
        let tp: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        (valid > 0).then(|| tp as f64 / valid as f64)
    }
}

/// IoU per class and pixel accuracy for a single prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct IouSummary {
    pub iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    /// Set when no valid pixel existed; every value is then empty or zero.
    pub empty: bool,
}

pub fn confusion_and_iou(
    pred: &SegLabelMap,
    gt: &SegLabelMap,
    classes: usize,
) -> Result<IouSummary> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    let acc = c.pixel_accuracy();
    Ok(IouSummary {
        iou: c.iou(),
        pixel_accuracy: acc.unwrap_or(0.0),
        empty: acc.is_none(),
    })
}

/// Mean of the defined entries among `classes`; `None` if none is defined.
pub fn mean_iou(iou: &[Option<f64>], classes: impl IntoIterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = classes
        .into_iter()
        .filter_map(|c| iou.get(c).copied().flatten())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Harmonic mean of seen and unseen mIoU; zero when both are zero.
pub fn hiou(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// IoU of two binary maps given as slices of 0/1 values.
pub fn binary_iou(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Proposal recall at an IoU threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub hits: usize,
    pub total: usize,
}

impl Recall {
    /// Fraction of ground-truth segments hit; `1.0` when there were none.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    /// True when the recall was defined by convention (no segments).
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn merge(self, other: Recall) -> Recall {
        Recall {
            hits: self.hits + other.hits,
            total: self.total + other.total,
        }
    }
}

/// Counts ground-truth segments whose best-IoU proposal reaches `threshold`.
/// Proposals are binarised at 0.5; empty ground-truth masks are skipped
/// (padding), and a proposal may serve several segments.
pub fn recall_at_iou(proposals: &MaskSet, gt: &MaskSet, threshold: f64) -> Result<Recall> {
    if proposals.height() != gt.height() || proposals.width() != gt.width() {
        return Err(dim_err(
            "recall_at_iou",
            &[proposals.height(), proposals.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let mut r = Recall { hits: 0, total: 0 };
    for g in 0..gt.count() {
        let gm = gt.mask(g);
        if gm.iter().all(|&v| v < 0.5) {
            continue;
        }
        r.total += 1;
        let best = (0..proposals.count())
            .map(|p| binary_iou(proposals.mask(p), gm))
            .fold(0.0, f64::max);
        if best >= threshold {
            r.hits += 1;
        }
    }
    Ok(r)
}

/// Recall of proposals at one IoU threshold, overall and split by whether
/// the ground-truth segment's class was seen in training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallEntry {
    pub threshold: f64,
    pub all: Recall,
    pub seen: Recall,
    pub unseen: Recall,
}

/// Summary of a validation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub seen: Vec<bool>,
    pub images: usize,
    pub pixel_accuracy: f64,
    pub iou: Vec<Option<f64>>,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub hiou: f64,
    pub recall: Vec<RecallEntry>,
    /// Set when no pixel was evaluated.
    pub empty: bool,
}

impl EvalReport {
    pub fn new(
        class_names: Vec<String>,
        seen: Vec<bool>,
        images: usize,
        confusion: &Confusion,
        recall: Vec<RecallEntry>,
    ) -> Self {
        let iou = confusion.iou();
        let classes = seen.len();
        let miou_seen = mean_iou(&iou, (0..classes).filter(|&c| seen[c])).unwrap_or(0.0);
        let miou_unseen = mean_iou(&iou, (0..classes).filter(|&c| !seen[c])).unwrap_or(0.0);
        let acc = confusion.pixel_accuracy();
        Self {
            class_names,
            seen,
            images,
            pixel_accuracy: acc.unwrap_or(0.0),
            iou,
            miou_seen,
            miou_unseen,
            hiou: hiou(miou_seen, miou_unseen),
            recall,
            empty: acc.is_none(),
        }
    }

    pub fn recall_at(&self, threshold: f64) -> Option<&RecallEntry> {
        self.recall
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
    }
}
