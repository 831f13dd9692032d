use alloc::vec::Vec;

use crate::error::Result;
use crate::masks::MaskSet;
use crate::metrics::{recall_at_iou, Confusion, EvalReport, Recall, RecallEntry};
use crate::numcore::ParamStore;
use crate::proposals::{label_segments, oracle_masks};
use crate::synth::Sample;

use super::config::MaskSource;
use super::model::{DeopModel, PreparedMasks};

/// Recall thresholds reported by [`evaluate`].
pub const RECALL_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// Masks for each sample from the configured source.
pub fn mask_sets(
    model: &DeopModel,
    store: &ParamStore,
    samples: &[Sample],
    source: MaskSource,
    seed: u64,
) -> Result<Vec<PreparedMasks>> {
    let n = model.proposals.cfg.queries;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let set = match source {
                MaskSource::Learned => model.proposals.propose(store, &s.image())?,
                MaskSource::Oracle { jitter } => {
                    oracle_masks(&s.labels, jitter, n, seed.wrapping_add(i as u64))?
                }
            };
            Ok(model.prepare(set))
        })
        .collect()
}

/// Proposal recall on one image, split by whether segments are seen.
fn image_recall(
    set: &MaskSet,
    sample: &Sample,
    seen: &[bool],
    threshold: f64,
) -> Result<(Recall, Recall)> {
    let (gt, classes) = label_segments(&sample.labels)?;
    let size = sample.labels.height();
    let props = set.resample(size, size);
    let pick = |want: bool| -> Result<Recall> {
        let idx: Vec<usize> = (0..classes.len())
            .filter(|&k| seen[classes[k] as usize] == want)
            .collect();
        if idx.is_empty() {
            return Ok(Recall { hits: 0, total: 0 });
        }
        recall_at_iou(&props, &gt.select(&idx)?, threshold)
    };
    Ok((pick(true)?, pick(false)?))
}

/// Runs the classifier over `samples` and scores it against their labels.
pub fn evaluate(
    model: &DeopModel,
    store: &ParamStore,
    samples: &[Sample],
    masks: &[PreparedMasks],
) -> Result<EvalReport> {
    let classes = model.classes.len();
    let seen: Vec<bool> = (0..classes).map(|c| model.classes.is_seen(c)).collect();
    let mut confusion = Confusion::new(classes);
    let zero = Recall { hits: 0, total: 0 };
    let mut recall: Vec<RecallEntry> = RECALL_THRESHOLDS
        .iter()
        .map(|&threshold| RecallEntry {
            threshold,
            all: zero,
            seen: zero,
            unseen: zero,
        })
        .collect();
    for (s, m) in samples.iter().zip(masks) {
        let pred = model.predict(store, &s.image(), m)?;
        confusion.add(&pred.labels, &s.labels)?;
        for r in &mut recall {
            let (a, b) = image_recall(&m.set, s, &seen, r.threshold)?;
            r.seen = r.seen.merge(a);
            r.unseen = r.unseen.merge(b);
            r.all = r.all.merge(a).merge(b);
        }
    }
    Ok(EvalReport::new(
        model.classes.names().to_vec(),
        seen,
        samples.len(),
        &confusion,
        recall,
    ))
}
