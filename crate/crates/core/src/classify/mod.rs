//! Zero-shot segment classification: pooling, cosine classification against
//! class embeddings, and per-pixel prediction assembly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::losses::{dice_focal, LossConfig};
use crate::metrics::{SegLabelMap, IGNORE};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::synth::name_seed;

/// Lower bound on the pooling denominator.
pub const POOL_EPS: f64 = 1e-6;

/// Fixed base embedding per class plus learnable offsets for seen classes.
#[derive(Clone, Debug)]
pub struct ClassEmbeddingTable {
    names: Vec<String>,
    seen: Vec<bool>,
    pub base: ParamId,
    /// One row per seen class, in class order.
    pub offsets: ParamId,
    offset_row: Vec<Option<usize>>,
    dim: usize,
}

/// Bag-of-words text embedding: one Gaussian vector per `_`-separated
/// word of the class name, seeded by the word, summed and normalised.
/// Names sharing a word share a component, which is what lets
/// seen-class training transfer to unseen names.
pub fn base_embedding(name: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for word in name.split('_').filter(|w| !w.is_empty()) {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(word));
        let w = Tensor::randn([dim], 1.0, &mut rng);
        v.iter_mut().zip(w.data()).for_each(|(a, b)| *a += b);
    }
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.into_iter().map(|x| x / norm).collect()
}

impl ClassEmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        names: &[String],
        seen: &[bool],
        dim: usize,
    ) -> Result<Self> {
        if names.len() != seen.len() || names.is_empty() {
            return Err(Error::Config(
                "class names and seen flags must be non-empty and aligned".into(),
            ));
        }
        let mut base = Vec::with_capacity(names.len() * dim);
        for n in names {
            base.extend(base_embedding(n, dim));
        }
        let base = store.add("classes.base", Tensor::new([names.len(), dim], base)?);
        let mut offset_row = Vec::with_capacity(seen.len());
        let mut k = 0;
        for &s in seen {
            offset_row.push(s.then(|| {
                k += 1;
                k - 1
            }));
        }
        let offsets = store.add("classes.offsets", Tensor::zeros([k.max(1), dim]));
        Ok(Self {
            names: names.to_vec(),
            seen: seen.to_vec(),
            base,
            offsets,
            offset_row,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen[class]
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.seen[c]).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Effective embeddings `base + offset` of `classes`, `[k × d]`.
    /// Unseen classes have no offset row and contribute their base only.
    pub fn embeddings(&self, g: &mut Graph<'_>, classes: &[usize]) -> Result<Var> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.len()) {
            return Err(Error::Contract(format!("class {c} outside the table")));
        }
        let base = g.param(self.base);
        let base = g.tape.gather_rows(base, classes)?;
        if classes.iter().all(|&c| self.offset_row[c].is_none()) {
            return Ok(base);
        }
        let offsets = g.param(self.offsets);
        let rows = g.value(offsets).shape()[0];
        let zero = g.constant(Tensor::zeros([1, self.dim]));
        let padded = g.tape.concat_rows(&[offsets, zero])?;
        let idx: Vec<usize> = classes
            .iter()
            .map(|&c| self.offset_row[c].unwrap_or(rows))
            .collect();
        let off = g.tape.gather_rows(padded, &idx)?;
        g.tape.add(base, off)
    }
}

/// Pooled segment embeddings and the rows whose weights were all zero.
pub struct Pooled {
    pub embeddings: Var,
    pub degenerate: Vec<bool>,
}

/// Weighted spatial average `Σ_p w[n,p]·F[p] / max(Σ_p w[n,p], ε)` of
/// features `[P × d]` under weights `[N × P]`.
pub fn pool(g: &mut Graph<'_>, features: Var, weights: Var) -> Result<Pooled> {
    let (fs, ws) = (
        g.value(features).shape().to_vec(),
        g.value(weights).shape().to_vec(),
    );
    if fs.len() != 2 || ws.len() != 2 || ws[1] != fs[0] {
        return Err(dim_err("pool", &ws, &fs));
    }
    let num = g.tape.matmul(weights, features)?;
    let den = g.tape.row_sums(weights)?;
    let degenerate = g.value(den).data().iter().map(|&s| s <= 0.0).collect();
    let den = g.tape.clamp_min(den, POOL_EPS)?;
    let ones = g.constant(Tensor::full([ws[0]], 1.0));
    let inv = g.tape.div(ones, den)?;
    let embeddings = g.tape.mul_col_vector(num, inv)?;
    Ok(Pooled {
        embeddings,
        degenerate,
    })
}

/// How per-segment class scores are produced from cosine similarities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scores {
    /// `softmax(cos/τ)` over classes.
    Softmax { temperature: f64 },
    /// `cos/τ` without normalisation across classes.
    Raw { temperature: f64 },
}

impl Default for Scores {
    fn default() -> Self {
        Scores::Softmax { temperature: 0.07 }
    }
}

/// Class scores `[N × k]` for segment embeddings `[N × d]` against class
/// embeddings `[k × d]`. Zero embeddings get all-zero similarities, hence
/// a uniform softmax.
pub fn classify_segments(
    g: &mut Graph<'_>,
    segments: Var,
    classes: Var,
    scores: Scores,
) -> Result<Var> {
    let t = match scores {
        Scores::Softmax { temperature } | Scores::Raw { temperature } => temperature,
    };
    if !(t > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let s = g.tape.l2_normalize_rows(segments)?;
    let c = g.tape.l2_normalize_rows(classes)?;
    let ct = g.tape.transpose(c)?;
    let cos = g.tape.matmul(s, ct)?;
    let logits = g.tape.scale(cos, 1.0 / t)?;
    match scores {
        Scores::Softmax { .. } => g.tape.softmax(logits, 1),
        Scores::Raw { .. } => Ok(logits),
    }
}

/// Per-pixel scores `O = F_Cᵀ·M`, `[k × P]`, from class scores `[N × k]`
/// and masks `[N × P]`.
pub fn assemble_prediction(g: &mut Graph<'_>, class_scores: Var, masks: Var) -> Result<Var> {
    let t = g.tape.transpose(class_scores)?;
    g.tape.matmul(t, masks)
}

/// Per-pixel scores and their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    /// `[k × H × W]` over the classes in `class_ids`.
    pub scores: Tensor,
    pub labels: SegLabelMap,
}

impl SegPrediction {
    /// Arg-max over rows of `[k × H·W]` scores (ties take the first row),
    /// mapped through `class_ids`.
    pub fn from_scores(scores: &Tensor, class_ids: &[usize], h: usize, w: usize) -> Result<Self> {
        let (k, p) = scores.dims2()?;
        if k != class_ids.len() || p != h * w {
            return Err(dim_err(
                "prediction",
                scores.shape(),
                &[class_ids.len(), h * w],
            ));
        }
        let mut labels = vec![0u8; p];
        for (px, label) in labels.iter_mut().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if scores.at2(c, px) > scores.at2(best, px) {
                    best = c;
                }
            }
            *label = class_ids[best] as u8;
        }
        Ok(Self {
            scores: scores.clone().reshape([k, h, w])?,
            labels: SegLabelMap::new(h, w, labels)?,
        })
    }
}

/// Dice + focal over per-class probability maps, for the seen classes among
/// the rows of `scores` (`row_classes[r]` names the class of row `r`).
/// Softmax over those seen rows is taken per pixel first; ignore pixels drop
/// out. Ground truth must only use seen classes.
pub fn training_loss(
    g: &mut Graph<'_>,
    scores: Var,
    gt: &SegLabelMap,
    row_classes: &[usize],
    seen: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    let (k, p) = g.value(scores).dims2()?;
    if k != row_classes.len() || p != gt.height() * gt.width() {
        return Err(dim_err(
            "training_loss",
            &[k, p],
            &[row_classes.len(), gt.height() * gt.width()],
        ));
    }
    if let Some(&l) = gt
        .labels()
        .iter()
        .find(|&&l| l != IGNORE && !seen.get(l as usize).copied().unwrap_or(false))
    {
        return Err(Error::Protocol(format!(
            "training label {l} is not a seen class"
        )));
    }
    let rows: Vec<usize> = (0..k).filter(|&r| seen[row_classes[r]]).collect();
    let mut x = g.tape.gather_rows(scores, &rows)?;
    let valid: Vec<usize> = (0..p).filter(|&i| gt.labels()[i] != IGNORE).collect();
    if valid.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if valid.len() < p {
        let t = g.tape.transpose(x)?;
        let t = g.tape.gather_rows(t, &valid)?;
        x = g.tape.transpose(t)?;
    }
    let probs = g.tape.softmax(x, 0)?;
    let mut target = vec![0.0; rows.len() * valid.len()];
    for (j, &px) in valid.iter().enumerate() {
        let l = gt.labels()[px] as usize;
        let r = rows
            .iter()
            .position(|&r| row_classes[r] == l)
            .ok_or_else(|| Error::Contract(format!("label {l} has no score row")))?;
        target[r * valid.len() + j] = 1.0;
    }
    let target = g.constant(Tensor::new([rows.len(), valid.len()], target)?);
    dice_focal(&mut g.tape, probs, target, cfg)
}
