use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classify::{classify_segments, training_loss, Scores};
use crate::encoder::{PromptMode, SeveranceSpec};
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::numcore::{GradAccumulator, Graph, ParamId, ParamStore, Tensor, Trainable, Var};
use crate::proposals::{hungarian_match, label_segments, mask_loss};
use crate::synth::{Sample, Split};

use super::config::{RunConfig, StageConfig};
use super::model::{DeopModel, PreparedMasks};

/// Mean loss per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

const STREAM_ORDER: u64 = 21;

/// Everything a training stage needs besides the loss.
pub struct StageRun<'a> {
    pub name: &'a str,
    pub stage: &'a StageConfig,
    pub trainable: &'a Trainable,
    pub seed: u64,
    pub log_every: usize,
    /// Learning-rate multipliers for individual parameters (default 1).
    pub lr_scale: Vec<(ParamId, f64)>,
}

impl<'a> StageRun<'a> {
    pub fn new(
        name: &'a str,
        stage: &'a StageConfig,
        trainable: &'a Trainable,
        seed: u64,
        log_every: usize,
    ) -> Self {
        Self {
            name,
            stage,
            trainable,
            seed,
            log_every,
            lr_scale: Vec::new(),
        }
    }
}

/// Minibatch loop shared by every stage: `loss(g, i)` builds the loss of
/// sample `i` out of `samples`; gradients are averaged over the batch.
/// Buffer updates recorded during forward passes are written back after
/// each step.
pub fn run_stage<F>(
    run: &StageRun<'_>,
    store: &mut ParamStore,
    samples: usize,
    mut loss: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut Graph<'_>, usize) -> Result<Var>,
{
    let StageRun {
        name,
        stage,
        trainable,
        seed,
        log_every,
        ..
    } = *run;
    if samples == 0 {
        return Err(Error::Config(alloc::format!("{name}: no training samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_ORDER);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = stage.optimizer();
    let mut log = TrainLog::default();
    for step in 0..stage.steps {
        let mut acc = GradAccumulator::new(store);
        let mut buffers = Vec::new();
        let mut total = 0.0;
        for _ in 0..stage.batch {
            if order.is_empty() {
                order = (0..samples).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            let mut g = Graph::training(store, trainable);
            let l = loss(&mut g, i).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step },
                e => e,
            })?;
            let v = g.value(l).item()?;
            if !v.is_finite() {
                return Err(Error::Diverged { step });
            }
            total += v;
            let grads = g.tape.backward(l)?;
            acc.add(g.param_grads(&grads));
            buffers.extend(g.take_buffer_updates());
        }
        let decay = stage.decay(step);
        let scale = |id: ParamId| {
            decay
                * run
                    .lr_scale
                    .iter()
                    .find(|(p, _)| *p == id)
                    .map_or(1.0, |(_, s)| *s)
        };
        opt.step_scaled(store, &acc.mean(), scale)
            .map_err(|_| Error::Diverged { step })?;
        for (id, t) in buffers {
            *store.get_mut(id) = t;
        }
        let mean = total / stage.batch as f64;
        if log_every > 0 && (step % log_every == 0 || step + 1 == stage.steps) {
            log::info!("{name} step {step} loss {mean:.5}");
        }
        log.losses.push(mean);
    }
    Ok(log)
}

/// Image-level alignment of the encoder with the class embeddings on a
/// corpus covering every class. Supervision is the class proportion of
/// each image: every token is classified against all class embeddings and
/// the mean prediction is matched to the proportions by cross-entropy.
pub fn pretrain_encoder(
    cfg: &RunConfig,
    store: &mut ParamStore,
    model: &DeopModel,
) -> Result<TrainLog> {
    let classes = model.classes.len();
    let images: Vec<(Tensor, Tensor, Tensor)> = (0..cfg.pretrain_images)
        .map(|i| {
            let s = cfg.data.sample(Split::Pretrain, i)?;
            let fractions = s.class_fractions(classes);
            let present = fractions
                .iter()
                .map(|&f| if f > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let target = Tensor::new([classes], fractions)?.map(|v| -v);
            Ok((s.image(), target, Tensor::new([classes], present)?))
        })
        .collect::<Result<_>>()?;
    let mut plain = model.encoder.clone();
    plain.cfg.severance = SeveranceSpec::none(plain.cfg.num_layers);
    plain.cfg.prompt = PromptMode::Off;
    let trainable = Trainable::none(store).with(plain.body_params());
    let all: Vec<usize> = (0..classes).collect();
    let tokens = plain.cfg.num_patches();
    let d = plain.cfg.embed_dim;
    let scores = Scores::Softmax {
        temperature: cfg.temperature,
    };
    let run = StageRun::new(
        "pretrain",
        &cfg.pretrain,
        &trainable,
        cfg.seed ^ 0x5eed,
        cfg.log_every,
    );
    run_stage(&run, store, images.len(), |g, i| {
        let (img, target, present) = &images[i];
        let f = plain.encode(g, img, None)?;
        let f = g.tape.reshape(f, &[tokens, d])?;
        let emb = model.classes.embeddings(g, &all)?;
        let p = classify_segments(g, f, emb, scores)?;
        let mean = g.tape.col_sums(p)?;
        let mean = g.tape.scale(mean, 1.0 / tokens as f64)?;
        let lp = g.tape.ln(mean)?;
        let t = g.constant(target.clone());
        let ce = g.tape.mul(lp, t)?;
        let ce = g.tape.sum(ce)?;
        let peak = soft_peak(g, p)?;
        let mil = presence_loss(g, peak, present)?;
        g.tape.add(ce, mil)
    })
}

/// Sharpness of the soft maximum over tokens in the presence term.
const PEAK_SHARPNESS: f64 = 10.0;

/// Per-class soft maximum of `[T×C]` token probabilities, `[C]`.
fn soft_peak(g: &mut Graph<'_>, probs: Var) -> Result<Var> {
    let per_class = g.tape.transpose(probs)?;
    let logits = g.tape.scale(per_class, PEAK_SHARPNESS)?;
    let w = g.tape.softmax(logits, 1)?;
    let weighted = g.tape.mul(w, per_class)?;
    g.tape.row_sums(weighted)
}

/// Mean binary cross-entropy between per-class peaks and image-level
/// presence: a class in the image must be claimed confidently by some
/// token, an absent class by none.
fn presence_loss(g: &mut Graph<'_>, peak: Var, present: &Tensor) -> Result<Var> {
    let floor = 1e-6;
    let hit = g.tape.clamp_min(peak, floor)?;
    let hit = g.tape.ln(hit)?;
    let miss = g.tape.one_minus(peak)?;
    let miss = g.tape.clamp_min(miss, floor)?;
    let miss = g.tape.ln(miss)?;
    let pos = g.constant(present.map(|v| -v));
    let neg = g.constant(present.map(|v| v - 1.0));
    let a = g.tape.mul(hit, pos)?;
    let b = g.tape.mul(miss, neg)?;
    let total = g.tape.add(a, b)?;
    let total = g.tape.sum(total)?;
    g.tape.scale(total, 1.0 / present.len() as f64)
}

/// Proposal-network training with matched dice + focal mask loss against
/// ground-truth segments at mask resolution.
pub fn train_proposals(
    cfg: &RunConfig,
    store: &mut ParamStore,
    model: &DeopModel,
    train: &[Sample],
) -> Result<TrainLog> {
    let factor = cfg.data.image_size / cfg.proposals.mask_size();
    let data: Vec<(Tensor, MaskSet)> = train
        .iter()
        .map(|s| {
            let (full, _) = label_segments(&s.labels)?;
            Ok((s.image(), full.downsample_area(factor)?))
        })
        .collect::<Result<_>>()?;
    let trainable = Trainable::none(store).with(model.proposals.params());
    let n = cfg.proposals.queries;
    let m = cfg.proposals.mask_size();
    let run = StageRun::new(
        "proposals",
        &cfg.proposal_stage,
        &trainable,
        cfg.seed ^ 0x9e3779b9,
        cfg.log_every,
    );
    run_stage(&run, store, data.len(), |g, i| {
        let (img, gt) = &data[i];
        let out = model.proposals.forward(g, img)?;
        let pred = MaskSet::new(g.value(out.masks).clone().reshape([n, m, m])?)?;
        let assignment = hungarian_match(&pred, gt, &cfg.loss)?;
        mask_loss(g, out.masks, &gt.flat(), &assignment, &cfg.loss)
    })
}

/// Segmentation training of prompts, offsets and the anchor decoder on
/// seen classes. Fails if any frozen parameter moved.
pub fn train_deop(
    cfg: &RunConfig,
    store: &mut ParamStore,
    model: &DeopModel,
    train: &[Sample],
    masks: &[PreparedMasks],
) -> Result<TrainLog> {
    let seen_ids = model.classes.seen_ids();
    let seen: Vec<bool> = (0..model.classes.len())
        .map(|c| model.classes.is_seen(c))
        .collect();
    let images: Vec<Tensor> = train.iter().map(Sample::image).collect();
    let frozen: Vec<(ParamId, Tensor)> = model
        .frozen_params()
        .into_iter()
        .map(|id| (id, store.get(id).clone()))
        .collect();
    let trainable = model.trainable(store, cfg.mode.prompts());
    let mut run = StageRun::new(
        "deop",
        &cfg.deop_stage,
        &trainable,
        cfg.seed ^ 0xdeadbeef,
        cfg.log_every,
    );
    run.lr_scale
        .push((model.classes.offsets, cfg.offset_lr_scale));
    let log = run_stage(&run, store, train.len(), |g, i| {
        let out = model.classify(g, &images[i], &masks[i], &seen_ids)?;
        training_loss(g, out.scores, &train[i].labels, &seen_ids, &seen, &cfg.loss)
    })?;
    for (id, before) in frozen {
        if store
            .get(id)
            .data()
            .iter()
            .zip(before.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Contract(alloc::format!(
                "frozen parameter {} changed",
                store.name(id)
            )));
        }
    }
    Ok(log)
}
