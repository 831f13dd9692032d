use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cal::CalDecoder;
use crate::classify::{
    assemble_prediction, classify_segments, pool, ClassEmbeddingTable, Scores, SegPrediction,
};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::masks::MaskSet;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Trainable, Var};
use crate::proposals::ProposalNet;

use super::config::RunConfig;

/// Parameter-initialisation streams, kept apart so that adding a component
/// leaves the others' initial values unchanged.
const STREAM_ENCODER: u64 = 11;
const STREAM_PROPOSALS: u64 = 12;
const STREAM_CAL: u64 = 13;

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Masks of one image at the two resolutions the classifier needs.
#[derive(Clone, Debug)]
pub struct PreparedMasks {
    pub set: MaskSet,
    /// `[N × g·g]` on the encoder token grid.
    pub grid: Tensor,
    /// `[N × H·W]` at output resolution.
    pub full: Tensor,
}

impl PreparedMasks {
    pub fn new(set: MaskSet, grid: usize, size: usize) -> Self {
        let g = set.resample(grid, grid).flat();
        let f = set.resample(size, size).flat();
        Self {
            set,
            grid: g,
            full: f,
        }
    }
}

/// Tape handles of one classification pass.
pub struct ClassifyOutput {
    /// Per-pixel scores `[k × H·W]` for the requested classes.
    pub scores: Var,
    /// Pooling weights `[N × g·g]` (heatmaps or grid masks).
    pub weights: Var,
    /// Segment class scores `[N × k]`.
    pub segment_scores: Var,
    pub degenerate: Vec<bool>,
}

/// The whole model: frozen encoder, proposal network, optional anchor
/// decoder and the class-embedding table, over one parameter store.
#[derive(Clone, Debug)]
pub struct DeopModel {
    pub encoder: Encoder,
    pub proposals: ProposalNet,
    pub cal: Option<CalDecoder>,
    pub classes: ClassEmbeddingTable,
    pub scores: Scores,
}

impl DeopModel {
    pub fn new(cfg: &RunConfig) -> Result<(ParamStore, Self)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            cfg.encoder_config(),
            &mut store,
            &mut init_rng(cfg.seed, STREAM_ENCODER),
        )?;
        let proposals = ProposalNet::new(
            cfg.proposals.clone(),
            &mut store,
            &mut init_rng(cfg.seed, STREAM_PROPOSALS),
        )?;
        let d = cfg.encoder.embed_dim;
        let cal = if cfg.mode.anchors() {
            let mut rng = init_rng(cfg.seed, STREAM_CAL);
            Some(CalDecoder::new(
                &mut store,
                cfg.proposals.queries,
                d,
                &cfg.cal,
                &mut rng,
            )?)
        } else {
            None
        };
        let seen: Vec<bool> = cfg.data.classes.iter().map(|c| c.seen).collect();
        let classes = ClassEmbeddingTable::new(&mut store, &cfg.data.names(), &seen, d)?;
        let scores = if cfg.raw_scores {
            Scores::Raw {
                temperature: cfg.temperature,
            }
        } else {
            Scores::Softmax {
                temperature: cfg.temperature,
            }
        };
        Ok((
            store,
            Self {
                encoder,
                proposals,
                cal,
                classes,
                scores,
            },
        ))
    }

    pub fn grid(&self) -> usize {
        self.encoder.cfg.grid()
    }

    pub fn image_size(&self) -> usize {
        self.encoder.cfg.image_size
    }

    pub fn prepare(&self, set: MaskSet) -> PreparedMasks {
        PreparedMasks::new(set, self.grid(), self.image_size())
    }

    /// Parameters updated by segmentation training for this model's mode.
    pub fn segmentation_params(&self, prompts: bool) -> Vec<ParamId> {
        let mut p = Vec::new();
        if prompts {
            p.extend(self.encoder.prompt_params());
            p.push(self.classes.offsets);
        }
        if let Some(cal) = &self.cal {
            p.extend(cal.params());
        }
        p
    }

    /// Parameters that must stay fixed during segmentation training.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.body_params();
        p.extend(self.proposals.params());
        p.push(self.classes.base);
        p
    }

    pub fn trainable(&self, store: &ParamStore, prompts: bool) -> Trainable {
        Trainable::none(store).with(self.segmentation_params(prompts))
    }

    /// Encoder features `[g·g × d]` for an image.
    pub fn features(&self, g: &mut Graph<'_>, image: &Tensor, masks: &MaskSet) -> Result<Var> {
        let f = self.encoder.encode(g, image, Some(masks))?;
        let n = self.grid() * self.grid();
        g.tape.reshape(f, &[n, self.encoder.cfg.embed_dim])
    }

    /// Pooling, classification against `class_ids` and assembly.
    pub fn classify(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        masks: &PreparedMasks,
        class_ids: &[usize],
    ) -> Result<ClassifyOutput> {
        let fv = self.features(g, image, &masks.set)?;
        let weights = match &self.cal {
            Some(cal) => cal.forward(g, fv, &masks.grid, self.grid(), self.grid())?,
            None => g.constant(masks.grid.clone()),
        };
        let pooled = pool(g, fv, weights)?;
        let emb = self.classes.embeddings(g, class_ids)?;
        let segment_scores = classify_segments(g, pooled.embeddings, emb, self.scores)?;
        let m = g.constant(masks.full.clone());
        let scores = assemble_prediction(g, segment_scores, m)?;
        Ok(ClassifyOutput {
            scores,
            weights,
            segment_scores,
            degenerate: pooled.degenerate,
        })
    }

    /// Inference over every class.
    pub fn predict(
        &self,
        store: &ParamStore,
        image: &Tensor,
        masks: &PreparedMasks,
    ) -> Result<SegPrediction> {
        let mut g = Graph::inference(store);
        let ids: Vec<usize> = (0..self.classes.len()).collect();
        let out = self.classify(&mut g, image, masks, &ids)?;
        let s = self.image_size();
        SegPrediction::from_scores(g.value(out.scores), &ids, s, s)
    }

    /// Pooling weights per proposal on the token grid, `[N × g × g]`.
    pub fn heatmaps(
        &self,
        store: &ParamStore,
        image: &Tensor,
        masks: &PreparedMasks,
    ) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let fv = self.features(&mut g, image, &masks.set)?;
        let w = match &self.cal {
            Some(cal) => cal.forward(&mut g, fv, &masks.grid, self.grid(), self.grid())?,
            None => g.constant(masks.grid.clone()),
        };
        let n = masks.set.count();
        g.value(w).clone().reshape([n, self.grid(), self.grid()])
    }
}
