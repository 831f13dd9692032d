//! Class-agnostic mask proposals: a small learned network, an oracle built
//! from ground truth, bipartite matching and the matching loss.

mod hungarian;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use hungarian::assign;

use crate::error::{Error, Result};
use crate::layers::{DecoderLayer, Linear, Mlp};
use crate::losses::{dice_focal, dice_value, focal_value, LossConfig};
use crate::masks::MaskSet;
use crate::metrics::SegLabelMap;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channels after the first stride-2 stage.
    pub stem_channels: usize,
    /// Channels of the quarter-resolution feature map and the queries.
    pub channels: usize,
    /// Per-pixel embedding width.
    pub embed_dim: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl Default for ProposalNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            stem_channels: 16,
            channels: 32,
            embed_dim: 32,
            queries: 8,
            decoder_layers: 2,
            heads: 2,
        }
    }
}

impl ProposalNetConfig {
    /// Side of the mask grid (a quarter of the input).
    pub fn mask_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return bad("proposal image size must be a positive multiple of 4");
        }
        if self.queries == 0 || self.channels == 0 || self.embed_dim == 0 || self.stem_channels == 0
        {
            return bad("proposal widths and query count must be positive");
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad("proposal channels must divide into heads");
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
pub struct ProposalOutput {
    /// Mask probabilities `[N × h·w]`.
    pub masks: Var,
    /// Pre-sigmoid mask logits `[N × h·w]`.
    pub logits: Var,
    /// Per-pixel embeddings `[h·w × E]`.
    pub pixel_embed: Var,
    /// Mask embeddings `[N × E]`.
    pub mask_embed: Var,
}

/// Stride-4 conv backbone, query decoder and mask-embedding head.
#[derive(Clone, Debug)]
pub struct ProposalNet {
    pub cfg: ProposalNetConfig,
    stage1: Linear,
    stage2: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    pos: ParamId,
    pixel: Linear,
    pub queries: ParamId,
    decoder: Vec<DecoderLayer>,
    mask_head: Mlp,
}

/// Rearranges `[h·w × c]` row-major tokens into `[(h/2)(w/2) × 4c]`, the
/// input of a 2×2 stride-2 convolution expressed as a matmul.
pub fn space_to_depth(g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.value(x).shape()[1];
    let x = g.tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let x = g.tape.permute(x, &[0, 2, 1, 3, 4])?;
    g.tape.reshape(x, &[(h / 2) * (w / 2), 4 * c])
}

impl ProposalNet {
    pub fn new<R: Rng + ?Sized>(
        cfg: ProposalNetConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let cells = cfg.mask_size() * cfg.mask_size();
        let stage1 = Linear::new(
            store,
            "proposals.stage1",
            4 * cfg.in_channels,
            cfg.stem_channels,
            true,
            rng,
        );
        let stage2 = Linear::new(
            store,
            "proposals.stage2",
            4 * cfg.stem_channels,
            c,
            true,
            rng,
        );
        let std = 1.0 / libm::sqrt((9 * c) as f64);
        let conv_w = store.add("proposals.conv.w", Tensor::randn([c, c, 3, 3], std, rng));
        let conv_b = store.add("proposals.conv.b", Tensor::zeros([c]));
        let pos = store.add("proposals.pos", Tensor::randn([cells, c], 0.02, rng));
        let pixel = Linear::new(store, "proposals.pixel", c, cfg.embed_dim, true, rng);
        let queries = store.add(
            "proposals.queries",
            Tensor::randn([cfg.queries, c], 1.0, rng),
        );
        let decoder = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer::new(store, &format!("proposals.decoder.{l}"), c, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let mask_head = Mlp::new(store, "proposals.mask_head", c, c, cfg.embed_dim, rng);
        Ok(Self {
            cfg,
            stage1,
            stage2,
            conv_w,
            conv_b,
            pos,
            pixel,
            queries,
            decoder,
            mask_head,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stage1.params().chain(self.stage2.params()).collect();
        p.extend([self.conv_w, self.conv_b, self.pos]);
        p.extend(self.pixel.params());
        p.push(self.queries);
        for d in &self.decoder {
            p.extend(d.params());
        }
        p.extend(self.mask_head.params());
        p
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<ProposalOutput> {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        if image.shape() != [cfg.in_channels, s, s] {
            return Err(crate::error::dim_err(
                "propose",
                image.shape(),
                &[cfg.in_channels, s, s],
            ));
        }
        // channel-last tokens [s·s × C]
        let img = g.constant(image.clone());
        let img = g.tape.reshape(img, &[cfg.in_channels, s * s])?;
        let tokens = g.tape.transpose(img)?;
        let x = space_to_depth(g, tokens, s, s)?;
        let x = self.stage1.forward(g, x)?;
        let x = g.tape.gelu(x)?;
        let x = space_to_depth(g, x, s / 2, s / 2)?;
        let x = self.stage2.forward(g, x)?;
        let x = g.tape.gelu(x)?;
        let pos = g.param(self.pos);
        let x = g.tape.add(x, pos)?;
        // 3×3 residual conv stage at quarter resolution
        let m = cfg.mask_size();
        let c = cfg.channels;
        let xc = g.tape.transpose(x)?;
        let xc = g.tape.reshape(xc, &[1, c, m, m])?;
        let w = g.param(self.conv_w);
        let b = g.param(self.conv_b);
        let y = g.tape.conv2d(xc, w, Some(b))?;
        let y = g.tape.gelu(y)?;
        let y = g.tape.reshape(y, &[c, m * m])?;
        let y = g.tape.transpose(y)?;
        let feats = g.tape.add(x, y)?;

        let pixel_embed = self.pixel.forward(g, feats)?;
        let mut q = g.param(self.queries);
        for layer in &self.decoder {
            q = layer.forward(g, q, feats, feats)?;
        }
        let mask_embed = self.mask_head.forward(g, q)?;
        let pt = g.tape.transpose(pixel_embed)?;
        let logits = g.tape.matmul(mask_embed, pt)?;
        let masks = g.tape.sigmoid(logits)?;
        Ok(ProposalOutput {
            masks,
            logits,
            pixel_embed,
            mask_embed,
        })
    }

    /// Inference: `N` masks at quarter resolution.
    pub fn propose(&self, store: &ParamStore, image: &Tensor) -> Result<MaskSet> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, image)?;
        let m = self.cfg.mask_size();
        let t = g
            .value(out.masks)
            .clone()
            .reshape([self.cfg.queries, m, m])?;
        MaskSet::new(t)
    }
}

/// Ground-truth segments (one per class present, ascending id) as binary
/// masks, padded with empty masks to `n`. With `jitter > 0` each pixel on a
/// mask boundary flips with that probability.
pub fn oracle_masks(labels: &SegLabelMap, jitter: f64, n: usize, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&jitter) {
        return Err(Error::Config(format!("jitter {jitter} outside [0, 1]")));
    }
    let classes: Vec<u8> = labels.present();
    if classes.len() > n {
        return Err(Error::Capacity {
            needed: classes.len(),
            available: n,
        });
    }
    let (h, w) = (labels.height(), labels.width());
    let mut data = vec![0.0; n * h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, &class) in classes.iter().enumerate() {
        let mask: Vec<bool> = labels.labels().iter().map(|&l| l == class).collect();
        let out = &mut data[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut v = mask[p];
                if jitter > 0.0 {
                    let boundary =
                        [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)]
                            .iter()
                            .any(|&(dy, dx)| {
                                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                                ny >= 0
                                    && nx >= 0
                                    && (ny as usize) < h
                                    && (nx as usize) < w
                                    && mask[ny as usize * w + nx as usize] != mask[p]
                            });
                    if boundary && rng.random::<f64>() < jitter {
                        v = !v;
                    }
                }
                out[p] = if v { 1.0 } else { 0.0 };
            }
        }
    }
    MaskSet::new(Tensor::new([n, h, w], data)?)
}

/// Matching cost between every ground-truth mask and every prediction,
/// row-major `[G×N]`. Masks must share a grid.
pub fn match_costs(pred: &MaskSet, gt: &MaskSet, cfg: &LossConfig) -> Vec<f64> {
    let mut cost = Vec::with_capacity(gt.count() * pred.count());
    for g in 0..gt.count() {
        for p in 0..pred.count() {
            let (pm, gm) = (pred.mask(p), gt.mask(g));
            cost.push(
                cfg.dice_weight * dice_value(pm, gm, cfg.dice_eps)
                    + cfg.focal_weight * focal_value(pm, gm, cfg.focal_gamma, cfg.focal_alpha),
            );
        }
    }
    cost
}

/// Minimum-cost pairing of non-empty ground-truth masks with predictions,
/// as `(pred, gt)` pairs sorted by gt index.
pub fn hungarian_match(
    pred: &MaskSet,
    gt: &MaskSet,
    cfg: &LossConfig,
) -> Result<Vec<(usize, usize)>> {
    let live: Vec<usize> = (0..gt.count())
        .filter(|&g| gt.mask(g).iter().any(|&v| v > 0.0))
        .collect();
    if live.len() > pred.count() {
        return Err(Error::Capacity {
            needed: live.len(),
            available: pred.count(),
        });
    }
    if live.is_empty() {
        return Ok(Vec::new());
    }
    let gt_live = gt.select(&live)?;
    let cost = match_costs(pred, &gt_live, cfg);
    let cols = assign(&cost, live.len(), pred.count())?;
    Ok(cols.into_iter().zip(live).collect())
}

/// Dice + focal summed over matched pairs. `pred` holds mask probabilities
/// `[N × P]` on the tape; `gt` is `[G × P]` flattened.
pub fn mask_loss(
    g: &mut Graph<'_>,
    pred: Var,
    gt: &Tensor,
    assignment: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    if assignment.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (pi, gi): (Vec<usize>, Vec<usize>) = assignment.iter().copied().unzip();
    let p = g.tape.gather_rows(pred, &pi)?;
    let cols = gt.shape()[1];
    let mut t = Vec::with_capacity(gi.len() * cols);
    for &k in &gi {
        t.extend_from_slice(gt.row(k));
    }
    let t = g.constant(Tensor::new([gi.len(), cols], t)?);
    dice_focal(&mut g.tape, p, t, cfg)
}

/// One binary mask per labeled class, with the class ids.
pub fn label_segments(labels: &SegLabelMap) -> Result<(MaskSet, Vec<u8>)> {
    let classes = labels.present();
    let masks = oracle_masks(labels, 0.0, classes.len().max(1), 0)?;
    Ok((masks, classes))
}
