//! Classification anchor heatmaps: per-proposal spatial weights over the
//! encoder token grid, produced by a query decoder or a conv decoder.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Attention, DecoderLayer, LayerNorm, Mixing, LN_EPS};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalKind {
    Query,
    Conv,
}

impl fmt::Display for CalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalKind::Query => "query",
            CalKind::Conv => "conv",
        })
    }
}

impl FromStr for CalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(CalKind::Query),
            "conv" => Ok(CalKind::Conv),
            _ => Err(Error::Config(format!(
                "unknown CAL decoder `{s}` (query|conv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalConfig {
    pub kind: CalKind,
    /// Decoder layers for the query decoder, conv blocks for the conv one.
    pub layers: usize,
    /// Heads of every attention inside the query decoder.
    pub heads: usize,
    pub conv_channels: usize,
    /// Batch-norm running-statistics momentum.
    pub momentum: f64,
}

impl Default for CalConfig {
    fn default() -> Self {
        Self {
            kind: CalKind::Query,
            layers: 1,
            heads: 2,
            conv_channels: 64,
            momentum: 0.1,
        }
    }
}

impl CalConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.kind == CalKind::Conv && self.layers == 0 {
            return Err(Error::Config(
                "conv CAL decoder needs at least one block".to_string(),
            ));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "CAL heads {} must divide dim {dim}",
                self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("CAL momentum must lie in [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// Anchor queries refined by transformer decoder layers, then the heatmap
/// output layer `softmax(q'·F_Vᵀ/√d) ∗ M`.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub queries: ParamId,
    layers: Vec<DecoderLayer>,
    out_attn: Attention,
    out_norm: LayerNorm,
    dim: usize,
}

impl QueryDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        count: usize,
        dim: usize,
        cfg: &CalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let queries = store.add("cal.queries", Tensor::randn([count, dim], 0.02, rng));
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("cal.layers.{l}"), dim, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_attn = Attention::new(store, "cal.out.attn", dim, cfg.heads, rng)?;
        let out_norm = LayerNorm::new(store, "cal.out.norm", dim);
        Ok(Self {
            queries,
            layers,
            out_attn,
            out_norm,
            dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::from([self.queries]);
        for l in &self.layers {
            p.extend(l.params());
        }
        p.extend(self.out_attn.params());
        p.extend(self.out_norm.params());
        p
    }

    /// Heatmaps `[N × P]` for features `[P × d]` and grid masks `[N × P]`.
    pub fn forward(&self, g: &mut Graph<'_>, features: Var, masks: &Tensor) -> Result<Var> {
        let mut q = g.param(self.queries);
        for layer in &self.layers {
            q = layer.forward(g, q, features, features)?;
        }
        self.output_layer(g, q, features, masks)
    }

    /// The heatmap output layer alone.
    pub fn output_layer(
        &self,
        g: &mut Graph<'_>,
        q: Var,
        features: Var,
        masks: &Tensor,
    ) -> Result<Var> {
        let a = self.out_attn.forward(g, q, q, Mixing::Softmax)?;
        let q = g.tape.add(q, a)?;
        let q = self.out_norm.forward(g, q)?;
        let ft = g.tape.transpose(features)?;
        let logits = g.tape.matmul(q, ft)?;
        let logits = g.tape.scale(logits, 1.0 / libm::sqrt(self.dim as f64))?;
        let s = g.tape.softmax(logits, 1)?;
        let m = g.constant(masks.clone());
        g.tape.mul(s, m)
    }
}

/// One conv, batch-norm, ReLU block with its running statistics.
#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Per proposal: masked features, K conv blocks, a 1-channel conv and a
/// spatial softmax.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    blocks: Vec<ConvBlock>,
    out_w: ParamId,
    out_b: ParamId,
    momentum: f64,
}

fn conv_init<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    // He initialisation for ReLU
    Tensor::randn([out, inp, 3, 3], libm::sqrt(2.0 / (9 * inp) as f64), rng)
}

impl ConvDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        cfg: &CalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.conv_channels;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let inp = if l == 0 { dim } else { c };
                let name = format!("cal.conv.{l}");
                ConvBlock {
                    w: store.add(format!("{name}.w"), conv_init(c, inp, rng)),
                    b: store.add(format!("{name}.b"), Tensor::zeros([c])),
                    gain: store.add(format!("{name}.bn.gain"), Tensor::full([c], 1.0)),
                    bias: store.add(format!("{name}.bn.bias"), Tensor::zeros([c])),
                    running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros([c])),
                    running_var: store
                        .add(format!("{name}.bn.running_var"), Tensor::full([c], 1.0)),
                }
            })
            .collect();
        let out_w = store.add("cal.conv.out.w", Tensor::randn([1, c, 3, 3], 0.01, rng));
        let out_b = store.add("cal.conv.out.b", Tensor::zeros([1]));
        Ok(Self {
            blocks,
            out_w,
            out_b,
            momentum: cfg.momentum,
        })
    }

    /// Learnable parameters (running statistics excluded).
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend([b.w, b.b, b.gain, b.bias]);
        }
        p.extend([self.out_w, self.out_b]);
        p
    }

    /// Running statistics updated during training.
    pub fn buffers(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.running_mean, b.running_var])
            .collect()
    }

    /// Heatmaps `[N × P]` for features `[P × d]` on an `h×w` grid.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        features: Var,
        masks: &Tensor,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (n, p) = masks.dims2()?;
        let d = g.value(features).shape()[1];
        let ft = g.tape.transpose(features)?;
        let mut per = Vec::with_capacity(n);
        for k in 0..n {
            let mk = g.constant(Tensor::new([p], masks.row(k).to_vec())?);
            per.push(g.tape.mul_row_vector(ft, mk)?);
        }
        let x = g.tape.concat_rows(&per)?;
        let mut x = g.tape.reshape(x, &[n, d, h, w])?;
        for block in &self.blocks {
            let wv = g.param(block.w);
            let bv = g.param(block.b);
            let y = g.tape.conv2d(x, wv, Some(bv))?;
            let y = self.batch_norm(g, block, y, n, h, w)?;
            x = g.tape.relu(y)?;
        }
        let wv = g.param(self.out_w);
        let bv = g.param(self.out_b);
        let y = g.tape.conv2d(x, wv, Some(bv))?;
        let y = g.tape.reshape(y, &[n, p])?;
        g.tape.softmax(y, 1)
    }

    fn batch_norm(
        &self,
        g: &mut Graph<'_>,
        block: &ConvBlock,
        y: Var,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let c = g.value(y).shape()[1];
        let cols = n * h * w;
        let yt = g.tape.permute(y, &[1, 0, 2, 3])?;
        let yt = g.tape.reshape(yt, &[c, cols])?;
        let normed = if g.is_training() {
            let (mean, var) = channel_stats(g.value(yt));
            let m = self.momentum;
            let unbias = if cols > 1 {
                cols as f64 / (cols - 1) as f64
            } else {
                1.0
            };
            let store = g.store();
            let rm = store.get(block.running_mean).data();
            let rv = store.get(block.running_var).data();
            let new_mean: Vec<f64> = rm
                .iter()
                .zip(&mean)
                .map(|(r, v)| (1.0 - m) * r + m * v)
                .collect();
            let new_var: Vec<f64> = rv
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - m) * r + m * v * unbias)
                .collect();
            g.push_buffer_update(block.running_mean, Tensor::new([c], new_mean)?);
            g.push_buffer_update(block.running_var, Tensor::new([c], new_var)?);
            g.tape.layer_norm(yt, LN_EPS)?
        } else {
            let store = g.store();
            let shift: Vec<f64> = store
                .get(block.running_mean)
                .data()
                .iter()
                .map(|v| -v)
                .collect();
            let inv: Vec<f64> = store
                .get(block.running_var)
                .data()
                .iter()
                .map(|v| 1.0 / libm::sqrt(v + LN_EPS))
                .collect();
            let shift = g.constant(Tensor::new([c], shift)?);
            let inv = g.constant(Tensor::new([c], inv)?);
            let z = g.tape.add_col_vector(yt, shift)?;
            g.tape.mul_col_vector(z, inv)?
        };
        let gain = g.param(block.gain);
        let bias = g.param(block.bias);
        let z = g.tape.mul_col_vector(normed, gain)?;
        let z = g.tape.add_col_vector(z, bias)?;
        let z = g.tape.reshape(z, &[c, n, h, w])?;
        g.tape.permute(z, &[1, 0, 2, 3])
    }
}

/// Per-row mean and biased variance.
fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let cols = x.shape()[1];
    (0..x.shape()[0])
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            (mean, var)
        })
        .unzip()
}

/// Either heatmap decoder.
#[derive(Clone, Debug)]
pub enum CalDecoder {
    Query(QueryDecoder),
    Conv(ConvDecoder),
}

impl CalDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        proposals: usize,
        dim: usize,
        cfg: &CalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        Ok(match cfg.kind {
            CalKind::Query => {
                CalDecoder::Query(QueryDecoder::new(store, proposals, dim, cfg, rng)?)
            }
            CalKind::Conv => CalDecoder::Conv(ConvDecoder::new(store, dim, cfg, rng)?),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            CalDecoder::Query(d) => d.params(),
            CalDecoder::Conv(d) => d.params(),
        }
    }

    /// Heatmaps `[N × h·w]` from features `[h·w × d]` and grid masks.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        features: Var,
        masks: &Tensor,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        match self {
            CalDecoder::Query(d) => d.forward(g, features, masks),
            CalDecoder::Conv(d) => d.forward(g, features, masks, h, w),
        }
    }
}
