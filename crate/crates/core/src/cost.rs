//! Analytic FLOP model for one-pass and multi-pass classification.
//!
//! A multiply-accumulate counts as two FLOPs. Element-wise work is counted
//! per element: bias/residual adds and activations 1, layer norm 5,
//! softmax 3 (exp, sum, divide).

use crate::cal::{CalConfig, CalKind};
use crate::encoder::{EncoderConfig, PromptMode, Severance};

const LAYER_NORM: u64 = 5;
const SOFTMAX: u64 = 3;

fn linear(rows: u64, inp: u64, out: u64) -> u64 {
    2 * rows * inp * out + rows * out
}

/// Multi-head attention of `tq` queries over `tk` keys at width `d`,
/// including the projections.
fn attention(tq: u64, tk: u64, d: u64, heads: u64) -> u64 {
    linear(tq, d, d)
        + 2 * linear(tk, d, d)
        + 2 * tq * tk * d
        + tq * tk * heads
        + SOFTMAX * tq * tk * heads
        + 2 * tq * tk * d
        + linear(tq, d, d)
}

fn mlp(rows: u64, d: u64, hidden: u64, out: u64) -> u64 {
    linear(rows, d, hidden) + rows * hidden + linear(rows, hidden, out)
}

/// FLOPs of one encoder pass, split by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderFlops {
    pub patch_embed: u64,
    pub blocks: u64,
    pub final_norm: u64,
}

impl EncoderFlops {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.blocks + self.final_norm
    }
}

/// One transformer block over `t` tokens; `severance` adds the cost of the
/// attention-weight rewrite (mask-guided weights use `proposals` masks).
pub fn block_flops(
    t: u64,
    d: u64,
    heads: u64,
    mlp_ratio: u64,
    severance: Severance,
    proposals: u64,
) -> u64 {
    let norms = 2 * LAYER_NORM * t * d;
    let attn = match severance {
        Severance::None => attention(t, t, d, heads),
        Severance::Gps(_) => attention(t, t, d, heads) + 2 * t * t * heads,
        // fixed weights replace the score computation: Σ_j M[j,i]M[j,:],
        // row normalisation, then the value path
        Severance::Mps => {
            linear(t, d, d) + 2 * t * t * proposals + 2 * t * t + 2 * t * t * d + linear(t, d, d)
        }
    };
    norms + attn + 2 * t * d + mlp(t, d, mlp_ratio * d, d)
}

pub fn encoder_flops(cfg: &EncoderConfig, proposals: u64) -> EncoderFlops {
    let patches = cfg.num_patches() as u64;
    let d = cfg.embed_dim as u64;
    let t = patches + cfg.extra_tokens() as u64;
    let prompt_add = match cfg.prompt {
        PromptMode::Add => patches * d,
        _ => 0,
    };
    let patch_embed = linear(patches, cfg.patch_dim() as u64, d) + patches * d + prompt_add;
    let blocks = (0..cfg.num_layers)
        .map(|l| {
            block_flops(
                t,
                d,
                cfg.num_heads as u64,
                cfg.mlp_ratio as u64,
                cfg.severance.0.get(l).copied().unwrap_or(Severance::None),
                proposals,
            )
        })
        .sum();
    EncoderFlops {
        patch_embed,
        blocks,
        final_norm: LAYER_NORM * t * d,
    }
}

/// Anchor-heatmap decoder over `proposals` masks on `tokens` grid cells.
pub fn cal_flops(cal: &CalConfig, proposals: u64, tokens: u64, d: u64) -> u64 {
    let (n, t) = (proposals, tokens);
    let masking = n * t;
    match cal.kind {
        CalKind::Query => {
            let heads = cal.heads as u64;
            let layer = attention(n, n, d, heads)
                + attention(n, t, d, heads)
                + mlp(n, d, 2 * d, d)
                + 3 * (LAYER_NORM * n * d + n * d);
            let out = attention(n, n, d, heads)
                + n * d
                + LAYER_NORM * n * d
                + 2 * n * t * d
                + n * t
                + SOFTMAX * n * t
                + masking;
            cal.layers as u64 * layer + out
        }
        CalKind::Conv => {
            let c = cal.conv_channels as u64;
            let mut total = d * t * n;
            for l in 0..cal.layers as u64 {
                let cin = if l == 0 { d } else { c };
                total += n * t * (2 * 9 * cin * c + c) + (4 + 1) * n * t * c;
            }
            total + n * t * (2 * 9 * c + 1) + SOFTMAX * n * t
        }
    }
}

/// Weighted pooling plus cosine classification against `classes` embeddings.
pub fn classify_flops(proposals: u64, tokens: u64, d: u64, classes: u64) -> u64 {
    let pool = 2 * proposals * tokens * d + proposals * tokens + proposals * d;
    let normalise = 3 * (proposals + classes) * d;
    pool + normalise
        + 2 * proposals * classes * d
        + proposals * classes
        + SOFTMAX * proposals * classes
}

/// Breakdown of the one-pass classification stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OnePassFlops {
    pub encoder: EncoderFlops,
    pub cal: u64,
    pub classify: u64,
}

impl OnePassFlops {
    pub fn total(&self) -> u64 {
        self.encoder.total() + self.cal + self.classify
    }
}

pub fn flops_one_pass(
    enc: &EncoderConfig,
    cal: Option<&CalConfig>,
    proposals: u64,
    classes: u64,
) -> OnePassFlops {
    let tokens = enc.num_patches() as u64;
    let d = enc.embed_dim as u64;
    OnePassFlops {
        encoder: encoder_flops(enc, proposals),
        cal: cal.map_or(0, |c| cal_flops(c, proposals, tokens, d)),
        classify: classify_flops(proposals, tokens, d, classes),
    }
}

/// `passes` full encoder passes, one per cropped proposal.
pub fn flops_multi_pass(enc: &EncoderConfig, passes: u64) -> u64 {
    passes * encoder_flops(enc, 1).total()
}
