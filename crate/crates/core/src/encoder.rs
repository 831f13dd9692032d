//! Miniature ViT visual encoder with per-layer patch severance and
//! visual prompts.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{contract, dim_err, Error, Result};
use crate::layers::{Attention, LayerNorm, Linear, Mixing, Mlp};
use crate::masks::MaskSet;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Attention mixing applied inside one encoder layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Severance {
    None,
    /// Generalized patch severance with blend factor α.
    Gps(f64),
    /// Mask-guided patch severance.
    Mps,
}

impl fmt::Display for Severance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severance::None => f.write_str("none"),
            Severance::Gps(a) => write!(f, "gps:{a}"),
            Severance::Mps => f.write_str("mps"),
        }
    }
}

impl FromStr for Severance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Severance::None),
            "mps" => Ok(Severance::Mps),
            other => {
                let alpha = other
                    .strip_prefix("gps:")
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("bad severance entry '{other}'")))?;
                Ok(Severance::Gps(alpha))
            }
        }
    }
}

/// One [`Severance`] per encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SeveranceSpec(pub Vec<Severance>);

impl SeveranceSpec {
    pub fn none(layers: usize) -> Self {
        Self(vec![Severance::None; layers])
    }

    /// `gps(α)` on the last layer only.
    pub fn last_layer_gps(layers: usize, alpha: f64) -> Self {
        let mut s = Self::none(layers);
        if let Some(last) = s.0.last_mut() {
            *last = Severance::Gps(alpha);
        }
        s
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(Error::Config(format!(
                "severance spec has {} entries for {layers} layers",
                self.0.len()
            )));
        }
        for s in &self.0 {
            if let Severance::Gps(a) = s {
                if !(0.0..=1.0).contains(a) {
                    return Err(Error::Config(format!("severance alpha {a} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn uses_masks(&self) -> bool {
        self.0.contains(&Severance::Mps)
    }
}

impl fmt::Display for SeveranceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for SeveranceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(SeveranceSpec)
    }
}

/// How learnable visual prompts are combined with patch tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Off,
    /// `P` prompt tokens placed before the patch tokens.
    Prepend(usize),
    /// One prompt embedding added to each patch token.
    Add,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptMode::Off => f.write_str("off"),
            PromptMode::Prepend(p) => write!(f, "prepend:{p}"),
            PromptMode::Add => f.write_str("add"),
        }
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "off" => Ok(PromptMode::Off),
            "add" => Ok(PromptMode::Add),
            other => other
                .strip_prefix("prepend:")
                .and_then(|p| p.parse().ok())
                .filter(|&p: &usize| p >= 1)
                .map(PromptMode::Prepend)
                .ok_or_else(|| Error::Config(format!("bad prompt mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub severance: SeveranceSpec,
    pub prompt: PromptMode,
    pub class_token: bool,
    /// When set, only prompt parameters train in the segmentation stage.
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 4,
            severance: SeveranceSpec::last_layer_gps(4, 1.0),
            prompt: PromptMode::Add,
            class_token: false,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        self.severance.validate(self.num_layers)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Rows placed before the patch tokens (class token, prepended prompts).
    pub fn extra_tokens(&self) -> usize {
        let p = match self.prompt {
            PromptMode::Prepend(p) => p,
            _ => 0,
        };
        p + usize::from(self.class_token)
    }
}

/// Fixed input standardisation applied to pixel values in `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Splits a `[C×H×W]` image into row-major non-overlapping patches,
/// returning `[patches × C·p·p]` with features ordered (channel, dy, dx).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(contract("image must be [C×H×W]"));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(dim_err("patchify", image.shape(), &[patch, patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&image.data()[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, dim], out)
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    /// Returns `(block output, attention sub-layer output)`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mixing: Mixing) -> Result<(Var, Var)> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mixing)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        Ok((g.tape.add(x, m)?, a))
    }
}

/// Visual encoder parameters (ids into a [`ParamStore`]).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub cls: Option<ParamId>,
    pub prompt: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Intermediate values recorded during [`Encoder::encode_traced`].
pub struct EncodeTrace {
    /// Feature map `[grid × grid × d]`.
    pub features: Var,
    /// Attention sub-layer output per layer, `[tokens × d]`.
    pub attn_outputs: Vec<Var>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch = Linear::new(store, "encoder.patch", cfg.patch_dim(), d, true, rng);
        let pos = store.add(
            "encoder.pos",
            Tensor::randn([cfg.num_patches(), d], 0.02, rng),
        );
        let cls = cfg
            .class_token
            .then(|| store.add("encoder.cls", Tensor::randn([1, d], 0.02, rng)));
        let prompt = match cfg.prompt {
            PromptMode::Off => None,
            PromptMode::Prepend(p) => {
                Some(store.add("encoder.prompt", Tensor::randn([p, d], 0.02, rng)))
            }
            PromptMode::Add => {
                Some(store.add("encoder.prompt", Tensor::zeros([cfg.num_patches(), d])))
            }
        };
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let name = format!("encoder.blocks.{l}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                attn: Attention::new(store, &format!("{name}.attn"), d, cfg.num_heads, rng)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.mlp_ratio * d, d, rng),
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d);
        Ok(Self {
            cfg,
            patch,
            pos,
            cls,
            prompt,
            blocks,
            norm,
        })
    }

    /// Every encoder parameter except the visual prompt.
    pub fn body_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.patch.params().collect();
        ids.push(self.pos);
        ids.extend(self.cls);
        for b in &self.blocks {
            ids.extend(b.norm1.params());
            ids.extend(b.attn.params());
            ids.extend(b.norm2.params());
            ids.extend(b.mlp.params());
        }
        ids.extend(self.norm.params());
        ids
    }

    pub fn prompt_params(&self) -> Vec<ParamId> {
        self.prompt.into_iter().collect()
    }

    /// One token per patch: linear projection plus positional embedding.
    pub fn patch_embed(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<Var> {
        let c = &self.cfg;
        if image.shape() != [c.in_channels, c.image_size, c.image_size] {
            return Err(dim_err(
                "patch_embed",
                image.shape(),
                &[c.in_channels, c.image_size, c.image_size],
            ));
        }
        let patches = patchify(image, c.patch_size)?.map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
        let patches = g.constant(patches);
        let t = self.patch.forward(g, patches)?;
        let pos = g.param(self.pos);
        g.tape.add(t, pos)
    }

    /// Combines prompts with patch tokens according to the prompt mode.
    pub fn apply_prompts(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        apply_prompts(g, tokens, self.cfg.prompt, self.prompt)
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        masks: Option<&MaskSet>,
    ) -> Result<Var> {
        Ok(self.encode_traced(g, image, masks)?.features)
    }

    /// Full forward pass. `masks` are required when any layer uses
    /// mask-guided severance; they are resampled to the token grid.
    pub fn encode_traced(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        masks: Option<&MaskSet>,
    ) -> Result<EncodeTrace> {
        let c = &self.cfg;
        let tokens = self.patch_embed(g, image)?;
        let mut x = self.apply_prompts(g, tokens)?;
        if let Some(cls) = self.cls {
            let cls = g.param(cls);
            x = g.tape.concat_rows(&[cls, x])?;
        }
        let extra = c.extra_tokens();
        let mps = if c.severance.uses_masks() {
            let m = masks
                .ok_or_else(|| Error::Config("mask-guided severance requires a mask set".into()))?;
            let grid = m.resample(c.grid(), c.grid());
            Some(g.constant(mps_weights(&grid, extra)?))
        } else {
            None
        };
        let mut attn_outputs = Vec::with_capacity(self.blocks.len());
        for (block, sev) in self.blocks.iter().zip(&c.severance.0) {
            let mixing = match *sev {
                Severance::None => Mixing::Softmax,
                Severance::Gps(a) => Mixing::Gps(a),
                Severance::Mps => Mixing::Fixed(mps.expect("mps weights built above")),
            };
            let (y, a) = block.forward(g, x, mixing)?;
            x = y;
            attn_outputs.push(a);
        }
        let x = self.norm.forward(g, x)?;
        let x = if extra > 0 {
            g.tape.slice_rows(x, extra, c.num_patches())?
        } else {
            x
        };
        let features = g.tape.reshape(x, &[c.grid(), c.grid(), c.embed_dim])?;
        Ok(EncodeTrace {
            features,
            attn_outputs,
        })
    }
}

/// Prompt combination shared by the encoder and tests.
pub fn apply_prompts(
    g: &mut Graph<'_>,
    tokens: Var,
    mode: PromptMode,
    prompt: Option<ParamId>,
) -> Result<Var> {
    match (mode, prompt) {
        (PromptMode::Off, _) => Ok(tokens),
        (PromptMode::Prepend(_), Some(p)) => {
            let p = g.param(p);
            g.tape.concat_rows(&[p, tokens])
        }
        (PromptMode::Add, Some(p)) => {
            let p = g.param(p);
            if g.value(p).shape() != g.value(tokens).shape() {
                return Err(dim_err(
                    "apply_prompts",
                    g.value(p).shape(),
                    g.value(tokens).shape(),
                ));
            }
            g.tape.add(tokens, p)
        }
        _ => Err(contract("prompt mode requires prompt parameters")),
    }
}

/// Row-normalised mask-guided attention over `extra + N_tokens` tokens.
///
/// For patch token `i` the unnormalised row is `Σ_j M[j,i]·M[j,:]`; rows
/// that sum to zero, and every extra (prompt/class) token, attend only to
/// themselves.
pub fn mps_weights(grid_masks: &MaskSet, extra: usize) -> Result<Tensor> {
    if grid_masks.count() == 0 {
        return Err(contract("mask-guided severance needs at least one mask"));
    }
    let m = grid_masks.flat();
    let (n, o) = m.dims2()?;
    let t = extra + o;
    let mut w = vec![0.0; t * t];
    for e in 0..extra {
        w[e * t + e] = 1.0;
    }
    for i in 0..o {
        let row = &mut w[(extra + i) * t + extra..(extra + i + 1) * t];
        for j in 0..n {
            let mji = m.at2(j, i);
            if mji == 0.0 {
                continue;
            }
            for (r, &v) in row.iter_mut().zip(m.row(j)) {
                *r += mji * v;
            }
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row[i] = 1.0;
        }
    }
    Tensor::new([t, t], w)
}

#[cfg(test)]
mod tests;
