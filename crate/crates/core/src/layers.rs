//! Building blocks shared by the encoder, proposal network and CAL decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` over the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / libm::sqrt(in_dim as f64);
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn([in_dim, out_dim], std, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row_vector(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        core::iter::once(self.w).chain(self.b)
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.tape.layer_norm(x, LN_EPS)?;
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.tape.mul_row_vector(n, gain)?;
        g.tape.add_row_vector(y, bias)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        [self.gain, self.bias].into_iter()
    }
}

/// How per-head attention weights are formed.
#[derive(Clone, Copy, Debug)]
pub enum Mixing {
    /// `softmax(QKᵀ/√d_head)`
    Softmax,
    /// `α·E + (1-α)·softmax(QKᵀ/√d_head)` (generalized patch severance).
    Gps(f64),
    /// A fixed row-stochastic `[T×T]` matrix shared by all heads
    /// (mask-guided patch severance).
    Fixed(Var),
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(contract(format!(
                "embed dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// Per-head attention weight matrices `[Tq×Tk]`.
    pub fn weights(
        &self,
        g: &mut Graph<'_>,
        query_in: Var,
        key_in: Var,
        mixing: Mixing,
    ) -> Result<Vec<Var>> {
        if let Mixing::Fixed(w) = mixing {
            return Ok(alloc::vec![w; self.heads]);
        }
        let q = self.q.forward(g, query_in)?;
        let k = self.k.forward(g, key_in)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.slice_cols(q, h * dh, dh)?;
            let kh = g.tape.slice_cols(k, h * dh, dh)?;
            let kt = g.tape.transpose(kh)?;
            let s = g.tape.matmul(qh, kt)?;
            let s = g.tape.scale(s, scale)?;
            let a = g.tape.softmax(s, 1)?;
            let w = match mixing {
                Mixing::Gps(alpha) if alpha != 0.0 => {
                    let (tq, tk) = g.value(a).dims2()?;
                    if tq != tk {
                        return Err(contract("severance needs square self-attention"));
                    }
                    let blended = g.tape.scale(a, 1.0 - alpha)?;
                    let eye = g.constant(Tensor::eye(tq).map(|v| v * alpha));
                    g.tape.add(blended, eye)?
                }
                _ => a,
            };
            out.push(w);
        }
        Ok(out)
    }

    /// Attention sub-layer output: mixed values followed by the output
    /// projection (no residual).
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query_in: Var,
        kv_in: Var,
        mixing: Mixing,
    ) -> Result<Var> {
        self.attend(g, query_in, kv_in, kv_in, mixing)
    }

    /// Like [`Attention::forward`] with separate key and value inputs.
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        mixing: Mixing,
    ) -> Result<Var> {
        if let Mixing::Gps(alpha) = mixing {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(contract(format!("severance alpha {alpha} outside [0, 1]")));
            }
        }
        let weights = self.weights(g, query_in, key_in, mixing)?;
        let v = self.v.forward(g, value_in)?;
        let dh = self.dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for (h, w) in weights.into_iter().enumerate() {
            let vh = g.tape.slice_cols(v, h * dh, dh)?;
            heads.push(g.tape.matmul(w, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.tape.concat_cols(&heads)?
        };
        self.o.forward(g, cat)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.q
            .params()
            .chain(self.k.params())
            .chain(self.v.params())
            .chain(self.o.params())
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        self.fc1.params().chain(self.fc2.params())
    }
}

/// Standard post-norm transformer decoder layer: query self-attention,
/// cross-attention to a memory, then an MLP, each with residual + norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 2 * dim, dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        })
    }

    /// `memory_keys` is the memory with positional information added; values
    /// are read from `memory`.
    pub fn forward(&self, g: &mut Graph<'_>, q: Var, memory: Var, memory_keys: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, q, q, Mixing::Softmax)?;
        let q = g.tape.add(q, a)?;
        let q = self.norm1.forward(g, q)?;

        let c = self
            .cross_attn
            .attend(g, q, memory_keys, memory, Mixing::Softmax)?;
        let q = g.tape.add(q, c)?;
        let q = self.norm2.forward(g, q)?;

        let m = self.mlp.forward(g, q)?;
        let q = g.tape.add(q, m)?;
        self.norm3.forward(g, q)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.self_attn
            .params()
            .chain(self.norm1.params())
            .chain(self.cross_attn.params())
            .chain(self.norm2.params())
            .chain(self.mlp.params())
            .chain(self.norm3.params())
    }
}
