//! Transformer building blocks with injection points for the PEFT methods.
//!
//! Tokens are rows: a sequence is a `[L0 x D]` matrix. Blocks are pre-norm:
//! `h = x + attn(ln1(x))`, then `z = h + ffn(ln2(h))`. `z` is the
//! feedforward output the adapter attaches to.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Component, ParamId, ParamStore};
use crate::peft::{AdapterAttachment, LoraAttachment, Projection};

pub const LN_EPS: f64 = 1e-5;
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// `N(0, 1/in_dim)`
    Fan,
}

/// `y = x W^T + b` with `W: [out x in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        component: Component,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = match init {
            Init::Zeros => Tensor::zeros(&[out_dim, in_dim]),
            Init::Normal(std) => Tensor::randn(&[out_dim, in_dim], std, rng),
            Init::Fan => Tensor::randn(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
        };
        let weight = store.add(format!("{name}.weight"), component, weight);
        let bias = store.add(format!("{name}.bias"), component, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_t(x, w)?;
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, component: Component, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), component, Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), component, Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Prefix keys/values for one attention call. `keys` and `values` are
/// `[L x D]` (one row per virtual token) and are split across heads the same
/// way as the real keys. `gate` is a scalar in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct PrefixInput {
    pub keys: Var,
    pub values: Var,
    pub gate: Var,
}

/// Multi-head self-attention with optional LoRA updates on its projections
/// and an optional gated prefix.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
    pub lora: Vec<LoraAttachment>,
}

/// Everything the attention forward needs besides its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionExtras {
    pub prefix: Option<PrefixInput>,
    /// Effective LoRA scale (scalar node); ignored when the block has no
    /// LoRA attachments.
    pub lora_scale: Option<Var>,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({heads}) must divide dim ({dim})"
            )));
        }
        let enc = Component::Encoder;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), enc, dim, dim, Init::Fan, rng),
            key: Linear::new(store, &format!("{name}.k"), enc, dim, dim, Init::Fan, rng),
            value: Linear::new(store, &format!("{name}.v"), enc, dim, dim, Init::Fan, rng),
            output: Linear::new(store, &format!("{name}.o"), enc, dim, dim, Init::Fan, rng),
            heads,
            dim,
            lora: Vec::new(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
        }
    }

    fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: Projection,
        x: Var,
        scale: Option<Var>,
    ) -> Result<Var> {
        let base = self.projection(p).forward(g, store, x)?;
        match (self.lora.iter().find(|a| a.target == p), scale) {
            (Some(att), Some(s)) => {
                let delta = att.apply_delta(g, store, x, s)?;
                g.add(base, delta)
            }
            _ => Ok(base),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_in: Var,
        extras: AttentionExtras,
    ) -> Result<Var> {
        self.forward_traced(g, store, h_in, extras).map(|(out, _)| out)
    }

    /// Like [`Self::forward`], also returning each head's attention weights
    /// (`[L0 x (L0 + L)]` with a prefix, `[L0 x L0]` without).
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_in: Var,
        extras: AttentionExtras,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(h_in).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "mhsa_forward",
                lhs: shape,
                rhs: vec![0, self.dim],
            });
        }
        let n_real = shape[0];
        if let Some(p) = &extras.prefix {
            for v in [p.keys, p.values] {
                let s = g.shape(v);
                if s.len() != 2 || s[1] != self.dim {
                    return Err(Error::ShapeMismatch {
                        op: "mhsa_forward prefix",
                        lhs: s.to_vec(),
                        rhs: vec![0, self.dim],
                    });
                }
            }
            if g.shape(p.keys) != g.shape(p.values) {
                return Err(Error::ShapeMismatch {
                    op: "mhsa_forward prefix",
                    lhs: g.shape(p.keys).to_vec(),
                    rhs: g.shape(p.values).to_vec(),
                });
            }
        }

        let s = extras.lora_scale;
        let q = self.project(g, store, Projection::Query, h_in, s)?;
        let k = self.project(g, store, Projection::Key, h_in, s)?;
        let v = self.project(g, store, Projection::Value, h_in, s)?;

        let dh = self.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let real = g.matmul_t(qh, kh)?;
            let real = g.scale(real, inv_sqrt);
            let (w, values) = match &extras.prefix {
                None => (g.softmax_lastdim(real)?, vh),
                Some(p) => {
                    let pk = g.slice_cols(p.keys, h * dh, dh)?;
                    let pv = g.slice_cols(p.values, h * dh, dh)?;
                    let pref = g.matmul_t(qh, pk)?;
                    let pref = g.scale(pref, inv_sqrt);
                    let scores = g.concat_cols(&[real, pref])?;
                    let w = g.gated_softmax(scores, n_real, p.gate)?;
                    (w, g.concat_rows(&[vh, pv])?)
                }
            };
            head_outs.push(g.matmul(w, values)?);
            weights.push(w);
        }
        let merged = g.concat_cols(&head_outs)?;
        let out = self.project(g, store, Projection::Output, merged, s)?;
        Ok((out, weights))
    }
}

/// Pre-norm transformer block with an optional adapter after the FFN
/// residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: AttentionBlock,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapter: Option<AdapterAttachment>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BlockExtras {
    pub attention: AttentionExtras,
    /// Adapter gate `G_A`; `None` means ungated (weight one).
    pub adapter_gate: Option<Var>,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = Component::Encoder;
        let hidden = dim * FFN_EXPANSION;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), enc, dim),
            attn: AttentionBlock::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), enc, dim),
            fc1: Linear::new(store, &format!("{name}.ffn.fc1"), enc, dim, hidden, Init::Fan, rng),
            fc2: Linear::new(store, &format!("{name}.ffn.fc2"), enc, hidden, dim, Init::Fan, rng),
            adapter: None,
        })
    }

    /// `Z_FN = h + fc2(gelu(fc1(ln2(h))))`
    pub fn ffn_forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let n = self.ln2.forward(g, store, h)?;
        let a = self.fc1.forward(g, store, n)?;
        let a = g.gelu(a);
        let f = self.fc2.forward(g, store, a)?;
        g.add(h, f)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        extras: BlockExtras,
    ) -> Result<Var> {
        let n = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n, extras.attention)?;
        let h = g.add(x, a)?;
        let z = self.ffn_forward(g, store, h)?;
        match &self.adapter {
            Some(ad) => ad.forward(g, store, z, extras.adapter_gate),
            None => Ok(z),
        }
    }
}

/// Splits an `[H x W x C]` image into non-overlapping `P x P x C` patches,
/// returned as `[(H/P)(W/P) x P*P*C]` rows in raster order of patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "image must be [H x W x C]".into(),
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("patch size {patch} does not divide image extents"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * row_len);
    let data = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * w + px * patch) * c;
                out.extend_from_slice(&data[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, row_len], out)
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        patch: usize,
        channels: usize,
        tokens: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(
            store,
            "patch_embed.proj",
            Component::Encoder,
            patch * patch * channels,
            dim,
            Init::Fan,
            rng,
        );
        let pos = store.add(
            "patch_embed.pos",
            Component::Encoder,
            Tensor::randn(&[tokens, dim], 0.1, rng),
        );
        Self { proj, pos, patch }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let patches = patchify(image, self.patch)?;
        let pos_shape = store.get(self.pos).tensor.shape().to_vec();
        if patches.rows() != pos_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: image.shape().to_vec(),
                rhs: pos_shape,
            });
        }
        let x = g.leaf(&patches);
        let t = self.proj.forward(g, store, x)?;
        let pos = g.param(store, self.pos);
        g.add(t, pos)
    }
}
