use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, FiniteDiff, GradReport, Graph, Tensor, Var};
use crate::config::{ExperimentConfig, GateConfig, ModelConfig, PeftConfig};
use crate::error::{Error, Result};
use crate::gating::{GateMethod, GateNet, GateValues};
use crate::layers::{
    AttentionExtras, BlockExtras, Init, LayerNorm, Linear, PatchEmbed, PrefixInput,
    TransformerBlock,
};
use crate::params::{Component, ParamId, ParamStore};
use crate::peft::{lora_merge, AdapterAttachment, LoraAttachment, PrefixBank};

use super::FineTuneMode;

/// Images are single-channel.
pub const CHANNELS: usize = 1;

// Independent RNG streams so that, for one seed, the base encoder is the
// same in every mode regardless of which attachments are built.
const STREAM_ENCODER: u64 = 0;
const STREAM_PROMPT: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_LORA: u64 = 3;
const STREAM_PREFIX: u64 = 4;
const STREAM_ADAPTER: u64 = 5;
const STREAM_GATE: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Forces gate values instead of evaluating the gate networks. In modes
/// without gates the prefix/adapter weight and the LoRA gate default to one
/// (so `s = alpha_base / r`); an override replaces that constant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateOverride {
    pub lora: Option<f64>,
    pub prefix: Option<f64>,
    pub adapter: Option<f64>,
}

impl GateOverride {
    pub const NONE: GateOverride = GateOverride {
        lora: None,
        prefix: None,
        adapter: None,
    };

    pub fn closed() -> Self {
        Self::all(0.0)
    }

    pub fn open() -> Self {
        Self::all(1.0)
    }

    pub fn all(v: f64) -> Self {
        Self {
            lora: Some(v),
            prefix: Some(v),
            adapter: Some(v),
        }
    }

    fn get(&self, m: GateMethod) -> Option<f64> {
        match m {
            GateMethod::Lora => self.lora,
            GateMethod::Prefix => self.prefix,
            GateMethod::Adapter => self.adapter,
        }
    }

    fn validate(&self) -> Result<()> {
        for m in GateMethod::ALL {
            if let Some(v) = self.get(m) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidConfig(format!(
                        "{m} gate override {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tiny ViT encoder, frozen prompt tokens and a per-token linear mask
/// decoder with nearest-neighbour upsampling.
///
/// Decoder: `logits_patch = head(final_norm(z) + mean(prompt))`, then every
/// pixel takes the logits of the patch containing it.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub mode: FineTuneMode,
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub gate: GateConfig,
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub prompt: ParamId,
    pub head: Linear,
    pub prefix: Option<PrefixBank>,
    /// One row of three gates per block, or a single shared row.
    pub gates: Vec<[GateNet; 3]>,
    upsample: Vec<usize>,
}

impl SegModel {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Self::build(&cfg.model, &cfg.peft, &cfg.gate, cfg.seed)
    }

    pub fn build(model: &ModelConfig, peft: &PeftConfig, gate: &GateConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        let mode = peft.mode;
        let (d, n) = (model.dim, model.layers);
        let mut store = ParamStore::new();

        let mut rng = stream(seed, STREAM_ENCODER);
        let embed = PatchEmbed::new(&mut store, model.patch, CHANNELS, model.tokens(), d, &mut rng);
        let mut blocks = Vec::with_capacity(n);
        for l in 0..n {
            blocks.push(TransformerBlock::new(
                &mut store,
                &format!("blocks.{l}"),
                d,
                model.heads,
                &mut rng,
            )?);
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", Component::Encoder, d);

        let mut rng = stream(seed, STREAM_PROMPT);
        let prompt = store.add(
            "prompt.tokens",
            Component::Prompt,
            Tensor::randn(&[model.prompt_tokens, d], 0.1, &mut rng),
        );

        let mut rng = stream(seed, STREAM_DECODER);
        let head = Linear::new(
            &mut store,
            "decoder.head",
            Component::Decoder,
            d,
            model.classes,
            Init::Fan,
            &mut rng,
        );

        if mode.has_lora() {
            let mut rng = stream(seed, STREAM_LORA);
            for (l, block) in blocks.iter_mut().enumerate() {
                for p in peft.lora_targets.iter() {
                    let att = LoraAttachment::new(&mut store, l, p, d, d, peft.rank, &mut rng)?;
                    block.attn.lora.push(att);
                }
            }
        }

        let prefix = if mode.has_prefix() {
            let mut rng = stream(seed, STREAM_PREFIX);
            Some(PrefixBank::new(
                &mut store,
                d,
                peft.prefix_len,
                mode.prefix_layers(n),
                &mut rng,
            )?)
        } else {
            None
        };

        if mode.has_adapter() {
            let mut rng = stream(seed, STREAM_ADAPTER);
            for (l, block) in blocks.iter_mut().enumerate() {
                block.adapter = Some(AdapterAttachment::new(&mut store, l, d, peft.d_mid, &mut rng)?);
            }
        }

        let mut gates = Vec::new();
        if mode.has_gates() {
            let mut rng = stream(seed, STREAM_GATE);
            let rows: Vec<Option<usize>> = if gate.per_layer {
                (0..n).map(Some).collect()
            } else {
                vec![None]
            };
            for layer in rows {
                gates.push(GateMethod::ALL.map(|m| {
                    GateNet::new(&mut store, layer, m, d, gate.hidden, &mut rng)
                }));
            }
        }

        // freezing policy
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let trainable = match store.get(id).component {
                Component::Encoder | Component::Prompt => false,
                Component::Decoder => mode.decoder_trainable(),
                Component::Lora | Component::Prefix | Component::Adapter | Component::Gate => true,
            };
            store.set_trainable(id, trainable);
        }

        let grid = model.grid();
        let upsample = (0..model.image * model.image)
            .map(|i| {
                let (y, x) = (i / model.image, i % model.image);
                (y / model.patch) * grid + x / model.patch
            })
            .collect();

        Ok(Self {
            mode,
            model: model.clone(),
            peft: peft.clone(),
            gate: gate.clone(),
            store,
            embed,
            blocks,
            final_norm,
            prompt,
            head,
            prefix,
            gates,
            upsample,
        })
    }

    pub fn pixels(&self) -> usize {
        self.model.image * self.model.image
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.model.image, self.model.image, CHANNELS]
    }

    fn gate_row(&self, layer: usize) -> Option<&[GateNet; 3]> {
        if self.gates.is_empty() {
            None
        } else if self.gates.len() == 1 {
            Some(&self.gates[0])
        } else {
            Some(&self.gates[layer])
        }
    }

    pub fn lora_base_scale(&self) -> f64 {
        self.peft.alpha_base / self.peft.rank as f64
    }

    /// Materialises every layer's prefix once; the result is shared by all
    /// samples built into `g`.
    pub fn prefix_vars(&self, g: &mut Graph) -> Result<Vec<Option<(Var, Var)>>> {
        self.prefix_vars_in(&self.store, g)
    }

    /// [`Self::prefix_vars`] reading parameters from `store` instead of the
    /// model's own store (which must have the same layout).
    pub fn prefix_vars_in(&self, store: &ParamStore, g: &mut Graph) -> Result<Vec<Option<(Var, Var)>>> {
        let mut out = vec![None; self.blocks.len()];
        if let Some(bank) = &self.prefix {
            for &l in &bank.layers {
                out[l] = Some(bank.materialize(g, store, l)?);
            }
        }
        Ok(out)
    }

    /// Builds one sample's forward into `g`. Returns pixel logits
    /// `[H*W x C]` (row-major pixels) and the gate values used, when the
    /// mode has gates.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        image: &Tensor,
        ov: GateOverride,
        prefixes: &[Option<(Var, Var)>],
    ) -> Result<(Var, Option<GateValues>)> {
        self.forward_graph_in(&self.store, g, image, ov, prefixes)
    }

    pub fn forward_graph_in(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        image: &Tensor,
        ov: GateOverride,
        prefixes: &[Option<(Var, Var)>],
    ) -> Result<(Var, Option<GateValues>)> {
        ov.validate()?;
        if image.shape() != self.image_shape() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: image.shape().to_vec(),
                rhs: self.image_shape().to_vec(),
            });
        }
        let mut x = self.embed.forward(g, store, image)?;
        let mut values = self.mode.has_gates().then(GateValues::default);
        let base_scale = self.lora_base_scale();

        for (l, block) in self.blocks.iter().enumerate() {
            let mut gv = [0.0; 3];
            let mut gate_var = |g: &mut Graph, m: GateMethod| -> Result<Var> {
                let v = match (ov.get(m), self.gate_row(l)) {
                    (Some(forced), _) => g.scalar(forced),
                    (None, Some(row)) => row[m.index()].forward(g, store, x)?,
                    (None, None) => g.scalar(1.0),
                };
                gv[m.index()] = g.value(v)[0];
                Ok(v)
            };

            let mut extras = BlockExtras::default();
            if self.mode.has_lora() {
                let gl = gate_var(g, GateMethod::Lora)?;
                extras.attention.lora_scale = Some(g.scale(gl, base_scale));
            }
            if let Some((keys, values)) = prefixes.get(l).copied().flatten() {
                let gate = gate_var(g, GateMethod::Prefix)?;
                extras.attention = AttentionExtras {
                    prefix: Some(PrefixInput { keys, values, gate }),
                    ..extras.attention
                };
            }
            if self.mode.has_adapter() {
                extras.adapter_gate = Some(gate_var(g, GateMethod::Adapter)?);
            }
            if let Some(vals) = values.as_mut() {
                vals.values.push(gv);
            }
            x = block.forward(g, store, x, extras)?;
        }

        let z = self.final_norm.forward(g, store, x)?;
        let prompt = g.param(store, self.prompt);
        let ctx = g.mean_rows(prompt);
        let ctx = g.reshape(ctx, &[self.model.dim])?;
        let z = g.add_row(z, ctx)?;
        let patch_logits = self.head.forward(g, store, z)?;
        let logits = g.gather_rows(patch_logits, &self.upsample)?;
        Ok((logits, values))
    }

    /// Pixel logits as an `[H x W x C]` tensor.
    pub fn forward(&self, image: &Tensor, ov: GateOverride) -> Result<(Tensor, Option<GateValues>)> {
        let mut g = Graph::new();
        let prefixes = self.prefix_vars(&mut g)?;
        let (logits, values) = self.forward_graph(&mut g, image, ov, &prefixes)?;
        let data = g.value(logits).to_vec();
        let t = Tensor::new(&[self.model.image, self.model.image, self.model.classes], data)?;
        Ok((t, values))
    }

    /// Mean per-pixel cross-entropy over a batch, built into `g`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[(&Tensor, &[usize])],
        ov: GateOverride,
    ) -> Result<(Var, Vec<Option<GateValues>>)> {
        self.batch_loss_in(&self.store, g, batch, ov)
    }

    pub fn batch_loss_in(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &[(&Tensor, &[usize])],
        ov: GateOverride,
    ) -> Result<(Var, Vec<Option<GateValues>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let prefixes = self.prefix_vars_in(store, g)?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut gates = Vec::with_capacity(batch.len());
        for &(image, mask) in batch {
            let (logits, gv) = self.forward_graph_in(store, g, image, ov, &prefixes)?;
            losses.push(g.cross_entropy(logits, mask)?);
            gates.push(gv);
        }
        let stacked = g.concat_cols(&losses)?;
        let total = g.sum(stacked);
        Ok((g.scale(total, 1.0 / batch.len() as f64), gates))
    }

    /// Per-pixel argmax class, row-major.
    pub fn predict(&self, image: &Tensor, ov: GateOverride) -> Result<(Vec<usize>, Option<GateValues>)> {
        let (logits, gv) = self.forward(image, ov)?;
        let c = self.model.classes;
        let pred = logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Ok((pred, gv))
    }

    /// Folds every LoRA update into its base projection with the constant
    /// scale `alpha_base / r` and removes the attachments. Only defined for
    /// the ungated LoRA mode; the result is an inference-only model.
    pub fn merge_lora(&self) -> Result<SegModel> {
        if self.mode != FineTuneMode::Lora {
            return Err(Error::InvalidConfig(format!(
                "LoRA merge needs a constant scale; mode {} has none",
                self.mode
            )));
        }
        let mut out = self.clone();
        let s = self.lora_base_scale();
        for block in &mut out.blocks {
            let atts = std::mem::take(&mut block.attn.lora);
            for att in atts {
                let w_id = block.attn.projection(att.target).weight;
                let merged = lora_merge(
                    &out.store.get(w_id).tensor,
                    &out.store.get(att.a).tensor,
                    &out.store.get(att.b).tensor,
                    s,
                )?;
                let p = out.store.get_mut(w_id);
                let trainable = p.trainable();
                p.tensor = merged.with_requires_grad(trainable);
            }
        }
        Ok(out)
    }

    /// Finite-difference check of the batch loss over every trainable
    /// parameter. The model itself is left untouched.
    pub fn gradcheck(
        &self,
        opts: FiniteDiff,
        batch: &[(&Tensor, &[usize])],
        ov: GateOverride,
    ) -> Result<GradReport> {
        let mut store = self.store.clone();
        finite_diff_check(&mut store, opts, |s, g| {
            self.batch_loss_in(s, g, batch, ov).map(|(loss, _)| loss)
        })
    }

    /// Adds seeded `N(0, std^2)` noise to every trainable parameter. Moves a
    /// fresh model off its zero-initialised attachments, e.g. before a
    /// gradient check.
    pub fn perturb_trainable(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.store.trainable_ids() {
            let p = self.store.get_mut(id);
            let noise = Tensor::randn(p.tensor.shape(), std, &mut rng);
            for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }

    pub fn param_report(&self) -> crate::peft::ParamReport {
        crate::peft::ParamReport::from_store(&self.store)
    }

    /// Names of every parameter whose trainable flag is set.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.name.as_str())
            .collect()
    }
}
