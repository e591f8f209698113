//! The three parameter-efficient fine-tuning submodules and the
//! trainable-parameter accounting that goes with them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::kernels::matmul_acc;
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{GateConfig, ModelConfig, PeftConfig};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::model::FineTuneMode;
use crate::params::{Component, ParamId, ParamStore};

pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

/// Which attention projections receive LoRA updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraTargets {
    mask: u8,
}

impl LoraTargets {
    pub fn new(targets: &[Projection]) -> Self {
        let mut mask = 0;
        for &t in targets {
            mask |= 1 << (t as u8);
        }
        Self { mask }
    }

    pub fn contains(self, p: Projection) -> bool {
        self.mask & (1 << (p as u8)) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Projection> {
        Projection::ALL.into_iter().filter(move |&p| self.contains(p))
    }

    pub fn count(self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn bits(self) -> u8 {
        self.mask
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits != 0 && bits < 16).then_some(Self { mask: bits })
    }
}

impl Default for LoraTargets {
    fn default() -> Self {
        Self::new(&[Projection::Query, Projection::Value])
    }
}

impl fmt::Display for LoraTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Projection::short).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LoraTargets {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut targets = Vec::new();
        for part in s.split(',').map(str::trim) {
            let p = match part {
                "q" => Projection::Query,
                "k" => Projection::Key,
                "v" => Projection::Value,
                "o" => Projection::Output,
                other => return Err(format!("unknown projection `{other}` (use q,k,v,o)")),
            };
            if targets.contains(&p) {
                return Err(format!("projection `{part}` listed twice"));
            }
            targets.push(p);
        }
        if targets.is_empty() {
            return Err("at least one projection required".into());
        }
        Ok(Self::new(&targets))
    }
}

/// Low-rank update `ΔW = B A` on one projection of one layer.
/// `A: [r x k]`, `B: [d x r]`; `B` starts at zero so `ΔW = 0`.
#[derive(Debug, Clone)]
pub struct LoraAttachment {
    pub layer: usize,
    pub target: Projection,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d: usize,
    pub k: usize,
}

impl LoraAttachment {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layer: usize,
        target: Projection,
        d: usize,
        k: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {rank} must be in [1, min({d}, {k})]"
            )));
        }
        let name = format!("blocks.{layer}.lora_{}", target.short());
        let a = store.add(
            format!("{name}.a"),
            Component::Lora,
            Tensor::randn(&[rank, k], LORA_INIT_STD, rng),
        );
        let b = store.add(format!("{name}.b"), Component::Lora, Tensor::zeros(&[d, rank]));
        Ok(Self {
            layer,
            target,
            a,
            b,
            rank,
            d,
            k,
        })
    }

    /// `s * (x A^T) B^T` for token rows `x: [N x k]`, i.e. the LoRA term of
    /// `x (W0 + s B A)^T`. Never materialises `ΔW`.
    pub fn apply_delta(&self, g: &mut Graph, store: &ParamStore, x: Var, s: Var) -> Result<Var> {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let low = g.matmul_t(x, a)?;
        let up = g.matmul_t(low, b)?;
        g.mul(up, s)
    }

    /// `s * B A` as a graph node.
    pub fn delta(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let ba = g.matmul(b, a)?;
        g.mul(ba, s)
    }
}

/// `s * B A` on plain tensors.
pub fn lora_delta(a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sb[1] != sa[0] {
        return Err(Error::ShapeMismatch {
            op: "lora_delta",
            lhs: sb.to_vec(),
            rhs: sa.to_vec(),
        });
    }
    let (d, r, k) = (sb[0], sb[1], sa[1]);
    let mut out = vec![0.0; d * k];
    matmul_acc(b.data(), a.data(), &mut out, d, r, k);
    out.iter_mut().for_each(|v| *v *= s);
    Tensor::new(&[d, k], out)
}

/// `W0 + s B A`. Only meaningful for a constant scale.
pub fn lora_merge(w0: &Tensor, a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    let delta = lora_delta(a, b, s)?;
    if delta.shape() != w0.shape() {
        return Err(Error::ShapeMismatch {
            op: "lora_merge",
            lhs: w0.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let data = w0.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
    Tensor::new(w0.shape(), data)
}

/// `(W0 + s B A) x` for column inputs `x: [k x n]`, computed as
/// `W0 x + s B (A x)`.
pub fn lora_apply(w0: &Tensor, a: &Tensor, b: &Tensor, s: f64, x: &Tensor) -> Result<Tensor> {
    let (sw, sa, sb, sx) = (w0.shape(), a.shape(), b.shape(), x.shape());
    if sw.len() != 2
        || sx.len() != 2
        || sw[1] != sx[0]
        || sa.len() != 2
        || sa[1] != sw[1]
        || sb.len() != 2
        || sb[0] != sw[0]
        || sb[1] != sa[0]
    {
        return Err(Error::ShapeMismatch {
            op: "lora_apply",
            lhs: sw.to_vec(),
            rhs: sx.to_vec(),
        });
    }
    let (d, k, n, r) = (sw[0], sw[1], sx[1], sa[0]);
    let mut out = vec![0.0; d * n];
    matmul_acc(w0.data(), x.data(), &mut out, d, k, n);
    if s != 0.0 {
        let mut ax = vec![0.0; r * n];
        matmul_acc(a.data(), x.data(), &mut ax, r, k, n);
        let mut bax = vec![0.0; d * n];
        matmul_acc(b.data(), &ax, &mut bax, d, r, n);
        for (o, v) in out.iter_mut().zip(&bax) {
            *o += s * v;
        }
    }
    Tensor::new(&[d, n], out)
}

/// Learned prefixes: per-layer source embeddings `E_P: [L x D_src]` pushed
/// through a shared two-layer reparameterisation network whose
/// `2 D_hidden`-wide output is split into the prefix keys (first `D_hidden`
/// columns) and the prefix values (last `D_hidden` columns).
///
/// Materialised prefixes are token-major `[L x D_hidden]`: row `p` is the
/// `p`-th virtual key (or value), i.e. the transpose of a column layout.
#[derive(Debug, Clone)]
pub struct PrefixBank {
    pub len: usize,
    pub dim: usize,
    /// Layer indices carrying a prefix, in increasing order.
    pub layers: Vec<usize>,
    pub embeds: Vec<ParamId>,
    pub reparam_in: Linear,
    pub reparam_out: Linear,
}

impl PrefixBank {
    pub fn source_dim(dim: usize) -> usize {
        dim
    }

    pub fn reparam_hidden(dim: usize) -> usize {
        2 * dim
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        len: usize,
        layers: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidConfig("prefix length must be >= 1".into()));
        }
        let src = Self::source_dim(dim);
        let hid = Self::reparam_hidden(dim);
        let embeds = layers
            .iter()
            .map(|l| {
                store.add(
                    format!("prefix.embed.{l}"),
                    Component::Prefix,
                    Tensor::randn(&[len, src], 1.0, rng),
                )
            })
            .collect();
        let reparam_in = Linear::new(
            store,
            "prefix.reparam.fc1",
            Component::Prefix,
            src,
            hid,
            Init::Fan,
            rng,
        );
        let reparam_out = Linear::new(
            store,
            "prefix.reparam.fc2",
            Component::Prefix,
            hid,
            2 * dim,
            Init::Zeros,
            rng,
        );
        Ok(Self {
            len,
            dim,
            layers,
            embeds,
            reparam_in,
            reparam_out,
        })
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    /// Returns `(P_K, P_V)` for `layer`, each `[L x D_hidden]`.
    pub fn materialize(&self, g: &mut Graph, store: &ParamStore, layer: usize) -> Result<(Var, Var)> {
        let slot = self
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or(Error::OutOfRange {
                what: "prefix layer",
                index: layer,
                len: self.layers.len(),
            })?;
        let e = g.param(store, self.embeds[slot]);
        let h = self.reparam_in.forward(g, store, e)?;
        let h = g.gelu(h);
        let out = self.reparam_out.forward(g, store, h)?;
        let keys = g.slice_cols(out, 0, self.dim)?;
        let values = g.slice_cols(out, self.dim, self.dim)?;
        Ok((keys, values))
    }
}

/// Residual bottleneck after the FFN: `Z + G * up(gelu(down(Z)))`.
/// `up` starts at zero so the attachment is initially the identity.
#[derive(Debug, Clone)]
pub struct AdapterAttachment {
    pub down: Linear,
    pub up: Linear,
    pub d_mid: usize,
}

impl AdapterAttachment {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layer: usize,
        dim: usize,
        d_mid: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_mid == 0 {
            return Err(Error::InvalidConfig("adapter d_mid must be >= 1".into()));
        }
        let name = format!("blocks.{layer}.adapter");
        let down = Linear::new(
            store,
            &format!("{name}.down"),
            Component::Adapter,
            dim,
            d_mid,
            Init::Fan,
            rng,
        );
        let up = Linear::new(
            store,
            &format!("{name}.up"),
            Component::Adapter,
            d_mid,
            dim,
            Init::Zeros,
            rng,
        );
        Ok(Self { down, up, d_mid })
    }

    /// `gate = None` is the ungated adapter (weight one).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, gate: Option<Var>) -> Result<Var> {
        let h = self.down.forward(g, store, z)?;
        let h = g.gelu(h);
        let h = self.up.forward(g, store, h)?;
        let h = match gate {
            Some(gv) => g.mul(h, gv)?,
            None => h,
        };
        g.add(z, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentCount {
    pub component: Component,
    pub trainable: usize,
    pub frozen: usize,
}

impl ComponentCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

/// Trainable/frozen parameter counts, per component and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub components: Vec<ComponentCount>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

impl ParamReport {
    /// Counts by enumerating each parameter's trainable flag.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut components: Vec<ComponentCount> = Component::ALL
            .iter()
            .map(|&component| ComponentCount {
                component,
                trainable: 0,
                frozen: 0,
            })
            .collect();
        for (_, p) in store.iter() {
            let slot = components
                .iter_mut()
                .find(|c| c.component == p.component)
                .expect("every component listed");
            if p.trainable() {
                slot.trainable += p.tensor.numel();
            } else {
                slot.frozen += p.tensor.numel();
            }
        }
        let trainable = components.iter().map(|c| c.trainable).sum();
        let frozen = components.iter().map(|c| c.frozen).sum();
        Self {
            components,
            trainable,
            frozen,
            total: trainable + frozen,
        }
    }

    pub fn component(&self, c: Component) -> ComponentCount {
        *self.components.iter().find(|x| x.component == c).unwrap()
    }

    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn encoder_side_trainable(&self) -> usize {
        self.components
            .iter()
            .filter(|c| c.component.is_encoder_side())
            .map(|c| c.trainable)
            .sum()
    }

    pub fn encoder_side_total(&self) -> usize {
        self.components
            .iter()
            .filter(|c| c.component.is_encoder_side())
            .map(|c| c.total())
            .sum()
    }

    /// Encoder-side trainable / encoder-side total (decoder and prompt
    /// tokens excluded from both).
    pub fn encoder_side_ratio(&self) -> f64 {
        self.encoder_side_trainable() as f64 / self.encoder_side_total() as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>10} {:>10}", "component", "trainable", "frozen", "total")?;
        for c in &self.components {
            if c.total() > 0 {
                writeln!(
                    f,
                    "{:<10} {:>10} {:>10} {:>10}",
                    c.component.name(),
                    c.trainable,
                    c.frozen,
                    c.total()
                )?;
            }
        }
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>10}",
            "all", self.trainable, self.frozen, self.total
        )?;
        writeln!(f, "trainable/total          {:.6}", self.ratio())?;
        write!(f, "encoder-side trainable   {:.6}", self.encoder_side_ratio())
    }
}

/// Closed-form trainable counts per component for a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExpectedTrainable {
    pub lora: usize,
    pub prefix: usize,
    pub adapter: usize,
    pub gate: usize,
    pub decoder: usize,
}

impl ExpectedTrainable {
    pub fn total(&self) -> usize {
        self.lora + self.prefix + self.adapter + self.gate + self.decoder
    }

    pub fn get(&self, c: Component) -> usize {
        match c {
            Component::Lora => self.lora,
            Component::Prefix => self.prefix,
            Component::Adapter => self.adapter,
            Component::Gate => self.gate,
            Component::Decoder => self.decoder,
            Component::Encoder | Component::Prompt => 0,
        }
    }
}

/// Closed forms:
/// - LoRA: `sum over targets of r (d + k)`, here `layers * |targets| * r * 2D`
/// - prefix: `n_prefix_layers * L * D_src` plus the reparameterisation net
/// - adapter: `layers * (2 D D_mid + D_mid + D)`
/// - gates: `n_gates * (D D_g + D_g + D_g + 1)`
/// - decoder: `D C + C`
pub fn expected_trainable(
    model: &ModelConfig,
    peft: &PeftConfig,
    gate: &GateConfig,
    mode: FineTuneMode,
) -> ExpectedTrainable {
    let d = model.dim;
    let n = model.layers;
    let mut out = ExpectedTrainable::default();
    if mode.has_lora() {
        out.lora = n * peft.lora_targets.count() * peft.rank * (d + d);
    }
    if mode.has_prefix() {
        let src = PrefixBank::source_dim(d);
        let hid = PrefixBank::reparam_hidden(d);
        let reparam = src * hid + hid + hid * 2 * d + 2 * d;
        out.prefix = mode.prefix_layers(n).len() * peft.prefix_len * src + reparam;
    }
    if mode.has_adapter() {
        out.adapter = n * (2 * d * peft.d_mid + peft.d_mid + d);
    }
    if mode.has_gates() {
        let gates = 3 * if gate.per_layer { n } else { 1 };
        out.gate = gates * (d * gate.hidden + gate.hidden + gate.hidden + 1);
    }
    if mode.decoder_trainable() {
        out.decoder = d * model.classes + model.classes;
    }
    out
}
