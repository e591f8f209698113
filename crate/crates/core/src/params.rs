use std::fmt;

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to. Drives the freezing
/// policy and the trainable-parameter report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Pretrained-encoder stand-in: patch embedding, blocks, final norm.
    Encoder,
    Prompt,
    Decoder,
    Lora,
    Prefix,
    Adapter,
    Gate,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Encoder,
        Component::Prompt,
        Component::Decoder,
        Component::Lora,
        Component::Prefix,
        Component::Adapter,
        Component::Gate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Prompt => "prompt",
            Component::Decoder => "decoder",
            Component::Lora => "lora",
            Component::Prefix => "prefix",
            Component::Adapter => "adapter",
            Component::Gate => "gate",
        }
    }

    /// Everything attached to (or part of) the image encoder.
    pub fn is_encoder_side(self) -> bool {
        !matches!(self, Component::Prompt | Component::Decoder)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Flat, insertion-ordered registry of named parameters. The trainable flag
/// of each parameter is its tensor's `requires_grad`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            component,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].tensor.set_requires_grad(trainable);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }
}
