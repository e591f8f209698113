//! Optimiser, loss, segmentation metrics and the step-budgeted training
//! loop.

mod adam;
mod metrics;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamState, BETA1, BETA2, EPS};
pub use metrics::{cross_entropy, miou, Confusion};

use crate::autodiff::{Graph, Tensor};
use crate::config::TrainConfig;
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::gating::{GateMethod, GateTelemetry};
use crate::model::{GateOverride, SegModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    /// Mean gate value per method over samples and layers (gated modes).
    pub gate_means: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub gate_means: Option<[f64; 3]>,
}

impl EvalResult {
    pub fn row(self, epoch: usize, split: Split) -> MetricsRow {
        MetricsRow {
            epoch,
            split,
            loss: self.loss,
            miou: self.miou,
            per_class: self.per_class,
            gate_means: self.gate_means,
        }
    }
}

fn argmax_rows(data: &[f64], c: usize) -> Vec<usize> {
    data.chunks(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean loss, dataset-level mIoU (one confusion matrix over all samples)
/// and mean gate values.
pub fn evaluate(model: &SegModel, data: &[Prepared], ov: GateOverride) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate an empty split".into()));
    }
    let c = model.model.classes;
    let mut conf = Confusion::new(c);
    let mut loss = 0.0;
    let mut gate_sum = [0.0; 3];
    let mut gate_n = 0usize;
    for s in data {
        let mut g = Graph::new();
        let prefixes = model.prefix_vars(&mut g)?;
        let (logits, gv) = model.forward_graph(&mut g, &s.image, ov, &prefixes)?;
        let l = g.cross_entropy(logits, &s.mask)?;
        loss += g.scalar_value(l);
        conf.add(&argmax_rows(g.value(logits), c), &s.mask)?;
        if let Some(gv) = gv {
            for row in &gv.values {
                for m in GateMethod::ALL {
                    gate_sum[m.index()] += row[m.index()];
                }
                gate_n += 1;
            }
        }
    }
    let gate_means = model
        .mode
        .has_gates()
        .then(|| gate_sum.map(|s| s / gate_n.max(1) as f64));
    Ok(EvalResult {
        loss: loss / data.len() as f64,
        miou: conf.miou(),
        per_class: conf.per_class(),
        gate_means,
    })
}

/// Gate activations of one inference pass; sample ids are positions in
/// `data`. Empty for modes without gates.
pub fn infer_telemetry(model: &SegModel, data: &[Prepared]) -> Result<GateTelemetry> {
    let mut t = GateTelemetry::new();
    if !model.mode.has_gates() {
        return Ok(t);
    }
    for (i, s) in data.iter().enumerate() {
        let mut g = Graph::new();
        let prefixes = model.prefix_vars(&mut g)?;
        let (_, gv) = model.forward_graph(&mut g, &s.image, GateOverride::NONE, &prefixes)?;
        t.record_sample(i, &gv.expect("gated mode reports gate values"))?;
    }
    Ok(t)
}

fn max_abs_grad(model: &SegModel) -> f64 {
    model
        .store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

/// One optimiser step on `batch`. Returns the loss before the update.
pub fn train_step(
    model: &mut SegModel,
    adam: &mut AdamState,
    batch: &[(&Tensor, &[usize])],
    step: usize,
) -> Result<f64> {
    model.store.zero_grad();
    let mut g = Graph::new();
    let nan = |model: &SegModel| Error::NonFiniteLoss {
        step,
        lr: adam.lr,
        max_grad: max_abs_grad(model),
    };
    let loss = match model.batch_loss(&mut g, batch, GateOverride::NONE) {
        Ok((loss, _)) => loss,
        Err(Error::NonFinite(_)) => return Err(nan(model)),
        Err(e) => return Err(e),
    };
    let value = g.scalar_value(loss);
    if !value.is_finite() {
        return Err(nan(model));
    }
    g.backward_into(loss, &mut model.store)?;
    drop(g);
    let max_grad = max_abs_grad(model);
    if !max_grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            lr: adam.lr,
            max_grad,
        });
    }
    adam.step(&mut model.store)?;
    Ok(value)
}

/// Seeded shuffles cut into fixed-size batches. Samples left over at the
/// end of a pass wait for the next reshuffle.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            rng,
            order,
            pos: 0,
            batch: batch.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Fixed-step training. After every `eval_every` steps (and after the last
/// step) one epoch row is emitted for each split, evaluated with the
/// current weights. Baseline and `steps = 0` evaluate once (epoch 0, val).
///
/// Frozen parameters are compared bitwise against their initial values at
/// the end.
pub fn train(
    model: &mut SegModel,
    train_set: &[Prepared],
    val_set: &[Prepared],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    if !model.mode.trains() || cfg.steps == 0 {
        return Ok(vec![evaluate(model, val_set, GateOverride::NONE)?.row(0, Split::Val)]);
    }
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let frozen: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| !p.trainable())
        .map(|(id, p)| (id, p.tensor.data().to_vec()))
        .collect();

    let mut adam = AdamState::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(train_set.len(), cfg.batch, seed);
    let mut rows = Vec::new();
    let mut epoch = 0;
    for step in 1..=cfg.steps {
        let idx = sampler.next();
        let batch: Vec<(&Tensor, &[usize])> = idx
            .iter()
            .map(|&i| (&train_set[i].image, &train_set[i].mask[..]))
            .collect();
        train_step(model, &mut adam, &batch, step)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            epoch += 1;
            rows.push(evaluate(model, train_set, GateOverride::NONE)?.row(epoch, Split::Train));
            rows.push(evaluate(model, val_set, GateOverride::NONE)?.row(epoch, Split::Val));
        }
    }
    model.store.zero_grad();

    for (id, before) in frozen {
        let p = model.store.get(id);
        let same = p
            .tensor
            .data()
            .iter()
            .zip(&before)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FrozenParamMutated(p.name.clone()));
        }
    }
    Ok(rows)
}
