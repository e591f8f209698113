//! Binary checkpoints, all integers and floats little-endian:
//!
//! ```text
//! "MPFT" | version u32 | mode u32
//! dim layers heads patch image classes prompt_tokens
//!   rank prefix_len d_mid lora_targets gate_per_layer gate_hidden   (u32 each)
//! alpha_base f64 | gate_threshold f64
//! n_params u32
//! per param: name_len u32 | name bytes | rank u32 | extents u32 x rank | data f64 x numel
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::{GateConfig, ModelConfig, PeftConfig};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::peft::LoraTargets;

use super::{FineTuneMode, SegModel};

pub const MAGIC: &[u8; 4] = b"MPFT";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &SegModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.mode.tag().to_le_bytes());
    let (m, p, g) = (&model.model, &model.peft, &model.gate);
    for v in [
        m.dim,
        m.layers,
        m.heads,
        m.patch,
        m.image,
        m.classes,
        m.prompt_tokens,
        p.rank,
        p.prefix_len,
        p.d_mid,
        p.lora_targets.bits() as usize,
        g.per_layer as usize,
        g.hidden,
    ] {
        put_u32(&mut buf, v);
    }
    buf.extend_from_slice(&p.alpha_base.to_le_bytes());
    buf.extend_from_slice(&g.threshold.to_le_bytes());
    put_u32(&mut buf, model.store.len());
    for (_, param) in model.store.iter() {
        put_u32(&mut buf, param.name.len());
        buf.extend_from_slice(param.name.as_bytes());
        let shape = param.tensor.shape();
        put_u32(&mut buf, shape.len());
        for &e in shape {
            put_u32(&mut buf, e);
        }
        for v in param.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<()> {
    atomic_write(path, &encode(model))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. With `expected = Some(mode)` a checkpoint of any
/// other mode is rejected.
pub fn decode(bytes: &[u8], expected: Option<FineTuneMode>) -> Result<SegModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic (not an MPFT checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let tag = r.u32("mode")?;
    let mode = FineTuneMode::from_tag(tag as u32)
        .ok_or_else(|| Error::Format(format!("unknown mode tag {tag}")))?;
    if let Some(want) = expected {
        if want != mode {
            return Err(Error::ModeMismatch {
                expected: want.to_string(),
                found: mode.to_string(),
            });
        }
    }
    let mut ints = [0usize; 13];
    for v in ints.iter_mut() {
        *v = r.u32("config block")?;
    }
    let model_cfg = ModelConfig {
        dim: ints[0],
        layers: ints[1],
        heads: ints[2],
        patch: ints[3],
        image: ints[4],
        classes: ints[5],
        prompt_tokens: ints[6],
    };
    let lora_targets = LoraTargets::from_bits(ints[10] as u8)
        .ok_or_else(|| Error::Format(format!("bad LoRA target mask {}", ints[10])))?;
    let peft = PeftConfig {
        mode,
        rank: ints[7],
        alpha_base: r.f64("alpha_base")?,
        prefix_len: ints[8],
        d_mid: ints[9],
        lora_targets,
    };
    let gate = GateConfig {
        threshold: r.f64("gate threshold")?,
        per_layer: ints[11] != 0,
        hidden: ints[12],
    };
    let mut model = SegModel::build(&model_cfg, &peft, &gate, 0)
        .map_err(|e| Error::Format(format!("config block rejected: {e}")))?;

    let count = r.u32("parameter count")?;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "header describes {} parameters, file holds {count}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let param = model.store.get_mut(id);
        if name != param.name {
            return Err(Error::Format(format!(
                "expected parameter `{}`, found `{name}`",
                param.name
            )));
        }
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        if shape != param.tensor.shape() {
            return Err(Error::Format(format!(
                "`{name}` has extents {shape:?}, header implies {:?}",
                param.tensor.shape()
            )));
        }
        let numel = param.tensor.numel();
        let raw = r.take(numel * 8, "parameter data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trainable = param.trainable();
        param.tensor = Tensor::new(&shape, data)?.with_requires_grad(trainable);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path, expected: Option<FineTuneMode>) -> Result<SegModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}
