use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Class-by-class pixel counts, `counts[gt * C + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "miou",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        let c = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= c || g >= c {
                return Err(Error::ClassOutOfRange {
                    class: p.max(g),
                    classes: c,
                });
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// `IoU_c = TP / (TP + FP + FN)`; `None` for classes absent from both
    /// prediction and ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let pr: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = gt + pr - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes; 0 when nothing has been added.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// mIoU of a single prediction grid and its per-class IoUs.
pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    Ok((c.miou(), c.per_class()))
}

/// Mean over pixels of `-log softmax(logits)[target]` for `[H x W x C]`
/// logits.
pub fn cross_entropy(logits: &Tensor, target: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    let c = *shape.last().unwrap();
    let rows = logits.numel() / c;
    let mut g = Graph::new();
    let x = g.constant(&[rows, c], logits.data().to_vec())?;
    let loss = g.cross_entropy(x, target)?;
    Ok(g.scalar_value(loss))
}
