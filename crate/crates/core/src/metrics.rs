//! Confusion matrices, per-class IoU and the incremental mIoU aggregates.
//!
//! Confusion matrices are indexed by channel (0 = background, then learned
//! classes in plan order). Reports map channels back to dataset class ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::protocol::{contiguous_table, ClassId, IncrementPlan, LabeledSample, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    /// Row-major `[gt][pred]`.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Adds one count per non-ignored pixel. Fails without modifying `self`
    /// if any id is out of range.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Label(format!(
                    "label pair (gt {g}, pred {p}) outside {k} classes"
                )));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`; `None` when the class is neither present nor predicted.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
    pub inc_miou: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates over channel-indexed IoU at `step`. Absent classes are left
/// out of every mean; a group with no present class yields `None`.
pub fn aggregate(iou: &[Option<f64>], plan: &IncrementPlan, step: usize) -> Result<Aggregates> {
    if step >= plan.num_increments() {
        return Err(Error::InvalidArgument(format!("step {step} outside plan")));
    }
    let learned = plan.learned_sizes(step);
    let expected = 1 + learned.iter().sum::<usize>();
    if iou.len() != expected {
        return Err(Error::Shape(format!(
            "expected IoU for {expected} channels at step {step}, got {}",
            iou.len()
        )));
    }
    if learned.contains(&0) {
        return Err(Error::InvalidArgument("empty class group".into()));
    }
    let mut groups = Vec::with_capacity(learned.len());
    let mut start = 1;
    for &k in learned {
        groups.push(&iou[start..start + k]);
        start += k;
    }
    let group_mean = |g: &[Option<f64>]| mean_present(g.iter().copied());
    let increments: Vec<Option<f64>> = groups.iter().map(|g| group_mean(g)).collect();
    Ok(Aggregates {
        base: group_mean(groups[0]),
        new: if step == 0 {
            None
        } else {
            mean_present(groups[1..].iter().flat_map(|g| g.iter().copied()))
        },
        all: mean_present(iou.iter().copied()),
        inc_miou: mean_present(increments.into_iter()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub learned_classes: Vec<ClassId>,
    /// Background (class 0) first, then learned classes in plan order.
    pub per_class_iou: Vec<ClassIou>,
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
    pub inc_miou: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

pub const CSV_HEADER: &str = "step,learned_classes,base,new,all,inc_miou";

fn csv_value(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn from_confusion(confusion: &Confusion, plan: &IncrementPlan, step: usize) -> Result<Self> {
        let iou = confusion.iou_per_class();
        let agg = aggregate(&iou, plan, step)?;
        let learned = plan.learned_classes(step).to_vec();
        let per_class_iou = std::iter::once(0)
            .chain(learned.iter().copied())
            .zip(&iou)
            .map(|(class, &iou)| ClassIou { class, iou })
            .collect();
        Ok(Self {
            step,
            learned_classes: learned,
            per_class_iou,
            base: agg.base,
            new: agg.new,
            all: agg.all,
            inc_miou: agg.inc_miou,
            confusion: confusion.rows(),
        })
    }

    /// One line matching [`CSV_HEADER`]; learned classes are `;`-separated.
    pub fn csv_row(&self) -> String {
        let classes: Vec<String> = self.learned_classes.iter().map(u8::to_string).collect();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            classes.join(";"),
            csv_value(self.base),
            csv_value(self.new),
            csv_value(self.all),
            csv_value(self.inc_miou)
        )
    }
}

const EVAL_BATCH: usize = 16;

/// Evaluates `model` after `step` on `samples`. Ground-truth pixels of
/// classes not learned yet are ignored.
pub fn evaluate(
    model: &SegModel,
    samples: &[LabeledSample],
    plan: &IncrementPlan,
    step: usize,
    balancing: bool,
) -> Result<MetricsReport> {
    let learned = plan.learned_classes(step);
    if model.num_classes() != learned.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, plan step {step} has {}",
            model.num_classes(),
            learned.len()
        )));
    }
    let mut table = contiguous_table(learned);
    for slot in table.iter_mut().skip(1) {
        if *slot == 0 {
            *slot = IGNORE_LABEL;
        }
    }
    let mut confusion = Confusion::new(learned.len() + 1);
    for chunk in samples.chunks(EVAL_BATCH) {
        let shape = chunk[0].image.shape().to_vec();
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].image.numel());
        let mut gt = Vec::new();
        for s in chunk {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Shape("evaluation images differ in size".into()));
            }
            data.extend_from_slice(s.image.data());
            gt.extend(s.labels.data().iter().map(|&y| table[y as usize]));
        }
        let mut batch_shape = vec![chunk.len()];
        batch_shape.extend_from_slice(&shape);
        let pred = model.predict(&Tensor::new(&batch_shape, data)?, balancing)?;
        confusion.accumulate(&pred, &gt)?;
    }
    MetricsReport::from_confusion(&confusion, plan, step)
}
