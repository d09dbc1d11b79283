//! Class-incremental task construction.
//!
//! An [`IncrementPlan`] splits the foreground classes into disjoint ordered
//! increments. [`build_increment`] derives the training set of one step
//! under the overlapped, disjoint, pseudo-disjoint or joint setting.

mod corpus;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use corpus::{generate_shapes_corpus, load_corpus, save_corpus, ClassStat, Corpus, CorpusConfig, Manifest, ManifestEntry, SizeProfile, Split};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from every loss, weight count and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Background is 0; foreground classes are `1..=254`.
pub type ClassId = u8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Foreground classes with at least one pixel.
    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        self.data
            .iter()
            .copied()
            .filter(|&v| v != 0 && v != IGNORE_LABEL)
            .collect()
    }

    pub fn map(&self, table: &[u8; 256]) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| table[v as usize]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    /// `C×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

impl LabeledSample {
    pub fn new(id: usize, image: Tensor, labels: LabelMap) -> Result<Self> {
        let &[_, h, w] = image.shape() else {
            return Err(Error::Shape(format!("image must be C×H×W, got {:?}", image.shape())));
        };
        if (h, w) != (labels.height(), labels.width()) {
            return Err(Error::Shape(format!(
                "image {h}x{w} and labels {}x{} differ",
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self { id, image, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Overlapped,
    Disjoint,
    PseudoDisjoint,
    Joint,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Overlapped => "overlapped",
            Setting::Disjoint => "disjoint",
            Setting::PseudoDisjoint => "pseudo_disjoint",
            Setting::Joint => "joint",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "overlapped" | "overlap" => Ok(Setting::Overlapped),
            "disjoint" => Ok(Setting::Disjoint),
            "pseudo_disjoint" => Ok(Setting::PseudoDisjoint),
            "joint" => Ok(Setting::Joint),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementPlan {
    class_order: Vec<ClassId>,
    increment_sizes: Vec<usize>,
    setting: Setting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_images_per_class: Option<usize>,
}

impl IncrementPlan {
    pub fn new(
        class_order: Vec<ClassId>,
        increment_sizes: Vec<usize>,
        setting: Setting,
        min_images_per_class: Option<usize>,
    ) -> Result<Self> {
        let plan = Self {
            class_order,
            increment_sizes,
            setting,
            min_images_per_class,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Protocol(m));
        if self.class_order.is_empty() {
            return bad("class order is empty".into());
        }
        if let Some(&c) = self.class_order.iter().find(|&&c| c == 0 || c == IGNORE_LABEL) {
            return bad(format!("class id {c} is reserved"));
        }
        let unique: BTreeSet<_> = self.class_order.iter().collect();
        if unique.len() != self.class_order.len() {
            return bad("class order repeats a class".into());
        }
        if self.increment_sizes.is_empty() || self.increment_sizes.contains(&0) {
            return bad(format!("increment sizes {:?} must be positive", self.increment_sizes));
        }
        if self.increment_sizes.iter().sum::<usize>() != self.class_order.len() {
            return bad(format!(
                "increment sizes {:?} do not cover {} classes",
                self.increment_sizes,
                self.class_order.len()
            ));
        }
        if self.setting == Setting::Joint && self.increment_sizes.len() != 1 {
            return bad("the joint setting has exactly one increment".into());
        }
        match (self.setting, self.min_images_per_class) {
            (Setting::PseudoDisjoint, Some(0)) => bad("min_images_per_class must be positive".into()),
            (Setting::PseudoDisjoint, _) | (_, None) => Ok(()),
            (_, Some(_)) => bad("min_images_per_class only applies to pseudo_disjoint".into()),
        }
    }

    /// Expands a task name: `joint`, or `B-I` meaning a base of `B` classes
    /// followed by increments of `I` until the classes run out.
    pub fn from_task(task: &str, class_order: Vec<ClassId>, setting: Setting) -> Result<Self> {
        let total = class_order.len();
        if task == "joint" || setting == Setting::Joint {
            if task != "joint" {
                return Err(Error::Protocol(format!("task `{task}` is not a joint task")));
            }
            return Self::new(class_order, vec![total], Setting::Joint, None);
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Protocol(format!("bad task `{task}`, expected B-I or joint")))
        };
        let (base, inc) = task
            .split_once('-')
            .ok_or_else(|| Error::Protocol(format!("bad task `{task}`, expected B-I or joint")))?;
        let (base, inc) = (parse(base)?, parse(inc)?);
        if base >= total {
            return Err(Error::Protocol(format!(
                "task `{task}` needs more than {base} classes, corpus has {total}"
            )));
        }
        let mut sizes = vec![base];
        let mut left = total - base;
        while left > 0 {
            sizes.push(inc.min(left));
            left -= inc.min(left);
        }
        let min_images = (setting == Setting::PseudoDisjoint).then_some(1);
        Self::new(class_order, sizes, setting, min_images)
    }

    pub fn with_min_images_per_class(mut self, min: usize) -> Result<Self> {
        self.min_images_per_class = Some(min);
        self.validate()?;
        Ok(self)
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    pub fn increment_sizes(&self) -> &[usize] {
        &self.increment_sizes
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn min_images_per_class(&self) -> Option<usize> {
        self.min_images_per_class
    }

    pub fn num_increments(&self) -> usize {
        self.increment_sizes.len()
    }

    pub fn total_classes(&self) -> usize {
        self.class_order.len()
    }

    fn offset(&self, t: usize) -> usize {
        self.increment_sizes[..t].iter().sum()
    }

    /// Classes of increment `t`.
    pub fn increment(&self, t: usize) -> &[ClassId] {
        let start = self.offset(t);
        &self.class_order[start..start + self.increment_sizes[t]]
    }

    /// Classes of increments `0..=t`, in model channel order.
    pub fn learned_classes(&self, t: usize) -> &[ClassId] {
        &self.class_order[..self.offset(t + 1)]
    }

    pub fn learned_sizes(&self, t: usize) -> &[usize] {
        &self.increment_sizes[..=t]
    }

    /// Classes of increments after `t`.
    pub fn future_classes(&self, t: usize) -> &[ClassId] {
        &self.class_order[self.offset(t + 1)..]
    }

    /// Increment index of a class.
    pub fn increment_of(&self, class: ClassId) -> Option<usize> {
        let pos = self.class_order.iter().position(|&c| c == class)?;
        let mut acc = 0;
        self.increment_sizes.iter().position(|&s| {
            acc += s;
            pos < acc
        })
    }
}

/// Training set `D^t`: selected samples with step-specific labels.
#[derive(Clone, Debug)]
pub struct IncrementSet {
    pub step: usize,
    pub samples: Vec<LabeledSample>,
}

impl IncrementSet {
    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }
}

fn keep_only(labels: &LabelMap, keep: &[ClassId]) -> LabelMap {
    let mut table = [0u8; 256];
    table[IGNORE_LABEL as usize] = IGNORE_LABEL;
    for &c in keep {
        table[c as usize] = c;
    }
    labels.map(&table)
}

/// Builds the training set of step `t` from the training samples.
pub fn build_increment(samples: &[LabeledSample], plan: &IncrementPlan, t: usize) -> Result<IncrementSet> {
    if t >= plan.num_increments() {
        return Err(Error::Protocol(format!(
            "step {t} out of range for {} increments",
            plan.num_increments()
        )));
    }
    let current = plan.increment(t);
    let future = plan.future_classes(t);
    let has_any = |s: &LabeledSample, set: &[ClassId]| s.labels.data().iter().any(|v| set.contains(v));
    let relabel = |s: &LabeledSample| LabeledSample {
        id: s.id,
        image: s.image.clone(),
        labels: keep_only(&s.labels, current),
    };

    let selected: Vec<LabeledSample> = match plan.setting() {
        Setting::Joint => samples.to_vec(),
        Setting::Overlapped => samples.iter().filter(|s| has_any(s, current)).map(relabel).collect(),
        Setting::Disjoint => samples
            .iter()
            .filter(|s| has_any(s, current) && !has_any(s, future))
            .map(relabel)
            .collect(),
        Setting::PseudoDisjoint => {
            let quota = plan.min_images_per_class().unwrap_or(1);
            let mut chosen: Vec<&LabeledSample> = samples
                .iter()
                .filter(|s| has_any(s, current) && !has_any(s, future))
                .collect();
            for &class in current {
                let count = |chosen: &[&LabeledSample]| {
                    chosen.iter().filter(|s| s.labels.data().contains(&class)).count()
                };
                let mut have = count(&chosen);
                for s in samples {
                    if have >= quota {
                        break;
                    }
                    if s.labels.data().contains(&class) && !chosen.iter().any(|c| c.id == s.id) {
                        chosen.push(s);
                        have += 1;
                    }
                }
                if have < quota {
                    return Err(Error::Protocol(format!(
                        "class {class} appears in only {have} images, {quota} required"
                    )));
                }
            }
            chosen.sort_by_key(|s| s.id);
            chosen.into_iter().map(relabel).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::Protocol(format!("training set for step {t} is empty")));
    }
    Ok(IncrementSet { step: t, samples: selected })
}

/// Maps dataset class ids to model channels: background and unlearned
/// classes to 0, `learned[j]` to `j + 1`, ignore preserved.
pub fn remap_to_contiguous(labels: &LabelMap, learned: &[ClassId]) -> LabelMap {
    labels.map(&contiguous_table(learned))
}

pub fn contiguous_table(learned: &[ClassId]) -> [u8; 256] {
    let mut table = [0u8; 256];
    table[IGNORE_LABEL as usize] = IGNORE_LABEL;
    for (j, &c) in learned.iter().enumerate() {
        table[c as usize] = (j + 1) as u8;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, labels: &[u8]) -> LabeledSample {
        let n = labels.len();
        LabeledSample::new(
            id,
            Tensor::zeros(&[1, 1, n]).unwrap(),
            LabelMap::new(1, n, labels.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn order(n: u8) -> Vec<ClassId> {
        (1..=n).collect()
    }

    #[test]
    fn task_shorthand_expands() {
        let p = IncrementPlan::from_task("5-1", order(10), Setting::Overlapped).unwrap();
        assert_eq!(p.increment_sizes(), &[5, 1, 1, 1, 1, 1]);
        let p = IncrementPlan::from_task("5-5", order(10), Setting::Disjoint).unwrap();
        assert_eq!(p.increment_sizes(), &[5, 5]);
        let p = IncrementPlan::from_task("4-4", order(10), Setting::Disjoint).unwrap();
        assert_eq!(p.increment_sizes(), &[4, 4, 2]);
        let p = IncrementPlan::from_task("joint", order(10), Setting::Overlapped).unwrap();
        assert_eq!(p.increment_sizes(), &[10]);
        assert_eq!(p.setting(), Setting::Joint);
        assert!(IncrementPlan::from_task("10-1", order(10), Setting::Overlapped).is_err());
        assert!(IncrementPlan::from_task("five", order(10), Setting::Overlapped).is_err());
        assert!(IncrementPlan::from_task("5-1", order(10), Setting::Joint).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(IncrementPlan::new(vec![1, 2, 2], vec![3], Setting::Overlapped, None).is_err());
        assert!(IncrementPlan::new(vec![0, 1], vec![2], Setting::Overlapped, None).is_err());
        assert!(IncrementPlan::new(vec![1, 2], vec![1], Setting::Overlapped, None).is_err());
        assert!(IncrementPlan::new(vec![1, 2], vec![1, 1], Setting::Joint, None).is_err());
        assert!(IncrementPlan::new(vec![1, 2], vec![1, 1], Setting::Disjoint, Some(2)).is_err());
        assert!(IncrementPlan::new(vec![1, 2], vec![1, 1], Setting::PseudoDisjoint, Some(2)).is_ok());
    }

    #[test]
    fn increment_accessors() {
        let p = IncrementPlan::new(vec![4, 2, 9, 7], vec![2, 1, 1], Setting::Overlapped, None).unwrap();
        assert_eq!(p.increment(1), &[9]);
        assert_eq!(p.learned_classes(1), &[4, 2, 9]);
        assert_eq!(p.future_classes(1), &[7]);
        assert_eq!(p.learned_sizes(1), &[2, 1]);
        assert_eq!(p.increment_of(7), Some(2));
        assert_eq!(p.increment_of(2), Some(0));
        assert_eq!(p.increment_of(5), None);
    }

    #[test]
    fn joint_keeps_everything() {
        let data = vec![sample(0, &[0, 3, 7]), sample(1, &[0, 0, 0])];
        let p = IncrementPlan::from_task("joint", order(8), Setting::Joint).unwrap();
        let d = build_increment(&data, &p, 0).unwrap();
        assert_eq!(d.samples, data);
    }

    #[test]
    fn overlapped_keeps_future_as_background() {
        let data = vec![sample(0, &[0, 2, 7])];
        let p = IncrementPlan::new(vec![1, 2, 7], vec![2, 1], Setting::Overlapped, None).unwrap();
        let d = build_increment(&data, &p, 0).unwrap();
        assert_eq!(d.samples[0].labels.data(), &[0, 2, 0]);
    }

    #[test]
    fn disjoint_drops_images_with_future_classes() {
        let data = vec![sample(0, &[0, 2, 7]), sample(1, &[1, 0, 0])];
        let p = IncrementPlan::new(vec![1, 2, 7], vec![2, 1], Setting::Disjoint, None).unwrap();
        let d = build_increment(&data, &p, 0).unwrap();
        assert_eq!(d.ids(), vec![1]);
        let d = build_increment(&data, &p, 1).unwrap();
        assert_eq!(d.ids(), vec![0]);
        assert_eq!(d.samples[0].labels.data(), &[0, 0, 7]);
    }

    #[test]
    fn images_without_current_classes_are_excluded() {
        let data = vec![sample(0, &[0, 1, 1]), sample(1, &[0, 0, 0])];
        let p = IncrementPlan::new(vec![1, 2], vec![1, 1], Setting::Overlapped, None).unwrap();
        assert_eq!(build_increment(&data, &p, 0).unwrap().ids(), vec![0]);
        assert!(build_increment(&data, &p, 1).is_err());
    }

    #[test]
    fn pseudo_disjoint_tops_up_quota() {
        let data = vec![
            sample(0, &[1, 2]),
            sample(1, &[1, 0]),
            sample(2, &[1, 2]),
        ];
        let p = IncrementPlan::new(vec![1, 2], vec![1, 1], Setting::PseudoDisjoint, Some(2)).unwrap();
        let d = build_increment(&data, &p, 0).unwrap();
        assert_eq!(d.ids(), vec![0, 1]);
        assert_eq!(d.samples[0].labels.data(), &[1, 0]);
        let p = p.with_min_images_per_class(4).unwrap();
        assert!(matches!(build_increment(&data, &p, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn remap_examples() {
        let l = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        assert_eq!(remap_to_contiguous(&l, &[5]).data(), &[0, 1]);
        let l = LabelMap::new(1, 4, vec![0, 3, 9, IGNORE_LABEL]).unwrap();
        assert_eq!(remap_to_contiguous(&l, &[9, 3]).data(), &[0, 2, 1, IGNORE_LABEL]);
        let l = LabelMap::new(1, 3, vec![4, 9, 4]).unwrap();
        assert_eq!(remap_to_contiguous(&l, &[9]).data(), &[0, 1, 0]);
    }
}
