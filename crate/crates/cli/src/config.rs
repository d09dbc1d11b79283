use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use edl_ciss::model::ModelConfig;
use edl_ciss::protocol::{ClassId, CorpusConfig, IncrementPlan, Setting};
use edl_ciss::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "EDL_CISS_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// Everything a run needs. Missing JSON fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `B-I` or `joint`.
    pub task: String,
    pub setting: Setting,
    /// Defaults to `1..=num_classes`.
    pub class_order: Option<Vec<ClassId>>,
    /// Load the corpus from here instead of generating it.
    pub corpus_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "5-1".into(),
            setting: Setting::Overlapped,
            class_order: None,
            corpus_dir: None,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Both seeds follow the run seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = seed;
    }

    pub fn class_order(&self, num_classes: usize) -> Vec<ClassId> {
        self.class_order
            .clone()
            .unwrap_or_else(|| (1..=num_classes as u32).map(|c| c as ClassId).collect())
    }

    pub fn plan(&self, num_classes: usize) -> Result<IncrementPlan> {
        let order = self.class_order(num_classes);
        if let Some(&c) = order.iter().find(|&&c| c as usize > num_classes) {
            bail!("class {c} in the class order is not in a {num_classes}-class corpus");
        }
        Ok(IncrementPlan::from_task(&self.task, order, self.setting)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.corpus_dir.is_none() {
            self.plan(self.corpus.num_classes)?;
        }
        if let Some([h, w]) = self.train.crop {
            if self.corpus_dir.is_none() && (h > self.corpus.height || w > self.corpus.width) {
                bail!("crop {h}×{w} exceeds the {}×{} images", self.corpus.height, self.corpus.width);
            }
        }
        Ok(())
    }

    pub fn output_dir(&self, default_name: &str) -> PathBuf {
        self.output.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
            root.join(default_name)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"task": "5-5", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.task, "5-5");
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_base, TrainConfig::default().lr_base);
        assert_eq!(cfg.corpus, CorpusConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"taks": "5-5"}"#).is_err());
    }

    #[test]
    fn roundtrip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn plan_checks_class_order() {
        let mut cfg = RunConfig {
            class_order: Some(vec![1, 2, 11]),
            task: "2-1".into(),
            ..Default::default()
        };
        assert!(cfg.plan(10).is_err());
        cfg.class_order = Some(vec![3, 1, 2]);
        assert_eq!(cfg.plan(10).unwrap().increment(0), &[3, 1]);
    }
}
