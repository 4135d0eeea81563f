//! Run configuration: one JSON document with a section per stage, dotted
//! `section.key=value` overrides and a resolved echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::CorpusConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::sampler::GenerateConfig;
use crate::trainer::TrainConfig;

/// Environment variable overriding the output root.
pub const OUTPUT_ROOT_ENV: &str = "DEFECTFILL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    /// Propagated to the model, train, generate and eval seeds when set.
    /// The corpus keeps its own seed so every run sees the same data.
    pub seed: Option<u64>,
    /// Categories to fine-tune and generate; empty means all.
    pub categories: Vec<String>,
    pub output_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            seed: None,
            categories: Vec::new(),
            output_root: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `section.key=value` overrides. Values parse as JSON and fall
    /// back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the global seed into the per-stage seeds.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.generate.seed = s;
            self.eval.seed = s;
            self.eval.extractor.seed = s;
        }
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                self.output_root = PathBuf::from(root);
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        crate::diffusion::NoiseSchedule::new(&self.schedule)?;
        self.model.validate()?;
        self.train.validate()?;
        self.generate.validate()?;
        self.eval.validate()?;
        ensure!(
            self.generate.steps <= self.schedule.steps,
            Config,
            "generate.steps ({}) exceeds schedule.steps ({})",
            self.generate.steps,
            self.schedule.steps
        );
        for c in &self.categories {
            ensure!(
                self.corpus.defect_categories.iter().any(|d| &d.name == c),
                Config,
                "categories lists {c:?}, which the corpus does not define"
            );
        }
        Ok(())
    }

    /// Categories this run works on, in corpus order.
    pub fn active_categories(&self) -> Vec<String> {
        self.corpus
            .defect_categories
            .iter()
            .map(|c| c.name.clone())
            .filter(|n| self.categories.is_empty() || self.categories.contains(n))
            .collect()
    }

    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        ensure!(obj.contains_key(*part), Config, "unknown configuration key {key:?}");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).unwrap();
    }
    Err(Error::Config(format!("empty configuration key {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::default()
            .with_overrides(&["train.steps=50", "generate.metric=psnr", "seed=4"])
            .unwrap();
        assert_eq!(c.train.steps, 50);
        assert_eq!(c.generate.metric, crate::sampler::SelectionMetric::Psnr);
        let c = c.resolve().unwrap();
        assert_eq!((c.train.seed, c.generate.seed), (4, 4));
        let err = RunConfig::default().with_overrides(&["train.stepz=3"]).unwrap_err();
        assert!(err.to_string().contains("train.stepz"));
    }

    #[test]
    fn unknown_file_keys_are_named() {
        let err = RunConfig::from_json(r#"{"train": {"bogus": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_value(c.echo()).unwrap();
        assert_eq!(back, c);
    }
}
