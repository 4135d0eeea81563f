//! End-to-end orchestration: corpus, base pre-training, per-category
//! fine-tuning, generation with selection, and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate_corpus, Dataset, Split};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate_with, ExtractorConfig, FeatureExtractor, MetricReport};
use crate::image::Image;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, DenoiserModel};
use crate::sampler::{generate_dataset, GeneratedSet};
use crate::trainer::{write_loss_csv, Session, TrainConfig, TrainExample};

/// Loss term removed by an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Def,
    Obj,
    Attn,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Def => "def",
            Ablation::Obj => "obj",
            Ablation::Attn => "attn",
        }
    }

    /// Zeroes the weight of the ablated term.
    pub fn apply(self, train: &mut TrainConfig) {
        match self {
            Ablation::Def => train.weights.lambda_def = 0.0,
            Ablation::Obj => train.weights.lambda_obj = 0.0,
            Ablation::Attn => train.weights.lambda_attn = 0.0,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "def" => Ok(Self::Def),
            "obj" => Ok(Self::Obj),
            "attn" => Ok(Self::Attn),
            _ => Err(Error::InvalidArgument(format!("unknown ablation {s:?}; expected def, obj or attn"))),
        }
    }
}

/// Reference-split normals as pre-training examples.
pub fn normal_examples(ds: &Dataset, split: Split) -> Result<Vec<TrainExample>> {
    ds.normals(Some(split))
        .iter()
        .map(|r| {
            Ok(TrainExample {
                image: ds.image(&r.id)?.clone(),
                mask: None,
                object: r.object.clone(),
            })
        })
        .collect()
}

/// Reference defect pairs of one category.
pub fn reference_examples(ds: &Dataset, category: &str) -> Result<Vec<TrainExample>> {
    let v: Vec<TrainExample> = ds
        .defects(Some(category), Some(Split::Reference))
        .iter()
        .map(|r| {
            Ok(TrainExample {
                image: ds.image(&r.id)?.clone(),
                mask: Some(ds.mask(&r.id)?.clone()),
                object: r.object.clone(),
            })
        })
        .collect::<Result<_>>()?;
    ensure!(!v.is_empty(), Data, "category {category} has no reference pairs");
    Ok(v)
}

/// Builds a fresh model, fits its codec and pre-trains the backbone on
/// reference normals.
pub fn pretrain(config: &RunConfig, corpus: &Dataset, progress: impl FnMut(u64, f64)) -> Result<Checkpoint> {
    let mut model = DenoiserModel::new(&config.model)?;
    let reference: Vec<&Image> = corpus
        .records()
        .iter()
        .filter(|r| r.split == Split::Reference)
        .map(|r| corpus.image(&r.id))
        .collect::<Result<_>>()?;
    let mse = model.codec.fit(&reference, config.model.seed)?;
    log::info!("codec reconstruction mse {mse:.5}");
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let normals = normal_examples(corpus, Split::Reference)?;
    let mut session = Session::pretrain(model, schedule, &config.train)?;
    let mut progress = progress;
    session.run_until(&normals, u64::MAX, |r| progress(r.step, r.total))?;
    Ok(session.checkpoint())
}

pub fn finetune(
    train: &TrainConfig,
    base: &Checkpoint,
    corpus: &Dataset,
    category: &str,
    progress: impl FnMut(u64, f64),
) -> Result<Checkpoint> {
    let refs = reference_examples(corpus, category)?;
    let mut session = Session::finetune(base, Some(category.to_string()), train)?;
    let mut progress = progress;
    session.run_until(&refs, u64::MAX, |r| progress(r.step, r.total))?;
    Ok(session.checkpoint())
}

/// Paths of one pipeline run below the output directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("base.bin")
    }

    pub fn category_checkpoint(&self, category: &str) -> PathBuf {
        self.checkpoints().join(format!("{category}.bin"))
    }

    pub fn loss_csv(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}_loss.csv"))
    }

    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Pre-trained base checkpoint to reuse instead of pre-training.
    pub base: Option<PathBuf>,
    pub ablate: Option<Ablation>,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub layout: RunLayout,
    pub report: MetricReport,
    pub generated: GeneratedSet,
    pub corpus: Dataset,
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

/// Loads fine-tuned checkpoints for `categories` from `dir`.
pub fn load_category_checkpoints(dir: &Path, categories: &[String]) -> Result<BTreeMap<String, Checkpoint>> {
    let mut out = BTreeMap::new();
    for c in categories {
        let p = dir.join(format!("{c}.bin"));
        ensure!(p.exists(), Data, "missing checkpoint {} for category {c}", p.display());
        out.insert(c.clone(), load_checkpoint(&p)?);
    }
    Ok(out)
}

/// Generates for every category with its checkpoint.
pub fn generate(
    config: &RunConfig,
    corpus: &Dataset,
    checkpoints: &BTreeMap<String, Checkpoint>,
    categories: &[String],
) -> Result<GeneratedSet> {
    ensure!(!checkpoints.is_empty(), Data, "no fine-tuned checkpoints");
    let extractor = selection_extractor(&config.eval.extractor, corpus)?;
    generate_with(config, corpus, checkpoints, categories, &extractor)
}

/// [`generate`] with a prebuilt selection extractor.
pub fn generate_with(
    config: &RunConfig,
    corpus: &Dataset,
    checkpoints: &BTreeMap<String, Checkpoint>,
    categories: &[String],
    extractor: &FeatureExtractor,
) -> Result<GeneratedSet> {
    let first = checkpoints
        .values()
        .next()
        .ok_or_else(|| Error::Data("no fine-tuned checkpoints".into()))?;
    let schedule = first.schedule.clone();
    let models: BTreeMap<String, DenoiserModel> = checkpoints.iter().map(|(k, v)| (k.clone(), v.model.clone())).collect();
    generate_dataset(&models, &schedule, corpus, categories, &config.generate, extractor)
}

/// Extractor used for perceptual selection; the same one the evaluation
/// builds.
pub fn selection_extractor(config: &ExtractorConfig, corpus: &Dataset) -> Result<FeatureExtractor> {
    let images: Vec<&Image> = corpus.images.values().collect();
    FeatureExtractor::from_config(config, &images)
}

/// Runs the whole chain and writes every artifact below `out`.
pub fn run_pipeline(config: &RunConfig, out: &Path, options: &PipelineOptions) -> Result<PipelineOutput> {
    let mut config = config.clone();
    if let Some(a) = options.ablate {
        a.apply(&mut config.train);
    }
    config.validate()?;
    let layout = RunLayout::new(out);
    config.write_echo(&layout.config())?;

    let corpus = generate_corpus(&config.corpus)?;
    corpus.save(&layout.data())?;

    let base = match &options.base {
        Some(p) => load_checkpoint(p)?,
        None => {
            let ck = pretrain(&config, &corpus, |s, l| {
                if s % 100 == 0 {
                    log::info!("pretrain step {s} loss {l:.5}");
                }
            })?;
            save_checkpoint(&ck, &layout.base_checkpoint())?;
            write_loss_csv(&ck.loss_history, &layout.loss_csv("base"))?;
            ck
        }
    };

    let categories = config.active_categories();
    let mut checkpoints = BTreeMap::new();
    for c in &categories {
        log::info!("fine-tuning {c}");
        let ck = finetune(&config.train, &base, &corpus, c, |s, l| {
            if s % 100 == 0 {
                log::info!("{c} step {s} loss {l:.5}");
            }
        })?;
        save_checkpoint(&ck, &layout.category_checkpoint(c))?;
        write_loss_csv(&ck.loss_history, &layout.loss_csv(c))?;
        checkpoints.insert(c.clone(), ck);
    }

    log::info!("generating");
    // One extractor serves both selection and scoring.
    let extractor = selection_extractor(&config.eval.extractor, &corpus)?;
    let generated = generate_with(&config, &corpus, &checkpoints, &categories, &extractor)?;
    generated.save(&layout.generated())?;

    log::info!("evaluating");
    let report = evaluate_with(
        &generated,
        &corpus,
        &config.eval,
        &extractor,
        config.echo(),
        options.ablate.map(|a| a.name().to_string()),
    )?;
    report.save(&layout.report())?;
    Ok(PipelineOutput {
        layout,
        report,
        generated,
        corpus,
        checkpoints,
    })
}
