//! Evaluation of a generated defect set against the heldout corpus split,
//! and the JSON/CSV metric report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::downstream::{Classifier, DownstreamConfig, Segmenter};
use super::features::{ExtractorConfig, FeatureExtractor, Provenance};
use super::metrics::{image_metrics, pixel_metrics, ScoreMap};
use super::quality::{ic_diversity, kid};
use crate::corpus::{Dataset, Split};
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Mask};
use crate::sampler::GeneratedSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPart {
    Kid,
    IcDiversity,
    Accuracy,
    /// Pixel and image level AUROC, AP, F1-max and PRO.
    Localization,
}

impl EvalPart {
    pub const ALL: [EvalPart; 4] = [EvalPart::Kid, EvalPart::IcDiversity, EvalPart::Accuracy, EvalPart::Localization];
}

impl std::str::FromStr for EvalPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "kid" => Ok(Self::Kid),
            "ic-diversity" => Ok(Self::IcDiversity),
            "accuracy" => Ok(Self::Accuracy),
            "localization" | "auroc" | "ap" | "f1-max" | "pro" => Ok(Self::Localization),
            _ => Err(Error::InvalidArgument(format!("unknown evaluation part {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extractor: ExtractorConfig,
    pub downstream: DownstreamConfig,
    pub kid_degree: i32,
    /// Restricts computation to these parts; empty means all.
    pub only: Vec<EvalPart>,
    /// Also train and score the reference-only downstream baselines.
    pub reference_baseline: bool,
    /// Compare against the first-candidate (selection off) set when
    /// candidate images are available.
    pub lfs_comparison: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig {
                train: true,
                ..Default::default()
            },
            downstream: DownstreamConfig::default(),
            kid_degree: 3,
            only: Vec::new(),
            reference_baseline: true,
            lfs_comparison: true,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.kid_degree >= 1, Config, "eval.kid_degree must be at least 1");
        self.downstream.validate()
    }

    pub fn wants(&self, part: EvalPart) -> bool {
        self.only.is_empty() || self.only.contains(&part)
    }
}

/// One row of the report. Missing values were not requested or could not
/// be computed for the category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub kid: Option<f64>,
    pub ic_diversity: Option<f64>,
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub f1_max: Option<f64>,
    pub pro: Option<f64>,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub image_f1_max: Option<f64>,
    /// Mean intensity change inside the mask relative to the source normal.
    pub defect_signal: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "kid",
    "ic_diversity",
    "accuracy",
    "auroc",
    "ap",
    "f1_max",
    "pro",
    "image_auroc",
    "image_ap",
    "image_f1_max",
    "defect_signal",
];

impl CategoryMetrics {
    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.kid,
            self.ic_diversity,
            self.accuracy,
            self.auroc,
            self.ap,
            self.f1_max,
            self.pro,
            self.image_auroc,
            self.image_ap,
            self.image_f1_max,
            self.defect_signal,
        ]
    }

    fn from_values(v: [Option<f64>; 11]) -> Self {
        Self {
            kid: v[0],
            ic_diversity: v[1],
            accuracy: v[2],
            auroc: v[3],
            ap: v[4],
            f1_max: v[5],
            pro: v[6],
            image_auroc: v[7],
            image_ap: v[8],
            image_f1_max: v[9],
            defect_signal: v[10],
        }
    }

    /// Column-wise mean over the categories that report a value.
    pub fn mean_of<'a>(rows: impl IntoIterator<Item = &'a CategoryMetrics>) -> Self {
        let mut sum = [0.0; 11];
        let mut n = [0usize; 11];
        for r in rows {
            for (i, v) in r.values().iter().enumerate() {
                if let Some(v) = v {
                    sum[i] += v;
                    n[i] += 1;
                }
            }
        }
        let mut out = [None; 11];
        for i in 0..11 {
            if n[i] > 0 {
                out[i] = Some(sum[i] / n[i] as f64);
            }
        }
        Self::from_values(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub categories: BTreeMap<String, CategoryMetrics>,
    pub aggregate: CategoryMetrics,
}

impl MetricTable {
    fn from_categories(categories: BTreeMap<String, CategoryMetrics>) -> Self {
        let aggregate = CategoryMetrics::mean_of(categories.values());
        Self { categories, aggregate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorInfo {
    pub provenance: Provenance,
    pub config: ExtractorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor: ExtractorInfo,
    /// Echo of the resolved run configuration.
    pub config: serde_json::Value,
    pub ablation: Option<String>,
    pub generated: MetricTable,
    /// Downstream models trained on the reference pairs only.
    pub reference_only: Option<MetricTable>,
    /// The same generation run with selection disabled (first candidate).
    pub without_selection: Option<MetricTable>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("setting,category,{}\n", METRIC_COLUMNS.join(","));
        let mut table = |name: &str, t: &MetricTable| {
            let rows = t.categories.iter().map(|(k, v)| (k.as_str(), v)).chain([("aggregate", &t.aggregate)]);
            for (cat, m) in rows {
                let cells: Vec<String> = m.values().iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))).collect();
                let _ = writeln!(out, "{name},{cat},{}", cells.join(","));
            }
        };
        table("generated", &self.generated);
        if let Some(t) = &self.reference_only {
            table("reference_only", t);
        }
        if let Some(t) = &self.without_selection {
            table("without_selection", t);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        let p = dir.join("report.json");
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.csv");
        std::fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))
    }
}

struct Heldout<'a> {
    normals: Vec<&'a Image>,
    defects: BTreeMap<String, Vec<(&'a Image, &'a Mask)>>,
}

fn heldout<'a>(corpus: &'a Dataset, categories: &[String]) -> Result<Heldout<'a>> {
    let normals = corpus
        .normals(Some(Split::Heldout))
        .iter()
        .map(|r| corpus.image(&r.id))
        .collect::<Result<Vec<_>>>()?;
    let mut defects = BTreeMap::new();
    for c in categories {
        let v = corpus
            .defects(Some(c), Some(Split::Heldout))
            .iter()
            .map(|r| Ok((corpus.image(&r.id)?, corpus.mask(&r.id)?)))
            .collect::<Result<Vec<_>>>()?;
        ensure!(!v.is_empty(), Data, "no heldout defects of category {c}");
        defects.insert(c.clone(), v);
    }
    Ok(Heldout { normals, defects })
}

/// Training material for downstream models: labelled defects with masks.
type Labelled<'a> = Vec<(&'a Image, &'a Mask, usize)>;

fn localization(
    seg: &Segmenter,
    held: &Heldout<'_>,
    categories: &[String],
    rows: &mut BTreeMap<String, CategoryMetrics>,
) -> Result<()> {
    let normal_maps = seg.score_maps(&held.normals);
    let (h, w) = (normal_maps[0].height, normal_maps[0].width);
    let empty = Mask::zeros(h, w);
    for c in categories {
        let defects = &held.defects[c];
        let images: Vec<&Image> = defects.iter().map(|d| d.0).collect();
        let mut maps: Vec<ScoreMap> = seg.score_maps(&images);
        let mut masks: Vec<Mask> = defects.iter().map(|d| d.1.binarize()).collect();
        let image_scores: Vec<f64> = maps.iter().chain(&normal_maps).map(ScoreMap::max).collect();
        let labels: Vec<bool> = (0..image_scores.len()).map(|i| i < maps.len()).collect();
        maps.extend(normal_maps.iter().cloned());
        masks.extend(std::iter::repeat(empty.clone()).take(normal_maps.len()));
        let px = pixel_metrics(&maps, &masks)?;
        let im = image_metrics(&image_scores, &labels)?;
        let row = rows.entry(c.clone()).or_default();
        row.auroc = Some(px.auroc);
        row.ap = Some(px.ap);
        row.f1_max = Some(px.f1_max);
        row.pro = Some(px.pro);
        row.image_auroc = Some(im.auroc);
        row.image_ap = Some(im.ap);
        row.image_f1_max = Some(im.f1_max);
    }
    Ok(())
}

/// Trains the downstream models on `normals` plus `defects` and fills the
/// accuracy and localization columns.
fn downstream_rows(
    normals: &[&Image],
    defects: &Labelled<'_>,
    held: &Heldout<'_>,
    categories: &[String],
    config: &EvalConfig,
    rows: &mut BTreeMap<String, CategoryMetrics>,
) -> Result<()> {
    ensure!(!defects.is_empty(), Data, "no defect images to train downstream models on");
    if config.wants(EvalPart::Localization) {
        let (h, w) = (defects[0].0.height, defects[0].0.width);
        let empty = Mask::zeros(h, w);
        let mut ex: Vec<(&Image, &Mask)> = normals.iter().map(|&n| (n, &empty)).collect();
        ex.extend(defects.iter().map(|d| (d.0, d.1)));
        let seg = Segmenter::train(&ex, &config.downstream, config.seed)?;
        localization(&seg, held, categories, rows)?;
    }
    if config.wants(EvalPart::Accuracy) {
        if categories.len() < 2 {
            log::warn!("classification needs at least two categories; accuracy skipped");
        } else {
            let ex: Vec<(&Image, usize)> = defects.iter().map(|d| (d.0, d.2)).collect();
            let clf = Classifier::train(categories.to_vec(), &ex, &config.downstream, config.seed)?;
            for (k, c) in categories.iter().enumerate() {
                let test: Vec<(&Image, usize)> = held.defects[c].iter().map(|d| (d.0, k)).collect();
                rows.entry(c.clone()).or_default().accuracy = Some(clf.accuracy(&test));
            }
        }
    }
    Ok(())
}

fn set_quality(
    sets: &BTreeMap<String, Vec<&Image>>,
    groups: &BTreeMap<String, Vec<Vec<&Image>>>,
    held: &Heldout<'_>,
    extractor: &FeatureExtractor,
    config: &EvalConfig,
    rows: &mut BTreeMap<String, CategoryMetrics>,
) -> Result<()> {
    for (c, images) in sets {
        let row = rows.entry(c.clone()).or_default();
        if config.wants(EvalPart::Kid) && images.len() >= 2 {
            let real: Vec<&Image> = held.defects[c].iter().map(|d| d.0).collect();
            if real.len() >= 2 {
                row.kid = Some(kid(&extractor.embed(images), &extractor.embed(&real), config.kid_degree)?);
            }
        }
        if config.wants(EvalPart::IcDiversity) {
            let g: Vec<Vec<&Image>> = groups.get(c).map_or(Vec::new(), |g| g.iter().filter(|v| v.len() >= 2).cloned().collect());
            if !g.is_empty() {
                row.ic_diversity = Some(ic_diversity(&g, extractor)?);
            }
        }
    }
    Ok(())
}

type ConditionGroups<'a> = BTreeMap<String, BTreeMap<(String, String), Vec<&'a Image>>>;

fn flatten(g: ConditionGroups<'_>) -> BTreeMap<String, Vec<Vec<&Image>>> {
    g.into_iter().map(|(c, m)| (c, m.into_values().collect())).collect()
}

/// Evaluates `generated` against the heldout split of `corpus`.
pub fn evaluate(
    generated: &GeneratedSet,
    corpus: &Dataset,
    config: &EvalConfig,
    config_echo: serde_json::Value,
    ablation: Option<String>,
) -> Result<MetricReport> {
    config.validate()?;
    let corpus_images: Vec<&Image> = corpus.images.values().collect();
    let extractor = FeatureExtractor::from_config(&config.extractor, &corpus_images)?;
    evaluate_with(generated, corpus, config, &extractor, config_echo, ablation)
}

/// [`evaluate`] with an already built extractor, e.g. the one used for
/// selection. It should come from `config.extractor` so the report's
/// extractor description holds.
pub fn evaluate_with(
    generated: &GeneratedSet,
    corpus: &Dataset,
    config: &EvalConfig,
    extractor: &FeatureExtractor,
    config_echo: serde_json::Value,
    ablation: Option<String>,
) -> Result<MetricReport> {
    config.validate()?;
    let categories = generated.dataset.categories();
    ensure!(!categories.is_empty(), Data, "generated set contains no defects");
    let held = heldout(corpus, &categories)?;
    ensure!(!held.normals.is_empty(), Data, "corpus has no heldout normals");

    let mut sets: BTreeMap<String, Vec<&Image>> = BTreeMap::new();
    let mut groups: ConditionGroups = BTreeMap::new();
    let mut off_sets: BTreeMap<String, Vec<&Image>> = BTreeMap::new();
    let mut off_groups: ConditionGroups = BTreeMap::new();
    let mut signal: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &generated.records {
        let c = &r.request.category;
        let im = generated.dataset.image(&r.output_id)?;
        let key = (r.request.normal_id.clone(), r.request.mask_id.clone());
        sets.entry(c.clone()).or_default().push(im);
        groups.entry(c.clone()).or_default().entry(key.clone()).or_default().push(im);
        if let Some(first) = generated.candidates.get(&r.output_id).and_then(|v| v.first()) {
            off_sets.entry(c.clone()).or_default().push(first);
            off_groups.entry(c.clone()).or_default().entry(key).or_default().push(first);
        }
        if let (Ok(normal), Ok(mask)) = (corpus.image(&r.request.normal_id), generated.dataset.mask(&r.output_id)) {
            if let (Some(a), Some(b)) = (im.mean_in_mask(mask), normal.mean_in_mask(mask)) {
                signal.entry(c.clone()).or_default().push((a - b) as f64);
            }
        }
    }
    let groups = flatten(groups);
    let off_groups = flatten(off_groups);

    let mut rows: BTreeMap<String, CategoryMetrics> = categories.iter().map(|c| (c.clone(), CategoryMetrics::default())).collect();
    set_quality(&sets, &groups, &held, extractor, config, &mut rows)?;
    for (c, v) in &signal {
        rows.get_mut(c).unwrap().defect_signal = Some(v.iter().sum::<f64>() / v.len() as f64);
    }

    let train_normals: Vec<&Image> = corpus
        .normals(Some(Split::Reference))
        .iter()
        .map(|r| corpus.image(&r.id))
        .collect::<Result<Vec<_>>>()?;
    let class_of = |c: &str| categories.iter().position(|x| x == c).unwrap();
    let mut reference: Labelled = Vec::new();
    for c in &categories {
        for r in corpus.defects(Some(c), Some(Split::Reference)) {
            reference.push((corpus.image(&r.id)?, corpus.mask(&r.id)?, class_of(c)));
        }
    }
    let needs_downstream = config.wants(EvalPart::Accuracy) || config.wants(EvalPart::Localization);
    if needs_downstream {
        // Generated-only masks for localization; the classifier additionally
        // sees the reference pairs as augmentation.
        let mut gen_defects: Labelled = Vec::new();
        for r in &generated.records {
            gen_defects.push((generated.dataset.image(&r.output_id)?, generated.dataset.mask(&r.output_id)?, class_of(&r.request.category)));
        }
        if config.wants(EvalPart::Localization) {
            let loc_only = EvalConfig {
                only: vec![EvalPart::Localization],
                ..config.clone()
            };
            downstream_rows(&train_normals, &gen_defects, &held, &categories, &loc_only, &mut rows)?;
        }
        if config.wants(EvalPart::Accuracy) {
            let cls_only = EvalConfig {
                only: vec![EvalPart::Accuracy],
                ..config.clone()
            };
            let mut augmented = reference.clone();
            augmented.extend(gen_defects.iter().copied());
            downstream_rows(&train_normals, &augmented, &held, &categories, &cls_only, &mut rows)?;
        }
    }
    let generated_table = MetricTable::from_categories(rows);

    let reference_only = if config.reference_baseline && needs_downstream {
        let mut ref_rows = BTreeMap::new();
        downstream_rows(&train_normals, &reference, &held, &categories, config, &mut ref_rows)?;
        Some(MetricTable::from_categories(ref_rows))
    } else {
        None
    };

    let without_selection = if config.lfs_comparison && !off_sets.is_empty() && (config.wants(EvalPart::Kid) || config.wants(EvalPart::IcDiversity)) {
        let mut off_rows = BTreeMap::new();
        set_quality(&off_sets, &off_groups, &held, extractor, config, &mut off_rows)?;
        for r in &generated.records {
            let first = match generated.candidates.get(&r.output_id).and_then(|v| v.first()) {
                Some(f) => f,
                None => continue,
            };
            if let (Ok(normal), Ok(mask)) = (corpus.image(&r.request.normal_id), generated.dataset.mask(&r.output_id)) {
                if let (Some(a), Some(b)) = (first.mean_in_mask(mask), normal.mean_in_mask(mask)) {
                    let row: &mut CategoryMetrics = off_rows.entry(r.request.category.clone()).or_default();
                    let prev = row.defect_signal.unwrap_or(0.0);
                    row.defect_signal = Some(prev + (a - b) as f64);
                }
            }
        }
        for (c, row) in off_rows.iter_mut() {
            if let Some(s) = row.defect_signal {
                row.defect_signal = Some(s / off_sets[c].len() as f64);
            }
        }
        Some(MetricTable::from_categories(off_rows))
    } else {
        None
    };

    Ok(MetricReport {
        extractor: ExtractorInfo {
            provenance: extractor.provenance,
            config: config.extractor.clone(),
        },
        config: config_echo,
        ablation,
        generated: generated_table,
        reference_only,
        without_selection,
    })
}
