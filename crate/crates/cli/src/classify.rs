//! The seven classification stages. Each reads earlier stages' artifacts
//! from disk and writes only under `{output_root}/{stage}/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slidelab_core::aggregate::{
    aggregate, evaluate, grid_search_thresholds, predict_slide, render_overlay, GridSearchResult, LabeledPredictions,
    MetricsReport, PatchPrediction, SlidePrediction, ThresholdVector,
};
use slidelab_core::classifier::{train, Checkpoint, LabeledPatch, TrainingLog};
use slidelab_core::corpus::{load_manifest, split_corpus, CorpusManifest, Split, SplitOptions};
use slidelab_core::imaging;
use slidelab_core::patch::{balance_classes, extract_patches, PatchRef};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::lock::RunLock;
use crate::timing::TimingReport;

pub const STAGE_SPLIT: &str = "split";
pub const STAGE_PATCHES: &str = "patches";
pub const STAGE_TRAIN: &str = "train";
pub const STAGE_INFERENCE: &str = "inference";
pub const STAGE_GRIDSEARCH: &str = "gridsearch";
pub const STAGE_TEST: &str = "test";
pub const STAGE_VISUALIZE: &str = "visualize";

pub const STAGES: [&str; 7] = [
    STAGE_SPLIT,
    STAGE_PATCHES,
    STAGE_TRAIN,
    STAGE_INFERENCE,
    STAGE_GRIDSEARCH,
    STAGE_TEST,
    STAGE_VISUALIZE,
];

pub const METRICS_TEXT: &str = "metrics.txt";
pub const METRICS_JSON: &str = "metrics.json";

fn stage_dir(config: &RunConfig, stage: &str) -> PathBuf {
    config.output_root.join(stage)
}

/// Empties and recreates a stage directory so reruns never see stale files.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn split_manifest_path(config: &RunConfig) -> PathBuf {
    stage_dir(config, STAGE_SPLIT).join("manifest.tsv")
}

fn load_split_manifest(config: &RunConfig) -> Result<CorpusManifest> {
    let m = load_manifest(&require(split_manifest_path(config), STAGE_SPLIT)?)?;
    if !m.fully_assigned() {
        return Err(Error::Config("split manifest has unassigned slides".into()));
    }
    Ok(m)
}

/// Stage 1: assign train/validation/test and write the assigned manifest
/// with absolute slide paths.
pub fn stage_split(config: &RunConfig) -> Result<CorpusManifest> {
    let manifest = load_manifest(&config.manifest)?;
    let split = split_corpus(
        &manifest,
        config.split.ratios,
        config.seed,
        SplitOptions {
            counts: config.split.counts,
            reassign: config.split.reassign,
        },
    )?;
    let records = split
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.path = fs::canonicalize(&r.path).map_err(io_err(&r.path))?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let split = CorpusManifest::new(split.class_set().to_vec(), records, split.source_note())?;
    let dir = stage_dir(config, STAGE_SPLIT);
    fresh_dir(&dir)?;
    split.write(&split_manifest_path(config))?;
    write_json(&dir.join("counts.json"), &split.split_counts())?;
    Ok(split)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub train: Vec<PatchRef>,
    pub validation: Vec<PatchRef>,
    pub test: Vec<PatchRef>,
    /// Tissue patches per class in the training split before balancing.
    pub train_available: BTreeMap<String, usize>,
}

impl PatchIndex {
    pub fn get(&self, split: Split) -> &[PatchRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unassigned => &[],
        }
    }
}

/// Stage 2: tile every slide, drop background, balance the training split
/// and write the kept patches as `patches/{split}/{class}/{slide}_{x}_{y}.png`.
pub fn stage_patches(config: &RunConfig) -> Result<PatchIndex> {
    let manifest = load_split_manifest(config)?;
    let dir = stage_dir(config, STAGE_PATCHES);
    fresh_dir(&dir)?;

    let extract = |r: &slidelab_core::corpus::SlideRecord| extract_patches(r, &config.patch).map(|p| (r.split, p));
    let per_slide: Vec<_> = if config.deterministic {
        manifest.records().iter().map(extract).collect::<Result<_, _>>()?
    } else {
        manifest.records().par_iter().map(extract).collect::<Result<_, _>>()?
    };

    let mut by_class: BTreeMap<String, Vec<PatchRef>> =
        manifest.class_set().iter().map(|c| (c.clone(), Vec::new())).collect();
    let mut index = PatchIndex::default();
    let mut images = BTreeMap::new();
    for (split, patches) in per_slide {
        for (r, img) in patches {
            match split {
                Split::Train => by_class.get_mut(&r.label).expect("label validated by manifest").push(r.clone()),
                Split::Validation => index.validation.push(r.clone()),
                Split::Test => index.test.push(r.clone()),
                Split::Unassigned => unreachable!("manifest is fully assigned"),
            }
            images.insert(r, img);
        }
    }
    index.train_available = by_class.iter().map(|(c, v)| (c.clone(), v.len())).collect();
    // A class absent from the training split must not drag the default target to zero.
    by_class.retain(|_, v| !v.is_empty());
    let balanced = balance_classes(&by_class, config.balance_target, config.seed)?;
    index.train = balanced.into_values().flatten().collect();

    let jobs: Vec<(PathBuf, &slidelab_core::imaging::FloatImage)> = Split::ASSIGNED
        .iter()
        .flat_map(|&s| index.get(s).iter().map(move |r| (r, s)))
        .map(|(r, s)| (r.path_under(&dir, s), &images[r]))
        .collect();
    let write = |(path, img): &(PathBuf, &slidelab_core::imaging::FloatImage)| imaging::save_png(img, path);
    if config.deterministic {
        jobs.iter().try_for_each(write)?;
    } else {
        jobs.par_iter().try_for_each(write)?;
    }
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

fn checkpoint_dir(config: &RunConfig) -> PathBuf {
    stage_dir(config, STAGE_TRAIN).join("checkpoint")
}

fn load_patches(config: &RunConfig, manifest: &CorpusManifest, refs: &[PatchRef], split: Split) -> Result<Vec<LabeledPatch>> {
    let root = stage_dir(config, STAGE_PATCHES);
    let load = |r: &PatchRef| -> Result<LabeledPatch> {
        let label = manifest
            .class_index(&r.label)
            .ok_or_else(|| Error::Config(format!("patch label `{}` not in class set", r.label)))?;
        Ok(LabeledPatch {
            image: imaging::decode_rgb(&r.path_under(&root, split))?,
            label,
        })
    };
    if config.deterministic {
        refs.iter().map(load).collect()
    } else {
        refs.par_iter().map(load).collect()
    }
}

/// Stage 3: train on balanced training patches, selecting the epoch with
/// the best validation patch accuracy.
pub fn stage_train(config: &RunConfig) -> Result<(Checkpoint, TrainingLog)> {
    let manifest = load_split_manifest(config)?;
    let index: PatchIndex = read_json(&require(stage_dir(config, STAGE_PATCHES).join("index.json"), STAGE_PATCHES)?)?;
    if config.classifier.num_classes != manifest.class_set().len() {
        return Err(Error::Config(format!(
            "classifier.num_classes is {} but the corpus has {} classes",
            config.classifier.num_classes,
            manifest.class_set().len()
        )));
    }
    let train_set = load_patches(config, &manifest, &index.train, Split::Train)?;
    let val_set = load_patches(config, &manifest, &index.validation, Split::Validation)?;
    let (checkpoint, log) = train(&train_set, &val_set, manifest.class_set(), &config.classifier)?;
    let dir = stage_dir(config, STAGE_TRAIN);
    fresh_dir(&dir)?;
    checkpoint.save(&checkpoint_dir(config))?;
    log.write_jsonl(&dir.join("log.jsonl"))?;
    Ok((checkpoint, log))
}

/// Patch predictions for one slide together with its true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideInference {
    pub label: usize,
    pub predictions: Vec<PatchPrediction>,
}

pub type SplitInference = BTreeMap<String, SlideInference>;

fn inference_path(config: &RunConfig, split: Split) -> PathBuf {
    stage_dir(config, STAGE_INFERENCE).join(format!("{split}.json"))
}

/// Stage 4: patch predictions for every validation and test slide.
pub fn stage_inference(config: &RunConfig) -> Result<BTreeMap<Split, SplitInference>> {
    let manifest = load_split_manifest(config)?;
    let checkpoint = Checkpoint::load(&require(checkpoint_dir(config), STAGE_TRAIN)?)?;
    let model = checkpoint.model()?;
    let dir = stage_dir(config, STAGE_INFERENCE);
    fresh_dir(&dir)?;
    let mut out = BTreeMap::new();
    for split in [Split::Validation, Split::Test] {
        let mut slides = SplitInference::new();
        for r in manifest.in_split(split) {
            let predictions = predict_slide(&model, r, &config.patch, !config.deterministic)?;
            let label = manifest.class_index(&r.label).expect("label validated by manifest");
            slides.insert(r.slide_id.clone(), SlideInference { label, predictions });
        }
        write_json(&inference_path(config, split), &slides)?;
        out.insert(split, slides);
    }
    Ok(out)
}

fn read_inference(config: &RunConfig, split: Split) -> Result<SplitInference> {
    read_json(&require(inference_path(config, split), STAGE_INFERENCE)?)
}

fn thresholds_path(config: &RunConfig) -> PathBuf {
    stage_dir(config, STAGE_GRIDSEARCH).join("thresholds.json")
}

/// Stage 5: threshold grid search on validation slides.
pub fn stage_gridsearch(config: &RunConfig) -> Result<GridSearchResult> {
    let validation = read_inference(config, Split::Validation)?;
    let labeled: LabeledPredictions = validation
        .into_iter()
        .map(|(id, s)| (id, (s.predictions, s.label)))
        .collect();
    let manifest = load_split_manifest(config)?;
    let result = grid_search_thresholds(
        &labeled,
        manifest.class_set().len(),
        config.aggregation.grid_step,
        !config.deterministic,
    )?;
    let dir = stage_dir(config, STAGE_GRIDSEARCH);
    fresh_dir(&dir)?;
    write_json(&thresholds_path(config), &result)?;
    Ok(result)
}

/// Everything the test stage reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// Slide-level metrics over slides that had tissue patches.
    pub metrics: MetricsReport,
    pub thresholds: ThresholdVector,
    /// Fraction of test patches whose own prediction matches the slide label.
    pub patch_accuracy: f64,
    pub patches: usize,
    /// Test slides without a single tissue patch.
    pub unclassifiable: Vec<String>,
    pub slides: Vec<SlidePrediction>,
}

impl TestReport {
    pub fn to_text(&self) -> String {
        let mut s = self.metrics.to_text();
        s.push('\n');
        s.push_str(&format!("patch_accuracy\t{:.6}\n", self.patch_accuracy));
        s.push_str(&format!("patches\t{}\n", self.patches));
        let cut: Vec<String> = self.thresholds.as_slice().iter().map(|v| format!("{v:.2}")).collect();
        s.push_str(&format!("thresholds\t{}\n", cut.join("\t")));
        s.push_str(&format!("unclassifiable\t{}\n", self.unclassifiable.len()));
        for id in &self.unclassifiable {
            s.push_str(&format!("\t{id}\n"));
        }
        s
    }
}

/// Stage 6: thresholded aggregation of test slides and slide-level metrics.
pub fn stage_test(config: &RunConfig) -> Result<TestReport> {
    let manifest = load_split_manifest(config)?;
    let grid: GridSearchResult = read_json(&require(thresholds_path(config), STAGE_GRIDSEARCH)?)?;
    let test = read_inference(config, Split::Test)?;

    let mut scored = BTreeMap::new();
    let mut unclassifiable = Vec::new();
    let (mut patches, mut patch_hits) = (0usize, 0usize);
    for (id, s) in &test {
        patches += s.predictions.len();
        patch_hits += s.predictions.iter().filter(|p| p.predicted_class == s.label).count();
        match aggregate(&s.predictions, &grid.thresholds) {
            Ok(pred) => {
                scored.insert(id.clone(), (pred, s.label));
            }
            Err(slidelab_core::Error::NoTissue) => unclassifiable.push(id.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    let metrics = if scored.is_empty() {
        let k = manifest.class_set().len();
        MetricsReport::from_confusion(vec![vec![0; k]; k], manifest.class_set())
    } else {
        evaluate(&scored, manifest.class_set())?
    };
    let report = TestReport {
        metrics,
        thresholds: grid.thresholds,
        patch_accuracy: if patches == 0 { 0.0 } else { patch_hits as f64 / patches as f64 },
        patches,
        unclassifiable,
        slides: scored.into_values().map(|(p, _)| p).collect(),
    };
    let dir = stage_dir(config, STAGE_TEST);
    fresh_dir(&dir)?;
    write_json(&dir.join(METRICS_JSON), &report)?;
    fs::write(dir.join(METRICS_TEXT), report.to_text()).map_err(io_err(dir.join(METRICS_TEXT)))?;
    Ok(report)
}

/// Stage 7: class-tinted overlays for every test slide.
pub fn stage_visualize(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let manifest = load_split_manifest(config)?;
    let test = read_inference(config, Split::Test)?;
    let dir = stage_dir(config, STAGE_VISUALIZE);
    fresh_dir(&dir)?;
    let k = manifest.class_set().len();
    let render = |r: &&slidelab_core::corpus::SlideRecord| -> Result<PathBuf> {
        let preds = test.get(&r.slide_id).map(|s| s.predictions.as_slice()).unwrap_or(&[]);
        let path = dir.join(format!("{}.png", r.slide_id));
        imaging::save_rgb8_png(&render_overlay(r, preds, k)?, &path)?;
        Ok(path)
    };
    let slides: Vec<_> = manifest.in_split(Split::Test).collect();
    if config.deterministic {
        slides.iter().map(render).collect()
    } else {
        slides.par_iter().map(render).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationOutcome {
    pub report: TestReport,
    pub timing: TimingReport,
    pub overlays: Vec<PathBuf>,
    pub log: TrainingLog,
}

pub const CLASSIFICATION_TIMING: &str = "classification.json";

/// Runs all seven stages in order under a run-directory lock and writes the
/// timing report to `{output_root}/timing/classification.json`.
pub fn run_classification_pipeline(config: &RunConfig) -> Result<ClassificationOutcome> {
    let config = config.resolved();
    config.validate()?;
    let _lock = RunLock::acquire(&config.output_root)?;
    let mut timing = TimingReport::default();
    timing.stage(STAGE_SPLIT, || stage_split(&config))?;
    timing.stage(STAGE_PATCHES, || stage_patches(&config))?;
    let (_, log) = timing.stage(STAGE_TRAIN, || stage_train(&config))?;
    timing.stage(STAGE_INFERENCE, || stage_inference(&config))?;
    timing.stage(STAGE_GRIDSEARCH, || stage_gridsearch(&config))?;
    let report = timing.stage(STAGE_TEST, || stage_test(&config))?;
    let overlays = timing.stage(STAGE_VISUALIZE, || stage_visualize(&config))?;
    timing.write(&config.output_root.join("timing").join(CLASSIFICATION_TIMING))?;
    Ok(ClassificationOutcome {
        report,
        timing,
        overlays,
        log,
    })
}

/// Runs one named stage on its own, recording it in a single-stage timing report.
pub fn run_stage(config: &RunConfig, stage: &str) -> Result<TimingReport> {
    let config = config.resolved();
    config.validate()?;
    let _lock = RunLock::acquire(&config.output_root)?;
    let mut timing = TimingReport::default();
    match stage {
        STAGE_SPLIT => timing.stage(stage, || stage_split(&config).map(drop))?,
        STAGE_PATCHES => timing.stage(stage, || stage_patches(&config).map(drop))?,
        STAGE_TRAIN => timing.stage(stage, || stage_train(&config).map(drop))?,
        STAGE_INFERENCE => timing.stage(stage, || stage_inference(&config).map(drop))?,
        STAGE_GRIDSEARCH => timing.stage(stage, || stage_gridsearch(&config).map(drop))?,
        STAGE_TEST => timing.stage(stage, || stage_test(&config).map(drop))?,
        STAGE_VISUALIZE => timing.stage(stage, || stage_visualize(&config).map(drop))?,
        other => return Err(Error::Config(format!("unknown stage `{other}`"))),
    }
    Ok(timing)
}
