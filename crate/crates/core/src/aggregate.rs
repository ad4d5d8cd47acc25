//! Slide-level decisions from patch predictions: thresholded voting, the
//! threshold grid search, metrics and prediction overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Prediction};
use crate::corpus::SlideRecord;
use crate::error::{Error, Result};
use crate::imaging::{quantize, FloatImage};
use crate::patch::{self, PatchConfig, PatchRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub patch: PatchRef,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

impl PatchPrediction {
    pub fn new(patch: PatchRef, prediction: Prediction) -> Self {
        Self {
            patch,
            probabilities: prediction.probabilities,
            predicted_class: prediction.predicted_class,
            confidence: prediction.confidence,
        }
    }
}

/// Per-class minimum confidence for a patch vote to count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(cutoffs: Vec<f64>) -> Result<Self> {
        if let Some(bad) = cutoffs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("threshold {bad} outside [0, 1]")));
        }
        Ok(Self(cutoffs))
    }

    pub fn zeros(num_classes: usize) -> Self {
        Self(vec![0.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub predicted_class: usize,
    pub retained_patch_count: usize,
    pub total_patch_count: usize,
    pub per_class_retained: Vec<usize>,
    pub fallback_used: bool,
}

/// One prediction per tissue patch of the slide, in enumeration order.
pub fn predict_slide(
    model: &Classifier,
    slide: &SlideRecord,
    config: &PatchConfig,
    parallel: bool,
) -> Result<Vec<PatchPrediction>> {
    let img = slide.decode()?;
    predict_image(model, &slide.slide_id, &slide.label, &img, config, parallel)
}

pub fn predict_image(
    model: &Classifier,
    slide_id: &str,
    label: &str,
    img: &FloatImage,
    config: &PatchConfig,
    parallel: bool,
) -> Result<Vec<PatchPrediction>> {
    let patches = patch::extract_from_image(slide_id, label, img, config);
    let run = |(r, p): &(PatchRef, FloatImage)| -> Result<PatchPrediction> {
        Ok(PatchPrediction::new(r.clone(), model.predict_patch(p)?))
    };
    if parallel {
        patches.par_iter().map(run).collect()
    } else {
        patches.iter().map(run).collect()
    }
}

/// Vote winner: highest count, then highest confidence sum, then lowest index.
fn vote(votes: impl Iterator<Item = (usize, f64)>, num_classes: usize) -> (usize, Vec<usize>, usize) {
    let mut counts = vec![0usize; num_classes];
    let mut mass = vec![0f64; num_classes];
    let mut total = 0;
    for (c, conf) in votes {
        counts[c] += 1;
        mass[c] += conf;
        total += 1;
    }
    let mut best = 0;
    for c in 1..num_classes {
        if counts[c] > counts[best] || (counts[c] == counts[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    (best, counts, total)
}

/// Thresholded majority vote. When no patch clears its class threshold the
/// vote falls back to all patches and `fallback_used` is set.
pub fn aggregate(predictions: &[PatchPrediction], thresholds: &ThresholdVector) -> Result<SlidePrediction> {
    let first = predictions.first().ok_or(Error::NoTissue)?;
    let k = thresholds.len();
    if let Some(p) = predictions.iter().find(|p| p.predicted_class >= k) {
        return Err(Error::LabelOutOfRange {
            index: p.predicted_class,
            classes: k,
        });
    }
    let t = thresholds.as_slice();
    let retained = predictions
        .iter()
        .filter(|p| p.confidence >= t[p.predicted_class])
        .map(|p| (p.predicted_class, p.confidence));
    let (mut class, mut per_class_retained, retained_count) = vote(retained, k);
    let fallback_used = retained_count == 0;
    if fallback_used {
        let (c, _, _) = vote(predictions.iter().map(|p| (p.predicted_class, p.confidence)), k);
        class = c;
        per_class_retained = vec![0; k];
    }
    Ok(SlidePrediction {
        slide_id: first.patch.slide_id.clone(),
        predicted_class: class,
        retained_patch_count: retained_count,
        total_patch_count: predictions.len(),
        per_class_retained,
        fallback_used,
    })
}

pub const GRID_STEPS: [f64; 5] = [0.05, 0.1, 0.2, 0.25, 0.5];
pub const EXHAUSTIVE_CLASS_LIMIT: usize = 5;

/// Number of grid points for an accepted step, i.e. `1 / step`.
pub fn grid_points(step: f64) -> Result<usize> {
    let n = (1.0 / step).round();
    if step.is_finite() && step > 0.0 && GRID_STEPS.iter().any(|&s| (s - step).abs() < 1e-12) {
        return Ok(n as usize);
    }
    Err(Error::Config(format!("grid step {step} must be one of {GRID_STEPS:?}")))
}

/// Grid value `i / n`, exact for the decimal steps in use.
pub fn grid_value(i: usize, n: usize) -> f64 {
    i as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub thresholds: ThresholdVector,
    pub accuracy: f64,
    pub correct: usize,
    pub slides: usize,
    pub candidates: usize,
    pub exhaustive: bool,
}

/// Validation slides: predictions plus true class index.
pub type LabeledPredictions = BTreeMap<String, (Vec<PatchPrediction>, usize)>;

/// Slides classified correctly under `thresholds`; slides without tissue count
/// as misses.
pub fn count_correct(validation: &LabeledPredictions, thresholds: &ThresholdVector) -> usize {
    validation
        .values()
        .filter(|(preds, truth)| matches!(aggregate(preds, thresholds), Ok(s) if s.predicted_class == *truth))
        .count()
}

/// Exhaustive search over `{0, step, ..., 1 - step}^classes`, maximizing
/// slide-level validation accuracy. The lexicographically smallest maximizer
/// wins. Above [`EXHAUSTIVE_CLASS_LIMIT`] classes a single shared threshold is
/// searched instead.
pub fn grid_search_thresholds(
    validation: &LabeledPredictions,
    num_classes: usize,
    grid_step: f64,
    parallel: bool,
) -> Result<GridSearchResult> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if num_classes == 0 {
        return Err(Error::Config("grid search needs at least one class".into()));
    }
    let n = grid_points(grid_step)?;
    let exhaustive = num_classes <= EXHAUSTIVE_CLASS_LIMIT;
    let candidates = if exhaustive { n.pow(num_classes as u32) } else { n };
    let vector_at = |index: usize| -> ThresholdVector {
        if !exhaustive {
            return ThresholdVector(vec![grid_value(index, n); num_classes]);
        }
        let mut digits = vec![0.0; num_classes];
        let mut rest = index;
        for d in digits.iter_mut().rev() {
            *d = grid_value(rest % n, n);
            rest /= n;
        }
        ThresholdVector(digits)
    };
    let score = |i: usize| count_correct(validation, &vector_at(i));
    let scores: Vec<usize> = if parallel {
        (0..candidates).into_par_iter().map(score).collect()
    } else {
        (0..candidates).map(score).collect()
    };
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let correct = scores[best];
    Ok(GridSearchResult {
        thresholds: vector_at(best),
        accuracy: correct as f64 / validation.len() as f64,
        correct,
        slides: validation.len(),
        candidates,
        exhaustive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slides: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, class_names: &[String]) -> Self {
        let k = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    class: class_names[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        Self {
            slides: total,
            accuracy: ratio(trace, total),
            per_class,
            confusion,
        }
    }

    /// Plain-text rendering: accuracy line, per-class table, confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "slides\t{}", self.slides);
        let _ = writeln!(s, "accuracy\t{:.6}", self.accuracy);
        let _ = writeln!(s);
        let _ = writeln!(s, "class\tprecision\trecall\tf1\tsupport");
        for m in &self.per_class {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{}", m.class, m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion (rows: true, columns: predicted)");
        let names: Vec<&str> = self.per_class.iter().map(|m| m.class.as_str()).collect();
        let _ = writeln!(s, "\t{}", names.join("\t"));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
        }
        s
    }
}

/// Slide-level metrics; precision, recall and F1 use `0/0 = 0`.
pub fn evaluate(test: &BTreeMap<String, (SlidePrediction, usize)>, class_names: &[String]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let k = class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (pred, truth) in test.values() {
        for &idx in [*truth, pred.predicted_class].iter() {
            if idx >= k {
                return Err(Error::LabelOutOfRange { index: idx, classes: k });
            }
        }
        confusion[*truth][pred.predicted_class] += 1;
    }
    Ok(MetricsReport::from_confusion(confusion, class_names))
}

pub const LEGEND_HEIGHT: u32 = 20;
pub const TINT_OPACITY: f32 = 0.4;

pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
    [0, 0, 128],
];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

pub fn render_overlay(slide: &SlideRecord, predictions: &[PatchPrediction], num_classes: usize) -> Result<RgbImage> {
    render_overlay_image(&slide.decode()?, predictions, num_classes)
}

/// Tints each predicted patch region with its class color; where patches
/// overlap the later one wins. A legend strip of class swatches is appended
/// below the slide.
pub fn render_overlay_image(img: &FloatImage, predictions: &[PatchPrediction], num_classes: usize) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    let mut owner: Vec<Option<usize>> = vec![None; (w * h) as usize];
    for p in predictions {
        let r = &p.patch;
        if !r.fits(w, h) {
            return Err(Error::OutOfBounds {
                x: r.origin_x,
                y: r.origin_y,
                size: r.patch_size,
                width: w,
                height: h,
            });
        }
        for y in r.origin_y..r.origin_y + r.patch_size {
            let row = (y * w) as usize;
            owner[row + r.origin_x as usize..row + (r.origin_x + r.patch_size) as usize].fill(Some(p.predicted_class));
        }
    }
    let mut out = RgbImage::from_pixel(w, h + LEGEND_HEIGHT, Rgb([255, 255, 255]));
    for (x, y, px) in img.enumerate_pixels() {
        let v = match owner[(y * w + x) as usize] {
            None => px.0.map(quantize),
            Some(c) => {
                let color = class_color(c);
                let mut o = [0u8; 3];
                for i in 0..3 {
                    o[i] = quantize((1.0 - TINT_OPACITY) * px.0[i] + TINT_OPACITY * color[i] as f32 / 255.0);
                }
                o
            }
        };
        out.put_pixel(x, y, Rgb(v));
    }
    for c in 0..num_classes {
        let x0 = 4 + 16 * c as u32;
        for y in h + 4..h + 16 {
            for x in x0..(x0 + 12).min(w) {
                out.put_pixel(x, y, Rgb(class_color(c)));
            }
        }
    }
    Ok(out)
}
