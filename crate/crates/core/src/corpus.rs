//! Slide corpus ingestion: manifest parsing and validation, seeded
//! train/validation/test splitting, and square resampling of whole slides for
//! the generative pipeline.
//!
//! Manifest format (UTF-8, tab-delimited, one record per line):
//!
//! ```text
//! #classes: clear_cell,papillary,chromophobe,oncocytoma,normal
//! #source: free text describing where the slides came from
//! slide-001	slides/slide-001.png	clear_cell
//! slide-002	slides/slide-002.png	papillary	train
//! ```
//!
//! The optional fourth column pins a split explicitly. Relative paths are
//! resolved against the manifest's directory. Other `#` lines are comments.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::imaging::{self, FloatImage};

/// Five-class renal taxonomy used when a manifest does not override it.
pub const DEFAULT_CLASSES: [&str; 5] = [
    "clear_cell_rcc",
    "papillary_rcc",
    "chromophobe_rcc",
    "renal_oncocytoma",
    "normal",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub label: String,
    pub split: Split,
}

impl SlideRecord {
    pub fn decode(&self) -> Result<FloatImage> {
        imaging::decode_rgb(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    records: Vec<SlideRecord>,
    class_set: Vec<String>,
    source_note: String,
}

impl CorpusManifest {
    /// Builds a manifest after checking every structural invariant. Image
    /// files are not touched; see [`load_manifest`] for that.
    pub fn new(
        class_set: Vec<String>,
        records: Vec<SlideRecord>,
        source_note: impl Into<String>,
    ) -> Result<Self> {
        validate_class_set(&class_set, 1)?;
        let mut seen = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            let line = i + 1;
            if !seen.insert(rec.slide_id.as_str()) {
                return Err(Error::DuplicateSlide {
                    line,
                    slide_id: rec.slide_id.clone(),
                });
            }
            if !class_set.contains(&rec.label) {
                return Err(Error::UnknownLabel {
                    line,
                    label: rec.label.clone(),
                });
            }
            if rec.width == 0 || rec.height == 0 {
                return Err(Error::Manifest {
                    line,
                    message: format!("slide `{}` has zero extent", rec.slide_id),
                });
            }
        }
        Ok(Self {
            records,
            class_set,
            source_note: source_note.into(),
        })
    }

    pub fn records(&self) -> &[SlideRecord] {
        &self.records
    }

    pub fn class_set(&self) -> &[String] {
        &self.class_set
    }

    pub fn source_note(&self) -> &str {
        &self.source_note
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_set.iter().position(|c| c == label)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SlideRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> SplitCounts {
        let count = |s| self.in_split(s).count();
        SplitCounts {
            train: count(Split::Train),
            validation: count(Split::Validation),
            test: count(Split::Test),
        }
    }

    pub fn fully_assigned(&self) -> bool {
        self.records.iter().all(|r| r.split != Split::Unassigned)
    }

    /// Writes the manifest in the tab-delimited format, with the split column
    /// present on assigned rows.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#classes: {}\n", self.class_set.join(","));
        if !self.source_note.is_empty() {
            out.push_str(&format!("#source: {}\n", self.source_note));
        }
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}", r.slide_id, r.path.display(), r.label));
            if r.split != Split::Unassigned {
                out.push('\t');
                out.push_str(r.split.as_str());
            }
            out.push('\n');
        }
        out
    }
}

fn validate_class_set(classes: &[String], line: usize) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Manifest {
            line,
            message: "class set is empty".into(),
        });
    }
    let mut seen = HashSet::new();
    for c in classes {
        if c.is_empty() || !seen.insert(c) {
            return Err(Error::Manifest {
                line,
                message: format!("class set entry `{c}` is empty or duplicated"),
            });
        }
    }
    Ok(())
}

struct RawRow {
    line: usize,
    slide_id: String,
    path: PathBuf,
    label: String,
    split: Split,
}

/// Parses and validates a manifest file, decoding every referenced image to
/// confirm it is readable and to record its dimensions.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut class_set: Option<(usize, Vec<String>)> = None;
    let mut source_note = String::new();
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if let Some(rest) = trimmed.strip_prefix("#classes:") {
            let classes = rest
                .split(',')
                .map(|c| c.trim().to_string())
                .filter(|c| !c.is_empty())
                .collect();
            class_set = Some((line, classes));
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("#source:") {
            source_note = rest.trim().to_string();
            continue;
        }
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::Manifest {
                line,
                message: format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let split = match fields.get(3) {
            Some(s) => s.parse().map_err(|message| Error::Manifest { line, message })?,
            None => Split::Unassigned,
        };
        let rel = PathBuf::from(fields[1]);
        rows.push(RawRow {
            line,
            slide_id: fields[0].to_string(),
            path: if rel.is_absolute() { rel } else { base.join(rel) },
            label: fields[2].to_string(),
            split,
        });
    }

    let (class_line, class_set) = class_set.ok_or(Error::Manifest {
        line: 1,
        message: "missing `#classes:` header".into(),
    })?;
    validate_class_set(&class_set, class_line)?;

    let mut seen = HashSet::new();
    for row in &rows {
        if !seen.insert(row.slide_id.as_str()) {
            return Err(Error::DuplicateSlide {
                line: row.line,
                slide_id: row.slide_id.clone(),
            });
        }
        if !class_set.contains(&row.label) {
            return Err(Error::UnknownLabel {
                line: row.line,
                label: row.label.clone(),
            });
        }
        if !row.path.is_file() {
            return Err(Error::MissingImage {
                line: row.line,
                path: row.path.clone(),
            });
        }
    }

    let dims: Vec<Result<(u32, u32)>> = rows
        .par_iter()
        .map(|row| {
            imaging::decode_rgb(&row.path)
                .map(|img| img.dimensions())
                .map_err(|e| Error::Manifest {
                    line: row.line,
                    message: e.to_string(),
                })
        })
        .collect();

    let mut records = Vec::with_capacity(rows.len());
    for (row, dim) in rows.into_iter().zip(dims) {
        let (width, height) = dim?;
        records.push(SlideRecord {
            slide_id: row.slide_id,
            path: row.path,
            width,
            height,
            label: row.label,
            split: row.split,
        });
    }
    CorpusManifest::new(class_set, records, source_note)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::SplitRatios(sum));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    /// 41 / 20 / 39.
    fn default() -> Self {
        Self {
            train: 0.41,
            validation: 0.20,
            test: 0.39,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// Round-to-nearest for train and validation; test takes the remainder.
    pub fn from_ratios(n: usize, ratios: &SplitRatios) -> Self {
        let train = ((n as f64 * ratios.train).round() as usize).min(n);
        let validation = ((n as f64 * ratios.validation).round() as usize).min(n - train);
        Self {
            train,
            validation,
            test: n - train - validation,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitOptions {
    /// Explicit per-split counts; must sum to the corpus size.
    pub counts: Option<SplitCounts>,
    /// Permit overwriting existing assignments.
    pub reassign: bool,
}

/// Seeded random split. Records keep their manifest order; only the `split`
/// field changes. The result depends only on manifest order, the ratios (or
/// count override) and the seed.
pub fn split_corpus(
    manifest: &CorpusManifest,
    ratios: SplitRatios,
    seed: u64,
    options: SplitOptions,
) -> Result<CorpusManifest> {
    ratios.validate()?;
    let n = manifest.len();
    if !options.reassign {
        if let Some(r) = manifest.records.iter().find(|r| r.split != Split::Unassigned) {
            return Err(Error::AlreadyAssigned {
                slide_id: r.slide_id.clone(),
            });
        }
    }
    let counts = match options.counts {
        Some(c) if c.total() != n => {
            return Err(Error::Config(format!(
                "split count override sums to {} but the corpus has {n} slides",
                c.total()
            )))
        }
        Some(c) => c,
        None => SplitCounts::from_ratios(n, &ratios),
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut out = manifest.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.records[idx].split = if rank < counts.train {
            Split::Train
        } else if rank < counts.train + counts.validation {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Resamples the whole slide to a `target_edge` square (bilinear).
pub fn normalize_for_diffusion(record: &SlideRecord, target_edge: u32) -> Result<FloatImage> {
    if target_edge < 8 {
        return Err(Error::Config(format!(
            "diffusion target edge must be at least 8, got {target_edge}"
        )));
    }
    let img = record.decode()?;
    Ok(imaging::resize_bilinear(&img, target_edge, target_edge))
}
