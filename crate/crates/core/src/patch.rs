//! Sliding-window patch extraction with background rejection and per-class
//! balancing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SlideRecord, Split};
use crate::error::{Error, Result};
use crate::imaging::FloatImage;

/// Near-white, unsaturated pixels count as glass. A patch is background when
/// at least `background_fraction` of its pixels are glass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WhitespaceRule {
    pub luminance_floor: f32,
    pub saturation_ceiling: f32,
    pub background_fraction: f32,
}

impl Default for WhitespaceRule {
    fn default() -> Self {
        Self {
            luminance_floor: 0.86,
            saturation_ceiling: 0.08,
            background_fraction: 0.90,
        }
    }
}

impl WhitespaceRule {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.luminance_floor,
            self.saturation_ceiling,
            self.background_fraction,
        ];
        if all.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!(
                "whitespace thresholds must lie in [0, 1]: {self:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn is_glass(&self, rgb: [f32; 3]) -> bool {
        let max = rgb[0].max(rgb[1]).max(rgb[2]);
        let min = rgb[0].min(rgb[1]).min(rgb[2]);
        let saturation = if max == 0.0 { 0.0 } else { (max - min) / max };
        max >= self.luminance_floor && saturation <= self.saturation_ceiling
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub patch_size: u32,
    pub overlap_fraction: f64,
    pub whitespace: WhitespaceRule,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 224,
            overlap_fraction: 0.5,
            whitespace: WhitespaceRule::default(),
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        self.whitespace.validate()
    }

    /// `patch_size * (1 - overlap)`, rounded to nearest, never below 1.
    pub fn stride(&self) -> u32 {
        let s = (self.patch_size as f64 * (1.0 - self.overlap_fraction)).round();
        (s as u32).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub origin_x: u32,
    pub origin_y: u32,
    pub patch_size: u32,
    pub label: String,
}

impl PatchRef {
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}", self.slide_id, self.origin_x, self.origin_y)
    }

    /// `{root}/{split}/{class}/{slide_id}_{x}_{y}.png`
    pub fn path_under(&self, root: &Path, split: Split) -> PathBuf {
        root.join(split.as_str())
            .join(&self.label)
            .join(format!("{}.png", self.file_stem()))
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.origin_x as u64 + self.patch_size as u64 <= width as u64
            && self.origin_y as u64 + self.patch_size as u64 <= height as u64
    }
}

/// Row-major window origins `{0, s, 2s, ...}` on each axis that keep the
/// whole window inside the slide.
pub fn enumerate_origins(width: u32, height: u32, config: &PatchConfig) -> Vec<(u32, u32)> {
    let size = config.patch_size;
    if size == 0 || size > width || size > height {
        return Vec::new();
    }
    let stride = config.stride() as usize;
    let xs: Vec<u32> = (0..=width - size).step_by(stride).collect();
    let ys = (0..=height - size).step_by(stride);
    ys.flat_map(|y| xs.iter().map(move |&x| (x, y))).collect()
}

pub fn is_background(patch: &FloatImage, rule: &WhitespaceRule) -> bool {
    let total = patch.width() as usize * patch.height() as usize;
    if total == 0 {
        return true;
    }
    let glass = patch.pixels().filter(|p| rule.is_glass(p.0)).count();
    glass as f64 / total as f64 >= rule.background_fraction as f64
}

pub fn crop(img: &FloatImage, x: u32, y: u32, size: u32) -> FloatImage {
    image::imageops::crop_imm(img, x, y, size, size).to_image()
}

/// Tissue patches of an already-decoded slide, in enumeration order.
pub fn extract_from_image(
    slide_id: &str,
    label: &str,
    img: &FloatImage,
    config: &PatchConfig,
) -> Vec<(PatchRef, FloatImage)> {
    let (w, h) = img.dimensions();
    enumerate_origins(w, h, config)
        .into_iter()
        .filter_map(|(x, y)| {
            let patch = crop(img, x, y, config.patch_size);
            if is_background(&patch, &config.whitespace) {
                return None;
            }
            let r = PatchRef {
                slide_id: slide_id.to_string(),
                origin_x: x,
                origin_y: y,
                patch_size: config.patch_size,
                label: label.to_string(),
            };
            Some((r, patch))
        })
        .collect()
}

pub fn extract_patches(slide: &SlideRecord, config: &PatchConfig) -> Result<Vec<(PatchRef, FloatImage)>> {
    let img = slide.decode()?;
    Ok(extract_from_image(&slide.slide_id, &slide.label, &img, config))
}

/// Downsamples every class to a common size: `target` when given, else the
/// smallest class count. Classes already at or below that size are returned
/// untouched. Kept patches preserve their input order.
pub fn balance_classes(
    patch_lists: &BTreeMap<String, Vec<PatchRef>>,
    target: Option<usize>,
    seed: u64,
) -> Result<BTreeMap<String, Vec<PatchRef>>> {
    if target == Some(0) {
        return Err(Error::Config("balance target must be positive".into()));
    }
    let cap = target.unwrap_or_else(|| patch_lists.values().map(Vec::len).min().unwrap_or(0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (class, patches) in patch_lists {
        let kept = if patches.len() <= cap {
            patches.clone()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, patches.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| patches[i].clone()).collect()
        };
        out.insert(class.clone(), kept);
    }
    Ok(out)
}
