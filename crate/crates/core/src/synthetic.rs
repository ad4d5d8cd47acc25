//! Procedural stand-in corpus: textured tissue blobs on white glass, one
//! texture family per class.

use std::path::{Path, PathBuf};

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusManifest, SlideRecord, Split, DEFAULT_CLASSES};
use crate::error::{io_err, Result};
use crate::imaging::{self, FloatImage};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub classes: Vec<String>,
    pub slides_per_class: usize,
    pub slide_size: u32,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    /// 60 slides: 12 per class of the default taxonomy, 160 px square.
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            slides_per_class: 12,
            slide_size: 160,
            seed: 2023,
        }
    }
}

impl SyntheticCorpus {
    /// Writes `slides/*.png` and `manifest.tsv` under `dir`; returns the
    /// manifest path. Slides interleave classes in manifest order.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let slide_dir = dir.join("slides");
        std::fs::create_dir_all(&slide_dir).map_err(io_err(&slide_dir))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut records = Vec::new();
        for i in 0..self.slides_per_class {
            for (c, class) in self.classes.iter().enumerate() {
                let slide_id = format!("syn-{class}-{i:03}");
                let img = render_slide(c, self.slide_size, &mut rng);
                let rel = PathBuf::from("slides").join(format!("{slide_id}.png"));
                imaging::save_png(&img, &dir.join(&rel))?;
                records.push(SlideRecord {
                    slide_id,
                    path: rel,
                    width: self.slide_size,
                    height: self.slide_size,
                    label: class.clone(),
                    split: Split::Unassigned,
                });
            }
        }
        let manifest = CorpusManifest::new(
            self.classes.clone(),
            records,
            format!("procedural textures, seed {}", self.seed),
        )?;
        let path = dir.join("manifest.tsv");
        manifest.write(&path)?;
        Ok(path)
    }
}

/// Texture intensity in `[0, 1]` for class family `class % 5` at `(x, y)`.
fn texture(class: usize, x: f32, y: f32, phase: f32, period: f32) -> f32 {
    let tau = std::f32::consts::TAU;
    match class % 5 {
        // round nuclei on a lattice
        0 => {
            let cx = (x + phase) % period - period / 2.0;
            let cy = (y + phase) % period - period / 2.0;
            if cx * cx + cy * cy < (period * 0.28).powi(2) { 1.0 } else { 0.0 }
        }
        // wavy horizontal bands
        1 => 0.5 + 0.5 * (tau * (y + 2.5 * (tau * x / (period * 2.0)).sin()) / period + phase).sin(),
        // coarse checkerboard
        2 => {
            let a = ((x + phase) / period).floor() as i64;
            let b = ((y + phase) / period).floor() as i64;
            ((a + b).rem_euclid(2)) as f32
        }
        // fine granular speckle
        3 => {
            let h = ((x as u32).wrapping_mul(73_856_093) ^ (y as u32).wrapping_mul(19_349_663) ^ phase as u32)
                .wrapping_mul(2_654_435_761);
            (h >> 24) as f32 / 255.0
        }
        // diagonal stripes
        _ => 0.5 + 0.5 * (tau * (x + y) / period + phase).sin(),
    }
}

/// Two-tone palette per class family: (light, dark).
fn palette(class: usize) -> ([f32; 3], [f32; 3]) {
    match class % 5 {
        0 => ([0.96, 0.84, 0.90], [0.35, 0.20, 0.55]),
        1 => ([0.85, 0.55, 0.70], [0.45, 0.15, 0.40]),
        2 => ([0.80, 0.72, 0.92], [0.55, 0.40, 0.75]),
        3 => ([0.90, 0.45, 0.50], [0.65, 0.15, 0.25]),
        _ => ([0.92, 0.65, 0.75], [0.70, 0.35, 0.60]),
    }
}

pub fn render_slide(class: usize, size: u32, rng: &mut impl Rng) -> FloatImage {
    let (light, dark) = palette(class);
    let period = 8.0 + rng.random::<f32>() * 4.0;
    let phase = rng.random::<f32>() * 100.0;
    let s = size as f32;
    let cx = s * (0.45 + 0.1 * rng.random::<f32>());
    let cy = s * (0.45 + 0.1 * rng.random::<f32>());
    let rx = s * (0.30 + 0.12 * rng.random::<f32>());
    let ry = s * (0.30 + 0.12 * rng.random::<f32>());
    let wobble = rng.random::<f32>() * 6.0;
    let tint: f32 = (rng.random::<f32>() - 0.5) * 0.06;
    let mut img = imaging::filled(size, size, [1.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32, y as f32);
            let angle = (fy - cy).atan2(fx - cx);
            let edge = 1.0 + 0.08 * (wobble + 5.0 * angle).sin();
            let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let noise = (rng.random::<f32>() - 0.5) * 0.06;
            let px = if d <= edge * edge {
                let t = texture(class, fx, fy, phase, period);
                let mut p = [0f32; 3];
                for c in 0..3 {
                    p[c] = (light[c] + (dark[c] - light[c]) * t + tint + noise).clamp(0.0, 1.0);
                }
                p
            } else {
                let v = (0.97 + noise * 0.5).clamp(0.0, 1.0);
                [v, v, v]
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;
    use crate::patch::{extract_from_image, PatchConfig};

    #[test]
    fn writes_loadable_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let gen = SyntheticCorpus {
            slides_per_class: 2,
            slide_size: 64,
            ..Default::default()
        };
        let path = gen.write(dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.class_set().len(), 5);
        assert!(m.records().iter().all(|r| r.width == 64 && r.height == 64));
    }

    #[test]
    fn every_class_yields_tissue_and_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PatchConfig {
            patch_size: 32,
            ..Default::default()
        };
        for class in 0..5 {
            let img = render_slide(class, 160, &mut rng);
            let kept = extract_from_image("s", "a", &img, &cfg).len();
            assert!(kept > 10 && kept < 81, "class {class}: {kept} tissue patches");
        }
    }
}
