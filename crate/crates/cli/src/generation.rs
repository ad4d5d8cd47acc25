//! Normalize, fine-tune and generate: the three-step image generation workflow.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slidelab_core::corpus::{load_manifest, normalize_for_diffusion};
use slidelab_core::imaging::{self, FloatImage};
use slidelab_diffusion::{
    finetune_dreambooth, finetune_textual_inversion, generate, write_images, FinetuneConfig, Regime, StepRecord, ToyBackend,
};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::lock::RunLock;
use crate::timing::{format_hms, TimingReport};

pub const STAGE_NORMALIZE: &str = "normalize";
pub const STAGE_FINETUNE: &str = "finetune";
pub const STAGE_GENERATE: &str = "generate";

/// A fine-tuning regime, or the unmodified base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Control,
    Tuned(Regime),
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Control,
        Variant::Tuned(Regime::DreamboothUnet),
        Variant::Tuned(Regime::DreamboothUnetTextEncoder),
        Variant::Tuned(Regime::TextualInversion),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Control => "control",
            Variant::Tuned(r) => r.as_str(),
        }
    }

    pub fn modifiers(self) -> &'static str {
        match self {
            Variant::Control => "N/A",
            Variant::Tuned(r) => r.modifiers(),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "control" {
            return Ok(Variant::Control);
        }
        s.parse::<Regime>()
            .map(Variant::Tuned)
            .map_err(|_| Error::Config(format!("unknown regime `{s}`; expected control, dreambooth_unet, dreambooth_unet_text_encoder or textual_inversion")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn base_backend(config: &RunConfig) -> Result<ToyBackend> {
    Ok(match &config.diffusion.base_backend {
        Some(dir) => ToyBackend::load(dir)?,
        None => ToyBackend::new(config.diffusion.toy.clone())?,
    })
}

fn normalize_dir(config: &RunConfig) -> PathBuf {
    config.output_root.join(STAGE_NORMALIZE)
}

pub fn backend_dir(config: &RunConfig, regime: Regime) -> PathBuf {
    config.output_root.join(STAGE_FINETUNE).join(regime.as_str()).join("backend")
}

/// Resizes corpus slides to the fine-tuning resolution into
/// `normalize/{slide_id}.png`, listed in `normalize/images.json`.
pub fn stage_normalize(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(&config.manifest)?;
    let limit = config.diffusion.max_images.unwrap_or(usize::MAX);
    let records: Vec<_> = manifest.records().iter().take(limit).collect();
    let dir = normalize_dir(config);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let edge = config.finetune.resolution;
    let one = |r: &&slidelab_core::corpus::SlideRecord| -> Result<PathBuf> {
        let path = dir.join(format!("{}.png", r.slide_id));
        imaging::save_png(&normalize_for_diffusion(r, edge)?, &path)?;
        Ok(path)
    };
    let paths: Vec<PathBuf> = if config.deterministic {
        records.iter().map(one).collect::<Result<_>>()?
    } else {
        records.par_iter().map(one).collect::<Result<_>>()?
    };
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    fs::write(dir.join("images.json"), serde_json::to_string_pretty(&names)? + "\n").map_err(io_err(dir.join("images.json")))?;
    Ok(paths)
}

fn load_normalized(config: &RunConfig) -> Result<Vec<FloatImage>> {
    let dir = normalize_dir(config);
    let list = dir.join("images.json");
    if !list.exists() {
        return Err(Error::MissingArtifact {
            path: list,
            stage: STAGE_NORMALIZE,
        });
    }
    let names: Vec<String> = serde_json::from_str(&fs::read_to_string(&list).map_err(io_err(&list))?)?;
    names
        .iter()
        .map(|n| imaging::decode_rgb(&dir.join(n)).map_err(Error::from))
        .collect()
}

/// Fine-tunes the base backend under `regime` and saves it with its step log.
pub fn stage_finetune(config: &RunConfig, regime: Regime) -> Result<(ToyBackend, Vec<StepRecord>)> {
    let base = base_backend(config)?;
    let images = load_normalized(config)?;
    let (tuned, log) = match regime {
        Regime::TextualInversion => finetune_textual_inversion(&base, &images, &config.textual_inversion, &config.finetune)?,
        r => finetune_dreambooth(
            &base,
            &images,
            &FinetuneConfig {
                regime: r,
                ..config.finetune.clone()
            },
        )?,
    };
    let dir = config.output_root.join(STAGE_FINETUNE).join(regime.as_str());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    tuned.save(&backend_dir(config, regime))?;
    let mut lines = String::new();
    for rec in &log {
        lines.push_str(&serde_json::to_string(rec)?);
        lines.push('\n');
    }
    fs::write(dir.join("steps.jsonl"), lines).map_err(io_err(dir.join("steps.jsonl")))?;
    Ok((tuned, log))
}

/// Generates `config.generation` into `generate/{variant}/{job_id}_{index}.png`.
pub fn stage_generate(config: &RunConfig, variant: Variant, backend: &ToyBackend) -> Result<(Vec<PathBuf>, Vec<f64>)> {
    let dir = config.output_root.join(STAGE_GENERATE).join(variant.as_str());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let images = generate(backend, &config.generation, !config.deterministic)?;
    let paths = write_images(&config.generation, &images, &dir)?;
    Ok((paths, images.iter().map(|g| g.seconds).collect()))
}

/// One row of the per-regime results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub regime: String,
    pub training_seconds: Option<f64>,
    pub seconds_per_image: Option<f64>,
    pub modifiers: String,
}

impl GenerationRow {
    pub fn from_timing(timing: &TimingReport) -> Self {
        let regime = timing.regime.clone().unwrap_or_default();
        let modifiers = regime.parse::<Variant>().map(|v| v.modifiers().to_string()).unwrap_or_default();
        Self {
            regime,
            training_seconds: timing.seconds_for(STAGE_FINETUNE),
            seconds_per_image: timing.mean_image_seconds(),
            modifiers,
        }
    }
}

pub const TABLE_HEADER: &str = "| Regime | Training Time | Generation Time (per image) | Modifiers |";

/// Markdown table with one row per regime, sorted by regime name.
pub fn generation_table(rows: &[GenerationRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.regime.cmp(&b.regime));
    let mut s = format!("{TABLE_HEADER}\n|---|---|---|---|\n");
    for r in rows {
        let train = r.training_seconds.map_or("N/A".to_string(), format_hms);
        let gen = r.seconds_per_image.map_or("N/A".to_string(), |v| format!("{v:.3} seconds"));
        s.push_str(&format!("| {} | {} | {} | {} |\n", r.regime, train, gen, r.modifiers));
    }
    s
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub images: Vec<PathBuf>,
    pub timing: TimingReport,
    pub row: GenerationRow,
}

pub fn timing_path(root: &Path, variant: Variant) -> PathBuf {
    root.join("timing").join(format!("{}.json", variant.as_str()))
}

/// Optionally fine-tunes, then generates. With fine-tuning disabled the
/// saved backend from an earlier run is used; the control variant always
/// uses the base backend. The timing report goes to
/// `{output_root}/timing/{variant}.json`.
pub fn run_generation_pipeline(config: &RunConfig, regime: &str) -> Result<GenerationOutcome> {
    let variant: Variant = regime.parse()?;
    let config = config.resolved();
    config.validate()?;
    let _lock = RunLock::acquire(&config.output_root)?;
    let mut timing = TimingReport::for_regime(variant.as_str());

    let backend = match variant {
        Variant::Control => base_backend(&config)?,
        Variant::Tuned(r) if config.diffusion.finetune_enabled => {
            timing.stage(STAGE_NORMALIZE, || stage_normalize(&config))?;
            timing.stage(STAGE_FINETUNE, || stage_finetune(&config, r))?.0
        }
        Variant::Tuned(r) => {
            let dir = backend_dir(&config, r);
            if !dir.join("metadata.json").exists() {
                return Err(Error::MissingBackend {
                    regime: r.as_str().into(),
                    path: dir,
                });
            }
            ToyBackend::load(&dir)?
        }
    };
    let (images, seconds) = timing.stage(STAGE_GENERATE, || stage_generate(&config, variant, &backend))?;
    timing.image_seconds = seconds;
    timing.write(&timing_path(&config.output_root, variant))?;
    let row = GenerationRow::from_timing(&timing);
    Ok(GenerationOutcome { images, timing, row })
}

/// Normalize and fine-tune only, leaving the backend for a later `generate`.
pub fn run_finetune(config: &RunConfig, regime: Regime) -> Result<TimingReport> {
    let config = config.resolved();
    config.validate()?;
    let _lock = RunLock::acquire(&config.output_root)?;
    let mut timing = TimingReport::for_regime(regime.as_str());
    timing.stage(STAGE_NORMALIZE, || stage_normalize(&config))?;
    timing.stage(STAGE_FINETUNE, || stage_finetune(&config, regime))?;
    Ok(timing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("full".parse::<Variant>().is_err());
    }

    #[test]
    fn table_rows_sorted_and_formatted() {
        let rows = vec![
            GenerationRow {
                regime: "textual_inversion".into(),
                training_seconds: Some(3454.0),
                seconds_per_image: Some(3.0),
                modifiers: "Tokenizer".into(),
            },
            GenerationRow {
                regime: "dreambooth_unet".into(),
                training_seconds: Some(363.0),
                seconds_per_image: Some(4.0),
                modifiers: "UNet".into(),
            },
        ];
        let t = generation_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], TABLE_HEADER);
        assert_eq!(lines[2], "| dreambooth_unet | 00:06:03 | 4.000 seconds | UNet |");
        assert_eq!(lines[3], "| textual_inversion | 00:57:34 | 3.000 seconds | Tokenizer |");
    }
}
