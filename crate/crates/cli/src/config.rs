//! Run configuration stored as a single TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slidelab_core::classifier::ClassifierConfig;
use slidelab_core::corpus::{SplitCounts, SplitRatios};
use slidelab_core::patch::PatchConfig;
use slidelab_diffusion::{FinetuneConfig, GenerationJob, TextualInversionConfig, ToyBackendConfig};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    #[serde(flatten)]
    pub ratios: SplitRatios,
    /// Exact counts; overrides the ratios when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<SplitCounts>,
    /// Re-split slides that already carry a split in the manifest.
    pub reassign: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            counts: None,
            reassign: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationSettings {
    pub grid_step: f64,
}

impl Default for AggregationSettings {
    fn default() -> Self {
        Self { grid_step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSettings {
    /// Saved backend directory to start from; the bundled toy model otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_backend: Option<PathBuf>,
    /// Recorded alongside results; the weights themselves come from `base_backend`.
    pub model_name: String,
    pub toy: ToyBackendConfig,
    /// Fine-tune before generating when no saved backend exists.
    pub finetune_enabled: bool,
    /// Use at most this many corpus slides as fine-tuning images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            base_backend: None,
            model_name: "CompVis/stable-diffusion-v1-4".into(),
            toy: ToyBackendConfig::default(),
            finetune_enabled: true,
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub output_root: PathBuf,
    /// Copied into every seeded stage.
    pub seed: u64,
    /// Single-threaded execution everywhere.
    pub deterministic: bool,
    pub split: SplitSettings,
    pub patch: PatchConfig,
    /// Per-class patch count for the training split; the smallest class size when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance_target: Option<usize>,
    pub classifier: ClassifierConfig,
    pub aggregation: AggregationSettings,
    pub diffusion: DiffusionSettings,
    pub finetune: FinetuneConfig,
    pub textual_inversion: TextualInversionConfig,
    pub generation: GenerationJob,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.tsv"),
            output_root: PathBuf::from("runs/default"),
            seed: 0,
            deterministic: false,
            split: SplitSettings::default(),
            patch: PatchConfig::default(),
            balance_target: None,
            classifier: ClassifierConfig::default(),
            aggregation: AggregationSettings::default(),
            diffusion: DiffusionSettings::default(),
            finetune: FinetuneConfig::default(),
            textual_inversion: TextualInversionConfig::default(),
            generation: GenerationJob::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(io_err(path))
    }

    /// Copies the global seed and determinism flag into the nested configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.classifier.seed = c.seed;
        c.classifier.deterministic = c.deterministic;
        c.finetune.seed = c.seed;
        c.generation.seed = c.seed;
        c.diffusion.toy.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.split.ratios.validate()?;
        self.patch.validate()?;
        self.classifier.validate()?;
        if self.classifier.input_size != self.patch.patch_size {
            return Err(Error::Config(format!(
                "classifier.input_size {} must equal patch.patch_size {}",
                self.classifier.input_size, self.patch.patch_size
            )));
        }
        if self.balance_target == Some(0) {
            return Err(Error::Config("balance_target must be positive".into()));
        }
        slidelab_core::aggregate::grid_points(self.aggregation.grid_step)?;
        self.diffusion.toy.validate()?;
        self.finetune.validate(self.diffusion.toy.downsample)?;
        if self.textual_inversion.max_train_steps == 0 {
            return Err(Error::Config("textual_inversion.max_train_steps must be at least 1".into()));
        }
        self.generation.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use slidelab_core::classifier::Network;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        for key in [
            "instance_prompt",
            "resolution",
            "train_batch_size",
            "gradient_accumulation_steps",
            "learning_rate",
            "lr_scheduler",
            "max_train_steps",
            "model_name",
        ] {
            assert!(text.contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn customized_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.balance_target = Some(40);
        c.split.counts = Some(SplitCounts { train: 3, validation: 1, test: 2 });
        c.classifier.network = Network::Compact { width: 6 };
        c.classifier.base_learning_rate = 0.0123456789;
        c.diffusion.base_backend = Some(PathBuf::from("/models/base"));
        c.finetune.learning_rate = 2e-6;
        c.generation.guidance_scale = 1.0;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[classifier]\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.classifier.epochs, 3);
        assert_eq!(c.classifier.base_learning_rate, 0.001);
        assert_eq!(c.patch.patch_size, 224);
    }

    #[test]
    fn validation_catches_mismatched_sizes() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.patch.patch_size = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.classifier.input_size = 32;
        c.validate().unwrap();
        c.generation.count = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn global_seed_propagates() {
        let c = RunConfig { seed: 99, deterministic: true, ..Default::default() }.resolved();
        assert_eq!((c.classifier.seed, c.finetune.seed, c.generation.seed), (99, 99, 99));
        assert!(c.classifier.deterministic);
    }
}
