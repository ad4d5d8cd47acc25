#![allow(dead_code)]

use std::path::{Path, PathBuf};

use slidelab::RunConfig;
use slidelab_core::classifier::Network;
use slidelab_core::corpus::{SplitCounts, DEFAULT_CLASSES};
use slidelab_core::synthetic::SyntheticCorpus;

pub fn corpus(dir: &Path, classes: usize, per_class: usize, size: u32) -> PathBuf {
    SyntheticCorpus {
        classes: DEFAULT_CLASSES[..classes].iter().map(|s| s.to_string()).collect(),
        slides_per_class: per_class,
        slide_size: size,
        seed: 2023,
    }
    .write(dir)
    .unwrap()
}

/// Tiny classification run: 32 px patches, a narrow compact network.
pub fn small_config(manifest: PathBuf, root: PathBuf, classes: usize, epochs: usize) -> RunConfig {
    let mut c = RunConfig {
        manifest,
        output_root: root,
        seed: 3,
        ..Default::default()
    };
    c.patch.patch_size = 32;
    c.classifier.input_size = 32;
    c.classifier.num_classes = classes;
    c.classifier.epochs = epochs;
    c.classifier.batch_size = 16;
    c.classifier.base_learning_rate = 0.005;
    c.classifier.network = Network::Compact { width: 2 };
    c
}

/// Toy-scale diffusion settings: 32 px fine-tuning, short runs.
pub fn small_diffusion(c: &mut RunConfig) {
    c.finetune.resolution = 32;
    c.finetune.max_train_steps = 5;
    c.finetune.learning_rate = 1e-3;
    c.textual_inversion.max_train_steps = 5;
    c.generation.output_resolution = 32;
    c.generation.steps = 10;
    c.generation.count = 2;
    c.diffusion.max_images = Some(4);
}

pub fn counts(train: usize, validation: usize, test: usize) -> Option<SplitCounts> {
    Some(SplitCounts { train, validation, test })
}
