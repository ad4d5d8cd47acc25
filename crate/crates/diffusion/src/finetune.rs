//! Dreambooth and textual-inversion fine-tuning over a [`TrainableBackend`].

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slidelab_core::classifier::Adam;
use slidelab_core::imaging::FloatImage;

use crate::backend::{fingerprint, Component, DiffusionBackend, Lineage, TrainableBackend};
use crate::error::{DiffusionError, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    DreamboothUnet,
    DreamboothUnetTextEncoder,
    TextualInversion,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::DreamboothUnet, Regime::DreamboothUnetTextEncoder, Regime::TextualInversion];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::DreamboothUnet => "dreambooth_unet",
            Regime::DreamboothUnetTextEncoder => "dreambooth_unet_text_encoder",
            Regime::TextualInversion => "textual_inversion",
        }
    }

    /// Components whose parameters may change. Textual inversion touches a
    /// single row of the text encoder's embedding table.
    pub fn trainable(self) -> &'static [Component] {
        match self {
            Regime::DreamboothUnet => &[Component::Denoiser],
            Regime::DreamboothUnetTextEncoder => &[Component::Denoiser, Component::TextEncoder],
            Regime::TextualInversion => &[Component::TextEncoder],
        }
    }

    /// What the regime modifies, in the vocabulary of a results table.
    pub fn modifiers(self) -> &'static str {
        match self {
            Regime::DreamboothUnet => "UNet",
            Regime::DreamboothUnetTextEncoder => "UNet & Text Encoder",
            Regime::TextualInversion => "Tokenizer",
        }
    }
}

impl FromStr for Regime {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| DiffusionError::Regime(s.to_string()))
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over `max_train_steps`.
    Linear,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - step as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub instance_prompt: String,
    pub resolution: u32,
    pub train_batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub learning_rate: f64,
    pub lr_scheduler: LrSchedule,
    pub max_train_steps: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            regime: Regime::DreamboothUnet,
            instance_prompt: "a photo of renal cell carcinoma".into(),
            resolution: 512,
            train_batch_size: 1,
            gradient_accumulation_steps: 1,
            learning_rate: 2e-6,
            lr_scheduler: LrSchedule::Constant,
            max_train_steps: 650,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, downsample: u32) -> Result<()> {
        let bad = |m: String| Err(DiffusionError::Config(m));
        if self.max_train_steps == 0 {
            return bad("max_train_steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.resolution == 0 || self.resolution % downsample != 0 {
            return bad(format!(
                "resolution {} is not a positive multiple of the downsampling factor {downsample}",
                self.resolution
            ));
        }
        if self.train_batch_size == 0 || self.gradient_accumulation_steps == 0 {
            return bad("train_batch_size and gradient_accumulation_steps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextualInversionConfig {
    pub learnable_property: String,
    pub placeholder_token: String,
    pub initializer_token: String,
    pub max_train_steps: usize,
}

impl Default for TextualInversionConfig {
    fn default() -> Self {
        Self {
            learnable_property: "object".into(),
            placeholder_token: "<kidney cancer-image>".into(),
            initializer_token: "image".into(),
            max_train_steps: 3000,
        }
    }
}

const OBJECT_TEMPLATES: &[&str] = &[
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a good photo of a {}",
];

const STYLE_TEMPLATES: &[&str] = &[
    "a painting in the style of {}",
    "a rendering in the style of {}",
    "a cropped painting in the style of {}",
    "the painting in the style of {}",
    "a clean painting in the style of {}",
    "a close-up painting in the style of {}",
];

/// Prompt templates for a learnable property. `style` selects style
/// templates; anything else (object, modality, body part, ...) describes a
/// thing and uses object templates.
pub fn templates(learnable_property: &str) -> &'static [&'static str] {
    if learnable_property.trim().eq_ignore_ascii_case("style") {
        STYLE_TEMPLATES
    } else {
        OBJECT_TEMPLATES
    }
}

/// Prompt and loss inputs for one training sample.
struct Sample {
    image: usize,
    ids: Vec<u32>,
    timestep: usize,
    noise: Latent,
}

/// Mean squared error between the predicted and the true noise for `image`
/// noised at `timestep`.
pub fn denoising_loss<B: DiffusionBackend + ?Sized>(
    backend: &B,
    image: &FloatImage,
    prompt: &str,
    timestep: usize,
    noise: &Latent,
    config: &FinetuneConfig,
) -> Result<f64> {
    check_resolution(image, config.resolution)?;
    backend.scheduler().check_timestep(timestep)?;
    let clean = backend.encode_image(image)?;
    if !clean.same_shape(noise) {
        return Err(DiffusionError::Config(format!(
            "noise shape {:?} does not match latent shape {:?}",
            noise.shape(),
            clean.shape()
        )));
    }
    let noisy = backend.scheduler().add_noise(&clean, noise, timestep);
    let pred = backend.predict_noise(&noisy, timestep, &backend.encode_prompt(prompt));
    Ok(pred.mse(noise))
}

fn check_resolution(image: &FloatImage, expected: u32) -> Result<()> {
    let (w, h) = image.dimensions();
    if w != expected || h != expected {
        return Err(DiffusionError::Resolution { expected, width: w, height: h });
    }
    Ok(())
}

/// Per-step record of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// What the optimizer is allowed to touch.
enum Trainable {
    Tensors(Vec<usize>),
    Row { tensor: usize, row: usize, width: usize },
}

#[allow(clippy::too_many_arguments)]
fn run<B: TrainableBackend>(
    base: &B,
    mut backend: B,
    dataset: &[FloatImage],
    config: &FinetuneConfig,
    steps: usize,
    regime: Regime,
    prompt: &mut dyn FnMut(&mut ChaCha8Rng) -> String,
    trainable: Trainable,
) -> Result<(B, Vec<StepRecord>)> {
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    config.validate(backend.downsample_factor())?;
    for img in dataset {
        check_resolution(img, config.resolution)?;
    }
    let latents = dataset.iter().map(|i| backend.encode_image(i)).collect::<Result<Vec<_>>>()?;
    let (c, h, w) = latents[0].shape();
    let t_max = backend.scheduler().train_timesteps();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();

    let mut adams: Vec<(usize, Adam)> = match &trainable {
        Trainable::Tensors(idx) => idx.iter().map(|&i| (i, Adam::new(backend.tensors()[i].data.len()))).collect(),
        Trainable::Row { tensor, width, .. } => vec![(*tensor, Adam::new(*width))],
    };

    let micro = config.train_batch_size * config.gradient_accumulation_steps;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut samples = Vec::with_capacity(micro);
        for _ in 0..micro {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let image = order[cursor];
            cursor += 1;
            let text = prompt(&mut rng);
            samples.push(Sample {
                image,
                ids: backend.tokenizer().encode(&text),
                timestep: rng.random_range(0..t_max),
                noise: Latent::gaussian(c, h, w, &mut rng),
            });
        }

        let mut grads: Vec<Vec<f64>> = backend.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        let mut loss = 0.0;
        for s in &samples {
            let (l, g) = backend.loss_and_gradients(&latents[s.image], &s.ids, s.timestep, &s.noise);
            loss += l / micro as f64;
            for (acc, gi) in grads.iter_mut().zip(g) {
                if !gi.is_empty() {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v / micro as f64);
                }
            }
        }

        let lr = config.lr_scheduler.at(config.learning_rate, step, steps);
        match &trainable {
            Trainable::Tensors(_) => {
                for (i, adam) in adams.iter_mut() {
                    adam.update(&mut backend.tensors_mut()[*i].data, &grads[*i], lr, 0.0);
                }
            }
            Trainable::Row { tensor, row, width } => {
                let range = row * width..(row + 1) * width;
                let g = &grads[*tensor][range.clone()];
                adams[0].1.update(&mut backend.tensors_mut()[*tensor].data[range], g, lr, 0.0);
            }
        }
        log.push(StepRecord { step, loss, learning_rate: lr });
    }

    let mut cfg = serde_json::to_value(config)?;
    cfg["regime"] = serde_json::Value::String(regime.as_str().into());
    backend.set_lineage(Lineage {
        regime,
        config: cfg,
        base_fingerprint: fingerprint(base),
        steps,
    });
    Ok((backend, log))
}

/// Dreambooth fine-tuning on `config.instance_prompt`, without prior
/// preservation. The denoiser always trains; the text encoder trains only
/// under [`Regime::DreamboothUnetTextEncoder`].
pub fn finetune_dreambooth<B: TrainableBackend>(
    backend: &B,
    dataset: &[FloatImage],
    config: &FinetuneConfig,
) -> Result<(B, Vec<StepRecord>)> {
    if config.regime == Regime::TextualInversion {
        return Err(DiffusionError::Regime(config.regime.as_str().into()));
    }
    let allowed = config.regime.trainable();
    let idx = backend
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| allowed.contains(&t.component))
        .map(|(i, _)| i)
        .collect();
    let prompt = config.instance_prompt.clone();
    run(
        backend,
        backend.clone(),
        dataset,
        config,
        config.max_train_steps,
        config.regime,
        &mut |_| prompt.clone(),
        Trainable::Tensors(idx),
    )
}

/// Adds `placeholder` to the vocabulary with a copy of the initializer's
/// embedding row.
pub fn add_placeholder_token<B: TrainableBackend>(backend: &mut B, placeholder: &str, initializer: &str) -> Result<u32> {
    let tok = backend.tokenizer();
    if placeholder.trim().is_empty() {
        return Err(DiffusionError::Config("placeholder token is empty".into()));
    }
    if tok.contains(placeholder) {
        return Err(DiffusionError::TokenExists(placeholder.into()));
    }
    let ids = tok.encode(initializer);
    if ids.len() != 1 || ids[0] == tok.unk_id() {
        return Err(DiffusionError::Initializer {
            text: initializer.into(),
            ids,
        });
    }
    Ok(backend.push_token(placeholder, ids[0]))
}

/// Learns a single embedding row for the placeholder token. The placeholder
/// is added first when it is not in the vocabulary yet. Runs
/// `ti.max_train_steps` steps; batch size, accumulation, learning rate,
/// schedule and seed come from `config`.
pub fn finetune_textual_inversion<B: TrainableBackend>(
    backend: &B,
    dataset: &[FloatImage],
    ti: &TextualInversionConfig,
    config: &FinetuneConfig,
) -> Result<(B, Vec<StepRecord>)> {
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if ti.max_train_steps == 0 {
        return Err(DiffusionError::Config("max_train_steps must be at least 1".into()));
    }
    let mut work = backend.clone();
    let id = match work.tokenizer().id_of(&ti.placeholder_token) {
        Some(id) if work.tokenizer().added_tokens().any(|t| t == ti.placeholder_token) => id,
        Some(_) => return Err(DiffusionError::TokenExists(ti.placeholder_token.clone())),
        None => add_placeholder_token(&mut work, &ti.placeholder_token, &ti.initializer_token)?,
    };
    let set = templates(&ti.learnable_property);
    let placeholder = ti.placeholder_token.clone();
    let trainable = Trainable::Row {
        tensor: work.embedding_tensor(),
        row: id as usize,
        width: work.embedding_dim(),
    };
    let mut cfg = config.clone();
    cfg.regime = Regime::TextualInversion;
    cfg.max_train_steps = ti.max_train_steps;
    let (mut out, log) = run(
        backend,
        work,
        dataset,
        &cfg,
        ti.max_train_steps,
        Regime::TextualInversion,
        &mut |rng| set[rng.random_range(0..set.len())].replace("{}", &placeholder),
        trainable,
    )?;
    if let Some(lineage) = out.lineage().cloned() {
        let mut lineage = lineage;
        lineage.config["textual_inversion"] = serde_json::to_value(ti)?;
        out.set_lineage(lineage);
    }
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert!(matches!("full".parse::<Regime>(), Err(DiffusionError::Regime(_))));
    }

    #[test]
    fn default_config_matches_reference_hyperparameters() {
        let c = FinetuneConfig::default();
        assert_eq!(c.instance_prompt, "a photo of renal cell carcinoma");
        assert_eq!((c.resolution, c.train_batch_size, c.gradient_accumulation_steps), (512, 1, 1));
        assert_eq!(c.learning_rate, 2e-6);
        assert_eq!(c.lr_scheduler, LrSchedule::Constant);
        assert_eq!(c.max_train_steps, 650);
        c.validate(8).unwrap();
        let ti = TextualInversionConfig::default();
        assert_eq!(ti.placeholder_token, "<kidney cancer-image>");
        assert_eq!(ti.initializer_token, "image");
        assert_eq!(ti.max_train_steps, 3000);
    }

    #[test]
    fn config_validation() {
        let ok = FinetuneConfig::default();
        assert!(FinetuneConfig { max_train_steps: 0, ..ok.clone() }.validate(8).is_err());
        assert!(FinetuneConfig { learning_rate: 0.0, ..ok.clone() }.validate(8).is_err());
        assert!(FinetuneConfig { resolution: 500, ..ok.clone() }.validate(8).is_err());
        assert!(FinetuneConfig { gradient_accumulation_steps: 0, ..ok }.validate(8).is_err());
    }

    #[test]
    fn linear_schedule_decays() {
        assert_eq!(LrSchedule::Constant.at(1.0, 5, 10), 1.0);
        assert_eq!(LrSchedule::Linear.at(1.0, 5, 10), 0.5);
    }

    #[test]
    fn templates_contain_placeholder_slot() {
        for p in ["object", "style", "modality", "body part"] {
            assert!(templates(p).iter().all(|t| t.contains("{}")));
        }
        assert_ne!(templates("style"), templates("object"));
    }
}
