//! Patch classifier: configuration, learning-rate schedule, training loop,
//! checkpoints and single-patch inference.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::imaging::FloatImage;
use crate::nn;
use crate::resnet::{argmax, ResidualNet, ResidualNetSpec};

pub const CHECKPOINT_FORMAT: u32 = 1;
const PARAMS_MAGIC: &[u8; 8] = b"SLNETF64";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Network {
    Resnet18,
    Compact { width: usize },
}

impl Network {
    pub fn spec(&self, input_size: u32) -> ResidualNetSpec {
        match *self {
            Network::Resnet18 => ResidualNetSpec::resnet18(input_size as usize),
            Network::Compact { width } => ResidualNetSpec::compact(input_size as usize, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub epochs: usize,
    pub base_learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub input_size: u32,
    pub network: Network,
    /// Single-threaded execution.
    pub deterministic: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            epochs: 40,
            base_learning_rate: 0.001,
            lr_decay_per_epoch: 0.9,
            weight_decay: 0.0001,
            batch_size: 32,
            seed: 0,
            input_size: 224,
            network: Network::Resnet18,
            deterministic: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return fail(format!("lr_decay_per_epoch must lie in (0, 1], got {}", self.lr_decay_per_epoch));
        }
        if !(self.base_learning_rate > 0.0) {
            return fail(format!("base_learning_rate must be positive, got {}", self.base_learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.input_size == 0 {
            return fail("batch_size and input_size must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }
}

/// `base * decay^epoch`, epochs counted from zero.
pub fn lr_at_epoch(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

/// Per-channel statistics used to standardize inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a FloatImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mut out = Self::identity();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        out
    }

    /// Standardized CHW tensor.
    pub fn apply(&self, img: &FloatImage) -> Vec<f64> {
        let (w, h) = img.dimensions();
        let plane = (w * h) as usize;
        let mut out = vec![0.0; 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (p.0[c] as f64 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        for rec in &self.epochs {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n").map_err(io_err(path))?;
        }
        f.flush().map_err(io_err(path))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        let mut epochs = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(io_err(path))?;
            if !line.trim().is_empty() {
                epochs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { epochs })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    epoch: usize,
    labels: Vec<String>,
    config: ClassifierConfig,
    network: ResidualNetSpec,
    normalization: ChannelStats,
    parameter_count: usize,
}

/// Trained weights plus everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub labels: Vec<String>,
    pub config: ClassifierConfig,
    pub network: ResidualNetSpec,
    pub normalization: ChannelStats,
    pub params: Vec<f64>,
}

impl Checkpoint {
    /// Writes `meta.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT,
            epoch: self.epoch,
            labels: self.labels.clone(),
            config: self.config.clone(),
            network: self.network.clone(),
            normalization: self.normalization,
            parameter_count: self.params.len(),
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&meta_path))?;

        let mut blob = Vec::with_capacity(16 + 8 * self.params.len());
        blob.extend_from_slice(PARAMS_MAGIC);
        blob.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            blob.extend_from_slice(&p.to_le_bytes());
        }
        let blob_path = dir.join("params.bin");
        std::fs::write(&blob_path, blob).map_err(io_err(&blob_path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let blob_path = dir.join("params.bin");
        let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
        if blob.len() < 16 || &blob[..8] != PARAMS_MAGIC {
            return Err(Error::Checkpoint("params.bin has a bad header".into()));
        }
        let count = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
        if count != meta.parameter_count || blob.len() != 16 + 8 * count {
            return Err(Error::Checkpoint("params.bin length disagrees with metadata".into()));
        }
        let params = blob[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ck = Self {
            epoch: meta.epoch,
            labels: meta.labels,
            config: meta.config,
            network: meta.network,
            normalization: meta.normalization,
            params,
        };
        if ck.labels.len() != ck.config.num_classes {
            return Err(Error::Checkpoint("label ordering length differs from num_classes".into()));
        }
        Ok(ck)
    }

    pub fn model(&self) -> Result<Classifier> {
        let net = ResidualNet::from_params(&self.network, self.labels.len(), self.params.clone())?;
        Ok(Classifier {
            net,
            normalization: self.normalization,
            input_size: self.config.input_size,
        })
    }
}

/// Softmax output for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probabilities = nn::softmax(logits);
        let predicted_class = argmax(&probabilities);
        Self {
            confidence: probabilities[predicted_class],
            predicted_class,
            probabilities,
        }
    }
}

/// A checkpoint materialized for inference.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: ResidualNet,
    normalization: ChannelStats,
    input_size: u32,
}

impl Classifier {
    pub fn input_size(&self) -> u32 {
        self.input_size
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn predict_patch(&self, patch: &FloatImage) -> Result<Prediction> {
        check_size(patch, self.input_size)?;
        Ok(Prediction::from_logits(&self.net.forward(&self.normalization.apply(patch))))
    }
}

pub fn predict_patch(model: &Classifier, patch: &FloatImage) -> Result<Prediction> {
    model.predict_patch(patch)
}

fn check_size(patch: &FloatImage, expected: u32) -> Result<()> {
    let (w, h) = patch.dimensions();
    if w != expected || h != expected {
        return Err(Error::PatchSize {
            expected,
            actual: w,
            actual_h: h,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub image: FloatImage,
    pub label: usize,
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i] + weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Mini-batch Adam on softmax cross-entropy with per-epoch exponential lr
/// decay. Returns the checkpoint with the best validation accuracy (earliest
/// epoch on ties) and the full per-epoch log.
pub fn train(
    train_set: &[LabeledPatch],
    validation_set: &[LabeledPatch],
    labels: &[String],
    config: &ClassifierConfig,
) -> Result<(Checkpoint, TrainingLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if validation_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if labels.len() != config.num_classes {
        return Err(Error::Config(format!(
            "{} labels given for {} classes",
            labels.len(),
            config.num_classes
        )));
    }
    for p in train_set.iter().chain(validation_set) {
        check_size(&p.image, config.input_size)?;
        if p.label >= config.num_classes {
            return Err(Error::LabelOutOfRange {
                index: p.label,
                classes: config.num_classes,
            });
        }
    }

    let spec = config.network.spec(config.input_size);
    let mut net = ResidualNet::new(&spec, config.num_classes, config.seed)?;
    let normalization = ChannelStats::from_images(train_set.iter().map(|p| &p.image));
    let parallel = !config.deterministic;
    let to_tensors = |set: &[LabeledPatch]| -> Vec<(Vec<f64>, usize)> {
        set.iter().map(|p| (normalization.apply(&p.image), p.label)).collect()
    };
    let train_x = to_tensors(train_set);
    let val_x = to_tensors(validation_set);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut adam = Adam::new(net.params().len());
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(config.base_learning_rate, config.lr_decay_per_epoch, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (train_x[i].0.as_slice(), train_x[i].1)).collect();
            let mut g = net.batch_gradient(&batch, parallel);
            let scale = 1.0 / batch.len() as f64;
            g.grad.iter_mut().for_each(|v| *v *= scale);
            adam.update(net.params_mut(), &g.grad, lr, config.weight_decay);
            loss_sum += g.loss_sum;
            correct += g.correct;
        }
        let val_hits = count_correct(&net, &val_x, parallel);
        let validation_accuracy = val_hits as f64 / val_x.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train_x.len() as f64,
            train_accuracy: correct as f64 / train_x.len() as f64,
            validation_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(acc, _, _)| validation_accuracy > *acc) {
            best = Some((validation_accuracy, epoch, net.params().to_vec()));
        }
    }

    let (_, epoch, params) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        epoch,
        labels: labels.to_vec(),
        config: config.clone(),
        network: spec,
        normalization,
        params,
    };
    Ok((checkpoint, log))
}

fn count_correct(net: &ResidualNet, set: &[(Vec<f64>, usize)], parallel: bool) -> usize {
    let hit = |(x, y): &(Vec<f64>, usize)| (argmax(&net.forward(x)) == *y) as usize;
    if parallel {
        set.par_iter().map(hit).sum()
    } else {
        set.iter().map(hit).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::filled;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at_epoch(0.001, 0.9, 0), 0.001);
        let expect = 0.001 * 0.9 * 0.9;
        assert!((lr_at_epoch(0.001, 0.9, 2) - 0.00081).abs() / 0.00081 < 1e-12);
        assert!((lr_at_epoch(0.001, 0.9, 2) - expect).abs() < 1e-18);
        assert_eq!(lr_at_epoch(0.001, 1.0, 39), 0.001);
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::default().validate().is_ok());
        let bad = [
            ClassifierConfig { epochs: 0, ..Default::default() },
            ClassifierConfig { lr_decay_per_epoch: 0.0, ..Default::default() },
            ClassifierConfig { lr_decay_per_epoch: 1.5, ..Default::default() },
            ClassifierConfig { base_learning_rate: 0.0, ..Default::default() },
            ClassifierConfig { weight_decay: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn channel_stats_standardize() {
        let imgs = [filled(2, 2, [0.2, 0.4, 0.6]), filled(2, 2, [0.4, 0.4, 0.8])];
        let s = ChannelStats::from_images(imgs.iter());
        assert!((s.mean[0] - 0.3).abs() < 1e-6);
        assert!((s.std[0] - 0.1).abs() < 1e-6);
        assert_eq!(s.std[1], 1.0);
    }

    #[test]
    fn training_rejects_wrong_patch_size() {
        let cfg = ClassifierConfig {
            num_classes: 2,
            epochs: 1,
            input_size: 8,
            network: Network::Compact { width: 2 },
            ..Default::default()
        };
        let labels = vec!["a".to_string(), "b".to_string()];
        let ok = LabeledPatch { image: filled(8, 8, [0.5; 3]), label: 0 };
        let bad = LabeledPatch { image: filled(9, 8, [0.5; 3]), label: 1 };
        assert!(matches!(
            train(&[ok.clone(), bad], &[ok.clone()], &labels, &cfg),
            Err(Error::PatchSize { .. })
        ));
        assert!(matches!(train(&[], &[ok], &labels, &cfg), Err(Error::Empty(_))));
    }
}
