//! Backend interface plus a small, CPU-friendly latent diffusion model.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slidelab_core::imaging::{self, FloatImage};

use crate::error::{io_err, DiffusionError, Result};
use crate::finetune::Regime;
use crate::latent::Latent;
use crate::scheduler::{NoiseScheduler, SchedulerConfig};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TextEncoder,
    Denoiser,
    Autoencoder,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::TextEncoder, Component::Denoiser, Component::Autoencoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::TextEncoder => "text_encoder",
            Component::Denoiser => "denoiser",
            Component::Autoencoder => "autoencoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub component: Component,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn new(component: Component, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            component,
            name: format!("{}.{name}", component.as_str()),
            shape,
            data,
        }
    }
}

/// Where a fine-tuned backend came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub regime: Regime,
    pub config: serde_json::Value,
    pub base_fingerprint: String,
    pub steps: usize,
}

pub trait DiffusionBackend: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;
    fn scheduler(&self) -> &NoiseScheduler;
    fn downsample_factor(&self) -> u32;
    fn latent_channels(&self) -> usize;
    /// Conditioning vector for a token sequence (without the leading `<bos>`).
    fn encode_text(&self, ids: &[u32]) -> Vec<f64>;
    fn encode_image(&self, image: &FloatImage) -> Result<Latent>;
    fn decode_latent(&self, latent: &Latent) -> FloatImage;
    fn predict_noise(&self, latent: &Latent, timestep: usize, conditioning: &[f64]) -> Latent;

    fn encode_prompt(&self, prompt: &str) -> Vec<f64> {
        self.encode_text(&self.tokenizer().encode(prompt))
    }
}

pub trait TrainableBackend: DiffusionBackend + Clone {
    fn tensors(&self) -> &[ParamTensor];
    fn tensors_mut(&mut self) -> &mut [ParamTensor];
    /// Index into `tensors()` of the token embedding table (one row per token).
    fn embedding_tensor(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    /// Appends a vocabulary entry whose embedding row copies row `copy_from`.
    fn push_token(&mut self, token: &str, copy_from: u32) -> u32;
    /// Denoising MSE and its gradient for every tensor (empty for the
    /// autoencoder, which never trains).
    fn loss_and_gradients(&self, clean: &Latent, ids: &[u32], timestep: usize, noise: &Latent) -> (f64, Vec<Vec<f64>>);
    fn set_lineage(&mut self, lineage: Lineage);
    fn lineage(&self) -> Option<&Lineage>;
}

/// SHA-256 over the vocabulary and every parameter tensor.
pub fn fingerprint<B: TrainableBackend>(backend: &B) -> String {
    let mut h = Sha256::new();
    let tok = backend.tokenizer();
    for id in 0..tok.len() {
        h.update(tok.token(id as u32).unwrap_or_default().as_bytes());
        h.update([0u8]);
    }
    for t in backend.tensors() {
        h.update(t.name.as_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackendConfig {
    pub latent_channels: usize,
    pub downsample: u32,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            downsample: 8,
            embed_dim: 8,
            cond_dim: 8,
            hidden: 16,
            time_dim: 8,
            scheduler: SchedulerConfig::toy(),
            seed: 0,
        }
    }
}

impl ToyBackendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DiffusionError::Config(m.to_string()));
        if self.latent_channels < 3 {
            return bad("latent_channels must be at least 3");
        }
        if self.downsample == 0 {
            return bad("downsample must be positive");
        }
        if self.embed_dim == 0 || self.cond_dim == 0 || self.hidden == 0 {
            return bad("embed_dim, cond_dim and hidden must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be a positive even number");
        }
        Ok(())
    }
}

const EMB: usize = 0;
const T_PROJ: usize = 1;
const T_BIAS: usize = 2;
const W_IN: usize = 3;
const W_COND: usize = 4;
const W_TIME: usize = 5;
const B_IN: usize = 6;
const W_OUT: usize = 7;
const B_OUT: usize = 8;
const SKIP: usize = 9;
const AE_ENC: usize = 10;
const AE_ENC_B: usize = 11;
const AE_DEC: usize = 12;
const AE_DEC_B: usize = 13;
const TENSOR_COUNT: usize = 14;

/// Mean-of-embeddings text encoder, a per-pixel MLP denoiser that also sees a
/// 3x3 neighbourhood mean, and a linear pooling autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackend {
    config: ToyBackendConfig,
    tokenizer: Tokenizer,
    scheduler: NoiseScheduler,
    tensors: Vec<ParamTensor>,
    lineage: Option<Lineage>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl ToyBackend {
    pub fn new(config: ToyBackendConfig) -> Result<Self> {
        Self::with_tokenizer(config, Tokenizer::default())
    }

    pub fn with_tokenizer(config: ToyBackendConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let scheduler = NoiseScheduler::new(config.scheduler.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, e, d, h, te) = (
            config.latent_channels,
            config.embed_dim,
            config.cond_dim,
            config.hidden,
            config.time_dim,
        );
        let v = tokenizer.len();
        use Component::*;

        let mut enc = vec![0.0; c * 3];
        let mut dec = vec![0.0; 3 * c];
        for ch in 0..3 {
            enc[ch * 3 + ch] = 2.0;
            dec[ch * c + ch] = 0.5;
        }
        for ch in 3..c {
            for k in 0..3 {
                enc[ch * 3 + k] = 2.0 / 3.0;
            }
        }

        let tensors = vec![
            ParamTensor::new(TextEncoder, "token_embedding", vec![v, e], gaussian(&mut rng, v * e, 1.0)),
            ParamTensor::new(TextEncoder, "projection", vec![d, e], gaussian(&mut rng, d * e, (1.0 / e as f64).sqrt())),
            ParamTensor::new(TextEncoder, "projection_bias", vec![d], vec![0.0; d]),
            ParamTensor::new(Denoiser, "input_weight", vec![h, 2 * c], gaussian(&mut rng, h * 2 * c, (1.0 / (2 * c) as f64).sqrt())),
            ParamTensor::new(Denoiser, "cond_weight", vec![h, d], gaussian(&mut rng, h * d, (1.0 / d as f64).sqrt())),
            ParamTensor::new(Denoiser, "time_weight", vec![h, te], gaussian(&mut rng, h * te, (1.0 / te as f64).sqrt())),
            ParamTensor::new(Denoiser, "hidden_bias", vec![h], vec![0.0; h]),
            ParamTensor::new(Denoiser, "output_weight", vec![c, h], gaussian(&mut rng, c * h, (1.0 / h as f64).sqrt())),
            ParamTensor::new(Denoiser, "output_bias", vec![c], vec![0.0; c]),
            ParamTensor::new(Denoiser, "skip_weight", vec![c, c], vec![0.0; c * c]),
            ParamTensor::new(Autoencoder, "encoder_weight", vec![c, 3], enc),
            ParamTensor::new(Autoencoder, "encoder_bias", vec![c], vec![-1.0; c]),
            ParamTensor::new(Autoencoder, "decoder_weight", vec![3, c], dec),
            ParamTensor::new(Autoencoder, "decoder_bias", vec![3], vec![0.5; 3]),
        ];
        Ok(Self {
            config,
            tokenizer,
            scheduler,
            tensors,
            lineage: None,
        })
    }

    pub fn config(&self) -> &ToyBackendConfig {
        &self.config
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_dim / 2;
        let mut out = vec![0.0; self.config.time_dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[i] = (t as f64 * freq).sin();
            out[half + i] = (t as f64 * freq).cos();
        }
        out
    }

    fn mean_embedding(&self, ids: &[u32]) -> Vec<f64> {
        let e = self.config.embed_dim;
        let table = &self.tensors[EMB].data;
        let mut mean = vec![0.0; e];
        let all = std::iter::once(self.tokenizer.bos_id()).chain(ids.iter().copied());
        let mut n = 0usize;
        for id in all {
            let id = if (id as usize) < self.tokenizer.len() { id } else { self.tokenizer.unk_id() };
            let row = &table[id as usize * e..(id as usize + 1) * e];
            mean.iter_mut().zip(row).for_each(|(m, r)| *m += r);
            n += 1;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean
    }

    /// Per-pixel features `[z, 3x3 mean of z]`, pixel-major.
    fn features(&self, z: &Latent) -> Vec<f64> {
        let (c, h, w) = z.shape();
        let mut f = vec![0.0; h * w * 2 * c];
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 2 * c;
                let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
                let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                for ch in 0..c {
                    f[base + ch] = z.at(ch, y, x);
                    let mut s = 0.0;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            s += z.at(ch, yy, xx);
                        }
                    }
                    f[base + c + ch] = s / count;
                }
            }
        }
        f
    }

    /// Returns the prediction, the pixel-major hidden activations and the features.
    fn denoise(&self, z: &Latent, t: usize, cond: &[f64]) -> (Latent, Vec<f64>, Vec<f64>) {
        let (c, hh) = (self.config.latent_channels, self.config.hidden);
        let (d, te) = (self.config.cond_dim, self.config.time_dim);
        let temb = self.time_embedding(t);
        let p = &self.tensors;
        let mut shared = p[B_IN].data.clone();
        for j in 0..hh {
            for k in 0..d {
                shared[j] += p[W_COND].data[j * d + k] * cond[k];
            }
            for k in 0..te {
                shared[j] += p[W_TIME].data[j * te + k] * temb[k];
            }
        }
        let feats = self.features(z);
        let plane = z.plane();
        let mut hidden = vec![0.0; plane * hh];
        let mut out = Latent::zeros(c, z.height, z.width);
        for px in 0..plane {
            let x = &feats[px * 2 * c..(px + 1) * 2 * c];
            let hrow = &mut hidden[px * hh..(px + 1) * hh];
            for j in 0..hh {
                let w = &p[W_IN].data[j * 2 * c..(j + 1) * 2 * c];
                let pre = shared[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                hrow[j] = pre.tanh();
            }
            for ch in 0..c {
                let mut v = p[B_OUT].data[ch];
                for j in 0..hh {
                    v += p[W_OUT].data[ch * hh + j] * hrow[j];
                }
                for k in 0..c {
                    v += p[SKIP].data[ch * c + k] * x[k];
                }
                out.data[ch * plane + px] = v;
            }
        }
        (out, hidden, feats)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for comp in Component::ALL {
            let values: Vec<f64> = self
                .tensors
                .iter()
                .filter(|t| t.component == comp)
                .flat_map(|t| t.data.iter().copied())
                .collect();
            let path = dir.join(format!("{}.bin", comp.as_str()));
            let mut bytes = Vec::with_capacity(16 + values.len() * 8);
            bytes.extend_from_slice(BLOB_MAGIC);
            bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            backend: "toy".into(),
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            fingerprint: fingerprint(self),
            lineage: self.lineage.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    component: t.component,
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let path = dir.join("metadata.json");
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        serde_json::to_writer_pretty(&mut f, &meta)?;
        f.write_all(b"\n").map_err(io_err(&path))?;
        Ok(())
    }

    /// Loads a backend directory written by [`ToyBackend::save`] or produced
    /// by an external converter using the same layout. Tensor sizes come from
    /// the metadata, so larger configurations load through the same path.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("metadata.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: Metadata = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(DiffusionError::Format(format!("unsupported format_version {}", meta.format_version)));
        }
        if meta.tensors.len() != TENSOR_COUNT {
            return Err(DiffusionError::Format(format!("expected {TENSOR_COUNT} tensors, found {}", meta.tensors.len())));
        }
        let mut tokenizer = meta.tokenizer;
        tokenizer.reindex();
        let mut fresh = Self::with_tokenizer(meta.config, tokenizer)?;
        for comp in Component::ALL {
            let path = dir.join(format!("{}.bin", comp.as_str()));
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.len() < 16 || &bytes[..8] != BLOB_MAGIC {
                return Err(DiffusionError::Format(format!("{} is not a parameter blob", path.display())));
            }
            let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            if bytes.len() != 16 + count * 8 {
                return Err(DiffusionError::Format(format!("{} is truncated", path.display())));
            }
            let mut values = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            for (t, entry) in fresh.tensors.iter_mut().zip(&meta.tensors) {
                if t.component != comp {
                    continue;
                }
                if entry.name != t.name || entry.shape != t.shape {
                    return Err(DiffusionError::Format(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        entry.name, entry.shape, t.name, t.shape
                    )));
                }
                for v in t.data.iter_mut() {
                    *v = values
                        .next()
                        .ok_or_else(|| DiffusionError::Format(format!("{} has too few values", path.display())))?;
                }
            }
            if values.next().is_some() {
                return Err(DiffusionError::Format(format!("{} has extra values", path.display())));
            }
        }
        fresh.lineage = meta.lineage;
        if fingerprint(&fresh) != meta.fingerprint {
            return Err(DiffusionError::Format("fingerprint mismatch".into()));
        }
        Ok(fresh)
    }
}

const BLOB_MAGIC: &[u8; 8] = b"SLDIFF64";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    component: Component,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    backend: String,
    config: ToyBackendConfig,
    tokenizer: Tokenizer,
    fingerprint: String,
    lineage: Option<Lineage>,
    tensors: Vec<TensorEntry>,
}

/// Reads just the metadata of a saved backend.
pub fn read_lineage(dir: &Path) -> Result<(String, Option<Lineage>)> {
    let path = dir.join("metadata.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: Metadata = serde_json::from_str(&text)?;
    Ok((meta.fingerprint, meta.lineage))
}

impl DiffusionBackend for ToyBackend {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn scheduler(&self) -> &NoiseScheduler {
        &self.scheduler
    }

    fn downsample_factor(&self) -> u32 {
        self.config.downsample
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn encode_text(&self, ids: &[u32]) -> Vec<f64> {
        let (e, d) = (self.config.embed_dim, self.config.cond_dim);
        let mean = self.mean_embedding(ids);
        let proj = &self.tensors[T_PROJ].data;
        (0..d)
            .map(|j| {
                let q = self.tensors[T_BIAS].data[j] + (0..e).map(|k| proj[j * e + k] * mean[k]).sum::<f64>();
                q.tanh()
            })
            .collect()
    }

    fn encode_image(&self, image: &FloatImage) -> Result<Latent> {
        let f = self.config.downsample;
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(DiffusionError::Config(format!(
                "image {w}x{h} is not a positive multiple of the downsampling factor {f}"
            )));
        }
        let (lw, lh, c) = ((w / f) as usize, (h / f) as usize, self.config.latent_channels);
        let mut z = Latent::zeros(c, lh, lw);
        let area = (f * f) as f64;
        let (a, ab) = (&self.tensors[AE_ENC].data, &self.tensors[AE_ENC_B].data);
        for ly in 0..lh {
            for lx in 0..lw {
                let mut rgb = [0.0f64; 3];
                for y in 0..f {
                    for x in 0..f {
                        let px = image.get_pixel(lx as u32 * f + x, ly as u32 * f + y);
                        for k in 0..3 {
                            rgb[k] += px[k] as f64;
                        }
                    }
                }
                for ch in 0..c {
                    let v = ab[ch] + (0..3).map(|k| a[ch * 3 + k] * rgb[k] / area).sum::<f64>();
                    z.data[(ch * lh + ly) * lw + lx] = v;
                }
            }
        }
        Ok(z)
    }

    fn decode_latent(&self, latent: &Latent) -> FloatImage {
        let (c, lh, lw) = latent.shape();
        let (dw, db) = (&self.tensors[AE_DEC].data, &self.tensors[AE_DEC_B].data);
        let small = FloatImage::from_fn(lw as u32, lh as u32, |x, y| {
            let mut rgb = [0f32; 3];
            for (k, out) in rgb.iter_mut().enumerate() {
                let v = db[k] + (0..c).map(|ch| dw[k * c + ch] * latent.at(ch, y as usize, x as usize)).sum::<f64>();
                *out = v.clamp(0.0, 1.0) as f32;
            }
            image::Rgb(rgb)
        });
        let f = self.config.downsample;
        imaging::resize_bilinear(&small, lw as u32 * f, lh as u32 * f)
    }

    fn predict_noise(&self, latent: &Latent, timestep: usize, conditioning: &[f64]) -> Latent {
        self.denoise(latent, timestep, conditioning).0
    }
}

impl TrainableBackend for ToyBackend {
    fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    fn embedding_tensor(&self) -> usize {
        EMB
    }

    fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn push_token(&mut self, token: &str, copy_from: u32) -> u32 {
        let e = self.config.embed_dim;
        let id = self.tokenizer.push(token);
        let emb = &mut self.tensors[EMB];
        let row: Vec<f64> = emb.data[copy_from as usize * e..(copy_from as usize + 1) * e].to_vec();
        emb.data.extend_from_slice(&row);
        emb.shape[0] += 1;
        id
    }

    fn loss_and_gradients(&self, clean: &Latent, ids: &[u32], timestep: usize, noise: &Latent) -> (f64, Vec<Vec<f64>>) {
        let (c, hh) = (self.config.latent_channels, self.config.hidden);
        let (e, d, te) = (self.config.embed_dim, self.config.cond_dim, self.config.time_dim);
        let p = &self.tensors;

        let mean = self.mean_embedding(ids);
        let cond = self.encode_text(ids);
        let noisy = self.scheduler.add_noise(clean, noise, timestep);
        let (pred, hidden, feats) = self.denoise(&noisy, timestep, &cond);
        let n = pred.data.len() as f64;
        let loss = pred.data.iter().zip(&noise.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;

        let mut g: Vec<Vec<f64>> = p
            .iter()
            .map(|t| if t.component == Component::Autoencoder { Vec::new() } else { vec![0.0; t.data.len()] })
            .collect();
        let plane = pred.plane();
        let mut pre_sum = vec![0.0; hh];
        let mut g_out = vec![0.0; c];
        let mut g_pre = vec![0.0; hh];
        for px in 0..plane {
            let x = &feats[px * 2 * c..(px + 1) * 2 * c];
            let h = &hidden[px * hh..(px + 1) * hh];
            for ch in 0..c {
                let idx = ch * plane + px;
                g_out[ch] = 2.0 * (pred.data[idx] - noise.data[idx]) / n;
                g[B_OUT][ch] += g_out[ch];
                for j in 0..hh {
                    g[W_OUT][ch * hh + j] += g_out[ch] * h[j];
                }
                for k in 0..c {
                    g[SKIP][ch * c + k] += g_out[ch] * x[k];
                }
            }
            for j in 0..hh {
                let back: f64 = (0..c).map(|ch| p[W_OUT].data[ch * hh + j] * g_out[ch]).sum();
                g_pre[j] = back * (1.0 - h[j] * h[j]);
                pre_sum[j] += g_pre[j];
                for k in 0..2 * c {
                    g[W_IN][j * 2 * c + k] += g_pre[j] * x[k];
                }
            }
        }

        let temb = self.time_embedding(timestep);
        let mut g_cond = vec![0.0; d];
        for j in 0..hh {
            g[B_IN][j] = pre_sum[j];
            for k in 0..d {
                g[W_COND][j * d + k] = pre_sum[j] * cond[k];
                g_cond[k] += p[W_COND].data[j * d + k] * pre_sum[j];
            }
            for k in 0..te {
                g[W_TIME][j * te + k] = pre_sum[j] * temb[k];
            }
        }

        let mut g_mean = vec![0.0; e];
        for j in 0..d {
            let gq = g_cond[j] * (1.0 - cond[j] * cond[j]);
            g[T_BIAS][j] = gq;
            for k in 0..e {
                g[T_PROJ][j * e + k] = gq * mean[k];
                g_mean[k] += p[T_PROJ].data[j * e + k] * gq;
            }
        }
        let count = (ids.len() + 1) as f64;
        for id in std::iter::once(self.tokenizer.bos_id()).chain(ids.iter().copied()) {
            let id = if (id as usize) < self.tokenizer.len() { id } else { self.tokenizer.unk_id() } as usize;
            for k in 0..e {
                g[EMB][id * e + k] += g_mean[k] / count;
            }
        }
        (loss, g)
    }

    fn set_lineage(&mut self, lineage: Lineage) {
        self.lineage = Some(lineage);
    }

    fn lineage(&self) -> Option<&Lineage> {
        self.lineage.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ToyBackend {
        ToyBackend::new(ToyBackendConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_preserves_shape() {
        let b = toy();
        let img = imaging::filled(64, 48, [0.8, 0.3, 0.6]);
        let z = b.encode_image(&img).unwrap();
        assert_eq!(z.shape(), (4, 6, 8));
        let out = b.decode_latent(&z);
        assert_eq!(out.dimensions(), (64, 48));
        for p in out.pixels() {
            assert!((p[0] - 0.8).abs() < 1e-5 && (p[1] - 0.3).abs() < 1e-5 && (p[2] - 0.6).abs() < 1e-5);
        }
        let eps = b.predict_noise(&z, 10, &b.encode_prompt("a photo"));
        assert_eq!(eps.shape(), z.shape());
    }

    #[test]
    fn rejects_non_multiple_images() {
        let b = toy();
        assert!(b.encode_image(&imaging::filled(60, 64, [0.5; 3])).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(fingerprint(&toy()), fingerprint(&toy()));
        let other = ToyBackend::new(ToyBackendConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(fingerprint(&toy()), fingerprint(&other));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = toy();
        let img = b.tokenizer().id_of("image").unwrap();
        b.push_token("<kidney cancer-image>", img);
        b.save(dir.path()).unwrap();
        for comp in Component::ALL {
            assert!(dir.path().join(format!("{}.bin", comp.as_str())).is_file());
        }
        let back = ToyBackend::load(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.tokenizer().encode("<kidney cancer-image>").len(), 1);
    }

    #[test]
    fn load_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        toy().save(dir.path()).unwrap();
        let path = dir.path().join("denoiser.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(ToyBackend::load(dir.path()), Err(DiffusionError::Format(_))));
    }
}
