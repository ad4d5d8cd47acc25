//! Seeded text-to-image sampling with classifier-free guidance.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slidelab_core::imaging::{self, FloatImage};

use crate::backend::DiffusionBackend;
use crate::error::{DiffusionError, Result};
use crate::latent::Latent;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationJob {
    pub job_id: String,
    pub prompt: String,
    pub steps: usize,
    pub seed: u64,
    pub count: usize,
    pub guidance_scale: f64,
    pub output_resolution: u32,
}

impl Default for GenerationJob {
    fn default() -> Self {
        Self {
            job_id: "job".into(),
            prompt: "a photo of renal cell carcinoma".into(),
            steps: 50,
            seed: 0,
            count: 1,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            output_resolution: 512,
        }
    }
}

impl GenerationJob {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DiffusionError::Config("steps must be at least 1".into()));
        }
        if self.count == 0 {
            return Err(DiffusionError::Config("count must be at least 1".into()));
        }
        if self.output_resolution == 0 {
            return Err(DiffusionError::Config("output_resolution must be positive".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(DiffusionError::Config("guidance_scale must be finite".into()));
        }
        if self.job_id.is_empty() || self.job_id.contains(['/', '\\']) {
            return Err(DiffusionError::Config(format!("job_id `{}` is not a valid file prefix", self.job_id)));
        }
        Ok(())
    }

    pub fn file_name(&self, index: usize) -> String {
        format!("{}_{index}.png", self.job_id)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub index: usize,
    pub image: FloatImage,
    pub seconds: f64,
}

/// Generates `job.count` images. Image `i` starts from a Gaussian latent on
/// stream `i` of a generator seeded with `job.seed`, so the output does not
/// depend on how images are scheduled across threads.
pub fn generate<B: DiffusionBackend + ?Sized>(backend: &B, job: &GenerationJob, parallel: bool) -> Result<Vec<GeneratedImage>> {
    job.validate()?;
    let timesteps = backend.scheduler().timesteps(job.steps)?;
    let f = backend.downsample_factor();
    let edge = (job.output_resolution / f).max(1) as usize;
    let cond = backend.encode_prompt(&job.prompt);
    let uncond = backend.encode_prompt("");
    let guided = job.guidance_scale != 1.0;

    let one = |index: usize| -> Result<GeneratedImage> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        rng.set_stream(index as u64);
        let mut latent = Latent::gaussian(backend.latent_channels(), edge, edge, &mut rng);
        let shape = latent.shape();
        for (k, &t) in timesteps.iter().enumerate() {
            let eps_c = backend.predict_noise(&latent, t, &cond);
            let eps = if guided {
                let eps_u = backend.predict_noise(&latent, t, &uncond);
                Latent {
                    data: eps_u
                        .data
                        .iter()
                        .zip(&eps_c.data)
                        .map(|(u, c)| u + job.guidance_scale * (c - u))
                        .collect(),
                    ..eps_c
                }
            } else {
                eps_c
            };
            latent = backend.scheduler().step(&eps, t, timesteps.get(k + 1).copied(), &latent);
            debug_assert_eq!(latent.shape(), shape);
        }
        if latent.data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::Config(format!("image {index} diverged to non-finite latent values")));
        }
        let mut image = backend.decode_latent(&latent);
        if image.dimensions() != (job.output_resolution, job.output_resolution) {
            image = imaging::resize_bilinear(&image, job.output_resolution, job.output_resolution);
        }
        Ok(GeneratedImage {
            index,
            image,
            seconds: start.elapsed().as_secs_f64(),
        })
    };

    if parallel {
        (0..job.count).into_par_iter().map(one).collect()
    } else {
        (0..job.count).map(one).collect()
    }
}

/// Writes each image as `{job_id}_{index}.png` under `dir`.
pub fn write_images(job: &GenerationJob, images: &[GeneratedImage], dir: &Path) -> Result<Vec<PathBuf>> {
    images
        .iter()
        .map(|g| {
            let path = dir.join(job.file_name(g.index));
            imaging::save_png(&g.image, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyBackendConfig};

    fn job() -> GenerationJob {
        GenerationJob {
            steps: 10,
            count: 2,
            output_resolution: 32,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_and_count() {
        let b = ToyBackend::new(ToyBackendConfig::default()).unwrap();
        let out = generate(&b, &job(), false).unwrap();
        assert_eq!(out.len(), 2);
        for (i, g) in out.iter().enumerate() {
            assert_eq!(g.index, i);
            assert_eq!(g.image.dimensions(), (32, 32));
            assert!(g.seconds >= 0.0);
        }
    }

    #[test]
    fn parallel_matches_serial_and_images_differ() {
        let b = ToyBackend::new(ToyBackendConfig::default()).unwrap();
        let a = generate(&b, &job(), false).unwrap();
        let p = generate(&b, &job(), true).unwrap();
        for (x, y) in a.iter().zip(&p) {
            assert_eq!(x.image, y.image);
        }
        assert_ne!(a[0].image, a[1].image);
    }

    #[test]
    fn rejects_bad_jobs() {
        let b = ToyBackend::new(ToyBackendConfig::default()).unwrap();
        assert!(generate(&b, &GenerationJob { steps: 0, ..job() }, false).is_err());
        assert!(generate(&b, &GenerationJob { count: 0, ..job() }, false).is_err());
        assert!(generate(&b, &GenerationJob { steps: 1000, ..job() }, false).is_err());
    }

    #[test]
    fn names_follow_job_and_index() {
        let j = GenerationJob { job_id: "v1".into(), ..job() };
        assert_eq!(j.file_name(3), "v1_3.png");
    }
}
