//! Noise schedule with DDPM forward noising and deterministic DDIM steps.

use serde::{Deserialize, Serialize};

use crate::error::{DiffusionError, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl SchedulerConfig {
    /// The schedule used by full-size Stable Diffusion checkpoints.
    pub fn full_scale() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }

    /// 100 steps with betas stretched so the final step is still almost pure noise.
    pub fn toy() -> Self {
        Self {
            train_timesteps: 100,
            beta_start: 0.0085,
            beta_end: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseScheduler {
    config: SchedulerConfig,
    alphas_cumprod: Vec<f64>,
}

impl NoiseScheduler {
    /// Betas spaced linearly in square-root space.
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        let t = config.train_timesteps;
        if t < 2 {
            return Err(DiffusionError::Config("train_timesteps must be at least 2".into()));
        }
        if !(config.beta_start > 0.0 && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(DiffusionError::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} and {}",
                config.beta_start, config.beta_end
            )));
        }
        let (s, e) = (config.beta_start.sqrt(), config.beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..t)
            .map(|i| {
                let b = s + (e - s) * i as f64 / (t - 1) as f64;
                acc *= 1.0 - b * b;
                acc
            })
            .collect();
        Ok(Self {
            config,
            alphas_cumprod,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn train_timesteps(&self) -> usize {
        self.config.train_timesteps
    }

    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.train_timesteps() {
            return Err(DiffusionError::Timestep {
                timestep: t,
                limit: self.train_timesteps(),
            });
        }
        Ok(())
    }

    pub fn add_noise(&self, clean: &Latent, noise: &Latent, t: usize) -> Latent {
        let ab = self.alphas_cumprod[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Latent {
            data: clean.data.iter().zip(&noise.data).map(|(x, n)| a * x + b * n).collect(),
            ..*clean
        }
    }

    /// Evenly spaced, descending inference timesteps ending at 0.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.train_timesteps() {
            return Err(DiffusionError::Config(format!(
                "inference steps must be in 1..={}, got {steps}",
                self.train_timesteps()
            )));
        }
        let ratio = self.train_timesteps() / steps;
        Ok((0..steps).rev().map(|i| i * ratio).collect())
    }

    /// Deterministic DDIM update from `t` to `prev` (or to the clean sample
    /// when `prev` is `None`).
    pub fn step(&self, eps: &Latent, t: usize, prev: Option<usize>, sample: &Latent) -> Latent {
        let ab = self.alphas_cumprod[t];
        let ab_prev = prev.map_or(1.0, |p| self.alphas_cumprod[p]);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Latent {
            data: sample
                .data
                .iter()
                .zip(&eps.data)
                .map(|(x, e)| {
                    let x0 = (x - sb * e) / sa;
                    pa * x0 + pb * e
                })
                .collect(),
            ..*sample
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_endpoints() {
        let s = NoiseScheduler::new(SchedulerConfig::full_scale()).unwrap();
        assert!((s.alpha_cumprod(0) - (1.0 - 0.00085)).abs() < 1e-12);
        assert!(s.alpha_cumprod(999) < 0.01);
        let ts = s.timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (980, 0));
    }

    #[test]
    fn rejects_bad_steps() {
        let s = NoiseScheduler::new(SchedulerConfig::toy()).unwrap();
        assert!(s.timesteps(0).is_err());
        assert!(s.timesteps(101).is_err());
        assert!(s.check_timestep(100).is_err());
    }

    #[test]
    fn toy_schedule_ends_near_pure_noise() {
        let s = NoiseScheduler::new(SchedulerConfig::toy()).unwrap();
        assert!(s.alpha_cumprod(99) < 0.01);
        for t in 1..100 {
            assert!(s.alpha_cumprod(t) < s.alpha_cumprod(t - 1));
        }
    }

    proptest! {
        #[test]
        fn true_noise_step_moves_closer(t in 0usize..100, seed in any::<u64>()) {
            let s = NoiseScheduler::new(SchedulerConfig::toy()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = Latent::gaussian(4, 8, 8, &mut rng);
            let noise = Latent::gaussian(4, 8, 8, &mut rng);
            let noisy = s.add_noise(&clean, &noise, t);
            let prev = t.checked_sub(1);
            let stepped = s.step(&noise, t, prev, &noisy);
            prop_assert!(stepped.distance(&clean) < noisy.distance(&clean));
        }
    }
}
