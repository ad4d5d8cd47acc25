use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Fine-tuning regime for generation runs; absent for classification.
    pub regime: Option<String>,
    pub stages: Vec<StageTiming>,
    pub image_seconds: Vec<f64>,
}

/// `HH:MM:SS`, rounded to the nearest second.
pub fn format_hms(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    format!("{:02}:{:02}:{:02}", total / 3600, total / 60 % 60, total % 60)
}

impl TimingReport {
    pub fn for_regime(regime: impl Into<String>) -> Self {
        Self {
            regime: Some(regime.into()),
            ..Default::default()
        }
    }

    /// Runs `f` as stage `name`. The duration is recorded when it succeeds;
    /// failures are wrapped with the stage name.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        match f() {
            Ok(v) => {
                self.stages.push(StageTiming {
                    stage: name.to_string(),
                    seconds: start.elapsed().as_secs_f64(),
                });
                Ok(v)
            }
            Err(e) => Err(Error::Stage {
                stage: name.to_string(),
                source: Box::new(e),
            }),
        }
    }

    pub fn seconds_for(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.seconds)
    }

    pub fn total_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    pub fn mean_image_seconds(&self) -> Option<f64> {
        if self.image_seconds.is_empty() {
            None
        } else {
            Some(self.image_seconds.iter().sum::<f64>() / self.image_seconds.len() as f64)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Tab-separated stage table with both seconds and `HH:MM:SS`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("stage\tseconds\telapsed\n");
        for t in &self.stages {
            s.push_str(&format!("{}\t{:.3}\t{}\n", t.stage, t.seconds, format_hms(t.seconds)));
        }
        s.push_str(&format!(
            "total\t{:.3}\t{}\n",
            self.total_seconds(),
            format_hms(self.total_seconds())
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hms_matches_table_format() {
        assert_eq!(format_hms(363.0), "00:06:03");
        assert_eq!(format_hms(387.0), "00:06:27");
        assert_eq!(format_hms(3454.0), "00:57:34");
        assert_eq!(format_hms(21060.0), "05:51:00");
        assert_eq!(format_hms(0.4), "00:00:00");
        assert_eq!(format_hms(-1.0), "00:00:00");
    }

    #[test]
    fn stage_records_success_and_names_failure() {
        let mut t = TimingReport::default();
        t.stage("a", || Ok(())).unwrap();
        let err = t.stage("b", || -> Result<()> { Err(Error::Config("boom".into())) }).unwrap_err();
        assert_eq!(err.stage(), Some("b"));
        assert!(err.to_string().contains("stage `b` failed"));
        assert_eq!(t.stages.len(), 1);
        assert!(t.stages[0].seconds >= 0.0);
    }
}
