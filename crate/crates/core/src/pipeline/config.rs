//! Experiment configuration and its validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::Task;
use crate::error::{Error, Result};

/// Every knob of a training/evaluation run. Serialised field names are the
/// JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Square patch side.
    pub patch_size: usize,
    /// Unified channel count after padding.
    pub channels: usize,
    pub slots: usize,
    pub sinkhorn_iters: usize,
    pub tau: f64,
    pub experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub d: usize,
    pub d_e: usize,
    pub d_p: usize,
    pub gamma: f64,
    pub t_w: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub tasks: Vec<Task>,
    pub output_dir: PathBuf,
    /// Bands of the synthetic inputs; at most `channels`.
    #[serde(default)]
    pub input_bands: Option<usize>,
    #[serde(default = "default_batch_per_task")]
    pub batch_per_task: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Multiply routed slots by `S` so slot magnitudes match channel magnitudes.
    #[serde(default = "default_true")]
    pub slot_rescale: bool,
}

fn default_batch_per_task() -> usize {
    2
}

fn default_eval_samples() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Desk-scale profile: 16×16 patches, C=4, S=8, T=8, τ=0.1, E=2, k=1,
    /// r=2, d=32 on denoise, brightness and destripe.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            patch_size: 16,
            channels: 4,
            slots: 8,
            sinkhorn_iters: 8,
            tau: 0.1,
            experts: 2,
            top_k: 1,
            rank: 2,
            d: 32,
            d_e: 32,
            d_p: 32,
            gamma: crate::mtl::DEFAULT_GAMMA,
            t_w: crate::mtl::DEFAULT_TEMPERATURE,
            learning_rate: 0.25,
            steps: 500,
            tasks: vec![Task::Denoise, Task::Brightness, Task::Destripe],
            output_dir: PathBuf::from("runs/desk"),
            input_bands: None,
            batch_per_task: default_batch_per_task(),
            eval_samples: default_eval_samples(),
            slot_rescale: true,
        }
    }

    /// Full-size alignment and routing shapes (C=20, S=32, E=8, k=2); meant for
    /// shape checks rather than training on a desk.
    pub fn paper() -> Self {
        Self {
            channels: 20,
            slots: 32,
            experts: 8,
            top_k: 2,
            patch_size: 32,
            output_dir: PathBuf::from("runs/paper"),
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn bands(&self) -> usize {
        self.input_bands.unwrap_or(self.channels)
    }

    /// Collects every violated constraint into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let positive = [
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("slots", self.slots),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("rank", self.rank),
            ("d", self.d),
            ("d_e", self.d_e),
            ("d_p", self.d_p),
            ("batch_per_task", self.batch_per_task),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.top_k > self.experts {
            bad.push(format!("top_k ({}) exceeds experts ({})", self.top_k, self.experts));
        }
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            bad.push(format!("patch_size must be even and >= 8, got {}", self.patch_size));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            bad.push(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.t_w > 0.0 && self.t_w.is_finite()) {
            bad.push(format!("t_w must be positive, got {}", self.t_w));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.tasks.is_empty() {
            bad.push("at least one task is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                bad.push(format!("task {t} listed twice"));
            }
        }
        if let Some(b) = self.input_bands {
            if b == 0 || b > self.channels {
                bad.push(format!("input_bands must lie in [1, channels], got {b}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Reads and validates a JSON config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ExperimentConfig::desk().validate().unwrap();
        let p = ExperimentConfig::paper();
        p.validate().unwrap();
        assert_eq!((p.channels, p.slots, p.sinkhorn_iters, p.experts, p.top_k), (20, 32, 8, 8, 2));
    }

    #[test]
    fn violations_are_listed_together() {
        let cfg = ExperimentConfig {
            top_k: 3,
            tau: 0.0,
            tasks: vec![],
            ..ExperimentConfig::desk()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("top_k") && msg.contains("tau") && msg.contains("task"), "{msg}");
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let cfg = ExperimentConfig::desk();
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["bogus"] = serde_json::json!(1);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(ExperimentConfig::load(&path).unwrap_err().is_config());
    }
}
