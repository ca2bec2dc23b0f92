use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Result, SspError};
use crate::model::{FreezePolicy, ModelConfig};
use crate::prompt::Strategy;
use crate::train::{AdamWConfig, TrainConfig};

/// Everything a run needs, as one flat JSON document. Every field has a
/// default; an empty object is the toy reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub data_seed: u64,
    pub data_dir: PathBuf,
    // model
    pub patch_h: usize,
    pub patch_w: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub layers: usize,
    pub d_spatial: usize,
    pub d_temporal: usize,
    pub n_ifs: usize,
    pub strategy: Strategy,
    pub use_ifg: bool,
    pub use_ifs: bool,
    pub use_entropy_gate: bool,
    pub use_variance_gate: bool,
    pub beta_init: f64,
    pub variance_init: f64,
    pub backbone_seed: u64,
    // optimization
    pub policy: FreezePolicy,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub threads: usize,
    /// Prompt/head init and shuffling.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SynthSpec::default();
        let t = TrainConfig::default();
        RunConfig {
            n_classes: m.n_classes,
            samples_per_class: s.samples_per_class,
            frames: m.frames,
            height: m.height,
            width: m.width,
            noise_sigma: s.noise_sigma,
            data_seed: s.seed,
            data_dir: PathBuf::from("data"),
            patch_h: m.patch_h,
            patch_w: m.patch_w,
            d_model: m.d_model,
            d_state: m.d_state,
            expand: m.expand,
            layers: m.layers,
            d_spatial: m.d_spatial,
            d_temporal: m.d_temporal,
            n_ifs: m.n_ifs,
            strategy: m.strategy,
            use_ifg: m.use_ifg,
            use_ifs: m.use_ifs,
            use_entropy_gate: m.use_entropy_gate,
            use_variance_gate: m.use_variance_gate,
            beta_init: m.beta_init,
            variance_init: m.variance_init,
            backbone_seed: 0,
            policy: t.policy,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            lr: t.peak_lr,
            min_lr: t.min_lr,
            weight_decay: t.adamw.weight_decay,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            threads: t.threads,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| SspError::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SspError::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| SspError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            SspError::Config(msg) => SspError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.synth_spec().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SspError::config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(SspError::config("warmup_epochs exceeds epochs"));
        }
        let lrs = [self.lr, self.min_lr, self.weight_decay, self.clip_norm];
        if lrs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SspError::config(
                "lr, min_lr, weight_decay and clip_norm must be finite and ≥ 0",
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            channels: 1,
            height: self.height,
            width: self.width,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.expand,
            layers: self.layers,
            d_spatial: self.d_spatial,
            d_temporal: self.d_temporal,
            n_ifs: self.n_ifs,
            strategy: self.strategy,
            n_classes: self.n_classes,
            use_ifg: self.use_ifg,
            use_ifs: self.use_ifs,
            use_entropy_gate: self.use_entropy_gate,
            use_variance_gate: self.use_variance_gate,
            beta_init: self.beta_init,
            variance_init: self.variance_init,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            frames: self.frames,
            height: self.height,
            width: self.width,
            seed: self.data_seed,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            peak_lr: self.lr,
            min_lr: self.min_lr.min(self.lr),
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            policy: self.policy,
            seed: self.seed,
            threads: self.threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_toy_reference() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.synth_spec(), SynthSpec::default());
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"n_clases": 6}"#).unwrap_err();
        assert!(matches!(&err, SspError::Config(m) if m.contains("n_clases")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn round_trips_and_validates() {
        let c = RunConfig {
            strategy: Strategy::BiIndependent,
            policy: FreezePolicy::HeadOnly,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"n_ifs": 4}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lr": -1.0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"strategy": "sideways"}"#).is_err());
    }
}
