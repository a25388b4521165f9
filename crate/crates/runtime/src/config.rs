//! Versioned TOML run configuration. Every section is optional and falls
//! back to the defaults below; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use hdvila_core::model::ModelConfig;
use hdvila_core::optim::AdamWConfig;
use hdvila_core::text::TextStackConfig;
use hdvila_core::video::{HybridTransformerConfig, StagedEncoderConfig, VideoEncoderConfig};
use hdvila_core::sampling::LR_FACTOR;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{COLORS, DIRECTIONS, SHAPES};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_seed() -> u64 {
    7
}

/// Synthetic corpus. Classes are the product of the first `shapes` shapes,
/// `colors` colors and `directions` motion directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shapes: usize,
    pub colors: usize,
    pub directions: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the shape's bounding box in pixels.
    pub shape_size: usize,
    /// Pixels moved per frame.
    pub speed: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shapes: 2,
            colors: 2,
            directions: 2,
            train_samples: 256,
            eval_samples: 64,
            frames: 20,
            height: 64,
            width: 64,
            shape_size: 16,
            speed: 2,
        }
    }
}

impl DataConfig {
    pub fn class_count(&self) -> usize {
        self.shapes * self.colors * self.directions
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub segment_count: usize,
    /// `2N + 1` frame slots per segment.
    pub frames_per_segment: usize,
    /// LR frame stride `r`.
    pub lr_rate: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    /// Whether the middle slot is a high-resolution frame.
    pub use_hr: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            segment_count: 2,
            frames_per_segment: 3,
            lr_rate: 2,
            crop_height: 64,
            crop_width: 64,
            use_hr: true,
        }
    }
}

impl SamplingConfig {
    pub fn lr_per_side(&self) -> usize {
        (self.frames_per_segment - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub hr_channels: Vec<usize>,
    pub lr_channels: Vec<usize>,
    pub hybrid_layers: usize,
    pub hybrid_heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_len: usize,
    /// Non-reserved vocabulary words kept, most frequent first.
    pub max_words: usize,
    pub embed_dim: usize,
    pub joint_layers: usize,
    pub joint_heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hr_channels: vec![8, 8, 16, 16],
            lr_channels: vec![8, 8, 16],
            hybrid_layers: 1,
            hybrid_heads: 2,
            hidden: 16,
            mlp_ratio: 2,
            text_layers: 1,
            text_heads: 2,
            max_len: 12,
            max_words: 64,
            embed_dim: 16,
            joint_layers: 1,
            joint_heads: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSampler {
    /// Uniform shuffle each epoch.
    Shuffle,
    /// Per-class shuffles interleaved so each run of `class_count`
    /// consecutive samples holds one sample of every class.
    ClassInterleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub learn_temperature: bool,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of each stage's steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep both contrastive projections (and the learned temperature) fixed
    /// during stage 2.
    pub freeze_contrastive_stage2: bool,
    /// Add the contrastive loss to MLM during stage 2.
    pub joint_loss_stage2: bool,
    pub mask_prob: f64,
    pub batch_sampler: BatchSampler,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            temperature: 0.05,
            learn_temperature: false,
            stage1_epochs: 1,
            stage2_epochs: 0,
            lr: 5e-5,
            weight_decay: 1e-3,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_contrastive_stage2: true,
            joint_loss_stage2: false,
            mask_prob: 0.15,
            batch_sampler: BatchSampler::Shuffle,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate with twice the training segment count.
    pub double_segments: bool,
    pub recall_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            double_segments: true,
            recall_ks: vec![1, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/hdvila"),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: default_seed(),
            data: DataConfig::default(),
            sampling: SamplingConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Settings the learning smoke test trains with: eight classes that
    /// differ in shape and color, a learning rate and temperature suited to
    /// a model of this size, and batches free of duplicate captions.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data.colors = 4;
        cfg.data.directions = 1;
        cfg.train.lr = 1e-3;
        cfg.train.temperature = 0.2;
        cfg.train.stage1_epochs = 15;
        cfg.train.batch_sampler = BatchSampler::ClassInterleaved;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("version {} unsupported, expected {CONFIG_VERSION}", self.version));
        }
        let d = &self.data;
        if d.shapes > SHAPES.len() || d.colors > COLORS.len() || d.directions > DIRECTIONS.len() {
            return bad(format!(
                "at most {} shapes, {} colors and {} directions are available",
                SHAPES.len(),
                COLORS.len(),
                DIRECTIONS.len()
            ));
        }
        if d.class_count() < 2 {
            return bad("the synthetic corpus needs at least 2 classes".into());
        }
        if d.frames == 0 || d.shape_size == 0 || d.train_samples == 0 || d.eval_samples == 0 {
            return bad("frames, shape_size and sample counts must be positive".into());
        }
        let travel = d.speed * (d.frames - 1);
        if d.shape_size + travel > d.height.min(d.width) {
            return bad(format!(
                "a {}px shape moving {travel}px does not fit in {}x{} frames",
                d.shape_size, d.height, d.width
            ));
        }
        let s = &self.sampling;
        if s.crop_height > d.height || s.crop_width > d.width {
            return bad(format!(
                "crop {}x{} exceeds frames {}x{}",
                s.crop_height, s.crop_width, d.height, d.width
            ));
        }
        if !s.crop_height.is_multiple_of(LR_FACTOR) || !s.crop_width.is_multiple_of(LR_FACTOR) {
            return bad(format!("crop dims must be multiples of {LR_FACTOR}"));
        }
        if s.frames_per_segment.is_multiple_of(2) || s.segment_count == 0 || s.lr_rate == 0 {
            return bad("frames_per_segment must be odd; segment_count and lr_rate positive".into());
        }
        if !s.use_hr && s.frames_per_segment == 1 {
            return bad("a segment without the HR frame needs LR frames".into());
        }
        let t = &self.train;
        if t.batch_size < 2 || t.batch_size > d.train_samples {
            return bad(format!(
                "batch_size {} must be in 2..={} (train_samples)",
                t.batch_size, d.train_samples
            ));
        }
        if !(t.temperature > 0.0) || !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return bad("temperature must be positive; lr and weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", t.warmup_fraction));
        }
        if !(t.mask_prob > 0.0 && t.mask_prob <= 1.0) {
            return bad(format!("mask_prob {} outside (0, 1]", t.mask_prob));
        }
        if self.model.max_len < 2 || self.model.max_words == 0 {
            return bad("max_len must leave room for a word after [CLS]; max_words positive".into());
        }
        if self.eval.recall_ks.iter().any(|&k| k == 0 || k > d.eval_samples) {
            return bad(format!("recall_ks must lie in 1..={}", d.eval_samples));
        }
        self.model_config(self.model.max_words + hdvila_core::text::RESERVED.len())?;
        Ok(())
    }

    pub fn eval_segments(&self) -> usize {
        self.sampling.segment_count * if self.eval.double_segments { 2 } else { 1 }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let s = &self.sampling;
        let cfg = ModelConfig {
            video: VideoEncoderConfig {
                hr: StagedEncoderConfig { channels: m.hr_channels.clone() },
                lr: StagedEncoderConfig { channels: m.lr_channels.clone() },
                hybrid: HybridTransformerConfig {
                    layers: m.hybrid_layers,
                    heads: m.hybrid_heads,
                    hidden: m.hidden,
                    mlp_ratio: m.mlp_ratio,
                },
                crop: (s.crop_height, s.crop_width),
                lr_per_side: s.lr_per_side(),
                use_hr: s.use_hr,
            },
            text: TextStackConfig {
                layers: m.text_layers,
                hidden: m.hidden,
                heads: m.text_heads,
                max_len: m.max_len,
                mlp_ratio: m.mlp_ratio,
                vocab_size,
                embed_dim: m.embed_dim,
            },
            joint_layers: m.joint_layers,
            joint_heads: m.joint_heads,
        };
        cfg.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.train_samples / self.train.batch_size) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn version_only_gives_defaults() {
        assert_eq!(RunConfig::from_toml("version = 1").unwrap(), RunConfig::default());
    }

    #[test]
    fn missing_version_rejected() {
        assert!(matches!(RunConfig::from_toml("seed = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("version = 1\n[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml("version = 1\nextra = 2\n").is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        assert!(RunConfig::from_toml("version = 2").is_err());
    }

    #[test]
    fn conventional_optimizer_defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.weight_decay, t.warmup_fraction), (5e-5, 1e-3, 0.1));
        assert_eq!((t.beta1, t.beta2, t.eps), (0.9, 0.999, 1e-8));
        assert_eq!(t.temperature, 0.05);
        assert!(t.freeze_contrastive_stage2 && !t.joint_loss_stage2);
    }

    #[test]
    fn semantic_checks() {
        let cases = [
            "version = 1\n[sampling]\nframes_per_segment = 4\n",
            "version = 1\n[data]\nshapes = 1\ncolors = 1\ndirections = 1\n",
            "version = 1\n[data]\nspeed = 10\n",
            "version = 1\n[train]\nbatch_size = 1\n",
            "version = 1\n[sampling]\ncrop_height = 60\n",
            "version = 1\n[model]\nhidden = 15\n",
            "version = 1\n[eval]\nrecall_ks = [100]\n",
        ];
        for c in cases {
            assert!(matches!(RunConfig::from_toml(c), Err(Error::Config(_))), "{c}");
        }
    }
}
