//! The assembled video-language model: parameter layout per training stage
//! and the forward passes that tie the encoders together.

use rand::Rng;

use crate::error::{Error, Result};
use crate::multimodal::{self, JointConfig};
use crate::nn;
use crate::numerics::{Tape, Var};
use crate::objectives::{self, VIDEO_PROJ};
use crate::params::ParamStore;
use crate::sampling::HybridSequence;
use crate::scalar::Scalar;
use crate::text::{self, TextOutput, TextStackConfig, TokenSequence};
use crate::video::{self, SegmentFeatures, VideoEncoderConfig};

/// Learnable log inverse temperature, present only when enabled.
pub const LOGIT_SCALE: &str = "contrastive.logit_scale";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub video: VideoEncoderConfig,
    pub text: TextStackConfig,
    pub joint_layers: usize,
    pub joint_heads: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        self.text.validate()?;
        self.joint().validate()?;
        if self.text.hidden != self.video.hidden() {
            return Err(Error::invalid(format!(
                "text hidden {} differs from video hidden {}",
                self.text.hidden,
                self.video.hidden()
            )));
        }
        Ok(())
    }

    pub fn joint(&self) -> JointConfig {
        JointConfig {
            layers: self.joint_layers,
            heads: self.joint_heads,
            hidden: self.text.hidden,
            mlp_ratio: self.text.mlp_ratio,
            grid: self.video.grid(),
            vocab_size: self.text.vocab_size,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.text.embed_dim
    }
}

/// Video encoder, text stack and both contrastive projections.
pub fn init_stage1<T: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    video::init(&mut store, &cfg.video, rng)?;
    text::init(&mut store, &cfg.text, rng)?;
    nn::init_linear(&mut store, VIDEO_PROJ, cfg.video.hidden(), cfg.embed_dim(), rng);
    Ok(store)
}

/// Adds the joint Transformer and MLM head to a stage-1 store.
pub fn init_stage2<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    multimodal::init(store, &cfg.joint(), rng)
}

pub struct VideoForward {
    pub segments: Vec<SegmentFeatures>,
    /// `[1, e]`, unit norm.
    pub embedding: Var,
}

pub fn video_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    segments: &[HybridSequence<T>],
) -> Result<VideoForward> {
    let segments = segments
        .iter()
        .map(|s| video::encode_segment(tape, store, &cfg.video, s))
        .collect::<Result<Vec<_>>>()?;
    let fused: Vec<Var> = segments.iter().map(|s| s.v).collect();
    let embedding = objectives::video_embedding(tape, store, &fused)?;
    Ok(VideoForward { segments, embedding })
}

pub struct TextForward {
    pub output: TextOutput,
    /// `[1, e]`, unit norm.
    pub embedding: Var,
}

pub fn text_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    seq: &TokenSequence,
) -> Result<TextForward> {
    let output = text::encode_text(tape, store, &cfg.text, seq)?;
    let embedding = text::text_embedding(tape, store, output.states)?;
    Ok(TextForward { output, embedding })
}

/// Consensus MLM logits `[m, V]` at `positions` of a corrupted caption, each
/// segment paired with the same text through the joint Transformer.
pub fn mlm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    corrupted: &TokenSequence,
    segments: &[SegmentFeatures],
    positions: &[usize],
) -> Result<Var> {
    let joint = cfg.joint();
    let text = text::encode_text(tape, store, &cfg.text, corrupted)?;
    let per_segment = segments
        .iter()
        .map(|s| {
            let j = multimodal::joint_forward(tape, store, &joint, &text, s.v)?;
            multimodal::mlm_logits(tape, store, j, positions)
        })
        .collect::<Result<Vec<_>>>()?;
    multimodal::aggregate_segments(tape, &per_segment)
}
