//! Hybrid video encoder: staged convolutional HR/LR encoders, the HR
//! adapter and interpolation bridge, the divided space-time Transformer and
//! the token-wise fusion layer.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, join};
use crate::numerics::{AttentionLayout, Tape, Tensor, Var};
use crate::params::{glorot, uniform, ParamStore};
use crate::sampling::HybridSequence;
use crate::scalar::Scalar;

pub const PREFIX: &str = "video";

/// Total spatial reduction from an HR crop to the token grid.
pub const GRID_FACTOR: usize = 64;

/// Convolutional encoder made of strided stages. Stage 1 reduces by 4 and
/// each further stage by 2, so stage `i` (1-based) sits at `2^(i+1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagedEncoderConfig {
    pub channels: Vec<usize>,
}

impl StagedEncoderConfig {
    pub fn stage_count(&self) -> usize {
        self.channels.len()
    }

    /// Cumulative downsampling after 1-based stage `stage`.
    pub fn downsample(stage: usize) -> usize {
        2 << stage
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
}

impl HybridTransformerConfig {
    /// Four layers, 16 heads, hidden size 1024.
    pub fn full_scale() -> Self {
        HybridTransformerConfig {
            layers: 4,
            heads: 16,
            hidden: 1024,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hybrid transformer hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoEncoderConfig {
    /// Four stages; stage 3 feeds the bridge, stage 4 the adapter.
    pub hr: StagedEncoderConfig,
    /// Three stages.
    pub lr: StagedEncoderConfig,
    pub hybrid: HybridTransformerConfig,
    /// HR crop `(height, width)`.
    pub crop: (usize, usize),
    /// `N`, LR frames on each side of the HR frame.
    pub lr_per_side: usize,
    /// Whether the HR branch is present. Without it the hybrid Transformer
    /// sees only the 2N LR frames.
    pub use_hr: bool,
}

impl VideoEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.hybrid.validate()?;
        if self.hr.stage_count() != 4 || self.lr.stage_count() != 3 {
            return Err(Error::invalid("HR encoder needs 4 stages and LR encoder 3"));
        }
        let (h, w) = self.crop;
        if h == 0 || w == 0 || h % GRID_FACTOR != 0 || w % GRID_FACTOR != 0 {
            return Err(Error::invalid(format!("crop {h}x{w} must be a positive multiple of {GRID_FACTOR}")));
        }
        if !self.use_hr && self.lr_per_side == 0 {
            return Err(Error::invalid("a segment needs at least one frame"));
        }
        Ok(())
    }

    /// Token grid `(h, w)` fed to the multimodal Transformer.
    pub fn grid(&self) -> (usize, usize) {
        (self.crop.0 / GRID_FACTOR, self.crop.1 / GRID_FACTOR)
    }

    pub fn hidden(&self) -> usize {
        self.hybrid.hidden
    }

    /// Frames per hybrid sequence in temporal order.
    pub fn temporal_slots(&self) -> usize {
        2 * self.lr_per_side + usize::from(self.use_hr)
    }
}

/// Features of one segment on a shared `h x w` token grid.
#[derive(Clone, Copy, Debug)]
pub struct SegmentFeatures {
    /// Hybrid spatiotemporal tokens `[h*w, d]`.
    pub v_hy: Var,
    /// Adapted HR tokens `[h*w, d]`.
    pub v_hr: Option<Var>,
    /// Fused tokens `[h*w, d]`.
    pub v: Var,
    pub grid: (usize, usize),
}

fn init_stages<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &StagedEncoderConfig,
    rng: &mut impl Rng,
) {
    let mut c_in = 3;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let k = if i == 0 { 4 } else { 3 };
        let p = format!("{prefix}.stage{}", i + 1);
        let fan_in = c_in * k * k;
        store.insert(join(&p, "conv.weight"), glorot(&[c_out, c_in, k, k], fan_in, c_out * k * k, rng));
        store.insert(join(&p, "conv.bias"), Tensor::zeros(&[c_out]));
        nn::init_norm(store, &join(&p, "norm"), c_out);
        c_in = c_out;
    }
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &VideoEncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden();
    let (gh, gw) = cfg.grid();
    init_stages(store, &join(PREFIX, "hr"), &cfg.hr, rng);
    init_stages(store, &join(PREFIX, "lr"), &cfg.lr, rng);
    nn::init_linear(store, &join(PREFIX, "lr_proj"), cfg.lr.out_channels(), d, rng);
    let c4 = cfg.hr.channels[3];
    store.insert(join(PREFIX, "adapter.weight"), glorot(&[d, c4, 1, 1], c4, d, rng));
    store.insert(join(PREFIX, "adapter.bias"), Tensor::zeros(&[d]));
    nn::init_linear(store, &join(PREFIX, "bridge"), cfg.hr.channels[2], d, rng);
    let hy = join(PREFIX, "hybrid");
    // Frame order is only visible through this table, so it starts at the
    // scale of the normalized tokens rather than as a small perturbation.
    store.insert(join(&hy, "pos_time"), uniform(&[cfg.temporal_slots(), d], 1.0, rng));
    store.insert(join(&hy, "pos_space"), uniform(&[gh * gw, d], 0.02, rng));
    for l in 0..cfg.hybrid.layers {
        let p = format!("{hy}.layer{l}");
        nn::init_norm(store, &join(&p, "time_norm"), d);
        nn::init_attention(store, &join(&p, "time_attn"), d, rng);
        nn::init_norm(store, &join(&p, "space_norm"), d);
        nn::init_attention(store, &join(&p, "space_attn"), d, rng);
        nn::init_norm(store, &join(&p, "mlp_norm"), d);
        nn::init_mlp(store, &join(&p, "mlp"), d, d * cfg.hybrid.mlp_ratio, rng);
    }
    nn::init_norm(store, &join(&hy, "final_norm"), d);
    nn::init_linear(store, &join(PREFIX, "fuse"), 2 * d, d, rng);
    Ok(())
}

/// `[c, h, w] -> [h*w, c]`
pub fn to_tokens<T: Scalar>(tape: &mut Tape<T>, fmap: Var) -> Result<Var> {
    let s = tape.shape(fmap).to_vec();
    let flat = tape.reshape(fmap, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// One stage: conv, per-pixel channel norm, GELU.
fn stage<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var, first: bool) -> Result<Var> {
    let k = tape.param(store, &join(prefix, "conv.weight"))?;
    let b = tape.param(store, &join(prefix, "conv.bias"))?;
    let (stride, pad) = if first { (4, 0) } else { (2, 1) };
    let y = tape.conv2d(x, k, stride, pad)?;
    let y = tape.add_channel(y, b)?;
    let s = tape.shape(y).to_vec();
    let t = to_tokens(tape, y)?;
    let t = nn::norm(tape, store, &join(prefix, "norm"), t)?;
    let t = tape.transpose(t)?;
    let y = tape.reshape(t, &s)?;
    Ok(tape.gelu(y))
}

fn run_stages<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    stages: usize,
    x: Var,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(stages);
    let mut h = x;
    for i in 0..stages {
        h = stage(tape, store, &format!("{prefix}.stage{}", i + 1), h, i == 0)?;
        outs.push(h);
    }
    Ok(outs)
}

fn check_divisible(op: &'static str, shape: &[usize], by: usize) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 || !shape[1].is_multiple_of(by) || !shape[2].is_multiple_of(by) {
        return Err(Error::shape(op, format!("[3, h, w] with h, w divisible by {by}"), format!("{shape:?}")));
    }
    Ok(())
}

/// Shared-weight LR encoder: each `[3, h, w]` frame becomes `[c3, h/16, w/16]`.
pub fn encode_lr<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, frames: &[Var]) -> Result<Vec<Var>> {
    let prefix = join(PREFIX, "lr");
    frames
        .iter()
        .map(|&f| {
            check_divisible("encode_lr", tape.shape(f), 16)?;
            Ok(*run_stages(tape, store, &prefix, 3, f)?.last().expect("three stages"))
        })
        .collect()
}

/// HR encoder: returns the stage-3 (`/16`) and stage-4 (`/32`) feature maps.
pub fn encode_hr<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, frame: Var) -> Result<(Var, Var)> {
    check_divisible("encode_hr", tape.shape(frame), 32)?;
    let outs = run_stages(tape, store, &join(PREFIX, "hr"), 4, frame)?;
    Ok((outs[2], outs[3]))
}

/// 1x1 channel convolution to `d`, 2x2 max-pool, flatten to tokens.
pub fn adapt_hr<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, stage4: Var) -> Result<Var> {
    let s = tape.shape(stage4).to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(Error::shape("adapt_hr", "[c, h, w] with even h, w", format!("{s:?}")));
    }
    let k = tape.param(store, &join(PREFIX, "adapter.weight"))?;
    let b = tape.param(store, &join(PREFIX, "adapter.bias"))?;
    let y = tape.conv2d(stage4, k, 1, 0)?;
    let y = tape.add_channel(y, b)?;
    let y = tape.max_pool2d(y)?;
    to_tokens(tape, y)
}

/// Bilinear resize of the stage-3 map to `grid`, then channel projection.
pub fn bridge_hr<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    stage3: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let y = tape.interpolate_bilinear(stage3, grid.0, grid.1)?;
    let t = to_tokens(tape, y)?;
    nn::linear(tape, store, &join(PREFIX, "bridge"), t)
}

/// LR feature map to `[h*w, d]` tokens.
pub fn lr_tokens<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, fmap: Var) -> Result<Var> {
    let t = to_tokens(tape, fmap)?;
    nn::linear(tape, store, &join(PREFIX, "lr_proj"), t)
}

/// Divided space-time attention layouts for `frames` frames of `hw` tokens
/// stored frame-major.
pub fn divided_layouts(frames: usize, hw: usize, heads: usize) -> (Arc<AttentionLayout>, Arc<AttentionLayout>) {
    let time = (0..hw).map(|s| (0..frames).map(|f| f * hw + s).collect()).collect();
    let space = (0..frames).map(|f| (0..hw).map(|s| f * hw + s).collect()).collect();
    (
        Arc::new(AttentionLayout {
            heads,
            groups: time,
            key_mask: None,
        }),
        Arc::new(AttentionLayout {
            heads,
            groups: space,
            key_mask: None,
        }),
    )
}

/// Hybrid Transformer over `2N` LR token frames and (optionally) the HR token
/// frame at temporal slot `N`. Returns the HR slot's tokens, or the mean over
/// frames when the HR branch is disabled.
pub fn hybrid_transform<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &VideoEncoderConfig,
    lr_tokens: &[Var],
    hr_tokens: Option<Var>,
) -> Result<Var> {
    let n = cfg.lr_per_side;
    if lr_tokens.len() != 2 * n || hr_tokens.is_some() != cfg.use_hr {
        return Err(Error::invalid(format!(
            "hybrid transformer expects {} LR frames and {} HR frame, got {} and {}",
            2 * n,
            usize::from(cfg.use_hr),
            lr_tokens.len(),
            usize::from(hr_tokens.is_some())
        )));
    }
    let mut frames: Vec<Var> = lr_tokens[..n].to_vec();
    frames.extend(hr_tokens);
    frames.extend_from_slice(&lr_tokens[n..]);
    let grid_shape = tape.shape(frames[0]).to_vec();
    if let Some(bad) = frames.iter().find(|&&f| tape.shape(f) != grid_shape.as_slice()) {
        return Err(Error::shape("hybrid_transform", format!("{grid_shape:?}"), format!("{:?}", tape.shape(*bad))));
    }
    let (hw, d) = (grid_shape[0], grid_shape[1]);
    let f = frames.len();
    let hy = join(PREFIX, "hybrid");

    let mut x = tape.concat_rows(&frames)?;
    let pos_t = tape.param(store, &join(&hy, "pos_time"))?;
    let pos_s = tape.param(store, &join(&hy, "pos_space"))?;
    if tape.shape(pos_s)[0] != hw || tape.shape(pos_t)[0] != f || tape.shape(pos_t)[1] != d {
        return Err(Error::shape(
            "hybrid_transform",
            format!("position tables for {f} frames x {hw} tokens"),
            format!("{:?} / {:?}", tape.shape(pos_t), tape.shape(pos_s)),
        ));
    }
    let time_ids: Vec<usize> = (0..f).flat_map(|fi| std::iter::repeat_n(fi, hw)).collect();
    let space_ids: Vec<usize> = (0..f).flat_map(|_| 0..hw).collect();
    let pt = tape.embedding(pos_t, &time_ids)?;
    let ps = tape.embedding(pos_s, &space_ids)?;
    x = tape.add(x, pt)?;
    x = tape.add(x, ps)?;

    let (time_layout, space_layout) = divided_layouts(f, hw, cfg.hybrid.heads);
    for l in 0..cfg.hybrid.layers {
        let p = format!("{hy}.layer{l}");
        let h = nn::norm(tape, store, &join(&p, "time_norm"), x)?;
        let h = nn::attention(tape, store, &join(&p, "time_attn"), h, time_layout.clone())?;
        x = tape.add(x, h)?;
        let h = nn::norm(tape, store, &join(&p, "space_norm"), x)?;
        let h = nn::attention(tape, store, &join(&p, "space_attn"), h, space_layout.clone())?;
        x = tape.add(x, h)?;
        let h = nn::norm(tape, store, &join(&p, "mlp_norm"), x)?;
        let h = nn::mlp(tape, store, &join(&p, "mlp"), h)?;
        x = tape.add(x, h)?;
    }
    x = nn::norm(tape, store, &join(&hy, "final_norm"), x)?;

    if cfg.use_hr {
        tape.slice_rows(x, n * hw, hw)
    } else {
        let mut acc = tape.slice_rows(x, 0, hw)?;
        for fi in 1..f {
            let s = tape.slice_rows(x, fi * hw, hw)?;
            acc = tape.add(acc, s)?;
        }
        Ok(tape.scale(acc, T::one() / T::from_usize_lossy(f)))
    }
}

/// Token-wise `Linear([v_hr, v_hy])`. A missing HR branch contributes zeros.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, v_hr: Option<Var>, v_hy: Var) -> Result<Var> {
    let v_hr = match v_hr {
        Some(v) => v,
        None => {
            let zeros = Tensor::zeros(tape.shape(v_hy));
            tape.constant(zeros)
        }
    };
    if tape.shape(v_hr) != tape.shape(v_hy) {
        return Err(Error::shape("fuse", format!("{:?}", tape.shape(v_hy)), format!("{:?}", tape.shape(v_hr))));
    }
    let cat = tape.concat_cols(&[v_hr, v_hy])?;
    nn::linear(tape, store, &join(PREFIX, "fuse"), cat)
}

/// Full segment encoding of one hybrid sequence.
pub fn encode_segment<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &VideoEncoderConfig,
    seq: &HybridSequence<T>,
) -> Result<SegmentFeatures> {
    let grid = cfg.grid();
    let lr_frames: Vec<Var> = seq.lr_images.iter().map(|img| tape.constant(img.clone())).collect();
    let lr_maps = encode_lr(tape, store, &lr_frames)?;
    let lr_tok = lr_maps
        .into_iter()
        .map(|m| {
            let s = tape.shape(m);
            if (s[1], s[2]) != grid {
                return Err(Error::shape("encode_segment", format!("LR grid {grid:?}"), format!("{s:?}")));
            }
            lr_tokens(tape, store, m)
        })
        .collect::<Result<Vec<_>>>()?;

    let (hr_tok, v_hr) = match (&seq.hr_image, cfg.use_hr) {
        (Some(img), true) => {
            let x = tape.constant(img.clone());
            let (s3, s4) = encode_hr(tape, store, x)?;
            let v_hr = adapt_hr(tape, store, s4)?;
            let bridged = bridge_hr(tape, store, s3, grid)?;
            (Some(bridged), Some(v_hr))
        }
        (None, true) => return Err(Error::invalid("HR branch enabled but segment has no HR frame")),
        (_, false) => (None, None),
    };
    let v_hy = hybrid_transform(tape, store, cfg, &lr_tok, hr_tok)?;
    let v = fuse(tape, store, v_hr, v_hy)?;
    Ok(SegmentFeatures { v_hy, v_hr, v, grid })
}
