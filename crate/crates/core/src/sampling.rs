//! Segment planning and hybrid (one high-resolution + 2N low-resolution)
//! frame sampling.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Spatial ratio between high- and low-resolution frames.
pub const LR_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub clip_frames: usize,
    pub frames_per_segment: usize,
    /// Low-resolution sampling stride `r`, in frames.
    pub lr_rate: usize,
    pub windows: Vec<Range<usize>>,
}

impl SegmentPlan {
    /// `N`: low-resolution neighbours on each side of the high-resolution frame.
    pub fn lr_per_side(&self) -> usize {
        (self.frames_per_segment - 1) / 2
    }

    pub fn segment_count(&self) -> usize {
        self.windows.len()
    }
}

/// Splits a clip into `segment_count` equal contiguous windows; the last
/// window takes the remainder. Clips shorter than `segment_count` frames get
/// one-frame windows clamped to the clip.
pub fn plan_segments(
    clip_frames: usize,
    segment_count: usize,
    frames_per_segment: usize,
    lr_rate: usize,
) -> Result<SegmentPlan> {
    if frames_per_segment.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "frames per segment must be odd (one HR frame plus 2N LR frames), got {frames_per_segment}"
        )));
    }
    if segment_count == 0 || clip_frames == 0 || lr_rate == 0 {
        return Err(Error::invalid("segment count, clip length and LR rate must be positive"));
    }
    let base = clip_frames / segment_count;
    let windows = (0..segment_count)
        .map(|i| {
            if base == 0 {
                let s = i.min(clip_frames - 1);
                s..s + 1
            } else if i + 1 == segment_count {
                i * base..clip_frames
            } else {
                i * base..(i + 1) * base
            }
        })
        .collect();
    Ok(SegmentPlan {
        clip_frames,
        frames_per_segment,
        lr_rate,
        windows,
    })
}

/// Frame indices of one hybrid sequence. `lr` is ordered by offset
/// `k = -N..-1, 1..N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridIndices {
    pub hr: usize,
    pub lr: Vec<usize>,
}

impl HybridIndices {
    /// Indices `t + k*r` clamped to the window.
    pub fn around(window: &Range<usize>, t: usize, n: usize, r: usize) -> Self {
        let lo = window.start as isize;
        let hi = window.end as isize - 1;
        let lr = (-(n as isize)..=n as isize)
            .filter(|&k| k != 0)
            .map(|k| (t as isize + k * r as isize).clamp(lo, hi) as usize)
            .collect();
        HybridIndices { hr: t, lr }
    }

    /// All indices in temporal slot order with the HR frame in the middle.
    pub fn slots(&self) -> Vec<usize> {
        let n = self.lr.len() / 2;
        let mut s = self.lr[..n].to_vec();
        s.push(self.hr);
        s.extend_from_slice(&self.lr[n..]);
        s
    }
}

/// Picks the HR frame uniformly from the window interior
/// `[start + N*r, end - N*r)`, or the window midpoint when that is empty.
pub fn sample_hybrid(window: &Range<usize>, n: usize, r: usize, rng: &mut impl Rng) -> HybridIndices {
    let margin = n * r;
    let lo = window.start + margin;
    let hi = window.end.saturating_sub(margin);
    let t = if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        window.start + (window.end - window.start) / 2
    };
    HybridIndices::around(window, t, n, r)
}

/// Provider of full-resolution `[3, H, W]` frames.
pub trait FrameSource<T> {
    fn frame_count(&self) -> usize;
    fn frame_dims(&self) -> (usize, usize);
    fn frame(&self, index: usize) -> Result<Tensor<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// HR crop `(height, width)`; LR crops are a quarter of this.
    pub crop: (usize, usize),
    pub mode: CropMode,
    pub include_hr: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridSequence<T> {
    pub indices: HybridIndices,
    /// `[3, crop_h, crop_w]`; absent when the HR branch is disabled.
    pub hr_image: Option<Tensor<T>>,
    /// `[3, crop_h/4, crop_w/4]` each, ordered like `indices.lr`.
    pub lr_images: Vec<Tensor<T>>,
    /// Top-left corner of the HR crop in source pixels.
    pub crop_origin: (usize, usize),
}

fn crop<T: Scalar>(frame: &Tensor<T>, origin: (usize, usize), size: (usize, usize)) -> Tensor<T> {
    let s = frame.shape();
    let (h, w) = (s[1], s[2]);
    let (y0, x0) = origin;
    let (ch, cw) = size;
    let data = frame.data();
    let mut out = Vec::with_capacity(s[0] * ch * cw);
    for c in 0..s[0] {
        for y in y0..y0 + ch {
            let row = (c * h + y) * w;
            out.extend_from_slice(&data[row + x0..row + x0 + cw]);
        }
    }
    Tensor::new(vec![s[0], ch, cw], out).expect("crop within frame")
}

/// Loads one hybrid sequence with an explicit crop origin. LR frames are the
/// same crop window box-downscaled by [`LR_FACTOR`].
pub fn load_hybrid<T: Scalar, S: FrameSource<T> + ?Sized>(
    source: &S,
    indices: HybridIndices,
    origin: (usize, usize),
    opts: &LoadOptions,
) -> Result<HybridSequence<T>> {
    let (ch, cw) = opts.crop;
    let fetch = |i: usize| -> Result<Tensor<T>> {
        if i >= source.frame_count() {
            return Err(Error::FrameOutOfRange {
                index: i,
                count: source.frame_count(),
            });
        }
        let f = source.frame(i)?;
        let s = f.shape();
        if s.len() != 3 || s[1] < origin.0 + ch || s[2] < origin.1 + cw {
            return Err(Error::shape("load_frames", format!("frame covering crop {ch}x{cw} at {origin:?}"), format!("{s:?}")));
        }
        Ok(crop(&f, origin, opts.crop))
    };
    let hr_image = if opts.include_hr { Some(fetch(indices.hr)?) } else { None };
    let mut lr_images = Vec::with_capacity(indices.lr.len());
    for &i in &indices.lr {
        let full = fetch(i)?;
        let c = full.shape()[0];
        let data = kernels::area_downscale(full.data(), c, ch, cw, LR_FACTOR);
        lr_images.push(Tensor::new(vec![c, ch / LR_FACTOR, cw / LR_FACTOR], data)?);
    }
    Ok(HybridSequence {
        indices,
        hr_image,
        lr_images,
        crop_origin: origin,
    })
}

/// Samples and loads one hybrid sequence per planned segment.
pub fn load_frames<T: Scalar, S: FrameSource<T> + ?Sized>(
    plan: &SegmentPlan,
    source: &S,
    opts: &LoadOptions,
    rng: &mut impl Rng,
) -> Result<Vec<HybridSequence<T>>> {
    let (ch, cw) = opts.crop;
    if ch % LR_FACTOR != 0 || cw % LR_FACTOR != 0 || ch == 0 || cw == 0 {
        return Err(Error::invalid(format!("crop {ch}x{cw} must be a positive multiple of {LR_FACTOR}")));
    }
    let (fh, fw) = source.frame_dims();
    if fh < ch || fw < cw {
        return Err(Error::invalid(format!("crop {ch}x{cw} larger than frames {fh}x{fw}")));
    }
    let n = plan.lr_per_side();
    let mut out = Vec::with_capacity(plan.windows.len());
    for window in &plan.windows {
        let indices = sample_hybrid(window, n, plan.lr_rate, rng);
        let origin = match opts.mode {
            CropMode::Random => (
                rng.gen_range(0..=(fh - ch) / LR_FACTOR) * LR_FACTOR,
                rng.gen_range(0..=(fw - cw) / LR_FACTOR) * LR_FACTOR,
            ),
            CropMode::Center => ((fh - ch) / 2 / LR_FACTOR * LR_FACTOR, (fw - cw) / 2 / LR_FACTOR * LR_FACTOR),
        };
        out.push(load_hybrid(source, indices, origin, opts)?);
    }
    Ok(out)
}
