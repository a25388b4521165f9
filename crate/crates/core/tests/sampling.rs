//! Hybrid frame sampling against a source whose pixels encode the frame index.

mod common;

use common::rng;
use hdvila_core::error::{Error, Result};
use hdvila_core::numerics::Tensor;
use hdvila_core::sampling::{self, CropMode, FrameSource, HybridIndices, LoadOptions, LR_FACTOR};
use proptest::prelude::*;

/// Channel 0 holds the frame index, channels 1 and 2 the pixel row and column.
struct Painted {
    frames: usize,
    dims: (usize, usize),
}

impl FrameSource<f32> for Painted {
    fn frame_count(&self) -> usize {
        self.frames
    }
    fn frame_dims(&self) -> (usize, usize) {
        self.dims
    }
    fn frame(&self, index: usize) -> Result<Tensor<f32>> {
        let (h, w) = self.dims;
        Ok(Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            [index, y, x][c] as f32
        }))
    }
}

fn opts(crop: (usize, usize), mode: CropMode) -> LoadOptions {
    LoadOptions { crop, mode, include_hr: true }
}

#[test]
fn loaded_frames_match_sampled_indices() {
    let src = Painted { frames: 60, dims: (40, 48) };
    let plan = sampling::plan_segments(60, 3, 5, 2).unwrap();
    let seqs = sampling::load_frames(&plan, &src, &opts((16, 32), CropMode::Random), &mut rng(1)).unwrap();
    assert_eq!(seqs.len(), 3);
    for (s, w) in seqs.iter().zip(&plan.windows) {
        assert!(w.contains(&s.indices.hr));
        let hr = s.hr_image.as_ref().unwrap();
        assert_eq!(hr.shape(), &[3, 16, 32]);
        assert!(hr.data()[..16 * 32].iter().all(|&v| v == s.indices.hr as f32));
        let (y0, x0) = s.crop_origin;
        assert_eq!(y0 % LR_FACTOR, 0);
        assert_eq!(x0 % LR_FACTOR, 0);
        assert_eq!(hr.at(&[1, 0, 0]), y0 as f32);
        assert_eq!(hr.at(&[2, 15, 31]), (x0 + 31) as f32);
        assert_eq!(s.lr_images.len(), 4);
        for (img, &i) in s.lr_images.iter().zip(&s.indices.lr) {
            assert_eq!(img.shape(), &[3, 4, 8]);
            assert!(img.data()[..32].iter().all(|&v| v == i as f32));
            // Box average of a 4x4 block of row coordinates.
            assert_eq!(img.at(&[1, 1, 0]), y0 as f32 + 4.0 + 1.5);
            assert_eq!(img.at(&[2, 0, 2]), x0 as f32 + 8.0 + 1.5);
        }
    }
}

#[test]
fn lr_frames_are_quarter_resolution_of_hr_crop() {
    let src = Painted { frames: 10, dims: (64, 64) };
    let plan = sampling::plan_segments(10, 1, 3, 1).unwrap();
    let s = &sampling::load_frames(&plan, &src, &opts((64, 64), CropMode::Center), &mut rng(2)).unwrap()[0];
    let hr = s.hr_image.as_ref().unwrap();
    for img in &s.lr_images {
        assert_eq!(img.shape()[1] * LR_FACTOR, hr.shape()[1]);
        assert_eq!(img.shape()[2] * LR_FACTOR, hr.shape()[2]);
    }
}

#[test]
fn same_seed_same_sample() {
    let src = Painted { frames: 100, dims: (32, 32) };
    let plan = sampling::plan_segments(100, 4, 7, 3).unwrap();
    let o = opts((16, 16), CropMode::Random);
    let a = sampling::load_frames(&plan, &src, &o, &mut rng(3)).unwrap();
    let b = sampling::load_frames(&plan, &src, &o, &mut rng(3)).unwrap();
    assert_eq!(a, b);
    let c = sampling::load_frames(&plan, &src, &o, &mut rng(4)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn center_crop_is_centered() {
    let src = Painted { frames: 5, dims: (40, 56) };
    let plan = sampling::plan_segments(5, 1, 1, 1).unwrap();
    let s = &sampling::load_frames(&plan, &src, &opts((16, 32), CropMode::Center), &mut rng(5)).unwrap()[0];
    assert_eq!(s.crop_origin, (12, 12));
}

#[test]
fn hr_branch_can_be_skipped() {
    let src = Painted { frames: 5, dims: (16, 16) };
    let plan = sampling::plan_segments(5, 1, 3, 1).unwrap();
    let o = LoadOptions { include_hr: false, ..opts((16, 16), CropMode::Center) };
    let s = &sampling::load_frames(&plan, &src, &o, &mut rng(6)).unwrap()[0];
    assert!(s.hr_image.is_none());
    assert_eq!(s.lr_images.len(), 2);
}

#[test]
fn loader_errors() {
    let src = Painted { frames: 5, dims: (16, 16) };
    let plan = sampling::plan_segments(5, 1, 3, 1).unwrap();
    assert!(sampling::load_frames(&plan, &src, &opts((32, 16), CropMode::Center), &mut rng(7)).is_err());
    assert!(sampling::load_frames(&plan, &src, &opts((10, 16), CropMode::Center), &mut rng(7)).is_err());
    let idx = HybridIndices { hr: 9, lr: vec![] };
    match sampling::load_hybrid(&src, idx, (0, 0), &opts((16, 16), CropMode::Center)) {
        Err(Error::FrameOutOfRange { index: 9, count: 5 }) => {}
        other => panic!("expected out-of-range error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn lr_offsets_are_symmetric_and_in_window(
        start in 0usize..50, len in 1usize..60, n in 0usize..5, r in 1usize..5, seed in 0u64..1000,
    ) {
        let window = start..start + len;
        let idx = sampling::sample_hybrid(&window, n, r, &mut rng(seed));
        prop_assert!(window.contains(&idx.hr));
        prop_assert_eq!(idx.lr.len(), 2 * n);
        for &i in &idx.lr {
            prop_assert!(window.contains(&i));
        }
        if len > 2 * n * r {
            // Interior sampling keeps every neighbour at its exact offset.
            for k in 0..n {
                let before = idx.lr[n - 1 - k];
                let after = idx.lr[n + k];
                prop_assert_eq!(idx.hr - before, (k + 1) * r);
                prop_assert_eq!(after - idx.hr, (k + 1) * r);
            }
        }
        let slots = idx.slots();
        prop_assert_eq!(slots[n], idx.hr);
        prop_assert!(slots.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn plan_covers_clip_without_overlap(frames in 1usize..500, segs in 1usize..10) {
        let plan = sampling::plan_segments(frames, segs, 3, 1).unwrap();
        prop_assert_eq!(plan.segment_count(), segs);
        if frames >= segs {
            prop_assert_eq!(plan.windows[0].start, 0);
            prop_assert_eq!(plan.windows[segs - 1].end, frames);
            for w in plan.windows.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
        }
    }
}
